//! Latency summary statistics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no samples")]
    EmptySampleSet,
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
}

/// Summary of a latency sample set, all values in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub min_s: f64,
    pub max_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
}

/// Min, lower quartile, median, upper quartile, max (nearest-rank).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn sorted_finite(samples: &[f64]) -> Result<Vec<f64>, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySampleSet);
    }
    if let Some(index) = samples.iter().position(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite { index });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Nearest-rank percentile over sorted data: the value at rank
/// `ceil(p/100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    // p * n is exact for integer p, so an integral quotient stays integral.
    let rank = libm::ceil(percentile * n as f64 / 100.0) as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Neumaier-compensated sum.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &x in values {
        let t = sum + x;
        if libm::fabs(sum) >= libm::fabs(x) {
            carry += (sum - t) + x;
        } else {
            carry += (x - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Sample standard deviation uses the `n - 1` divisor; a single sample has
/// zero spread.
pub fn compute_stats(samples: &[f64]) -> Result<LatencyStats, StatsError> {
    let sorted = sorted_finite(samples)?;
    let n = sorted.len();
    let mean = compensated_sum(&sorted) / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let sq: Vec<f64> = sorted.iter().map(|x| (x - mean) * (x - mean)).collect();
        libm::sqrt(compensated_sum(&sq) / (n - 1) as f64)
    };
    // Compensated mean can land a hair outside [min, max] for constant data.
    let mean = mean.clamp(sorted[0], sorted[n - 1]);
    Ok(LatencyStats {
        n,
        min_s: sorted[0],
        max_s: sorted[n - 1],
        mean_s: mean,
        std_s: std,
        p50_s: nearest_rank(&sorted, 50.0),
        p95_s: nearest_rank(&sorted, 95.0),
        p99_s: nearest_rank(&sorted, 99.0),
    })
}

pub fn five_number_summary(samples: &[f64]) -> Result<FiveNumber, StatsError> {
    let sorted = sorted_finite(samples)?;
    Ok(FiveNumber {
        min: sorted[0],
        q1: nearest_rank(&sorted, 25.0),
        median: nearest_rank(&sorted, 50.0),
        q3: nearest_rank(&sorted, 75.0),
        max: sorted[sorted.len() - 1],
    })
}
