//! Recovery of the connector's commit log after damage to its tail.

use std::path::{Path, PathBuf};

use notelab::connector::{topic_file_stem, CommitLog, LogConfig};
use notelab_core::record::StreamRecord;
use proptest::prelude::*;

const TOPIC: &str = "lab/temp";

fn record(seq: u64, len: usize) -> StreamRecord {
    StreamRecord::from_southbound("p1", TOPIC, vec![b'a' + (seq % 26) as u8; len], seq, "dev@1", seq)
}

fn log_file(dir: &Path) -> PathBuf {
    dir.join(format!("{}.log", topic_file_stem(TOPIC)))
}

/// Appends the records and returns the file length after each one.
fn write(dir: &Path, lens: &[usize]) -> Vec<u64> {
    let log = CommitLog::open(dir, LogConfig::default()).unwrap();
    lens.iter()
        .enumerate()
        .map(|(i, &len)| {
            log.append(record(i as u64, len)).unwrap();
            std::fs::metadata(log_file(dir)).unwrap().len()
        })
        .collect()
}

fn recovered(dir: &Path) -> (CommitLog, Vec<u64>) {
    let log = CommitLog::open(dir, LogConfig::default()).unwrap();
    let offsets = log.read(TOPIC, 0, 1000).unwrap().iter().map(|r| r.offset.unwrap()).collect();
    (log, offsets)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Cutting the file anywhere keeps exactly the records that end before
    /// the cut, and appends continue densely after them.
    #[test]
    fn truncation_keeps_the_whole_prefix(lens in proptest::collection::vec(0usize..80, 1..12), cut in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let ends = write(dir.path(), &lens);
        let total = *ends.last().unwrap();
        let cut = cut.index(total as usize + 1) as u64;
        std::fs::OpenOptions::new().write(true).open(log_file(dir.path())).unwrap().set_len(cut).unwrap();

        let kept = ends.iter().filter(|&&e| e <= cut).count() as u64;
        let (log, offsets) = recovered(dir.path());
        prop_assert_eq!(offsets, (0..kept).collect::<Vec<_>>());
        let ack = log.append(record(1000, 3)).unwrap();
        prop_assert_eq!(ack.offset, Some(kept));
    }

    /// A flipped byte ends the log at the damaged record.
    #[test]
    fn corruption_stops_at_the_damaged_record(lens in proptest::collection::vec(1usize..80, 1..12), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let dir = tempfile::tempdir().unwrap();
        let ends = write(dir.path(), &lens);
        let path = log_file(dir.path());
        let mut bytes = std::fs::read(&path).unwrap();
        let at = at.index(bytes.len());
        bytes[at] ^= flip;
        std::fs::write(&path, &bytes).unwrap();

        let damaged = ends.iter().position(|&e| (at as u64) < e).unwrap() as u64;
        let (_, offsets) = recovered(dir.path());
        prop_assert_eq!(offsets, (0..damaged).collect::<Vec<_>>());
    }
}

#[test]
fn committed_offset_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &[5, 5, 5, 5]);
    {
        let log = CommitLog::open(dir.path(), LogConfig::default()).unwrap();
        log.topic(TOPIC).unwrap().set_committed(3).unwrap();
    }
    let log = CommitLog::open(dir.path(), LogConfig::default()).unwrap();
    let o = log.offsets()[TOPIC];
    assert_eq!((o.next_offset, o.committed), (4, 3));
}

#[test]
fn replayed_records_are_not_appended_twice() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &[5, 5, 5]);
    let log = CommitLog::open(dir.path(), LogConfig::default()).unwrap();
    let latest = log.append(record(2, 5)).unwrap();
    assert_eq!((latest.offset, latest.duplicate), (Some(2), true));
    // An older replay is still rejected; its offset is no longer tracked.
    let older = log.append(record(1, 5)).unwrap();
    assert_eq!((older.offset, older.duplicate), (None, true));
    assert_eq!(log.offsets()[TOPIC].next_offset, 3);
}
