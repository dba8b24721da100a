//! MQTT-style topic names and subscription filters.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

const LEVEL_SEPARATOR: char = '/';
const SINGLE_LEVEL: &str = "+";
const MULTI_LEVEL: &str = "#";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic contains a NUL character")]
    Nul,
    #[error("publish topic contains wildcard character {0:?}")]
    Wildcard(char),
    #[error("invalid topic filter: {0}")]
    InvalidFilter(&'static str),
}

/// A concrete topic name, as used on publish.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Topic(String);

impl Topic {
    pub fn new(value: impl Into<String>) -> Result<Self, TopicError> {
        let value = value.into();
        if value.is_empty() {
            return Err(TopicError::Empty);
        }
        if value.contains('\0') {
            return Err(TopicError::Nul);
        }
        if let Some(c) = value.chars().find(|c| *c == '+' || *c == '#') {
            return Err(TopicError::Wildcard(c));
        }
        Ok(Topic(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> core::str::Split<'_, char> {
        self.0.split(LEVEL_SEPARATOR)
    }
}

impl TryFrom<String> for Topic {
    type Error = TopicError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Topic::new(value)
    }
}

impl From<Topic> for String {
    fn from(t: Topic) -> String {
        t.0
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum FilterLevel {
    Exact(String),
    SingleLevel,
    MultiLevel,
}

/// A subscription filter; may contain `+` and a trailing `#`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<FilterLevel>,
}

impl TopicFilter {
    pub fn new(value: impl Into<String>) -> Result<Self, TopicError> {
        let raw = value.into();
        if raw.is_empty() {
            return Err(TopicError::Empty);
        }
        if raw.contains('\0') {
            return Err(TopicError::Nul);
        }
        let parts: Vec<&str> = raw.split(LEVEL_SEPARATOR).collect();
        let last = parts.len() - 1;
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                MULTI_LEVEL if i == last => FilterLevel::MultiLevel,
                MULTI_LEVEL => return Err(TopicError::InvalidFilter("'#' must be the last level")),
                SINGLE_LEVEL => FilterLevel::SingleLevel,
                p if p.contains('#') || p.contains('+') => {
                    return Err(TopicError::InvalidFilter("wildcards must occupy a whole level"))
                }
                p => FilterLevel::Exact(p.to_string()),
            };
            levels.push(level);
        }
        Ok(TopicFilter { raw, levels })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// MQTT 3.1.1 matching: `+` is one level, `#` is any suffix including the
    /// parent level, and wildcards in the first level never match `$` topics.
    pub fn matches(&self, topic: &Topic) -> bool {
        let topic_levels: Vec<&str> = topic.levels().collect();
        if topic.as_str().starts_with('$')
            && matches!(self.levels.first(), Some(FilterLevel::SingleLevel | FilterLevel::MultiLevel))
        {
            return false;
        }
        let mut i = 0;
        for level in &self.levels {
            match level {
                FilterLevel::MultiLevel => return true,
                FilterLevel::SingleLevel => {
                    if i >= topic_levels.len() {
                        return false;
                    }
                }
                FilterLevel::Exact(s) => {
                    if topic_levels.get(i) != Some(&s.as_str()) {
                        return false;
                    }
                }
            }
            i += 1;
        }
        i == topic_levels.len()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// String-level convenience over [`TopicFilter::matches`].
pub fn topic_matches(filter: &str, topic: &str) -> Result<bool, TopicError> {
    let filter = TopicFilter::new(filter)?;
    let topic = Topic::new(topic)?;
    Ok(filter.matches(&topic))
}
