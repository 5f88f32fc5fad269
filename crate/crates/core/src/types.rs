//! Domain vocabulary shared by every module.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The five modalities the toolkit knows about.
///
/// Text, image and video live in one frozen space; audio and points each get
/// a trainable projector into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
    Audio,
    Points,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Text,
        Modality::Image,
        Modality::Video,
        Modality::Audio,
        Modality::Points,
    ];
    pub const PROJECTED: [Modality; 2] = [Modality::Audio, Modality::Points];
    pub const FROZEN: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Video];

    pub fn is_projected(self) -> bool {
        matches!(self, Modality::Audio | Modality::Points)
    }

    pub fn is_frozen(self) -> bool {
        !self.is_projected()
    }

    /// Byte tag used in the embedding file header.
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Video => 2,
            Modality::Audio => 3,
            Modality::Points => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Modality> {
        Modality::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Points => "points",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "video" => Ok(Modality::Video),
            "audio" => Ok(Modality::Audio),
            "points" | "pc" | "pointcloud" => Ok(Modality::Points),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

/// Dataset-qualified item identifier, written as `dataset/local_id`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId {
    pub dataset: String,
    pub local_id: u64,
}

impl ItemId {
    pub const MAX_DATASET_LEN: usize = 32;

    pub fn new(dataset: impl Into<String>, local_id: u64) -> Result<Self> {
        let dataset = dataset.into();
        if dataset.is_empty()
            || dataset.len() > Self::MAX_DATASET_LEN
            || !dataset.is_ascii()
            || dataset.contains('/')
        {
            return Err(Error::InvalidArgument(format!(
                "dataset tag {dataset:?} must be 1..=32 ASCII chars without '/'"
            )));
        }
        Ok(Self { dataset, local_id })
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset, self.local_id)
    }
}

impl FromStr for ItemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dataset, local) = s
            .rsplit_once('/')
            .ok_or_else(|| Error::InvalidArgument(format!("item id {s:?} lacks '/'")))?;
        let local_id = local
            .parse::<u64>()
            .map_err(|_| Error::InvalidArgument(format!("item id {s:?} has a bad local id")))?;
        ItemId::new(dataset, local_id)
    }
}

impl Serialize for ItemId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ItemId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Per-row metadata carried next to an embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRecord {
    pub id: ItemId,
    pub modality: Modality,
    pub uri: Option<String>,
    pub caption: Option<String>,
    pub splits: BTreeSet<Split>,
}

impl ItemRecord {
    pub fn train(id: ItemId, modality: Modality) -> Self {
        Self {
            id,
            modality,
            uri: None,
            caption: None,
            splits: BTreeSet::from([Split::Train]),
        }
    }

    pub fn eval(id: ItemId, modality: Modality) -> Self {
        Self {
            splits: BTreeSet::from([Split::Eval]),
            ..Self::train(id, modality)
        }
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.caption = Some(caption.into());
        self
    }

    pub fn with_uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = Some(uri.into());
        self
    }

    pub fn is_eval(&self) -> bool {
        self.splits.contains(&Split::Eval)
    }
}

/// Retrieval fan-out and multiplicity caps for greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Neighbours retrieved per caption.
    pub k: usize,
    /// Maximum accepted matches per caption.
    pub n: usize,
    /// Maximum accepted matches per candidate item.
    pub m_cap: usize,
}

impl MatchConfig {
    pub fn new(k: usize, n: usize, m_cap: usize) -> Result<Self> {
        if k == 0 || n == 0 || m_cap == 0 || k < n {
            return Err(Error::InvalidArgument(format!(
                "match config needs positive k >= n and m_cap (got k={k}, n={n}, m_cap={m_cap})"
            )));
        }
        Ok(Self { k, n, m_cap })
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { k: 8, n: 3, m_cap: 1 }
    }
}
