use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

impl Speaker {
    pub fn from_source_id(id: i64) -> Option<Self> {
        match id {
            0 => Some(Speaker::User),
            1 => Some(Speaker::Bot),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    None,
    SharedHere,
    Carried,
    Dummy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub image_role: ImageRole,
}

impl Turn {
    pub fn text(speaker: Speaker, text: impl Into<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
            image_ref: None,
            image_role: ImageRole::None,
        }
    }

    pub fn shared(speaker: Speaker, text: impl Into<String>, image: impl Into<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
            image_ref: Some(image.into()),
            image_role: ImageRole::SharedHere,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "valid" | "dev" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub dialogues: Vec<Dialogue>,
}

/// An image slot: a concrete image id or the all-zero dummy.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ImageKey {
    Dummy,
    Id(String),
}

impl ImageKey {
    pub const DUMMY: &'static str = "DUMMY";

    pub fn id(&self) -> Option<&str> {
        match self {
            ImageKey::Dummy => None,
            ImageKey::Id(s) => Some(s),
        }
    }
}

impl Serialize for ImageKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.id().unwrap_or(Self::DUMMY))
    }
}

impl<'de> Deserialize<'de> for ImageKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == Self::DUMMY {
            ImageKey::Dummy
        } else {
            ImageKey::Id(s)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverSample {
    pub dialogue_id: String,
    pub history: Vec<Turn>,
    pub gold_image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSample {
    pub dialogue_id: String,
    pub history: Vec<Turn>,
    pub response: Turn,
    pub conditioning_image: ImageKey,
}
