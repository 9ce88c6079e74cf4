//! Text, reference-image and absent conditions in one embedding space.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{FaceParser, ImageEncoder, TextEncoder};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    None,
    Text,
    Image,
}

/// One side (hairstyle or hair color) of an edit request.
///
/// Absence is its own variant; it never carries an embedding, so no encoded
/// prompt or image can be mistaken for "no condition".
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    None,
    Text {
        prompt: String,
        embedding: Embedding,
    },
    Image {
        source: String,
        reference: Arc<Image>,
        embedding: Embedding,
        /// The parser found no hair, so the embedding encodes a black frame.
        empty_hair_mask: bool,
    },
}

impl Condition {
    pub fn kind(&self) -> ConditionKind {
        match self {
            Condition::None => ConditionKind::None,
            Condition::Text { .. } => ConditionKind::Text,
            Condition::Image { .. } => ConditionKind::Image,
        }
    }

    pub fn embedding(&self) -> Option<&Embedding> {
        match self {
            Condition::None => None,
            Condition::Text { embedding, .. } | Condition::Image { embedding, .. } => Some(embedding),
        }
    }

    pub fn reference(&self) -> Option<&Image> {
        match self {
            Condition::Image { reference, .. } => Some(reference),
            _ => None,
        }
    }

    pub fn is_present(&self) -> bool {
        !matches!(self, Condition::None)
    }

    /// Short human-readable provenance: the prompt or the reference id.
    pub fn describe(&self) -> String {
        match self {
            Condition::None => "none".to_string(),
            Condition::Text { prompt, .. } => format!("text:{prompt}"),
            Condition::Image {
                source,
                empty_hair_mask,
                ..
            } => {
                if *empty_hair_mask {
                    format!("image:{source} (empty hair mask)")
                } else {
                    format!("image:{source}")
                }
            }
        }
    }
}

/// The hairstyle and hair-color conditions of one edit.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPair {
    pub style: Condition,
    pub color: Condition,
}

impl ConditionPair {
    pub fn new(style: Condition, color: Condition) -> Self {
        Self { style, color }
    }

    pub fn unconditioned() -> Self {
        Self::new(Condition::None, Condition::None)
    }

    pub fn is_empty(&self) -> bool {
        !self.style.is_present() && !self.color.is_present()
    }
}

pub fn condition_from_text(text: &str, encoder: &dyn TextEncoder) -> Result<Condition> {
    if text.trim().is_empty() {
        return Err(Error::Input("condition text is empty".into()));
    }
    Ok(Condition::Text {
        prompt: text.to_string(),
        embedding: encoder.encode(text)?,
    })
}

/// Encodes the hair region only: the reference is multiplied by its hair
/// mask (zero background, full frame) before encoding.
pub fn condition_from_reference(
    img: &Image,
    source: &str,
    parser: &dyn FaceParser,
    encoder: &dyn ImageEncoder,
) -> Result<Condition> {
    let (h, w) = encoder.resolution();
    img.expect_resolution(h, w)?;
    let mask = parser.hair_mask(img)?;
    let masked = img.masked(&mask)?;
    Ok(Condition::Image {
        source: source.to_string(),
        reference: Arc::new(img.clone()),
        embedding: encoder.encode(&masked)?,
        empty_hair_mask: mask.sum() == 0.0,
    })
}

pub fn absent_condition() -> Condition {
    Condition::None
}

/// Hairstyle and hair-color prompt lists.
///
/// File format: UTF-8 lines; `[hairstyle]` and `[color]` open the two
/// sections, blank lines and lines starting with `#` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCorpus {
    pub hairstyles: Vec<String>,
    pub colors: Vec<String>,
}

const BUNDLED_PROMPTS: &str = include_str!("../data/prompts.txt");

impl PromptCorpus {
    pub fn parse(text: &str) -> Result<Self> {
        enum Section {
            Style,
            Color,
        }
        let mut section = None;
        let mut corpus = PromptCorpus {
            hairstyles: Vec::new(),
            colors: Vec::new(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[hairstyle]" => section = Some(Section::Style),
                "[color]" => section = Some(Section::Color),
                _ => match section {
                    Some(Section::Style) => corpus.hairstyles.push(line.to_string()),
                    Some(Section::Color) => corpus.colors.push(line.to_string()),
                    None => {
                        return Err(Error::Config(format!(
                            "prompt corpus line {}: prompt outside a section",
                            lineno + 1
                        )))
                    }
                },
            }
        }
        if corpus.hairstyles.is_empty() || corpus.colors.is_empty() {
            return Err(Error::Config(
                "prompt corpus needs at least one hairstyle and one color prompt".into(),
            ));
        }
        Ok(corpus)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_PROMPTS).expect("bundled corpus parses")
    }
}
