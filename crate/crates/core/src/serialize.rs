//! Text rendering of entities and pairs, and token counting for cost estimates.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use tiktoken_rs::CoreBPE;

use crate::data::{EntityPair, EntityRecord};

pub const ATTR_SEPARATOR: &str = ", ";
pub const PAIR_SEPARATOR: &str = " [SEP] ";

/// `attr_1: val_1, attr_2: val_2, ..., attr_m: val_m`
pub fn serialize_entity(e: &EntityRecord) -> String {
    let mut out = String::new();
    for (i, attr) in e.attrs.iter().enumerate() {
        if i > 0 {
            out.push_str(ATTR_SEPARATOR);
        }
        out.push_str(&attr.name);
        out.push_str(": ");
        out.push_str(&attr.value);
    }
    out
}

pub fn serialize_pair(p: &EntityPair) -> String {
    let mut out = serialize_entity(&p.left);
    out.push_str(PAIR_SEPARATOR);
    out.push_str(&serialize_entity(&p.right));
    out
}

/// Token counting scheme used for prompt cost estimates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// The `cl100k_base` byte-pair encoding used by the GPT-3.5/GPT-4 family.
    #[default]
    Cl100k,
    /// `ceil(bytes / 4)`; reports mark these counts as approximate.
    Approximate,
}

fn cl100k() -> &'static CoreBPE {
    static BPE: OnceLock<CoreBPE> = OnceLock::new();
    BPE.get_or_init(|| tiktoken_rs::cl100k_base().expect("bundled cl100k vocabulary"))
}

impl Tokenizer {
    pub fn count(self, text: &str) -> usize {
        if text.is_empty() {
            return 0;
        }
        match self {
            Tokenizer::Cl100k => cl100k().encode_ordinary(text).len(),
            Tokenizer::Approximate => text.len().div_ceil(4),
        }
    }

    pub fn is_approximate(self) -> bool {
        self == Tokenizer::Approximate
    }
}

pub fn count_tokens(text: &str) -> usize {
    Tokenizer::default().count(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedText {
    pub text: String,
    pub token_count: usize,
}

impl SerializedText {
    pub fn new(text: String) -> Self {
        let token_count = count_tokens(&text);
        SerializedText { text, token_count }
    }

    pub fn of_pair(p: &EntityPair) -> Self {
        Self::new(serialize_pair(p))
    }
}
