use serde::{Deserialize, Serialize};

use crate::data::MatchLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Label(MatchLabel),
    Unparsable,
}

impl Answer {
    /// Unparsable answers are scored as non-matching.
    pub fn as_prediction(self) -> MatchLabel {
        match self {
            Answer::Label(l) => l,
            Answer::Unparsable => MatchLabel::NonMatching,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAnswer {
    /// Aligned with the prompt's question order.
    pub answers: Vec<Answer>,
    pub raw: String,
}

const PREFIXES: [&str; 4] = ["answer", "question", "a", "q"];

/// Reads `A3: yes`, `a3 - Yes.`, `Answer 3: NO`, `3) no` and similar.
fn parse_line(line: &str) -> Option<(usize, MatchLabel)> {
    let lower = line.to_lowercase();
    let mut tokens = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty());
    let first = tokens.next()?;

    let glued = PREFIXES
        .iter()
        .find_map(|p| first.strip_prefix(p))
        .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()));
    let index = if first.bytes().all(|b| b.is_ascii_digit()) {
        first
    } else if let Some(digits) = glued {
        digits
    } else if PREFIXES.contains(&first) {
        let next = tokens.next()?;
        if !next.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        next
    } else {
        return None;
    };
    let index: usize = index.parse().ok()?;

    let label = tokens.find_map(|t| match t {
        "yes" => Some(MatchLabel::Matching),
        "no" => Some(MatchLabel::NonMatching),
        _ => None,
    })?;
    Some((index, label))
}

/// Align a completion's numbered answers with `order`; the first answer line
/// for each number wins, missing numbers are `Unparsable`.
pub fn parse_batch_answers(raw: &str, order: &[usize]) -> BatchAnswer {
    let mut answers = vec![Answer::Unparsable; order.len()];
    for (index, label) in raw.lines().filter_map(parse_line) {
        if let Some(slot) = index.checked_sub(1).and_then(|i| answers.get_mut(i)) {
            if *slot == Answer::Unparsable {
                *slot = Answer::Label(label);
            }
        }
    }
    BatchAnswer {
        answers,
        raw: raw.to_string(),
    }
}
