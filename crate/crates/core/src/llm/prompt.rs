use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{EntityPair, MatchLabel};
use crate::error::{Error, Result};
use crate::serialize::{serialize_pair, Tokenizer};

pub const DEFAULT_TASK_DESCRIPTION: &str = "You are matching records for entity resolution. \
Each pair lists two records as \"attribute: value\" fields separated by [SEP]. \
Decide whether the two records refer to the same real-world entity.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub batch_id: usize,
    pub text: String,
    /// Question ids in the order they appear as Q1, Q2, ...
    pub question_order: Vec<usize>,
    pub token_count: usize,
}

fn yes_no(label: MatchLabel) -> &'static str {
    match label {
        MatchLabel::Matching => "Yes",
        MatchLabel::NonMatching => "No",
    }
}

/// Render description, labeled demonstrations, then numbered questions.
///
/// `demos` are `(pool_index, pair)`; each must carry a label. `questions` are
/// `(question_id, pair)`.
pub fn build_batch_prompt(
    batch_id: usize,
    desc: &str,
    demos: &[(usize, &EntityPair)],
    questions: &[(usize, &EntityPair)],
    tokenizer: Tokenizer,
) -> Result<PromptBundle> {
    if questions.is_empty() {
        return Err(Error::InvalidParam(format!("batch {batch_id} has no questions")));
    }
    let mut text = String::new();
    text.push_str(desc.trim_end());
    text.push_str("\n\n");

    if !demos.is_empty() {
        text.push_str("Examples:\n");
        for &(index, demo) in demos {
            let label = demo.gold.ok_or(Error::UnlabeledDemo(index))?;
            let _ = writeln!(text, "Pair: {}\nAnswer: {}", serialize_pair(demo), yes_no(label));
        }
        text.push('\n');
    }

    text.push_str("Questions:\n");
    for (n, (_, q)) in questions.iter().enumerate() {
        let _ = writeln!(text, "Q{}: {}", n + 1, serialize_pair(q));
    }
    text.push_str("\nAnswer every question on its own line as \"A<n>: Yes\" or \"A<n>: No\".\n");

    let token_count = tokenizer.count(&text);
    Ok(PromptBundle {
        batch_id,
        text,
        question_order: questions.iter().map(|(id, _)| *id).collect(),
        token_count,
    })
}

/// Tokens spent prompting each question alone with its own demonstrations.
pub fn standard_prompting_tokens<'a>(
    desc: &str,
    per_question: impl IntoIterator<Item = (&'a EntityPair, Vec<(usize, &'a EntityPair)>)>,
    tokenizer: Tokenizer,
) -> Result<usize> {
    per_question
        .into_iter()
        .enumerate()
        .map(|(i, (q, demos))| Ok(build_batch_prompt(i, desc, &demos, &[(i, q)], tokenizer)?.token_count))
        .sum()
}
