//! Dollar cost accounting and matching accuracy.

use std::sync::Mutex;

use rust_decimal::prelude::{FromPrimitive, ToPrimitive};
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::data::MatchLabel;
use crate::error::{Error, Result};
use crate::llm::Answer;

/// Crowdsourced labeling: $0.08 per task of ten pairs.
pub const LABEL_PRICE_PER_PAIR: Decimal = Decimal::from_parts(8, 0, 0, false, 3);
/// Input price per 1K tokens used when none is configured.
pub const DEFAULT_PRICE_PER_1K: Decimal = Decimal::from_parts(1, 0, 0, false, 2);

pub fn dollars(x: f64) -> Result<Decimal> {
    Decimal::from_f64(x)
        .filter(|d| !d.is_sign_negative())
        .ok_or_else(|| Error::InvalidParam(format!("not a valid price: {x}")))
}

pub fn api_cost(tokens: i64, price_per_1k: Decimal) -> Result<Decimal> {
    if tokens < 0 {
        return Err(Error::InvalidParam(format!(
            "token count must be nonnegative, got {tokens}"
        )));
    }
    Ok(Decimal::from(tokens) * price_per_1k / Decimal::ONE_THOUSAND)
}

pub fn labeling_cost(n: u64) -> Decimal {
    LABEL_PRICE_PER_PAIR * Decimal::from(n)
}

/// Round half away from zero to whole cents.
pub fn to_cents(d: Decimal) -> Decimal {
    d.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub api_tokens: u64,
    pub output_tokens: u64,
    pub labeled_pairs: u64,
    pub price_per_1k: Decimal,
    /// Output tokens are only priced when this is set.
    pub output_price_per_1k: Option<Decimal>,
    pub label_price: Decimal,
}

impl Default for CostLedger {
    fn default() -> Self {
        Self::new(DEFAULT_PRICE_PER_1K)
    }
}

impl CostLedger {
    pub fn new(price_per_1k: Decimal) -> Self {
        CostLedger {
            api_tokens: 0,
            output_tokens: 0,
            labeled_pairs: 0,
            price_per_1k,
            output_price_per_1k: None,
            label_price: LABEL_PRICE_PER_PAIR,
        }
    }

    pub fn deposit_prompt(&mut self, tokens: usize) {
        self.api_tokens += tokens as u64;
    }

    pub fn deposit_output(&mut self, tokens: usize) {
        self.output_tokens += tokens as u64;
    }

    pub fn charge_labels(&mut self, pairs: usize) {
        self.labeled_pairs += pairs as u64;
    }

    pub fn api_dollars(&self) -> Decimal {
        let input = Decimal::from(self.api_tokens) * self.price_per_1k / Decimal::ONE_THOUSAND;
        let output = self.output_price_per_1k.map_or(Decimal::ZERO, |p| {
            Decimal::from(self.output_tokens) * p / Decimal::ONE_THOUSAND
        });
        input + output
    }

    pub fn label_dollars(&self) -> Decimal {
        self.label_price * Decimal::from(self.labeled_pairs)
    }

    pub fn total_dollars(&self) -> Decimal {
        self.api_dollars() + self.label_dollars()
    }

    pub fn summary(&self, approximate_tokens: bool) -> LedgerSummary {
        let f = |d: Decimal| d.to_f64().unwrap_or(f64::NAN);
        LedgerSummary {
            api_tokens: self.api_tokens,
            output_tokens: self.output_tokens,
            labeled_pairs: self.labeled_pairs,
            price_per_1k: f(self.price_per_1k),
            output_price_per_1k: self.output_price_per_1k.map(f),
            api_dollars: f(self.api_dollars()),
            label_dollars: f(self.label_dollars()),
            total_dollars: f(self.total_dollars()),
            output_tokens_priced: self.output_price_per_1k.is_some(),
            approximate_tokens,
        }
    }
}

/// Concurrent token deposits from in-flight batches.
#[derive(Debug, Default)]
pub struct SharedLedger(Mutex<CostLedger>);

impl SharedLedger {
    pub fn new(ledger: CostLedger) -> Self {
        SharedLedger(Mutex::new(ledger))
    }

    pub fn update(&self, f: impl FnOnce(&mut CostLedger)) {
        f(&mut self.0.lock().expect("ledger lock poisoned"));
    }

    pub fn snapshot(&self) -> CostLedger {
        self.0.lock().expect("ledger lock poisoned").clone()
    }

    pub fn into_inner(self) -> CostLedger {
        self.0.into_inner().expect("ledger lock poisoned")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub api_tokens: u64,
    pub output_tokens: u64,
    pub labeled_pairs: u64,
    pub price_per_1k: f64,
    pub output_price_per_1k: Option<f64>,
    pub api_dollars: f64,
    pub label_dollars: f64,
    pub total_dollars: f64,
    pub output_tokens_priced: bool,
    pub approximate_tokens: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub unparsable_count: usize,
}

/// Confusion counts and P/R/F1. Unparsable answers count as non-matching.
pub fn evaluate(preds: &[Answer], gold: &[MatchLabel]) -> Result<MetricsReport> {
    if preds.len() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs gold labels",
            left: preds.len(),
            right: gold.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut unparsable) = (0, 0, 0, 0, 0);
    for (p, g) in preds.iter().zip(gold) {
        if *p == Answer::Unparsable {
            unparsable += 1;
        }
        match (p.as_prediction().is_match(), g.is_match()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        f1,
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
        unparsable_count: unparsable,
    })
}
