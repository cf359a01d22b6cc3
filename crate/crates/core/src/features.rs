//! Feature extraction for entity pairs and the Euclidean distance between feature vectors.
//!
//! Structure-aware features compare the two sides attribute by attribute with a
//! string similarity (Levenshtein ratio or token Jaccard). Semantic features embed
//! the serialized pair through a pluggable [`Embedder`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::EntityPair;
use crate::error::{Error, Result};
use crate::serialize::serialize_pair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    StructureLr,
    StructureJac,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Lr,
    Jac,
}

impl Similarity {
    pub fn apply(self, a: &str, b: &str) -> f64 {
        match self {
            Similarity::Lr => levenshtein_ratio(a, b),
            Similarity::Jac => jaccard_sim(a, b),
        }
    }

    fn kind(self) -> FeatureKind {
        match self {
            Similarity::Lr => FeatureKind::StructureLr,
            Similarity::Jac => FeatureKind::StructureJac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub kind: FeatureKind,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, kind: FeatureKind) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite feature value {bad}")));
        }
        Ok(FeatureVector { values, kind })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn jaccard_tokens(s: &str) -> HashSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token-set Jaccard similarity. Tokens are lowercased and split on whitespace
/// and punctuation. Two empty token sets compare as 1, one empty set as 0.
pub fn jaccard_sim(a: &str, b: &str) -> f64 {
    let (ta, tb) = (jaccard_tokens(a), jaccard_tokens(b));
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let inter = ta.intersection(&tb).count();
            let union = ta.len() + tb.len() - inter;
            inter as f64 / union as f64
        }
    }
}

/// `1 - LED(a, b) / (len(a) + len(b))` over Unicode scalar values, without case folding.
pub fn levenshtein_ratio(a: &str, b: &str) -> f64 {
    let total = a.chars().count() + b.chars().count();
    if total == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / total as f64
}

/// Per-attribute similarity vector of length `m`.
pub fn extract_structure_features(p: &EntityPair, sim: Similarity) -> FeatureVector {
    let values = p
        .left
        .attrs
        .iter()
        .zip(&p.right.attrs)
        .map(|(a, b)| sim.apply(&a.value, &b.value))
        .collect();
    FeatureVector {
        values,
        kind: sim.kind(),
    }
}

/// A text encoder producing fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Signed feature hashing of lowercased word tokens, L2-normalized.
///
/// Deterministic across runs and platforms; stands in for a sentence encoder
/// when no embedding service is configured.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam("embedding dimension must be positive".into()));
        }
        Ok(HashingEmbedder { dim })
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: Self::DEFAULT_DIM }
    }
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> &str {
        "feature-hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let mut v = vec![0.0; self.dim];
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let digest = Sha256::digest(token.to_lowercase().as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % self.dim as u64;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

pub fn extract_semantic_features(p: &EntityPair, e: &dyn Embedder) -> Result<FeatureVector> {
    let fail = |message: String| Error::Embed {
        left_id: p.left.id.clone(),
        right_id: p.right.id.clone(),
        message,
    };
    let values = e.embed(&serialize_pair(p)).map_err(fail)?;
    if values.len() != e.dim() {
        return Err(fail(format!(
            "{} returned {} values, expected {}",
            e.name(),
            values.len(),
            e.dim()
        )));
    }
    FeatureVector::new(values, FeatureKind::Semantic).map_err(|err| fail(err.to_string()))
}

/// Choice of feature extractor for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    #[default]
    Lr,
    Jac,
    Semantic,
}

impl Extractor {
    pub fn extract(self, p: &EntityPair, embedder: &dyn Embedder) -> Result<FeatureVector> {
        match self {
            Extractor::Lr => Ok(extract_structure_features(p, Similarity::Lr)),
            Extractor::Jac => Ok(extract_structure_features(p, Similarity::Jac)),
            Extractor::Semantic => extract_semantic_features(p, embedder),
        }
    }

    pub fn extract_all(self, pairs: &[EntityPair], embedder: &dyn Embedder) -> Result<Vec<FeatureVector>> {
        pairs.iter().map(|p| self.extract(p, embedder)).collect()
    }
}

#[inline]
pub(crate) fn l2(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn euclidean_distance(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    if u.kind != v.kind {
        return Err(Error::InvalidParam(format!(
            "cannot compare {:?} and {:?} vectors",
            u.kind, v.kind
        )));
    }
    Ok(l2(&u.values, &v.values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EntityRecord;
    use proptest::prelude::*;

    /// Full-matrix Wagner-Fischer edit distance.
    fn led_oracle(a: &str, b: &str) -> usize {
        let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    fn pair(left: &[(&str, &str)], right: &[(&str, &str)]) -> EntityPair {
        EntityPair::new(
            EntityRecord::new("l", left.iter().copied()),
            EntityRecord::new("r", right.iter().copied()),
            None,
        )
        .unwrap()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_sim("here comes the fuzz", "here comes the fuzz"), 1.0);
        assert_eq!(jaccard_sim("alpha beta", "gamma delta"), 0.0);
        let (a, b): (HashSet<&str>, HashSet<&str>) = (["a", "b", "c"].into(), ["b", "c", "d"].into());
        let oracle = a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
        assert_eq!(oracle, 0.5);
        assert_eq!(jaccard_sim("a b c", "b c d"), oracle);
        assert_eq!(jaccard_sim("", ""), 1.0);
        assert_eq!(jaccard_sim("", "x"), 0.0);
        assert_eq!(jaccard_sim("Dance,Music", "music dance"), 1.0);
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein_ratio("Rashi", "Rashi"), 1.0);
        assert_eq!(levenshtein_ratio("", "abc"), 0.0);
        assert_eq!(levenshtein_ratio("", ""), 1.0);

        let (a, b) = ("Here Comes the Fuzz", "Here Comes The Fuzz [Explicit]");
        assert_eq!(led_oracle(a, b), 12);
        let expected = 1.0 - 12.0 / 49.0;
        assert!((levenshtein_ratio(a, b) - expected).abs() < 1e-12);
        assert!((0.70..=0.78).contains(&expected));
    }

    #[test]
    fn lr_is_order_sensitive_where_jaccard_is_not() {
        let (a, b) = ("silent night", "night silent");
        assert_eq!(jaccard_sim(a, b), 1.0);
        assert!(levenshtein_ratio(a, b) < 1.0);
    }

    #[test]
    fn structure_features_of_worked_pairs() {
        let q1 = pair(
            &[
                ("title", "Rashi"),
                ("album", "Here Comes the Fuzz"),
                ("genre", "Dance,Music,Hip-Hop"),
            ],
            &[
                ("title", "Rashi"),
                ("album", "Here Comes The Fuzz [Explicit]"),
                ("genre", "Music"),
            ],
        );
        let v = extract_structure_features(&q1, Similarity::Lr);
        assert_eq!(v.kind, FeatureKind::StructureLr);
        for (got, want) in v.values.iter().zip([1.0, 0.73, 0.42]) {
            assert!((got - want).abs() <= 0.05, "{:?}", v.values);
        }
    }

    #[test]
    fn identical_entities_give_all_ones() {
        let p = pair(
            &[("a", "x y"), ("b", ""), ("c", "Zed")],
            &[("a", "x y"), ("b", ""), ("c", "Zed")],
        );
        for sim in [Similarity::Lr, Similarity::Jac] {
            assert_eq!(extract_structure_features(&p, sim).values, vec![1.0; 3]);
        }
    }

    #[test]
    fn hashing_embedder_is_deterministic() {
        let e = HashingEmbedder::new(4).unwrap();
        let p = pair(&[("title", "Rashi")], &[("title", "Rashi [Explicit]")]);
        let v1 = extract_semantic_features(&p, &e).unwrap();
        let v2 = extract_semantic_features(&p.clone(), &e).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), 4);
        assert_eq!(v1.kind, FeatureKind::Semantic);
        let norm: f64 = v1.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hashing_embedder_regression_vector() {
        let e = HashingEmbedder::new(4).unwrap();
        let p = pair(&[("title", "Rashi")], &[("title", "Rashi [Explicit]")]);
        let v = extract_semantic_features(&p, &e).unwrap();
        assert_eq!(v.values, PINNED_STUB_VECTOR.to_vec());
    }

    const PINNED_STUB_VECTOR: [f64; 4] = [0.0, 0.7071067811865475, 0.0, -0.7071067811865475];

    struct Failing;
    impl Embedder for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, _: &str) -> std::result::Result<Vec<f64>, String> {
            Err("service unavailable".into())
        }
    }

    #[test]
    fn embedder_failure_carries_pair_ids() {
        let p = pair(&[("a", "x")], &[("a", "y")]);
        let err = extract_semantic_features(&p, &Failing).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(l, r)") && msg.contains("service unavailable"), "{msg}");
    }

    #[test]
    fn distance_examples() {
        let fv = |v: &[f64]| FeatureVector::new(v.to_vec(), FeatureKind::StructureLr).unwrap();
        assert_eq!(
            euclidean_distance(&fv(&[1.0, 0.0, 0.0]), &fv(&[1.0, 0.0, 0.0])).unwrap(),
            0.0
        );
        assert_eq!(euclidean_distance(&fv(&[0.0, 0.0]), &fv(&[3.0, 4.0])).unwrap(), 5.0);
        assert!(matches!(
            euclidean_distance(&fv(&[0.0]), &fv(&[0.0, 1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(FeatureVector::new(vec![f64::NAN], FeatureKind::Semantic).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn triangle_inequality(
            u in prop::collection::vec(-10.0f64..10.0, 5),
            v in prop::collection::vec(-10.0f64..10.0, 5),
            w in prop::collection::vec(-10.0f64..10.0, 5),
        ) {
            let (u, v, w) = (
                FeatureVector::new(u, FeatureKind::Semantic).unwrap(),
                FeatureVector::new(v, FeatureKind::Semantic).unwrap(),
                FeatureVector::new(w, FeatureKind::Semantic).unwrap(),
            );
            let uw = euclidean_distance(&u, &w).unwrap();
            let uv = euclidean_distance(&u, &v).unwrap();
            let vw = euclidean_distance(&v, &w).unwrap();
            prop_assert!(uw <= uv + vw + 1e-9);
            prop_assert_eq!(uv, euclidean_distance(&v, &u).unwrap());
        }
    }

    proptest! {
        #[test]
        fn similarities_symmetric_and_bounded(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            for sim in [Similarity::Lr, Similarity::Jac] {
                let s = sim.apply(&a, &b);
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert_eq!(s, sim.apply(&b, &a));
                prop_assert_eq!(sim.apply(&a, &a), 1.0);
            }
        }

        #[test]
        fn lr_matches_dp_oracle(a in "[a-dA-D ]{0,15}", b in "[a-dA-D ]{0,15}") {
            let total = a.chars().count() + b.chars().count();
            let expected = if total == 0 { 1.0 } else { 1.0 - led_oracle(&a, &b) as f64 / total as f64 };
            prop_assert!((levenshtein_ratio(&a, &b) - expected).abs() < 1e-12);
        }

        #[test]
        fn structure_vector_length_is_m(vals in prop::collection::vec(("[a-z ]{0,6}", "[a-z ]{0,6}"), 1..6)) {
            let names: Vec<String> = (0..vals.len()).map(|i| format!("attr{i}")).collect();
            let left = EntityRecord::new("l", names.iter().cloned().zip(vals.iter().map(|v| v.0.clone())));
            let right = EntityRecord::new("r", names.iter().cloned().zip(vals.iter().map(|v| v.1.clone())));
            let p = EntityPair::new(left, right, None).unwrap();
            for sim in [Similarity::Lr, Similarity::Jac] {
                let v = extract_structure_features(&p, sim);
                prop_assert_eq!(v.len(), vals.len());
                prop_assert!(v.values.iter().all(|x| x.is_finite()));
            }
        }
    }
}
