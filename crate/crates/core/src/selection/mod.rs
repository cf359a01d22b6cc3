//! Allocation of in-context demonstrations to question batches.
//!
//! Four strategies: a fixed random sample shared by every batch, the k demos
//! nearest to a batch, the union of each question's k nearest demos, and
//! covering, which first picks a small demonstration set that reaches every
//! question within distance `t` and then gives each batch the cheapest
//! (in tokens) subset of it that still covers the batch.

mod cover;
pub mod worklist;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cover::{greedy_weighted_set_cover, harmonic, CoverInstance, CoverSolution};

use crate::batching::{nearest_rank, pairwise_distances, Batch};
use crate::data::{EntityPair, MatchLabel};
use crate::error::{Error, Result};
use crate::features::{l2, FeatureVector};
use crate::serialize::{serialize_pair, Tokenizer};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_COVER_PERCENTILE: f64 = 8.0;

/// Unlabeled candidate demonstrations and their feature vectors.
#[derive(Debug, Clone)]
pub struct DemonstrationPool {
    pub demos: Vec<EntityPair>,
    pub vectors: Vec<FeatureVector>,
}

impl DemonstrationPool {
    pub fn new(demos: Vec<EntityPair>, vectors: Vec<FeatureVector>) -> Result<Self> {
        if demos.len() != vectors.len() {
            return Err(Error::LengthMismatch {
                what: "pool demos vs vectors",
                left: demos.len(),
                right: vectors.len(),
            });
        }
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.kind != first.kind || v.len() != first.len()) {
                return Err(Error::InvalidParam("pool vectors must share kind and length".into()));
            }
        }
        Ok(DemonstrationPool { demos, vectors })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Token count of each serialized demo, used as its covering weight.
    pub fn token_weights(&self, tokenizer: Tokenizer) -> Vec<f64> {
        self.demos
            .iter()
            .map(|d| tokenizer.count(&serialize_pair(d)).max(1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationAssignment {
    pub batch_id: usize,
    pub demo_indices: Vec<usize>,
    /// Filled once the demos are annotated; aligned with `demo_indices`.
    pub labels: Vec<Option<MatchLabel>>,
    /// Batch questions no selected demo covers (covering strategy only).
    pub uncovered: Vec<usize>,
}

impl DemonstrationAssignment {
    pub fn new(batch_id: usize, demo_indices: Vec<usize>) -> Self {
        let labels = vec![None; demo_indices.len()];
        DemonstrationAssignment {
            batch_id,
            demo_indices,
            labels,
            uncovered: Vec::new(),
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverThreshold {
    pub t: f64,
    pub percentile: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Fixed,
    TopkBatch,
    TopkQuestion,
    #[default]
    Cover,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [Self::Fixed, Self::TopkBatch, Self::TopkQuestion, Self::Cover];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::TopkBatch => "topk_batch",
            Self::TopkQuestion => "topk_question",
            Self::Cover => "cover",
        }
    }
}

fn check_k(k: usize, pool_len: usize) -> Result<()> {
    if k > pool_len {
        return Err(Error::InvalidParam(format!("k = {k} exceeds pool size {pool_len}")));
    }
    Ok(())
}

/// `k` distinct pool indices drawn uniformly without replacement.
pub fn select_fixed(pool_len: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_k(k, pool_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool_len, k).into_vec())
}

/// Minimum distance between the demo vector and any question in the batch.
pub fn batch_demo_distance(batch: &Batch, demo: &FeatureVector, questions: &[FeatureVector]) -> f64 {
    batch
        .questions
        .iter()
        .map(|&q| l2(&questions[q].values, &demo.values))
        .fold(f64::INFINITY, f64::min)
}

/// Indices of the `k` smallest keys, ties broken by lower index.
fn k_smallest(keys: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = keys.enumerate().map(|(i, d)| (d, i)).collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return Vec::new();
    }
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, by_key);
        ranked.truncate(k);
    }
    ranked.sort_by(by_key);
    ranked.into_iter().map(|(_, i)| i).collect()
}

pub fn select_topk_batch(
    batch: &Batch,
    questions: &[FeatureVector],
    pool: &[FeatureVector],
    k: usize,
) -> Result<Vec<usize>> {
    check_k(k, pool.len())?;
    Ok(k_smallest(
        pool.iter().map(|d| batch_demo_distance(batch, d, questions)),
        k,
    ))
}

/// Union of every question's `k` nearest demos, first-seen order, duplicates merged.
pub fn select_topk_question(
    batch: &Batch,
    questions: &[FeatureVector],
    pool: &[FeatureVector],
    k: usize,
) -> Result<Vec<usize>> {
    check_k(k, pool.len())?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &q in &batch.questions {
        for d in k_smallest(pool.iter().map(|d| l2(&questions[q].values, &d.values)), k) {
            if seen.insert(d) {
                out.push(d);
            }
        }
    }
    Ok(out)
}

/// Nearest-rank percentile of all pairwise question distances.
pub fn compute_cover_threshold(questions: &[FeatureVector], percentile: f64) -> Result<CoverThreshold> {
    if questions.len() < 2 {
        return Err(Error::InvalidParam(
            "cover threshold needs at least two questions".into(),
        ));
    }
    let mut dists = pairwise_distances(questions, 0)?;
    let t = nearest_rank(&mut dists, percentile)?;
    Ok(CoverThreshold { t, percentile })
}

/// Questions (by index into `questions`) strictly closer than `t` to each demo.
fn coverage_sets(
    question_ids: &[usize],
    questions: &[FeatureVector],
    demo_ids: &[usize],
    pool: &[FeatureVector],
    t: f64,
) -> Vec<Vec<usize>> {
    demo_ids
        .iter()
        .map(|&d| {
            question_ids
                .iter()
                .copied()
                .filter(|&q| l2(&questions[q].values, &pool[d].values) < t)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    /// Pool indices in greedy selection order.
    pub selected: Vec<usize>,
    /// Questions no pool demo is within `t` of.
    pub uncovered: Vec<usize>,
}

/// Unit-weight greedy cover of all questions by pool demos.
pub fn generate_demo_set(questions: &[FeatureVector], pool: &[FeatureVector], t: f64) -> DemoSet {
    let question_ids: Vec<usize> = (0..questions.len()).collect();
    let demo_ids: Vec<usize> = (0..pool.len()).collect();
    let sets = coverage_sets(&question_ids, questions, &demo_ids, pool, t);
    let inst = CoverInstance::unit(question_ids, sets).expect("coverage sets are drawn from the universe");
    let sol = greedy_weighted_set_cover(&inst);
    DemoSet {
        selected: sol.selected,
        uncovered: sol.uncovered,
    }
}

/// Token-weighted greedy cover of one batch using only demos from `demo_set`.
pub fn cover_batch(
    batch: &Batch,
    demo_set: &[usize],
    questions: &[FeatureVector],
    pool: &[FeatureVector],
    t: f64,
    weights: &[f64],
) -> Result<DemonstrationAssignment> {
    let sets = coverage_sets(&batch.questions, questions, demo_set, pool, t);
    let set_weights = demo_set.iter().map(|&d| weights[d]).collect();
    let inst = CoverInstance::new(batch.questions.clone(), sets, set_weights)?;
    let sol = greedy_weighted_set_cover(&inst);
    let mut assignment = DemonstrationAssignment::new(batch.id, sol.selected.iter().map(|&i| demo_set[i]).collect());
    assignment.uncovered = sol.uncovered;
    Ok(assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub strategy: SelectionStrategy,
    pub k: usize,
    pub percentile: f64,
    pub seed: u64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            strategy: SelectionStrategy::Cover,
            k: DEFAULT_K,
            percentile: DEFAULT_COVER_PERCENTILE,
            seed: 0,
        }
    }
}

/// Demonstrations allocated to every batch of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub assignments: Vec<DemonstrationAssignment>,
    pub threshold: Option<CoverThreshold>,
    pub demo_set: Option<DemoSet>,
}

impl Selection {
    /// Distinct pool indices across all batches; each is labeled once.
    pub fn unique_demos(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .flat_map(|a| a.demo_indices.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn uncovered(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .assignments
            .iter()
            .flat_map(|a| a.uncovered.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

pub fn select_demonstrations(
    params: &SelectionParams,
    batches: &[Batch],
    questions: &[FeatureVector],
    pool: &DemonstrationPool,
    tokenizer: Tokenizer,
) -> Result<Selection> {
    let per_batch = |f: &dyn Fn(&Batch) -> Result<Vec<usize>>| -> Result<Vec<DemonstrationAssignment>> {
        batches
            .iter()
            .map(|b| Ok(DemonstrationAssignment::new(b.id, f(b)?)))
            .collect()
    };
    let vectors = &pool.vectors;
    Ok(match params.strategy {
        SelectionStrategy::Fixed => {
            let fixed = select_fixed(pool.len(), params.k, params.seed)?;
            Selection {
                assignments: per_batch(&|_| Ok(fixed.clone()))?,
                threshold: None,
                demo_set: None,
            }
        }
        SelectionStrategy::TopkBatch => Selection {
            assignments: per_batch(&|b| select_topk_batch(b, questions, vectors, params.k))?,
            threshold: None,
            demo_set: None,
        },
        SelectionStrategy::TopkQuestion => Selection {
            assignments: per_batch(&|b| select_topk_question(b, questions, vectors, params.k))?,
            threshold: None,
            demo_set: None,
        },
        SelectionStrategy::Cover => {
            let threshold = compute_cover_threshold(questions, params.percentile)?;
            let demo_set = generate_demo_set(questions, vectors, threshold.t);
            let weights = pool.token_weights(tokenizer);
            let assignments = batches
                .iter()
                .map(|b| cover_batch(b, &demo_set.selected, questions, vectors, threshold.t, &weights))
                .collect::<Result<_>>()?;
            Selection {
                assignments,
                threshold: Some(threshold),
                demo_set: Some(demo_set),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec(), FeatureKind::StructureLr).unwrap()
    }

    fn fvs(points: &[&[f64]]) -> Vec<FeatureVector> {
        points.iter().map(|p| fv(p)).collect()
    }

    fn batch(questions: &[usize]) -> Batch {
        Batch {
            id: 0,
            questions: questions.to_vec(),
        }
    }

    /// Questions q0, q1 on the left, q2 on the right; demos d0 above the left
    /// pair, d1 between, d2 far right. Threshold 5 in the covering example.
    fn three_question_layout() -> (Vec<FeatureVector>, Vec<FeatureVector>) {
        let questions = fvs(&[&[0.0, 0.0], &[2.0, 0.0], &[12.0, 0.0]]);
        let pool = fvs(&[&[1.0, 3.0], &[6.0, 0.0], &[13.0, 2.0]]);
        (questions, pool)
    }

    #[test]
    fn fixed_selection() {
        let mut all = select_fixed(8, 8, 3).unwrap();
        assert_eq!(all, select_fixed(8, 8, 3).unwrap());
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(select_fixed(8, 0, 3).unwrap().is_empty());
        assert!(select_fixed(3, 4, 3).is_err());
    }

    #[test]
    fn batch_distance_is_min() {
        let questions = fvs(&[&[3.0], &[5.0], &[2.0]]);
        assert_eq!(batch_demo_distance(&batch(&[0, 1, 2]), &fv(&[0.0]), &questions), 2.0);
        assert_eq!(batch_demo_distance(&batch(&[0, 1]), &fv(&[5.0]), &questions), 0.0);
    }

    #[test]
    fn topk_batch_on_three_questions() {
        let (q, pool) = three_question_layout();
        let b = batch(&[0, 1, 2]);
        // shortest edges: d2 (sqrt 5 to q2), d0 (sqrt 10 to q0 and q1), d1 (4 to q1)
        assert_eq!(select_topk_batch(&b, &q, &pool, 3).unwrap(), vec![2, 0, 1]);
        assert_eq!(select_topk_batch(&b, &q, &pool, 2).unwrap(), vec![2, 0]);
        assert!(select_topk_batch(&b, &q, &pool, 4).is_err());
    }

    #[test]
    fn topk_question_on_three_questions() {
        let (q, pool) = three_question_layout();
        let b = batch(&[0, 1, 2]);
        let per_q = select_topk_question(&b, &q, &pool, 1).unwrap();
        assert_eq!(per_q, vec![0, 2]);
        let by_batch = select_topk_batch(&b, &q, &pool, 3).unwrap();
        assert!(per_q.iter().all(|d| by_batch.contains(d)));

        let shared = fvs(&[&[0.0], &[0.1], &[0.2]]);
        let pool = fvs(&[&[0.1], &[9.0]]);
        assert_eq!(
            select_topk_question(&batch(&[0, 1, 2]), &shared, &pool, 1).unwrap(),
            vec![0]
        );
    }

    #[test]
    fn covering_on_three_questions() {
        let (q, pool) = three_question_layout();
        let set = generate_demo_set(&q, &pool, 5.0);
        assert_eq!(set.selected, vec![0, 2]);
        assert!(set.uncovered.is_empty());
    }

    #[test]
    fn single_demo_covers_everything() {
        let q = fvs(&[&[0.0], &[0.5], &[1.0]]);
        let pool = fvs(&[&[0.5], &[50.0]]);
        assert_eq!(generate_demo_set(&q, &pool, 1.0).selected, vec![0]);
    }

    #[test]
    fn threshold_is_strict() {
        let q = fvs(&[&[0.0]]);
        let pool = fvs(&[&[1.0]]);
        let set = generate_demo_set(&q, &pool, 1.0);
        assert!(set.selected.is_empty());
        assert_eq!(set.uncovered, vec![0]);
    }

    #[test]
    fn cover_threshold_examples() {
        let two = fvs(&[&[0.0], &[6.0]]);
        for p in [1.0, 8.0, 50.0, 100.0] {
            assert_eq!(compute_cover_threshold(&two, p).unwrap().t, 6.0);
        }
        // five collinear points spaced 1 apart: distances 1x4, 2x3, 3x2, 4x1.
        // sorted: [1,1,1,1,2,2,2,3,3,4]; nearest rank ceil(0.08*10)=1 -> 1,
        // ceil(0.5*10)=5 -> 2, ceil(0.75*10)=8 -> 3.
        let line = fvs(&[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0]]);
        assert_eq!(compute_cover_threshold(&line, 8.0).unwrap().t, 1.0);
        assert_eq!(compute_cover_threshold(&line, 50.0).unwrap().t, 2.0);
        assert_eq!(compute_cover_threshold(&line, 75.0).unwrap().t, 3.0);
        assert_eq!(compute_cover_threshold(&line, 100.0).unwrap().t, 4.0);
        assert!(compute_cover_threshold(&line[..1], 8.0).is_err());
    }

    #[test]
    fn batch_cover_prefers_cheaper_demo() {
        // q0..q3 on a line; d0 covers q0..q2, d1 covers q1..q3.
        let q = fvs(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let pool = fvs(&[&[1.0], &[2.0]]);
        let t = 1.5;
        let a = cover_batch(&batch(&[1, 2]), &[0, 1], &q, &pool, t, &[40.0, 25.0]).unwrap();
        assert_eq!(a.demo_indices, vec![1]);
        let a = cover_batch(&batch(&[1, 2]), &[0, 1], &q, &pool, t, &[25.0, 40.0]).unwrap();
        assert_eq!(a.demo_indices, vec![0]);
        // only d0 reaches q0, whatever it costs
        let a = cover_batch(&batch(&[0]), &[0, 1], &q, &pool, t, &[400.0, 1.0]).unwrap();
        assert_eq!(a.demo_indices, vec![0]);
    }

    fn cloud(n: usize) -> impl Strategy<Value = Vec<FeatureVector>> {
        prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), n).prop_map(|pts| {
            pts.into_iter()
                .map(|(x, y)| FeatureVector::new(vec![x, y], FeatureKind::StructureLr).unwrap())
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn topk_batch_matches_sorted_oracle(q in cloud(6), pool in cloud(10), k in 0usize..=10) {
            let b = batch(&[0, 2, 4]);
            let mut oracle: Vec<(f64, usize)> = pool
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let m = b.questions.iter().map(|&j| l2(&q[j].values, &d.values)).fold(f64::INFINITY, f64::min);
                    (m, i)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = oracle.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(select_topk_batch(&b, &q, &pool, k).unwrap(), expected);
        }
    }

    proptest! {
        #[test]
        fn topk_question_union_bound(q in cloud(8), pool in cloud(12), k in 1usize..5) {
            let b = batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
            let sel = select_topk_question(&b, &q, &pool, k).unwrap();
            prop_assert!(sel.len() <= k * b.questions.len());
            let distinct: BTreeSet<_> = sel.iter().collect();
            prop_assert_eq!(distinct.len(), sel.len());
        }

        #[test]
        fn topk_question_nearest_vs_topk_batch(q in cloud(4), pool in cloud(12)) {
            // A question's nearest demo is either in topk-batch(|B|) or is
            // outranked by |B| demos at least as close to the batch.
            let b = batch(&[0, 1, 2, 3]);
            let per_q = select_topk_question(&b, &q, &pool, 1).unwrap();
            let by_batch = select_topk_batch(&b, &q, &pool, b.questions.len()).unwrap();
            for d in per_q {
                let dist = batch_demo_distance(&b, &pool[d], &q);
                let closer = pool.iter().filter(|p| batch_demo_distance(&b, p, &q) <= dist).count();
                prop_assert!(by_batch.contains(&d) || closer > b.questions.len());
            }
        }

        #[test]
        fn cover_soundness(q in cloud(10), pool in cloud(15), split in 1usize..9) {
            let t = compute_cover_threshold(&q, 30.0).unwrap().t;
            let set = generate_demo_set(&q, &pool, t);
            let weights: Vec<f64> = (0..pool.len()).map(|i| 10.0 + i as f64).collect();
            for members in [(0..split).collect::<Vec<_>>(), (split..10).collect()] {
                let b = batch(&members);
                let a = cover_batch(&b, &set.selected, &q, &pool, t, &weights).unwrap();
                for &qi in &members {
                    let covered = a.demo_indices.iter().any(|&d| l2(&q[qi].values, &pool[d].values) < t);
                    prop_assert!(covered || a.uncovered.contains(&qi));
                    // uncovered by the demo set iff uncovered by the whole pool
                    let reachable = pool.iter().any(|d| l2(&q[qi].values, &d.values) < t);
                    prop_assert_eq!(reachable, !set.uncovered.contains(&qi));
                }
            }
        }

        #[test]
        fn coverage_grows_with_threshold(q in cloud(10), pool in cloud(12), t in 0.1f64..3.0, dt in 0.0f64..2.0) {
            let small = generate_demo_set(&q, &pool, t);
            let large = generate_demo_set(&q, &pool, t + dt);
            prop_assert!(large.uncovered.len() <= small.uncovered.len());
        }
    }
}
