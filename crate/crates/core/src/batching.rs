//! Question clustering (DBSCAN) and the three batching strategies.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{l2, FeatureVector};

pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_MIN_PTS: usize = 3;
pub const DEFAULT_EPS_PERCENTILE: f64 = 10.0;

/// Above this many point pairs, percentile estimates use a seeded sample.
pub(crate) const MAX_EXACT_PAIRS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidParam(format!("eps must be positive, got {eps}")));
        }
        if min_pts == 0 {
            return Err(Error::InvalidParam("min_pts must be at least 1".into()));
        }
        Ok(ClusterParams { eps, min_pts })
    }

    /// eps at the given percentile of pairwise distances (sampled for large inputs).
    pub fn from_percentile(vectors: &[FeatureVector], percentile: f64, min_pts: usize, seed: u64) -> Result<Self> {
        let mut dists = pairwise_distances(vectors, seed)?;
        let eps = nearest_rank(&mut dists, percentile)?;
        Self::new(eps.max(f64::EPSILON), min_pts)
    }
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)` of the sorted values.
pub(crate) fn nearest_rank(values: &mut [f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidParam("percentile of an empty set".into()));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidParam(format!(
            "percentile must be in (0, 100], got {percentile}"
        )));
    }
    let rank = ((percentile / 100.0) * values.len() as f64).ceil().max(1.0) as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank.min(values.len()) - 1, f64::total_cmp);
    Ok(*v)
}

fn check_uniform(vectors: &[FeatureVector]) -> Result<()> {
    let first = vectors.first().ok_or(Error::EmptyDataset)?;
    for v in vectors {
        if v.len() != first.len() {
            return Err(Error::DimensionMismatch {
                left: first.len(),
                right: v.len(),
            });
        }
    }
    Ok(())
}

/// All pairwise distances, or a seeded sample of `MAX_EXACT_PAIRS` of them.
pub(crate) fn pairwise_distances(vectors: &[FeatureVector], seed: u64) -> Result<Vec<f64>> {
    check_uniform(vectors)?;
    let n = vectors.len();
    if n < 2 {
        return Err(Error::InvalidParam(
            "need at least two vectors for pairwise distances".into(),
        ));
    }
    let total = n * (n - 1) / 2;
    if total <= MAX_EXACT_PAIRS {
        let mut out = Vec::with_capacity(total);
        for i in 0..n {
            for j in i + 1..n {
                out.push(l2(&vectors[i].values, &vectors[j].values));
            }
        }
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..MAX_EXACT_PAIRS)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            l2(&vectors[i].values, &vectors[j].values)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id per question; ids are `0..n_clusters`.
    pub labels: Vec<usize>,
    pub params: ClusterParams,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Question indices per cluster, in input order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (q, &c) in self.labels.iter().enumerate() {
            out[c].push(q);
        }
        out
    }

    pub fn from_labels(labels: Vec<usize>, params: ClusterParams) -> Self {
        ClusterAssignment { labels, params }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Point {
    Unvisited,
    Noise,
    Cluster(usize),
}

/// DBSCAN under Euclidean distance. Noise points become singleton clusters
/// numbered after the dense clusters, in input order.
pub fn cluster_questions(vectors: &[FeatureVector], params: ClusterParams) -> Result<ClusterAssignment> {
    check_uniform(vectors)?;
    let n = vectors.len();
    let neighbors = |p: usize| -> Vec<usize> {
        (0..n)
            .filter(|&q| l2(&vectors[p].values, &vectors[q].values) <= params.eps)
            .collect()
    };

    let mut state = vec![Point::Unvisited; n];
    let mut next_id = 0;
    for p in 0..n {
        if state[p] != Point::Unvisited {
            continue;
        }
        let seeds = neighbors(p);
        if seeds.len() < params.min_pts {
            state[p] = Point::Noise;
            continue;
        }
        let id = next_id;
        next_id += 1;
        state[p] = Point::Cluster(id);
        let mut queue: VecDeque<usize> = seeds.into();
        while let Some(q) = queue.pop_front() {
            match state[q] {
                Point::Cluster(_) => continue,
                Point::Noise => {
                    // border point
                    state[q] = Point::Cluster(id);
                    continue;
                }
                Point::Unvisited => state[q] = Point::Cluster(id),
            }
            let reach = neighbors(q);
            if reach.len() >= params.min_pts {
                queue.extend(reach.into_iter().filter(|&r| !matches!(state[r], Point::Cluster(_))));
            }
        }
    }

    let labels = state
        .into_iter()
        .map(|s| match s {
            Point::Cluster(id) => id,
            _ => {
                next_id += 1;
                next_id - 1
            }
        })
        .collect();
    Ok(ClusterAssignment { labels, params })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub id: usize,
    pub questions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchingStrategy {
    Random,
    Similar,
    #[default]
    Diverse,
}

impl BatchingStrategy {
    pub const ALL: [BatchingStrategy; 3] = [Self::Random, Self::Similar, Self::Diverse];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Similar => "similar",
            Self::Diverse => "diverse",
        }
    }
}

fn check_batch_size(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::InvalidParam("batch size must be at least 1".into()));
    }
    Ok(())
}

fn numbered(groups: Vec<Vec<usize>>) -> Vec<Batch> {
    groups
        .into_iter()
        .enumerate()
        .map(|(id, questions)| Batch { id, questions })
        .collect()
}

pub fn batch_random(questions: &[usize], b: usize, seed: u64) -> Result<Vec<Batch>> {
    check_batch_size(b)?;
    let mut order = questions.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(numbered(order.chunks(b).map(<[usize]>::to_vec).collect()))
}

/// Cluster members in cluster-id order, each cluster shuffled by `seed`.
fn shuffled_members(clusters: &ClusterAssignment, seed: u64) -> Vec<VecDeque<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clusters
        .members()
        .into_iter()
        .map(|mut m| {
            m.shuffle(&mut rng);
            m.into()
        })
        .collect()
}

/// Nonempty cluster ids ordered by remaining size (descending), then id.
fn by_size(groups: &[VecDeque<usize>]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
    ids.sort_by(|&x, &y| groups[y].len().cmp(&groups[x].len()).then(x.cmp(&y)));
    ids
}

/// Cluster-pure batches first; leftovers are merged around the largest
/// remaining cluster, preferring a partner whose size exactly fills the batch.
pub fn batch_similar(clusters: &ClusterAssignment, b: usize, seed: u64) -> Result<Vec<Batch>> {
    check_batch_size(b)?;
    let mut groups = shuffled_members(clusters, seed);
    let mut out = Vec::new();

    for g in groups.iter_mut() {
        while g.len() >= b {
            out.push(g.drain(..b).collect());
        }
    }

    loop {
        let order = by_size(&groups);
        let Some((&largest, rest)) = order.split_first() else {
            break;
        };
        let mut batch: Vec<usize> = groups[largest].drain(..).collect();
        let mut need = b - batch.len();
        if need > 0 {
            if let Some(&exact) = rest.iter().find(|&&c| groups[c].len() == need) {
                batch.extend(groups[exact].drain(..));
            } else {
                for &c in rest {
                    let take = need.min(groups[c].len());
                    batch.extend(groups[c].drain(..take));
                    need -= take;
                    if need == 0 {
                        break;
                    }
                }
            }
        }
        out.push(batch);
    }
    Ok(numbered(out))
}

/// One question from each of `b` distinct clusters while at least `b` clusters
/// remain, then round-robin over the survivors starting from the largest.
pub fn batch_diverse(clusters: &ClusterAssignment, b: usize, seed: u64) -> Result<Vec<Batch>> {
    check_batch_size(b)?;
    let mut groups = shuffled_members(clusters, seed);
    let mut out = Vec::new();

    loop {
        let order = by_size(&groups);
        if order.len() < b {
            break;
        }
        let mut picked = order[..b].to_vec();
        picked.sort_unstable();
        out.push(picked.iter().filter_map(|&c| groups[c].pop_front()).collect());
    }

    let survivors = by_size(&groups);
    let mut current = Vec::with_capacity(b);
    let mut remaining: usize = survivors.iter().map(|&c| groups[c].len()).sum();
    while remaining > 0 {
        for &c in &survivors {
            if let Some(q) = groups[c].pop_front() {
                current.push(q);
                remaining -= 1;
                if current.len() == b {
                    out.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    Ok(numbered(out))
}

pub fn make_batches(
    strategy: BatchingStrategy,
    clusters: &ClusterAssignment,
    b: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    match strategy {
        BatchingStrategy::Random => {
            let all: Vec<usize> = (0..clusters.labels.len()).collect();
            batch_random(&all, b, seed)
        }
        BatchingStrategy::Similar => batch_similar(clusters, b, seed),
        BatchingStrategy::Diverse => batch_diverse(clusters, b, seed),
    }
}
