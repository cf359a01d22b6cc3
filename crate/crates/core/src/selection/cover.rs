//! Greedy weighted set cover.
//!
//! Repeatedly picks the candidate set with the best ratio of newly covered
//! elements to weight until coverage equals what the full candidate family can
//! reach. Uncoverable elements are reported instead of blocking termination.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverInstance {
    pub universe: Vec<usize>,
    pub candidate_sets: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl CoverInstance {
    pub fn new(universe: Vec<usize>, candidate_sets: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        if candidate_sets.len() != weights.len() {
            return Err(Error::LengthMismatch {
                what: "candidate sets vs weights",
                left: candidate_sets.len(),
                right: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidParam(format!("set weights must be positive, got {w}")));
        }
        let members: std::collections::HashSet<usize> = universe.iter().copied().collect();
        for (i, set) in candidate_sets.iter().enumerate() {
            if let Some(x) = set.iter().find(|x| !members.contains(x)) {
                return Err(Error::InvalidParam(format!(
                    "candidate set {i} contains {x}, not in universe"
                )));
            }
        }
        Ok(CoverInstance {
            universe,
            candidate_sets,
            weights,
        })
    }

    pub fn unit(universe: Vec<usize>, candidate_sets: Vec<Vec<usize>>) -> Result<Self> {
        let weights = vec![1.0; candidate_sets.len()];
        Self::new(universe, candidate_sets, weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverSolution {
    /// Candidate set indices in selection order.
    pub selected: Vec<usize>,
    /// Universe elements no candidate set contains.
    pub uncovered: Vec<usize>,
}

impl CoverSolution {
    pub fn total_weight(&self, inst: &CoverInstance) -> f64 {
        self.selected.iter().map(|&i| inst.weights[i]).sum()
    }
}

/// Heap entry: larger ratio first, then lower index.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    ratio: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ratio
            .total_cmp(&other.ratio)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Lazy evaluation of the greedy rule: marginal gains only shrink, so a stale
/// heap key is an upper bound and a refreshed entry that still beats the next
/// key is the true argmax. Ties go to the lowest set index.
pub fn greedy_weighted_set_cover(inst: &CoverInstance) -> CoverSolution {
    let position: HashMap<usize, usize> = inst.universe.iter().enumerate().map(|(pos, &id)| (id, pos)).collect();
    let sets: Vec<Vec<usize>> = inst
        .candidate_sets
        .iter()
        .map(|s| {
            let mut v: Vec<usize> = s.iter().filter_map(|x| position.get(x).copied()).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();

    let mut coverable = vec![false; inst.universe.len()];
    for s in &sets {
        for &p in s {
            coverable[p] = true;
        }
    }
    let target = coverable.iter().filter(|&&c| c).count();

    let mut heap: BinaryHeap<Candidate> = sets
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(index, s)| Candidate {
            ratio: s.len() as f64 / inst.weights[index],
            index,
        })
        .collect();

    let mut covered = vec![false; inst.universe.len()];
    let mut n_covered = 0;
    let mut selected = Vec::new();
    while n_covered < target {
        let Some(top) = heap.pop() else { break };
        let gain = sets[top.index].iter().filter(|&&p| !covered[p]).count();
        if gain == 0 {
            continue;
        }
        let fresh = Candidate {
            ratio: gain as f64 / inst.weights[top.index],
            index: top.index,
        };
        if heap.peek().is_some_and(|next| *next > fresh) {
            heap.push(fresh);
            continue;
        }
        for &p in &sets[top.index] {
            if !covered[p] {
                covered[p] = true;
                n_covered += 1;
            }
        }
        selected.push(top.index);
    }

    let uncovered = inst
        .universe
        .iter()
        .zip(&coverable)
        .filter(|(_, &c)| !c)
        .map(|(&id, _)| id)
        .collect();
    CoverSolution { selected, uncovered }
}

/// `H_k = 1 + 1/2 + ... + 1/k`.
pub fn harmonic(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / i as f64).sum()
}
