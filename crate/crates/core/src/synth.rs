//! Synthetic clustered pair generator for simulations and tests.
//!
//! Each pair belongs to one cluster with a center in Levenshtein-ratio space.
//! The right record is the left record with character substitutions, so the
//! per-attribute ratio of a pair lands near a Gaussian draw around its
//! cluster center. Gold labels are assigned per cluster.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EntityPair, EntityRecord, MatchLabel};
use crate::error::{Error, Result};

const WORDS: &[&str] = &[
    "river", "garden", "silver", "morning", "paper", "stone", "winter", "harbor", "yellow", "market", "forest",
    "velvet", "signal", "thunder", "orange", "crystal", "island", "shadow", "copper", "meadow", "lantern", "bridge",
    "summer", "violet", "rocket", "canyon", "marble", "falcon", "ember", "desert", "coral", "pepper",
];

const ATTR_NAMES: &[&str] = &["title", "artist", "album", "genre", "label", "year", "price", "length"];

/// Lowest reachable ratio when only substituting characters of equal-length strings.
const MIN_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub n_clusters: usize,
    pub n_attrs: usize,
    /// Characters per attribute value.
    pub value_len: usize,
    /// Standard deviation of the per-attribute ratio around the cluster center.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_pairs: 200,
            n_clusters: 5,
            n_attrs: 3,
            value_len: 44,
            spread: 0.03,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub pairs: Vec<EntityPair>,
    /// Cluster of each pair.
    pub cluster: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.to_string()));
        if self.n_clusters == 0 {
            return bad("need at least one cluster");
        }
        if self.n_attrs == 0 || self.n_attrs > ATTR_NAMES.len() {
            return bad(&format!("n_attrs must be in 1..={}", ATTR_NAMES.len()));
        }
        if self.value_len < 8 {
            return bad("value_len must be at least 8");
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return bad("spread must be finite and nonnegative");
        }
        Ok(())
    }
}

fn random_value(rng: &mut impl Rng, len: usize) -> String {
    let mut s = String::new();
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS.choose(rng).expect("word list is not empty"));
    }
    s.truncate(len);
    s
}

/// Substitute `m` letters at distinct non-space positions.
fn mutate(rng: &mut impl Rng, value: &str, m: usize) -> String {
    let mut chars: Vec<char> = value.chars().collect();
    let mut positions: Vec<usize> = (0..chars.len()).filter(|&i| chars[i] != ' ').collect();
    positions.shuffle(rng);
    for &i in positions.iter().take(m) {
        let old = chars[i];
        let mut c = old;
        while c == old {
            c = rng.gen_range(b'a'..=b'z') as char;
        }
        chars[i] = c;
    }
    chars.into_iter().collect()
}

fn centers(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = (0.58, 0.97);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut min_gap = 0.25;
    while out.len() < n {
        let mut placed = false;
        for _ in 0..2000 {
            let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(lo..hi)).collect();
            let far = out
                .iter()
                .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_gap);
            if far {
                out.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            min_gap *= 0.8;
        }
    }
    out
}

/// Generate `n_pairs` labeled pairs, round-robin over clusters.
///
/// Clusters whose center has an above-median mean ratio are matches; ties
/// favour matching so at least one cluster is always positive.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = centers(&mut rng, spec.n_clusters, spec.n_attrs);

    let mut by_mean: Vec<usize> = (0..spec.n_clusters).collect();
    let mean = |c: usize| centers[c].iter().sum::<f64>() / spec.n_attrs as f64;
    by_mean.sort_by(|&a, &b| mean(b).total_cmp(&mean(a)).then(a.cmp(&b)));
    let mut matching = vec![false; spec.n_clusters];
    for &c in by_mean.iter().take(spec.n_clusters.div_ceil(2)) {
        matching[c] = true;
    }

    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    let mut cluster = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        let c = i % spec.n_clusters;
        let mut left = Vec::with_capacity(spec.n_attrs);
        let mut right = Vec::with_capacity(spec.n_attrs);
        for (a, name) in ATTR_NAMES.iter().take(spec.n_attrs).enumerate() {
            let value = random_value(&mut rng, spec.value_len);
            let target = (centers[c][a] + noise.sample(&mut rng)).clamp(MIN_RATIO, 1.0);
            let letters = value.chars().filter(|&ch| ch != ' ').count();
            let m = (((1.0 - target) * 2.0 * spec.value_len as f64).round() as usize).min(letters);
            right.push((*name, mutate(&mut rng, &value, m)));
            left.push((*name, value));
        }
        let gold = if matching[c] {
            MatchLabel::Matching
        } else {
            MatchLabel::NonMatching
        };
        pairs.push(EntityPair::new(
            EntityRecord::new(format!("a{i}"), left),
            EntityRecord::new(format!("b{i}"), right),
            Some(gold),
        )?);
        cluster.push(c);
    }
    Ok(SynthData {
        pairs,
        cluster,
        centers,
    })
}

/// Paths of a dataset written in the Magellan layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub table_a: PathBuf,
    pub table_b: PathBuf,
    pub pairs: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            table_a: dir.join("tableA.csv"),
            table_b: dir.join("tableB.csv"),
            pairs: dir.join("pairs.csv"),
        }
    }
}

/// Write `pairs` as `tableA.csv`, `tableB.csv` and `pairs.csv` under `dir`.
pub fn write_magellan(dir: &Path, pairs: &[EntityPair]) -> Result<DatasetPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| Error::Malformed {
            path: p.clone(),
            line: 0,
            message: e.to_string(),
        }
    };

    for (path, left) in [(&paths.table_a, true), (&paths.table_b, false)] {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let mut header_done = false;
        for p in pairs {
            let rec = if left { &p.left } else { &p.right };
            if !header_done {
                let mut header = vec!["id"];
                header.extend(rec.names());
                w.write_record(&header).map_err(csv_err(path))?;
                header_done = true;
            }
            let mut row = vec![rec.id.as_str()];
            row.extend(rec.attrs.iter().map(|a| a.value.as_str()));
            w.write_record(&row).map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }

    let mut w = csv::Writer::from_path(&paths.pairs).map_err(csv_err(&paths.pairs))?;
    w.write_record(["ltable_id", "rtable_id", "label"])
        .map_err(csv_err(&paths.pairs))?;
    for p in pairs {
        let label = p.gold.map(|g| g.as_digit()).unwrap_or("");
        w.write_record([p.left.id.as_str(), p.right.id.as_str(), label])
            .map_err(csv_err(&paths.pairs))?;
    }
    w.flush().map_err(|e| Error::io(&paths.pairs, e))?;
    Ok(paths)
}
