//! Entity records, candidate pairs and Magellan-layout dataset ingestion.
//!
//! A dataset on disk is three CSV files: two entity tables sharing one
//! attribute schema (first column is the record id) and a pairs file whose
//! rows are `(ltable_id, rtable_id, label)` with `label` in `{0, 1}`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub value: String,
}

/// A tuple with `m` named attributes, in table column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub attrs: Vec<Attribute>,
}

impl EntityRecord {
    pub fn new<I, N, V>(id: impl Into<String>, attrs: I) -> Self
    where
        I: IntoIterator<Item = (N, V)>,
        N: Into<String>,
        V: Into<String>,
    {
        EntityRecord {
            id: id.into(),
            attrs: attrs
                .into_iter()
                .map(|(name, value)| Attribute {
                    name: name.into(),
                    value: value.into(),
                })
                .collect(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attrs.iter().map(|a| a.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLabel {
    Matching,
    NonMatching,
}

impl MatchLabel {
    pub fn is_match(self) -> bool {
        self == MatchLabel::Matching
    }

    /// `1` / `0`, the encoding used in pairs files and worklists.
    pub fn as_digit(self) -> &'static str {
        match self {
            MatchLabel::Matching => "1",
            MatchLabel::NonMatching => "0",
        }
    }
}

impl fmt::Display for MatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchLabel::Matching => "matching",
            MatchLabel::NonMatching => "non-matching",
        })
    }
}

impl FromStr for MatchLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "matching" | "match" | "yes" | "y" | "true" => Ok(MatchLabel::Matching),
            "0" | "non-matching" | "nonmatching" | "no" | "n" | "false" => Ok(MatchLabel::NonMatching),
            other => Err(Error::InvalidParam(format!("not a match label: {other:?}"))),
        }
    }
}

/// A candidate pair `(a, b)`; `gold` is absent for unlabeled pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPair {
    pub left: EntityRecord,
    pub right: EntityRecord,
    pub gold: Option<MatchLabel>,
}

impl EntityPair {
    pub fn new(left: EntityRecord, right: EntityRecord, gold: Option<MatchLabel>) -> Result<Self> {
        if !left.names().eq(right.names()) {
            return Err(Error::SchemaMismatch(format!(
                "pair ({}, {}) sides have different attribute names",
                left.id, right.id
            )));
        }
        Ok(EntityPair { left, right, gold })
    }

    pub fn unlabeled(&self) -> EntityPair {
        EntityPair {
            gold: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub schema: Vec<String>,
    pub pairs: Vec<EntityPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn match_count(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.gold == Some(MatchLabel::Matching))
            .count()
    }

    fn with_pairs(&self, suffix: &str, pairs: Vec<EntityPair>) -> Dataset {
        Dataset {
            name: format!("{}/{}", self.name, suffix),
            schema: self.schema.clone(),
            pairs,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub name: String,
    pub attributes: usize,
    pub pairs: usize,
    pub matches: usize,
}

impl From<&Dataset> for DatasetStats {
    fn from(ds: &Dataset) -> Self {
        DatasetStats {
            name: ds.name.clone(),
            attributes: ds.schema.len(),
            pairs: ds.len(),
            matches: ds.match_count(),
        }
    }
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    match err.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Malformed {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

struct Table {
    schema: Vec<String>,
    records: HashMap<String, EntityRecord>,
}

fn load_table(path: &Path) -> Result<Table> {
    let mut reader = open_csv(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: "header needs an id column and at least one attribute".into(),
        });
    }
    let schema: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = schema.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: format!("duplicate attribute {dup:?}"),
        });
    }

    let mut records = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: "empty id".into(),
            });
        }
        let record = EntityRecord::new(
            id.clone(),
            schema
                .iter()
                .zip(row.iter().skip(1))
                .map(|(n, v)| (n.clone(), v.to_string())),
        );
        if records.insert(id.clone(), record).is_some() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate id {id:?}"),
            });
        }
    }
    Ok(Table { schema, records })
}

fn dataset_name(pairs_path: &Path) -> String {
    pairs_path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| pairs_path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// Load a Magellan-style dataset from its two entity tables and labeled pairs file.
pub fn load_dataset(
    table_a_path: impl AsRef<Path>,
    table_b_path: impl AsRef<Path>,
    pairs_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let (a_path, b_path, pairs_path) = (table_a_path.as_ref(), table_b_path.as_ref(), pairs_path.as_ref());
    let table_a = load_table(a_path)?;
    let table_b = load_table(b_path)?;
    if table_a.schema != table_b.schema {
        return Err(Error::SchemaMismatch(format!(
            "{} has attributes {:?} but {} has {:?}",
            a_path.display(),
            table_a.schema,
            b_path.display(),
            table_b.schema
        )));
    }

    let mut reader = open_csv(pairs_path)?;
    let header = reader.headers().map_err(|e| csv_error(pairs_path, e))?.clone();
    let column = |name: &str, fallback: usize| {
        header
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .unwrap_or(fallback)
    };
    let (l_col, r_col, label_col) = (column("ltable_id", 0), column("rtable_id", 1), column("label", 2));
    if header.len() <= l_col.max(r_col) {
        return Err(Error::Malformed {
            path: pairs_path.to_path_buf(),
            line: 1,
            message: "pairs header needs left id and right id columns".into(),
        });
    }

    let mut pairs = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(pairs_path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let lookup = |table: &Table, col: usize| -> Result<EntityRecord> {
            let id = row[col].trim();
            table.records.get(id).cloned().ok_or_else(|| Error::DanglingId {
                path: pairs_path.to_path_buf(),
                line,
                id: id.to_string(),
            })
        };
        let left = lookup(&table_a, l_col)?;
        let right = lookup(&table_b, r_col)?;
        let gold = match row.get(label_col).map(str::trim) {
            None | Some("") => None,
            Some("1") => Some(MatchLabel::Matching),
            Some("0") => Some(MatchLabel::NonMatching),
            Some(other) => {
                return Err(Error::Malformed {
                    path: pairs_path.to_path_buf(),
                    line,
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        pairs.push(EntityPair { left, right, gold });
    }

    Ok(Dataset {
        name: dataset_name(pairs_path),
        schema: table_a.schema,
        pairs,
    })
}

/// Train/valid/test ratios plus shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidParam(format!(
                "split ratios must be nonnegative: {ratios:?}"
            )));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(SplitSpec { ratios, seed })
    }

    /// The 3:1:1 split used by the Magellan benchmarks.
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            ratios: [0.6, 0.2, 0.2],
            seed,
        }
    }

    pub fn ratios(&self) -> [f64; 3] {
        self.ratios
    }

    /// Part sizes for `n` items by the largest-remainder rule; ties go to the earlier part.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let quotas = self.ratios.map(|r| r * n as f64);
        let mut sizes = quotas.map(|q| q.floor() as usize);
        let assigned: usize = sizes.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| {
            let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
            rj.total_cmp(&ri).then(i.cmp(&j))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        sizes
    }
}

/// Seeded unstratified shuffle into (train, valid, test).
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let [n_train, n_valid, _] = spec.sizes(ds.len());
    let take = |idx: &[usize]| idx.iter().map(|&i| ds.pairs[i].clone()).collect::<Vec<_>>();
    Ok((
        ds.with_pairs("train", take(&order[..n_train])),
        ds.with_pairs("valid", take(&order[n_train..n_train + n_valid])),
        ds.with_pairs("test", take(&order[n_train + n_valid..])),
    ))
}
