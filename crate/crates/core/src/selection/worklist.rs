//! Labeling worklist: one tab-separated row per selected demonstration.
//!
//! ```text
//! pool_index  pair                            label
//! 17          title: ... [SEP] title: ...     1
//! 42          title: ... [SEP] title: ...
//! ```
//!
//! The label slot is `1`, `0` or empty. The file is rewritten atomically after
//! every answer so an interrupted session resumes where it stopped.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EntityPair, MatchLabel};
use crate::error::{Error, Result};
use crate::serialize::serialize_pair;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorklistEntry {
    pub pool_index: usize,
    pub pair: String,
    pub label: Option<MatchLabel>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Worklist {
    pub entries: Vec<WorklistEntry>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    pool_index: usize,
    pair: String,
    label: String,
}

impl Worklist {
    pub fn from_pool(indices: &[usize], demos: &[EntityPair]) -> Self {
        Worklist {
            entries: indices
                .iter()
                .map(|&i| WorklistEntry {
                    pool_index: i,
                    pair: serialize_pair(&demos[i]),
                    label: None,
                })
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            })?;
        let mut entries = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let label = match row.label.trim() {
                "" => None,
                s => Some(s.parse().map_err(|_| Error::Malformed {
                    path: path.to_path_buf(),
                    line: entries.len() as u64 + 2,
                    message: format!("bad label {s:?}"),
                })?),
            };
            entries.push(WorklistEntry {
                pool_index: row.pool_index,
                pair: row.pair,
                label,
            });
        }
        Ok(Worklist { entries })
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tsv.tmp");
        {
            let mut writer = csv::WriterBuilder::new()
                .delimiter(b'\t')
                .from_path(&tmp)
                .map_err(|e| Error::Serde(e.to_string()))?;
            for e in &self.entries {
                writer
                    .serialize(Row {
                        pool_index: e.pool_index,
                        pair: e.pair.clone(),
                        label: e.label.map(|l| l.as_digit().to_string()).unwrap_or_default(),
                    })
                    .map_err(|e| Error::Serde(e.to_string()))?;
            }
            writer.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn labels(&self) -> BTreeMap<usize, MatchLabel> {
        self.entries
            .iter()
            .filter_map(|e| e.label.map(|l| (e.pool_index, l)))
            .collect()
    }

    pub fn unlabeled(&self) -> usize {
        self.entries.iter().filter(|e| e.label.is_none()).count()
    }

    /// Merge `other`'s labels into entries with an empty slot.
    pub fn absorb(&mut self, other: &Worklist) {
        let known = other.labels();
        for e in &mut self.entries {
            if e.label.is_none() {
                e.label = known.get(&e.pool_index).copied();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelSession {
    pub labeled: usize,
    pub skipped: usize,
    pub remaining: usize,
}

/// Prompt for every unlabeled entry on `output`, reading `y`/`n`/`s` answers
/// from `input`. Stops at end of input; everything answered so far is on disk.
pub fn label_interactive(path: &Path, mut input: impl BufRead, mut output: impl Write) -> Result<LabelSession> {
    let mut worklist = Worklist::read(path)?;
    let mut session = LabelSession::default();
    let total = worklist.entries.len();
    let io_err = |e| Error::io(path, e);

    let pending: Vec<usize> = (0..total).filter(|&i| worklist.entries[i].label.is_none()).collect();
    'entries: for &i in &pending {
        let entry = &worklist.entries[i];
        writeln!(
            output,
            "[{}/{}] demo #{}\n  {}",
            i + 1,
            total,
            entry.pool_index,
            entry.pair
        )
        .map_err(io_err)?;
        loop {
            write!(output, "match? [y/n/s] ").map_err(io_err)?;
            output.flush().map_err(io_err)?;
            let mut line = String::new();
            if input.read_line(&mut line).map_err(io_err)? == 0 {
                writeln!(output).map_err(io_err)?;
                break 'entries;
            }
            let label = match line.trim().to_ascii_lowercase().as_str() {
                "y" | "yes" => MatchLabel::Matching,
                "n" | "no" => MatchLabel::NonMatching,
                "s" | "skip" => {
                    session.skipped += 1;
                    continue 'entries;
                }
                _ => {
                    writeln!(output, "please answer y, n or s").map_err(io_err)?;
                    continue;
                }
            };
            worklist.entries[i].label = Some(label);
            worklist.write(path)?;
            session.labeled += 1;
            continue 'entries;
        }
    }
    session.remaining = worklist.unlabeled();
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("worklist.tsv");
        let wl = Worklist {
            entries: (0..3)
                .map(|i| WorklistEntry {
                    pool_index: i * 10,
                    pair: format!("name: item {i}\twith tab [SEP] name: item \"{i}\""),
                    label: None,
                })
                .collect(),
        };
        wl.write(&path).unwrap();
        path
    }

    #[test]
    fn round_trip_with_awkward_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = three(dir.path());
        let mut wl = Worklist::read(&path).unwrap();
        assert_eq!(wl.entries[1].pair, "name: item 1\twith tab [SEP] name: item \"1\"");
        wl.entries[2].label = Some(MatchLabel::NonMatching);
        wl.write(&path).unwrap();
        assert_eq!(Worklist::read(&path).unwrap(), wl);
    }

    #[test]
    fn answers_are_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let path = three(dir.path());
        let mut out = Vec::new();
        let s = label_interactive(&path, "y\nn\ny\n".as_bytes(), &mut out).unwrap();
        assert_eq!(
            s,
            LabelSession {
                labeled: 3,
                skipped: 0,
                remaining: 0
            }
        );
        let labels: Vec<_> = Worklist::read(&path).unwrap().entries.iter().map(|e| e.label).collect();
        assert_eq!(
            labels,
            vec![
                Some(MatchLabel::Matching),
                Some(MatchLabel::NonMatching),
                Some(MatchLabel::Matching)
            ]
        );
    }

    #[test]
    fn interrupted_session_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = three(dir.path());
        label_interactive(&path, "y\n".as_bytes(), Vec::new()).unwrap();
        let mut out = Vec::new();
        label_interactive(&path, "n\n".as_bytes(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("[2/3] demo #10"), "{text}");
        assert_eq!(Worklist::read(&path).unwrap().labels().len(), 2);
    }

    #[test]
    fn invalid_key_reprompts_and_skip_leaves_slot_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = three(dir.path());
        let mut out = Vec::new();
        let s = label_interactive(&path, "maybe\ny\ns\nq\nn\n".as_bytes(), &mut out).unwrap();
        assert_eq!(
            s,
            LabelSession {
                labeled: 2,
                skipped: 1,
                remaining: 1
            }
        );
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.matches("please answer").count(), 2);
        let wl = Worklist::read(&path).unwrap();
        assert_eq!(wl.entries[1].label, None);
        assert_eq!(wl.entries[2].label, Some(MatchLabel::NonMatching));
    }
}
