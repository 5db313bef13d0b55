//! Append-only run journal (JSON Lines).
//!
//! Every event is one line and one transaction: the run state is exactly
//! the fold of the events in the file. Label files are written before the
//! event that makes them count, so a crash leaves at worst orphan label
//! files, which resume removes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::TrainingReport;
use crate::error::{Error, Result};
use crate::eval::HeadEval;
use crate::gram::LossReport;
use crate::model::Status;

/// Sample counts per status.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pools {
    pub unlabeled: usize,
    pub key_pending_annotation: usize,
    pub labeled_human: usize,
    pub labeled_self: usize,
    pub excluded: usize,
}

impl Pools {
    pub fn count(&mut self, s: Status) {
        *self.slot(s) += 1;
    }

    fn slot(&mut self, s: Status) -> &mut usize {
        match s {
            Status::Unlabeled => &mut self.unlabeled,
            Status::KeyPendingAnnotation => &mut self.key_pending_annotation,
            Status::LabeledHuman => &mut self.labeled_human,
            Status::LabeledSelf => &mut self.labeled_self,
            Status::Excluded => &mut self.excluded,
        }
    }

    pub fn total(&self) -> usize {
        self.unlabeled + self.key_pending_annotation + self.labeled_human + self.labeled_self + self.excluded
    }

    pub fn training(&self) -> usize {
        self.labeled_human + self.labeled_self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Approve,
    Reject,
    Edit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The unlabeled pool fell below the termination fraction.
    Exhausted,
    /// A round added no samples.
    Stalled,
    MaxIterations,
}

/// Pseudo-label quality of one round against hidden ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub precision: f64,
    pub recall: f64,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Started {
        samples: usize,
        seed: u64,
    },
    Clustered {
        k: usize,
        /// Non-finite scores are stored as null.
        ch_scores: BTreeMap<usize, Option<f64>>,
        clusters: BTreeMap<String, usize>,
        entropy: BTreeMap<String, f64>,
    },
    /// The listed samples move unlabeled -> key_pending_annotation.
    KeysSelected {
        ratio: f64,
        keys: BTreeMap<usize, Vec<String>>,
    },
    /// key_pending_annotation -> labeled_human; also records later edits of
    /// human labels.
    Annotated {
        id: String,
        revision: u64,
        annotator: String,
    },
    Trained {
        iteration: usize,
        report: TrainingReport,
        loss: Option<LossReport>,
        eval: Option<HeadEval>,
        /// Mean |G1 - G2| over the probed training samples.
        gram_diff: Option<f64>,
        pools: Pools,
    },
    /// One scoring round; `added` move unlabeled -> labeled_self.
    Iteration {
        iteration: usize,
        added: Vec<String>,
        sigma: BTreeMap<usize, f64>,
        remaining: usize,
        quality: Option<LabelQuality>,
        pools: Pools,
    },
    Reviewed {
        id: String,
        action: ReviewAction,
    },
    Terminated {
        reason: StopReason,
        iteration: usize,
    },
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) and returns the events already present.
    /// A torn final line, left by a crash mid-append, is cut off.
    pub fn open(path: &Path) -> Result<(Self, Vec<Event>)> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut events = Vec::new();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            reader.seek(SeekFrom::Start(0))?;
            let mut line = String::new();
            let mut line_no = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                if !line.ends_with('\n') {
                    log::warn!("dropping torn journal line {line_no}");
                    break;
                }
                let ev = serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?;
                events.push(ev);
                good_len += n as u64;
            }
        }
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<Event>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("journal.jsonl");
        let (mut j, ev) = Journal::open(&p).unwrap();
        assert!(ev.is_empty());
        let e1 = Event::Started { samples: 3, seed: 1 };
        let e2 = Event::Reviewed {
            id: "a".into(),
            action: ReviewAction::Reject,
        };
        j.append(&e1).unwrap();
        j.append(&e2).unwrap();
        drop(j);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(br#"{"terminated":{"rea"#).unwrap();
        drop(f);

        let (mut j, ev) = Journal::open(&p).unwrap();
        assert_eq!(ev, vec![e1.clone(), e2.clone()]);
        j.append(&e1).unwrap();
        assert_eq!(read_journal(&p).unwrap(), vec![e1.clone(), e2, e1]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("journal.jsonl");
        fs::write(&p, "{\"started\":{\"samples\":1,\"seed\":0}}\nnot json\n").unwrap();
        assert!(matches!(Journal::open(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn event_tags() {
        let s = serde_json::to_string(&Event::Terminated {
            reason: StopReason::Stalled,
            iteration: 4,
        })
        .unwrap();
        assert_eq!(s, r#"{"terminated":{"reason":"stalled","iteration":4}}"#);
    }

    #[test]
    fn pools_count() {
        let mut p = Pools::default();
        for s in Status::ALL {
            p.count(s);
        }
        p.count(Status::LabeledSelf);
        assert_eq!(p.total(), 6);
        assert_eq!(p.training(), 3);
    }
}
