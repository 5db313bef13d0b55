//! The co-training loop.
//!
//! ```text
//! describe -> cluster -> select keys -> annotation gate -> train (iteration 0)
//! loop: predict unlabeled -> score -> commit round k -> retrain (iteration k)
//! until the unlabeled pool is nearly empty or a round adds nothing
//! ```
//!
//! Each step reads the journal to decide what is left to do, so calling
//! [`drive`] on a half-finished work dir resumes where the last run stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{agglomerate, canonical_labels, force_k, select_k};
use crate::config::{AnnotationMode, RunConfig};
use crate::detector::{align_predictions, write_predictions, Detector, FeaturePair};
use crate::error::{Error, Result};
use crate::eval::{diff, evaluate, match_labels, BoxesBySample, EvalDiff, HeadEval, IOU_THRESHOLD};
use crate::features::{describe, load_rgb, write_descriptor_cache, Descriptor, EntropyScore};
use crate::gram::{gram, gram_diff_export, LossCombiner};
use crate::journal::{read_journal, Event, LabelQuality, StopReason};
use crate::manifest::{load_manifest, Manifest, ManifestEntry, Purpose};
use crate::model::{BoundingBox, BoxSource, LabelSet, Status};
use crate::selection::select_keys;
use crate::self_labeling::{plan_pool_update, should_terminate, IterationScores, PredictionPair};
use crate::session::{RunState, Session, Shared};
use crate::store::{file_stem, read_label_file};

const GRAM_PROBE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Number of retraining rounds after the initial training.
    pub iterations: usize,
    pub reason: StopReason,
    pub state: RunState,
    pub journal: PathBuf,
}

/// Test manifest with its ground truth, when every entry has labels.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub manifest: Manifest,
    pub truth: Option<BoxesBySample>,
}

impl TestSet {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let mut truth = BoxesBySample::new();
        for e in &manifest.entries {
            let Some(p) = &e.labels else {
                return Ok(Self { manifest, truth: None });
            };
            let l = read_label_file(p)?.ok_or_else(|| Error::MissingFile(p.clone()))?;
            truth.insert(e.id.clone(), l.boxes);
        }
        Ok(Self {
            manifest,
            truth: Some(truth),
        })
    }
}

fn iteration_dir(work_dir: &Path, k: usize) -> Result<PathBuf> {
    let d = work_dir.join("iterations").join(format!("{k:03}"));
    fs::create_dir_all(&d)?;
    Ok(d)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn hidden_truth(gt_dir: &Path, id: &str) -> Result<Vec<BoundingBox>> {
    let p = gt_dir.join(format!("{}.json", file_stem(id)));
    Ok(read_label_file(&p)?.ok_or(Error::MissingFile(p))?.boxes)
}

/// Evaluates both heads of `detector` on the test set.
pub fn evaluate_heads(detector: &mut dyn Detector, test: &TestSet, work_dir: &Path) -> Result<Option<HeadEval>> {
    let Some(truth) = &test.truth else { return Ok(None) };
    let preds = align_predictions(&test.manifest, detector.predict(&test.manifest, work_dir)?)?;
    Ok(Some(heads_eval(&preds, truth)?))
}

pub fn heads_eval(preds: &[PredictionPair], truth: &BoxesBySample) -> Result<HeadEval> {
    let d1: BoxesBySample = preds.iter().map(|p| (p.sample_id.clone(), p.a1.clone())).collect();
    let d2: BoxesBySample = preds.iter().map(|p| (p.sample_id.clone(), p.a2.clone())).collect();
    Ok(HeadEval {
        d1: evaluate(&d1, truth)?,
        d2: evaluate(&d2, truth)?,
    })
}

/// Computes colour descriptors, clusters them and journals the result.
pub fn cluster_samples(s: &mut Session) -> Result<()> {
    let items: Vec<(String, PathBuf)> = {
        let mut v: Vec<_> = s.samples().map(|x| (x.id.clone(), x.image_path.clone())).collect();
        v.sort();
        v
    };
    if items.len() < 3 {
        return Err(Error::invalid("clustering needs at least 3 samples"));
    }
    let descriptors: Vec<Descriptor> = items
        .par_iter()
        .map(|(_, p)| describe(&load_rgb(p)?))
        .collect::<Result<_>>()?;
    let cache: BTreeMap<String, Descriptor> =
        items.iter().map(|x| x.0.clone()).zip(descriptors.iter().cloned()).collect();
    write_descriptor_cache(&s.work_dir().join("descriptors.csv"), &cache)?;

    let points: Vec<&[f64]> = descriptors.iter().map(|d| d.histogram.bins()).collect();
    let dendrogram = agglomerate(&points)?;
    let opts = &s.config().clustering;
    let model = match opts.force_k {
        Some(k) => force_k(&dendrogram, &points, k)?,
        None => select_k(&dendrogram, &points, opts.range_for(points.len()))?,
    };
    let ids: Vec<&String> = items.iter().map(|x| &x.0).collect();
    let labels = canonical_labels(&ids, &model.labels);
    s.record(Event::Clustered {
        k: model.k,
        ch_scores: model
            .ch_scores
            .iter()
            .map(|(&k, &v)| (k, v.is_finite().then_some(v)))
            .collect(),
        clusters: ids.iter().map(|id| (*id).clone()).zip(labels).collect(),
        entropy: items.iter().map(|x| x.0.clone()).zip(descriptors.iter().map(|d| d.entropy.0)).collect(),
    })
}

pub fn select_key_samples(s: &mut Session) -> Result<()> {
    let mut assignments = BTreeMap::new();
    let mut entropies = BTreeMap::new();
    for x in s.samples() {
        let c = x
            .cluster_id
            .ok_or_else(|| Error::invalid(format!("sample {:?} has no cluster", x.id)))?;
        assignments.insert(x.id.clone(), c);
        entropies.insert(x.id.clone(), EntropyScore(x.entropy.unwrap_or(0.0)));
    }
    let keys = select_keys(&assignments, &entropies, &s.config().selection)?;
    s.record(Event::KeysSelected {
        ratio: keys.ratio,
        keys: keys.clusters,
    })
}

/// Runs everything up to and including key selection.
pub fn prepare(shared: &Shared) -> Result<()> {
    let mut s = shared.lock();
    if !s.progress().started {
        let (n, seed) = (s.len(), s.config().seed);
        s.record(Event::Started { samples: n, seed })?;
    }
    if !s.progress().clustered {
        cluster_samples(&mut s)?;
    }
    if !s.progress().keys_selected {
        select_key_samples(&mut s)?;
    }
    Ok(())
}

fn annotation_gate(shared: &Shared) -> Result<()> {
    let mode = shared.lock().config().annotation;
    match mode {
        AnnotationMode::Oracle => {
            let mut s = shared.lock();
            let gt = s
                .config()
                .ground_truth_dir
                .clone()
                .ok_or_else(|| Error::invalid("oracle annotation needs ground_truth_dir"))?;
            let pending: Vec<String> = s
                .keys()
                .values()
                .flatten()
                .filter(|id| s.sample(id).is_some_and(|x| x.status == Status::KeyPendingAnnotation))
                .cloned()
                .collect();
            for id in pending {
                let boxes = hidden_truth(&gt, &id)?
                    .into_iter()
                    .map(|b| BoundingBox {
                        source: Some(BoxSource::Human),
                        confidence: 1.0,
                        ..b
                    })
                    .collect();
                let mut l = LabelSet::new(&id, "oracle", boxes);
                l.revision = s.store().revision(&id)?;
                s.annotate(&l)?;
            }
            Ok(())
        }
        AnnotationMode::Store => {
            let mut s = shared.lock();
            let pending: Vec<String> = s
                .keys()
                .values()
                .flatten()
                .filter(|id| s.sample(id).is_some_and(|x| x.status == Status::KeyPendingAnnotation))
                .cloned()
                .collect();
            for id in pending {
                let l = s.store().read(&id)?.ok_or_else(|| Error::MissingFile(s.store().path_for(&id)))?;
                let (w, h) = s.store().bounds(&id).expect("registered");
                l.validate(w, h)?;
                s.record(Event::Annotated {
                    id,
                    revision: l.revision,
                    annotator: l.annotator,
                })?;
            }
            Ok(())
        }
        AnnotationMode::Service => {
            let timeout = Duration::from_secs(shared.lock().config().gate_timeout_secs);
            let (s, ok) = shared.wait_until(timeout, |s| s.pending_keys() == 0);
            if ok {
                Ok(())
            } else {
                Err(Error::GateTimeout {
                    pending: s.pending_keys(),
                })
            }
        }
    }
}

struct Loop<'a> {
    shared: &'a Shared,
    detector: &'a mut dyn Detector,
    test: TestSet,
    combiner: LossCombiner,
    detector_dir: PathBuf,
    work_dir: PathBuf,
    ready: bool,
}

impl Loop<'_> {
    fn train(&mut self, k: usize) -> Result<()> {
        let (train, pools) = {
            let s = self.shared.lock();
            (s.training_manifest()?, s.state().pools)
        };
        let report = self.detector.train(&train, &self.detector_dir)?;
        self.ready = true;
        let eval = evaluate_heads(self.detector, &self.test, &self.detector_dir)?;
        let dir = iteration_dir(&self.work_dir, k)?;
        let gram_diff = self.probe_gram(&train, &dir)?;
        let loss = match report.gram_loss {
            Some(g) => Some(self.combiner.combine(report.loss_d1, report.loss_d2, g)?),
            None => None,
        };
        if let Some(e) = &eval {
            write_json(&dir.join("eval.json"), &e.to_json())?;
        }
        self.shared.mutate(|s| {
            s.record(Event::Trained {
                iteration: k,
                report,
                loss,
                eval,
                gram_diff,
                pools,
            })
        })
    }

    fn probe_gram(&mut self, train: &Manifest, dir: &Path) -> Result<Option<f64>> {
        let probe = Manifest::new(Purpose::Train, train.entries.iter().take(GRAM_PROBE).cloned().collect())?;
        if probe.is_empty() {
            return Ok(None);
        }
        let pairs: Vec<FeaturePair> = match self.detector.report_features(&probe, &self.detector_dir) {
            Ok(p) => p,
            Err(Error::Unsupported(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let Some(first) = pairs.first() else { return Ok(None) };
        gram_diff_export(&first.d1, &first.d2, &dir.join("gram_diff.csv"), Some(&dir.join("gram_diff.pgm")))?;
        let mut total = 0.0;
        for p in &pairs {
            total += gram(&p.d1).abs_diff(&gram(&p.d2)).mean();
        }
        Ok(Some(total / pairs.len() as f64))
    }

    fn round(&mut self, k: usize) -> Result<()> {
        if !self.ready {
            // resumed: restore the detector to the last journaled training
            let train = self.shared.lock().training_manifest()?;
            self.detector.train(&train, &self.detector_dir)?;
            self.ready = true;
        }
        let (unlabeled, clusters, cfg, gt_dir) = {
            let s = self.shared.lock();
            (
                s.unlabeled_manifest()?,
                s.unlabeled_clusters()?,
                s.config().scoring,
                s.config().ground_truth_dir.clone(),
            )
        };
        let preds = if unlabeled.is_empty() {
            Vec::new()
        } else {
            align_predictions(&unlabeled, self.detector.predict(&unlabeled, &self.detector_dir)?)?
        };
        let dir = iteration_dir(&self.work_dir, k)?;
        write_predictions(&dir.join("predictions.jsonl"), &preds)?;
        let by_id: BTreeMap<String, PredictionPair> = preds.into_iter().map(|p| (p.sample_id.clone(), p)).collect();
        let delta = plan_pool_update(&clusters, &by_id, &cfg)?;
        write_json(&dir.join("scores.json"), &IterationScores::from_delta(k, &delta))?;

        let quality = match &gt_dir {
            Some(gt) if !delta.accepted.is_empty() => {
                let (mut tp, mut fp, mut fn_) = (0, 0, 0);
                for (id, boxes) in &delta.accepted {
                    let c = match_labels(boxes, &hidden_truth(gt, id)?, IOU_THRESHOLD);
                    tp += c.tp;
                    fp += c.fp;
                    fn_ += c.fn_;
                }
                Some(LabelQuality {
                    precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
                    recall: if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 },
                    boxes: tp + fp,
                })
            }
            _ => None,
        };
        self.shared
            .mutate(|s| s.commit_round(k, &delta.accepted, delta.sigma(), quality))
    }
}

/// Runs (or resumes) the whole loop on an opened session.
pub fn drive(shared: &Shared, detector: &mut dyn Detector) -> Result<RunOutcome> {
    prepare(shared)?;
    annotation_gate(shared)?;
    let (cfg, alpha) = {
        let s = shared.lock();
        (s.config().clone(), s.progress().alpha)
    };
    let mut lp = Loop {
        shared,
        detector,
        test: TestSet::load(&cfg.test_manifest)?,
        combiner: LossCombiner::with_alpha(cfg.alpha, alpha),
        detector_dir: cfg.work_dir.join("detector"),
        work_dir: cfg.work_dir.clone(),
        ready: false,
    };
    fs::create_dir_all(&lp.detector_dir)?;

    loop {
        let progress = shared.lock().progress().clone();
        if let Some((reason, iteration)) = progress.terminated {
            let s = shared.lock();
            return Ok(RunOutcome {
                iterations: iteration,
                reason,
                state: s.state().clone(),
                journal: cfg.work_dir.join("journal.jsonl"),
            });
        }
        let Some(trained) = progress.last_trained else {
            lp.train(0)?;
            continue;
        };
        match progress.last_round {
            Some((r, added)) if r > trained => {
                if added == 0 {
                    shared.mutate(|s| {
                        s.record(Event::Terminated {
                            reason: StopReason::Stalled,
                            iteration: trained,
                        })
                    })?;
                    continue;
                }
                lp.train(r)?;
                let remaining = shared.lock().state().pools.unlabeled;
                let initial = progress.initial_unlabeled.unwrap_or(0);
                let reason = if should_terminate(initial, remaining, Some(added), &cfg.scoring) {
                    Some(StopReason::Exhausted)
                } else if r >= cfg.max_iterations {
                    Some(StopReason::MaxIterations)
                } else {
                    None
                };
                if let Some(reason) = reason {
                    shared.mutate(|s| s.record(Event::Terminated { reason, iteration: r }))?;
                }
            }
            _ => lp.round(trained + 1)?,
        }
    }
}

/// Opens the work dir of `config` and drives the run with the configured
/// detector.
pub fn run(config: RunConfig) -> Result<RunOutcome> {
    let mut detector = config.build_detector()?;
    let shared = Shared::new(Session::open(config)?);
    drive(&shared, detector.as_mut())
}

/// The three evaluation modes and their gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModesReport {
    /// Trained on key samples only.
    pub initial: HeadEval,
    pub gram_sld: HeadEval,
    /// Trained on the whole training set with ground truth.
    pub fully_supervised: HeadEval,
    /// Gram-SLD minus FS, on the headline heads.
    pub diff: EvalDiff,
    pub iterations: usize,
}

impl ModesReport {
    pub fn maps(&self) -> (f64, f64, f64) {
        (self.initial.map(), self.gram_sld.map(), self.fully_supervised.map())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "it": self.initial.to_json(),
            "gram_sld": self.gram_sld.to_json(),
            "fs": self.fully_supervised.to_json(),
            "diff": self.diff,
            "iterations": self.iterations,
        })
    }
}

/// Manifest of the whole training set labeled with ground truth.
fn full_manifest(config: &RunConfig) -> Result<Manifest> {
    if let Some(p) = &config.full_manifest {
        return load_manifest(p);
    }
    let gt = config
        .ground_truth_dir
        .as_ref()
        .ok_or_else(|| Error::invalid("the fully supervised baseline needs full_manifest or ground_truth_dir"))?;
    let m = load_manifest(&config.train_manifest)?;
    let entries = m
        .entries
        .into_iter()
        .map(|e| {
            let labels = gt.join(format!("{}.json", file_stem(&e.id)));
            if !labels.is_file() {
                return Err(Error::MissingFile(labels));
            }
            Ok(ManifestEntry {
                labels: Some(labels),
                ..e
            })
        })
        .collect::<Result<_>>()?;
    Manifest::new(Purpose::Train, entries)
}

/// Trains a fresh detector on the fully labeled training set.
pub fn fully_supervised(config: &RunConfig, test: &TestSet) -> Result<HeadEval> {
    let mut detector = config.build_detector()?;
    let dir = config.work_dir.join("fully_supervised");
    fs::create_dir_all(&dir)?;
    detector.train(&full_manifest(config)?, &dir)?;
    evaluate_heads(detector.as_mut(), test, &dir)?.ok_or_else(|| Error::invalid("test manifest has no labels"))
}

/// Runs (or resumes) the co-training loop and the fully supervised baseline
/// and reports IT, Gram-SLD, FS and DIFF. Also writes `modes.json`.
pub fn run_modes(config: RunConfig) -> Result<ModesReport> {
    let test = TestSet::load(&config.test_manifest)?;
    if test.truth.is_none() {
        return Err(Error::invalid("run-modes needs a labeled test manifest"));
    }
    let outcome = run(config.clone())?;
    let mut initial = None;
    let mut last = None;
    for ev in read_journal(&outcome.journal)? {
        if let Event::Trained { iteration, eval, .. } = ev {
            if iteration == 0 {
                initial = eval.clone();
            }
            last = eval;
        }
    }
    let missing = || Error::invalid("journal has no evaluation");
    let initial = initial.ok_or_else(missing)?;
    let gram_sld = last.ok_or_else(missing)?;
    let fs = fully_supervised(&config, &test)?;
    let report = ModesReport {
        diff: diff(gram_sld.best(), fs.best()),
        initial,
        gram_sld,
        fully_supervised: fs,
        iterations: outcome.iterations,
    };
    write_json(&config.work_dir.join("modes.json"), &report.to_json())?;
    Ok(report)
}
