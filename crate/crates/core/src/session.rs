//! Live run state shared by the run loop and the annotation service.
//!
//! A [`Session`] is rebuilt from the journal on open. Every mutation goes
//! through [`Session::record`], which appends the event and then folds it
//! into memory, so the two can never disagree.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::config::{AnnotationMode, RunConfig};
use crate::error::{Error, Result};
use crate::journal::{Event, Journal, LabelQuality, Pools, ReviewAction, StopReason};
use crate::manifest::{load_manifest, Manifest, ManifestEntry, Purpose};
use crate::model::{BoundingBox, BoxSource, LabelSet, Sample, Status};
use crate::store::LabelStore;

/// What one iteration contributed to the run, merged from its events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub added: Option<usize>,
    pub remaining: Option<usize>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub map_d1: Option<f64>,
    pub map_d2: Option<f64>,
    pub map: Option<f64>,
    pub gram_diff: Option<f64>,
    pub total_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Last retrained iteration; 0 is the initial training on key samples.
    pub iteration: usize,
    pub pools: Pools,
    pub metrics: Vec<IterationMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueKind {
    KeyAnnotation,
    PseudoReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub sample_id: String,
    pub kind: QueueKind,
    pub cluster_id: Option<usize>,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
    pub revision: u64,
}

/// Progress markers derived from the journal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    pub started: bool,
    pub clustered: bool,
    pub keys_selected: bool,
    /// Iteration of the latest `Trained` event.
    pub last_trained: Option<usize>,
    /// Iteration and added count of the latest `Iteration` event.
    pub last_round: Option<(usize, usize)>,
    pub terminated: Option<(StopReason, usize)>,
    pub alpha: Option<f64>,
    pub initial_unlabeled: Option<usize>,
}

#[derive(Debug)]
pub struct Session {
    config: RunConfig,
    samples: BTreeMap<String, Sample>,
    order: Vec<String>,
    store: LabelStore,
    journal: Journal,
    state: RunState,
    progress: Progress,
    keys: BTreeMap<usize, Vec<String>>,
}

impl Session {
    /// Loads the training manifest, replays the journal in `work_dir` and
    /// removes label files that the journal does not account for.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let manifest = load_manifest(&config.train_manifest)?;
        let mut store = LabelStore::open(config.work_dir.join("labels"))?;
        let mut samples = BTreeMap::new();
        let mut order = Vec::new();
        for e in &manifest.entries {
            let (w, h) = image::image_dimensions(&e.image).map_err(|source| Error::Image {
                path: e.image.clone(),
                source,
            })?;
            store.register(&e.id, w, h);
            samples.insert(e.id.clone(), Sample::new(&e.id, &e.image, w, h)?);
            order.push(e.id.clone());
        }
        let (journal, events) = Journal::open(&config.work_dir.join("journal.jsonl"))?;
        let mut s = Self {
            config,
            samples,
            order,
            store,
            journal,
            state: RunState::default(),
            progress: Progress::default(),
            keys: BTreeMap::new(),
        };
        s.recount();
        for ev in &events {
            s.apply(ev).map_err(|e| Error::Resume(format!("journal does not replay: {e}")))?;
        }
        s.roll_back_orphans()?;
        Ok(s)
    }

    fn roll_back_orphans(&mut self) -> Result<()> {
        for (id, sample) in &self.samples {
            let orphan = match sample.status {
                Status::Unlabeled => true,
                Status::KeyPendingAnnotation => self.config.annotation == AnnotationMode::Oracle,
                _ => false,
            };
            if orphan && self.store.path_for(id).exists() {
                log::info!("removing uncommitted labels of {id}");
                self.store.remove(id)?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn work_dir(&self) -> &Path {
        &self.config.work_dir
    }

    pub fn store(&self) -> &LabelStore {
        &self.store
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn keys(&self) -> &BTreeMap<usize, Vec<String>> {
        &self.keys
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.get(id)
    }

    /// Samples in manifest order.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.order.iter().map(|id| &self.samples[id])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids_with(&self, status: Status) -> Vec<String> {
        self.samples().filter(|s| s.status == status).map(|s| s.id.clone()).collect()
    }

    /// Unlabeled sample id -> cluster id.
    pub fn unlabeled_clusters(&self) -> Result<BTreeMap<String, usize>> {
        self.samples
            .values()
            .filter(|s| s.status == Status::Unlabeled)
            .map(|s| {
                s.cluster_id
                    .map(|c| (s.id.clone(), c))
                    .ok_or_else(|| Error::invalid(format!("sample {:?} has no cluster", s.id)))
            })
            .collect()
    }

    pub fn pending_keys(&self) -> usize {
        self.state.pools.key_pending_annotation
    }

    /// Manifest of the samples with `status`, labels pointing into the store
    /// for samples in the training pool.
    pub fn manifest_of(&self, purpose: Purpose, pick: impl Fn(Status) -> bool) -> Result<Manifest> {
        let entries = self
            .samples()
            .filter(|s| pick(s.status))
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                image: s.image_path.clone(),
                labels: s.status.is_in_training_pool().then(|| self.store.path_for(&s.id)),
            })
            .collect();
        Manifest::new(purpose, entries)
    }

    pub fn training_manifest(&self) -> Result<Manifest> {
        self.manifest_of(Purpose::Train, Status::is_in_training_pool)
    }

    pub fn unlabeled_manifest(&self) -> Result<Manifest> {
        self.manifest_of(Purpose::Unlabeled, |s| s == Status::Unlabeled)
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        self.samples
            .get(id)
            .map(|s| s.image_path.clone())
            .ok_or_else(|| Error::UnknownSample(id.to_string()))
    }

    pub fn record(&mut self, event: Event) -> Result<()> {
        // a rejected event never reaches the journal
        self.check(&event)?;
        self.journal.append(&event)?;
        self.apply(&event)
    }

    fn check(&self, event: &Event) -> Result<()> {
        let need = |id: &str, from: &[Status]| -> Result<()> {
            let s = self.samples.get(id).ok_or_else(|| Error::UnknownSample(id.to_string()))?;
            if from.contains(&s.status) {
                Ok(())
            } else {
                Err(Error::invalid(format!("sample {id:?} is {}", s.status)))
            }
        };
        match event {
            Event::KeysSelected { keys, .. } => {
                for id in keys.values().flatten() {
                    need(id, &[Status::Unlabeled])?;
                }
            }
            Event::Annotated { id, .. } => need(id, &[Status::KeyPendingAnnotation, Status::LabeledHuman])?,
            Event::Iteration { added, .. } => {
                for id in added {
                    need(id, &[Status::Unlabeled])?;
                }
            }
            Event::Reviewed { id, .. } => need(id, &[Status::LabeledSelf])?,
            _ => {}
        }
        Ok(())
    }

    fn recount(&mut self) {
        let mut p = Pools::default();
        for s in self.samples.values() {
            p.count(s.status);
        }
        self.state.pools = p;
    }

    fn metric(&mut self, iteration: usize) -> &mut IterationMetrics {
        let pos = match self.state.metrics.iter().position(|m| m.iteration == iteration) {
            Some(p) => p,
            None => {
                self.state.metrics.push(IterationMetrics {
                    iteration,
                    ..Default::default()
                });
                self.state.metrics.len() - 1
            }
        };
        &mut self.state.metrics[pos]
    }

    fn sample_mut(&mut self, id: &str) -> Result<&mut Sample> {
        self.samples.get_mut(id).ok_or_else(|| Error::UnknownSample(id.to_string()))
    }

    fn apply(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::Started { samples, .. } => {
                if *samples != self.samples.len() {
                    return Err(Error::Resume(format!(
                        "journal was written for {samples} samples, manifest has {}",
                        self.samples.len()
                    )));
                }
                self.progress.started = true;
            }
            Event::Clustered { clusters, entropy, .. } => {
                for (id, &c) in clusters {
                    let s = self.sample_mut(id)?;
                    s.assign_cluster(c)?;
                    s.entropy = entropy.get(id).copied();
                }
                self.progress.clustered = true;
            }
            Event::KeysSelected { keys, .. } => {
                for id in keys.values().flatten() {
                    self.sample_mut(id)?.transition(Status::KeyPendingAnnotation)?;
                }
                self.keys = keys.clone();
                self.progress.keys_selected = true;
                self.progress.initial_unlabeled =
                    Some(self.samples.values().filter(|s| s.status == Status::Unlabeled).count());
            }
            Event::Annotated { id, .. } => {
                let s = self.sample_mut(id)?;
                if s.status == Status::KeyPendingAnnotation {
                    s.transition(Status::LabeledHuman)?;
                }
            }
            Event::Trained {
                iteration,
                loss,
                eval,
                gram_diff,
                ..
            } => {
                self.progress.last_trained = Some(*iteration);
                if let Some(l) = loss {
                    self.progress.alpha = Some(l.alpha);
                }
                self.state.iteration = *iteration;
                let m = self.metric(*iteration);
                m.map_d1 = eval.as_ref().map(|e| e.d1.map);
                m.map_d2 = eval.as_ref().map(|e| e.d2.map);
                m.map = eval.as_ref().map(|e| e.map());
                m.gram_diff = *gram_diff;
                m.total_loss = loss.map(|l| l.total);
            }
            Event::Iteration {
                iteration,
                added,
                remaining,
                quality,
                ..
            } => {
                for id in added {
                    self.sample_mut(id)?.transition(Status::LabeledSelf)?;
                }
                self.progress.last_round = Some((*iteration, added.len()));
                let m = self.metric(*iteration);
                m.added = Some(added.len());
                m.remaining = Some(*remaining);
                m.precision = quality.map(|q| q.precision);
                m.recall = quality.map(|q| q.recall);
            }
            Event::Reviewed { id, action } => {
                let next = match action {
                    ReviewAction::Approve => None,
                    ReviewAction::Reject => Some(Status::Unlabeled),
                    ReviewAction::Edit => Some(Status::LabeledHuman),
                };
                if let Some(n) = next {
                    self.sample_mut(id)?.review(n)?;
                }
            }
            Event::Terminated { reason, iteration } => {
                self.progress.terminated = Some((*reason, *iteration));
            }
        }
        self.recount();
        Ok(())
    }

    /// Pending items of one queue, ordered by cluster then sample id.
    pub fn queue(&self, kind: QueueKind) -> Result<Vec<QueueItem>> {
        let status = match kind {
            QueueKind::KeyAnnotation => Status::KeyPendingAnnotation,
            QueueKind::PseudoReview => Status::LabeledSelf,
        };
        let mut items = Vec::new();
        for s in self.samples.values().filter(|s| s.status == status) {
            let stored = self.store.read(&s.id)?;
            let (boxes, revision) = match (kind, stored) {
                (QueueKind::KeyAnnotation, Some(l)) => (Vec::new(), l.revision),
                (_, Some(l)) => (l.boxes, l.revision),
                (_, None) => (Vec::new(), 0),
            };
            items.push(QueueItem {
                sample_id: s.id.clone(),
                kind,
                cluster_id: s.cluster_id,
                width: s.width,
                height: s.height,
                boxes,
                revision,
            });
        }
        items.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id).then_with(|| a.sample_id.cmp(&b.sample_id)));
        Ok(items)
    }

    /// Stores human labels for a key sample (or re-edits human labels) and
    /// journals the annotation. Returns the new revision.
    pub fn annotate(&mut self, labels: &LabelSet) -> Result<u64> {
        let status = self
            .samples
            .get(&labels.sample_id)
            .ok_or_else(|| Error::UnknownSample(labels.sample_id.clone()))?
            .status;
        if !matches!(status, Status::KeyPendingAnnotation | Status::LabeledHuman) {
            return Err(Error::invalid(format!(
                "sample {:?} is {status}, not awaiting annotation",
                labels.sample_id
            )));
        }
        let mut l = labels.clone();
        for b in &mut l.boxes {
            b.source = Some(BoxSource::Human);
        }
        let revision = self.store.write(&l)?;
        self.record(Event::Annotated {
            id: l.sample_id.clone(),
            revision,
            annotator: l.annotator.clone(),
        })?;
        Ok(revision)
    }

    /// Applies a reviewer decision on a self-labeled sample.
    pub fn review(&mut self, id: &str, action: ReviewAction, boxes: Option<Vec<BoundingBox>>) -> Result<Status> {
        if !self.config.review_mode {
            return Err(Error::invalid("review mode is off"));
        }
        let sample = self.samples.get(id).ok_or_else(|| Error::UnknownSample(id.to_string()))?;
        if sample.status != Status::LabeledSelf {
            return Err(Error::invalid(format!("sample {id:?} is {}, not self-labeled", sample.status)));
        }
        match action {
            ReviewAction::Approve => {}
            ReviewAction::Reject => {
                self.check(&Event::Reviewed {
                    id: id.to_string(),
                    action,
                })?;
                self.store.remove(id)?;
            }
            ReviewAction::Edit => {
                let boxes = boxes.ok_or_else(|| Error::invalid("edit needs boxes"))?;
                let revision = self.store.revision(id)?;
                let mut l = LabelSet::new(id, "reviewer", boxes);
                l.revision = revision;
                for b in &mut l.boxes {
                    b.source = Some(BoxSource::Human);
                }
                self.store.write(&l)?;
            }
        }
        self.record(Event::Reviewed {
            id: id.to_string(),
            action,
        })?;
        Ok(self.samples[id].status)
    }

    /// Writes pseudo-labels of accepted samples, then journals the round.
    pub fn commit_round(
        &mut self,
        iteration: usize,
        accepted: &[(String, Vec<BoundingBox>)],
        sigma: BTreeMap<usize, f64>,
        quality: Option<LabelQuality>,
    ) -> Result<()> {
        let added: Vec<String> = accepted.iter().map(|a| a.0.clone()).collect();
        let mut pools = self.state.pools;
        let event = Event::Iteration {
            iteration,
            added,
            sigma,
            remaining: pools.unlabeled.saturating_sub(accepted.len()),
            quality,
            pools: {
                pools.unlabeled = pools.unlabeled.saturating_sub(accepted.len());
                pools.labeled_self += accepted.len();
                pools
            },
        };
        self.check(&event)?;
        for (id, boxes) in accepted {
            let mut l = LabelSet::new(id, "self", boxes.clone());
            l.revision = self.store.revision(id)?;
            self.store.write(&l)?;
        }
        self.record(event)
    }
}

/// A session plus the condition variable the run loop waits on while the
/// annotation gate is closed.
#[derive(Debug)]
pub struct Shared {
    session: Mutex<Session>,
    changed: Condvar,
}

impl Shared {
    pub fn new(session: Session) -> Self {
        Self {
            session: Mutex::new(session),
            changed: Condvar::new(),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` under the lock and wakes waiters afterwards.
    pub fn mutate<T>(&self, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let out = f(&mut self.lock());
        self.changed.notify_all();
        out
    }

    /// Blocks until `done` holds or `timeout` elapses; returns the final
    /// guard and whether `done` held.
    pub fn wait_until(
        &self,
        timeout: std::time::Duration,
        mut done: impl FnMut(&Session) -> bool,
    ) -> (MutexGuard<'_, Session>, bool) {
        let guard = self.lock();
        let (guard, _) = self
            .changed
            .wait_timeout_while(guard, timeout, |s| !done(s))
            .unwrap_or_else(|p| p.into_inner());
        let ok = done(&guard);
        (guard, ok)
    }

    pub fn into_inner(self) -> Session {
        self.session.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}
