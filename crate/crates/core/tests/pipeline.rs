use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gram_sld::config::RunConfig;
use gram_sld::detector::{Detector, FeaturePair, TrainingReport};
use gram_sld::eval::rect_iou;
use gram_sld::manifest::Manifest;
use gram_sld::model::{BoundingBox, Rect};
use gram_sld::orchestrator::{drive, run};
use gram_sld::scenario::{generate, ScenarioConfig};
use gram_sld::self_labeling::{match_pairs, score, PredictionPair, ScoringConfig};
use gram_sld::session::{Session, Shared};
use gram_sld::{Error, Result};

/// Passes through to the configured detector until the given predict call.
struct Flaky {
    inner: Box<dyn Detector>,
    predicts: usize,
    fail_at: usize,
}

impl Detector for Flaky {
    fn train(&mut self, train: &Manifest, work_dir: &Path) -> Result<TrainingReport> {
        self.inner.train(train, work_dir)
    }

    fn predict(&mut self, manifest: &Manifest, work_dir: &Path) -> Result<Vec<PredictionPair>> {
        self.predicts += 1;
        if self.predicts == self.fail_at {
            return Err(Error::Invalid("injected failure".into()));
        }
        self.inner.predict(manifest, work_dir)
    }

    fn report_features(&mut self, manifest: &Manifest, work_dir: &Path) -> Result<Vec<FeaturePair>> {
        self.inner.report_features(manifest, work_dir)
    }
}

fn small_config(dir: &Path) -> RunConfig {
    let s = generate(
        &dir.join("scenario"),
        &ScenarioConfig {
            n_train: 150,
            n_test: 40,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    RunConfig::load(&s.config_path).unwrap()
}

#[test]
fn resume_after_failure_reproduces_the_journal() {
    let dir = tempfile::tempdir().unwrap();
    let mut clean = small_config(dir.path());
    clean.work_dir = dir.path().join("clean");
    let reference = run(clean.clone()).unwrap();
    let expected = std::fs::read_to_string(&reference.journal).unwrap();
    assert!(reference.iterations >= 2);

    for fail_at in [1, 3, 5] {
        let mut c = clean.clone();
        c.work_dir = dir.path().join(format!("flaky_{fail_at}"));
        let shared = Shared::new(Session::open(c.clone()).unwrap());
        let mut det = Flaky {
            inner: c.build_detector().unwrap(),
            predicts: 0,
            fail_at,
        };
        let err = drive(&shared, &mut det).unwrap_err();
        assert!(err.to_string().contains("injected failure"));
        drop(shared);

        let resumed = run(c.clone()).unwrap();
        assert_eq!(resumed.iterations, reference.iterations);
        let got = std::fs::read_to_string(&resumed.journal).unwrap();
        for (a, b) in got.lines().zip(expected.lines()) {
            assert_eq!(a, b, "fail_at {fail_at}");
        }
        assert_eq!(got.lines().count(), expected.lines().count(), "fail_at {fail_at}");
    }
}

#[test]
fn finished_run_reopens_without_new_events() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.work_dir = dir.path().join("w");
    let first = run(c.clone()).unwrap();
    let before = std::fs::read(&first.journal).unwrap();
    let again = run(c).unwrap();
    assert_eq!(again.iterations, first.iterations);
    assert_eq!(std::fs::read(&again.journal).unwrap(), before);
}

fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..40.0);
            let y = rng.random_range(0.0..40.0);
            let w = rng.random_range(5.0..25.0);
            let h = rng.random_range(5.0..25.0);
            let class = if rng.random_bool(0.7) { "a" } else { "b" };
            BoundingBox::new(class, Rect::new(x, y, x + w, y + h)).with_confidence(rng.random_range(0.7..1.0))
        })
        .collect()
}

/// Most valid pairs any one-to-one same-class assignment achieves.
fn best_assignment(a1: &[BoundingBox], a2: &[BoundingBox], cfg: &ScoringConfig) -> u32 {
    fn go(i: usize, a1: &[BoundingBox], a2: &[BoundingBox], used: &mut [bool], cfg: &ScoringConfig) -> u32 {
        if i == a1.len() {
            return 0;
        }
        let mut best = go(i + 1, a1, a2, used, cfg);
        for j in 0..a2.len() {
            if used[j] || a1[i].class_name != a2[j].class_name {
                continue;
            }
            let v = rect_iou(&a1[i].rect, &a2[j].rect);
            let ok = (a1[i].confidence > cfg.delta_acc && a2[j].confidence > cfg.delta_acc && v > cfg.delta_iou) as u32;
            used[j] = true;
            best = best.max(ok + go(i + 1, a1, a2, used, cfg));
            used[j] = false;
        }
        best
    }
    go(0, a1, a2, &mut vec![false; a2.len()], cfg)
}

#[test]
fn greedy_matching_agrees_with_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ScoringConfig::default();
    let trials = 2000;
    let mut agree = 0;
    for _ in 0..trials {
        let n = rng.random_range(0..5);
        let base = boxes(&mut rng, n);
        let jitter = |rng: &mut ChaCha8Rng, b: &BoundingBox| {
            let mut j = || rng.random_range(-1.5..1.5);
            let r = Rect::new(b.rect.x_min + j(), b.rect.y_min + j(), b.rect.x_max + j(), b.rect.y_max + j());
            BoundingBox::new(&b.class_name, r).with_confidence(b.confidence)
        };
        let mut a1: Vec<_> = base.iter().map(|b| jitter(&mut rng, b)).collect();
        let mut a2: Vec<_> = base.iter().map(|b| jitter(&mut rng, b)).collect();
        let (e1, e2) = (rng.random_range(0..3), rng.random_range(0..3));
        a1.extend(boxes(&mut rng, e1));
        a2.extend(boxes(&mut rng, e2));
        let p = PredictionPair {
            sample_id: "x".into(),
            a1,
            a2,
        };
        agree += (score(&p, &cfg) == best_assignment(&p.a1, &p.a2, &cfg)) as usize;
    }
    let rate = agree as f64 / trials as f64;
    assert!(rate >= 0.99, "agreement {rate}");
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64, 0..3usize, 0.0..1.0f64).prop_map(|(x, y, w, h, c, conf)| {
        BoundingBox::new(&format!("c{c}"), Rect::new(x, y, x + w, y + h)).with_confidence(conf)
    })
}

proptest! {
    #[test]
    fn matching_is_one_to_one_within_class(
        a1 in prop::collection::vec(arb_box(), 0..8),
        a2 in prop::collection::vec(arb_box(), 0..8),
    ) {
        let p = PredictionPair { sample_id: "p".into(), a1, a2 };
        let m = match_pairs(&p);
        prop_assert!(m.len() <= p.a1.len().min(p.a2.len()));
        for x in &m {
            prop_assert_eq!(&x.box_a1.class_name, &x.box_a2.class_name);
            prop_assert!(x.iou > 0.0);
            let uses = |side: &[BoundingBox], b: &BoundingBox| side.iter().filter(|y| *y == b).count();
            prop_assert!(m.iter().filter(|y| y.box_a1 == x.box_a1).count() <= uses(&p.a1, &x.box_a1));
            prop_assert!(m.iter().filter(|y| y.box_a2 == x.box_a2).count() <= uses(&p.a2, &x.box_a2));
        }
        let swapped = PredictionPair { sample_id: "p".into(), a1: p.a2.clone(), a2: p.a1.clone() };
        prop_assert_eq!(match_pairs(&swapped).len(), m.len());
    }

    #[test]
    fn score_never_exceeds_the_smaller_side(
        a1 in prop::collection::vec(arb_box(), 0..8),
        a2 in prop::collection::vec(arb_box(), 0..8),
    ) {
        let p = PredictionPair { sample_id: "p".into(), a1, a2 };
        let s = score(&p, &ScoringConfig::default()) as usize;
        prop_assert!(s <= p.a1.len().min(p.a2.len()));
    }
}
