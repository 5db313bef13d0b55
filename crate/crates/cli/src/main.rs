use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gram_sld::config::{Overrides, RunConfig};
use gram_sld::detector::read_predictions;
use gram_sld::gram::{gram_diff_export, read_feature_csv};
use gram_sld::journal::{read_journal, Event};
use gram_sld::orchestrator::{cluster_samples, drive, heads_eval, prepare, run, run_modes, TestSet};
use gram_sld::scenario::{generate, ScenarioConfig};
use gram_sld::self_labeling::{cluster_threshold, score, valid_pairs};
use gram_sld::session::{Session, Shared};
use gram_sld::{Error, Result};

#[derive(Parser)]
#[command(name = "gram-sld", version, about = "Co-training with key samples and a gram independence loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "force-k")]
    force_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        c.apply(Overrides {
            ratio: self.ratio,
            beta: self.beta,
            force_k: self.force_k,
            seed: self.seed,
        });
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute descriptors and cluster the training pool.
    Cluster(Common),
    /// Cluster (if needed) and pick key samples.
    SelectKeys(Common),
    /// Run or resume the co-training loop.
    Run(Common),
    /// Run the loop plus the fully supervised baseline; report IT, Gram-SLD, FS, DIFF.
    RunModes(Common),
    /// Score a predictions file against the thresholds of a config.
    Score {
        #[command(flatten)]
        common: Common,
        /// JSON Lines of {"id", "d1", "d2"}.
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Evaluate a predictions file on the test manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Overrides the config's test manifest.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Element-wise |G1 - G2| of two feature CSV files.
    GramDiff {
        #[arg(long)]
        d1: PathBuf,
        #[arg(long)]
        d2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a grayscale PGM rendering.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Write a synthetic scenario (images, hidden truth, manifests, config).
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-train", default_value_t = 600)]
        n_train: usize,
        #[arg(long = "n-test", default_value_t = 200)]
        n_test: usize,
        #[arg(long = "n-classes", default_value_t = 6)]
        n_classes: usize,
    },
    /// Serve the annotation API while the run proceeds.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Plugin { diagnostics, .. } = &e {
                if !diagnostics.is_empty() {
                    eprintln!("{diagnostics}");
                }
            }
            ExitCode::from(if e.is_plugin() {
                3
            } else if e.is_validation() {
                2
            } else {
                1
            })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Cluster(c) => {
            let shared = Shared::new(Session::open(c.load()?)?);
            let mut s = shared.lock();
            if !s.progress().started {
                let (n, seed) = (s.len(), s.config().seed);
                s.record(Event::Started { samples: n, seed })?;
            }
            if !s.progress().clustered {
                cluster_samples(&mut s)?;
            }
            let clustered = read_journal(&s.work_dir().join("journal.jsonl"))?
                .into_iter()
                .find(|e| matches!(e, Event::Clustered { .. }));
            if let Some(Event::Clustered { k, ch_scores, .. }) = clustered {
                let mut sizes = BTreeMap::new();
                for x in s.samples() {
                    *sizes.entry(x.cluster_id.unwrap_or(usize::MAX)).or_insert(0usize) += 1;
                }
                print(json!({ "k": k, "ch_scores": ch_scores, "sizes": sizes }));
            }
            Ok(())
        }
        Command::SelectKeys(c) => {
            let shared = Shared::new(Session::open(c.load()?)?);
            prepare(&shared)?;
            let s = shared.lock();
            let total: usize = s.keys().values().map(Vec::len).sum();
            print(json!({ "total": total, "keys": s.keys() }));
            Ok(())
        }
        Command::Run(c) => {
            let out = run(c.load()?)?;
            print(json!({
                "iterations": out.iterations,
                "reason": out.reason,
                "pools": out.state.pools,
                "journal": out.journal,
            }));
            Ok(())
        }
        Command::RunModes(c) => {
            let r = run_modes(c.load()?)?;
            print(r.to_json());
            Ok(())
        }
        Command::Score { common, predictions } => score_file(&common.load()?, &predictions),
        Command::Eval {
            common,
            predictions,
            test,
        } => {
            let c = common.load()?;
            let test = TestSet::load(test.as_deref().unwrap_or(&c.test_manifest))?;
            let truth = test
                .truth
                .ok_or_else(|| Error::Invalid("test manifest entries need label files".into()))?;
            let preds = gram_sld::detector::align_predictions(&test.manifest, read_predictions(&predictions)?)?;
            let h = heads_eval(&preds, &truth)?;
            print(json!({ "d1": h.d1, "d2": h.d2, "best": h.best_head(), "map": h.map() }));
            Ok(())
        }
        Command::GramDiff { d1, d2, out, pgm } => {
            let diff = gram_diff_export(&read_feature_csv(&d1)?, &read_feature_csv(&d2)?, &out, pgm.as_deref())?;
            print(json!({ "channels": diff.size, "mean_abs_diff": diff.mean(), "csv": out }));
            Ok(())
        }
        Command::Simulate {
            out,
            seed,
            n_train,
            n_test,
            n_classes,
        } => {
            let s = generate(
                &out,
                &ScenarioConfig {
                    n_train,
                    n_test,
                    n_classes,
                    seed,
                    ..Default::default()
                },
            )?;
            print(json!({ "dir": s.dir, "config": s.config_path, "classes": s.classes }));
            Ok(())
        }
        Command::Serve { common, port } => serve(common.load()?, port),
    }
}

/// Scores every record and, when the run has clustered, the per-cluster
/// thresholds and acceptance.
fn score_file(c: &RunConfig, predictions: &Path) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let journal = c.work_dir.join("journal.jsonl");
    let clusters: BTreeMap<String, usize> = if journal.is_file() {
        read_journal(&journal)?
            .into_iter()
            .find_map(|e| match e {
                Event::Clustered { clusters, .. } => Some(clusters),
                _ => None,
            })
            .unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    let scores: Vec<(String, u32, usize)> = preds
        .iter()
        .map(|p| (p.sample_id.clone(), score(p, &c.scoring), valid_pairs(p, &c.scoring).len()))
        .collect();
    let mut by_cluster: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (id, s, _) in &scores {
        if let Some(&k) = clusters.get(id) {
            by_cluster.entry(k).or_default().push(*s);
        }
    }
    let sigma: BTreeMap<usize, f64> = by_cluster
        .iter()
        .map(|(k, v)| Ok((*k, cluster_threshold(v, c.scoring.beta)?)))
        .collect::<Result<_>>()?;
    let rows: Vec<_> = scores
        .iter()
        .map(|(id, s, _)| {
            let cluster = clusters.get(id).copied();
            let accepted = cluster.and_then(|k| sigma.get(&k)).map(|t| *s as f64 > *t);
            json!({ "id": id, "score": s, "cluster": cluster, "accepted": accepted })
        })
        .collect();
    print(json!({ "samples": rows, "sigma": sigma }));
    Ok(())
}

fn serve(config: RunConfig, port: u16) -> Result<()> {
    let mut detector = config.build_detector()?;
    let shared = Arc::new(Shared::new(Session::open(config)?));
    let runner = {
        let shared = shared.clone();
        std::thread::spawn(move || {
            match drive(&shared, detector.as_mut()) {
                Ok(out) => log::info!("run finished after {} iterations ({:?})", out.iterations, out.reason),
                Err(e) => log::error!("run failed: {e}"),
            }
        })
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    rt.block_on(gram_sld_service::serve(shared, addr))?;
    if runner.is_finished() {
        let _ = runner.join();
    }
    Ok(())
}
