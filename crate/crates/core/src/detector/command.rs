//! External detector driven through shell command templates and files.
//!
//! Contract with the plugin process:
//! * train: reads `{train_manifest}`, writes `{work_dir}/train_report.json`;
//! * predict: reads `{predict_manifest}`, writes `{work_dir}/predictions.jsonl`;
//! * features (optional): reads `{predict_manifest}`, writes
//!   `{work_dir}/features/<id>.d1.csv` and `<id>.d2.csv`.
//!
//! A non-zero exit or a timeout is reported together with the tail of the
//! process's stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{align_predictions, feature_paths, read_predictions, Detector, FeaturePair, TrainingReport};
use crate::error::{Error, Result};
use crate::gram::read_feature_csv;
use crate::manifest::Manifest;
use crate::self_labeling::PredictionPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCommand {
    pub train_template: String,
    pub predict_template: String,
    #[serde(default)]
    pub features_template: Option<String>,
    pub timeout: u64,
    /// Substituted for `{config}`.
    #[serde(default)]
    pub config: Option<PathBuf>,
}

impl DetectorCommand {
    pub fn validate(&self) -> Result<()> {
        let need = |name: &str, template: &str, keys: &[&str]| {
            for k in keys {
                if !template.contains(k) {
                    return Err(Error::invalid(format!("{name} template is missing {k}")));
                }
            }
            Ok(())
        };
        need("train", &self.train_template, &["{train_manifest}", "{work_dir}"])?;
        need("predict", &self.predict_template, &["{predict_manifest}", "{work_dir}"])?;
        if let Some(t) = &self.features_template {
            need("features", t, &["{predict_manifest}", "{work_dir}"])?;
        }
        if self.timeout == 0 {
            return Err(Error::invalid("plugin timeout must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CommandDetector {
    cmd: DetectorCommand,
}

impl CommandDetector {
    pub fn new(cmd: DetectorCommand) -> Result<Self> {
        cmd.validate()?;
        Ok(Self { cmd })
    }

    fn render(&self, template: &str, manifest_key: &str, manifest: &Path, work_dir: &Path) -> String {
        let config = self
            .cmd
            .config
            .as_deref()
            .map(|p| shell_quote(&p.to_string_lossy()))
            .unwrap_or_else(|| "''".into());
        template
            .replace(manifest_key, &shell_quote(&manifest.to_string_lossy()))
            .replace("{work_dir}", &shell_quote(&work_dir.to_string_lossy()))
            .replace("{config}", &config)
    }

    fn invoke(&self, what: &str, command_line: &str, work_dir: &Path) -> Result<()> {
        let stdout_log = work_dir.join(format!("plugin.{what}.stdout.log"));
        let stderr_log = work_dir.join(format!("plugin.{what}.stderr.log"));
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command_line)
            .stdin(Stdio::null())
            .stdout(fs::File::create(&stdout_log)?)
            .stderr(fs::File::create(&stderr_log)?)
            .spawn()?;
        let deadline = Instant::now() + Duration::from_secs(self.cmd.timeout);
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Plugin {
                    message: format!("{what} timed out after {} s", self.cmd.timeout),
                    diagnostics: tail(&stderr_log),
                });
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        if !status.success() {
            return Err(Error::Plugin {
                message: format!("{what} exited with {status}"),
                diagnostics: tail(&stderr_log),
            });
        }
        Ok(())
    }
}

fn tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(20)..].join("\n")
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn malformed(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Plugin {
        message: format!("malformed {what}: {e}"),
        diagnostics: String::new(),
    }
}

impl Detector for CommandDetector {
    fn train(&mut self, train: &Manifest, work_dir: &Path) -> Result<TrainingReport> {
        fs::create_dir_all(work_dir)?;
        let manifest_path = work_dir.join("train_manifest.jsonl");
        train.write(&manifest_path)?;
        let report_path = work_dir.join("train_report.json");
        let _ = fs::remove_file(&report_path);
        let line = self.render(&self.cmd.train_template, "{train_manifest}", &manifest_path, work_dir);
        self.invoke("train", &line, work_dir)?;
        let bytes = fs::read(&report_path).map_err(|e| malformed("training report", e))?;
        serde_json::from_slice(&bytes).map_err(|e| malformed("training report", e))
    }

    fn predict(&mut self, manifest: &Manifest, work_dir: &Path) -> Result<Vec<PredictionPair>> {
        fs::create_dir_all(work_dir)?;
        let manifest_path = work_dir.join("predict_manifest.jsonl");
        manifest.write(&manifest_path)?;
        let out = work_dir.join("predictions.jsonl");
        let _ = fs::remove_file(&out);
        let line = self.render(&self.cmd.predict_template, "{predict_manifest}", &manifest_path, work_dir);
        self.invoke("predict", &line, work_dir)?;
        let pairs = read_predictions(&out).map_err(|e| malformed("predictions", e))?;
        align_predictions(manifest, pairs)
    }

    fn report_features(&mut self, manifest: &Manifest, work_dir: &Path) -> Result<Vec<FeaturePair>> {
        let Some(template) = self.cmd.features_template.clone() else {
            return Err(Error::Unsupported("feature reporting"));
        };
        let feature_dir = work_dir.join("features");
        fs::create_dir_all(&feature_dir)?;
        let manifest_path = work_dir.join("features_manifest.jsonl");
        manifest.write(&manifest_path)?;
        let line = self.render(&template, "{predict_manifest}", &manifest_path, work_dir);
        self.invoke("features", &line, work_dir)?;
        manifest
            .entries
            .iter()
            .map(|e| {
                let (p1, p2) = feature_paths(&feature_dir, &e.id);
                Ok(FeaturePair {
                    sample_id: e.id.clone(),
                    d1: read_feature_csv(&p1).map_err(|err| malformed("feature file", err))?,
                    d2: read_feature_csv(&p2).map_err(|err| malformed("feature file", err))?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ManifestEntry, Purpose};

    fn cmd(train: &str, predict: &str) -> DetectorCommand {
        DetectorCommand {
            train_template: train.into(),
            predict_template: predict.into(),
            features_template: None,
            timeout: 5,
            config: None,
        }
    }

    fn manifest() -> Manifest {
        Manifest::new(
            Purpose::Unlabeled,
            vec![ManifestEntry {
                id: "a".into(),
                image: "a.png".into(),
                labels: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn templates_need_placeholders() {
        assert!(cmd("train {train_manifest}", "p {predict_manifest} {work_dir}").validate().is_err());
        assert!(cmd("t {train_manifest} {work_dir}", "p {predict_manifest} {work_dir}").validate().is_ok());
    }

    #[test]
    fn crash_carries_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = CommandDetector::new(cmd(
            "echo boom-{train_manifest} >&2; echo {work_dir} > /dev/null; exit 3",
            "true {predict_manifest} {work_dir}",
        ))
        .unwrap();
        match d.train(&manifest(), dir.path()).unwrap_err() {
            Error::Plugin { diagnostics, message } => {
                assert!(diagnostics.contains("boom-"), "{diagnostics}");
                assert!(message.contains("exit"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn timeout_kills() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cmd("sleep 5 # {train_manifest} {work_dir}", "true {predict_manifest} {work_dir}");
        c.timeout = 1;
        let mut d = CommandDetector::new(c).unwrap();
        let start = Instant::now();
        let err = d.train(&manifest(), dir.path()).unwrap_err();
        assert!(err.to_string().contains("timed out"));
        assert!(start.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn successful_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = CommandDetector::new(cmd(
            r#"test -f {train_manifest} && echo '{"loss_d1":1.0,"loss_d2":2.0,"gram_loss":null,"epochs":1}' > {work_dir}/train_report.json"#,
            r#"echo '{"id":"a","d1":[],"d2":[{"class":"c","bbox":[0,0,1,1],"confidence":0.5}]}' > {work_dir}/predictions.jsonl # {predict_manifest}"#,
        ))
        .unwrap();
        let r = d.train(&manifest(), dir.path()).unwrap();
        assert_eq!(r.loss_d2, 2.0);
        let p = d.predict(&manifest(), dir.path()).unwrap();
        assert_eq!(p[0].a2.len(), 1);
        assert!(matches!(d.report_features(&manifest(), dir.path()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn malformed_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = CommandDetector::new(cmd(
            "echo nope > {work_dir}/train_report.json # {train_manifest}",
            "true {predict_manifest} {work_dir}",
        ))
        .unwrap();
        assert!(d.train(&manifest(), dir.path()).unwrap_err().is_plugin());
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("a'b"), r"'a'\''b'");
    }
}
