#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough that every subcommand finishes in well under a second.
pub const TINY: &str = "\
version = 1
seed = 3
schedule.steps = 20
schedule.beta_end = 0.5
data.size = 48
classifier.iterations = 3
classifier.batch_size = 8
pretrain.epochs = 1
pretrain.batch_size = 16
finetune.iterations = 3
finetune.rollout_steps = 4
finetune.checkpoint_every = 2
finetune.rollout_batch = 1
sample.count = 4
sample.steps = 5
interpolate.count = 4
metrics.count = 80
serve.samples = 2
";

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Self { dir };
        std::fs::write(
            ws.config(),
            format!(
                "{TINY}run_dir = {}\nmodel_dir = {}\n",
                ws.path("run").display(),
                ws.path("models").display()
            ),
        )
        .unwrap();
        ws
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.txt")
    }

    /// Runs the binary with `--config` prepended.
    pub fn cli(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config".to_string(), self.config().display().to_string()];
        full.extend(args.iter().map(|s| s.to_string()));
        Command::new(env!("CARGO_BIN_EXE_sketchguide")).args(&full).output().unwrap()
    }

    pub fn ok(&self, args: &[&str]) -> Output {
        let out = self.cli(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    /// Classifier and pretrained model in the model directory.
    pub fn train(&self) {
        self.ok(&["gen-data", "--out", &self.path("data").display().to_string()]);
        self.ok(&["train-classifier", "--data", &self.path("data").display().to_string()]);
        self.ok(&["pretrain", "--data", &self.path("data").display().to_string()]);
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
