use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use coattn_core::{ArchName, RotationMode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupArg {
    P4,
    P4m,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticArg {
    Quarter,
    Uniform,
}

impl From<SyntheticArg> for RotationMode {
    fn from(s: SyntheticArg) -> Self {
        match s {
            SyntheticArg::Quarter => RotationMode::Quarter,
            SyntheticArg::Uniform => RotationMode::Uniform,
        }
    }
}

/// Flags shared by every subcommand; unset flags fall back to the config
/// file, then to built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Architecture: z2cnn, p4cnn, a-p4cnn, p4mcnn or a-p4mcnn
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<ArchName>,
    /// Symmetry group for verification
    #[arg(long, value_enum)]
    pub group: Option<GroupArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Dataset: a directory with images.idx/labels.idx, a directory with
    /// train/valid/test .amat files, or a single .amat file
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Rotate raw data before use
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticArg>,
    /// Output directory; nothing is written elsewhere
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_arch(s: &str) -> std::result::Result<ArchName, String> {
    s.parse().map_err(|e: coattn_core::Error| e.to_string())
}

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub arch: ArchName,
    pub group: GroupArg,
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticArg>,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            arch: ArchName::P4Cnn,
            group: GroupArg::P4,
            data: None,
            synthetic: None,
            out: PathBuf::from("coattn-out"),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// defaults < `base` file (if any) < `--config` file < flags.
    pub fn resolve(command: &str, args: &CommonArgs, base: Option<&Path>) -> Result<Self> {
        let mut merged = serde_json::to_value(RunConfig::default())?;
        for path in base.iter().copied().chain(args.config.as_deref()) {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let layer: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut merged, layer);
        }
        let mut cfg: RunConfig = serde_json::from_value(merged).context("invalid configuration")?;
        cfg.command = command.to_string();
        if let Some(a) = args.arch {
            cfg.arch = a;
        }
        if let Some(g) = args.group {
            cfg.group = g;
        }
        if let Some(s) = args.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = args.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = args.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = args.batch {
            cfg.train.batch = b;
        }
        if args.data.is_some() {
            cfg.data = args.data.clone();
        }
        if args.synthetic.is_some() {
            cfg.synthetic = args.synthetic;
        }
        if let Some(o) = &args.out {
            cfg.out = o.clone();
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Creates the output directory and records this configuration in it
    /// as `config-<command>.json`.
    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        fs::write(
            self.out_path(&format!("config-{}.json", self.command)),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Recursively overlays `layer` onto `base`; objects merge key by key,
/// everything else is replaced.
fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
