mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use coattn_core::data::{load_amat, load_idx, rotated_splits, write_amat, DatasetBundle, Split};
use coattn_core::equicheck::{self, check_network_invariance, render_table, CheckReport, SuiteSize, TOL_NETWORK};
use coattn_core::train::{history_csv, load_params, preprocess, save_params, train_loop_with, Preprocessing};
use coattn_core::{build_model, evaluate, ArchName, ArchSpec, GroupKind, GroupSpec, Model, RotationMode};
use serde::Serialize;

use config::{CommonArgs, GroupArg, RunConfig};

/// Group-equivariant CNNs with cyclic equivariant self-attention.
#[derive(Parser, Debug)]
#[command(name = "coattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the equivariance check suite
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Smaller trial counts
        #[arg(long)]
        quick: bool,
    },
    /// Train an architecture and record history, parameters and a re-check
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate parameters saved by `train` in the --out directory
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write rotated train/valid/test splits as amat files
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

const PARAMS_BIN: &str = "params.bin";
const PARAMS_JSON: &str = "params.json";

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { common, quick } => cmd_verify(&common, quick),
        Command::Train { common } => cmd_train(&common),
        Command::Eval { common, split } => cmd_eval(&common, split),
        Command::GenData { common } => cmd_gen_data(&common),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn group_kind(g: GroupArg) -> GroupKind {
    match g {
        GroupArg::P4 => GroupKind::Rot,
        GroupArg::P4m => GroupKind::RotMirror,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_verify(common: &CommonArgs, quick: bool) -> Result<bool> {
    let cfg = RunConfig::resolve("verify", common, None)?;
    cfg.write()?;
    let size = if quick { SuiteSize::QUICK } else { SuiteSize::FULL };
    let reports = equicheck::run_suite(group_kind(cfg.group), cfg.seed(), size)?;
    print!("{}", render_table(&reports));
    write_json(&cfg.out_path("verify.json"), &reports)?;
    let ok = reports.iter().all(CheckReport::as_expected);
    println!("{}", if ok { "all checks as expected" } else { "some checks did NOT behave as expected" });
    Ok(ok)
}

fn default_data_dir() -> PathBuf {
    std::env::var_os("COATTN_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset"))
}

/// Loads train/valid/test splits according to the resolved configuration,
/// before any input preprocessing.
fn load_raw_splits(cfg: &RunConfig) -> Result<[DatasetBundle; 3]> {
    let path = cfg.data.clone().unwrap_or_else(default_data_dir);
    let amat_split = |name: &str, split: Split| -> Result<DatasetBundle> {
        let p = path.join(format!("{name}.amat"));
        let mut b = load_amat(&p).with_context(|| format!("loading {}", p.display()))?;
        b.split = split;
        Ok(b)
    };
    if path.join("train.amat").is_file() {
        // pre-generated splits are used as they are
        return Ok([
            amat_split("train", Split::Train)?,
            amat_split("valid", Split::Valid)?,
            amat_split("test", Split::Test)?,
        ]);
    }
    let raw = if path.join("images.idx").is_file() {
        load_idx(path.join("images.idx"), path.join("labels.idx"))
            .with_context(|| format!("loading IDX data from {}", path.display()))?
    } else if path.is_file() {
        load_amat(&path).with_context(|| format!("loading {}", path.display()))?
    } else {
        bail!("no dataset found at {}", path.display());
    };
    Ok(rotated_splits(&raw, cfg.train.subset_sizes, cfg.synthetic.map(RotationMode::from), cfg.seed())?)
}

/// Raw splits followed by the configured clipping and standardization.
fn load_splits(cfg: &RunConfig) -> Result<([DatasetBundle; 3], Preprocessing)> {
    let mut splits = load_raw_splits(cfg)?;
    let prep = preprocess(&mut splits, &cfg.train)?;
    Ok((splits, prep))
}

/// Rotation group whose action the architecture should be invariant to.
fn check_group(arch: ArchName) -> GroupSpec {
    match arch.group().kind() {
        GroupKind::Trans => GroupSpec::p4(),
        _ => arch.group(),
    }
}

fn invariance_check(model: &Model, trials: usize, seed: u64) -> coattn_core::Result<CheckReport> {
    let spec = check_group(model.arch.name);
    let mut r = check_network_invariance(model, &spec, trials, 12, TOL_NETWORK, seed)?;
    if spec.kind() != model.spec().kind() {
        r = r.negative();
    }
    Ok(r)
}

#[derive(Serialize)]
struct TrainSummary {
    arch: ArchName,
    param_count: usize,
    preprocessing: Preprocessing,
    epochs: usize,
    final_train_loss: f64,
    valid_error: f64,
    test_error: f64,
    seconds: f64,
    equivariance_per_epoch: Vec<f64>,
}

fn cmd_train(common: &CommonArgs) -> Result<bool> {
    let cfg = RunConfig::resolve("train", common, None)?;
    if cfg.data.is_none() && cfg.synthetic.is_none() {
        bail!("train needs --data or --synthetic");
    }
    let ([train, valid, test], prep) = load_splits(&cfg)?;
    cfg.write()?;
    let arch = ArchSpec::desk(cfg.arch);
    let mut model = build_model(&arch, cfg.seed())?;
    println!("{}: {} parameters, {} training samples", cfg.arch, model.param_count(), train.len());
    let start = Instant::now();
    let mut per_epoch = Vec::new();
    let history = train_loop_with(&mut model, &train, &valid, &cfg.train, |epoch, m| {
        let r = invariance_check(m, 8, cfg.seed())?;
        println!("epoch {epoch:>3}  invariance max_dev {:.3e}  ({:.0}s)", r.max_dev, start.elapsed().as_secs_f64());
        per_epoch.push(r.max_dev);
        Ok(())
    })?;
    let seconds = start.elapsed().as_secs_f64();
    fs::write(cfg.out_path("history.csv"), history_csv(&history))?;
    save_params(&model, cfg.out_path(PARAMS_BIN), cfg.out_path(PARAMS_JSON))?;
    let recheck = invariance_check(&model, 100, cfg.seed().wrapping_add(99))?;
    write_json(&cfg.out_path("equicheck.json"), &[&recheck])?;
    let test_error = evaluate(&model, &test)?;
    let last = history.last().expect("at least one epoch");
    let summary = TrainSummary {
        arch: cfg.arch,
        param_count: model.param_count(),
        preprocessing: prep,
        epochs: history.len(),
        final_train_loss: last.train_loss,
        valid_error: last.valid_error,
        test_error,
        seconds,
        equivariance_per_epoch: per_epoch,
    };
    write_json(&cfg.out_path("summary.json"), &summary)?;
    print!("{}", history_csv(&history));
    print!("{}", render_table(std::slice::from_ref(&recheck)));
    println!("test error {test_error:.4}");
    Ok(recheck.as_expected())
}

fn cmd_eval(common: &CommonArgs, split: SplitArg) -> Result<bool> {
    let out = common.out.clone().unwrap_or_else(|| RunConfig::default().out);
    let base = out.join("config-train.json");
    let cfg = RunConfig::resolve("eval", common, base.is_file().then_some(base.as_path()))?;
    let model = load_params(cfg.out_path(PARAMS_BIN), cfg.out_path(PARAMS_JSON))
        .with_context(|| format!("loading parameters from {}", cfg.out.display()))?;
    let ([train, valid, test], _) = load_splits(&cfg)?;
    cfg.write()?;
    let bundle = match split {
        SplitArg::Train => train,
        SplitArg::Valid => valid,
        SplitArg::Test => test,
    };
    println!("{:.4}", evaluate(&model, &bundle)?);
    Ok(true)
}

fn cmd_gen_data(common: &CommonArgs) -> Result<bool> {
    let cfg = RunConfig::resolve("gen-data", common, None)?;
    if cfg.synthetic.is_none() {
        bail!("gen-data needs --synthetic quarter|uniform");
    }
    let splits = load_raw_splits(&cfg)?;
    cfg.write()?;
    for (name, bundle) in ["train", "valid", "test"].iter().zip(&splits) {
        let path = cfg.out_path(&format!("{name}.amat"));
        write_amat(&path, bundle)?;
        println!("wrote {} ({} samples)", path.display(), bundle.len());
    }
    Ok(true)
}
