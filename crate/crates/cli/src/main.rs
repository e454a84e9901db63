use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use genrel_core::checkpoint::Checkpoint;
use genrel_core::conditioning::FusionVariant;
use genrel_core::config::RunConfig;
use genrel_core::dataset::{load_dataset, PairDataset};
use genrel_core::drift::analyze;
use genrel_core::encoders::EmbeddingStore;
use genrel_core::gradcheck::model_gradcheck;
use genrel_core::heads::LabelSpace;
use genrel_core::model::{Architecture, FreezePattern, RoleOrder};
use genrel_core::splits::{generate_split, validate_split, SplitKind, SplitManifest};
use genrel_core::synthetic;
use genrel_core::training::{evaluate_checkpoint, initial_params, train_with_embeddings, Evaluation};

#[derive(Parser)]
#[command(name = "genrel", version, about = "Pairwise relation prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for every artifact of the command.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pair CSV (pair_id,drug_a,drug_b,input_a,input_b,label).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long)]
    fusion: Option<FusionVariant>,
    /// Frozen roles: "none", "r", "t" or "rt".
    #[arg(long)]
    freeze: Option<FreezePattern>,
    /// Anchor and adapter stream names, "anchor+adapter".
    #[arg(long)]
    roles: Option<RoleOrder>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the planted-rule synthetic corpus.
    Fixtures {
        #[command(flatten)]
        common: Common,
    },
    /// Generate and validate a split manifest.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: Option<SplitKind>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Train on a manifest's train pairs.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Generated from the config's split section when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest's test pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Evaluate a checkpoint on another dataset without touching it.
    TransferEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to this manifest's test pairs; all pairs otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Representation and prediction drift of a checkpoint against its
    /// initialization.
    Drift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fixtures { .. } => "fixtures",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::TransferEval { .. } => "transfer-eval",
            Command::Drift { .. } => "drift",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fixtures { common }
            | Command::Split { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::TransferEval { common, .. }
            | Command::Drift { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn start(cmd: &Command) -> Result<Self> {
        let common = cmd.common();
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &common.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(seed) = common.seed {
            match cmd {
                Command::Fixtures { .. } => cfg.synthetic.seed = seed,
                Command::Split { .. } => cfg.split.seed = seed,
                Command::Drift { .. } => cfg.drift.seed = seed,
                _ => cfg.train.seed = seed,
            }
        }
        match cmd {
            Command::Split { split, test_fraction, .. } => {
                if let Some(k) = split {
                    cfg.split.kind = *k;
                }
                if let Some(f) = test_fraction {
                    cfg.split.test_fraction = *f;
                }
            }
            Command::Train { model, .. } | Command::Gradcheck { model, .. } => {
                if let Some(f) = model.fusion {
                    cfg.train.model.fusion = f;
                }
                if let Some(f) = model.freeze {
                    cfg.train.model.freeze = f;
                }
                if let Some(r) = &model.roles {
                    cfg.train.model.roles = r.clone();
                }
            }
            _ => {}
        }
        cfg.validate()?;
        let out = common
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        cfg.echo(&out)?;
        Ok(Self { cfg, out })
    }

    fn dataset(&self, space: LabelSpace) -> Result<PairDataset> {
        match &self.cfg.dataset {
            Some(p) => {
                let (ds, report) = load_dataset(p, space)?;
                write_json(&self.out.join("load_report.json"), &report)?;
                Ok(ds)
            }
            None => Ok(synthetic::generate(&self.cfg.synthetic, space)?),
        }
    }

    fn embeddings(&self) -> Result<Option<Arc<EmbeddingStore>>> {
        Ok(match &self.cfg.embeddings {
            Some(p) => Some(Arc::new(EmbeddingStore::load(p)?)),
            None => None,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn checked_manifest(path: &Path, ds: &PairDataset) -> Result<SplitManifest> {
    let m = SplitManifest::load(path)?;
    if m.dataset_sha256 != ds.sha256() {
        return Err(genrel_core::Error::InvalidManifest(format!(
            "{} was generated for a different dataset",
            path.display()
        ))
        .into());
    }
    Ok(m)
}

fn write_evaluation(run: &Run, ev: &Evaluation) -> Result<serde_json::Value> {
    write_json(&run.path("metrics.json"), &ev.metrics)?;
    write_json(&run.path("predictions.json"), &ev.predictions)?;
    Ok(json!({ "metrics": ev.metrics }))
}

fn execute(cmd: Command) -> Result<serde_json::Value> {
    let run = Run::start(&cmd)?;
    let space = run.cfg.train.model.label_space;
    match &cmd {
        Command::Fixtures { .. } => {
            let ds = synthetic::generate(&run.cfg.synthetic, space)?;
            let path = run.path("pairs.csv");
            ds.save_csv(&path)?;
            Ok(json!({ "dataset": path, "pairs": ds.len(), "histogram": ds.histogram() }))
        }
        Command::Split { .. } => {
            let ds = run.dataset(space)?;
            let s = &run.cfg.split;
            let m = generate_split(&ds, s.kind, s.test_fraction, s.seed, &s.options)?;
            let violations = validate_split(&ds, &m)?;
            if !violations.is_empty() {
                write_json(&run.path("violations.json"), &violations)?;
                bail!("generated manifest has {} violations", violations.len());
            }
            let path = run.path("manifest.json");
            m.save(&path)?;
            Ok(json!({
                "manifest": path,
                "train": m.train.len(),
                "test": m.test.len(),
                "dropped": m.dropped.len(),
                "achieved_fraction": m.achieved_fraction,
            }))
        }
        Command::Train { manifest, .. } => {
            let ds = run.dataset(space)?;
            let m = match manifest {
                Some(p) => checked_manifest(p, &ds)?,
                None => {
                    let s = &run.cfg.split;
                    let m = generate_split(&ds, s.kind, s.test_fraction, s.seed, &s.options)?;
                    m.save(&run.path("manifest.json"))?;
                    m
                }
            };
            let outcome = train_with_embeddings(&run.cfg.train, &ds, &m, run.embeddings()?)?;
            outcome.best.save(&run.path("best.json"))?;
            outcome.last.save(&run.path("last.json"))?;
            write_json(&run.path("history.json"), &outcome.history)?;
            if let Some(fault) = outcome.fault {
                return Err(genrel_core::Error::NumericFault(format!(
                    "{fault}; last good state saved to {}",
                    run.path("last.json").display()
                ))
                .into());
            }
            Ok(json!({
                "best": run.path("best.json"),
                "last": run.path("last.json"),
                "epochs": outcome.history.len(),
                "best_epoch": outcome.best.epoch,
                "final": outcome.history.last(),
            }))
        }
        Command::Eval { checkpoint, manifest, .. } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let ds = run.dataset(ckpt.config.model.label_space)?;
            let m = checked_manifest(manifest, &ds)?;
            let ev = evaluate_checkpoint(&ckpt, &ds, &m.test, run.embeddings()?)?;
            write_evaluation(&run, &ev)
        }
        Command::TransferEval { checkpoint, manifest, .. } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let ds = run.dataset(ckpt.config.model.label_space)?;
            let ids = match manifest {
                Some(p) => checked_manifest(p, &ds)?.test,
                None => ds.records.iter().map(|r| r.pair_id.clone()).collect(),
            };
            let ev = evaluate_checkpoint(&ckpt, &ds, &ids, run.embeddings()?)?;
            write_evaluation(&run, &ev)
        }
        Command::Drift { checkpoint, manifest, .. } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let ds = run.dataset(ckpt.config.model.label_space)?;
            let mut arch = Architecture::new(ckpt.config.model.clone())?;
            if let Some(e) = run.embeddings()? {
                arch = arch.with_embeddings(e);
            }
            let reference = initial_params(&ckpt.config)?;
            let records = match manifest {
                Some(p) => ds.select(&checked_manifest(p, &ds)?.test)?,
                None => ds.records.iter().collect(),
            };
            let mut report = analyze(&arch, &ckpt.params, &reference, &ds.vocabulary()?, &records, &run.cfg.drift)?;
            report.config = Some(serde_json::to_value(&ckpt.config)?);
            let path = run.path("drift.json");
            write_json(&path, &report)?;
            Ok(json!({
                "report": path,
                "measured_drift": report.measured_drift,
                "bound_value": report.bound_value,
                "verdict": report.verdict,
            }))
        }
        Command::Gradcheck { .. } => {
            let ds = run.dataset(space)?;
            let arch = Architecture::new(run.cfg.train.model.clone())?;
            let arch = match run.embeddings()? {
                Some(e) => arch.with_embeddings(e),
                None => arch,
            };
            let params = arch.init_params(run.cfg.train.seed);
            let n = run.cfg.gradcheck.pairs.min(ds.len());
            let records: Vec<_> = ds.records.iter().take(n).collect();
            let report = model_gradcheck(&arch, &params, &records, &run.cfg.gradcheck.options)?;
            let path = run.path("gradcheck.json");
            write_json(&path, &report)?;
            if !report.passed {
                bail!(
                    "gradient check failed: max relative error {:e} exceeds {:e}",
                    report.max_rel_error,
                    report.tolerance
                );
            }
            Ok(json!({ "report": path, "max_rel_error": report.max_rel_error, "passed": true }))
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            // a closed stdout is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (kind, message) = match err.downcast_ref::<genrel_core::Error>() {
                Some(e) => (e.kind(), e.to_string()),
                None => ("runtime", format!("{err:#}")),
            };
            let msg = json!({ "error": { "kind": kind, "message": message } });
            let _ = writeln!(std::io::stderr(), "{msg}");
            ExitCode::from(1)
        }
    }
}
