use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use udama::baselines::BaselineKind;
use udama::bench::{self, ExperimentConfig, Harness, Method, Precision, RunRecord, NO_SHIFT};
use udama::netgraph::checkpoint;
use udama::synthcohort::SampleSet;
use udama::trainer::TrainTrace;
use udama::Scalar;

#[derive(Parser)]
#[command(name = "udama", version, about = "Adversarial domain adaptation experiments on synthetic fitness cohorts")]
struct Cli {
    /// Key-value experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration with documentation.
    Config,
    /// Write the processed source and target cohorts as CSV.
    Synth,
    /// Pretrain on the source cohort and save one checkpoint per seed.
    Pretrain,
    /// Cross-validated runs of the adversarial model.
    Adapt {
        /// Use this pretrained checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validated runs of one baseline.
    Baseline {
        #[arg(long)]
        method: BaselineKind,
    },
    /// Injection-ratio sweep.
    Sweep,
    /// Single-discriminator ablation.
    Ablate,
    /// Source label-shift stress test.
    Stress,
    /// Summary tables and histogram data from record files.
    Report {
        /// Record files; defaults to every `.jsonl` file in the output directory.
        records: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_kv(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save(cfg: &ExperimentConfig, name: &str, records: &[RunRecord]) -> Result<()> {
    let path = cfg.out_dir.join(format!("{name}.jsonl"));
    bench::write_records(&path, records)?;
    let corr: Vec<f64> = records.iter().filter_map(|r| r.metrics.and_then(|m| m.corr)).collect();
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    match bench::mean_std(&corr) {
        Some((m, s)) => println!("{}: {} records, corr {m:.3} ± {s:.3}, {failed} failed", path.display(), records.len()),
        None => println!("{}: {} records, {failed} failed", path.display(), records.len()),
    }
    Ok(())
}

fn cohort_csv<T: Scalar>(set: &SampleSet<T>) -> String {
    let mut out = String::from("y");
    for f in &set.meta_fields {
        let _ = write!(out, ",{f}");
    }
    for c in &set.ts_channels {
        let _ = write!(out, ",{c}_mean");
    }
    out.push('\n');
    let f = set.f_ts();
    for i in 0..set.len() {
        let _ = write!(out, "{}", set.y[i]);
        for v in set.meta(i) {
            let _ = write!(out, ",{v}");
        }
        let s = set.series(i);
        for c in 0..f {
            let mean = (0..set.t).map(|t| s[t * f + c].f64()).sum::<f64>() / set.t.max(1) as f64;
            let _ = write!(out, ",{mean}");
        }
        out.push('\n');
    }
    out
}

fn synth<T: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    let h = Harness::<T>::new(cfg.clone())?;
    fs::create_dir_all(&cfg.out_dir)?;
    for (name, set) in [("source", &h.source), ("target", &h.target)] {
        let path = cfg.out_dir.join(format!("{name}.csv"));
        fs::write(&path, cohort_csv(set))?;
        println!("{}: {} rows", path.display(), set.len());
    }
    Ok(())
}

fn pretrain<T: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    let mut h = Harness::<T>::new(cfg.clone())?;
    fs::create_dir_all(&cfg.out_dir)?;
    for &seed in &cfg.seeds {
        let (params, trace) = h.pretrained(&NO_SHIFT, seed)?;
        let ckpt = cfg.out_dir.join(format!("pretrained-seed{seed}.ckpt"));
        checkpoint::save(&params, &ckpt)?;
        fs::write(cfg.out_dir.join(format!("pretrain-seed{seed}.trace.jsonl")), trace.to_jsonl()?)?;
        println!(
            "{}: best epoch {} of {}, validation MSE {:.3}",
            ckpt.display(),
            trace.best_epoch,
            trace.stop_epoch,
            trace.best().val_loss
        );
    }
    Ok(())
}

fn adapt<T: Scalar>(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<()> {
    let mut h = Harness::<T>::new(cfg.clone())?;
    if let Some(path) = ckpt {
        let params = checkpoint::load::<T>(path)?;
        if params.cfg != cfg.net {
            bail!("checkpoint network does not match the configured `net.*` keys");
        }
        for &seed in &cfg.seeds {
            let trace = TrainTrace { epochs: Vec::new(), best_epoch: 0, stop_epoch: 0, weights: None };
            h.insert_pretrained(&NO_SHIFT, seed, params.clone(), trace);
        }
    }
    save(cfg, "cv-udama", &h.run_cv(Method::Udama)?)
}

fn with_precision(cfg: &ExperimentConfig, f32_run: impl FnOnce() -> Result<()>, f64_run: impl FnOnce() -> Result<()>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => f32_run(),
        Precision::F64 => f64_run(),
    }
}

fn report(cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<()> {
    let files: Vec<PathBuf> = if files.is_empty() {
        let mut v: Vec<PathBuf> = fs::read_dir(&cfg.out_dir)
            .with_context(|| format!("listing {}", cfg.out_dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl") && !p.to_string_lossy().ends_with(".trace.jsonl"))
            .collect();
        v.sort();
        v
    } else {
        files.to_vec()
    };
    let mut records = Vec::new();
    for f in &files {
        records.extend(bench::read_records(f).with_context(|| format!("reading {}", f.display()))?);
    }
    for path in bench::make_report(&records, &cfg.out_dir.join("report"))? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Config => print!("{}", cfg.to_kv()),
        Command::Synth => with_precision(&cfg, || synth::<f32>(&cfg), || synth::<f64>(&cfg))?,
        Command::Pretrain => with_precision(&cfg, || pretrain::<f32>(&cfg), || pretrain::<f64>(&cfg))?,
        Command::Adapt { checkpoint } => {
            let c = checkpoint.as_deref();
            with_precision(&cfg, || adapt::<f32>(&cfg, c), || adapt::<f64>(&cfg, c))?
        }
        Command::Baseline { method } => save(&cfg, &format!("cv-{method}"), &bench::run_cv(&cfg, Method::Baseline(*method))?)?,
        Command::Sweep => save(&cfg, "sweep", &bench::injection_sweep(&cfg)?)?,
        Command::Ablate => save(&cfg, "ablation", &bench::ablation(&cfg)?)?,
        Command::Stress => save(&cfg, "stress", &bench::stress_test(&cfg)?)?,
        Command::Report { records } => report(&cfg, records)?,
    }
    Ok(())
}
