use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use faithkit::dominance::verify_lemma;
use faithkit::harness::{
    compare_methods, emit_report, ingest_dataset, read_artifact, run_evaluation, write_artifact,
    write_profile_csv, write_summary, BackendMode, Method, RunConfig,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "faithkit",
    version,
    about = "Perceptual-faithfulness evaluation for multimodal reasoning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over a dataset and write a JSONL run artifact.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Artifact path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both methods on the same items and write artifacts plus reports.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize run artifacts.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Per-step difference profile, first artifact minus second.
        #[arg(long)]
        diff: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check the dominance lemma and its strict corollary on simulated chains.
    VerifyLemma {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Acceptance threshold; repeat for several. Defaults to 0.4, 0.6, 0.8.
        #[arg(long = "threshold")]
        thresholds: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cot,
    Faithact,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    /// TOML config file; overrides built-in defaults, overridden by flags.
    #[arg(long, env = "FAITHKIT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    threshold_c: Option<f64>,
    #[arg(long)]
    box_threshold: Option<f64>,
    #[arg(long)]
    text_threshold: Option<f64>,
    #[arg(long)]
    max_refine: Option<u32>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(b) = self.backend {
            cfg.backend.mode = match b {
                BackendArg::Mock => BackendMode::Mock,
                BackendArg::Http => BackendMode::Http,
            };
        }
        if let Some(d) = &self.scene_dir {
            cfg.backend.scene_dir = Some(d.clone());
        }
        if let Some(u) = &self.base_url {
            cfg.backend.base_url = Some(u.clone());
        }
        let v = &mut cfg.plan.verification;
        macro_rules! overlay {
            ($($src:expr => $dst:expr),* $(,)?) => { $(if let Some(x) = $src { $dst = x; })* };
        }
        overlay! {
            self.alpha => v.alpha,
            self.tau_p => v.tau_p,
            self.box_threshold => v.box_threshold,
            self.text_threshold => v.text_threshold,
            self.threshold_c => cfg.plan.step_threshold_c,
            self.max_refine => cfg.plan.max_refine_rounds,
            self.seed => cfg.seed,
            self.workers => cfg.workers,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Evaluate { run, method, out } => {
            let cfg = run.config()?;
            let records = ingest_dataset(&run.dataset)?;
            let backend = cfg.backend.build(cfg.seed)?;
            let method = match method {
                MethodArg::Cot => Method::Cot,
                MethodArg::Faithact => Method::Faithact,
            };
            let artifact = run_evaluation(
                &records,
                &dataset_name(&run.dataset),
                method,
                &cfg,
                backend.as_ref(),
            )?;
            write_artifact(&out, &artifact)?;
            let failed = artifact.items.iter().filter(|i| i.is_failed()).count();
            eprintln!(
                "{} items, {failed} failed -> {}",
                artifact.items.len(),
                out.display()
            );
        }
        Command::Compare { run, out } => {
            let cfg = run.config()?;
            let records = ingest_dataset(&run.dataset)?;
            let backend = cfg.backend.build(cfg.seed)?;
            let cmp = compare_methods(
                &records,
                &dataset_name(&run.dataset),
                &cfg,
                backend.as_ref(),
            )?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_artifact(&out.join("cot.jsonl"), &cmp.cot)?;
            write_artifact(&out.join("faithact.jsonl"), &cmp.faithact)?;
            write_summary(&out, &cmp.rows)?;
            write_profile_csv(&out.join("step_difference.csv"), &cmp.profile)?;
            for row in &cmp.rows {
                println!("{}\t{}\t{}", row.method.as_str(), row.dataset, row.mean_std);
            }
        }
        Command::Report { inputs, diff, out } => {
            let artifacts = inputs
                .iter()
                .map(|p| read_artifact(p))
                .collect::<Result<Vec<_>, _>>()?;
            for path in emit_report(&artifacts, &out, diff)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::VerifyLemma {
            trials,
            seed,
            thresholds,
        } => {
            let thresholds = if thresholds.is_empty() {
                vec![0.4, 0.6, 0.8]
            } else {
                thresholds
            };
            let mut failed = false;
            for c in thresholds {
                if !(0.0..=1.0).contains(&c) {
                    bail!("threshold {c} outside [0,1]");
                }
                let s = verify_lemma(trials, seed, c);
                failed |= s.violations > 0
                    || s.strict_violations > 0
                    || s.precondition_failures > 0
                    || s.qualifying < trials;
                println!("{}", serde_json::to_string(&s)?);
            }
            if failed {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
