use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccpe::cgm::FusionVariant;
use ccpe::data::{domain_dominance_probe, export_dataset, write_captions};
use ccpe::harness::{
    emit_ablation, emit_report, gradient_suite, load_samples, reemit_from_manifest, run_ablation,
    run_fold, run_loo_protocol, AblationAxis, Components, Preset, RunConfig, SuiteDims,
};
use ccpe::metrics::{EvalReport, ThresholdRule};
use ccpe::{CcpeError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ccpe", version, about = "Class-free prompt learning for face anti-spoofing")]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base configuration when no file is given, or when the file sets no preset.
    #[arg(long, global = true, default_value = "toy")]
    preset: Preset,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    steps: Option<usize>,

    #[arg(long, global = true)]
    batch_size: Option<usize>,

    #[arg(long, global = true)]
    lr: Option<f64>,

    /// sum, product, concat or cgm.
    #[arg(long, global = true)]
    fusion: Option<FusionVariant>,

    /// `+`-separated subset of ICPG, LCPG and CGM.
    #[arg(long, global = true)]
    components: Option<Components>,

    /// Use this threshold instead of the EER threshold of each test fold.
    #[arg(long, global = true)]
    fixed_threshold: Option<f64>,

    /// Offline caption file (JSON lines of `{"id", "caption"}`).
    #[arg(long, global = true)]
    captions: Option<PathBuf>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Raise log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset and its captions.
    GenerateData,
    /// Run the gradient suite over every differentiable module.
    Gradcheck {
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Train on all domains but one and evaluate on it.
    Train {
        #[arg(long)]
        held_out: String,
    },
    /// Leave-one-domain-out protocol over every domain.
    Loo,
    /// Run one ablation table.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Re-create a CSV from a saved manifest.
    Report {
        manifest: PathBuf,
        /// Defaults to the manifest path with a `.csv` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl GlobalOpts {
    fn run_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path, self.preset)?,
            None => RunConfig::preset(self.preset),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.optimizer.lr = v;
        }
        if let Some(v) = self.fusion {
            c.fusion = v;
        }
        if let Some(v) = self.components {
            c.components = v;
        }
        if let Some(t) = self.fixed_threshold {
            c.threshold = ThresholdRule::Fixed(t);
        }
        if let Some(p) = &self.captions {
            c.caption_file = Some(p.clone());
        }
        if let Some(p) = &self.output_dir {
            c.output_dir = p.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        let m = &r.metrics;
        println!(
            "{:>4} {:>8}  HTER {:.4}  AUC {:.4}  EER {:.4}{}",
            r.fold,
            r.held_out,
            m.hter,
            m.auc,
            m.eer,
            if r.valid { "" } else { "  (invalid)" }
        );
    }
}

fn generate_data(config: &RunConfig) -> Result<()> {
    let samples = load_samples(config)?;
    let dir = &config.output_dir;
    export_dataset(&dir.join("dataset.jsonl"), &samples)?;
    write_captions(
        &dir.join("captions.jsonl"),
        samples.iter().map(|s| (s.id.as_str(), s.caption.as_str())),
    )?;
    let probe = domain_dominance_probe(&samples, config.dataset.seed)?;
    println!(
        "{} samples written to {}; probe accuracy domain {:.3} class {:.3}",
        samples.len(),
        dir.display(),
        probe.domain_accuracy,
        probe.class_accuracy
    );
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<()> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let entries = gradient_suite(SuiteDims::default(), &seeds)?;
    let mut failed = 0;
    for e in &entries {
        let ok = e.report.passed();
        failed += usize::from(!ok);
        println!(
            "{} {:<16} seed {}  max rel error {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            e.module,
            e.seed,
            e.report.max_rel_error
        );
    }
    if failed > 0 {
        return Err(CcpeError::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn train_one(config: &RunConfig, held_out: &str) -> Result<()> {
    let index = config
        .dataset
        .domains
        .iter()
        .position(|d| d == held_out)
        .ok_or_else(|| CcpeError::Config(format!("unknown domain `{held_out}`")))?;
    let samples = load_samples(config)?;
    let fold = run_fold(config, &samples, index, held_out)?;
    if let Some(last) = fold.trace.last() {
        println!("final loss {:.5} after {} steps", last.total, last.step + 1);
    }
    let reports = [fold.report];
    print_reports(&reports);
    emit_report(&reports, &config.output_dir.join(format!("train-{held_out}.csv")), config)
}

fn loo(config: &RunConfig) -> Result<()> {
    let outcome = run_loo_protocol(config)?;
    print_reports(&outcome.reports);
    emit_report(&outcome.reports, &config.output_dir.join("loo.csv"), config)
}

fn ablate(config: &RunConfig, axis: AblationAxis) -> Result<()> {
    let table = run_ablation(config, axis)?;
    for row in &table.rows {
        if let Some(avg) = row.average() {
            println!("{:<28} avg HTER {:.4}  AUC {:.4}", row.cell, avg.metrics.hter, avg.metrics.auc);
        }
    }
    emit_ablation(&table, &config.output_dir.join(format!("ablation-{}.csv", axis.name())), config)
}

fn report(manifest: &Path, out: Option<&Path>) -> Result<()> {
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let name = manifest.to_string_lossy();
            PathBuf::from(format!("{}.csv", name.strip_suffix(".manifest.json").unwrap_or(&name)))
        }
    };
    reemit_from_manifest(manifest, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Report { manifest, out } = &cli.command {
        return report(manifest, out.as_deref());
    }
    let config = cli.opts.run_config()?;
    log::info!("config digest {}", config.digest());
    match &cli.command {
        Command::GenerateData => generate_data(&config),
        Command::Gradcheck { seeds } => gradcheck(*seeds),
        Command::Train { held_out } => train_one(&config, held_out),
        Command::Loo => loo(&config),
        Command::Ablate { axis } => ablate(&config, *axis),
        Command::Report { .. } => unreachable!(),
    }
}

fn exit_code(e: &CcpeError) -> u8 {
    match e {
        CcpeError::Numerical(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.opts.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
