use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use splitleak::harness::{self, ExperimentConfig, Lab, Overrides, SuiteOutput, SEED_ENV};
use splitleak::model::{save_checkpoint, toy_train, Precision, SplitModel};
use splitleak::Error;

#[derive(Parser)]
#[command(name = "splitleak", version, about = "Privacy leakage experiments on split transformer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized checkpoint.
    GenModel(ModelArgs),
    /// Train on the corpus and write a checkpoint.
    Train(ModelArgs),
    /// ActInv under each configured defense.
    Attack(Common),
    /// Five-level grids for every configured defense kind, with utility.
    DefendGrid(Common),
    /// Sweep the split point under a fixed defense.
    Q1Ablation(Common),
    /// Monte Carlo PAF per client-side layer.
    Paf(Common),
    /// Attack success on bypassed models against layer PAF.
    Bypass(Common),
    /// Client-side cost per defense and the selective-protection fit.
    Timing(Common),
    /// Verify hashes and summaries of finished runs and draw charts.
    Report {
        /// A run directory, or an output directory holding several.
        dir: PathBuf,
    },
    /// Print the fully resolved configuration as TOML.
    Config(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file; flags take precedence over it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    split_point: Option<usize>,
    /// Defense cell as `kind:parameter`; repeatable.
    #[arg(long = "defense")]
    defenses: Vec<String>,
    /// Comma-separated split points for q1-ablation.
    #[arg(long, value_delimiter = ',')]
    q1: Vec<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to write.
    #[arg(long = "save")]
    save: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Prec,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    F64,
    F32,
}

impl From<Prec> for Precision {
    fn from(p: Prec) -> Self {
        match p {
            Prec::F64 => Precision::F64,
            Prec::F32 => Precision::F32,
        }
    }
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.out_dir.clone(),
            workers: self.workers,
            checkpoint: self.checkpoint.clone(),
            corpus: self.corpus.clone(),
            prompts: self.prompts,
            max_len: self.max_len,
            iterations: self.iterations,
            train_steps: self.train_steps,
            split_point: self.split_point,
            defenses: self.defenses.clone(),
            q1_sweep: self.q1.clone(),
            trials: self.trials,
            draws: self.draws,
        }
    }

    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let env = std::env::var(SEED_ENV).ok();
        ExperimentConfig::resolve(self.config.as_deref(), env.as_deref(), &self.overrides()).map_err(Failure::Config)
    }

    fn lab(&self) -> Result<Lab, Failure> {
        Lab::prepare(self.resolve()?).map_err(Failure::Config)
    }
}

enum Failure {
    Config(Error),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn suite_done(out: SuiteOutput) -> Result<(), Failure> {
    for s in &out.summary {
        let u = s
            .utility
            .map(|u| format!("  agreement {:.3} kl {:.4}", u.agreement, u.kl_divergence))
            .unwrap_or_default();
        println!(
            "{:<18} {:<8} q1={}  n={:<3} precision {:6.2} ± {:5.2}  recall {:6.2} ± {:5.2}  rouge-l {:.3} ± {:.3}{u}",
            s.cell.defense,
            s.cell.parameter,
            s.cell.q1,
            s.n,
            s.precision.mean,
            s.precision.std,
            s.recall.mean,
            s.recall.std,
            s.rouge_l.mean,
            s.rouge_l.std
        );
    }
    println!("wrote {}", out.dir.display());
    if out.errors > 0 {
        return Err(Failure::Runtime(format!(
            "{} samples failed; see error rows in {}",
            out.errors,
            out.results_path().display()
        )));
    }
    Ok(())
}

fn write_model(model: &SplitModel, path: &Path, precision: Prec) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    save_checkpoint(model, path, precision.into())?;
    let bytes = std::fs::read(path).map_err(Error::from)?;
    println!("wrote {} (sha256 {})", path.display(), harness::sha256_hex(&bytes));
    Ok(())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenModel(a) => {
            let cfg = a.common.resolve()?;
            let model = SplitModel::init(cfg.model.config.clone()).map_err(Failure::Config)?;
            write_model(&model, &a.save, a.precision)
        }
        Command::Train(a) => {
            let common = a.common.clone();
            let resumed = common.checkpoint.is_some();
            if !resumed && common.train_steps == Some(0) {
                return Err(Failure::Config(Error::Config("train needs train_steps >= 1".into())));
            }
            let lab = common.lab()?;
            let mut model = lab.model.clone();
            if resumed {
                let mc = model.config().clone();
                let seqs = harness::training_sequences(&lab.corpus, &lab.tokenizer, mc.max_seq_len);
                let rep = toy_train(&mut model, &seqs, &lab.config.model.train_config(mc.seed))?;
                println!("loss {:.4} -> {:.4}", rep.initial_smoothed, rep.final_smoothed);
            }
            write_model(&model, &a.save, a.precision)
        }
        Command::Attack(c) => suite_done(c.lab()?.run_attack_suite()?),
        Command::DefendGrid(c) => suite_done(c.lab()?.run_defense_grid()?),
        Command::Q1Ablation(c) => suite_done(c.lab()?.run_q1_ablation()?),
        Command::Paf(c) => {
            let out = c.lab()?.run_paf_study()?;
            for r in &out.reports {
                println!(
                    "{:<22} paf {:8.4} ± {:.4}  max {:9.4}  ‖J‖ {:8.4}{}",
                    r.layer.to_string(),
                    r.mean,
                    r.stderr,
                    r.max_paf,
                    r.spectral_norm,
                    if r.degenerate { "  (zero Jacobian)" } else { "" }
                );
            }
            println!("wrote {}", out.dir.display());
            Ok(())
        }
        Command::Bypass(c) => {
            let out = c.lab()?.run_bypass_study()?;
            for r in &out.study.rows {
                println!("{:<22} paf {:8.4}  rouge-l {:.3} ± {:.3}", r.layer.to_string(), r.paf, r.rouge_l_mean, r.rouge_l_std);
            }
            println!(
                "pearson r = {:.4}{}",
                out.study.r,
                if out.study.degenerate { " (degenerate)" } else { "" }
            );
            println!("wrote {}", out.dir.display());
            Ok(())
        }
        Command::Timing(c) => {
            let out = c.lab()?.run_timing()?;
            for r in &out.report.rows {
                println!("{:<28} {:10.5} ± {:.5} s/1k tokens", r.label, r.per_1k.mean, r.per_1k.std);
            }
            if let Some(f) = &out.report.fit {
                println!("selective fit: {:.5} + {:.5}·r", f.a, f.b);
            }
            println!("wrote {}", out.dir.display());
            Ok(())
        }
        Command::Report { dir } => {
            if !dir.is_dir() {
                return Err(Failure::Config(Error::Config(format!("{} is not a directory", dir.display()))));
            }
            let rep = harness::report(&dir)?;
            for c in &rep.checks {
                println!("{} {} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.dir.display(), c.name, c.detail);
            }
            if rep.ok() {
                Ok(())
            } else {
                Err(Failure::Runtime("report found problems".into()))
            }
        }
        Command::Config(c) => {
            let cfg = c.resolve()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
