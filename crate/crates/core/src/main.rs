use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use relrnn::analysis::complexity::complexity_sweep;
use relrnn::analysis::gradcheck::gradcheck_suite;
use relrnn::analysis::gradtrace::{backward_trend, grad_trace, log_spread};
use relrnn::analysis::heatmap::{attention_matrix, write_heatmap};
use relrnn::analysis::omega::verify_omega_identity;
use relrnn::analysis::paths::verify_path_decomposition;
use relrnn::analysis::theorems::{
    verify_theorem1, verify_theorem2, DEFAULT_LENGTHS, THEOREM1_EIGENVALUES, THEOREM2_EIGENVALUES,
};
use relrnn::analysis::tradeoff::tradeoff_sweep;
use relrnn::analysis::write_rows;
use relrnn::cells::{CellParams, ModelKind, UnrollConfig};
use relrnn::config::{ExperimentConfig, OptimizerKind, PartialConfig};
use relrnn::rng::Rng;
use relrnn::tasks::{Task, INPUT_CHANNELS, OUTPUT_CLASSES};
use relrnn::tensor::Activation;
use relrnn::train::{train_run, transfer_eval, unroll_config, Checkpoint, RunRecord};
use relrnn::{Error, Result};

#[derive(Parser)]
#[command(name = "relrnn", version, about = "Self-attentive recurrent networks with relevancy screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, timing.csv, checkpoint.json and config.toml.
    Train(RunArgs),
    /// Evaluate a checkpoint at several sequence lengths.
    Eval(EvalArgs),
    #[command(subcommand)]
    Analyze(Analyze),
    /// Run a verification check; exits with code 2 on failure.
    Verify(VerifyArgs),
}

/// Experiment settings. Flags override values read from `--config`.
#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    nu: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<i64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    nonlinearity: Option<Activation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    early_stop: Option<f64>,
    #[arg(long)]
    out: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => PartialConfig::from_file(p)?,
            None => PartialConfig::default(),
        };
        let flags = PartialConfig {
            model: self.model,
            task: self.task,
            seq_len: self.seq_len,
            hidden: self.hidden,
            batch: self.batch,
            nu: self.nu,
            rho: self.rho,
            optimizer: self.optimizer,
            lr: self.lr,
            nonlinearity: self.nonlinearity,
            seed: self.seed,
            max_updates: self.max_updates,
            eval_every: self.eval_every,
            eval_batches: self.eval_batches,
            clip_norm: self.clip_norm,
            early_stop_accuracy: self.early_stop,
            out: self.out.clone(),
        };
        file.overlay(flags).resolve()
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 200, 400])]
    seq_len: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    eval_batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Analyze {
    /// Gradient norm at every hidden state; writes gradtrace.csv.
    GradTrace(TraceArgs),
    /// Counter sweep over sequence lengths; writes complexity.csv and complexity_fit.csv.
    Complexity(ComplexityArgs),
    /// Attention weights of one sequence; writes heatmap.csv.
    Heatmap(TraceArgs),
    /// Train one model per (nu, rho) cell and trace its gradients.
    Tradeoff(TradeoffArgs),
}

#[derive(Args)]
struct TraceArgs {
    /// Trained model. Without it, a freshly initialised model is built from the run flags.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [ModelKind::Rnn, ModelKind::MemRnn, ModelKind::RelRnn])]
    models: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',', default_values_t = [200usize, 400, 800])]
    seq_len: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 10)]
    nu: usize,
    #[arg(long, default_value_t = 10)]
    rho: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TradeoffArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [15usize])]
    nus: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 8, 18, 25])]
    rhos: Vec<usize>,
    /// Length of the traced sequence; defaults to the training length.
    #[arg(long)]
    trace_len: Option<usize>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Check {
    Gradcheck,
    Paths,
    Theorem1,
    Theorem2,
    Omega,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    check: Check,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per check (gradcheck, paths).
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Sparsity κ for theorem2.
    #[arg(long, default_value_t = 2)]
    kappa: usize,
    /// Dependency depth d for theorem2.
    #[arg(long, default_value_t = 1)]
    depth: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS)]
    seq_len: Vec<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let out = PathBuf::from(&cfg.out);
    ensure_dir(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    metrics.write_record(RunRecord::HEADER)?;
    let mut timing = csv::Writer::from_path(out.join("timing.csv"))?;
    timing.write_record(["update", "elapsed_seconds"])?;
    let start = Instant::now();
    let mut io_err: Option<Error> = None;
    let result = train_run(&cfg, |rec| {
        let r = metrics
            .write_record(rec.fields())
            .and_then(|_| timing.write_record([rec.update.to_string(), format!("{:.3}", start.elapsed().as_secs_f64())]));
        if let Err(e) = r {
            io_err.get_or_insert(e.into());
        }
    });
    metrics.flush()?;
    timing.flush()?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let outcome = result?;
    outcome.best.save(&out.join("checkpoint.json"))?;
    println!(
        "trained {} on {} (T={}) for {} updates; best eval accuracy {} at update {}; outputs in {}",
        cfg.model,
        cfg.task,
        cfg.seq_len,
        outcome.last.update,
        outcome.best.eval_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
        outcome.best.update,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let rows = transfer_eval(&ckpt, &args.seq_len, args.eval_batches, args.seed)?;
    ensure_dir(&args.out)?;
    write_rows(&args.out.join("eval.csv"), &rows)?;
    for r in &rows {
        let note = if r.shorter_than_train { " (shorter than training length)" } else { "" };
        println!("T={:<5} accuracy {:.4}{note}", r.seq_len, r.accuracy);
    }
    Ok(())
}

/// Model, unroll settings, task, length, batch and seed for a trace or heatmap.
fn trace_setup(args: &TraceArgs) -> Result<(CellParams, UnrollConfig, ExperimentConfig)> {
    let mut cfg = args.run.resolve()?;
    match &args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut c = ckpt.config.clone();
            if let Some(t) = args.run.task {
                c.task = t;
            }
            if let Some(t) = args.run.seq_len {
                c.seq_len = t;
            }
            if let Some(b) = args.run.batch {
                c.batch = b;
            }
            if let Some(s) = args.run.seed {
                c.seed = s;
            }
            c.out = cfg.out;
            cfg = c;
            Ok((ckpt.params, unroll_config(&cfg, false), cfg))
        }
        None => {
            let mut rng = Rng::new(cfg.seed);
            let params = CellParams::init(cfg.model, cfg.nonlinearity, cfg.hidden, INPUT_CHANNELS, OUTPUT_CLASSES, &mut rng)?;
            Ok((params, unroll_config(&cfg, false), cfg))
        }
    }
}

fn cmd_grad_trace(args: &TraceArgs) -> Result<()> {
    let (params, ucfg, cfg) = trace_setup(args)?;
    let rows = grad_trace(&params, &ucfg, cfg.task, cfg.seq_len, cfg.batch, cfg.seed)?;
    let out = PathBuf::from(&cfg.out);
    ensure_dir(&out)?;
    write_rows(&out.join("gradtrace.csv"), &rows)?;
    println!(
        "{} steps; log10 spread {:.3} decades; backward trend {:+.4} decades per step",
        rows.len(),
        log_spread(&rows)?,
        backward_trend(&rows)?
    );
    Ok(())
}

fn cmd_heatmap(args: &TraceArgs) -> Result<()> {
    let (params, ucfg, cfg) = trace_setup(args)?;
    let m = attention_matrix(&params, &ucfg, cfg.task, cfg.seq_len, cfg.seed)?;
    let out = PathBuf::from(&cfg.out);
    ensure_dir(&out)?;
    write_heatmap(&m, fs::File::create(out.join("heatmap.csv"))?)?;
    println!("{}×{} attention matrix written to {}", m.len(), m.len(), out.join("heatmap.csv").display());
    Ok(())
}

fn cmd_complexity(args: &ComplexityArgs) -> Result<()> {
    let ucfg = UnrollConfig {
        nu: args.nu,
        rho: args.rho,
        ..UnrollConfig::default()
    };
    let rep = complexity_sweep(&args.models, &args.seq_len, args.hidden, &ucfg, args.seed)?;
    ensure_dir(&args.out)?;
    write_rows(&args.out.join("complexity.csv"), &rep.rows)?;
    write_rows(&args.out.join("complexity_fit.csv"), &rep.fits)?;
    for f in rep.fits.iter().filter(|f| f.counter == "alignment_evals") {
        println!(
            "{:<24} alignment evals ≈ {:.3} + {:.3}·T + {:.3e}·T²  (R² {:.6})",
            f.model, f.a, f.b, f.c, f.r2
        );
    }
    Ok(())
}

fn cmd_tradeoff(args: &TradeoffArgs) -> Result<()> {
    let cfg = args.run.resolve()?;
    let trace_len = args.trace_len.unwrap_or(cfg.seq_len);
    let cells = tradeoff_sweep(&cfg, &args.nus, &args.rhos, trace_len)?;
    let out = PathBuf::from(&cfg.out);
    ensure_dir(&out)?;
    for c in &cells {
        write_rows(&out.join(format!("gradtrace_nu{}_rho{}.csv", c.nu, c.rho)), &c.trace)?;
    }
    let summary: Vec<_> = cells.iter().map(|c| c.summary.clone()).collect();
    write_rows(&out.join("tradeoff.csv"), &summary)?;
    for s in &summary {
        println!(
            "nu={:<3} rho={:<3} accuracy {} mean log10 norm {:.3} spread {:.3}",
            s.nu,
            s.rho,
            s.eval_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
            s.mean_log10_norm,
            s.log10_spread
        );
    }
    Ok(())
}

fn verdict(ok: bool, what: &str, detail: String) -> Result<()> {
    println!("{} {what}: {detail}", if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Error::Verification(format!("{what}: {detail}")))
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let csv = args.out.join("verify.csv");
    match args.check {
        Check::Gradcheck => {
            let rows = gradcheck_suite(args.seed, args.trials, 1e-4)?;
            write_rows(&csv, &rows)?;
            for r in &rows {
                println!("{:<28} max relative error {:.3e}", r.target, r.max_rel_error);
            }
            let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            verdict(rows.iter().all(|r| r.passed), "gradcheck", format!("worst relative error {worst:.3e} (tolerance 1e-4)"))
        }
        Check::Paths => {
            let mut rows = verify_path_decomposition(args.seed, args.trials, 4, 6, 1e-8, false)?;
            rows.extend(verify_path_decomposition(args.seed ^ 1, args.trials, 4, 6, 1e-8, true)?);
            write_rows(&csv, &rows)?;
            let worst = rows.iter().map(|r| r.max_error()).fold(0.0, f64::max);
            verdict(true, "path decomposition", format!("{} instances, worst relative error {worst:.3e}", rows.len()))
        }
        Check::Theorem1 => {
            let rep = verify_theorem1(&THEOREM1_EIGENVALUES, &args.seq_len, args.seed)?;
            write_rows(&csv, &rep.rows)?;
            for r in &rep.rows {
                println!("T={:<5} norm {:.6e} control {:.6e}", r.seq_len, r.norm, r.control_norm);
            }
            verdict(
                rep.passed,
                "theorem1",
                format!(
                    "slope {:.4} (window [-1.1, 0]), control slope {:.2}, min T·norm {:.4e}",
                    rep.slope, rep.control_slope, rep.min_scaled
                ),
            )
        }
        Check::Theorem2 => {
            let rep = verify_theorem2(args.kappa, args.depth, &THEOREM2_EIGENVALUES, &args.seq_len, args.seed)?;
            write_rows(&csv, &rep.rows)?;
            for r in &rep.rows {
                println!("T={:<5} norm {:.6e} control {:.6e}", r.seq_len, r.norm, r.control_norm);
            }
            verdict(
                rep.passed,
                "theorem2",
                format!(
                    "kappa {} depth {}: slope {:.4}, c {:.4}, path bound {:.4e}, control slope {:.2}",
                    rep.kappa, rep.depth, rep.slope, rep.fitted_c, rep.path_bound, rep.control_slope
                ),
            )
        }
        Check::Omega => {
            let rows = verify_omega_identity(5, 12, 4, 1e-12)?;
            write_rows(&csv, &rows)?;
            let worst = rows.iter().map(|r| r.abs_error).fold(0.0, f64::max);
            verdict(true, "omega identity", format!("{} cases, worst absolute error {worst:.3e}", rows.len()))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(Analyze::GradTrace(a)) => cmd_grad_trace(&a),
        Command::Analyze(Analyze::Heatmap(a)) => cmd_heatmap(&a),
        Command::Analyze(Analyze::Complexity(a)) => cmd_complexity(&a),
        Command::Analyze(Analyze::Tradeoff(a)) => cmd_tradeoff(&a),
        Command::Verify(a) => cmd_verify(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
