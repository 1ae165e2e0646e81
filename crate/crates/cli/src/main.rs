//! Command-line harness: synthesize bundles, run the online engine over a
//! bundle, re-evaluate record files, and check gradients against finite
//! differences.
//!
//! Exit codes: 0 success, 1 validation error (inputs that can never work),
//! 2 runtime error (an attempt that failed partway), 3 gradient check failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use protoadapt_core::config::{EngineConfig, OptimizerKind};
use protoadapt_core::datagen::{generate, SynthSpec};
use protoadapt_core::harness::{
    compute_metrics, run_stream, RunOptions, DEFAULT_CUMULATIVE_STRIDE,
};
use protoadapt_core::io::{
    read_json, read_manifest, read_records, write_bundle, write_json, DatasetBundle, RecordWriter,
};
use protoadapt_core::learning::{
    finite_difference_check, random_instance, FdOptions, GradientMutation,
};
use protoadapt_core::space::build_composition_space;
use protoadapt_core::{Error, Result};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "protoadapt",
    about = "Online test-time prototype adaptation for compositional zero-shot classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream a dataset bundle through the adaptation engine once, persisting
    /// records, metrics, and the effective configuration.
    Run(RunArgs),
    /// Recompute the metrics document from a record file (idempotent; matches
    /// the metrics emitted by run).
    Eval(EvalArgs),
    /// Compare analytical gradients against central finite differences on
    /// random instances.
    Gradcheck(GradcheckArgs),
    /// Generate a deterministic synthetic dataset bundle.
    Synth(SynthArgs),
}

/// Engine configuration overrides. Every EngineConfig field has a flag;
/// flags override config-file values, which override defaults.
#[derive(Args, Debug, Default)]
struct EngineFlags {
    #[arg(long, value_name = "N", help_heading = "Engine config")]
    queue_capacity: Option<usize>,
    #[arg(long, value_name = "FLOAT", help_heading = "Engine config")]
    tau: Option<f64>,
    #[arg(long, value_name = "FLOAT", help_heading = "Engine config")]
    tau_m: Option<f64>,
    #[arg(long, value_name = "FLOAT", help_heading = "Engine config")]
    theta: Option<f64>,
    #[arg(long, value_name = "FLOAT", help_heading = "Engine config")]
    alpha: Option<f64>,
    #[arg(long, value_name = "FLOAT", help_heading = "Engine config")]
    beta: Option<f64>,
    #[arg(long, value_name = "FLOAT", help_heading = "Engine config")]
    lambda_mcrl: Option<f64>,
    #[arg(long, value_name = "FLOAT", help_heading = "Engine config")]
    learning_rate: Option<f64>,
    #[arg(long, value_name = "N", help_heading = "Engine config")]
    steps_per_sample: Option<usize>,
    #[arg(long, value_enum, help_heading = "Engine config")]
    optimizer: Option<OptimizerFlag>,
    #[arg(long, value_name = "BOOL", help_heading = "Engine config")]
    scale_logits_by_tau: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Engine config")]
    entropy_on_base_prototypes: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    enable_queue: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    enable_textual_kam: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    enable_visual_kam: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    enable_auw: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    warmstart_seen: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    warmstart_unseen: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    enable_l_pe: Option<bool>,
    #[arg(long, value_name = "BOOL", help_heading = "Ablation switches")]
    enable_l_mcrl: Option<bool>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum OptimizerFlag {
    Sgd,
    Adam,
}

impl EngineFlags {
    fn apply(&self, cfg: &mut EngineConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        macro_rules! set_switch {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.switches.$field = v; })*
            };
        }
        set!(
            queue_capacity,
            tau,
            tau_m,
            theta,
            alpha,
            beta,
            lambda_mcrl,
            learning_rate,
            steps_per_sample,
            scale_logits_by_tau,
            entropy_on_base_prototypes
        );
        if let Some(o) = self.optimizer {
            cfg.optimizer = match o {
                OptimizerFlag::Sgd => OptimizerKind::Sgd,
                OptimizerFlag::Adam => OptimizerKind::Adam,
            };
        }
        set_switch!(
            enable_queue,
            enable_textual_kam,
            enable_visual_kam,
            enable_auw,
            warmstart_seen,
            warmstart_unseen,
            enable_l_pe,
            enable_l_mcrl
        );
    }
}

#[derive(Args)]
struct RunArgs {
    /// Dataset bundle manifest (JSON with a files section).
    #[arg(long, value_name = "MANIFEST.json")]
    bundle: PathBuf,
    /// Engine configuration file (JSON); missing fields take defaults.
    #[arg(long, value_name = "CONFIG.json")]
    config: Option<PathBuf>,
    /// Shuffle the test stream with this seed (file order when unset).
    #[arg(long, value_name = "SEED")]
    order_seed: Option<u64>,
    /// Output directory for records.jsonl, metrics.json, and run.json.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Stride of the cumulative-accuracy series in the metrics document.
    #[arg(long, value_name = "N", default_value_t = DEFAULT_CUMULATIVE_STRIDE)]
    cumulative_stride: usize,
    /// Include the final per-class queue snapshot in run.json.
    #[arg(long)]
    queue_snapshot: bool,
    #[command(flatten)]
    engine: EngineFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction record file (one JSON object per line).
    #[arg(long, value_name = "RECORDS.jsonl")]
    records: PathBuf,
    /// Manifest defining the composition space the records refer to.
    #[arg(long, value_name = "MANIFEST.json")]
    manifest: PathBuf,
    /// Write the metrics document here (stdout when unset).
    #[arg(long, value_name = "METRICS.json")]
    out: Option<PathBuf>,
    /// Stride of the cumulative-accuracy series (match the run's value for
    /// byte-identical metrics).
    #[arg(long, value_name = "N", default_value_t = DEFAULT_CUMULATIVE_STRIDE)]
    cumulative_stride: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random instances to check.
    #[arg(long, value_name = "N", default_value_t = 100)]
    trials: usize,
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "N", default_value_t = 2)]
    min_classes: usize,
    #[arg(long, value_name = "N", default_value_t = 6)]
    max_classes: usize,
    #[arg(long, value_name = "N", default_value_t = 2)]
    min_dims: usize,
    #[arg(long, value_name = "N", default_value_t = 8)]
    max_dims: usize,
    /// Central-difference step.
    #[arg(long, value_name = "FLOAT", default_value_t = 1e-5)]
    h: f64,
    /// Maximum relative error allowed for a pass.
    #[arg(long, value_name = "FLOAT", default_value_t = 1e-4)]
    tolerance: f64,
    /// Upper bound on coordinates checked per adapter block.
    #[arg(long, value_name = "N", default_value_t = 200)]
    max_coords: usize,
    /// Engine configuration file; its switches select the differentiated
    /// blocks (scalar hyperparameters stay randomized per instance).
    #[arg(long, value_name = "CONFIG.json")]
    config: Option<PathBuf>,
    /// Test hook: zero the textual gradient block so the check must fail.
    #[arg(long, hide = true)]
    inject_gradient_bug: bool,
    #[command(flatten)]
    engine: EngineFlags,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis spec (JSON); defaults when unset.
    #[arg(long, value_name = "SPEC.json")]
    spec: Option<PathBuf>,
    /// Directory receiving the manifest and matrix files.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; anything else is a
            // validation error of the invocation itself.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

/// Reject missing input paths up front so a typo is a validation error, not
/// a mid-attempt I/O failure.
fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn effective_config(path: Option<&PathBuf>, flags: &EngineFlags) -> Result<EngineConfig> {
    let mut cfg = match path {
        Some(p) => {
            require_exists(p, "config file")?;
            read_json::<EngineConfig>(p)?
        }
        None => EngineConfig::default(),
    };
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    require_exists(&args.bundle, "bundle manifest")?;
    let config = effective_config(args.config.as_ref(), &args.engine)?;
    let bundle = DatasetBundle::load(&args.bundle)?;
    let options = RunOptions {
        order_seed: args.order_seed,
        cumulative_stride: args.cumulative_stride,
    };

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::Runtime(format!("create {}: {e}", args.out_dir.display())))?;
    let records_path = args.out_dir.join("records.jsonl");
    let mut writer = RecordWriter::create(&records_path)?;
    // Stream records to disk as they are produced; a failure mid-stream
    // leaves the flushed prefix behind as a valid, evaluatable file.
    let summary = run_stream(&bundle, &config, &options, |rec| writer.append(rec))?;

    let metrics_path = args.out_dir.join("metrics.json");
    write_json(&metrics_path, &summary.metrics)?;
    let mut run_doc = json!({
        "config": summary.config,
        "order_seed": summary.order_seed,
        "cumulative_stride": args.cumulative_stride,
        "samples": summary.records.len(),
        "warnings": summary.warnings,
        "latency": summary.latency,
        "rolled_back": summary.rolled_back,
    });
    if args.queue_snapshot {
        run_doc["queues"] = serde_json::to_value(&summary.queues)
            .map_err(|e| Error::Runtime(format!("serialize queue snapshot: {e}")))?;
    }
    let run_path = args.out_dir.join("run.json");
    write_json(&run_path, &run_doc)?;

    println!(
        "effective config:\n{}",
        serde_json::to_string_pretty(&summary.config).expect("config serializes")
    );
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "processed {} samples (rolled back {}), AUC {:.6}, best HM {:.6}",
        summary.records.len(),
        summary.rolled_back,
        summary.metrics.bias_curve.auc,
        summary.metrics.bias_curve.best_hm
    );
    println!("records: {}", records_path.display());
    println!("metrics: {}", metrics_path.display());
    println!("run doc: {}", run_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    require_exists(&args.records, "records file")?;
    require_exists(&args.manifest, "manifest")?;
    let manifest = read_manifest(&args.manifest)?;
    // Resolve the optional feasibility mask exactly like a bundle load does.
    let mask = match manifest
        .files
        .as_ref()
        .and_then(|f| f.feasibility_mask.as_ref())
    {
        Some(rel) => {
            let dir = args.manifest.parent().unwrap_or(Path::new("."));
            Some(read_json::<Vec<bool>>(&dir.join(rel))?)
        }
        None => None,
    };
    let space = build_composition_space(&manifest, mask.as_deref())?;
    let records = read_records(&args.records)?;
    let metrics = compute_metrics(&records, &space, args.cumulative_stride)?;
    match &args.out {
        Some(path) => {
            write_json(path, &metrics)?;
            println!("metrics: {}", path.display());
        }
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&metrics).expect("metrics serialize")
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    if args.trials == 0 {
        return Err(Error::Input("nothing to check: trials is 0".into()));
    }
    if args.min_classes < 2 || args.min_classes > args.max_classes {
        return Err(Error::Input(
            "class range must satisfy 2 <= min <= max".into(),
        ));
    }
    if args.min_dims < 2 || args.min_dims > args.max_dims {
        return Err(Error::Input(
            "dim range must satisfy 2 <= min <= max".into(),
        ));
    }
    let switches = effective_config(args.config.as_ref(), &args.engine)?.switches;
    let mutation = if args.inject_gradient_bug {
        GradientMutation::ZeroTextual
    } else {
        GradientMutation::None
    };

    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut worst: f64 = 0.0;
    let mut mean_sum = 0.0;
    let mut failures = 0usize;
    for i in 0..args.trials {
        let mut inst = random_instance(
            &mut rng,
            (args.min_classes, args.max_classes),
            (args.min_dims, args.max_dims),
        );
        inst.config.switches = switches;
        let opts = FdOptions {
            h: args.h,
            tolerance: args.tolerance,
            max_coords: args.max_coords,
            seed: args.seed.wrapping_add(i as u64),
        };
        let report =
            finite_difference_check(&inst.ctx(), &inst.kam, &inst.config, &opts, mutation)?;
        worst = worst.max(report.max_rel_err);
        mean_sum += report.mean_rel_err;
        if !report.passed {
            failures += 1;
        }
    }
    let passed = failures == 0;
    let doc = json!({
        "trials": args.trials,
        "classes": [args.min_classes, args.max_classes],
        "dims": [args.min_dims, args.max_dims],
        "h": args.h,
        "tolerance": args.tolerance,
        "switches": switches,
        "max_rel_err": worst,
        "mean_rel_err": mean_sum / args.trials as f64,
        "failures": failures,
        "passed": passed,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("report serializes")
    );
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradcheck failed: {failures}/{} instances exceeded tolerance {}",
            args.trials, args.tolerance
        );
        Ok(ExitCode::from(EXIT_GRADCHECK))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let spec = match &args.spec {
        Some(p) => {
            require_exists(p, "spec file")?;
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            SynthSpec::from_json(&text)?
        }
        None => SynthSpec::default(),
    };
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::Runtime(format!("create {}: {e}", args.out_dir.display())))?;
    let bundle = generate(&spec)?;
    let manifest_path = write_bundle(&args.out_dir, &bundle)?;
    println!(
        "wrote bundle: {} attributes x {} objects, {} seen / {} unseen pairs, \
         {} train rows, {} test rows, dim {}",
        bundle.manifest.attributes.len(),
        bundle.manifest.objects.len(),
        bundle.manifest.seen_pairs.len(),
        bundle.manifest.unseen_pairs.len(),
        bundle.train_features.rows(),
        bundle.test_features.rows(),
        bundle.text.cols(),
    );
    println!("manifest: {}", manifest_path.display());
    Ok(ExitCode::SUCCESS)
}
