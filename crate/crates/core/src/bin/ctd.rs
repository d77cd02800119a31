use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctd::backbone::{sap_removal_delta, structural_audit};
use ctd::data::{generate_dataset, save_dataset, SyntheticSpec};
use ctd::gradsuite::{gradient_suite, GRAD_TOLERANCE};
use ctd::model::{VariantConfig, VariantName};
use ctd::train::{
    evaluate_checkpoint, evaluate_predictions, infer, train, Checkpoint, TrainConfig,
};
use ctd::{CtdError, Result};

#[derive(Parser)]
#[command(
    name = "ctd",
    version,
    about = "Train, evaluate and audit CTD saliency networks"
)]
struct Cli {
    /// Flat key=value training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives the documented determinism guarantee.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Tiny backbone, 96x96, batch 4, 300 steps.
    Desk,
}

#[derive(Subcommand)]
enum Command {
    Train(TrainArgs),
    Eval(EvalArgs),
    Infer(InferArgs),
    Audit(AuditArgs),
    GenData(GenDataArgs),
    GradCheck,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of saved prediction maps named `<id>.png` or `<id>.pgm`.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// S, M, L or all.
    #[arg(long, default_value = "all")]
    variant: String,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
}

fn train_config(cli: &Cli, args: &TrainArgs) -> Result<TrainConfig> {
    let mut text = String::new();
    if let Some(path) = &cli.config {
        text = fs::read_to_string(path).map_err(|e| CtdError::io(path, e))?;
        text.push('\n');
    }
    if matches!(cli.preset, Some(Preset::Desk)) {
        text.push_str("preset=desk\n");
    }
    if let Some(v) = &args.variant {
        text.push_str(&format!("variant={v}\n"));
    }
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(s) = args.steps {
        cfg.steps = Some(s);
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CtdError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => {
            let cfg = train_config(cli, args)?;
            let out = train(&cfg)?;
            let last = out.log.last().expect("at least one step");
            println!(
                "trained {} steps, final total={:.6}",
                out.log.len(),
                last.total
            );
            if let Some(p) = &out.checkpoint_path {
                println!("checkpoint {}", p.display());
                println!("log {}", cfg.out_dir.join("train.log").display());
            }
        }
        Command::Eval(args) => {
            let report = match (&args.checkpoint, &args.predictions) {
                (Some(ck), _) => evaluate_checkpoint(ck, &args.data)?,
                (None, Some(pred)) => evaluate_predictions(pred, &args.data)?,
                (None, None) => {
                    return Err(CtdError::Usage(
                        "eval needs --checkpoint or --predictions".into(),
                    ))
                }
            };
            print!("{}", report.to_text());
            if let Some(path) = &args.csv {
                fs::write(path, report.to_csv()).map_err(|e| CtdError::io(path, e))?;
            }
        }
        Command::Infer(args) => {
            let model = Checkpoint::load(&args.checkpoint)?.restore()?;
            let summary = infer(&model, &args.images, &args.out)?;
            for p in &summary.written {
                println!("wrote {}", p.display());
            }
            for (p, e) in &summary.failures {
                eprintln!("failed {}: {e}", p.display());
            }
            if let Some((_, e)) = summary.failures.into_iter().next() {
                return Err(e);
            }
        }
        Command::Audit(args) => {
            let names: Vec<VariantName> = if args.variant.eq_ignore_ascii_case("all") {
                vec![VariantName::S, VariantName::M, VariantName::L]
            } else {
                vec![args.variant.parse()?]
            };
            let mut all_pass = true;
            for name in names {
                let v = VariantConfig::named(name);
                let report = structural_audit(&v)?;
                println!("== CTD-{name} ({}) ==", v.backbone.kind);
                if args.csv {
                    print!("{}", report.to_csv());
                    println!("{}", report.verdict_line());
                } else {
                    print!("{}", report.to_text());
                }
                if v.sap_enabled {
                    println!("SAP removal delta: {}", sap_removal_delta(&v)?);
                }
                all_pass &= report.passed();
            }
            if !all_pass {
                return Err(CtdError::Validation(
                    "parameter audit outside tolerance".into(),
                ));
            }
        }
        Command::GenData(args) => {
            let spec = SyntheticSpec {
                size: args.size,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let samples = generate_dataset(&spec, args.count)?;
            save_dataset(&args.out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), args.out.display());
        }
        Command::GradCheck => {
            let cases = gradient_suite(cli.seed.unwrap_or(0))?;
            let mut failed = 0;
            for c in &cases {
                println!(
                    "{} {:<28} max_rel_error={:.3e} checked={}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.report.max_rel_error,
                    c.report.checked
                );
                failed += !c.passed() as usize;
            }
            if failed > 0 {
                return Err(CtdError::Numerical(format!(
                    "{failed} gradient checks exceed {GRAD_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
