use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ttl_core::adapt::{Method, PredictionProtocol};
use ttl_core::harness::dataset::{Dataset, DatasetKind, DatasetSpec, Split};
use ttl_core::harness::eval::{
    csv_string, octile_records, run_eval, write_csv, EvalConfig, OCTILE_HEADER, SAMPLE_HEADER, SUMMARY_HEADER,
};
use ttl_core::harness::model::Model;
use ttl_core::harness::pretrain::{pretrain, PretrainConfig};
use ttl_core::harness::shifts::{ShiftKind, ShiftSpec};
use ttl_core::harness::sweep::{run_sweep, sweep_header, SweepAxis, SweepSpec};
use ttl_core::lora::{parse_layers, parse_projections, InitPolicy, ScalingConvention};
use ttl_core::objective::WeightDirection;
use ttl_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Test-time low-rank adaptation on a toy vision transformer.
#[derive(Parser)]
#[command(name = "ttl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    MakeDataset(MakeDatasetArgs),
    /// Train the encoder and write checkpoint plus prototypes.
    Pretrain(PretrainArgs),
    /// Evaluate one method and write a summary CSV.
    Eval(EvalCmd),
    /// Evaluate each value of one configuration axis.
    Sweep(SweepCmd),
    /// Write the entropy-octile accuracy table.
    Octiles(OctilesCmd),
}

#[derive(Args)]
struct MakeDatasetArgs {
    #[arg(long, default_value = "shapes")]
    kind: DatasetKind,
    #[arg(long, default_value_t = 4000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    /// none, gaussian_noise, rotation, channel_shift or blur.
    #[arg(long, default_value = "none")]
    shift: ShiftKind,
    #[arg(long, default_value_t = 3)]
    severity: u8,
    /// Seed of the shift noise; defaults to --seed.
    #[arg(long)]
    shift_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output base path; writes BASE.json and BASE.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset base path.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    /// Train without crop/flip augmentation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for encoder and prototype containers.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Model directory written by `pretrain`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset base path.
    #[arg(long)]
    data: PathBuf,
    /// ttl_weighted, ttl_unweighted, entropy_select or zeroshot.
    #[arg(long, default_value = "ttl_weighted")]
    method: Method,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f64,
    /// 1-based blocks, e.g. `4-6` or `2,5`.
    #[arg(long, default_value = "4-6")]
    layers: String,
    /// Adapted projections, e.g. `q,v`.
    #[arg(long, default_value = "q,v")]
    proj: String,
    #[arg(long, default_value = "xavier_a_zero_b")]
    init: InitPolicy,
    /// `paper` (γ = r/α) or `conventional` (γ = α/r).
    #[arg(long, default_value = "paper")]
    scaling: ScalingConvention,
    #[arg(long, default_value_t = 64)]
    views: usize,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// confident_up, literal or uniform.
    #[arg(long, default_value = "confident_up")]
    direction: WeightDirection,
    /// Let gradients flow through the view weights.
    #[arg(long)]
    beta_grad: bool,
    /// original_view or mean_probs.
    #[arg(long, default_value = "original_view")]
    protocol: PredictionProtocol,
    /// Keep adapter state across samples instead of resetting per episode.
    #[arg(long)]
    persistent: bool,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    eval: EvalArgs,
    /// Summary CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-sample CSV path.
    #[arg(long)]
    per_sample: Option<PathBuf>,
    /// Optional octile CSV path.
    #[arg(long)]
    octiles: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    eval: EvalArgs,
    /// rank, alpha, layers, attention_groups, cutoff_rho, num_views, steps,
    /// epsilon or init_policy.
    #[arg(long)]
    axis: SweepAxis,
    /// Values to try; repeat the flag for set-valued axes (`--values 4-6
    /// --values 6`), or give a comma list for scalar axes.
    #[arg(long, required = true, num_args = 1..)]
    values: Vec<String>,
    /// Comma-separated seeds shared by every value.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OctilesCmd {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    out: PathBuf,
}

impl EvalArgs {
    fn config(&self) -> Result<EvalConfig, Error> {
        let mut cfg = EvalConfig::default();
        cfg.lora.rank = self.rank;
        cfg.lora.alpha = self.alpha;
        cfg.lora.target_layers = parse_layers(&self.layers)?;
        cfg.lora.target_projections = parse_projections(&self.proj)?;
        cfg.lora.init_policy = self.init;
        cfg.lora.scaling = self.scaling;
        cfg.augment.num_views = self.views;
        cfg.adapt.steps = self.steps;
        cfg.adapt.learning_rate = self.lr;
        cfg.adapt.optimizer.weight_decay = self.weight_decay;
        cfg.adapt.method = self.method;
        cfg.adapt.prediction_protocol = self.protocol;
        cfg.adapt.episodic_reset = !self.persistent;
        cfg.loss.epsilon = self.epsilon;
        cfg.loss.cutoff_percentile = self.rho;
        cfg.loss.weight_direction = self.direction;
        cfg.loss.beta_stop_gradient = !self.beta_grad;
        cfg.split = self.split;
        cfg.limit = self.limit;
        cfg.augment.validate()?;
        cfg.loss.validate()?;
        cfg.adapt.validate()?;
        Ok(cfg.with_seed(self.seed))
    }

    fn load(&self) -> Result<(Model, Dataset, EvalConfig), Error> {
        let cfg = self.config()?;
        let model = Model::read(&self.model)?;
        let dataset = Dataset::read(&self.data)?;
        Ok((model, dataset, cfg))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::MakeDataset(a) => {
            let spec = DatasetSpec {
                kind: a.kind,
                train: a.train,
                val: a.val,
                test: a.test,
                shift: ShiftSpec {
                    kind: a.shift,
                    severity: a.severity,
                    seed: a.shift_seed.unwrap_or(a.seed),
                },
                seed: a.seed,
            };
            let dataset = Dataset::generate(&spec)?;
            dataset.write(&a.out)?;
            println!(
                "wrote {} ({} train, {} val, {} test, shift {} severity {})",
                a.out.display(),
                a.train,
                a.val,
                a.test,
                a.shift,
                a.severity
            );
        }
        Command::Pretrain(a) => {
            let dataset = Dataset::read(&a.data)?;
            let mut cfg = PretrainConfig {
                epochs: a.epochs,
                learning_rate: a.lr,
                batch_size: a.batch_size,
                weight_decay: a.weight_decay,
                seed: a.seed,
                ..PretrainConfig::default()
            };
            if a.no_augment {
                cfg.augment = None;
            }
            let (model, report) = pretrain(&dataset, &cfg)?;
            model.write(&a.out)?;
            println!(
                "train_accuracy={} val_accuracy={} final_loss={}",
                report.train_accuracy,
                report.val_accuracy,
                report.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval(c) => {
            let (model, dataset, cfg) = c.eval.load()?;
            let outcome = run_eval(&model, &dataset, &cfg)?;
            let rows = [outcome.summary.record()];
            write_csv(&c.out, &SUMMARY_HEADER, &rows)?;
            if let Some(p) = &c.per_sample {
                write_csv(p, &SAMPLE_HEADER, &outcome.sample_records())?;
            }
            if let Some(p) = &c.octiles {
                write_csv(p, &OCTILE_HEADER, &octile_records(&outcome.octiles()?))?;
            }
            print!("{}", csv_string(&SUMMARY_HEADER, &rows));
        }
        Command::Sweep(c) => {
            let (model, dataset, cfg) = c.eval.load()?;
            let spec = SweepSpec::parse(c.axis, &c.values)?;
            let rows = run_sweep(&model, &dataset, &cfg, &spec, &c.seeds)?;
            let records: Vec<Vec<String>> = rows.iter().map(|r| r.record()).collect();
            let header = sweep_header();
            write_csv(&c.out, &header, &records)?;
            print!("{}", csv_string(&header, &records));
        }
        Command::Octiles(c) => {
            let (model, dataset, cfg) = c.eval.load()?;
            let outcome = run_eval(&model, &dataset, &cfg)?;
            let records = octile_records(&outcome.octiles()?);
            write_csv(&c.out, &OCTILE_HEADER, &records)?;
            print!("{}", csv_string(&OCTILE_HEADER, &records));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        EXIT_USAGE
    } else if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
