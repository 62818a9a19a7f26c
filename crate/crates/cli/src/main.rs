//! `pva`: dataset generation, training, evaluation and inspection.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pva_core::checkpoint::{load_checkpoint, save_checkpoint};
use pva_core::gradcheck::{full_suite, GRAD_TOLERANCE};
use pva_core::network::{ops_report, AvaMode, FpMode, PvaConfig, SceneStats};
use pva_core::ply::write_ply;
use pva_core::synth::{generate_dataset, read_record, write_record, Manifest, Split};
use pva_core::train::{ablation_grid, ablation_table, evaluate, predict, run_ablation, train, TrainConfig};
use pva_core::volume::{Dims, TsdfVolume};
use pva_core::Error;

#[derive(Parser)]
#[command(name = "pva", version, about = "Point-voxel semantic scene completion on synthetic rooms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with a manifest.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict labels for one record.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and compare the ablation grid.
    Ablate(AblateArgs),
    /// Export kept voxels of a record as a colored PLY point cloud.
    ExportPly(ExportArgs),
    /// Print a multiply-accumulate estimate for a configuration.
    Ops(OpsArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value = "30x18x30")]
    dims: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Records assigned to the val split (taken after train).
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Records assigned to the test split (taken last).
    #[arg(long, default_value_t = 0)]
    test: usize,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "anisotropic")]
    ava_mode: AvaMode,
    /// SA layer (1-based) followed by voxel aggregation; repeatable.
    #[arg(long, default_values_t = [1usize])]
    ava_position: Vec<usize>,
    #[arg(long, default_value = "semantic-aware")]
    fp_mode: FpMode,
}

impl ModelArgs {
    fn config(&self) -> PvaConfig {
        PvaConfig {
            ava_mode: self.ava_mode,
            ava_positions: self.ava_position.clone(),
            fp_mode: self.fp_mode,
            ..PvaConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 512)]
    observed: usize,
    #[arg(long, default_value_t = 2048)]
    occluded: usize,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            observed_sample_count: self.observed,
            occluded_sample_count: self.occluded,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Evaluate on the val split every N epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Checkpoint path; the config sidecar and log are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output record holding the predicted labels.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset with train and test splits.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
    /// Also write the comparison table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OpsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "30x18x30")]
    dims: Dims,
    /// Input point count; defaults to every voxel.
    #[arg(long)]
    points: Option<usize>,
}

/// Failures mapped to process exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(_) | Error::Schedule { .. } => Failure::Usage(e.to_string()),
            Error::Numeric { .. } | Error::MissingGrad(_) => Failure::Numeric(e.to_string()),
            e if e.is_data_error() => Failure::Data(e.to_string()),
            e => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::ExportPly(a) => export_ply(a),
        Cmd::Ops(a) => ops(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn gen(a: GenArgs) -> CmdResult {
    if a.val + a.test > a.count {
        return Err(Failure::Usage(format!("--val {} + --test {} exceed --count {}", a.val, a.test, a.count)));
    }
    let splits = [(Split::Train, a.count - a.val - a.test), (Split::Val, a.val), (Split::Test, a.test)];
    let (_, report) = generate_dataset(&a.out, a.dims, a.seed, &splits)?;
    println!(
        "wrote {} records to {} (mean kept fraction {:.4})",
        report.records,
        a.out.display(),
        report.mean_kept_fraction
    );
    Ok(())
}

fn load_split(data: &Path, split: Split) -> Result<Vec<TsdfVolume>, Failure> {
    let scenes = Manifest::load(data)?.load_split(split)?;
    if scenes.is_empty() {
        return Err(Failure::Data(format!("split `{}` of {} is empty", split.as_str(), data.display())));
    }
    Ok(scenes)
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let model_cfg = a.model.config();
    let cfg = TrainConfig {
        eval_every: a.eval_every,
        ..a.optim.config()
    };
    cfg.validate()?;
    let manifest = Manifest::load(&a.data)?;
    let train_set = manifest.load_split(Split::Train)?;
    let val_set = manifest.load_split(Split::Val)?;
    let mut model = pva_core::network::PvaModel::new(model_cfg)?;
    let mut log = BufWriter::new(fs::File::create(a.out.with_extension("log"))?);
    let mut io_err = None;
    let summary = train(&mut model, &train_set, &val_set, &cfg, &mut |line| {
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    save_checkpoint(&a.out, &model, &cfg)?;
    println!("trained {} iterations, checkpoint {}", summary.iterations, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let (model, run) = load_checkpoint(&a.model)?;
    let scenes = load_split(&a.data, a.split)?;
    let report = evaluate(&model, &scenes, run.train.seed)?;
    println!("scenes {}\n{report}", scenes.len());
    Ok(())
}

fn infer(a: InferArgs) -> CmdResult {
    let (model, _) = load_checkpoint(&a.model)?;
    let mut rec = read_record(&a.input)?;
    rec.label = predict(&model, &rec, a.seed)?;
    write_record(&a.out, &rec)?;
    println!("wrote predictions for {} points to {}", rec.kept_count(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let checks = full_suite(a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<40} coords {:>4} max_rel_err {:.3e}", c.name, c.coords, c.max_rel_err);
        failed += usize::from(!c.passed());
    }
    println!("{} checks, {} failed (tolerance {:e})", checks.len(), failed, GRAD_TOLERANCE);
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient checks exceed tolerance")));
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CmdResult {
    let cfg = a.optim.config();
    cfg.validate()?;
    let train_set = load_split(&a.data, Split::Train)?;
    let test_set = load_split(&a.data, Split::Test)?;
    let grid = ablation_grid(&PvaConfig::default());
    let results = run_ablation(&grid, &train_set, &test_set, &cfg, &mut |l| println!("{l}"))?;
    let table = ablation_table(&results);
    print!("{table}");
    if let Some(out) = a.out {
        fs::write(out, &table)?;
    }
    Ok(())
}

fn export_ply(a: ExportArgs) -> CmdResult {
    let rec = read_record(&a.input)?;
    let mut out = BufWriter::new(fs::File::create(&a.out)?);
    let n = write_ply(&mut out, &rec)?;
    out.flush()?;
    println!("wrote {n} vertices to {}", a.out.display());
    Ok(())
}

fn ops(a: OpsArgs) -> CmdResult {
    let cfg = a.model.config();
    cfg.validate()?;
    let points = a.points.unwrap_or(a.dims.len());
    let report = ops_report(&cfg, &SceneStats::upper_bound(&cfg, points, a.dims));
    println!("points {points} dims {}\n{report}", a.dims);
    Ok(())
}
