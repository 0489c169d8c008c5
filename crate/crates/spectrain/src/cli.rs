//! The `spectrain` command line.
//!
//! Exit codes: 0 on success, 1 when the work itself fails (bad data, bad
//! config, numerical failure, failed invariant), 2 on usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spectrain_core::eigen::{eigendecompose, lowest_k};
use spectrain_core::features::augment_indexed;
use spectrain_core::graph::build_laplacian;
use spectrain_core::training::{
    compare_losses, evaluate_eigen, evaluate_target, finetune, init_finetune, init_pretrain, mean_baseline_mae,
    precompute_targets, pretrain, split_indices, Clock, Monitored, NullClock, PreparedGraph,
};
use spectrain_core::Graph;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::invariants;
use crate::output::{comparison_csv, record_csv, write_atomic};

#[derive(Debug, Parser)]
#[command(
    name = "spectrain",
    version,
    about = "Laplacian eigenvector pre-training for graph networks"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Log per-epoch progress.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON run config; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `feature_config.dirac_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the epoch count of the command's training stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the number of eigenvectors `k`.
    #[arg(long)]
    k: Option<usize>,
    /// Fill the `seconds` column with wall-clock time (makes records differ between runs).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Debug, Args)]
struct Io {
    /// Input dataset (one JSON graph per line).
    #[arg(long)]
    input: PathBuf,
    /// Output file; written atomically and must differ from the input.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replace node features with wavelet positional and diffused dirac embeddings.
    Features {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        over: Overrides,
    },
    /// Write each graph's Laplacian eigenvalues and eigenvectors.
    Spectrum {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        over: Overrides,
    },
    /// Pre-train on the eigenvector objective and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        over: Overrides,
        /// Run record CSV; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint on a scalar graph target.
    Finetune {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        over: Overrides,
        /// Pre-training checkpoint, or a fine-tuning checkpoint to continue.
        #[arg(long)]
        from: PathBuf,
        /// Run record CSV; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run the property suite; prints a table and optionally writes a JSONL summary.
    CheckInvariants {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the eigenvector and abs-cosine+MAE objectives side by side against random outputs.
    CompareLosses {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        over: Overrides,
    },
    /// Generate a synthetic dataset with spectral targets.
    GenData {
        /// Dataset to write (JSONL).
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
}

/// Errors that should exit with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

struct WallClock(Instant);

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `spectrain --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ")
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Features { io, over } => features(&io, &over),
        Command::Spectrum { io, over } => spectrum(&io, &over),
        Command::Pretrain {
            io,
            over,
            record,
            resume,
        } => run_pretrain(&io, &over, record.as_deref(), resume.as_deref()),
        Command::Finetune { io, over, from, record } => run_finetune(&io, &over, &from, record.as_deref()),
        Command::CheckInvariants { output } => check_invariants(output.as_deref()),
        Command::CompareLosses { io, over } => run_compare(&io, &over),
        Command::GenData { output, over } => gen_data(&output, &over),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn load_config(over: &Overrides, base: Option<RunConfig>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&over.config, base) {
        (Some(p), _) => RunConfig::load(Some(p))?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = over.seed {
        cfg.pretrain.seed = seed;
        cfg.pretrain.feature_config.dirac_seed = seed;
    }
    if let Some(k) = over.k {
        cfg.pretrain.k = k;
    }
    cfg.pretrain.validate()?;
    Ok(cfg)
}

fn clock(over: &Overrides) -> Box<dyn Clock> {
    if over.wall_clock {
        Box::new(WallClock(Instant::now()))
    } else {
        Box::new(NullClock)
    }
}

/// Rejects a missing input, an output that would overwrite the input, and
/// an output directory that does not exist.
fn check_paths(input: Option<&Path>, output: &Path) -> anyhow::Result<()> {
    if let Some(input) = input {
        if !input.is_file() {
            return Err(UsageError(format!("input file {} does not exist", input.display())).into());
        }
        if let (Ok(a), Ok(b)) = (input.canonicalize(), output.canonicalize()) {
            if a == b {
                return Err(UsageError("output must differ from input".into()).into());
            }
        }
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(UsageError(format!("output directory {} does not exist", dir.display())).into());
        }
    }
    Ok(())
}

fn read_graphs(path: &Path) -> anyhow::Result<(Dataset, Vec<Graph>)> {
    let ds = Dataset::read(path)?;
    let graphs = ds.graphs().with_context(|| format!("dataset {}", path.display()))?;
    if graphs.is_empty() {
        bail!("dataset {} has no graphs", path.display());
    }
    Ok((ds, graphs))
}

fn features(io: &Io, over: &Overrides) -> anyhow::Result<()> {
    check_paths(Some(&io.input), &io.output)?;
    let cfg = load_config(over, None)?;
    let (mut ds, graphs) = read_graphs(&io.input)?;
    for (i, g) in graphs.iter().enumerate() {
        let x =
            augment_indexed(g, &cfg.pretrain.feature_config, i).with_context(|| format!("line {}", ds.line_of(i)))?;
        ds.records[i].node_features = Some(x.to_rows());
    }
    write_atomic(&io.output, ds.to_jsonl().as_bytes())?;
    log::info!("wrote features for {} graphs to {}", graphs.len(), io.output.display());
    Ok(())
}

#[derive(Serialize)]
struct SpectrumRecord {
    line: usize,
    num_nodes: usize,
    eigenvalues: Vec<f64>,
    /// Rows are nodes, columns follow `eigenvalues`.
    eigenvectors: Vec<Vec<f64>>,
}

fn spectrum(io: &Io, over: &Overrides) -> anyhow::Result<()> {
    check_paths(Some(&io.input), &io.output)?;
    let cfg = load_config(over, None)?;
    let (ds, graphs) = read_graphs(&io.input)?;
    let mut out = String::new();
    for (i, g) in graphs.iter().enumerate() {
        let line = ds.line_of(i);
        let l = build_laplacian(g, cfg.pretrain.laplacian_norm);
        let s = eigendecompose(&l).with_context(|| format!("line {line}"))?;
        let k = over.k.unwrap_or(s.len());
        let (eigenvalues, vectors) = lowest_k(&s, k).with_context(|| format!("line {line}"))?;
        let rec = SpectrumRecord {
            line,
            num_nodes: g.num_nodes(),
            eigenvalues,
            eigenvectors: vectors.to_rows(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_atomic(&io.output, out.as_bytes())
}

fn record_path(output: &Path, record: Option<&Path>) -> PathBuf {
    record.map_or_else(|| output.with_extension("csv"), Path::to_path_buf)
}

fn prepare(path: &Path, cfg: &RunConfig) -> anyhow::Result<(Dataset, Vec<PreparedGraph>)> {
    let (ds, graphs) = read_graphs(path)?;
    let prepared = precompute_targets(&graphs, &cfg.pretrain).map_err(|e| match e {
        spectrain_core::Error::EmptyDatasetAfterFilter => anyhow!(
            "no graph in {} has between k = {} and max_nodes = {} nodes",
            path.display(),
            cfg.pretrain.k,
            cfg.pretrain.max_nodes
        ),
        other => anyhow!(other),
    })?;
    if prepared.dropped > 0 {
        log::info!(
            "{} graphs did not fit k and max_nodes and were dropped",
            prepared.dropped
        );
    }
    Ok((ds, prepared.graphs))
}

fn pick(graphs: &[PreparedGraph], idx: &[usize]) -> Vec<PreparedGraph> {
    idx.iter().map(|&i| graphs[i].clone()).collect()
}

fn run_pretrain(io: &Io, over: &Overrides, record: Option<&Path>, resume: Option<&Path>) -> anyhow::Result<()> {
    check_paths(Some(&io.input), &io.output)?;
    let checkpoint = resume.map(Checkpoint::read).transpose()?;
    if let Some(ck) = &checkpoint {
        if ck.stage != Stage::Pretrain {
            bail!("--resume expects a pre-training checkpoint");
        }
    }
    let base = checkpoint
        .as_ref()
        .map(|ck| RunConfig::parse(&ck.config.to_string()))
        .transpose()?;
    let mut cfg = load_config(over, base)?;
    if let Some(e) = over.epochs {
        cfg.pretrain.epochs = e;
    }
    let (_, graphs) = prepare(&io.input, &cfg)?;
    let (train, val) = if cfg.pretrain.scheduler.monitored == Monitored::ValLoss {
        let (a, b) = split_indices(graphs.len(), cfg.held_out_fraction, cfg.pretrain.seed)?;
        (pick(&graphs, &a), Some(pick(&graphs, &b)))
    } else {
        (graphs, None)
    };
    let input_dim = train.first().map_or(0, |g| g.features.cols());
    let (mut model, mut state) = match &checkpoint {
        Some(ck) => (ck.model()?, ck.train_state.clone()),
        None => init_pretrain(&cfg.pretrain, input_dim)?,
    };
    if model.config().input_dim != input_dim {
        bail!(
            "checkpoint expects {} input features, the dataset yields {input_dim}",
            model.config().input_dim
        );
    }
    log::info!(
        "pre-training on {} graphs, epochs {} -> {}",
        train.len(),
        state.epoch,
        cfg.pretrain.epochs
    );
    let clock = clock(over);
    pretrain(
        &mut model,
        &mut state,
        &train,
        val.as_deref(),
        &cfg.pretrain,
        cfg.pretrain.epochs,
        clock.as_ref(),
    )?;
    state.record.checkpoint = Some(io.output.display().to_string());
    let summary = evaluate_eigen(&model, &train, &cfg.pretrain.loss_weights)?;
    log::info!(
        "final evaluation: energy {:.6} eigvec {:.6} worst ortho residual {:.2e}",
        summary.energy,
        summary.eigvec,
        summary.ortho_residual
    );
    let ck = Checkpoint::new(Stage::Pretrain, cfg.to_value(), &model, &state);
    write_atomic(&record_path(&io.output, record), record_csv(&state.record)?.as_bytes())?;
    write_atomic(&io.output, ck.to_json().as_bytes())
}

fn run_finetune(io: &Io, over: &Overrides, from: &Path, record: Option<&Path>) -> anyhow::Result<()> {
    check_paths(Some(&io.input), &io.output)?;
    if !from.is_file() {
        return Err(UsageError(format!("checkpoint {} does not exist", from.display())).into());
    }
    let ck = Checkpoint::read(from)?;
    let mut cfg = load_config(over, Some(RunConfig::parse(&ck.config.to_string())?))?;
    if let Some(e) = over.epochs {
        cfg.pretrain.finetune.epochs = e;
    }
    let name = cfg.pretrain.finetune.target.clone();
    let (ds, graphs) = prepare(&io.input, &cfg)?;
    for g in &graphs {
        if g.graph.targets().get(&name).is_none() {
            bail!("line {}: missing target '{name}'", ds.line_of(g.index));
        }
    }
    let (a, b) = split_indices(graphs.len(), cfg.held_out_fraction, cfg.pretrain.seed)?;
    let (train, test) = (pick(&graphs, &a), pick(&graphs, &b));
    let (mut model, mut state) = match ck.stage {
        Stage::Pretrain => init_finetune(&ck.model()?, &cfg.pretrain)?,
        Stage::Finetune => (ck.model()?, ck.train_state.clone()),
    };
    if model.config().input_dim != graphs[0].features.cols() {
        bail!(
            "checkpoint expects {} input features, the dataset yields {}",
            model.config().input_dim,
            graphs[0].features.cols()
        );
    }
    let val = if cfg.pretrain.finetune.scheduler.monitored == Monitored::ValLoss {
        Some(test.as_slice())
    } else {
        None
    };
    let clock = clock(over);
    finetune(
        &mut model,
        &mut state,
        &train,
        val,
        &cfg.pretrain,
        cfg.pretrain.finetune.epochs,
        clock.as_ref(),
    )?;
    state.record.checkpoint = Some(io.output.display().to_string());
    if !test.is_empty() {
        let mae = evaluate_target(&model, &test, &name)?;
        let baseline = mean_baseline_mae(&train, &test, &name)?;
        println!(
            "held-out {name} MAE {mae:.6} (predict-the-mean baseline {baseline:.6}, {} graphs)",
            test.len()
        );
    }
    let ck = Checkpoint::new(Stage::Finetune, cfg.to_value(), &model, &state);
    write_atomic(&record_path(&io.output, record), record_csv(&state.record)?.as_bytes())?;
    write_atomic(&io.output, ck.to_json().as_bytes())
}

fn check_invariants(output: Option<&Path>) -> anyhow::Result<()> {
    if let Some(out) = output {
        check_paths(None, out)?;
    }
    let results = invariants::run_all();
    print!("{}", invariants::render_table(&results));
    if let Some(out) = output {
        let mut text = String::new();
        for r in &results {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_atomic(out, text.as_bytes())?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} invariant checks failed");
    }
    Ok(())
}

fn run_compare(io: &Io, over: &Overrides) -> anyhow::Result<()> {
    check_paths(Some(&io.input), &io.output)?;
    let mut cfg = load_config(over, None)?;
    if let Some(e) = over.epochs {
        cfg.pretrain.epochs = e;
    }
    let (_, graphs) = prepare(&io.input, &cfg)?;
    let clock = clock(over);
    let arms = compare_losses(&graphs, &cfg.pretrain, &cfg.arms, clock.as_ref())?;
    for a in &arms {
        if let Some(last) = a.record.rows.last() {
            println!(
                "{:<18} eigvec {:.6} energy {:.6}",
                a.arm.name(),
                last.loss_eigvec.unwrap_or(f64::NAN),
                last.loss_energy.unwrap_or(f64::NAN)
            );
        }
    }
    write_atomic(&io.output, comparison_csv(&arms)?.as_bytes())
}

fn gen_data(output: &Path, over: &Overrides) -> anyhow::Result<()> {
    check_paths(None, output)?;
    let cfg = load_config(over, None)?;
    let graphs = cfg.generate.generate(cfg.pretrain.seed)?;
    write_atomic(output, Dataset::from_graphs(&graphs).to_jsonl().as_bytes())?;
    log::info!("wrote {} graphs to {}", graphs.len(), output.display());
    Ok(())
}
