//! Eigenvector pre-training, downstream fine-tuning and the loss comparison
//! harness.
//!
//! Graphs are processed one forward pass at a time; gradients are averaged
//! over `batch_size` graphs before each Adam step. Every random choice
//! (shuffling, dropout) is drawn from a stream derived from the run seed and
//! the epoch number, so a run restarted from a checkpoint replays the
//! remaining epochs exactly.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::eigen::{eigendecompose, lowest_k};
use crate::error::{Error, Result};
use crate::features::{augment_indexed, FeatureConfig};
use crate::graph::{build_laplacian, Graph, LaplacianNorm};
use crate::losses::{self, LossWeights};
use crate::matrix::DenseMatrix;
use crate::nn::layers::{Bound, Mode};
use crate::nn::model::{DownstreamConfig, EigenHeadConfig, GraphInput, HeadKind, Model, ModelConfig};
use crate::nn::objectives;
use crate::nn::ortho::orthonormalize;
use crate::nn::tape::{Tape, Tensor};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, StreamRng};

const PRETRAIN_STREAM: u64 = 0x7072_6574;
const FINETUNE_STREAM: u64 = 0x6669_6e65;
const FINETUNE_INIT_SALT: u64 = 0x6865_6164;
const RANDOM_ARM_SALT: u64 = 0x7261_6e64;
const SPLIT_STREAM: u64 = 0x7370_6c69;

/// Minimum decrease of the monitored loss that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    None,
    #[default]
    ReduceOnPlateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitored {
    #[default]
    TrainLoss,
    ValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub patience: usize,
    pub factor: f64,
    pub monitored: Monitored,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            kind: SchedulerKind::ReduceOnPlateau,
            patience: 5,
            factor: 0.9,
            monitored: Monitored::TrainLoss,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == SchedulerKind::ReduceOnPlateau {
            if !(self.factor > 0.0 && self.factor < 1.0) {
                return Err(Error::InvalidConfig("scheduler factor must lie in (0, 1)".into()));
            }
            if self.patience == 0 {
                return Err(Error::InvalidConfig("scheduler patience must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning rate schedule.
///
/// The first observed value only sets the reference; every later epoch that
/// fails to beat the best value by [`PLATEAU_THRESHOLD`] counts as bad, and
/// `patience` bad epochs in a row multiply the rate by `factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// Feeds one epoch's monitored loss and returns the rate for the next epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if self.config.kind == SchedulerKind::None || !metric.is_finite() {
            return self.lr;
        }
        match self.best {
            None => self.best = Some(metric),
            Some(best) if metric < best - PLATEAU_THRESHOLD => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
            Some(_) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.config.patience {
                    self.lr *= self.config.factor;
                    self.bad_epochs = 0;
                    log::debug!("plateau: learning rate reduced to {}", self.lr);
                }
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Name of the scalar graph target to regress.
    pub target: String,
    pub head_layers: usize,
    pub head_hidden_dim: usize,
    /// Keep the eigenvector head and add its objective to the regression loss.
    pub keep_pretrain_head: bool,
    pub scheduler: SchedulerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            batch_size: 128,
            target: "lambda2".into(),
            head_layers: 2,
            head_hidden_dim: 128,
            keep_pretrain_head: false,
            scheduler: SchedulerConfig::default(),
        }
    }
}

/// Every knob of a pre-training (and follow-up fine-tuning) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss_weights: LossWeights,
    pub laplacian_norm: LaplacianNorm,
    pub head_kind: HeadKind,
    pub max_nodes: usize,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub feature_config: FeatureConfig,
    pub hidden_dim: usize,
    pub gin_layers: usize,
    pub update_layers: usize,
    pub head_layers: usize,
    pub head_hidden_dim: usize,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub finetune: FinetuneConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            k: 6,
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            loss_weights: LossWeights::default(),
            laplacian_norm: LaplacianNorm::Unnormalized,
            head_kind: HeadKind::GraphLevel,
            max_nodes: 40,
            scheduler: SchedulerConfig::default(),
            seed: 0,
            feature_config: FeatureConfig::default(),
            hidden_dim: 60,
            gin_layers: 4,
            update_layers: 3,
            head_layers: 5,
            head_hidden_dim: 2400,
            dropout: 0.1,
            adam: AdamConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.max_nodes == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("max_nodes and hidden_dim must be positive".into()));
        }
        if !(self.lr > 0.0 && self.finetune.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        self.loss_weights.validate()?;
        self.scheduler.validate()?;
        self.finetune.scheduler.validate()?;
        self.feature_config.validate()
    }

    /// Encoder plus eigenvector head for inputs of width `input_dim`.
    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            gin_layers: self.gin_layers,
            update_layers: self.update_layers,
            dropout: self.dropout,
            eigen_head: Some(EigenHeadConfig {
                kind: self.head_kind,
                k: self.k,
                max_nodes: self.max_nodes,
                layers: self.head_layers,
                hidden_dim: self.head_hidden_dim,
            }),
            downstream: None,
        }
    }

    /// The fine-tuning architecture: same encoder, downstream head, and the
    /// eigenvector head only when `finetune.keep_pretrain_head` is set.
    pub fn finetune_model_config(&self, input_dim: usize) -> ModelConfig {
        let mut cfg = self.model_config(input_dim);
        if !self.finetune.keep_pretrain_head {
            cfg.eigen_head = None;
        }
        cfg.downstream = Some(DownstreamConfig {
            max_nodes: self.max_nodes,
            layers: self.finetune.head_layers,
            hidden_dim: self.finetune.head_hidden_dim,
        });
        cfg
    }

    fn pretrain_options(&self) -> FitOptions {
        FitOptions {
            batch_size: self.batch_size,
            seed: self.seed,
            stream: PRETRAIN_STREAM,
            adam: self.adam,
        }
    }

    fn finetune_options(&self) -> FitOptions {
        FitOptions {
            batch_size: self.finetune.batch_size,
            seed: self.seed,
            stream: FINETUNE_STREAM,
            adam: self.adam,
        }
    }
}

/// A dataset graph with its model inputs and spectral targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    /// Position in the original dataset.
    pub index: usize,
    pub graph: Graph,
    pub features: DenseMatrix,
    pub neighbors: Vec<Vec<usize>>,
    pub laplacian: DenseMatrix,
    /// Lowest `k` eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Matching `n × k` eigenvectors.
    pub eigenvectors: DenseMatrix,
}

impl PreparedGraph {
    pub fn input(&self) -> GraphInput<'_> {
        GraphInput {
            features: &self.features,
            neighbors: &self.neighbors,
        }
    }

    /// `(1/k) Σ λ_i`, the smallest energy loss any orthonormal prediction can reach.
    pub fn energy_floor(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.eigenvalues.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub graphs: Vec<PreparedGraph>,
    pub dropped: usize,
}

impl PreparedDataset {
    pub fn input_dim(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.features.cols())
    }
}

/// Augments features and attaches the lowest-`k` spectrum of every graph.
///
/// Graphs with `n < k`, `n > max_nodes`, or that cannot be augmented (an
/// isolated node when diffusion features are on) are dropped and counted.
pub fn precompute_targets(dataset: &[Graph], cfg: &PretrainConfig) -> Result<PreparedDataset> {
    cfg.validate()?;
    let mut graphs = Vec::new();
    let mut dropped = 0;
    for (index, g) in dataset.iter().enumerate() {
        let n = g.num_nodes();
        if n < cfg.k || n > cfg.max_nodes {
            log::debug!(
                "graph {index}: {n} nodes outside [{}, {}], dropped",
                cfg.k,
                cfg.max_nodes
            );
            dropped += 1;
            continue;
        }
        let features = match augment_indexed(g, &cfg.feature_config, index) {
            Ok(f) => f,
            Err(e @ (Error::IsolatedNode(_) | Error::NodeCountTooSmall(_))) => {
                log::debug!("graph {index}: {e}, dropped");
                dropped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(first) = graphs.first() {
            let first: &PreparedGraph = first;
            if first.features.cols() != features.cols() {
                return Err(Error::InvalidGraph(alloc::format!(
                    "graph {index}: {} feature columns, earlier graphs have {}",
                    features.cols(),
                    first.features.cols()
                )));
            }
        }
        let laplacian = build_laplacian(g, cfg.laplacian_norm);
        let spectrum = eigendecompose(&laplacian)?;
        let (eigenvalues, eigenvectors) = lowest_k(&spectrum, cfg.k)?;
        graphs.push(PreparedGraph {
            index,
            graph: g.clone(),
            features,
            neighbors: g.neighbors(),
            laplacian,
            eigenvalues,
            eigenvectors,
        });
    }
    if dropped > 0 {
        log::info!(
            "dropped {dropped} of {} graphs during target precomputation",
            dataset.len()
        );
    }
    if graphs.is_empty() {
        return Err(Error::EmptyDatasetAfterFilter);
    }
    Ok(PreparedDataset { graphs, dropped })
}

/// One line of a run record. Columns that do not apply to the run's objective
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_energy: Option<f64>,
    pub loss_eigvec: Option<f64>,
    pub ortho_residual: Option<f64>,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub skipped_batches: usize,
    pub checkpoint: Option<String>,
}

/// Wall-clock source for the `seconds` column.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Always reports zero so records stay byte-identical across runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Optimizer, schedule and progress: everything besides the model that a
/// resumed run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub optimizer: AdamState,
    pub scheduler: PlateauScheduler,
    /// Completed epochs.
    pub epoch: usize,
    pub record: RunRecord,
}

impl TrainState {
    pub fn new(model: &Model, scheduler: &SchedulerConfig, lr: f64) -> Self {
        Self {
            optimizer: AdamState::new(model.params()),
            scheduler: PlateauScheduler::new(scheduler.clone(), lr),
            epoch: 0,
            record: RunRecord::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct FitOptions {
    batch_size: usize,
    seed: u64,
    stream: u64,
    adam: AdamConfig,
}

#[derive(Debug, Clone, Copy)]
enum Objective<'a> {
    Eigen(LossWeights),
    AbsCosMae,
    Target { name: &'a str, eigen: Option<LossWeights> },
}

#[derive(Debug, Clone, Copy, Default)]
struct Metrics {
    total: f64,
    energy: Option<f64>,
    eigvec: Option<f64>,
    ortho: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct Accumulator {
    count: usize,
    total: f64,
    energy: Option<f64>,
    eigvec: Option<f64>,
    ortho: Option<f64>,
}

impl Accumulator {
    fn push(&mut self, m: &Metrics) {
        fn add(slot: &mut Option<f64>, v: Option<f64>) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        self.count += 1;
        self.total += m.total;
        add(&mut self.energy, m.energy);
        add(&mut self.eigvec, m.eigvec);
        // the worst residual is what the orthonormality guarantee is about
        if let Some(o) = m.ortho {
            self.ortho = Some(self.ortho.map_or(o, |p: f64| p.max(o)));
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.count += other.count;
        self.total += other.total;
        for (slot, v) in [(&mut self.energy, other.energy), (&mut self.eigvec, other.eigvec)] {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        if let Some(o) = other.ortho {
            self.ortho = Some(self.ortho.map_or(o, |p: f64| p.max(o)));
        }
    }

    fn means(&self) -> Metrics {
        let c = self.count as f64;
        Metrics {
            total: if self.count == 0 { f64::NAN } else { self.total / c },
            energy: self.energy.map(|e| e / c),
            eigvec: self.eigvec.map(|e| e / c),
            ortho: self.ortho,
        }
    }
}

fn target_value(g: &PreparedGraph, name: &str) -> Result<f64> {
    g.graph.target(name)
}

/// Forward pass of one graph under `objective`, returning the loss tensor.
fn objective_forward(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    g: &PreparedGraph,
    objective: &Objective<'_>,
    mode: &mut Mode<'_>,
) -> Result<(Tensor, Metrics)> {
    let z = model.encode(tape, bound, g.input(), mode)?;
    let eigen_terms = |tape: &mut Tape, mode: &mut Mode<'_>, w: &LossWeights| -> Result<objectives::EigenTerms> {
        let raw = model.eigen_head_forward(tape, bound, z, mode)?;
        let u = orthonormalize(tape, raw)?;
        objectives::eigen_objective(tape, u, &g.laplacian, &g.eigenvalues, w)
    };
    let metrics_of = |tape: &Tape, t: &objectives::EigenTerms, total: Tensor| Metrics {
        total: tape.scalar(total),
        energy: Some(tape.scalar(t.energy)),
        eigvec: Some(tape.scalar(t.eigvec)),
        ortho: Some(tape.scalar(t.ortho_residual)),
    };
    match objective {
        Objective::Eigen(w) => {
            let t = eigen_terms(tape, mode, w)?;
            let m = metrics_of(tape, &t, t.total);
            Ok((t.total, m))
        }
        Objective::AbsCosMae => {
            let raw = model.eigen_head_forward(tape, bound, z, mode)?;
            let u = orthonormalize(tape, raw)?;
            let loss = objectives::abs_cos_mae(tape, u, &g.eigenvectors)?;
            let t = objectives::eigen_objective(tape, u, &g.laplacian, &g.eigenvalues, &LossWeights::default())?;
            let m = metrics_of(tape, &t, loss);
            Ok((loss, m))
        }
        Objective::Target { name, eigen } => {
            let y = target_value(g, name)?;
            let pred = model.downstream_forward(tape, bound, z, mode)?;
            let yt = tape.constant(DenseMatrix::filled(1, 1, y))?;
            let diff = tape.sub(pred, yt)?;
            let mae = tape.abs(diff)?;
            let mae = tape.sum(mae)?;
            match eigen {
                None => Ok((
                    mae,
                    Metrics {
                        total: tape.scalar(mae),
                        ..Metrics::default()
                    },
                )),
                Some(w) => {
                    let t = eigen_terms(tape, mode, w)?;
                    let total = tape.add(mae, t.total)?;
                    let m = metrics_of(tape, &t, total);
                    Ok((total, m))
                }
            }
        }
    }
}

fn is_recoverable(e: &Error) -> bool {
    matches!(e, Error::NumericalFault(_) | Error::RankDeficient(_))
}

fn graph_gradients(
    model: &Model,
    g: &PreparedGraph,
    objective: &Objective<'_>,
    rng: &mut StreamRng,
) -> Result<(Metrics, Vec<DenseMatrix>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape)?;
    let mut mode = Mode::Train(rng);
    let (loss, metrics) = objective_forward(model, &mut tape, &bound, g, objective, &mut mode)?;
    tape.backward(loss)?;
    Ok((metrics, bound.gradients(&tape, model.params())))
}

struct EpochOutcome {
    metrics: Metrics,
    skipped_batches: usize,
}

fn run_epoch(
    model: &mut Model,
    optimizer: &mut AdamState,
    data: &[PreparedGraph],
    objective: &Objective<'_>,
    opts: &FitOptions,
    epoch: usize,
    lr: f64,
) -> Result<EpochOutcome> {
    let mut rng = rng::seeded(rng::mix(opts.seed, epoch as u64), opts.stream);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut epoch_acc = Accumulator::default();
    let mut skipped = 0;
    for batch in order.chunks(opts.batch_size) {
        let mut grads = model.params().zeros_like();
        let mut batch_acc = Accumulator::default();
        let mut failed = false;
        for &i in batch {
            match graph_gradients(model, &data[i], objective, &mut rng) {
                Ok((m, g)) => {
                    batch_acc.push(&m);
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        acc.add_assign(gi);
                    }
                }
                Err(e) if is_recoverable(&e) => {
                    log::warn!(
                        "epoch {}: graph {} failed ({e}); batch skipped",
                        epoch + 1,
                        data[i].index
                    );
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed {
            skipped += 1;
            continue;
        }
        let inv = 1.0 / batch.len() as f64;
        for g in &mut grads {
            *g = g.scale(inv);
        }
        adam_step(model.params_mut(), &grads, optimizer, lr, &opts.adam)?;
        epoch_acc.merge(&batch_acc);
    }
    Ok(EpochOutcome {
        metrics: epoch_acc.means(),
        skipped_batches: skipped,
    })
}

/// Runs epochs `state.epoch .. until`, appending one row per epoch.
/// `monitor` computes the validation loss when the scheduler watches it.
#[allow(clippy::too_many_arguments)]
fn fit(
    model: &mut Model,
    state: &mut TrainState,
    data: &[PreparedGraph],
    objective: &Objective<'_>,
    opts: &FitOptions,
    until: usize,
    clock: &dyn Clock,
    monitor: &mut dyn FnMut(&Model) -> Result<f64>,
    after_epoch: &mut dyn FnMut(&Model, &mut EpochRow) -> Result<()>,
) -> Result<()> {
    while state.epoch < until {
        let start = clock.now();
        let lr = state.scheduler.lr();
        let out = run_epoch(model, &mut state.optimizer, data, objective, opts, state.epoch, lr)?;
        state.epoch += 1;
        state.record.skipped_batches += out.skipped_batches;
        let m = out.metrics;
        let monitored = match state.scheduler.config().monitored {
            Monitored::TrainLoss => m.total,
            Monitored::ValLoss => monitor(model)?,
        };
        state.scheduler.observe(monitored);
        let mut row = EpochRow {
            epoch: state.epoch,
            loss_total: m.total,
            loss_energy: m.energy,
            loss_eigvec: m.eigvec,
            ortho_residual: m.ortho,
            lr,
            seconds: 0.0,
        };
        after_epoch(model, &mut row)?;
        row.seconds = clock.now() - start;
        log::debug!("epoch {}: loss {:.6} lr {:.3e}", row.epoch, row.loss_total, row.lr);
        state.record.rows.push(row);
    }
    Ok(())
}

/// Fresh eigenvector-learning model and training state for `cfg`.
pub fn init_pretrain(cfg: &PretrainConfig, input_dim: usize) -> Result<(Model, TrainState)> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config(input_dim), cfg.seed)?;
    let state = TrainState::new(&model, &cfg.scheduler, cfg.lr);
    Ok((model, state))
}

/// Pre-trains on the eigenvector objective until `until` epochs are complete.
/// `val` feeds the scheduler when it monitors the validation loss.
pub fn pretrain(
    model: &mut Model,
    state: &mut TrainState,
    data: &[PreparedGraph],
    val: Option<&[PreparedGraph]>,
    cfg: &PretrainConfig,
    until: usize,
    clock: &dyn Clock,
) -> Result<()> {
    if !model.has_eigen_head() {
        return Err(Error::InvalidConfig("pre-training needs an eigenvector head".into()));
    }
    if state.scheduler.config().monitored == Monitored::ValLoss && val.is_none() {
        return Err(Error::InvalidConfig(
            "scheduler monitors val_loss but no validation set was given".into(),
        ));
    }
    let weights = cfg.loss_weights;
    let mut monitor = |m: &Model| -> Result<f64> { Ok(evaluate_eigen(m, val.unwrap_or(&[]), &weights)?.total) };
    fit(
        model,
        state,
        data,
        &Objective::Eigen(weights),
        &cfg.pretrain_options(),
        until,
        clock,
        &mut monitor,
        &mut |_, _| Ok(()),
    )
}

/// Builds the fine-tuning model and copies the pre-trained encoder (and the
/// eigenvector head if it is kept) into it.
pub fn init_finetune(pretrained: &Model, cfg: &PretrainConfig) -> Result<(Model, TrainState)> {
    cfg.validate()?;
    let model_cfg = cfg.finetune_model_config(pretrained.config().input_dim);
    let mut model = Model::new(model_cfg, rng::mix(cfg.seed, FINETUNE_INIT_SALT))?;
    let copied = model.load_matching(pretrained.params())?;
    log::info!("fine-tuning starts from {copied} pre-trained parameter tensors");
    let state = TrainState::new(&model, &cfg.finetune.scheduler, cfg.finetune.lr);
    Ok((model, state))
}

/// Minimizes the absolute error on `cfg.finetune.target`, updating encoder
/// and heads together.
pub fn finetune(
    model: &mut Model,
    state: &mut TrainState,
    data: &[PreparedGraph],
    val: Option<&[PreparedGraph]>,
    cfg: &PretrainConfig,
    until: usize,
    clock: &dyn Clock,
) -> Result<()> {
    let name = cfg.finetune.target.as_str();
    for g in data.iter().chain(val.unwrap_or(&[])) {
        g.graph.target(name)?;
    }
    if state.scheduler.config().monitored == Monitored::ValLoss && val.is_none() {
        return Err(Error::InvalidConfig(
            "scheduler monitors val_loss but no validation set was given".into(),
        ));
    }
    let eigen = if model.has_eigen_head() {
        Some(cfg.loss_weights)
    } else {
        None
    };
    let mut monitor = |m: &Model| evaluate_target(m, val.unwrap_or(&[]), name);
    fit(
        model,
        state,
        data,
        &Objective::Target { name, eigen },
        &cfg.finetune_options(),
        until,
        clock,
        &mut monitor,
        &mut |_, _| Ok(()),
    )
}

/// Per-graph evaluation of an orthonormal prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub index: usize,
    pub energy: f64,
    pub eigvec: f64,
    pub ortho_residual: f64,
    pub energy_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean combined loss.
    pub total: f64,
    pub energy: f64,
    pub eigvec: f64,
    /// Worst `‖ÛᵀÛ − I‖_F` over the dataset.
    pub ortho_residual: f64,
    pub graphs: Vec<GraphMetrics>,
}

/// Scores predictions from `predict` with the plain loss functions. Every
/// model and baseline is evaluated through here.
pub fn evaluate_predictions(
    data: &[PreparedGraph],
    weights: &LossWeights,
    mut predict: impl FnMut(&PreparedGraph) -> Result<DenseMatrix>,
) -> Result<EvalSummary> {
    let mut graphs = Vec::with_capacity(data.len());
    let (mut total, mut energy, mut eigvec, mut ortho) = (0.0, 0.0, 0.0, 0.0f64);
    for g in data {
        let u = predict(g)?;
        let e = losses::energy_loss(&u, &g.laplacian)?;
        let v = losses::eigvec_loss(&u, &g.laplacian, &g.eigenvalues)?;
        let o = u.orthonormality_residual();
        total += losses::combined_loss(&u, &g.laplacian, &g.eigenvalues, weights)?;
        energy += e;
        eigvec += v;
        ortho = ortho.max(o);
        graphs.push(GraphMetrics {
            index: g.index,
            energy: e,
            eigvec: v,
            ortho_residual: o,
            energy_floor: g.energy_floor(),
        });
    }
    let c = data.len().max(1) as f64;
    Ok(EvalSummary {
        total: total / c,
        energy: energy / c,
        eigvec: eigvec / c,
        ortho_residual: ortho,
        graphs,
    })
}

/// Orthonormalized eigenvector prediction `Û` in evaluation mode.
pub fn predict_eigvecs(model: &Model, g: &PreparedGraph) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape)?;
    let raw = model.predict_eigvecs(&mut tape, &bound, g.input(), &mut Mode::Eval)?;
    let u = orthonormalize(&mut tape, raw)?;
    Ok(tape.value(u).clone())
}

pub fn evaluate_eigen(model: &Model, data: &[PreparedGraph], weights: &LossWeights) -> Result<EvalSummary> {
    evaluate_predictions(data, weights, |g| predict_eigvecs(model, g))
}

/// Downstream prediction in evaluation mode.
pub fn predict_target(model: &Model, g: &PreparedGraph) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape)?;
    let y = model.predict_target(&mut tape, &bound, g.input(), &mut Mode::Eval)?;
    Ok(tape.scalar(y))
}

/// Mean absolute error of the downstream head on target `name`.
pub fn evaluate_target(model: &Model, data: &[PreparedGraph], name: &str) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for g in data {
        sum += (predict_target(model, g)? - target_value(g, name)?).abs();
    }
    Ok(sum / data.len() as f64)
}

/// MAE on `test` of always predicting the mean target of `train`.
pub fn mean_baseline_mae(train: &[PreparedGraph], test: &[PreparedGraph], name: &str) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDatasetAfterFilter);
    }
    let mut mean = 0.0;
    for g in train {
        mean += target_value(g, name)?;
    }
    mean /= train.len() as f64;
    let mut err = 0.0;
    for g in test {
        err += (target_value(g, name)? - mean).abs();
    }
    Ok(err / test.len() as f64)
}

/// Seeded shuffle of `0..len` split into `(train, held_out)` with
/// `round(len · held_out_fraction)` held-out indices.
pub fn split_indices(len: usize, held_out_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&held_out_fraction) {
        return Err(Error::InvalidParams("held-out fraction must lie in [0, 1]".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::seeded(seed, SPLIT_STREAM));
    let held = libm::round(len as f64 * held_out_fraction) as usize;
    let test = idx.split_off(len - held);
    Ok((idx, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    EigvecOurs,
    AbsCosMae,
    RandomOrthogonal,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::EigvecOurs, Arm::AbsCosMae, Arm::RandomOrthogonal];

    pub fn name(self) -> &'static str {
        match self {
            Arm::EigvecOurs => "eigvec_ours",
            Arm::AbsCosMae => "abs_cos_mae",
            Arm::RandomOrthogonal => "random_orthogonal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub arm: Arm,
    /// Rows hold the evaluation pass after each epoch: combined loss,
    /// energy, eigenvector loss and worst orthonormality residual.
    pub record: RunRecord,
}

/// Trains one identically initialized model per arm for `cfg.epochs` epochs
/// and evaluates every arm after each epoch on `data`.
///
/// The random arm never trains: it scores fixed seeded orthonormal matrices.
pub fn compare_losses(
    data: &[PreparedGraph],
    cfg: &PretrainConfig,
    arms: &[Arm],
    clock: &dyn Clock,
) -> Result<Vec<ArmRecord>> {
    cfg.validate()?;
    let input_dim = data.first().ok_or(Error::EmptyDatasetAfterFilter)?.features.cols();
    let weights = cfg.loss_weights;
    let mut out = Vec::new();
    for &arm in arms {
        let record = match arm {
            Arm::RandomOrthogonal => {
                let mut record = RunRecord::default();
                for epoch in 1..=cfg.epochs {
                    let start = clock.now();
                    let s = evaluate_predictions(data, &weights, |g| {
                        Ok(losses::random_orthonormal(
                            g.graph.num_nodes(),
                            cfg.k,
                            rng::mix(rng::mix(cfg.seed, RANDOM_ARM_SALT), g.index as u64),
                        ))
                    })?;
                    record.rows.push(eval_row(epoch, &s, 0.0, clock.now() - start));
                }
                record
            }
            Arm::EigvecOurs | Arm::AbsCosMae => {
                let objective = if arm == Arm::EigvecOurs {
                    Objective::Eigen(weights)
                } else {
                    Objective::AbsCosMae
                };
                let (mut model, mut state) = init_pretrain(cfg, input_dim)?;
                let mut monitor = |m: &Model| -> Result<f64> { Ok(evaluate_eigen(m, data, &weights)?.total) };
                let mut after = |m: &Model, row: &mut EpochRow| -> Result<()> {
                    let s = evaluate_eigen(m, data, &weights)?;
                    *row = eval_row(row.epoch, &s, row.lr, 0.0);
                    Ok(())
                };
                fit(
                    &mut model,
                    &mut state,
                    data,
                    &objective,
                    &cfg.pretrain_options(),
                    cfg.epochs,
                    clock,
                    &mut monitor,
                    &mut after,
                )?;
                state.record
            }
        };
        log::info!(
            "{}: final eigvec loss {:?}",
            arm.name(),
            record.rows.last().and_then(|r| r.loss_eigvec)
        );
        out.push(ArmRecord { arm, record });
    }
    Ok(out)
}

fn eval_row(epoch: usize, s: &EvalSummary, lr: f64, seconds: f64) -> EpochRow {
    EpochRow {
        epoch,
        loss_total: s.total,
        loss_energy: Some(s.energy),
        loss_eigvec: Some(s.eigvec),
        ortho_residual: Some(s.ortho_residual),
        lr,
        seconds,
    }
}

/// Target names with a value on every graph of `data`.
pub fn common_targets(data: &[PreparedGraph]) -> Vec<String> {
    let Some(first) = data.first() else {
        return vec![];
    };
    first
        .graph
        .targets()
        .keys()
        .filter(|name| data.iter().all(|g| g.graph.targets().contains_key(name.as_str())))
        .map(ToString::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_graph, GraphSpec};

    fn small_config() -> PretrainConfig {
        PretrainConfig {
            k: 3,
            epochs: 3,
            batch_size: 4,
            max_nodes: 10,
            hidden_dim: 6,
            gin_layers: 2,
            update_layers: 2,
            head_layers: 2,
            head_hidden_dim: 16,
            finetune: FinetuneConfig {
                epochs: 3,
                batch_size: 4,
                head_hidden_dim: 8,
                ..FinetuneConfig::default()
            },
            ..PretrainConfig::default()
        }
    }

    fn dataset(count: usize) -> Vec<Graph> {
        (0..count)
            .map(|i| {
                let n = 5 + i % 5;
                let mut g = generate_graph(&GraphSpec::ErdosRenyi { n, p: 0.5 }, i as u64).unwrap();
                let l = build_laplacian(&g, LaplacianNorm::Unnormalized);
                let lambda2 = eigendecompose(&l).unwrap().eigenvalues[1];
                g.set_target("lambda2", lambda2);
                g
            })
            .collect()
    }

    #[test]
    fn precompute_p3_spectrum() {
        let g = generate_graph(&GraphSpec::Path { n: 3 }, 0).unwrap();
        let cfg = PretrainConfig {
            k: 2,
            ..PretrainConfig::default()
        };
        let d = precompute_targets(&[g], &cfg).unwrap();
        let ev = &d.graphs[0].eigenvalues;
        assert!((ev[0] - 0.0).abs() < 1e-12 && (ev[1] - 1.0).abs() < 1e-12);
        assert_eq!(d.graphs[0].eigenvectors.shape(), (3, 2));
    }

    #[test]
    fn precompute_drops_small_graphs() {
        let mut graphs: Vec<Graph> = (0..9)
            .map(|i| generate_graph(&GraphSpec::Cycle { n: 6 + i }, 0).unwrap())
            .collect();
        graphs.insert(4, generate_graph(&GraphSpec::Path { n: 4 }, 0).unwrap());
        let d = precompute_targets(&graphs, &PretrainConfig::default()).unwrap();
        assert_eq!(d.graphs.len(), 9);
        assert_eq!(d.dropped, 1);
        assert!(d.graphs.iter().all(|g| g.index != 4));

        let cfg = PretrainConfig {
            k: 30,
            ..PretrainConfig::default()
        };
        assert_eq!(precompute_targets(&graphs, &cfg), Err(Error::EmptyDatasetAfterFilter));
        let big = generate_graph(&GraphSpec::Cycle { n: 41 }, 0).unwrap();
        assert_eq!(
            precompute_targets(&[big], &PretrainConfig::default()),
            Err(Error::EmptyDatasetAfterFilter)
        );
    }

    #[test]
    fn scheduler_reduces_once_per_patience_window() {
        let cfg = SchedulerConfig::default();
        for p in 0..4 {
            let mut s = PlateauScheduler::new(cfg.clone(), 1e-3);
            s.observe(0.5);
            for _ in 0..p * cfg.patience {
                s.observe(0.5);
            }
            let expected = 1e-3 * libm::pow(cfg.factor, p as f64);
            assert!((s.lr() - expected).abs() <= 1e-12, "p={p}: {} vs {expected}", s.lr());
        }
        let mut s = PlateauScheduler::new(cfg.clone(), 1.0);
        for i in 0..20 {
            s.observe(1.0 - 0.01 * i as f64);
        }
        assert_eq!(s.lr(), 1.0);
        let mut off = PlateauScheduler::new(
            SchedulerConfig {
                kind: SchedulerKind::None,
                ..cfg
            },
            1.0,
        );
        for _ in 0..20 {
            off.observe(1.0);
        }
        assert_eq!(off.lr(), 1.0);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let cfg = small_config();
        let d = precompute_targets(&dataset(1), &cfg).unwrap();
        let (mut model, mut state) = init_pretrain(&cfg, d.input_dim()).unwrap();
        let before = model.params().clone();
        pretrain(&mut model, &mut state, &d.graphs, None, &cfg, 0, &NullClock).unwrap();
        assert_eq!(model.params(), &before);
        assert!(state.record.rows.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic_and_resumable() {
        let cfg = small_config();
        let d = precompute_targets(&dataset(10), &cfg).unwrap();
        let run = |until: usize| {
            let (mut m, mut s) = init_pretrain(&cfg, d.input_dim()).unwrap();
            pretrain(&mut m, &mut s, &d.graphs, None, &cfg, until, &NullClock).unwrap();
            (m, s)
        };
        let (a, sa) = run(4);
        let (b, sb) = run(4);
        assert_eq!(a.params(), b.params());
        assert_eq!(sa, sb);
        assert_eq!(sa.record.rows.len(), 4);
        assert_eq!(
            sa.record.rows.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );

        let (mut m, mut s) = run(2);
        let mut resumed = Model::new(m.config().clone(), 999).unwrap();
        resumed.load_matching(m.params()).unwrap();
        let mut state = s.clone();
        pretrain(&mut resumed, &mut state, &d.graphs, None, &cfg, 4, &NullClock).unwrap();
        pretrain(&mut m, &mut s, &d.graphs, None, &cfg, 4, &NullClock).unwrap();
        assert_eq!(resumed.params(), a.params());
        assert_eq!(state, sa);
    }

    #[test]
    fn logged_metrics_respect_orthonormality_and_floor() {
        let cfg = small_config();
        let d = precompute_targets(&dataset(6), &cfg).unwrap();
        let (mut m, mut s) = init_pretrain(&cfg, d.input_dim()).unwrap();
        pretrain(&mut m, &mut s, &d.graphs, None, &cfg, 3, &NullClock).unwrap();
        let floor = d.graphs.iter().map(PreparedGraph::energy_floor).sum::<f64>() / d.graphs.len() as f64;
        for row in &s.record.rows {
            assert!(row.ortho_residual.unwrap() <= 1e-6);
            assert!(row.loss_energy.unwrap() >= floor - 1e-6);
        }
        let eval = evaluate_eigen(&m, &d.graphs, &cfg.loss_weights).unwrap();
        for g in &eval.graphs {
            assert!(g.energy >= g.energy_floor - 1e-6);
        }
    }

    #[test]
    fn val_monitoring_needs_a_validation_set() {
        let mut cfg = small_config();
        cfg.scheduler.monitored = Monitored::ValLoss;
        let d = precompute_targets(&dataset(4), &cfg).unwrap();
        let (mut m, mut s) = init_pretrain(&cfg, d.input_dim()).unwrap();
        assert!(matches!(
            pretrain(&mut m, &mut s, &d.graphs, None, &cfg, 1, &NullClock),
            Err(Error::InvalidConfig(_))
        ));
        pretrain(
            &mut m,
            &mut s,
            &d.graphs[..2],
            Some(&d.graphs[2..]),
            &cfg,
            2,
            &NullClock,
        )
        .unwrap();
        assert_eq!(s.record.rows.len(), 2);
    }

    #[test]
    fn zero_head_on_zero_target_has_zero_error() {
        let cfg = small_config();
        let mut graphs = dataset(4);
        for g in &mut graphs {
            g.set_target("zero", 0.0);
        }
        let d = precompute_targets(&graphs, &cfg).unwrap();
        let (pre, _) = init_pretrain(&cfg, d.input_dim()).unwrap();
        let (mut model, _) = init_finetune(&pre, &cfg).unwrap();
        let names: Vec<String> = model
            .params()
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("downstream."))
            .map(|e| e.name.clone())
            .collect();
        assert!(!names.is_empty());
        let zeroed: Vec<_> = model
            .params()
            .entries()
            .iter()
            .filter(|e| names.contains(&e.name))
            .map(|e| crate::nn::NamedParam {
                name: e.name.clone(),
                value: DenseMatrix::zeros(e.value.rows(), e.value.cols()),
            })
            .collect();
        model.params_mut().copy_matching(&zeroed).unwrap();
        assert_eq!(evaluate_target(&model, &d.graphs, "zero").unwrap(), 0.0);
    }

    #[test]
    fn finetune_copies_encoder_and_replaces_head() {
        let cfg = small_config();
        let d = precompute_targets(&dataset(8), &cfg).unwrap();
        let (mut pre, mut ps) = init_pretrain(&cfg, d.input_dim()).unwrap();
        pretrain(&mut pre, &mut ps, &d.graphs, None, &cfg, 1, &NullClock).unwrap();
        let (model, _) = init_finetune(&pre, &cfg).unwrap();
        assert!(!model.has_eigen_head());
        assert!(model.has_downstream());
        for e in model.params().entries().iter().filter(|e| e.name.starts_with("gin.")) {
            assert_eq!(Some(&e.value), pre.params().find(&e.name));
        }
        let mut keep = cfg.clone();
        keep.finetune.keep_pretrain_head = true;
        let (multi, _) = init_finetune(&pre, &keep).unwrap();
        assert!(multi.has_eigen_head());
        assert_eq!(
            multi.params().find("head.mlp.0.weight"),
            pre.params().find("head.mlp.0.weight")
        );

        let run = |c: &PretrainConfig| {
            let (mut m, mut s) = init_finetune(&pre, c).unwrap();
            finetune(&mut m, &mut s, &d.graphs, None, c, 3, &NullClock).unwrap();
            (m, s)
        };
        let (a, sa) = run(&cfg);
        let (b, sb) = run(&cfg);
        assert_eq!(a.params(), b.params());
        assert_eq!(sa.record, sb.record);
        assert!(sa.record.rows.iter().all(|r| r.loss_energy.is_none()));
        let (_, multi_state) = run(&keep);
        assert!(multi_state.record.rows.iter().all(|r| r.loss_energy.is_some()));
    }

    #[test]
    fn finetune_requires_the_target() {
        let mut cfg = small_config();
        cfg.finetune.target = "missing".into();
        let d = precompute_targets(&dataset(3), &cfg).unwrap();
        let (pre, _) = init_pretrain(&cfg, d.input_dim()).unwrap();
        let (mut m, mut s) = init_finetune(&pre, &cfg).unwrap();
        assert_eq!(
            finetune(&mut m, &mut s, &d.graphs, None, &cfg, 1, &NullClock),
            Err(Error::MissingTarget("missing".into()))
        );
    }

    #[test]
    fn compare_arms_share_one_evaluation() {
        let cfg = small_config();
        let d = precompute_targets(&dataset(5), &cfg).unwrap();
        let arms = compare_losses(&d.graphs, &cfg, &Arm::ALL, &NullClock).unwrap();
        assert_eq!(arms.len(), 3);
        for a in &arms {
            assert_eq!(a.record.rows.len(), cfg.epochs);
        }
        let random = &arms[2].record.rows;
        assert!(random.windows(2).all(|w| w[0].loss_eigvec == w[1].loss_eigvec));
        assert!(random.windows(2).all(|w| w[0].loss_energy == w[1].loss_energy));
        // the first trained arm replays through the same evaluation as a fresh model
        let (mut m, mut s) = init_pretrain(&cfg, d.input_dim()).unwrap();
        pretrain(&mut m, &mut s, &d.graphs, None, &cfg, cfg.epochs, &NullClock).unwrap();
        let eval = evaluate_eigen(&m, &d.graphs, &cfg.loss_weights).unwrap();
        assert_eq!(arms[0].record.rows.last().unwrap().loss_eigvec, Some(eval.eigvec));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let (a, b) = split_indices(10, 0.3, 1).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.3, 1).unwrap(), (a, b));
    }

    #[test]
    fn mean_baseline_mae_by_hand() {
        let cfg = PretrainConfig { k: 2, ..small_config() };
        let graphs: Vec<Graph> = [1.0, 3.0, 4.0]
            .iter()
            .map(|&y| {
                generate_graph(&GraphSpec::Path { n: 3 }, 0)
                    .unwrap()
                    .with_target("y", y)
            })
            .collect();
        let d = precompute_targets(&graphs, &cfg).unwrap();
        // train mean 2, test target 4
        assert_eq!(mean_baseline_mae(&d.graphs[..2], &d.graphs[2..], "y").unwrap(), 2.0);
        assert_eq!(common_targets(&d.graphs), vec![String::from("y")]);
    }
}
