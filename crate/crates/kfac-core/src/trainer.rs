//! Synchronous data-parallel training over the simulated cluster: plain
//! momentum SGD, or SGD on Kronecker-preconditioned gradients with
//! interval-gated factor and eigendecomposition refresh.
//!
//! Every rank holds a full model replica. Per iteration: each rank computes
//! gradients on its shard, gradients are allreduce-averaged, factor batch
//! estimates are allreduce-averaged on factor-refresh iterations,
//! eigendecompositions are recomputed by their owners and allgathered on
//! decomposition iterations, and every rank then applies an identical
//! update. A digest barrier after each update turns any replica divergence
//! into a hard error instead of silent drift.
//!
//! The loop runs in two executions that are bitwise identical: `Threaded`
//! spawns one OS thread per rank, `Lockstep` drives all ranks from a single
//! thread for debuggability. Both share the same per-rank phase methods and
//! the same reduction kernels.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{
    assign_round_robin, assign_size_balanced, digest_tensors, Assignment, Counters, EigTable,
    FactorDesc, FactorKey, FactorKind, SimCluster, WorkerHandle,
};
use crate::error::{Error, Result};
use crate::kfac::{apply_schedules, batch_factors, factor_eig, scale_grads, KfacConfig, LayerKfacState};
use crate::linalg::{Matrix, SymEig};
use crate::nn::{accuracy, backward, forward, predict, BatchCapture, Model};

/// Update rule applied after gradient averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Momentum SGD on the raw averaged gradients.
    Sgd,
    /// Momentum SGD on preconditioned, trust-region-scaled gradients.
    KfacSgd,
}

/// Network architecture built for the run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    /// Fully-connected ReLU net with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// Two conv layers plus a two-layer head; input must be square images.
    SmallConv { in_channels: usize },
}

/// Arithmetic width of the stored model state. `F32` emulates single
/// precision by rounding weights and momentum through `f32` after every
/// update; all intermediate math stays in f64.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// How the worker ranks are driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    /// One OS thread per rank, rendezvous through the cluster.
    Threaded,
    /// All ranks advanced round by round from the calling thread.
    Lockstep,
}

/// Factor-to-worker placement policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    RoundRobin,
    SizeBalanced,
}

/// Full description of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples consumed per optimization step, across all workers.
    pub global_batch: usize,
    pub base_lr: f64,
    /// Epochs of linear learning-rate ramp from `base_lr / warmup_iters`.
    pub warmup_epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub kfac: KfacConfig,
    pub world_size: usize,
    pub model: ModelChoice,
    pub placement: Placement,
    pub precision: Precision,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            global_batch: 32,
            base_lr: 0.1,
            warmup_epochs: 5,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            momentum: 0.9,
            label_smoothing: 0.1,
            seed: 0,
            optimizer: Optimizer::Sgd,
            kfac: KfacConfig::default(),
            world_size: 1,
            model: ModelChoice::Mlp { hidden: vec![64, 64] },
            placement: Placement::RoundRobin,
            precision: Precision::F64,
            execution: Execution::Threaded,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Value("epochs must be at least 1".into()));
        }
        if self.world_size == 0 {
            return Err(Error::Value("world size must be at least 1".into()));
        }
        if self.global_batch == 0 {
            return Err(Error::Value("global batch must be at least 1".into()));
        }
        if self.global_batch % self.world_size != 0 {
            return Err(Error::Value(format!(
                "global batch {} is not divisible by {} workers",
                self.global_batch, self.world_size
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Value(format!(
                "learning rate must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Value(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::Value(format!(
                "label smoothing must lie in [0, 1], got {}",
                self.label_smoothing
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Value(format!(
                "learning-rate decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Value(
                "learning-rate milestones must be strictly increasing".into(),
            ));
        }
        if let Some(&first) = self.lr_milestones.first() {
            if self.warmup_epochs >= first {
                return Err(Error::Value(format!(
                    "warmup of {} epochs must end before the first milestone at epoch {first}",
                    self.warmup_epochs
                )));
            }
        }
        if let ModelChoice::Mlp { hidden } = &self.model {
            if hidden.iter().any(|&h| h == 0) {
                return Err(Error::Value("hidden widths must be nonzero".into()));
            }
        }
        if let ModelChoice::SmallConv { in_channels } = &self.model {
            if *in_channels == 0 {
                return Err(Error::Value("conv input needs at least one channel".into()));
            }
        }
        self.kfac.validate()
    }
}

/// Training inputs: a design matrix with one flattened sample per row,
/// integer class labels, and an optional held-out validation split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub val: Option<(Matrix, Vec<usize>)>,
    pub n_classes: usize,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Data("need at least two classes".into()));
        }
        if self.train_x.rows() != self.train_y.len() {
            return Err(Error::Data(format!(
                "{} training samples but {} labels",
                self.train_x.rows(),
                self.train_y.len()
            )));
        }
        if let Some(&bad) = self.train_y.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::Data(format!(
                "training label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        if let Some((vx, vy)) = &self.val {
            if vx.cols() != self.train_x.cols() {
                return Err(Error::Data(format!(
                    "validation features {} do not match training features {}",
                    vx.cols(),
                    self.train_x.cols()
                )));
            }
            if vx.rows() != vy.len() {
                return Err(Error::Data(format!(
                    "{} validation samples but {} labels",
                    vx.rows(),
                    vy.len()
                )));
            }
            if let Some(&bad) = vy.iter().find(|&&y| y >= self.n_classes) {
                return Err(Error::Data(format!(
                    "validation label {bad} out of range for {} classes",
                    self.n_classes
                )));
            }
        }
        Ok(())
    }
}

/// One metrics record per optimization step. `val_acc` is NaN on every row
/// except the last of each epoch (and stays NaN without validation data).
/// Counter fields are cumulative cluster totals at the time the step's
/// barrier completed.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iteration: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub damping: f64,
    pub decomp_interval: usize,
    pub allreduce_calls: u64,
    pub allgather_calls: u64,
    pub element_volume: u64,
    pub wall_ms: f64,
}

/// Result of a completed run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub model: Model,
    pub counters: Counters,
}

/// Learning rate for the given position in the run: linear ramp over the
/// warmup iterations from `base_lr / warmup_iters` up to `base_lr`, then
/// piecewise constant with a `lr_decay` multiplier at each passed milestone.
pub fn lr_at(config: &TrainConfig, iters_per_epoch: usize, epoch: usize, iter: usize) -> f64 {
    let warmup_iters = config.warmup_epochs * iters_per_epoch;
    let t = epoch * iters_per_epoch + iter;
    if t < warmup_iters {
        return config.base_lr * (t + 1) as f64 / warmup_iters as f64;
    }
    let decays = config.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    config.base_lr * config.lr_decay.powi(decays as i32)
}

/// Argmax accuracy of `model` on a labeled set, evaluated in bounded chunks
/// so conv unfolding never materializes the whole set at once.
pub fn evaluate(model: &Model, x: &Matrix, labels: &[usize]) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            x.rows()
        )));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let logits = predict(model, &rows_subset(x, &idx))?;
        let frac = accuracy(&logits, &labels[start..end])?;
        // accuracy is (hits / n); recover the integer hit count exactly.
        correct += (frac * (end - start) as f64).round() as usize;
        start = end;
    }
    Ok(correct as f64 / x.rows() as f64)
}

/// Index permutation for one epoch, shared by every rank.
/// Sample order for one epoch: a seeded shuffle of `0..n`. The seed and
/// epoch fully determine the order, so shard assignment is reproducible
/// from the config alone.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// This rank's contiguous slice of the epoch permutation for iteration `it`.
fn shard_indices<'a>(
    perm: &'a [usize],
    it: usize,
    global_batch: usize,
    rank: usize,
    world: usize,
) -> &'a [usize] {
    let per_rank = global_batch / world;
    let base = it * global_batch + rank * per_rank;
    &perm[base..base + per_rank]
}

/// Copy of the selected rows of `x`, in the order given.
fn rows_subset(x: &Matrix, idx: &[usize]) -> Matrix {
    let cols = x.cols();
    let mut out = Matrix::zeros(idx.len(), cols);
    let src = x.as_slice();
    let dst = out.as_mut_slice();
    for (r, &i) in idx.iter().enumerate() {
        dst[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
    }
    out
}

fn round_to_f32(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        *v = *v as f32 as f64;
    }
}

/// Shared run geometry derived from config plus data.
#[derive(Clone, Copy, Debug)]
struct RunPlan {
    iters_per_epoch: usize,
    total_iters: usize,
    in_features: usize,
    n_classes: usize,
}

fn make_plan(config: &TrainConfig, data: &TrainData) -> Result<RunPlan> {
    config.validate()?;
    data.validate()?;
    let n = data.train_x.rows();
    if config.global_batch > n {
        return Err(Error::Data(format!(
            "global batch {} exceeds the {} training samples",
            config.global_batch, n
        )));
    }
    let iters_per_epoch = n / config.global_batch;
    Ok(RunPlan {
        iters_per_epoch,
        total_iters: config.epochs * iters_per_epoch,
        in_features: data.train_x.cols(),
        n_classes: data.n_classes,
    })
}

fn build_model(config: &TrainConfig, in_features: usize, n_classes: usize) -> Result<Model> {
    match &config.model {
        ModelChoice::Mlp { hidden } => Model::mlp(in_features, hidden, n_classes, config.seed),
        ModelChoice::SmallConv { in_channels } => {
            if in_features % in_channels != 0 {
                return Err(Error::Dimension(format!(
                    "{in_features} features do not split into {in_channels} channels"
                )));
            }
            let hw = in_features / in_channels;
            let side = (hw as f64).sqrt().round() as usize;
            if side * side != hw {
                return Err(Error::Dimension(format!(
                    "conv input must be square images, got {hw} pixels per channel"
                )));
            }
            Model::smallconv(*in_channels, side, side, n_classes, config.seed)
        }
    }
}

/// One rank's full training state. All methods are pure local computation;
/// collectives happen only in the drivers, so both executions share the
/// exact same arithmetic.
struct WorkerCtx {
    rank: usize,
    model: Model,
    trainable: Vec<usize>,
    states: Vec<LayerKfacState>,
    momentum_buf: Vec<Matrix>,
    total_factors: usize,
}

impl WorkerCtx {
    fn new(config: &TrainConfig, plan: &RunPlan, rank: usize) -> Result<WorkerCtx> {
        let model = build_model(config, plan.in_features, plan.n_classes)?;
        let trainable = model.trainable_ids();
        let mut descs = Vec::with_capacity(trainable.len() * 2);
        for &l in &trainable {
            let w = model.weight(l).expect("trainable layer has a weight");
            descs.push(FactorDesc {
                key: FactorKey { layer_id: l, kind: FactorKind::A },
                dim: w.cols(),
            });
            descs.push(FactorDesc {
                key: FactorKey { layer_id: l, kind: FactorKind::G },
                dim: w.rows(),
            });
        }
        let assignment = match config.placement {
            Placement::RoundRobin => assign_round_robin(&descs, config.world_size)?,
            Placement::SizeBalanced => assign_size_balanced(&descs, config.world_size)?,
        };
        let mut states = Vec::with_capacity(trainable.len());
        let mut momentum_buf = Vec::with_capacity(trainable.len());
        for &l in &trainable {
            let w = model.weight(l).expect("trainable layer has a weight");
            momentum_buf.push(Matrix::zeros(w.rows(), w.cols()));
            let mut st = LayerKfacState::new(l);
            st.a_owner = assignment
                .owner_of(FactorKey { layer_id: l, kind: FactorKind::A })
                .expect("every factor is assigned");
            st.g_owner = assignment
                .owner_of(FactorKey { layer_id: l, kind: FactorKind::G })
                .expect("every factor is assigned");
            states.push(st);
        }
        Ok(WorkerCtx { rank, model, trainable, states, momentum_buf, total_factors: descs.len() })
    }

    fn weights_vec(&self) -> Vec<Matrix> {
        self.trainable
            .iter()
            .map(|&l| self.model.weight(l).expect("trainable").clone())
            .collect()
    }

    fn install_weights(&mut self, ws: &[Matrix]) -> Result<()> {
        if ws.len() != self.trainable.len() {
            return Err(Error::State(format!(
                "received {} weight tensors for {} trainable layers",
                ws.len(),
                self.trainable.len()
            )));
        }
        for (i, &l) in self.trainable.iter().enumerate() {
            let w = self.model.weight_mut(l).expect("trainable");
            if w.rows() != ws[i].rows() || w.cols() != ws[i].cols() {
                return Err(Error::State("broadcast weight shape mismatch".into()));
            }
            *w = ws[i].clone();
        }
        Ok(())
    }

    /// Forward/backward over this rank's shard. Returns the shard mean loss,
    /// shard accuracy, per-layer gradients, and the activation capture.
    fn local_grads(
        &self,
        x: &Matrix,
        y: &[usize],
        smoothing: f64,
    ) -> Result<(f64, f64, Vec<Matrix>, BatchCapture)> {
        let (loss, mut cap) = forward(&self.model, x, y, smoothing)?;
        let grads = backward(&self.model, &mut cap)?;
        let acc = accuracy(cap.probs(), y)?;
        Ok((loss, acc, grads, cap))
    }

    /// Local factor batch estimates, flattened [A0, G0, A1, G1, ...] for the
    /// allreduce.
    fn batch_factor_tensors(&self, cap: &BatchCapture) -> Result<Vec<Matrix>> {
        let mut out = Vec::with_capacity(self.trainable.len() * 2);
        for &l in &self.trainable {
            let lc = cap
                .capture_for(l)
                .ok_or_else(|| Error::State(format!("no capture for layer {l}")))?;
            let (a, g) = batch_factors(lc)?;
            out.push(a);
            out.push(g);
        }
        Ok(out)
    }

    /// Fold cross-worker-averaged batch estimates into the running factors.
    fn absorb_factors(&mut self, avg: &[Matrix], xi: f64) -> Result<()> {
        if avg.len() != self.states.len() * 2 {
            return Err(Error::State(format!(
                "received {} factor tensors for {} layers",
                avg.len(),
                self.states.len()
            )));
        }
        for (i, st) in self.states.iter_mut().enumerate() {
            st.update_factors_from_batch(avg[2 * i].clone(), avg[2 * i + 1].clone(), xi)?;
        }
        Ok(())
    }

    /// Eigendecompositions of the factors this rank owns.
    fn owned_eigs(&self) -> Result<Vec<(FactorKey, SymEig)>> {
        let mut out = Vec::new();
        for st in &self.states {
            if st.a_owner == self.rank {
                let f = st.a_factor.as_ref().ok_or_else(|| {
                    Error::State("decomposition requested before any factor update".into())
                })?;
                out.push((FactorKey { layer_id: st.layer_id, kind: FactorKind::A }, factor_eig(f)?));
            }
            if st.g_owner == self.rank {
                let f = st.g_factor.as_ref().ok_or_else(|| {
                    Error::State("decomposition requested before any factor update".into())
                })?;
                out.push((FactorKey { layer_id: st.layer_id, kind: FactorKind::G }, factor_eig(f)?));
            }
        }
        Ok(out)
    }

    fn install_eigs(&mut self, table: &EigTable) -> Result<()> {
        for st in &mut self.states {
            let a = table
                .get(&FactorKey { layer_id: st.layer_id, kind: FactorKind::A })
                .ok_or_else(|| Error::State(format!("gathered table is missing the input factor of layer {}", st.layer_id)))?;
            let g = table
                .get(&FactorKey { layer_id: st.layer_id, kind: FactorKind::G })
                .ok_or_else(|| Error::State(format!("gathered table is missing the gradient factor of layer {}", st.layer_id)))?;
            st.a_eig = Some(a.clone());
            st.g_eig = Some(g.clone());
        }
        Ok(())
    }

    fn precondition(&self, grads: &[Matrix], damping: f64) -> Result<Vec<Matrix>> {
        if grads.len() != self.states.len() {
            return Err(Error::State(format!(
                "{} gradients for {} layers",
                grads.len(),
                self.states.len()
            )));
        }
        grads
            .iter()
            .zip(&self.states)
            .map(|(g, st)| st.precondition_eigen(g, damping))
            .collect()
    }

    /// Momentum step: `buf <- momentum*buf + step; w <- w - lr*buf`.
    fn apply_update(
        &mut self,
        step: &[Matrix],
        lr: f64,
        momentum: f64,
        precision: Precision,
    ) -> Result<()> {
        if step.len() != self.trainable.len() {
            return Err(Error::State(format!(
                "{} update tensors for {} trainable layers",
                step.len(),
                self.trainable.len()
            )));
        }
        for (i, &l) in self.trainable.iter().enumerate() {
            let buf = &mut self.momentum_buf[i];
            if buf.rows() != step[i].rows() || buf.cols() != step[i].cols() {
                return Err(Error::State("update tensor shape mismatch".into()));
            }
            for (b, &u) in buf.as_mut_slice().iter_mut().zip(step[i].as_slice()) {
                *b = momentum * *b + u;
            }
            if precision == Precision::F32 {
                round_to_f32(buf);
            }
            let w = self.model.weight_mut(l).expect("trainable");
            for (wv, &b) in w.as_mut_slice().iter_mut().zip(self.momentum_buf[i].as_slice()) {
                *wv -= lr * b;
            }
            if precision == Precision::F32 {
                round_to_f32(self.model.weight_mut(l).expect("trainable"));
            }
        }
        Ok(())
    }

    fn weights_digest(&self) -> u64 {
        digest_tensors(self.trainable.iter().map(|&l| self.model.weight(l).expect("trainable")))
    }
}

/// Run a training job to completion.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    let plan = make_plan(config, data)?;
    match config.execution {
        Execution::Threaded => train_threaded(config, data, plan),
        Execution::Lockstep => train_lockstep(config, data, plan),
    }
}

/// Assemble one metrics row. Shard statistics are reduced in rank order so
/// both executions produce bit-identical values.
#[allow(clippy::too_many_arguments)]
fn make_row(
    plan: &RunPlan,
    global_iter: usize,
    losses: &[f64],
    accs: &[f64],
    val_acc: f64,
    lr: f64,
    damping: f64,
    decomp_interval: usize,
    counters: &Counters,
    wall_ms: f64,
) -> MetricsRow {
    let world = losses.len() as f64;
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for (&l, &a) in losses.iter().zip(accs) {
        loss_sum += l;
        acc_sum += a;
    }
    MetricsRow {
        epoch: global_iter / plan.iters_per_epoch,
        iteration: global_iter,
        train_loss: loss_sum / world,
        train_acc: acc_sum / world,
        val_acc,
        lr,
        damping,
        decomp_interval,
        allreduce_calls: counters.allreduce_calls,
        allgather_calls: counters.allgather_calls,
        element_volume: counters.total_volume(),
        wall_ms,
    }
}

/// Per-iteration payload sent from workers to the metrics writer. Only rank
/// 0 fills `meta`; shard loss and accuracy come from every rank.
enum Msg {
    Iter {
        rank: usize,
        global_iter: usize,
        loss: f64,
        acc: f64,
        meta: Option<Box<IterMeta>>,
    },
    Val {
        epoch: usize,
        val_acc: f64,
    },
}

struct IterMeta {
    lr: f64,
    damping: f64,
    decomp_interval: usize,
    counters: Counters,
}

fn worker_main(
    handle: WorkerHandle,
    config: &TrainConfig,
    data: &TrainData,
    plan: RunPlan,
    tx: mpsc::Sender<Msg>,
) -> Result<Option<Model>> {
    let rank = handle.rank();
    let world = config.world_size;
    let mut ctx = WorkerCtx::new(config, &plan, rank)?;

    // Rank 0 seeds the run; installing the broadcast weights everywhere makes
    // divergent initialization structurally impossible.
    let init = if rank == 0 { Some(ctx.weights_vec()) } else { None };
    let ws = handle.broadcast(0, init)?;
    ctx.install_weights(&ws)?;

    let kfac_on = config.optimizer == Optimizer::KfacSgd;
    for epoch in 0..config.epochs {
        let eff = apply_schedules(&config.kfac, epoch);
        let perm = epoch_permutation(config.seed, epoch, data.train_x.rows());
        for it in 0..plan.iters_per_epoch {
            let k = epoch * plan.iters_per_epoch + it;
            let lr = lr_at(config, plan.iters_per_epoch, epoch, it);
            let idx = shard_indices(&perm, it, config.global_batch, rank, world);
            let x = rows_subset(&data.train_x, idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();

            let (loss, acc, local, cap) = ctx.local_grads(&x, &y, config.label_smoothing)?;
            let grads = handle.allreduce_avg(local)?;

            let mut step = grads;
            let mut damping = 0.0;
            let mut decomp_interval = 0;
            if kfac_on {
                damping = eff.damping;
                decomp_interval = eff.decomp_interval;
                if k % eff.factor_interval == 0 {
                    let avg = handle.allreduce_avg(ctx.batch_factor_tensors(&cap)?)?;
                    ctx.absorb_factors(&avg, config.kfac.running_avg)?;
                }
                if k % eff.decomp_interval == 0 {
                    let table = handle.allgather_eigs(ctx.owned_eigs()?, ctx.total_factors)?;
                    ctx.install_eigs(&table)?;
                }
                let raw = step;
                let mut pre = ctx.precondition(&raw, eff.damping)?;
                scale_grads(&mut pre, &raw, lr, config.kfac.kl_clip)?;
                step = pre;
            }
            ctx.apply_update(&step, lr, config.momentum, config.precision)?;
            handle.check_consistent(ctx.weights_digest())?;

            // Counters are stable here: no collective can complete before
            // this rank joins the next one.
            let meta = (rank == 0).then(|| {
                Box::new(IterMeta { lr, damping, decomp_interval, counters: handle.counters() })
            });
            let _ = tx.send(Msg::Iter { rank, global_iter: k, loss, acc, meta });
        }
        if rank == 0 {
            let val_acc = match &data.val {
                Some((vx, vy)) => evaluate(&ctx.model, vx, vy)?,
                None => f64::NAN,
            };
            let _ = tx.send(Msg::Val { epoch, val_acc });
        }
    }
    Ok((rank == 0).then_some(ctx.model))
}

fn train_threaded(config: &TrainConfig, data: &TrainData, plan: RunPlan) -> Result<TrainOutcome> {
    let cluster = SimCluster::new(config.world_size)?;
    let (tx, rx) = mpsc::channel::<Msg>();
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(plan.total_iters);

    let results: Vec<Result<Option<Model>>> = thread::scope(|s| {
        let mut joins = Vec::with_capacity(config.world_size);
        for rank in 0..config.world_size {
            let handle = cluster.handle(rank).expect("rank in range");
            let txc = tx.clone();
            joins.push(s.spawn(move || worker_main(handle, config, data, plan, txc)));
        }
        drop(tx);
        collect_rows(&rx, config.world_size, &plan, &mut rows);
        joins
            .into_iter()
            .map(|j| {
                j.join()
                    .unwrap_or_else(|_| Err(Error::State("worker thread panicked".into())))
            })
            .collect()
    });

    let mut model = None;
    let mut first_protocol: Option<Error> = None;
    for r in results {
        match r {
            // Timeouts are usually secondary casualties of another rank's
            // failure; report the root cause when one exists.
            Err(e @ Error::Protocol(_)) => first_protocol = first_protocol.or(Some(e)),
            Err(e) => return Err(e),
            Ok(Some(m)) => model = Some(m),
            Ok(None) => {}
        }
    }
    if let Some(e) = first_protocol {
        return Err(e);
    }
    if rows.len() != plan.total_iters {
        return Err(Error::State(format!(
            "metrics stream ended after {} of {} rows",
            rows.len(),
            plan.total_iters
        )));
    }
    let model = model.ok_or_else(|| Error::State("rank 0 produced no model".into()))?;
    Ok(TrainOutcome { metrics: rows, model, counters: cluster.counters() })
}

/// Metrics writer: fold worker messages into ordered rows. Rows are emitted
/// strictly in iteration order; epoch-final rows wait for the validation
/// result. Returns when all rows are assembled or every sender is gone.
fn collect_rows(rx: &mpsc::Receiver<Msg>, world: usize, plan: &RunPlan, out: &mut Vec<MetricsRow>) {
    struct Partial {
        stats: Vec<Option<(f64, f64)>>,
        meta: Option<Box<IterMeta>>,
    }
    let mut partial: BTreeMap<usize, Partial> = BTreeMap::new();
    let mut vals: BTreeMap<usize, f64> = BTreeMap::new();
    let mut last = Instant::now();

    while out.len() < plan.total_iters {
        let msg = match rx.recv() {
            Ok(m) => m,
            Err(_) => break,
        };
        match msg {
            Msg::Iter { rank, global_iter, loss, acc, meta } => {
                let p = partial
                    .entry(global_iter)
                    .or_insert_with(|| Partial { stats: vec![None; world], meta: None });
                p.stats[rank] = Some((loss, acc));
                if meta.is_some() {
                    p.meta = meta;
                }
            }
            Msg::Val { epoch, val_acc } => {
                vals.insert(epoch, val_acc);
            }
        }
        loop {
            let next = out.len();
            let ready = partial
                .get(&next)
                .is_some_and(|p| p.stats.iter().all(Option::is_some) && p.meta.is_some());
            if !ready {
                break;
            }
            let epoch = next / plan.iters_per_epoch;
            let epoch_end = (next + 1) % plan.iters_per_epoch == 0;
            let val_acc = if epoch_end {
                match vals.get(&epoch) {
                    Some(&v) => v,
                    None => break,
                }
            } else {
                f64::NAN
            };
            let p = partial.remove(&next).expect("checked above");
            let meta = p.meta.expect("checked above");
            let losses: Vec<f64> = p.stats.iter().map(|s| s.expect("checked").0).collect();
            let accs: Vec<f64> = p.stats.iter().map(|s| s.expect("checked").1).collect();
            let now = Instant::now();
            out.push(make_row(
                plan,
                next,
                &losses,
                &accs,
                val_acc,
                meta.lr,
                meta.damping,
                meta.decomp_interval,
                &meta.counters,
                (now - last).as_secs_f64() * 1000.0,
            ));
            last = now;
        }
    }
}

fn train_lockstep(config: &TrainConfig, data: &TrainData, plan: RunPlan) -> Result<TrainOutcome> {
    let cluster = SimCluster::new(config.world_size)?;
    let world = config.world_size;
    let mut ctxs: Vec<WorkerCtx> =
        (0..world).map(|r| WorkerCtx::new(config, &plan, r)).collect::<Result<_>>()?;

    let init = ctxs[0].weights_vec();
    let ws = cluster.lockstep_broadcast(0, init)?;
    for ctx in &mut ctxs {
        ctx.install_weights(&ws)?;
    }

    let kfac_on = config.optimizer == Optimizer::KfacSgd;
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(plan.total_iters);
    let mut last = Instant::now();
    for epoch in 0..config.epochs {
        let eff = apply_schedules(&config.kfac, epoch);
        let perm = epoch_permutation(config.seed, epoch, data.train_x.rows());
        for it in 0..plan.iters_per_epoch {
            let k = epoch * plan.iters_per_epoch + it;
            let lr = lr_at(config, plan.iters_per_epoch, epoch, it);

            let mut losses = vec![0.0; world];
            let mut accs = vec![0.0; world];
            let mut caps = Vec::with_capacity(world);
            let mut contribs = Vec::with_capacity(world);
            for (rank, ctx) in ctxs.iter().enumerate() {
                let idx = shard_indices(&perm, it, config.global_batch, rank, world);
                let x = rows_subset(&data.train_x, idx);
                let y: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
                let (loss, acc, local, cap) = ctx.local_grads(&x, &y, config.label_smoothing)?;
                losses[rank] = loss;
                accs[rank] = acc;
                caps.push(cap);
                contribs.push(local);
            }
            let grads = cluster.lockstep_allreduce_avg(contribs)?;

            let mut damping = 0.0;
            let mut decomp_interval = 0;
            if kfac_on {
                damping = eff.damping;
                decomp_interval = eff.decomp_interval;
                if k % eff.factor_interval == 0 {
                    let fac: Vec<Vec<Matrix>> = ctxs
                        .iter()
                        .zip(&caps)
                        .map(|(ctx, cap)| ctx.batch_factor_tensors(cap))
                        .collect::<Result<_>>()?;
                    let avg = cluster.lockstep_allreduce_avg(fac)?;
                    for ctx in &mut ctxs {
                        ctx.absorb_factors(&avg, config.kfac.running_avg)?;
                    }
                }
                if k % eff.decomp_interval == 0 {
                    let eig: Vec<Vec<(FactorKey, SymEig)>> =
                        ctxs.iter().map(|c| c.owned_eigs()).collect::<Result<_>>()?;
                    let total = ctxs[0].total_factors;
                    let table = cluster.lockstep_allgather_eigs(eig, total)?;
                    for ctx in &mut ctxs {
                        ctx.install_eigs(&table)?;
                    }
                }
            }
            // Every rank preconditions and updates redundantly, exactly as
            // the threaded execution does.
            for ctx in &mut ctxs {
                let step = if kfac_on {
                    let mut pre = ctx.precondition(&grads, eff.damping)?;
                    scale_grads(&mut pre, &grads, lr, config.kfac.kl_clip)?;
                    pre
                } else {
                    grads.clone()
                };
                ctx.apply_update(&step, lr, config.momentum, config.precision)?;
            }
            let digests: Vec<u64> = ctxs.iter().map(|c| c.weights_digest()).collect();
            cluster.lockstep_check_consistent(&digests)?;

            let counters = cluster.counters();
            let now = Instant::now();
            rows.push(make_row(
                &plan,
                k,
                &losses,
                &accs,
                f64::NAN,
                lr,
                damping,
                decomp_interval,
                &counters,
                (now - last).as_secs_f64() * 1000.0,
            ));
            last = now;
        }
        let val_acc = match &data.val {
            Some((vx, vy)) => evaluate(&ctxs[0].model, vx, vy)?,
            None => f64::NAN,
        };
        rows.last_mut().expect("epoch has at least one row").val_acc = val_acc;
    }
    let model = ctxs.swap_remove(0).model;
    Ok(TrainOutcome { metrics: rows, model, counters: cluster.counters() })
}

// Used by the assignment construction above; kept as a free function so the
// placement CLI report can reuse it on a model it never trains.
/// Factor descriptors of a model, enumerated per trainable layer with the
/// input-side factor first.
pub fn model_factor_descs(model: &Model) -> Vec<FactorDesc> {
    let mut descs = Vec::new();
    for &l in &model.trainable_ids() {
        let w = model.weight(l).expect("trainable layer has a weight");
        descs.push(FactorDesc { key: FactorKey { layer_id: l, kind: FactorKind::A }, dim: w.cols() });
        descs.push(FactorDesc { key: FactorKey { layer_id: l, kind: FactorKind::G }, dim: w.rows() });
    }
    descs
}

/// Assignment for a model under a placement policy.
pub fn assign_model_factors(
    model: &Model,
    world_size: usize,
    placement: Placement,
) -> Result<Assignment> {
    let descs = model_factor_descs(model);
    match placement {
        Placement::RoundRobin => assign_round_robin(&descs, world_size),
        Placement::SizeBalanced => assign_size_balanced(&descs, world_size),
    }
}
