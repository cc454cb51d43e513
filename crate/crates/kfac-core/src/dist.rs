//! Deterministic simulated multi-worker cluster.
//!
//! Workers are threads (or lockstep-driven virtual ranks) that meet at
//! rendezvous collectives: `allreduce_avg`, `allgather_eigs`, `broadcast`,
//! plus an uncounted `check_consistent` digest barrier. Every collective is
//! all-or-nothing: it completes only when all ranks have entered, reduces
//! contributions in fixed rank order so results are bitwise identical across
//! ranks and across runs, and counts calls and scalar-element volume.
//!
//! A rank that skips a collective stalls the others; the stall is detected by
//! timeout and surfaces as a protocol error on every participant instead of a
//! hang. Any protocol violation poisons the cluster: all current and future
//! collective calls fail.
//!
//! The same reduction kernels back a threaded mode (blocking `WorkerHandle`
//! calls) and a lockstep mode (`SimCluster::lockstep_*`, all ranks'
//! contributions supplied at once from one thread); the two modes therefore
//! produce bitwise-identical results and identical counters.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymEig};
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// Which covariance factor of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorKind {
    /// Input-side factor (layer-input covariance).
    A,
    /// Output-side factor (output-gradient covariance).
    G,
}

/// Identity of one factor: the owning layer and the side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorKey {
    pub layer_id: usize,
    pub kind: FactorKind,
}

/// A factor to be placed on a worker: identity plus its square dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorDesc {
    pub key: FactorKey,
    pub dim: usize,
}

/// Gathered eigendecompositions, keyed by factor. BTreeMap keeps iteration
/// order deterministic.
pub type EigTable = BTreeMap<FactorKey, SymEig>;

/// Collective traffic counters: calls and scalar-element volume per
/// operation. `check_consistent` barriers are intentionally uncounted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub allreduce_calls: u64,
    pub allreduce_volume: u64,
    pub allgather_calls: u64,
    pub allgather_volume: u64,
    pub broadcast_calls: u64,
    pub broadcast_volume: u64,
}

impl Counters {
    pub fn total_volume(&self) -> u64 {
        self.allreduce_volume + self.allgather_volume + self.broadcast_volume
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OpKind {
    Allreduce,
    AllgatherEigs,
    Broadcast,
    CheckConsistent,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::Allreduce => "allreduce",
            OpKind::AllgatherEigs => "allgather",
            OpKind::Broadcast => "broadcast",
            OpKind::CheckConsistent => "check_consistent",
        }
    }
}

enum Contrib {
    Reduce(Vec<Matrix>),
    Eigs { eigs: Vec<(FactorKey, SymEig)>, expected_total: usize },
    Bcast { root: usize, tensors: Option<Vec<Matrix>> },
    Digest(u64),
}

impl Contrib {
    fn kind(&self) -> OpKind {
        match self {
            Contrib::Reduce(_) => OpKind::Allreduce,
            Contrib::Eigs { .. } => OpKind::AllgatherEigs,
            Contrib::Bcast { .. } => OpKind::Broadcast,
            Contrib::Digest(_) => OpKind::CheckConsistent,
        }
    }
}

enum Payload {
    Tensors(Vec<Matrix>),
    Table(EigTable),
    Unit,
}

#[derive(Clone, Copy)]
enum PoisonKind {
    Protocol,
    Consistency,
}

struct Poison {
    kind: PoisonKind,
    message: String,
}

impl Poison {
    fn protocol(message: String) -> Self {
        Poison { kind: PoisonKind::Protocol, message }
    }

    fn to_error(&self) -> Error {
        match self.kind {
            PoisonKind::Protocol => Error::Protocol(self.message.clone()),
            PoisonKind::Consistency => Error::Consistency(self.message.clone()),
        }
    }
}

struct Round {
    kind: OpKind,
    contribs: Vec<Option<Contrib>>,
    arrived: usize,
}

struct State {
    round: Option<Round>,
    dist: Option<(Arc<Payload>, usize)>,
    poisoned: Option<Poison>,
    counters: Counters,
}

struct Inner {
    world_size: usize,
    timeout: Duration,
    state: Mutex<State>,
    cv: Condvar,
}

/// The shared fabric: construct once, hand one `WorkerHandle` per rank to
/// each worker context (or drive ranks in lockstep through `lockstep_*`).
#[derive(Clone)]
pub struct SimCluster {
    inner: Arc<Inner>,
}

/// One rank's endpoint for blocking collective calls.
#[derive(Clone)]
pub struct WorkerHandle {
    rank: usize,
    inner: Arc<Inner>,
}

impl SimCluster {
    pub fn new(world_size: usize) -> Result<Self> {
        Self::with_timeout(world_size, DEFAULT_TIMEOUT)
    }

    /// `timeout` bounds how long any rank waits at a rendezvous before the
    /// stall is declared a protocol violation.
    pub fn with_timeout(world_size: usize, timeout: Duration) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::Value("world size must be at least 1".into()));
        }
        Ok(SimCluster {
            inner: Arc::new(Inner {
                world_size,
                timeout,
                state: Mutex::new(State {
                    round: None,
                    dist: None,
                    poisoned: None,
                    counters: Counters::default(),
                }),
                cv: Condvar::new(),
            }),
        })
    }

    pub fn world_size(&self) -> usize {
        self.inner.world_size
    }

    pub fn handle(&self, rank: usize) -> Result<WorkerHandle> {
        if rank >= self.inner.world_size {
            return Err(Error::Value(format!(
                "rank {rank} out of range for world size {}",
                self.inner.world_size
            )));
        }
        Ok(WorkerHandle { rank, inner: Arc::clone(&self.inner) })
    }

    pub fn counters(&self) -> Counters {
        self.inner.state.lock().expect("cluster lock").counters
    }

    /// Lockstep allreduce: contributions for all ranks in rank order.
    pub fn lockstep_allreduce_avg(&self, contribs: Vec<Vec<Matrix>>) -> Result<Vec<Matrix>> {
        let payload = self.lockstep_run(contribs.into_iter().map(Contrib::Reduce).collect())?;
        match &*payload {
            Payload::Tensors(t) => Ok(t.clone()),
            _ => unreachable!("allreduce produces tensors"),
        }
    }

    /// Lockstep allgather: per-rank owned eigendecompositions in rank order.
    pub fn lockstep_allgather_eigs(
        &self,
        contribs: Vec<Vec<(FactorKey, SymEig)>>,
        expected_total: usize,
    ) -> Result<EigTable> {
        let payload = self.lockstep_run(
            contribs
                .into_iter()
                .map(|eigs| Contrib::Eigs { eigs, expected_total })
                .collect(),
        )?;
        match &*payload {
            Payload::Table(t) => Ok(t.clone()),
            _ => unreachable!("allgather produces a table"),
        }
    }

    /// Lockstep broadcast of `tensors` from `root` to every rank.
    pub fn lockstep_broadcast(&self, root: usize, tensors: Vec<Matrix>) -> Result<Vec<Matrix>> {
        let world = self.inner.world_size;
        let contribs = (0..world)
            .map(|r| Contrib::Bcast {
                root,
                tensors: if r == root { Some(tensors.clone()) } else { None },
            })
            .collect();
        let payload = self.lockstep_run(contribs)?;
        match &*payload {
            Payload::Tensors(t) => Ok(t.clone()),
            _ => unreachable!("broadcast produces tensors"),
        }
    }

    /// Lockstep replica-digest comparison; uncounted.
    pub fn lockstep_check_consistent(&self, digests: &[u64]) -> Result<()> {
        let contribs = digests.iter().map(|&d| Contrib::Digest(d)).collect();
        self.lockstep_run(contribs).map(|_| ())
    }

    fn lockstep_run(&self, contribs: Vec<Contrib>) -> Result<Arc<Payload>> {
        if contribs.len() != self.inner.world_size {
            return Err(Error::Protocol(format!(
                "lockstep call supplied {} contributions for world size {}",
                contribs.len(),
                self.inner.world_size
            )));
        }
        let mut st = self.inner.state.lock().expect("cluster lock");
        if let Some(p) = &st.poisoned {
            return Err(p.to_error());
        }
        if st.round.is_some() || st.dist.is_some() {
            return Err(Error::Protocol(
                "lockstep collective started while a threaded collective is in flight".into(),
            ));
        }
        let kind = contribs[0].kind();
        if let Some(bad) = contribs.iter().position(|c| c.kind() != kind) {
            let p = Poison::protocol(format!(
                "rank {bad} entered {} while {} was in progress",
                contribs[bad].kind().name(),
                kind.name()
            ));
            let err = p.to_error();
            st.poisoned = Some(p);
            return Err(err);
        }
        let slots: Vec<Option<Contrib>> = contribs.into_iter().map(Some).collect();
        match reduce_round(kind, slots, self.inner.world_size) {
            Ok((payload, delta)) => {
                apply_counters(&mut st.counters, kind, delta);
                Ok(Arc::new(payload))
            }
            Err(p) => {
                let err = p.to_error();
                st.poisoned = Some(p);
                Err(err)
            }
        }
    }
}

impl WorkerHandle {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.inner.world_size
    }

    /// Snapshot of the cluster-wide traffic counters. Stable between this
    /// rank's collectives: no round can complete without this rank joining.
    pub fn counters(&self) -> Counters {
        self.inner.state.lock().expect("cluster lock").counters
    }

    /// Average the tensor lists contributed by all ranks; every rank receives
    /// the same Vec, reduced in rank order 0..W-1.
    pub fn allreduce_avg(&self, tensors: Vec<Matrix>) -> Result<Vec<Matrix>> {
        let payload = self.collective(Contrib::Reduce(tensors))?;
        match &*payload {
            Payload::Tensors(t) => Ok(t.clone()),
            _ => unreachable!("allreduce produces tensors"),
        }
    }

    /// Gather per-owner eigendecompositions into the full table on every
    /// rank. All ranks must pass the same `expected_total`; missing or
    /// duplicate contributions are protocol errors.
    pub fn allgather_eigs(
        &self,
        eigs: Vec<(FactorKey, SymEig)>,
        expected_total: usize,
    ) -> Result<EigTable> {
        let payload = self.collective(Contrib::Eigs { eigs, expected_total })?;
        match &*payload {
            Payload::Table(t) => Ok(t.clone()),
            _ => unreachable!("allgather produces a table"),
        }
    }

    /// Distribute `root`'s tensors to every rank. Only the root passes
    /// `Some`; everyone must agree on the root.
    pub fn broadcast(&self, root: usize, tensors: Option<Vec<Matrix>>) -> Result<Vec<Matrix>> {
        let payload = self.collective(Contrib::Bcast { root, tensors })?;
        match &*payload {
            Payload::Tensors(t) => Ok(t.clone()),
            _ => unreachable!("broadcast produces tensors"),
        }
    }

    /// Barrier comparing a replica digest across ranks. Divergence is a
    /// consistency error on every rank. Does not touch traffic counters.
    pub fn check_consistent(&self, digest: u64) -> Result<()> {
        self.collective(Contrib::Digest(digest)).map(|_| ())
    }

    fn collective(&self, contrib: Contrib) -> Result<Arc<Payload>> {
        let inner = &*self.inner;
        let world = inner.world_size;
        let kind = contrib.kind();
        let start = Instant::now();
        let mut st = inner.state.lock().expect("cluster lock");

        // Wait for any previous round to finish distributing.
        loop {
            if let Some(p) = &st.poisoned {
                return Err(p.to_error());
            }
            if st.dist.is_none() {
                break;
            }
            let (next, fired) = self.wait(st, start)?;
            st = next;
            if fired {
                let err = self.poison_timeout(&mut st, kind);
                return Err(err);
            }
        }

        // Deposit this rank's contribution.
        let round = st.round.get_or_insert_with(|| Round {
            kind,
            contribs: (0..world).map(|_| None).collect(),
            arrived: 0,
        });
        if round.kind != kind {
            let p = Poison::protocol(format!(
                "rank {} entered {} while {} was in progress",
                self.rank,
                kind.name(),
                round.kind.name()
            ));
            let err = p.to_error();
            st.poisoned = Some(p);
            st.round = None;
            inner.cv.notify_all();
            return Err(err);
        }
        if round.contribs[self.rank].is_some() {
            let p = Poison::protocol(format!(
                "rank {} entered the same {} twice",
                self.rank,
                kind.name()
            ));
            let err = p.to_error();
            st.poisoned = Some(p);
            st.round = None;
            inner.cv.notify_all();
            return Err(err);
        }
        round.contribs[self.rank] = Some(contrib);
        round.arrived += 1;

        if round.arrived == world {
            let round = st.round.take().expect("round in progress");
            match reduce_round(round.kind, round.contribs, world) {
                Ok((payload, delta)) => {
                    apply_counters(&mut st.counters, round.kind, delta);
                    st.dist = Some((Arc::new(payload), 0));
                }
                Err(p) => {
                    st.poisoned = Some(p);
                }
            }
            inner.cv.notify_all();
        }

        // Wait for the round's result and take one share of it.
        loop {
            if let Some(p) = &st.poisoned {
                return Err(p.to_error());
            }
            if let Some((payload, taken)) = &mut st.dist {
                let out = Arc::clone(payload);
                *taken += 1;
                if *taken == world {
                    st.dist = None;
                    inner.cv.notify_all();
                }
                return Ok(out);
            }
            let (next, fired) = self.wait(st, start)?;
            st = next;
            if fired {
                let err = self.poison_timeout(&mut st, kind);
                return Err(err);
            }
        }
    }

    /// Condvar wait bounded by the cluster timeout. Returns the reacquired
    /// guard and whether the deadline has passed.
    fn wait<'a>(
        &self,
        st: std::sync::MutexGuard<'a, State>,
        start: Instant,
    ) -> Result<(std::sync::MutexGuard<'a, State>, bool)> {
        let elapsed = start.elapsed();
        if elapsed >= self.inner.timeout {
            return Ok((st, true));
        }
        let remaining = self.inner.timeout - elapsed;
        let (guard, _) = self
            .inner
            .cv
            .wait_timeout(st, remaining)
            .expect("cluster lock");
        Ok((guard, start.elapsed() >= self.inner.timeout))
    }

    fn poison_timeout(&self, st: &mut State, kind: OpKind) -> Error {
        let p = Poison::protocol(format!(
            "rank {} timed out after {:?} waiting at {}: not every rank entered the collective",
            self.rank,
            self.inner.timeout,
            kind.name()
        ));
        let err = p.to_error();
        st.poisoned = Some(p);
        st.round = None;
        st.dist = None;
        self.inner.cv.notify_all();
        err
    }
}

fn apply_counters(c: &mut Counters, kind: OpKind, volume: u64) {
    match kind {
        OpKind::Allreduce => {
            c.allreduce_calls += 1;
            c.allreduce_volume += volume;
        }
        OpKind::AllgatherEigs => {
            c.allgather_calls += 1;
            c.allgather_volume += volume;
        }
        OpKind::Broadcast => {
            c.broadcast_calls += 1;
            c.broadcast_volume += volume;
        }
        OpKind::CheckConsistent => {}
    }
}

/// Run one collective's reduction over the complete contribution set, in
/// fixed rank order. Returns the shared payload and the element volume to
/// count. All protocol violations are reported as poison.
fn reduce_round(
    kind: OpKind,
    slots: Vec<Option<Contrib>>,
    world: usize,
) -> std::result::Result<(Payload, u64), Poison> {
    let contribs: Vec<Contrib> = slots
        .into_iter()
        .map(|c| c.expect("round complete"))
        .collect();
    match kind {
        OpKind::Allreduce => reduce_mean(contribs, world),
        OpKind::AllgatherEigs => merge_eig_tables(contribs),
        OpKind::Broadcast => pick_broadcast(contribs),
        OpKind::CheckConsistent => compare_digests(contribs),
    }
}

fn reduce_mean(
    contribs: Vec<Contrib>,
    world: usize,
) -> std::result::Result<(Payload, u64), Poison> {
    let mut lists: Vec<Vec<Matrix>> = Vec::with_capacity(world);
    for c in contribs {
        match c {
            Contrib::Reduce(t) => lists.push(t),
            _ => unreachable!("kind checked at arrival"),
        }
    }
    let expect: Vec<(usize, usize)> = lists[0].iter().map(|m| (m.rows(), m.cols())).collect();
    for (rank, list) in lists.iter().enumerate().skip(1) {
        if list.len() != expect.len() {
            return Err(Poison::protocol(format!(
                "rank {rank} contributed {} tensors to allreduce, rank 0 contributed {}",
                list.len(),
                expect.len()
            )));
        }
        for (i, m) in list.iter().enumerate() {
            if (m.rows(), m.cols()) != expect[i] {
                return Err(Poison::protocol(format!(
                    "rank {rank} contributed tensor {i} of shape {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    expect[i].0,
                    expect[i].1
                )));
            }
        }
    }
    // Fixed-order reduction: accumulate rank 0, 1, ..., W-1, then divide.
    let mut acc = lists[0].clone();
    for list in lists.iter().skip(1) {
        for (a, m) in acc.iter_mut().zip(list) {
            *a = a.add(m).expect("shapes validated");
        }
    }
    let scale = 1.0 / world as f64;
    let volume: u64 = expect.iter().map(|&(r, c)| (r * c) as u64).sum();
    for a in &mut acc {
        a.scale_in_place(scale);
    }
    Ok((Payload::Tensors(acc), volume))
}

fn merge_eig_tables(contribs: Vec<Contrib>) -> std::result::Result<(Payload, u64), Poison> {
    let mut expected: Option<usize> = None;
    let mut table = EigTable::new();
    let mut volume = 0u64;
    for (rank, c) in contribs.into_iter().enumerate() {
        let (eigs, expected_total) = match c {
            Contrib::Eigs { eigs, expected_total } => (eigs, expected_total),
            _ => unreachable!("kind checked at arrival"),
        };
        match expected {
            None => expected = Some(expected_total),
            Some(e) if e != expected_total => {
                return Err(Poison::protocol(format!(
                    "rank {rank} expects {expected_total} factors in allgather, rank 0 expects {e}"
                )));
            }
            Some(_) => {}
        }
        for (key, eig) in eigs {
            let n = eig.dim() as u64;
            if table.insert(key, eig).is_some() {
                return Err(Poison::protocol(format!(
                    "factor (layer {}, {:?}) contributed to allgather by more than one rank",
                    key.layer_id, key.kind
                )));
            }
            volume += n * n + n;
        }
    }
    let expected = expected.expect("world size >= 1");
    if table.len() != expected {
        return Err(Poison::protocol(format!(
            "allgather collected {} factors, expected {expected}",
            table.len()
        )));
    }
    Ok((Payload::Table(table), volume))
}

fn pick_broadcast(contribs: Vec<Contrib>) -> std::result::Result<(Payload, u64), Poison> {
    let mut agreed_root: Option<usize> = None;
    let mut payload: Option<Vec<Matrix>> = None;
    for (rank, c) in contribs.into_iter().enumerate() {
        let (root, tensors) = match c {
            Contrib::Bcast { root, tensors } => (root, tensors),
            _ => unreachable!("kind checked at arrival"),
        };
        match agreed_root {
            None => agreed_root = Some(root),
            Some(r) if r != root => {
                return Err(Poison::protocol(format!(
                    "rank {rank} names broadcast root {root}, rank 0 names {r}"
                )));
            }
            Some(_) => {}
        }
        let is_root = rank == agreed_root.expect("set above");
        match (is_root, tensors) {
            (true, Some(t)) => payload = Some(t),
            (true, None) => {
                return Err(Poison::protocol(format!(
                    "broadcast root {rank} supplied no data"
                )));
            }
            (false, Some(_)) => {
                return Err(Poison::protocol(format!(
                    "rank {rank} is not the broadcast root but supplied data"
                )));
            }
            (false, None) => {}
        }
    }
    let root = agreed_root.expect("world size >= 1");
    let payload = payload.ok_or_else(|| {
        Poison::protocol(format!("broadcast root {root} out of range, no data supplied"))
    })?;
    let volume: u64 = payload.iter().map(|m| (m.rows() * m.cols()) as u64).sum();
    Ok((Payload::Tensors(payload), volume))
}

fn compare_digests(contribs: Vec<Contrib>) -> std::result::Result<(Payload, u64), Poison> {
    let digests: Vec<u64> = contribs
        .into_iter()
        .map(|c| match c {
            Contrib::Digest(d) => d,
            _ => unreachable!("kind checked at arrival"),
        })
        .collect();
    let first = digests[0];
    for (rank, &d) in digests.iter().enumerate().skip(1) {
        if d != first {
            return Err(Poison {
                kind: PoisonKind::Consistency,
                message: format!(
                    "replica digests diverge: rank 0 = {first:#018x}, rank {rank} = {d:#018x}"
                ),
            });
        }
    }
    Ok((Payload::Unit, 0))
}

/// Order-sensitive digest of tensor contents, for replica comparison.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> u64 {
    let mut h = DefaultHasher::new();
    for m in tensors {
        m.rows().hash(&mut h);
        m.cols().hash(&mut h);
        for v in m.as_slice() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Placement of every factor onto a worker rank.
#[derive(Clone, Debug)]
pub struct Assignment {
    factors: Vec<FactorDesc>,
    owners: Vec<usize>,
    world_size: usize,
}

impl Assignment {
    pub fn world_size(&self) -> usize {
        self.world_size
    }

    /// Factor list in enumeration order, parallel to `owners`.
    pub fn factors(&self) -> &[FactorDesc] {
        &self.factors
    }

    pub fn owners(&self) -> &[usize] {
        &self.owners
    }

    pub fn owner_of(&self, key: FactorKey) -> Option<usize> {
        self.factors
            .iter()
            .position(|f| f.key == key)
            .map(|i| self.owners[i])
    }

    pub fn owned_by(&self, rank: usize) -> Vec<FactorDesc> {
        self.factors
            .iter()
            .zip(&self.owners)
            .filter(|(_, &o)| o == rank)
            .map(|(f, _)| *f)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

/// Cyclic placement: factors in the given enumeration order (per layer, the
/// input-side factor first, then the output-side one), owner = index mod
/// world size. Per-worker counts differ by at most one.
pub fn assign_round_robin(factors: &[FactorDesc], world_size: usize) -> Result<Assignment> {
    if world_size == 0 {
        return Err(Error::Value("world size must be at least 1".into()));
    }
    let owners = (0..factors.len()).map(|i| i % world_size).collect();
    Ok(Assignment { factors: factors.to_vec(), owners, world_size })
}

/// Size-aware placement: factors sorted by cost n³ descending (stable), each
/// assigned to the worker with the least accumulated cost; ties pick the
/// lowest rank. Longest-processing-time greedy.
pub fn assign_size_balanced(factors: &[FactorDesc], world_size: usize) -> Result<Assignment> {
    if world_size == 0 {
        return Err(Error::Value("world size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..factors.len()).collect();
    order.sort_by(|&i, &j| {
        let ci = factors[i].dim as u128;
        let cj = factors[j].dim as u128;
        (cj * cj * cj).cmp(&(ci * ci * ci)).then(i.cmp(&j))
    });
    let mut loads = vec![0u128; world_size];
    let mut owners = vec![0usize; factors.len()];
    for idx in order {
        let best = (0..world_size)
            .min_by_key(|&w| (loads[w], w))
            .expect("world size >= 1");
        owners[idx] = best;
        let d = factors[idx].dim as u128;
        loads[best] += d * d * d;
    }
    Ok(Assignment { factors: factors.to_vec(), owners, world_size })
}

/// One worker's share of the placement cost model.
#[derive(Clone, Debug)]
pub struct WorkerLoad {
    pub rank: usize,
    pub n_factors: usize,
    /// Σ n² over owned factors (parameter count proxy).
    pub params: u64,
    /// Σ n³ over owned factors (eigendecomposition cost proxy).
    pub cost: u64,
    /// Single-worker total cost divided by this worker's cost; infinite for
    /// idle workers.
    pub speedup: f64,
}

/// Per-worker cost model of an assignment.
#[derive(Clone, Debug)]
pub struct ImbalanceReport {
    pub per_worker: Vec<WorkerLoad>,
    pub total_cost: u64,
    pub min_params: u64,
    pub max_params: u64,
}

impl ImbalanceReport {
    pub fn max_cost(&self) -> u64 {
        self.per_worker.iter().map(|w| w.cost).max().unwrap_or(0)
    }

    pub fn min_speedup(&self) -> f64 {
        self.per_worker
            .iter()
            .map(|w| w.speedup)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_speedup(&self) -> f64 {
        self.per_worker.iter().map(|w| w.speedup).fold(0.0, f64::max)
    }
}

pub fn report_imbalance(assignment: &Assignment) -> ImbalanceReport {
    let world = assignment.world_size();
    let mut per_worker: Vec<WorkerLoad> = (0..world)
        .map(|rank| WorkerLoad { rank, n_factors: 0, params: 0, cost: 0, speedup: 0.0 })
        .collect();
    let mut total_cost = 0u64;
    for (f, &owner) in assignment.factors().iter().zip(assignment.owners()) {
        let n = f.dim as u64;
        let w = &mut per_worker[owner];
        w.n_factors += 1;
        w.params += n * n;
        w.cost += n * n * n;
        total_cost += n * n * n;
    }
    for w in &mut per_worker {
        w.speedup = if w.cost == 0 {
            f64::INFINITY
        } else {
            total_cost as f64 / w.cost as f64
        };
    }
    let min_params = per_worker.iter().map(|w| w.params).min().unwrap_or(0);
    let max_params = per_worker.iter().map(|w| w.params).max().unwrap_or(0);
    ImbalanceReport { per_worker, total_cost, min_params, max_params }
}
