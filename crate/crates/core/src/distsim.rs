//! Deterministic simulation of a top-down, non-replicating tree decomposition.
//!
//! Every rank holds whole subtrees (a run of siblings below one parent held by
//! its master) and streams only its own cells plus the vertices adjacent to
//! them. Rank 0 traverses; when it reaches a remote child it calls the worker,
//! whose traversal runs to completion at that point of the master's sweep.
//! Logical clocks tick once per event and decide who had to wait for whom.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::events::{Adapter, Cell, Ctx, EntityMut, EntityRef, EventMapping, Handover, MappingError, Vertex};
use crate::sfc::{CellCode, ChildOrdering, Orientation, TraversalOrder, VertexKey};
use crate::spacetree::{kids, walk_stream, CellRecord, Spacetree, Streams, Structure, TreeError, VertexRecord};
use crate::storage::{Layout, Record, StorageError};
use crate::traversal::{self, MapSource, RankHook, Setup, Stats, StreamSource, TraversalError, TraversalOptions, WorkerCall, WorkerReply};

/// Ticks between sending a vertical message and its earliest use.
const LATENCY: u64 = 1;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("invalid decomposition: {0}")]
    Topology(String),
    #[error("rebalance plan rejected: {0}")]
    Plan(String),
    #[error("scenario line {line}: {message}")]
    Scenario { line: usize, message: String },
    #[error("rank {0} has no adapter")]
    NoAdapter(usize),
    #[error("cell counts do not add up: ranks hold {held}, tree has {total}")]
    Replication { held: usize, total: usize },
    #[error(transparent)]
    Traversal(#[from] TraversalError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    VerticalDown,
    VerticalUp,
    Horizontal,
    Rebalance,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::VerticalDown => "vertical-down",
            Channel::VerticalUp => "vertical-up",
            Channel::Horizontal => "horizontal-boundary",
            Channel::Rebalance => "rebalance",
        }
    }
}

/// Which rank holds which subtrees.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    ranks: usize,
    /// Subtree roots handed to a rank other than their parent's.
    assign: BTreeMap<CellCode, usize>,
}

impl Topology {
    /// Everything on rank 0.
    pub fn single(ranks: usize) -> Self {
        Topology { ranks: ranks.max(1), assign: BTreeMap::new() }
    }

    /// Hands the listed sibling runs to the given ranks, in order.
    pub fn with_cuts(structure: &Structure, ranks: usize, cuts: &[(Vec<CellCode>, usize)]) -> Result<Self, DistError> {
        let mut t = Topology::single(ranks);
        for (roots, r) in cuts {
            for c in roots {
                t.assign.insert(*c, *r);
            }
        }
        t.validate(structure)?;
        Ok(t)
    }

    /// Greedy largest-subtree-first: each new rank takes, from the currently
    /// heaviest rank, the largest subtree holding at most half of that rank's
    /// cells, plus equally sized siblings while the half is not exceeded.
    pub fn greedy(structure: &Structure, ranks: usize) -> Result<Self, DistError> {
        let mut t = Topology::single(ranks);
        if ranks > 64 {
            return Err(DistError::Topology("at most 64 ranks are supported".into()));
        }
        let cells = structure.cells();
        let grid = structure.grid();
        for r in 1..ranks {
            let owners = t.owners(structure);
            let mut loads = vec![0usize; ranks];
            for c in &cells {
                loads[owners[c]] += 1;
            }
            let q = (0..ranks).max_by_key(|&i| (loads[i], std::cmp::Reverse(i))).unwrap_or(0);
            let mut size: HashMap<CellCode, usize> = HashMap::new();
            let mut by_level = cells.clone();
            by_level.sort_by_key(|c| std::cmp::Reverse(c.level()));
            for c in &by_level {
                if owners[c] != q {
                    continue;
                }
                let below: usize = if structure.is_refined(c) {
                    (0..grid.children()).map(|i| size.get(&c.child(i)).copied().unwrap_or(0)).sum()
                } else {
                    0
                };
                size.insert(*c, below + 1);
            }
            let half = loads[q] / 2;
            let mut cands: Vec<(usize, CellCode)> =
                size.iter().filter(|(c, _)| !c.is_root()).map(|(c, &n)| (n, *c)).collect();
            cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let pick = cands
                .iter()
                .find(|(n, _)| *n <= half)
                .or_else(|| cands.iter().filter(|(n, _)| *n < loads[q]).min_by_key(|(n, c)| (*n, *c)))
                .copied();
            let Some((n, first)) = pick else {
                break;
            };
            let parent = first.parent().expect("candidates are not the root");
            let mut group = vec![first];
            let mut total = n;
            for i in 0..grid.children() {
                let s = parent.child(i);
                if s != first && size.get(&s) == Some(&n) && total + n <= half {
                    group.push(s);
                    total += n;
                }
            }
            for c in group {
                t.assign.insert(c, r);
            }
        }
        t.validate(structure)?;
        Ok(t)
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn assignments(&self) -> &BTreeMap<CellCode, usize> {
        &self.assign
    }

    pub fn owner(&self, c: &CellCode) -> usize {
        let mut x = Some(*c);
        while let Some(a) = x {
            if let Some(&r) = self.assign.get(&a) {
                return r;
            }
            x = a.parent();
        }
        0
    }

    pub fn owners(&self, structure: &Structure) -> HashMap<CellCode, usize> {
        let mut cells = structure.cells();
        cells.sort_by_key(|c| c.level());
        let mut out = HashMap::new();
        for c in cells {
            let r = match self.assign.get(&c) {
                Some(&r) => r,
                None => c.parent().map_or(0, |p| out[&p]),
            };
            out.insert(c, r);
        }
        out
    }

    /// Roots of rank `r` (the global root for rank 0), sorted by code.
    pub fn roots(&self, r: usize) -> Vec<CellCode> {
        self.assign.iter().filter(|(c, &x)| x == r && self.owner_of_parent(c) != r).map(|(c, _)| *c).collect()
    }

    fn owner_of_parent(&self, c: &CellCode) -> usize {
        c.parent().map_or(usize::MAX, |p| self.owner(&p))
    }

    /// Master of `r`: owner of its roots' parent.
    pub fn master(&self, r: usize) -> Option<usize> {
        self.roots(r).first().map(|c| self.owner_of_parent(c))
    }

    pub fn workers(&self, r: usize) -> Vec<usize> {
        (1..self.ranks).filter(|&w| self.master(w) == Some(r)).collect()
    }

    fn validate(&self, structure: &Structure) -> Result<(), DistError> {
        if self.ranks > 64 {
            return Err(DistError::Topology("at most 64 ranks are supported".into()));
        }
        for (c, &r) in &self.assign {
            if r >= self.ranks {
                return Err(DistError::Topology(format!("{c} assigned to rank {r} of {}", self.ranks)));
            }
            if c.is_root() && r != 0 {
                return Err(DistError::Topology("the root belongs to rank 0".into()));
            }
            if !structure.exists(c) {
                return Err(DistError::Topology(format!("{c} is not in the tree")));
            }
        }
        for r in 1..self.ranks {
            let roots = self.roots(r);
            let parents: BTreeSet<CellCode> = roots.iter().filter_map(|c| c.parent()).collect();
            if parents.len() > 1 {
                return Err(DistError::Topology(format!("rank {r} holds subtrees below different parents")));
            }
        }
        for w in 1..self.ranks {
            let mut chain = BTreeSet::new();
            let mut x = w;
            while let Some(m) = self.master(x) {
                if !chain.insert(x) {
                    return Err(DistError::Topology(format!("master links of rank {w} form a cycle")));
                }
                x = m;
            }
        }
        Ok(())
    }
}

/// Flat `key = value` scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub ranks: usize,
    /// `greedy` or `none`.
    pub balancer: String,
    pub skip_reduction: bool,
    pub iterations: usize,
    pub heap_lag: u64,
    pub extra: BTreeMap<String, String>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            ranks: 2,
            balancer: "greedy".into(),
            skip_reduction: false,
            iterations: 3,
            heap_lag: 1,
            extra: BTreeMap::new(),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, DistError> {
        let mut s = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| DistError::Scenario { line: i + 1, message: m };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<u64>().map_err(|_| err(format!("`{k}` needs a number, got `{v}`")));
            match k {
                "ranks" => s.ranks = num(v)? as usize,
                "iterations" => s.iterations = num(v)? as usize,
                "heap_lag" => s.heap_lag = num(v)?,
                "balancer" => match v {
                    "greedy" | "none" => s.balancer = v.to_string(),
                    _ => return Err(err(format!("unknown balancer `{v}`"))),
                },
                "skip_reduction" => {
                    s.skip_reduction = v.parse().map_err(|_| err(format!("`{k}` needs true or false")))?
                }
                _ => {
                    s.extra.insert(k.to_string(), v.to_string());
                }
            }
        }
        if s.ranks == 0 || s.ranks > 64 {
            return Err(DistError::Scenario { line: 0, message: "ranks must be between 1 and 64".into() });
        }
        if s.heap_lag == 0 {
            return Err(DistError::Scenario { line: 0, message: "heap_lag must be at least 1".into() });
        }
        Ok(s)
    }

    pub fn topology(&self, structure: &Structure) -> Result<Topology, DistError> {
        match self.balancer.as_str() {
            "none" => Ok(Topology::single(self.ranks)),
            _ => Topology::greedy(structure, self.ranks),
        }
    }
}

/// Appended to every rank's adapter to switch reductions off.
#[derive(Clone, Debug, Default)]
pub struct SkipReduction;

impl EventMapping for SkipReduction {
    fn prepare_send_to_worker(&mut self, _: &mut Record, _: &mut [Vertex], _: usize) -> Result<bool, MappingError> {
        Ok(false)
    }

    fn thread_replicate(&self) -> Option<Box<dyn EventMapping>> {
        Some(Box::new(SkipReduction))
    }
}

pub type Factory<'f> = &'f dyn Fn() -> Vec<Box<dyn EventMapping>>;

struct RankData {
    streams: Streams,
    adapter: Adapter,
    state: Record,
    clock: u64,
    coarse: Option<(Cell, Vec<Vertex>)>,
    stats: Stats,
}

struct HeapMessage {
    from: usize,
    key: u64,
    block: Vec<f64>,
    due: u64,
}

struct Shared {
    ordering: ChildOrdering,
    order: TraversalOrder,
    layout: Layout,
    structure: Structure,
    topo: Topology,
    owners: HashMap<CellCode, usize>,
    orient: HashMap<CellCode, Orientation>,
    ranks: Vec<Option<RankData>>,
    inbox: Vec<HashMap<VertexKey, Vec<(usize, Vertex)>>>,
    outbox: Vec<HashMap<VertexKey, Vec<(usize, Vertex)>>>,
    messages: BTreeMap<(usize, usize, Channel), u64>,
    worker_waits: Vec<u64>,
    options: TraversalOptions,
}

impl Shared {
    fn holders(&self, v: &VertexKey) -> u64 {
        v.adjacent_cells()
            .into_iter()
            .flatten()
            .filter_map(|c| self.owners.get(&c))
            .fold(0u64, |bits, &r| bits | (1u64 << r))
    }

    /// Roots of rank `r` in the order a sweep in the given direction visits them.
    fn roots(&self, r: usize, backward: bool) -> Vec<(CellCode, Orientation)> {
        if r == 0 {
            let root = CellCode::root(self.structure.grid());
            return vec![(root, self.orient[&root])];
        }
        let roots = self.topo.roots(r);
        let Some(parent) = roots.first().and_then(|c| c.parent()) else {
            return Vec::new();
        };
        kids(&self.ordering, backward, &parent, self.orient[&parent])
            .into_iter()
            .filter(|(c, _)| roots.contains(c))
            .collect()
    }

    fn refresh(&mut self) {
        self.owners = self.topo.owners(&self.structure);
    }

    fn count(&mut self, from: usize, to: usize, ch: Channel) {
        *self.messages.entry((from, to, ch)).or_default() += 1;
    }
}

struct Link<'s> {
    sim: &'s mut Shared,
    rank: usize,
}

impl RankHook for Link<'_> {
    fn rank(&self) -> usize {
        self.rank
    }

    fn owner(&self, c: &CellCode) -> usize {
        self.sim.owners.get(c).copied().unwrap_or_else(|| self.sim.topo.owner(c))
    }

    fn holders(&self, v: &VertexKey) -> u64 {
        self.sim.holders(v)
    }

    fn take_inbox(&mut self, v: &VertexKey) -> Vec<(usize, Vertex)> {
        let mut msgs = self.sim.inbox[self.rank].remove(v).unwrap_or_default();
        msgs.sort_by_key(|(from, _)| *from);
        msgs
    }

    fn post(&mut self, to: usize, v: Vertex) {
        self.sim.count(self.rank, to, Channel::Horizontal);
        self.sim.outbox[to].entry(v.key).or_default().push((self.rank, v));
    }

    fn call_worker(&mut self, call: WorkerCall) -> Result<WorkerReply, TraversalError> {
        let w = call.worker;
        let Some(mut data) = self.sim.ranks.get_mut(w).and_then(Option::take) else {
            return Err(TraversalError::Deadlock(format!(
                "rank {} waits for rank {w}, which is itself blocked further up the call chain",
                self.rank
            )));
        };
        let result = run_worker(self.sim, self.rank, &mut data, call);
        self.sim.ranks[w] = Some(data);
        result
    }
}

fn run_worker(sim: &mut Shared, master: usize, data: &mut RankData, call: WorkerCall) -> Result<WorkerReply, TraversalError> {
    let w = call.worker;
    let comm = data.adapter.communication();
    let mut start = data.clock;
    if let Some(down) = &call.down {
        sim.count(master, w, Channel::VerticalDown);
        if comm.down_before_traversal && call.send_time + LATENCY > start {
            sim.worker_waits[w] += 1;
            start = call.send_time + LATENCY;
        }
        let (cell, vertices) = data.coarse.take().unwrap_or_else(|| {
            let cell = down.cells.first().cloned().unwrap_or(Cell {
                code: call.parent,
                refined: true,
                data: sim.layout.cell.default_record(),
            });
            let vs = call
                .parent
                .vertices()
                .map(|key| Vertex {
                    key,
                    hanging: false,
                    refine: false,
                    remote_ranks: 0,
                    data: sim.layout.vertex.default_record(),
                })
                .collect();
            (Cell { data: sim.layout.cell.default_record(), ..cell }, vs)
        });
        let mut local = Handover { state: data.state.clone(), cells: vec![cell], vertices };
        data.adapter.merge_with_worker(&mut data.state, &mut local, down)?;
        let cell = local.cells.pop().expect("one coarse cell");
        data.coarse = Some((cell, local.vertices));
    }
    if data.coarse.is_none() {
        let cell = Cell { code: call.parent, refined: true, data: sim.layout.cell.default_record() };
        let vs = call
            .parent
            .vertices()
            .map(|key| Vertex { key, hanging: false, refine: false, remote_ranks: 0, data: sim.layout.vertex.default_record() })
            .collect();
        data.coarse = Some((cell, vs));
    }
    let ordering = sim.ordering.clone();
    let layout = sim.layout.clone();
    let structure = sim.structure.clone();
    let options = sim.options.clone();
    let pending = BTreeMap::new();
    let setup = Setup {
        ordering: &ordering,
        order: sim.order,
        layout: &layout,
        structure: &structure,
        backward: data.streams.backward,
        pending: &pending,
        options: &options,
        roots: call.roots,
        coarse: data.coarse.take(),
        clock: start,
        rebuild: false,
    };
    let out = {
        let mut link = Link { sim, rank: w };
        let mut source = StreamSource::new(&data.streams);
        traversal::run(setup, &mut source, &mut data.adapter, &mut data.state, None, Some(&mut link))?
    };
    data.streams = out.streams;
    data.coarse = out.coarse;
    data.clock = out.clock;
    data.stats.absorb(&out.stats);
    let up = if call.reduce {
        let (cell, vertices) = data.coarse.clone().expect("coarse data survives the traversal");
        let mut up = Handover { state: data.state.clone(), cells: vec![cell], vertices };
        data.adapter.prepare_send_to_master(&mut data.state, &mut up)?;
        up.state = data.state.clone();
        sim.count(w, master, Channel::VerticalUp);
        Some(up)
    } else {
        None
    };
    if let (Some(up), Some((_, vs))) = (&up, data.coarse.as_mut()) {
        for (v, u) in vs.iter_mut().zip(&up.vertices) {
            v.data = u.data.clone();
        }
    }
    Ok(WorkerReply { up, ready_time: data.clock + LATENCY })
}

/// Outcome of one distributed sweep.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub iteration: u64,
    pub rank_cells: Vec<usize>,
    pub master_waits: u64,
    pub worker_waits: u64,
}

/// Entities moved by a rebalance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Migration {
    pub cells: usize,
    pub vertices: usize,
    pub copy_events: usize,
    pub merge_events: usize,
}

/// A subtree move: sibling `roots` go to rank `to`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Move {
    pub roots: Vec<CellCode>,
    pub to: usize,
}

pub struct Simulator {
    sim: Shared,
    iteration: u64,
    heap_lag: u64,
    heap: Vec<Vec<HeapMessage>>,
    total_cells: usize,
    /// Rank cell counts after every sweep and rebalance.
    pub history: Vec<Vec<usize>>,
}

impl fmt::Debug for Simulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulator").field("ranks", &self.sim.topo.ranks).field("iteration", &self.iteration).finish()
    }
}

impl Simulator {
    /// Splits `tree` along `topology`; every holder of a vertex gets the full record.
    pub fn new(
        tree: &Spacetree,
        topology: Topology,
        factory: Factory,
        skip_reduction: bool,
        options: TraversalOptions,
    ) -> Result<Self, DistError> {
        topology.validate(tree.structure())?;
        let structure = tree.structure().clone();
        let ordering = tree.ordering().clone();
        let mut orient = HashMap::new();
        let root = CellCode::root(structure.grid());
        let mut stack = vec![(root, ordering.root_orientation())];
        while let Some((c, o)) = stack.pop() {
            orient.insert(c, o);
            if structure.is_refined(&c) {
                stack.extend(kids(&ordering, false, &c, o));
            }
        }
        let n = topology.ranks;
        let mut sim = Shared {
            ordering,
            order: tree.order(),
            layout: tree.layout().clone(),
            structure,
            topo: topology,
            owners: HashMap::new(),
            orient,
            ranks: Vec::new(),
            inbox: vec![HashMap::new(); n],
            outbox: vec![HashMap::new(); n],
            messages: BTreeMap::new(),
            worker_waits: vec![0; n],
            options,
        };
        sim.refresh();
        let cells = tree.cell_map()?;
        let vertices = tree.vertex_map();
        for r in 0..n {
            let mut mappings = factory();
            if skip_reduction {
                mappings.push(Box::new(SkipReduction));
            }
            let adapter = Adapter::new(mappings)?;
            if !adapter.layout().is_prefix_of(&sim.layout) {
                return Err(TraversalError::Layout.into());
            }
            let streams = build_streams(&mut sim, r, &cells, &vertices, false)?;
            sim.ranks.push(Some(RankData {
                streams,
                adapter,
                state: tree.state().clone(),
                clock: 0,
                coarse: None,
                stats: Stats::default(),
            }));
        }
        let total_cells = sim.structure.cell_count();
        let mut s = Simulator { sim, iteration: 0, heap_lag: 1, heap: (0..n).map(|_| Vec::new()).collect(), total_cells, history: Vec::new() };
        s.check_cells()?;
        Ok(s)
    }

    pub fn set_heap_lag(&mut self, lag: u64) {
        self.heap_lag = lag.max(1);
    }

    pub fn topology(&self) -> &Topology {
        &self.sim.topo
    }

    pub fn structure(&self) -> &Structure {
        &self.sim.structure
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn data(&self, r: usize) -> &RankData {
        self.sim.ranks[r].as_ref().expect("no traversal is running")
    }

    pub fn adapter(&self, r: usize) -> &Adapter {
        &self.data(r).adapter
    }

    pub fn state(&self, r: usize) -> &Record {
        &self.data(r).state
    }

    pub fn stats(&self, r: usize) -> &Stats {
        &self.data(r).stats
    }

    pub fn clock(&self, r: usize) -> u64 {
        self.data(r).clock
    }

    pub fn rank_cells(&self) -> Vec<usize> {
        (0..self.sim.topo.ranks).map(|r| self.data(r).streams.cells.len()).collect()
    }

    pub fn worker_waits(&self) -> u64 {
        self.sim.worker_waits.iter().sum()
    }

    pub fn master_waits(&self) -> u64 {
        self.sim.ranks.iter().flatten().map(|d| d.stats.master_waits).sum()
    }

    pub fn messages(&self) -> &BTreeMap<(usize, usize, Channel), u64> {
        &self.sim.messages
    }

    fn check_cells(&mut self) -> Result<(), DistError> {
        let counts = self.rank_cells();
        let held: usize = counts.iter().sum();
        self.history.push(counts);
        if held != self.total_cells {
            return Err(DistError::Replication { held, total: self.total_cells });
        }
        Ok(())
    }

    /// One sweep of the whole decomposition, started on rank 0.
    pub fn traverse(&mut self) -> Result<SweepReport, DistError> {
        let waits_before = (self.master_waits(), self.worker_waits());
        let mut data = self.sim.ranks[0].take().expect("rank 0 is idle between sweeps");
        let result = (|| {
            let ordering = self.sim.ordering.clone();
            let layout = self.sim.layout.clone();
            let structure = self.sim.structure.clone();
            let options = self.sim.options.clone();
            let pending = BTreeMap::new();
            let setup = Setup {
                ordering: &ordering,
                order: self.sim.order,
                layout: &layout,
                structure: &structure,
                backward: data.streams.backward,
                pending: &pending,
                options: &options,
                roots: self.sim.roots(0, data.streams.backward),
                coarse: None,
                clock: data.clock,
                rebuild: false,
            };
            let mut link = Link { sim: &mut self.sim, rank: 0 };
            let mut source = StreamSource::new(&data.streams);
            traversal::run(setup, &mut source, &mut data.adapter, &mut data.state, None, Some(&mut link))
        })();
        match result {
            Ok(out) => {
                data.streams = out.streams;
                data.clock = out.clock;
                data.stats.absorb(&out.stats);
                self.sim.ranks[0] = Some(data);
            }
            Err(e) => {
                self.sim.ranks[0] = Some(data);
                return Err(e.into());
            }
        }
        for r in 0..self.sim.topo.ranks {
            self.sim.inbox[r] = std::mem::take(&mut self.sim.outbox[r]);
        }
        self.iteration += 1;
        self.check_cells()?;
        Ok(SweepReport {
            iteration: self.iteration,
            rank_cells: self.rank_cells(),
            master_waits: self.master_waits() - waits_before.0,
            worker_waits: self.worker_waits() - waits_before.1,
        })
    }

    /// Queues a heap block for delivery `heap_lag` sweeps from now.
    pub fn post_heap(&mut self, from: usize, to: usize, key: u64, block: Vec<f64>) {
        self.sim.count(from, to, Channel::Horizontal);
        self.heap[to].push(HeapMessage { from, key, block, due: self.iteration + self.heap_lag });
    }

    /// Heap blocks that have arrived at `rank`, as (sender, key, block).
    pub fn take_heap(&mut self, rank: usize) -> Vec<(usize, u64, Vec<f64>)> {
        let now = self.iteration;
        let (ready, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.heap[rank]).into_iter().partition(|m| m.due <= now);
        self.heap[rank] = later;
        ready.into_iter().map(|m| (m.from, m.key, m.block)).collect()
    }

    /// Merges all pending boundary replicas into their targets now instead
    /// of at the next sweep.
    pub fn settle(&mut self) -> Result<(), DistError> {
        let grid = self.sim.structure.grid();
        for r in 0..self.sim.topo.ranks {
            let inbox = std::mem::take(&mut self.sim.inbox[r]);
            if inbox.is_empty() {
                continue;
            }
            let holders: HashMap<VertexKey, u64> = inbox.keys().map(|k| (*k, self.sim.holders(k))).collect();
            let data = self.sim.ranks[r].as_mut().expect("idle");
            for rec in data.streams.vertices.iter_mut() {
                let Some(msgs) = inbox.get(&rec.key) else { continue };
                let mut msgs = msgs.clone();
                msgs.sort_by_key(|(f, _)| *f);
                let mut v = Vertex {
                    key: rec.key,
                    hanging: false,
                    refine: rec.refine,
                    remote_ranks: holders[&rec.key] & !(1u64 << r),
                    data: rec.data.clone(),
                };
                let mut commands = Vec::new();
                for (from, m) in &msgs {
                    let mut ctx = Ctx::new(&data.state, r, grid, &mut commands);
                    data.adapter.merge_with_neighbour(&mut ctx, &mut v, m, *from)?;
                }
                rec.data = v.data;
                rec.refine = v.refine;
            }
        }
        Ok(())
    }

    fn rank_maps(&self, r: usize) -> Result<(BTreeMap<CellCode, CellRecord>, BTreeMap<VertexKey, VertexRecord>), DistError> {
        let data = self.data(r);
        let roots = self.sim.roots(r, data.streams.backward);
        let mut cells = BTreeMap::new();
        if !roots.is_empty() {
            let owners = &self.sim.owners;
            let skip = |c: &CellCode| owners.get(c) != Some(&r);
            for (c, i) in walk_stream(&self.sim.ordering, self.sim.order, &data.streams, &roots, &skip)? {
                cells.insert(c, data.streams.cells[i].clone());
            }
        }
        let vertices = data.streams.vertices.iter().map(|v| (v.key, v.clone())).collect();
        Ok((cells, vertices))
    }

    /// Cell records from their owners and vertex records from the lowest holder.
    pub fn gather(&self) -> Result<(BTreeMap<CellCode, CellRecord>, BTreeMap<VertexKey, VertexRecord>), DistError> {
        let mut cells = BTreeMap::new();
        let mut vertices = BTreeMap::new();
        for r in 0..self.sim.topo.ranks {
            let (c, v) = self.rank_maps(r)?;
            cells.extend(c);
            for (k, rec) in v {
                vertices.entry(k).or_insert(rec);
            }
        }
        Ok((cells, vertices))
    }

    pub fn rank_vertex_map(&self, r: usize) -> Result<BTreeMap<VertexKey, VertexRecord>, DistError> {
        Ok(self.rank_maps(r)?.1)
    }

    /// Moves whole subtrees. Pending boundary replicas are settled first,
    /// then structure and payload are copied through the fork/join events.
    pub fn rebalance(&mut self, plan: &Move) -> Result<Migration, DistError> {
        let n = self.sim.topo.ranks;
        let first = *plan.roots.first().ok_or_else(|| DistError::Plan("no roots".into()))?;
        let parent = first.parent().ok_or_else(|| DistError::Plan("the root cannot move".into()))?;
        if plan.to >= n {
            return Err(DistError::Plan(format!("rank {} does not exist", plan.to)));
        }
        let from = self.sim.owners.get(&first).copied().ok_or_else(|| DistError::Plan(format!("{first} is not in the tree")))?;
        for c in &plan.roots {
            if c.parent() != Some(parent) {
                return Err(DistError::Plan("roots must be siblings".into()));
            }
            if self.sim.owners.get(c) != Some(&from) {
                return Err(DistError::Plan(format!("{c} is not held by rank {from}")));
            }
        }
        let parent_owner = self.sim.owners[&parent];
        let idle = self.data(plan.to).streams.cells.is_empty() && plan.to != 0;
        if plan.to == from || !(idle || plan.to == parent_owner) {
            return Err(DistError::Plan(format!(
                "rank {} is neither idle nor the master of the moved cells",
                plan.to
            )));
        }
        self.settle()?;
        let backward = self.data(0).streams.backward;
        let mut maps = Vec::new();
        for r in 0..n {
            maps.push(self.rank_maps(r)?);
        }
        let old_holders: HashMap<VertexKey, u64> =
            maps[from].1.keys().map(|k| (*k, self.sim.holders(k))).collect();
        let mut topo = self.sim.topo.clone();
        for c in &plan.roots {
            if plan.to == parent_owner {
                topo.assign.remove(c);
            } else {
                topo.assign.insert(*c, plan.to);
            }
        }
        topo.validate(&self.sim.structure)?;
        let old_owners = std::mem::replace(&mut self.sim.owners, topo.owners(&self.sim.structure));
        self.sim.topo = topo;
        let mut mig = Migration::default();
        let moved: Vec<CellCode> = maps[from]
            .0
            .keys()
            .filter(|c| plan.roots.iter().any(|r| r.is_ancestor_or_self_of(c)) && old_owners.get(c) == Some(&from))
            .copied()
            .collect();
        let new_holders: HashMap<VertexKey, u64> = old_holders.keys().map(|k| (*k, self.sim.holders(k))).collect();
        let (src, dst) = pair(&mut self.sim.ranks, from, plan.to);
        for c in moved {
            let rec = maps[from].0.remove(&c).expect("moved cell is held");
            let mut copy = Cell { code: c, refined: rec.refined, data: rec.data.clone() };
            src.adapter.prepare_copy_to_remote_node(&mut EntityMut::Cell(&mut copy), plan.to)?;
            let mut local = Cell { code: c, refined: rec.refined, data: self.sim.layout.cell.default_record() };
            dst.adapter.merge_with_remote_data_due_to_fork_or_join(&mut EntityMut::Cell(&mut local), &EntityRef::Cell(&copy), from)?;
            maps[plan.to].0.insert(c, CellRecord { data: local.data, ..rec });
            *self.sim.messages.entry((from, plan.to, Channel::Rebalance)).or_default() += 1;
            mig.cells += 1;
            mig.copy_events += 1;
            mig.merge_events += 1;
        }
        let keys: Vec<VertexKey> = maps[from].1.keys().copied().collect();
        for k in keys {
            let now = new_holders[&k];
            let before = old_holders[&k];
            let gained = (now >> plan.to) & 1 == 1 && (before >> plan.to) & 1 == 0;
            if gained {
                let rec = &maps[from].1[&k];
                let mut copy = Vertex { key: k, hanging: false, refine: rec.refine, remote_ranks: now & !(1 << from), data: rec.data.clone() };
                src.adapter.prepare_copy_to_remote_node(&mut EntityMut::Vertex(&mut copy), plan.to)?;
                let mut local = Vertex {
                    key: k,
                    hanging: false,
                    refine: false,
                    remote_ranks: now & !(1 << plan.to),
                    data: self.sim.layout.vertex.default_record(),
                };
                dst.adapter.merge_with_remote_data_due_to_fork_or_join(
                    &mut EntityMut::Vertex(&mut local),
                    &EntityRef::Vertex(&copy),
                    from,
                )?;
                maps[plan.to].1.insert(k, VertexRecord { key: k, refine: local.refine, data: local.data });
                *self.sim.messages.entry((from, plan.to, Channel::Rebalance)).or_default() += 1;
                mig.vertices += 1;
                mig.copy_events += 1;
                mig.merge_events += 1;
            }
            if (now >> from) & 1 == 0 {
                maps[from].1.remove(&k);
            }
        }
        for (r, (cells, vertices)) in maps.iter().enumerate() {
            let streams = build_streams(&mut self.sim, r, cells, vertices, backward)?;
            let data = self.sim.ranks[r].as_mut().expect("idle");
            data.streams = streams;
            if r != 0 && self.sim.topo.roots(r).is_empty() {
                data.coarse = None;
            }
        }
        self.check_cells()?;
        Ok(mig)
    }

    /// The distributed payload reassembled into one tree.
    pub fn to_tree(&self, like: &Spacetree) -> Result<Spacetree, DistError> {
        let (cells, vertices) = self.gather()?;
        let tree = Spacetree::from_structure(self.sim.structure.clone(), like.ordering().curve(), self.sim.order, self.sim.layout.clone())?;
        let mut tree = tree.with_payload(&cells, &vertices)?;
        *tree.state_mut() = self.state(0).clone();
        Ok(tree)
    }

    pub fn report(&self) -> Report {
        let ranks = (0..self.sim.topo.ranks)
            .map(|r| RankLine {
                rank: r,
                master: self.sim.topo.master(r),
                cells: self.data(r).streams.cells.len(),
                vertices: self.data(r).streams.vertices.len(),
                master_waits: self.data(r).stats.master_waits,
                worker_waits: self.sim.worker_waits[r],
            })
            .collect();
        let mut channels: BTreeMap<Channel, u64> = BTreeMap::new();
        for ((_, _, ch), n) in &self.sim.messages {
            *channels.entry(*ch).or_default() += n;
        }
        Report { iterations: self.iteration, ranks, channels, pairs: self.sim.messages.clone() }
    }
}

fn pair<T>(v: &mut [Option<T>], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (x, y) = v.split_at_mut(b);
        (x[a].as_mut().expect("idle"), y[0].as_mut().expect("idle"))
    } else {
        let (x, y) = v.split_at_mut(a);
        (y[0].as_mut().expect("idle"), x[b].as_mut().expect("idle"))
    }
}

fn build_streams(
    sim: &mut Shared,
    r: usize,
    cells: &BTreeMap<CellCode, CellRecord>,
    vertices: &BTreeMap<VertexKey, VertexRecord>,
    backward: bool,
) -> Result<Streams, DistError> {
    let roots = sim.roots(r, !backward);
    if roots.is_empty() {
        return Ok(Streams { cells: Vec::new(), vertices: Vec::new(), backward });
    }
    let ordering = sim.ordering.clone();
    let layout = sim.layout.clone();
    let structure = sim.structure.clone();
    let order = sim.order;
    let options = TraversalOptions::serial();
    let pending = BTreeMap::new();
    let setup = Setup {
        ordering: &ordering,
        order,
        layout: &layout,
        structure: &structure,
        backward: !backward,
        pending: &pending,
        options: &options,
        roots,
        coarse: None,
        clock: 0,
        rebuild: true,
    };
    let mut adapter = Adapter::empty();
    let mut state = layout.state.default_record();
    let mut source = MapSource { cells, vertices, layout: &layout };
    let mut link = Link { sim, rank: r };
    let out = traversal::run(setup, &mut source, &mut adapter, &mut state, None, Some(&mut link))?;
    Ok(out.streams)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankLine {
    pub rank: usize,
    pub master: Option<usize>,
    pub cells: usize,
    pub vertices: usize,
    pub master_waits: u64,
    pub worker_waits: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub iterations: u64,
    pub ranks: Vec<RankLine>,
    pub channels: BTreeMap<Channel, u64>,
    pub pairs: BTreeMap<(usize, usize, Channel), u64>,
}

impl Report {
    pub fn master_waits(&self) -> u64 {
        self.ranks.iter().map(|r| r.master_waits).sum()
    }

    pub fn worker_waits(&self) -> u64 {
        self.ranks.iter().map(|r| r.worker_waits).sum()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iterations {}", self.iterations)?;
        writeln!(f, "rank master cells vertices master_waits worker_waits")?;
        for r in &self.ranks {
            let m = r.master.map_or("-".to_string(), |m| m.to_string());
            writeln!(f, "{} {} {} {} {} {}", r.rank, m, r.cells, r.vertices, r.master_waits, r.worker_waits)?;
        }
        writeln!(f, "total cells {}", self.ranks.iter().map(|r| r.cells).sum::<usize>())?;
        for ch in [Channel::VerticalDown, Channel::VerticalUp, Channel::Horizontal, Channel::Rebalance] {
            writeln!(f, "messages {} {}", ch.name(), self.channels.get(&ch).copied().unwrap_or(0))?;
        }
        writeln!(f, "master waits {}", self.master_waits())?;
        write!(f, "worker waits {}", self.worker_waits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::Fixture;

    #[test]
    fn scenario_parses() {
        let s = Scenario::parse("# demo\nranks = 4\nskip_reduction = true\niterations=5\nheap_lag = 2\nbalancer = none\ndepth = 3\n").unwrap();
        assert_eq!(s.ranks, 4);
        assert!(s.skip_reduction);
        assert_eq!(s.iterations, 5);
        assert_eq!(s.heap_lag, 2);
        assert_eq!(s.balancer, "none");
        assert_eq!(s.extra["depth"], "3");
        assert!(Scenario::parse("ranks 3").is_err());
        assert!(Scenario::parse("ranks = 0").is_err());
        assert!(Scenario::parse("balancer = best").is_err());
    }

    #[test]
    fn greedy_cuts_the_fixture_at_b() {
        let f = Fixture::lettered();
        let s = Structure::from_refined(f.grid(), f.refined().iter().copied()).unwrap();
        let t = Topology::greedy(&s, 2).unwrap();
        assert_eq!(t.roots(1), vec![f.code("B").unwrap()]);
        assert_eq!(t.master(1), Some(0));
        let owners = t.owners(&s);
        assert_eq!(owners.values().filter(|&&r| r == 1).count(), 9);
        assert_eq!(owners.values().filter(|&&r| r == 0).count(), 16);
    }

    #[test]
    fn topology_rejects_split_parents() {
        let f = Fixture::lettered();
        let s = Structure::from_refined(f.grid(), f.refined().iter().copied()).unwrap();
        let cut = vec![f.code("I").unwrap(), f.code("J").unwrap()];
        assert!(Topology::with_cuts(&s, 2, &[(cut, 1)]).is_err());
    }

    #[test]
    fn blocked_worker_is_a_deadlock() {
        use crate::sfc::Curve;
        let f = Fixture::lettered();
        let s = Structure::from_refined(f.grid(), f.refined().iter().copied()).unwrap();
        let tree = Spacetree::from_structure(s.clone(), Curve::Morton, TraversalOrder::DepthFirst, Layout::default()).unwrap();
        let factory = || Vec::new();
        let mut sim = Simulator::new(&tree, Topology::greedy(&s, 2).unwrap(), &factory, false, TraversalOptions::serial()).unwrap();
        let parked = sim.sim.ranks[1].take();
        assert!(matches!(sim.traverse(), Err(DistError::Traversal(TraversalError::Deadlock(_)))));
        sim.sim.ranks[1] = parked;
        sim.traverse().unwrap();
    }
}
