//! The stream traversal automaton.
//!
//! Cells are read from the back of the input stack in traversal order and
//! pushed to the output stack in post-order, so the next sweep (which visits
//! children in reverse order) finds them in its own read order. A refined cell
//! acquires the vertices of all its children as one block; a persistent vertex
//! is read on its first acquisition and written after its last release.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::events::{
    Adapter, Cell, Command, CommunicationSpec, ConcurrencySpec, Ctx, EventKind, EventResult, Handover, MappingError, Policy,
    Vertex,
};
use crate::regular::{self, SerialPool, TaskPool, ThreadPool};
use crate::sfc::{CellCode, ChildOrdering, Grid, Orientation, TraversalOrder, VertexKey};
use crate::spacetree::{kids, CellRecord, Marker, Streams, Structure, VertexClass, VertexRecord};
use crate::storage::{FieldType, Layout, Record, Schema};
use crate::trace::{Trace, TraceId};

#[derive(Debug, Error)]
pub enum TraversalError {
    #[error("event mapping failed: {0}")]
    Mapping(#[from] MappingError),
    #[error("stream discipline violated: {0}")]
    Stream(String),
    #[error("adapter layout is not a prefix of the tree layout")]
    Layout,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("deadlock: {0}")]
    Deadlock(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraversalOptions {
    /// Smallest regularity marker at which a subtree is unrolled; `None` disables unrolling.
    pub unroll_min_f: Option<u8>,
    /// Upper bound on the adapter's declared concurrency inside unrolled regions.
    pub colouring: Policy,
    pub workers: usize,
}

impl Default for TraversalOptions {
    fn default() -> Self {
        TraversalOptions { unroll_min_f: Some(2), colouring: Policy::Concurrent, workers: 1 }
    }
}

impl TraversalOptions {
    pub fn serial() -> Self {
        TraversalOptions { unroll_min_f: None, colouring: Policy::Serial, workers: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub events: BTreeMap<EventKind, u64>,
    pub cells_read: u64,
    pub cells_written: u64,
    pub vertices_read: u64,
    pub vertices_written: u64,
    pub cells_created: u64,
    pub cells_destroyed: u64,
    pub vertices_created: u64,
    pub vertices_destroyed: u64,
    /// Record bytes read plus written.
    pub payload_bytes: u64,
    /// Largest number of createHangingVertex calls for one vertex.
    pub max_hanging_creations: u64,
    /// Cells loaded en bloc per unrolled region.
    pub unrolled_regions: Vec<u64>,
    pub coloured_phases: u64,
    pub colour_conflicts: u64,
    pub commands_applied: u64,
    pub commands_deferred: u64,
    pub commands_ignored: u64,
    pub master_waits: u64,
    pub worker_waits: u64,
}

impl Stats {
    pub fn count(&self, kind: EventKind) -> u64 {
        self.events.get(&kind).copied().unwrap_or(0)
    }

    pub fn absorb(&mut self, o: &Stats) {
        for (k, n) in &o.events {
            *self.events.entry(*k).or_default() += n;
        }
        self.cells_read += o.cells_read;
        self.cells_written += o.cells_written;
        self.vertices_read += o.vertices_read;
        self.vertices_written += o.vertices_written;
        self.cells_created += o.cells_created;
        self.cells_destroyed += o.cells_destroyed;
        self.vertices_created += o.vertices_created;
        self.vertices_destroyed += o.vertices_destroyed;
        self.payload_bytes += o.payload_bytes;
        self.max_hanging_creations = self.max_hanging_creations.max(o.max_hanging_creations);
        self.unrolled_regions.extend(&o.unrolled_regions);
        self.coloured_phases += o.coloured_phases;
        self.colour_conflicts += o.colour_conflicts;
        self.commands_applied += o.commands_applied;
        self.commands_deferred += o.commands_deferred;
        self.commands_ignored += o.commands_ignored;
        self.master_waits += o.master_waits;
        self.worker_waits += o.worker_waits;
    }
}

/// Input of one traversal.
pub(crate) trait Source {
    fn cell(&mut self, code: &CellCode) -> Result<CellRecord, TraversalError>;
    fn vertex(&mut self, key: &VertexKey) -> Result<VertexRecord, TraversalError>;
    fn finish(&self) -> Result<(), TraversalError>;
}

pub(crate) struct StreamSource<'a> {
    streams: &'a Streams,
    cell_at: usize,
    vertex_at: usize,
}

impl<'a> StreamSource<'a> {
    pub(crate) fn new(streams: &'a Streams) -> Self {
        StreamSource { streams, cell_at: streams.cells.len(), vertex_at: streams.vertices.len() }
    }
}

impl Source for StreamSource<'_> {
    fn cell(&mut self, code: &CellCode) -> Result<CellRecord, TraversalError> {
        if self.cell_at == 0 {
            return Err(TraversalError::Stream(format!("cell stream exhausted at {code}")));
        }
        self.cell_at -= 1;
        Ok(self.streams.cells[self.cell_at].clone())
    }

    fn vertex(&mut self, key: &VertexKey) -> Result<VertexRecord, TraversalError> {
        if self.vertex_at == 0 {
            return Err(TraversalError::Stream(format!("vertex stream exhausted at {key}")));
        }
        self.vertex_at -= 1;
        let r = &self.streams.vertices[self.vertex_at];
        if r.key != *key {
            return Err(TraversalError::Stream(format!("expected {key}, found {}", r.key)));
        }
        Ok(r.clone())
    }

    fn finish(&self) -> Result<(), TraversalError> {
        if self.cell_at != 0 || self.vertex_at != 0 {
            return Err(TraversalError::Stream(format!(
                "{} cells and {} vertices left unread",
                self.cell_at, self.vertex_at
            )));
        }
        Ok(())
    }
}

/// Records looked up by identity; missing ones get defaults.
pub(crate) struct MapSource<'a> {
    pub cells: &'a BTreeMap<CellCode, CellRecord>,
    pub vertices: &'a BTreeMap<VertexKey, VertexRecord>,
    pub layout: &'a Layout,
}

impl Source for MapSource<'_> {
    fn cell(&mut self, code: &CellCode) -> Result<CellRecord, TraversalError> {
        Ok(self.cells.get(code).cloned().unwrap_or_else(|| CellRecord {
            refined: false,
            change: false,
            marker: Marker::Bottom,
            data: self.layout.cell.default_record(),
        }))
    }

    fn vertex(&mut self, key: &VertexKey) -> Result<VertexRecord, TraversalError> {
        Ok(self
            .vertices
            .get(key)
            .cloned()
            .unwrap_or_else(|| VertexRecord { key: *key, refine: false, data: self.layout.vertex.default_record() }))
    }

    fn finish(&self) -> Result<(), TraversalError> {
        Ok(())
    }
}

/// Request to traverse a worker's subtrees.
pub(crate) struct WorkerCall {
    pub worker: usize,
    pub parent: CellCode,
    pub roots: Vec<(CellCode, Orientation)>,
    pub down: Option<Handover>,
    pub reduce: bool,
    pub send_time: u64,
}

pub(crate) struct WorkerReply {
    pub up: Option<Handover>,
    pub ready_time: u64,
}

/// Connects one rank's traversal to the rest of a simulated decomposition.
pub(crate) trait RankHook {
    fn rank(&self) -> usize;
    fn owner(&self, c: &CellCode) -> usize;
    /// Bit set of ranks owning a same-level cell adjacent to `v`.
    fn holders(&self, v: &VertexKey) -> u64;
    /// Replicas received for `v` during the previous traversal, ascending by sender.
    fn take_inbox(&mut self, v: &VertexKey) -> Vec<(usize, Vertex)>;
    fn post(&mut self, to: usize, v: Vertex);
    fn call_worker(&mut self, call: WorkerCall) -> Result<WorkerReply, TraversalError>;
}

pub(crate) struct Setup<'a> {
    pub ordering: &'a ChildOrdering,
    pub order: TraversalOrder,
    pub layout: &'a Layout,
    pub structure: &'a Structure,
    pub backward: bool,
    pub pending: &'a BTreeMap<CellCode, Command>,
    pub options: &'a TraversalOptions,
    pub roots: Vec<(CellCode, Orientation)>,
    pub coarse: Option<(Cell, Vec<Vertex>)>,
    pub clock: u64,
    /// Linearize only: no pending commands applied, remote subtrees skipped.
    pub rebuild: bool,
}

pub(crate) struct Outcome {
    pub streams: Streams,
    pub structure: Structure,
    pub carry: BTreeMap<CellCode, Command>,
    pub stats: Stats,
    pub coarse: Option<(Cell, Vec<Vertex>)>,
    pub clock: u64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn traverse(
    ordering: &ChildOrdering,
    order: TraversalOrder,
    layout: &Layout,
    structure: &Structure,
    streams: &Streams,
    pending: &BTreeMap<CellCode, Command>,
    adapter: &mut Adapter,
    state: &mut Record,
    options: &TraversalOptions,
    trace: Option<&mut Trace>,
) -> Result<Outcome, TraversalError> {
    let setup = Setup {
        ordering,
        order,
        layout,
        structure,
        backward: streams.backward,
        pending,
        options,
        roots: vec![(CellCode::root(structure.grid()), ordering.root_orientation())],
        coarse: None,
        clock: 0,
        rebuild: false,
    };
    run(setup, &mut StreamSource::new(streams), adapter, state, trace, None)
}

/// Streams for `structure` with the given payload, ready for a forward traversal.
pub(crate) fn rebuild(
    ordering: &ChildOrdering,
    order: TraversalOrder,
    layout: &Layout,
    structure: &Structure,
    cells: &BTreeMap<CellCode, CellRecord>,
    vertices: &BTreeMap<VertexKey, VertexRecord>,
    pending: &BTreeMap<CellCode, Command>,
) -> Result<Streams, TraversalError> {
    let roots = vec![(CellCode::root(structure.grid()), ordering.root_orientation())];
    rebuild_part(ordering, order, layout, structure, cells, vertices, pending, roots, None).map(|o| o.streams)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn rebuild_part(
    ordering: &ChildOrdering,
    order: TraversalOrder,
    layout: &Layout,
    structure: &Structure,
    cells: &BTreeMap<CellCode, CellRecord>,
    vertices: &BTreeMap<VertexKey, VertexRecord>,
    pending: &BTreeMap<CellCode, Command>,
    roots: Vec<(CellCode, Orientation)>,
    hook: Option<&mut dyn RankHook>,
) -> Result<Outcome, TraversalError> {
    let options = TraversalOptions::serial();
    let setup = Setup {
        ordering,
        order,
        layout,
        structure,
        backward: true,
        pending,
        options: &options,
        roots,
        coarse: None,
        clock: 0,
        rebuild: true,
    };
    let mut adapter = Adapter::empty();
    let mut state = layout.state.default_record();
    let mut source = MapSource { cells, vertices, layout };
    run(setup, &mut source, &mut adapter, &mut state, None, hook)
}

pub(crate) fn run<'a, 'h>(
    setup: Setup<'a>,
    source: &'a mut dyn Source,
    adapter: &'a mut Adapter,
    state: &'a mut Record,
    trace: Option<&'a mut Trace>,
    hook: Option<&'a mut (dyn RankHook + 'h)>,
) -> Result<Outcome, TraversalError> {
    if !adapter.layout().is_prefix_of(setup.layout) {
        return Err(TraversalError::Layout);
    }
    let multiscale = adapter.multiscale();
    if multiscale && setup.order != TraversalOrder::LevelWiseDepthFirst {
        return Err(TraversalError::Unsupported("descend/ascend require the level-wise traversal order".into()));
    }
    if hook.is_some() && !setup.rebuild && !setup.pending.is_empty() {
        return Err(TraversalError::Unsupported("refinement during a distributed traversal".into()));
    }
    let pool: Box<dyn TaskPool> =
        if setup.options.workers > 1 { Box::new(ThreadPool::new(setup.options.workers)) } else { Box::new(SerialPool) };
    let grid = setup.structure.grid();
    let rank = hook.as_ref().map_or(0, |h| h.rank());
    let mut virtual_keys: Vec<VertexKey> = Vec::new();
    for (r, _) in &setup.roots {
        for v in r.vertices() {
            if !virtual_keys.contains(&v) {
                virtual_keys.push(v);
            }
        }
    }
    virtual_keys.sort_by(|a, b| a.coords().iter().rev().cmp(b.coords().iter().rev()));
    let mut e = Engine {
        ordering: setup.ordering,
        order: setup.order,
        layout: setup.layout,
        grid,
        backward: setup.backward,
        old: setup.structure,
        cur: setup.structure.clone(),
        next: setup.structure.clone(),
        source,
        out_cells: Vec::new(),
        out_vertices: Vec::new(),
        adapter,
        state,
        options: setup.options,
        spec: ConcurrencySpec::uniform(setup.options.colouring),
        comm: CommunicationSpec::none(),
        multiscale,
        trace,
        hook,
        rank,
        rebuild: setup.rebuild,
        root_set: setup.roots.iter().map(|(c, _)| *c).collect(),
        roots: setup.roots,
        virtual_keys,
        coarse_root: setup.coarse,
        verts: HashMap::new(),
        blocks: HashMap::new(),
        retired: HashMap::new(),
        acquired: HashSet::new(),
        cells: HashMap::new(),
        seen: HashSet::new(),
        started: HashSet::new(),
        newly_refined: HashSet::new(),
        erased: HashSet::new(),
        vetoed: HashSet::new(),
        requested: BTreeMap::new(),
        carry_out: BTreeMap::new(),
        marker_out: HashMap::new(),
        recording: None,
        commands: Vec::new(),
        stats: Stats::default(),
        hanging_counts: HashMap::new(),
        clock: setup.clock,
        pool,
    };
    e.spec = e.adapter.concurrency().most_restrictive(ConcurrencySpec::uniform(setup.options.colouring));
    e.comm = e.adapter.communication();
    if setup.rebuild {
        e.carry_out = setup.pending.clone();
    } else {
        e.apply_pending(setup.pending);
    }
    e.sweep()?;
    e.source.finish()?;
    if !e.verts.is_empty() || !e.cells.is_empty() {
        return Err(TraversalError::Stream(format!(
            "{} vertices and {} cells still live after the sweep",
            e.verts.len(),
            e.cells.len()
        )));
    }
    e.stats.max_hanging_creations = e.hanging_counts.values().copied().max().unwrap_or(0);
    let mut carry = BTreeMap::new();
    for (c, cmd) in std::mem::take(&mut e.carry_out) {
        if e.valid_next(&c, cmd) {
            carry.insert(c, cmd);
        } else {
            e.stats.commands_ignored += 1;
        }
    }
    e.stats.commands_ignored += e.requested.len() as u64;
    Ok(Outcome {
        streams: Streams { cells: e.out_cells, vertices: e.out_vertices, backward: !e.backward },
        structure: e.next,
        carry,
        stats: e.stats,
        coarse: e.coarse_root,
        clock: e.clock,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Slot {
    P(VertexKey),
    /// Hanging vertices are separate instances per acquiring block.
    H(VertexKey, Option<CellCode>),
}

impl Slot {
    fn key(self) -> VertexKey {
        match self {
            Slot::P(k) | Slot::H(k, _) => k,
        }
    }
}

type BlockId = Option<CellCode>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Step {
    CreateVertex(Slot, BlockId),
    CreateHanging(Slot, BlockId),
    DestroyHanging(Slot, BlockId),
    DestroyVertex(Slot, BlockId),
    TouchFirst(Slot, BlockId),
    TouchLast(Slot, BlockId),
    MergeNeighbour(Slot),
    SendNeighbour(Slot),
    CreateCell(CellCode),
    DestroyCell(CellCode),
    Enter(CellCode),
    Leave(CellCode),
    Descend(CellCode),
    Ascend(CellCode),
    WriteVertex(Slot),
    DropVertex(Slot),
    WriteCell(CellCode),
    DropCell(CellCode),
}

impl Step {
    fn kind(self) -> Option<EventKind> {
        Some(match self {
            Step::CreateVertex(..) => EventKind::CreateVertex,
            Step::CreateHanging(..) => EventKind::CreateHangingVertex,
            Step::DestroyHanging(..) => EventKind::DestroyHangingVertex,
            Step::DestroyVertex(..) => EventKind::DestroyVertex,
            Step::TouchFirst(..) => EventKind::TouchVertexFirstTime,
            Step::TouchLast(..) => EventKind::TouchVertexLastTime,
            Step::CreateCell(_) => EventKind::CreateCell,
            Step::DestroyCell(_) => EventKind::DestroyCell,
            Step::Enter(_) => EventKind::EnterCell,
            Step::Leave(_) => EventKind::LeaveCell,
            Step::Descend(_) => EventKind::Descend,
            Step::Ascend(_) => EventKind::Ascend,
            _ => return None,
        })
    }

    fn vertex(self) -> Option<(Slot, BlockId)> {
        match self {
            Step::CreateVertex(s, b)
            | Step::CreateHanging(s, b)
            | Step::DestroyHanging(s, b)
            | Step::DestroyVertex(s, b)
            | Step::TouchFirst(s, b)
            | Step::TouchLast(s, b) => Some((s, b)),
            _ => None,
        }
    }

    fn cell(self) -> Option<CellCode> {
        match self {
            Step::CreateCell(c)
            | Step::DestroyCell(c)
            | Step::Enter(c)
            | Step::Leave(c)
            | Step::Descend(c)
            | Step::Ascend(c)
            | Step::WriteCell(c)
            | Step::DropCell(c) => Some(c),
            _ => None,
        }
    }

    fn level(self) -> usize {
        match (self.vertex(), self.cell()) {
            (Some((s, _)), _) => s.key().level(),
            (_, Some(c)) => c.level(),
            _ => 0,
        }
    }

    fn coords(self) -> Vec<u32> {
        match (self.vertex(), self.cell()) {
            (Some((s, _)), _) => s.key().coords().to_vec(),
            (_, Some(c)) => c.coords().to_vec(),
            _ => Vec::new(),
        }
    }

    fn structural(self) -> bool {
        matches!(self, Step::CreateVertex(..) | Step::DestroyVertex(..) | Step::CreateCell(_) | Step::DestroyCell(_))
    }
}

#[derive(Default)]
struct Block {
    members: Vec<(VertexKey, Slot)>,
    index: HashMap<VertexKey, Slot>,
}

struct Live {
    cell: Cell,
    marker_in: Marker,
}

/// Copies of everything one event touches.
#[derive(Clone)]
pub(crate) struct Frame {
    step: Step,
    vslots: Vec<Slot>,
    verts: Vec<Vertex>,
    /// Vertices of the cell itself; the rest belong to its children (descend/ascend).
    split: usize,
    cells: Vec<Cell>,
    coarse_at: Option<BlockId>,
    coarse_slots: Vec<Slot>,
    coarse: Option<(Cell, Vec<Vertex>)>,
}

pub(crate) fn exec_frame(adapter: &mut Adapter, ctx: &mut Ctx, f: &mut Frame) -> EventResult {
    match f.step {
        Step::CreateVertex(..) => adapter.create_vertex(ctx, &mut f.verts[0], &mut f.coarse),
        Step::CreateHanging(..) => adapter.create_hanging_vertex(ctx, &mut f.verts[0], &mut f.coarse),
        Step::DestroyHanging(..) => adapter.destroy_hanging_vertex(ctx, &mut f.verts[0], &mut f.coarse),
        Step::DestroyVertex(..) => adapter.destroy_vertex(ctx, &mut f.verts[0], &mut f.coarse),
        Step::TouchFirst(..) => adapter.touch_vertex_first_time(ctx, &mut f.verts[0], &mut f.coarse),
        Step::TouchLast(..) => adapter.touch_vertex_last_time(ctx, &mut f.verts[0], &mut f.coarse),
        Step::CreateCell(_) => adapter.create_cell(ctx, &mut f.cells[0], &mut f.verts, &mut f.coarse),
        Step::DestroyCell(_) => adapter.destroy_cell(ctx, &mut f.cells[0], &mut f.verts, &mut f.coarse),
        Step::Enter(_) => adapter.enter_cell(ctx, &mut f.cells[0], &mut f.verts, &mut f.coarse),
        Step::Leave(_) => adapter.leave_cell(ctx, &mut f.cells[0], &mut f.verts, &mut f.coarse),
        Step::Descend(_) | Step::Ascend(_) => {
            let (cell, children) = f.cells.split_first_mut().expect("descend frame holds the cell");
            let (vs, kvs) = f.verts.split_at_mut(f.split);
            if matches!(f.step, Step::Descend(_)) {
                adapter.descend(ctx, cell, vs, children, kvs)
            } else {
                adapter.ascend(ctx, cell, vs, children, kvs)
            }
        }
        _ => Ok(()),
    }
}

struct Engine<'a, 'h> {
    ordering: &'a ChildOrdering,
    order: TraversalOrder,
    layout: &'a Layout,
    grid: Grid,
    backward: bool,
    old: &'a Structure,
    /// Structure this sweep walks: old cells, new refinements and dying subtrees.
    cur: Structure,
    /// Structure the output streams describe.
    next: Structure,
    source: &'a mut dyn Source,
    out_cells: Vec<CellRecord>,
    out_vertices: Vec<VertexRecord>,
    adapter: &'a mut Adapter,
    state: &'a mut Record,
    options: &'a TraversalOptions,
    spec: ConcurrencySpec,
    comm: CommunicationSpec,
    multiscale: bool,
    trace: Option<&'a mut Trace>,
    hook: Option<&'a mut (dyn RankHook + 'h)>,
    rank: usize,
    rebuild: bool,
    roots: Vec<(CellCode, Orientation)>,
    root_set: HashSet<CellCode>,
    virtual_keys: Vec<VertexKey>,
    coarse_root: Option<(Cell, Vec<Vertex>)>,
    verts: HashMap<Slot, Vertex>,
    blocks: HashMap<BlockId, Block>,
    /// Blocks released while recording; replayed steps still resolve through them.
    retired: HashMap<BlockId, Block>,
    acquired: HashSet<BlockId>,
    cells: HashMap<CellCode, Live>,
    seen: HashSet<VertexKey>,
    started: HashSet<CellCode>,
    newly_refined: HashSet<CellCode>,
    erased: HashSet<CellCode>,
    vetoed: HashSet<CellCode>,
    requested: BTreeMap<CellCode, Command>,
    carry_out: BTreeMap<CellCode, Command>,
    marker_out: HashMap<CellCode, Marker>,
    recording: Option<Vec<Step>>,
    commands: Vec<(CellCode, Command)>,
    stats: Stats,
    hanging_counts: HashMap<VertexKey, u64>,
    clock: u64,
    pool: Box<dyn TaskPool>,
}

type PendingMerge = (usize, CellCode, bool, WorkerReply);

impl Engine<'_, '_> {
    fn apply_pending(&mut self, pending: &BTreeMap<CellCode, Command>) {
        for (c, cmd) in pending {
            match cmd {
                Command::Refine if self.next.exists(c) && !self.cur.is_refined(c) => {
                    self.cur.insert(*c);
                    self.next.insert(*c);
                    self.newly_refined.insert(*c);
                }
                Command::Erase if self.next.is_refined(c) && !self.newly_refined.contains(c) => {
                    self.next.erase_subtree(c);
                    self.erased.insert(*c);
                }
                _ => {
                    self.stats.commands_ignored += 1;
                    continue;
                }
            }
            self.stats.commands_applied += 1;
            let mut a = Some(*c);
            while let Some(x) = a {
                self.vetoed.insert(x);
                a = x.parent();
            }
        }
    }

    fn valid_next(&self, c: &CellCode, cmd: Command) -> bool {
        match cmd {
            Command::Refine => self.next.exists(c) && !self.next.is_refined(c),
            Command::Erase => self.next.is_refined(c),
        }
    }

    fn local(&self, c: &CellCode) -> bool {
        self.hook.as_ref().is_none_or(|h| h.owner(c) == self.rank)
    }

    fn held(&self, v: &VertexKey) -> bool {
        self.hook.as_ref().is_none_or(|h| (h.holders(v) >> self.rank) & 1 == 1)
    }

    fn sweep(&mut self) -> Result<(), TraversalError> {
        self.adapter.begin_iteration(self.state)?;
        self.note(EventKind::BeginIteration, TraceId::None, 0);
        self.acquire(None)?;
        let roots = self.roots.clone();
        match self.order {
            TraversalOrder::LevelWiseDepthFirst => {
                for (r, _) in &roots {
                    self.read_cell(*r)?;
                }
                for (r, _) in &roots {
                    self.exec(Step::Enter(*r))?;
                }
                for (r, o) in &roots {
                    self.process(*r, *o)?;
                }
                for (r, _) in &roots {
                    self.exec(Step::Leave(*r))?;
                }
                for (r, _) in &roots {
                    self.finish_cell(*r)?;
                }
            }
            _ => {
                for (r, o) in &roots {
                    self.read_cell(*r)?;
                    self.exec(Step::Enter(*r))?;
                    self.process(*r, *o)?;
                    self.exec(Step::Leave(*r))?;
                    self.finish_cell(*r)?;
                }
            }
        }
        self.release(None)?;
        self.adapter.end_iteration(self.state)?;
        self.note(EventKind::EndIteration, TraceId::None, 0);
        Ok(())
    }

    fn read_cell(&mut self, code: CellCode) -> Result<(), TraversalError> {
        let rec = self.source.cell(&code)?;
        if !self.rebuild && rec.refined != self.old.is_refined(&code) {
            return Err(TraversalError::Stream(format!("refinement bit of {code} disagrees with the tree")));
        }
        let mut data = rec.data;
        self.layout.cell.reset_discard(&mut data);
        self.stats.cells_read += 1;
        self.stats.payload_bytes += self.layout.cell.record_bytes() as u64;
        let cell = Cell { code, refined: self.cur.is_refined(&code), data };
        self.cells.insert(code, Live { cell, marker_in: rec.marker });
        Ok(())
    }

    fn new_cell(&mut self, code: CellCode) {
        let cell = Cell { code, refined: false, data: self.layout.cell.default_record() };
        self.cells.insert(code, Live { cell, marker_in: Marker::Bottom });
    }

    fn finish_cell(&mut self, code: CellCode) -> Result<(), TraversalError> {
        if self.next.exists(&code) {
            self.exec(Step::WriteCell(code))
        } else {
            self.exec(Step::DestroyCell(code))?;
            self.exec(Step::DropCell(code))
        }
    }

    fn process(&mut self, c: CellCode, o: Orientation) -> Result<(), TraversalError> {
        self.apply_requested(&c);
        self.started.insert(c);
        if !self.cur.is_refined(&c) {
            return Ok(());
        }
        if self.try_unroll(c, o)? {
            return Ok(());
        }
        self.process_refined(c, o)
    }

    fn process_refined(&mut self, c: CellCode, o: Orientation) -> Result<(), TraversalError> {
        match self.order {
            TraversalOrder::LevelWiseDepthFirst => self.process_lw(c, o),
            _ => self.process_dfs(c, o),
        }
    }

    fn process_dfs(&mut self, c: CellCode, o: Orientation) -> Result<(), TraversalError> {
        self.acquire(Some(c))?;
        let kids = kids(self.ordering, self.backward, &c, o);
        let new = self.newly_refined.contains(&c);
        if new {
            for (k, _) in &kids {
                if self.local(k) {
                    self.new_cell(*k);
                    self.exec(Step::CreateCell(*k))?;
                }
            }
        }
        let mut calls = Vec::new();
        for (k, ko) in &kids {
            if !self.local(k) {
                self.visit_remote(c, k, &kids, &mut calls)?;
                continue;
            }
            if !new {
                self.read_cell(*k)?;
            }
            self.exec(Step::Enter(*k))?;
            self.process(*k, *ko)?;
            self.exec(Step::Leave(*k))?;
            self.finish_cell(*k)?;
        }
        self.merge_workers(calls)?;
        self.release(Some(c))
    }

    fn process_lw(&mut self, c: CellCode, o: Orientation) -> Result<(), TraversalError> {
        let kids = kids(self.ordering, self.backward, &c, o);
        let local: Vec<(CellCode, Orientation)> = kids.iter().copied().filter(|(k, _)| self.local(k)).collect();
        let remote = local.len() < kids.len();
        let new = self.newly_refined.contains(&c);
        for (k, _) in &local {
            if new {
                self.new_cell(*k);
            } else {
                self.read_cell(*k)?;
            }
        }
        self.acquire(Some(c))?;
        if new {
            for (k, _) in &local {
                self.exec(Step::CreateCell(*k))?;
            }
        }
        let multiscale = self.multiscale && !remote;
        if multiscale {
            self.exec(Step::Descend(c))?;
        }
        for (k, _) in &local {
            self.exec(Step::Enter(*k))?;
        }
        let mut calls = Vec::new();
        for (k, ko) in &kids {
            if self.local(k) {
                self.process(*k, *ko)?;
            } else if !self.rebuild {
                self.visit_remote(c, k, &kids, &mut calls)?;
            }
        }
        for (k, _) in &local {
            self.exec(Step::Leave(*k))?;
        }
        self.merge_workers(calls)?;
        if multiscale {
            self.exec(Step::Ascend(c))?;
        }
        for (k, _) in &local {
            self.finish_cell(*k)?;
        }
        self.release(Some(c))
    }

    fn apply_requested(&mut self, c: &CellCode) {
        let Some(cmd) = self.requested.remove(c) else {
            return;
        };
        let touched = |e: &Self, d: &CellCode| Structure::child_grid(d).iter().any(|v| e.seen.contains(v));
        match cmd {
            Command::Refine => {
                if !self.next.exists(c) || self.cur.is_refined(c) {
                    self.stats.commands_ignored += 1;
                } else if touched(self, c) {
                    self.defer(*c, cmd);
                } else {
                    self.cur.insert(*c);
                    self.next.insert(*c);
                    self.newly_refined.insert(*c);
                    if let Some(l) = self.cells.get_mut(c) {
                        l.cell.refined = true;
                    }
                    self.stats.commands_applied += 1;
                }
            }
            Command::Erase => {
                if !self.next.is_refined(c) || self.newly_refined.contains(c) {
                    self.stats.commands_ignored += 1;
                    return;
                }
                let affected: Vec<CellCode> =
                    self.cur.refined().iter().filter(|d| c.is_ancestor_or_self_of(d)).copied().collect();
                if affected.iter().any(|d| touched(self, d)) {
                    self.defer(*c, cmd);
                } else {
                    self.next.erase_subtree(c);
                    self.erased.insert(*c);
                    self.stats.commands_applied += 1;
                }
            }
        }
    }

    fn defer(&mut self, c: CellCode, cmd: Command) {
        self.carry_out.insert(c, cmd);
        self.stats.commands_deferred += 1;
    }

    fn drain_commands(&mut self) -> Result<(), TraversalError> {
        if self.commands.is_empty() {
            return Ok(());
        }
        if self.hook.is_some() {
            return Err(TraversalError::Unsupported("refinement during a distributed traversal".into()));
        }
        for (c, cmd) in std::mem::take(&mut self.commands) {
            if self.started.contains(&c) {
                self.defer(c, cmd);
            } else {
                self.requested.insert(c, cmd);
            }
        }
        Ok(())
    }

    fn block_keys(&self, b: BlockId) -> Vec<VertexKey> {
        let keys = match b {
            None => self.virtual_keys.clone(),
            Some(c) => Structure::child_grid(&c),
        };
        keys.into_iter().filter(|v| self.held(v)).collect()
    }

    fn acquire(&mut self, b: BlockId) -> Result<(), TraversalError> {
        let mut block = Block::default();
        for v in self.block_keys(b) {
            self.seen.insert(v);
            let slot = if self.cur.is_hanging(&v) {
                let slot = Slot::H(v, b);
                let vertex = Vertex {
                    key: v,
                    hanging: true,
                    refine: false,
                    remote_ranks: 0,
                    data: self.layout.vertex.default_record(),
                };
                self.verts.insert(slot, vertex);
                *self.hanging_counts.entry(v).or_default() += 1;
                self.exec(Step::CreateHanging(slot, b))?;
                slot
            } else {
                let slot = Slot::P(v);
                if !self.verts.contains_key(&slot) {
                    let read = self.old.classify(&v) == VertexClass::Persistent;
                    let (refine, data) = if read {
                        let rec = self.source.vertex(&v)?;
                        let mut data = rec.data;
                        self.layout.vertex.reset_discard(&mut data);
                        self.stats.vertices_read += 1;
                        self.stats.payload_bytes += self.layout.vertex.record_bytes() as u64;
                        (rec.refine, data)
                    } else {
                        (false, self.layout.vertex.default_record())
                    };
                    let remote_ranks = self.hook.as_ref().map_or(0, |h| h.holders(&v) & !(1u64 << self.rank));
                    self.verts.insert(slot, Vertex { key: v, hanging: false, refine, remote_ranks, data });
                    if !read {
                        self.stats.vertices_created += 1;
                        self.exec(Step::CreateVertex(slot, b))?;
                    }
                    if self.hook.is_some() && !self.rebuild {
                        self.exec(Step::MergeNeighbour(slot))?;
                    }
                    self.exec(Step::TouchFirst(slot, b))?;
                }
                slot
            };
            block.index.insert(v, slot);
            block.members.push((v, slot));
        }
        self.blocks.insert(b, block);
        self.acquired.insert(b);
        Ok(())
    }

    /// True once every block of this rank containing `v` has been released.
    fn last_release(&self, v: &VertexKey) -> bool {
        let mut candidates: Vec<BlockId> =
            self.cur.block_parents(v).into_iter().filter(|p| self.local(p)).map(Some).collect();
        if self.virtual_keys.contains(v) {
            candidates.push(None);
        }
        candidates.iter().all(|b| self.acquired.contains(b) && !self.blocks.contains_key(b))
    }

    fn release(&mut self, b: BlockId) -> Result<(), TraversalError> {
        let block = self.blocks.remove(&b).expect("released block was acquired");
        let members = block.members.clone();
        if self.recording.is_some() {
            self.retired.insert(b, block);
        }
        for &(v, slot) in members.iter().rev() {
            match slot {
                Slot::H(..) => {
                    self.exec(Step::DestroyHanging(slot, b))?;
                    self.exec(Step::DropVertex(slot))?;
                }
                Slot::P(_) => {
                    if !self.last_release(&v) {
                        continue;
                    }
                    self.exec(Step::TouchLast(slot, b))?;
                    if self.hook.is_some() && !self.rebuild {
                        self.exec(Step::SendNeighbour(slot))?;
                    }
                    if self.next.classify(&v) == VertexClass::Persistent {
                        self.exec(Step::WriteVertex(slot))?;
                    } else {
                        self.stats.vertices_destroyed += 1;
                        self.exec(Step::DestroyVertex(slot, b))?;
                        self.exec(Step::DropVertex(slot))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn visit_remote(
        &mut self,
        parent: CellCode,
        k: &CellCode,
        kids: &[(CellCode, Orientation)],
        calls: &mut Vec<PendingMerge>,
    ) -> Result<(), TraversalError> {
        if self.rebuild {
            return Ok(());
        }
        let hook = self.hook.as_ref().expect("remote cells only exist in rank mode");
        let w = hook.owner(k);
        if calls.iter().any(|(x, ..)| *x == w) {
            return Ok(());
        }
        let roots: Vec<(CellCode, Orientation)> = kids.iter().copied().filter(|(c, _)| hook.owner(c) == w).collect();
        let slots = self.cell_vertex_slots(&parent);
        let mut vs: Vec<Vertex> = slots.iter().map(|s| self.verts[s].clone()).collect();
        let ok = self.adapter.prepare_send_to_worker(self.state, &mut vs, w)?;
        self.note(EventKind::PrepareSendToWorker, TraceId::Cell(parent), parent.level());
        for (s, v) in slots.iter().zip(&vs) {
            self.verts.insert(*s, v.clone());
        }
        let reduce = self.comm.reduction_required && ok;
        let down = (ok && self.comm.needs_down()).then(|| Handover {
            state: if self.comm.down_state { self.state.clone() } else { self.layout.state.default_record() },
            cells: if self.comm.down_vertices { vec![self.cells[&parent].cell.clone()] } else { Vec::new() },
            vertices: if self.comm.down_vertices { vs.clone() } else { Vec::new() },
        });
        let call = WorkerCall { worker: w, parent, roots, down, reduce, send_time: self.clock };
        let reply = self.hook.as_mut().expect("rank mode").call_worker(call)?;
        calls.push((w, parent, reduce, reply));
        Ok(())
    }

    fn merge_workers(&mut self, calls: Vec<PendingMerge>) -> Result<(), TraversalError> {
        for (w, parent, reduce, reply) in calls {
            if !reduce {
                continue;
            }
            if reply.ready_time > self.clock {
                self.stats.master_waits += 1;
                self.clock = reply.ready_time;
            }
            let up = reply.up.unwrap_or_default();
            let slots = self.cell_vertex_slots(&parent);
            let mut vs: Vec<Vertex> = slots.iter().map(|s| self.verts[s].clone()).collect();
            self.adapter.merge_with_master(self.state, &mut vs, &up, w)?;
            self.note(EventKind::MergeWithMaster, TraceId::Cell(parent), parent.level());
            for (s, v) in slots.iter().zip(vs) {
                self.verts.insert(*s, v);
            }
        }
        Ok(())
    }

    fn try_unroll(&mut self, c: CellCode, o: Orientation) -> Result<bool, TraversalError> {
        let Some(min) = self.options.unroll_min_f else {
            return Ok(false);
        };
        if self.hook.is_some() || self.rebuild || self.recording.is_some() {
            return Ok(false);
        }
        let f = match self.cells.get(&c).map(|l| l.marker_in) {
            Some(Marker::Height(f)) if f >= min.max(1) => f,
            _ => return Ok(false),
        };
        if self.vetoed.contains(&c) || self.newly_refined.contains(&c) {
            return Ok(false);
        }
        if self.requested.keys().any(|t| c.is_ancestor_or_self_of(t)) {
            return Ok(false);
        }
        let before = self.stats.cells_read;
        self.recording = Some(Vec::new());
        let r = self.process_refined(c, o);
        let steps = self.recording.take().unwrap_or_default();
        r?;
        self.stats.unrolled_regions.push(self.stats.cells_read - before);
        let r = self.replay(c, f, steps);
        self.retired.clear();
        r.map(|_| true)
    }

    fn is_full(&self, c: &CellCode, f: u8) -> bool {
        if f == 0 {
            return !self.cur.is_refined(c);
        }
        self.cur.is_refined(c) && (0..self.grid.children()).all(|i| self.is_full(&c.child(i), f - 1))
    }

    /// Runs a recorded region level by level: creation and first touches top
    /// down, then the symmetric backtracking, then the stream writes in their
    /// recorded order.
    fn replay(&mut self, c: CellCode, f: u8, steps: Vec<Step>) -> Result<(), TraversalError> {
        if steps.iter().any(|s| s.structural()) || !self.is_full(&c, f) {
            for s in steps {
                self.run_step(s)?;
            }
            return Ok(());
        }
        let base = c.level();
        let (events, books): (Vec<Step>, Vec<Step>) = steps.into_iter().partition(|s| s.kind().is_some());
        let pick = |pred: &dyn Fn(&Step) -> bool| -> Vec<Step> { events.iter().copied().filter(|s| pred(s)).collect() };
        let spec = self.spec;
        let mut phases: Vec<(Vec<Step>, Policy, bool)> = Vec::new();
        for j in 1..=f as usize {
            let l = base + j;
            phases.push((pick(&|s| matches!(s, Step::CreateHanging(..)) && s.level() == l), spec.hanging, false));
            phases.push((pick(&|s| matches!(s, Step::TouchFirst(..)) && s.level() == l), spec.touch_first, false));
            phases.push((pick(&|s| matches!(s, Step::Descend(_)) && s.level() == l - 1), spec.multiscale, false));
            phases.push((pick(&|s| matches!(s, Step::Enter(_)) && s.level() == l), spec.enter_cell, true));
        }
        for j in (1..=f as usize).rev() {
            let l = base + j;
            phases.push((pick(&|s| matches!(s, Step::Leave(_)) && s.level() == l), spec.leave_cell, true));
            phases.push((pick(&|s| matches!(s, Step::Ascend(_)) && s.level() == l - 1), spec.multiscale, false));
            phases.push((pick(&|s| matches!(s, Step::TouchLast(..)) && s.level() == l), spec.touch_last, false));
            phases.push((pick(&|s| matches!(s, Step::DestroyHanging(..)) && s.level() == l), spec.hanging, false));
        }
        let placed: usize = phases.iter().map(|(p, ..)| p.len()).sum();
        if placed != events.len() {
            for s in events.into_iter().chain(books) {
                self.run_step(s)?;
            }
            return Ok(());
        }
        for (steps, policy, cells) in phases {
            self.run_phase(steps, policy, cells)?;
        }
        for s in books {
            self.run_step(s)?;
        }
        Ok(())
    }

    fn run_phase(&mut self, steps: Vec<Step>, policy: Policy, cell_phase: bool) -> Result<(), TraversalError> {
        if steps.is_empty() {
            return Ok(());
        }
        let classes: Vec<Vec<Step>> = match policy {
            Policy::Serial => steps.into_iter().map(|s| vec![s]).collect(),
            Policy::Coloured(kc) => {
                self.stats.coloured_phases += 1;
                regular::colour_classes(steps, kc, |s| s.coords())
            }
            Policy::Concurrent => vec![steps],
        };
        for class in classes {
            if cell_phase && matches!(policy, Policy::Coloured(_)) {
                let cells: Vec<CellCode> = class.iter().filter_map(|s| s.cell()).collect();
                self.stats.colour_conflicts += regular::shared_vertex_pairs(&cells);
            }
            self.run_class(class)?;
        }
        Ok(())
    }

    fn run_class(&mut self, class: Vec<Step>) -> Result<(), TraversalError> {
        let workers = self.pool.workers();
        if class.len() < 2 || workers < 2 {
            for s in class {
                self.run_step(s)?;
            }
            return Ok(());
        }
        let Some(first) = self.adapter.replicate() else {
            for s in class {
                self.run_step(s)?;
            }
            return Ok(());
        };
        let frames: Vec<Frame> = class.iter().map(|s| self.gather(*s)).collect();
        let originals = frames.clone();
        let chunk = frames.len().div_ceil(workers);
        let mut jobs: Vec<Job> = Vec::new();
        let mut it = frames.into_iter().peekable();
        let mut first = Some(first);
        while it.peek().is_some() {
            let replica = match first.take() {
                Some(r) => r,
                None => self.adapter.replicate().expect("replication succeeded once"),
            };
            jobs.push(Job { replica, frames: it.by_ref().take(chunk).collect(), commands: Vec::new(), result: Ok(()) });
        }
        {
            let state: &Record = self.state;
            let grid = self.grid;
            let rank = self.rank;
            let tasks: Vec<Box<dyn FnOnce() + Send + '_>> = jobs
                .iter_mut()
                .map(|job| {
                    Box::new(move || {
                        for fr in job.frames.iter_mut() {
                            let mut ctx = Ctx::new(state, rank, grid, &mut job.commands);
                            if let Err(e) = exec_frame(&mut job.replica, &mut ctx, fr) {
                                job.result = Err(e);
                                return;
                            }
                        }
                    }) as Box<dyn FnOnce() + Send + '_>
                })
                .collect();
            self.pool.run_all(tasks);
        }
        let mut originals = originals.into_iter();
        for job in jobs {
            job.result?;
            self.adapter.merge_replica(job.replica);
            self.commands.extend(job.commands);
            for fr in job.frames {
                let orig = originals.next().expect("one original per frame");
                self.scatter_diff(&orig, fr);
            }
        }
        for s in class {
            self.after(s);
        }
        self.drain_commands()
    }

    fn exec(&mut self, step: Step) -> Result<(), TraversalError> {
        match self.recording.as_mut() {
            Some(rec) => {
                rec.push(step);
                Ok(())
            }
            None => self.run_step(step),
        }
    }

    fn run_step(&mut self, step: Step) -> Result<(), TraversalError> {
        match step {
            Step::WriteVertex(slot) => {
                let v = self.verts.remove(&slot).expect("written vertex is live");
                self.out_vertices.push(VertexRecord { key: v.key, refine: v.refine, data: v.data });
                self.stats.vertices_written += 1;
                self.stats.payload_bytes += self.layout.vertex.record_bytes() as u64;
                return Ok(());
            }
            Step::DropVertex(slot) => {
                self.verts.remove(&slot);
                return Ok(());
            }
            Step::WriteCell(c) => {
                self.write_cell(c);
                return Ok(());
            }
            Step::DropCell(c) => {
                self.cells.remove(&c);
                self.stats.cells_destroyed += 1;
                return Ok(());
            }
            Step::MergeNeighbour(slot) => return self.merge_neighbour(slot),
            Step::SendNeighbour(slot) => return self.send_neighbour(slot),
            _ => {}
        }
        if matches!(step, Step::CreateCell(_)) {
            self.stats.cells_created += 1;
        }
        let mut frame = self.gather(step);
        {
            let mut ctx = Ctx::new(self.state, self.rank, self.grid, &mut self.commands);
            exec_frame(self.adapter, &mut ctx, &mut frame)?;
        }
        self.scatter(frame);
        self.after(step);
        self.drain_commands()
    }

    /// Or-based refinement flags, then bookkeeping of the event itself.
    fn after(&mut self, step: Step) {
        match step {
            Step::Enter(a) if !self.cur.is_refined(&a) => {
                let flagged = self.cell_vertex_slots(&a).iter().any(|s| self.verts[s].refine);
                if flagged {
                    self.commands.push((a, Command::Refine));
                }
            }
            Step::TouchLast(slot, _) if self.verts[&slot].refine => {
                for c in slot.key().adjacent_cells().into_iter().flatten() {
                    if self.next.exists(&c) && !self.next.is_refined(&c) {
                        self.commands.push((c, Command::Refine));
                    }
                }
            }
            _ => {}
        }
        if let Some(kind) = step.kind() {
            let id = match (step.vertex(), step.cell()) {
                (Some((s, _)), _) => TraceId::Vertex(s.key()),
                (_, Some(c)) => TraceId::Cell(c),
                _ => TraceId::None,
            };
            self.note(kind, id, step.level());
        }
    }

    fn note(&mut self, kind: EventKind, id: TraceId, level: usize) {
        *self.stats.events.entry(kind).or_default() += 1;
        self.clock += 1;
        if let Some(t) = self.trace.as_mut() {
            t.push(kind, level, id);
        }
    }

    fn merge_neighbour(&mut self, slot: Slot) -> Result<(), TraversalError> {
        let msgs = self.hook.as_mut().expect("rank mode").take_inbox(&slot.key());
        let mut v = self.verts.remove(&slot).expect("merged vertex is live");
        let mut result = Ok(());
        for (from, replica) in &msgs {
            let mut ctx = Ctx::new(self.state, self.rank, self.grid, &mut self.commands);
            result = self.adapter.merge_with_neighbour(&mut ctx, &mut v, replica, *from);
            if result.is_err() {
                break;
            }
        }
        self.verts.insert(slot, v);
        result?;
        for _ in &msgs {
            self.note(EventKind::MergeWithNeighbour, TraceId::Vertex(slot.key()), slot.key().level());
        }
        self.drain_commands()
    }

    fn send_neighbour(&mut self, slot: Slot) -> Result<(), TraversalError> {
        let v = self.verts[&slot].clone();
        for to in v.neighbour_ranks() {
            let mut copy = v.clone();
            {
                let mut ctx = Ctx::new(self.state, self.rank, self.grid, &mut self.commands);
                self.adapter.prepare_send_to_neighbour(&mut ctx, &mut copy, to)?;
            }
            copy.data = self.layout.vertex.exchange_copy(&copy.data);
            self.hook.as_mut().expect("rank mode").post(to, copy);
            self.note(EventKind::PrepareSendToNeighbour, TraceId::Vertex(v.key), v.key.level());
        }
        self.drain_commands()
    }

    fn write_cell(&mut self, c: CellCode) {
        let live = self.cells.remove(&c).expect("written cell is live");
        let refined = self.next.is_refined(&c);
        let change = self.carry_out.get(&c).is_some_and(|cmd| self.valid_next(&c, *cmd));
        let marker = if change || self.newly_refined.contains(&c) || self.erased.contains(&c) {
            Marker::Bottom
        } else if !refined {
            self.leaf_marker(&c)
        } else {
            let mut h = None;
            let mut regular = true;
            for i in 0..self.grid.children() {
                match self.marker_out.remove(&c.child(i)) {
                    Some(Marker::Height(x)) if h.is_none() || h == Some(x) => h = Some(x),
                    _ => regular = false,
                }
            }
            match h {
                Some(x) if regular && x < 254 => Marker::Height(x + 1),
                _ => Marker::Bottom,
            }
        };
        self.marker_out.insert(c, marker);
        self.out_cells.push(CellRecord { refined, change, marker, data: live.cell.data });
        self.stats.cells_written += 1;
        self.stats.payload_bytes += self.layout.cell.record_bytes() as u64;
    }

    /// 0 unless a hanging vertex of the next grid sits strictly inside the parent.
    fn leaf_marker(&self, c: &CellCode) -> Marker {
        let Some(p) = c.parent() else {
            return Marker::Height(0);
        };
        let k = self.grid.k();
        let inside = |v: &VertexKey| {
            v.coords().iter().zip(p.coords()).all(|(&x, &pc)| x > pc * k && x < pc * k + k)
        };
        if c.vertices().any(|v| inside(&v) && self.next.is_hanging(&v)) {
            Marker::Bottom
        } else {
            Marker::Height(0)
        }
    }

    fn cell_block(&self, c: &CellCode) -> BlockId {
        if self.root_set.contains(c) {
            None
        } else {
            c.parent()
        }
    }

    fn cell_vertex_slots(&self, c: &CellCode) -> Vec<Slot> {
        let b = self.cell_block(c);
        let block = self.blocks.get(&b).or_else(|| self.retired.get(&b)).expect("cell block is live");
        c.vertices().map(|v| block.index[&v]).collect()
    }

    fn coarse_for(&self, b: BlockId) -> (Vec<Slot>, Option<(Cell, Vec<Vertex>)>) {
        match b {
            None => (Vec::new(), self.coarse_root.clone()),
            Some(p) => {
                let slots = self.cell_vertex_slots(&p);
                let vs = slots.iter().map(|s| self.verts[s].clone()).collect();
                (slots, Some((self.cells[&p].cell.clone(), vs)))
            }
        }
    }

    fn gather(&self, step: Step) -> Frame {
        if let Some((slot, b)) = step.vertex() {
            let (coarse_slots, coarse) = self.coarse_for(b);
            return Frame {
                step,
                vslots: vec![slot],
                verts: vec![self.verts[&slot].clone()],
                split: 1,
                cells: Vec::new(),
                coarse_at: Some(b),
                coarse_slots,
                coarse,
            };
        }
        let c = step.cell().expect("event steps name a vertex or a cell");
        let mut vslots = self.cell_vertex_slots(&c);
        let split = vslots.len();
        let mut cells = vec![self.cells[&c].cell.clone()];
        if matches!(step, Step::Descend(_) | Step::Ascend(_)) {
            let block = self.blocks.get(&Some(c)).or_else(|| self.retired.get(&Some(c))).expect("child block is live");
            vslots.extend(block.members.iter().map(|(_, s)| *s));
            cells.extend((0..self.grid.children()).map(|i| self.cells[&c.child(i)].cell.clone()));
            let verts = vslots.iter().map(|s| self.verts[s].clone()).collect();
            return Frame { step, vslots, verts, split, cells, coarse_at: None, coarse_slots: Vec::new(), coarse: None };
        }
        let b = self.cell_block(&c);
        let (coarse_slots, coarse) = self.coarse_for(b);
        let verts = vslots.iter().map(|s| self.verts[s].clone()).collect();
        Frame { step, vslots, verts, split, cells, coarse_at: Some(b), coarse_slots, coarse }
    }

    fn scatter(&mut self, f: Frame) {
        for (s, v) in f.vslots.into_iter().zip(f.verts) {
            self.verts.insert(s, v);
        }
        for c in f.cells {
            if let Some(l) = self.cells.get_mut(&c.code) {
                l.cell = c;
            }
        }
        match f.coarse_at {
            Some(None) => self.coarse_root = f.coarse,
            Some(Some(p)) => {
                if let Some((cell, vs)) = f.coarse {
                    if let Some(l) = self.cells.get_mut(&p) {
                        l.cell = cell;
                    }
                    for (s, v) in f.coarse_slots.into_iter().zip(vs) {
                        self.verts.insert(s, v);
                    }
                }
            }
            None => {}
        }
    }

    /// Write-back of a concurrently executed frame: fields changed by the
    /// event are applied as differences, so several writers to one record
    /// accumulate in canonical order.
    fn scatter_diff(&mut self, orig: &Frame, f: Frame) {
        let vs = &self.layout.vertex;
        let cs = &self.layout.cell;
        for ((s, o), n) in f.vslots.iter().zip(&orig.verts).zip(&f.verts) {
            if let Some(v) = self.verts.get_mut(s) {
                merge_vertex(vs, v, o, n);
            }
        }
        for (o, n) in orig.cells.iter().zip(&f.cells) {
            if let Some(l) = self.cells.get_mut(&n.code) {
                merge_record(cs, &mut l.cell.data, &o.data, &n.data);
            }
        }
        match (f.coarse_at, &orig.coarse, &f.coarse) {
            (Some(None), Some((oc, ov)), Some((nc, nv))) => {
                if let Some((cell, vertices)) = self.coarse_root.as_mut() {
                    merge_record(cs, &mut cell.data, &oc.data, &nc.data);
                    for ((v, o), n) in vertices.iter_mut().zip(ov).zip(nv) {
                        merge_vertex(vs, v, o, n);
                    }
                }
            }
            (Some(Some(p)), Some((oc, ov)), Some((nc, nv))) => {
                if let Some(l) = self.cells.get_mut(&p) {
                    merge_record(cs, &mut l.cell.data, &oc.data, &nc.data);
                }
                for ((s, o), n) in f.coarse_slots.iter().zip(ov).zip(nv) {
                    if let Some(v) = self.verts.get_mut(s) {
                        merge_vertex(vs, v, o, n);
                    }
                }
            }
            _ => {}
        }
    }
}

struct Job {
    replica: Adapter,
    frames: Vec<Frame>,
    commands: Vec<(CellCode, Command)>,
    result: Result<(), MappingError>,
}

fn merge_vertex(schema: &Schema, store: &mut Vertex, orig: &Vertex, new: &Vertex) {
    merge_record(schema, &mut store.data, &orig.data, &new.data);
    if new.refine != orig.refine {
        store.refine = new.refine;
    }
}

pub(crate) fn merge_record(schema: &Schema, store: &mut Record, orig: &Record, new: &Record) {
    if orig == new {
        return;
    }
    let mut bits = store.bits().to_vec();
    for (i, spec) in schema.fields().iter().enumerate() {
        let (o, n) = (orig.bits()[i], new.bits()[i]);
        if o == n {
            continue;
        }
        if bits[i] == o {
            bits[i] = n;
            continue;
        }
        bits[i] = match spec.ty {
            FieldType::I64 => bits[i].wrapping_add(n.wrapping_sub(o)),
            FieldType::F64 => (f64::from_bits(bits[i]) + (f64::from_bits(n) - f64::from_bits(o))).to_bits(),
        };
    }
    *store = Record::from_bits(bits);
}
