//! The event vocabulary seen by solver code, adapters composing several
//! mappings, and the concurrency/communication declarations they carry.

use std::any::Any;
use std::fmt;

use thiserror::Error;

use crate::sfc::{CellCode, Grid, VertexKey};
use crate::storage::{HasRecord, Layout, Record, StorageError};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{message}")]
pub struct MappingError {
    pub message: String,
}

impl MappingError {
    pub fn new(message: impl Into<String>) -> Self {
        MappingError { message: message.into() }
    }
}

impl From<StorageError> for MappingError {
    fn from(e: StorageError) -> Self {
        MappingError::new(e.to_string())
    }
}

impl From<std::io::Error> for MappingError {
    fn from(e: std::io::Error) -> Self {
        MappingError::new(e.to_string())
    }
}

pub type EventResult = Result<(), MappingError>;

/// A vertex as handed to an event.
#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub key: VertexKey,
    pub hanging: bool,
    /// Or-based refinement request for all adjacent leaves.
    pub refine: bool,
    /// Bit `r` set if rank `r` holds a replica of this vertex as well.
    pub remote_ranks: u64,
    pub data: Record,
}

impl Vertex {
    pub fn on_domain_boundary(&self) -> bool {
        self.key.on_domain_boundary()
    }

    pub fn level(&self) -> usize {
        self.key.level()
    }

    pub fn position(&self) -> Vec<f64> {
        self.key.position()
    }

    pub fn neighbour_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(move |r| (self.remote_ranks >> r) & 1 == 1)
    }
}

impl HasRecord for Vertex {
    fn record(&self) -> &Record {
        &self.data
    }

    fn record_mut(&mut self) -> &mut Record {
        &mut self.data
    }
}

/// A cell as handed to an event.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub code: CellCode,
    pub refined: bool,
    pub data: Record,
}

impl Cell {
    pub fn level(&self) -> usize {
        self.code.level()
    }

    pub fn corner(&self) -> Vec<f64> {
        self.code.corner()
    }

    pub fn extent(&self) -> f64 {
        self.code.extent()
    }
}

impl HasRecord for Cell {
    fn record(&self) -> &Record {
        &self.data
    }

    fn record_mut(&mut self) -> &mut Record {
        &mut self.data
    }
}

/// Parent cell and its vertices, available to every event below the root.
pub struct Coarse<'a> {
    pub cell: &'a mut Cell,
    pub vertices: &'a mut [Vertex],
}

impl Coarse<'_> {
    /// Position of `fine` (a child cell or one of its vertices) relative to the
    /// coarse cell, in units of the fine mesh width per axis.
    pub fn local_offset(&self, fine: &[u32]) -> Vec<u32> {
        let k = self.cell.code.grid().k();
        fine.iter().zip(self.cell.code.coords()).map(|(&f, &c)| f - c * k).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    Refine,
    Erase,
}

/// Per-event context: read-only global state plus the refinement command sink.
pub struct Ctx<'a> {
    pub state: &'a Record,
    pub rank: usize,
    grid: Grid,
    commands: &'a mut Vec<(CellCode, Command)>,
}

impl<'a> Ctx<'a> {
    pub(crate) fn new(state: &'a Record, rank: usize, grid: Grid, commands: &'a mut Vec<(CellCode, Command)>) -> Self {
        Ctx { state, rank, grid, commands }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn refine(&mut self, cell: CellCode) {
        self.commands.push((cell, Command::Refine));
    }

    pub fn erase(&mut self, cell: CellCode) {
        self.commands.push((cell, Command::Erase));
    }
}

pub enum EntityMut<'a> {
    Vertex(&'a mut Vertex),
    Cell(&'a mut Cell),
}

pub enum EntityRef<'a> {
    Vertex(&'a Vertex),
    Cell(&'a Cell),
}

/// Vertical message between master and worker: global state, the parent cell
/// of the worker's subtree roots and its vertices (lexicographic order). The
/// worker keeps its own copy of that parent between traversals.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Handover {
    pub state: Record,
    pub cells: Vec<Cell>,
    pub vertices: Vec<Vertex>,
}

/// Object-safe downcasting for replica merging.
pub trait AsAny: Any {
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
    fn into_any(self: Box<Self>) -> Box<dyn Any>;
}

impl<T: Any> AsAny for T {
    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }

    fn into_any(self: Box<Self>) -> Box<dyn Any> {
        self
    }
}

/// User callbacks fired by the traversal. Every callback defaults to a no-op.
#[allow(unused_variables)]
pub trait EventMapping: AsAny + Send {
    /// Declares payload fields; called once when the adapter is composed.
    fn register(&mut self, layout: &mut Layout) -> Result<(), StorageError> {
        Ok(())
    }

    fn concurrency(&self) -> ConcurrencySpec {
        ConcurrencySpec::serial()
    }

    fn communication(&self) -> CommunicationSpec {
        CommunicationSpec::none()
    }

    /// Whether descend/ascend are required.
    fn multiscale(&self) -> bool {
        false
    }

    fn begin_iteration(&mut self, state: &mut Record) -> EventResult {
        Ok(())
    }

    fn end_iteration(&mut self, state: &mut Record) -> EventResult {
        Ok(())
    }

    fn create_vertex(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn create_hanging_vertex(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn destroy_hanging_vertex(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn destroy_vertex(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn create_cell(&mut self, ctx: &mut Ctx, cell: &mut Cell, vertices: &mut [Vertex], coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn destroy_cell(&mut self, ctx: &mut Ctx, cell: &mut Cell, vertices: &mut [Vertex], coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn touch_vertex_first_time(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn touch_vertex_last_time(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn enter_cell(&mut self, ctx: &mut Ctx, cell: &mut Cell, vertices: &mut [Vertex], coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    fn leave_cell(&mut self, ctx: &mut Ctx, cell: &mut Cell, vertices: &mut [Vertex], coarse: Option<Coarse>) -> EventResult {
        Ok(())
    }

    /// Refined cell, its vertices, all k^d children and their (k+1)^d vertices.
    fn descend(
        &mut self,
        ctx: &mut Ctx,
        cell: &mut Cell,
        vertices: &mut [Vertex],
        children: &mut [Cell],
        child_vertices: &mut [Vertex],
    ) -> EventResult {
        Ok(())
    }

    fn ascend(
        &mut self,
        ctx: &mut Ctx,
        cell: &mut Cell,
        vertices: &mut [Vertex],
        children: &mut [Cell],
        child_vertices: &mut [Vertex],
    ) -> EventResult {
        Ok(())
    }

    fn merge_with_neighbour(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, neighbour: &Vertex, from: usize) -> EventResult {
        Ok(())
    }

    fn prepare_send_to_neighbour(&mut self, ctx: &mut Ctx, vertex: &mut Vertex, to: usize) -> EventResult {
        Ok(())
    }

    /// Master side. Returning `false` skips the worker's reduction this traversal.
    fn prepare_send_to_worker(&mut self, state: &mut Record, vertices: &mut [Vertex], worker: usize) -> Result<bool, MappingError> {
        Ok(true)
    }

    /// Worker side, before its traversal and before `begin_iteration`. `local`
    /// holds the worker's own copies; the default adopts the received data.
    fn merge_with_worker(&mut self, state: &mut Record, local: &mut Handover, received: &Handover) -> EventResult {
        *state = received.state.clone();
        for (l, r) in local.vertices.iter_mut().zip(&received.vertices) {
            l.data = r.data.clone();
        }
        Ok(())
    }

    /// Worker side, after its traversal and after `end_iteration`.
    fn prepare_send_to_master(&mut self, state: &mut Record, local: &mut Handover) -> EventResult {
        Ok(())
    }

    /// Master side, when backtracking past the worker's subtree.
    fn merge_with_master(&mut self, state: &mut Record, vertices: &mut [Vertex], received: &Handover, worker: usize) -> EventResult {
        Ok(())
    }

    fn prepare_copy_to_remote_node(&mut self, entity: EntityMut, to: usize) -> EventResult {
        Ok(())
    }

    /// Destination side of a fork, join or migration; the default adopts the payload.
    fn merge_with_remote_data_due_to_fork_or_join(&mut self, local: EntityMut, remote: EntityRef, from: usize) -> EventResult {
        match (local, remote) {
            (EntityMut::Vertex(l), EntityRef::Vertex(r)) => {
                l.data = r.data.clone();
                l.refine = r.refine;
            }
            (EntityMut::Cell(l), EntityRef::Cell(r)) => l.data = r.data.clone(),
            _ => return Err(MappingError::new("entity kinds differ")),
        }
        Ok(())
    }

    /// Clone for a worker thread; `None` forces serial execution.
    fn thread_replicate(&self) -> Option<Box<dyn EventMapping>> {
        None
    }

    fn merge_with_worker_thread(&mut self, replica: Box<dyn EventMapping>) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    BeginIteration,
    EndIteration,
    CreateVertex,
    CreateHangingVertex,
    DestroyHangingVertex,
    DestroyVertex,
    CreateCell,
    DestroyCell,
    TouchVertexFirstTime,
    TouchVertexLastTime,
    EnterCell,
    LeaveCell,
    Descend,
    Ascend,
    MergeWithNeighbour,
    PrepareSendToNeighbour,
    PrepareSendToWorker,
    PrepareSendToMaster,
    MergeWithWorker,
    MergeWithMaster,
    PrepareCopyToRemoteNode,
    MergeWithRemoteDataDueToForkOrJoin,
}

impl EventKind {
    pub const ALL: [EventKind; 22] = [
        EventKind::BeginIteration,
        EventKind::EndIteration,
        EventKind::CreateVertex,
        EventKind::CreateHangingVertex,
        EventKind::DestroyHangingVertex,
        EventKind::DestroyVertex,
        EventKind::CreateCell,
        EventKind::DestroyCell,
        EventKind::TouchVertexFirstTime,
        EventKind::TouchVertexLastTime,
        EventKind::EnterCell,
        EventKind::LeaveCell,
        EventKind::Descend,
        EventKind::Ascend,
        EventKind::MergeWithNeighbour,
        EventKind::PrepareSendToNeighbour,
        EventKind::PrepareSendToWorker,
        EventKind::PrepareSendToMaster,
        EventKind::MergeWithWorker,
        EventKind::MergeWithMaster,
        EventKind::PrepareCopyToRemoteNode,
        EventKind::MergeWithRemoteDataDueToForkOrJoin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::BeginIteration => "beginIteration",
            EventKind::EndIteration => "endIteration",
            EventKind::CreateVertex => "createVertex",
            EventKind::CreateHangingVertex => "createHangingVertex",
            EventKind::DestroyHangingVertex => "destroyHangingVertex",
            EventKind::DestroyVertex => "destroyVertex",
            EventKind::CreateCell => "createCell",
            EventKind::DestroyCell => "destroyCell",
            EventKind::TouchVertexFirstTime => "touchVertexFirstTime",
            EventKind::TouchVertexLastTime => "touchVertexLastTime",
            EventKind::EnterCell => "enterCell",
            EventKind::LeaveCell => "leaveCell",
            EventKind::Descend => "descend",
            EventKind::Ascend => "ascend",
            EventKind::MergeWithNeighbour => "mergeWithNeighbour",
            EventKind::PrepareSendToNeighbour => "prepareSendToNeighbour",
            EventKind::PrepareSendToWorker => "prepareSendToWorker",
            EventKind::PrepareSendToMaster => "prepareSendToMaster",
            EventKind::MergeWithWorker => "mergeWithWorker",
            EventKind::MergeWithMaster => "mergeWithMaster",
            EventKind::PrepareCopyToRemoteNode => "prepareCopyToRemoteNode",
            EventKind::MergeWithRemoteDataDueToForkOrJoin => "mergeWithRemoteDataDueToForkOrJoin",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How instances of one event may run relative to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Policy {
    Serial,
    /// Colour classes of `c^d` colours (`c` in 2..=7) run one after another.
    Coloured(u8),
    Concurrent,
}

impl Policy {
    fn rank(self) -> u32 {
        match self {
            Policy::Serial => 0,
            Policy::Coloured(c) => 100 - c as u32,
            Policy::Concurrent => 1000,
        }
    }

    pub fn most_restrictive(self, other: Policy) -> Policy {
        if self.rank() <= other.rank() {
            self
        } else {
            other
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serial" => Ok(Policy::Serial),
            "concurrent" => Ok(Policy::Concurrent),
            other => {
                let c: u8 = other
                    .strip_suffix('d')
                    .and_then(|n| n.parse().ok())
                    .filter(|c| (2..=7).contains(c))
                    .ok_or_else(|| format!("unknown colouring `{other}` (serial, 2d..7d, concurrent)"))?;
                Ok(Policy::Coloured(c))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConcurrencySpec {
    pub touch_first: Policy,
    pub touch_last: Policy,
    pub enter_cell: Policy,
    pub leave_cell: Policy,
    pub hanging: Policy,
    pub multiscale: Policy,
}

impl ConcurrencySpec {
    pub fn serial() -> Self {
        Self::uniform(Policy::Serial)
    }

    pub fn uniform(policy: Policy) -> Self {
        ConcurrencySpec {
            touch_first: policy,
            touch_last: policy,
            enter_cell: policy,
            leave_cell: policy,
            hanging: policy,
            multiscale: policy,
        }
    }

    pub fn most_restrictive(self, o: ConcurrencySpec) -> Self {
        ConcurrencySpec {
            touch_first: self.touch_first.most_restrictive(o.touch_first),
            touch_last: self.touch_last.most_restrictive(o.touch_last),
            enter_cell: self.enter_cell.most_restrictive(o.enter_cell),
            leave_cell: self.leave_cell.most_restrictive(o.leave_cell),
            hanging: self.hanging.most_restrictive(o.hanging),
            multiscale: self.multiscale.most_restrictive(o.multiscale),
        }
    }
}

/// Which vertical transfers a traversal needs. Merging ORs requirements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct CommunicationSpec {
    pub reduction_required: bool,
    pub down_state: bool,
    pub down_vertices: bool,
    pub up_state: bool,
    pub up_vertices: bool,
    pub up_cells: bool,
    /// Down data is needed before the worker starts (otherwise it may arrive late).
    pub down_before_traversal: bool,
}

impl CommunicationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn everything() -> Self {
        CommunicationSpec {
            reduction_required: true,
            down_state: true,
            down_vertices: true,
            up_state: true,
            up_vertices: true,
            up_cells: true,
            down_before_traversal: true,
        }
    }

    pub fn most_restrictive(self, o: CommunicationSpec) -> Self {
        CommunicationSpec {
            reduction_required: self.reduction_required || o.reduction_required,
            down_state: self.down_state || o.down_state,
            down_vertices: self.down_vertices || o.down_vertices,
            up_state: self.up_state || o.up_state,
            up_vertices: self.up_vertices || o.up_vertices,
            up_cells: self.up_cells || o.up_cells,
            down_before_traversal: self.down_before_traversal || o.down_before_traversal,
        }
    }

    pub fn needs_down(&self) -> bool {
        self.down_state || self.down_vertices
    }

    pub fn needs_up(&self) -> bool {
        self.reduction_required || self.up_state || self.up_vertices || self.up_cells
    }
}

/// Ordered composition of mappings sharing one traversal.
pub struct Adapter {
    mappings: Vec<Box<dyn EventMapping>>,
    layout: Layout,
}

impl fmt::Debug for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Adapter").field("mappings", &self.mappings.len()).field("layout", &self.layout).finish()
    }
}

macro_rules! each {
    ($self:ident, $m:ident => $body:expr) => {{
        for $m in $self.mappings.iter_mut() {
            $body?;
        }
        Ok(())
    }};
}

impl Adapter {
    pub fn new(mut mappings: Vec<Box<dyn EventMapping>>) -> Result<Self, StorageError> {
        let mut layout = Layout::default();
        for m in mappings.iter_mut() {
            m.register(&mut layout)?;
        }
        Ok(Adapter { mappings, layout })
    }

    /// An adapter without mappings: traversal with no user work.
    pub fn empty() -> Self {
        Adapter { mappings: Vec::new(), layout: Layout::default() }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.mappings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mappings.is_empty()
    }

    pub fn mapping<T: EventMapping>(&self, index: usize) -> Option<&T> {
        (**self.mappings.get(index)?).as_any().downcast_ref::<T>()
    }

    pub fn mapping_mut<T: EventMapping>(&mut self, index: usize) -> Option<&mut T> {
        (**self.mappings.get_mut(index)?).as_any_mut().downcast_mut::<T>()
    }

    /// First mapping of type `T`.
    pub fn find<T: EventMapping>(&self) -> Option<&T> {
        self.mappings.iter().find_map(|m| (**m).as_any().downcast_ref::<T>())
    }

    pub fn find_mut<T: EventMapping>(&mut self) -> Option<&mut T> {
        self.mappings.iter_mut().find_map(|m| (**m).as_any_mut().downcast_mut::<T>())
    }

    pub fn concurrency(&self) -> ConcurrencySpec {
        self.mappings
            .iter()
            .map(|m| m.concurrency())
            .fold(ConcurrencySpec::uniform(Policy::Concurrent), ConcurrencySpec::most_restrictive)
    }

    pub fn communication(&self) -> CommunicationSpec {
        self.mappings.iter().map(|m| m.communication()).fold(CommunicationSpec::none(), CommunicationSpec::most_restrictive)
    }

    pub fn multiscale(&self) -> bool {
        self.mappings.iter().any(|m| m.multiscale())
    }

    /// Replicates every mapping, or `None` if one of them cannot be replicated.
    pub fn replicate(&self) -> Option<Adapter> {
        let mappings = self.mappings.iter().map(|m| m.thread_replicate()).collect::<Option<Vec<_>>>()?;
        Some(Adapter { mappings, layout: self.layout.clone() })
    }

    pub fn merge_replica(&mut self, replica: Adapter) {
        for (m, r) in self.mappings.iter_mut().zip(replica.mappings) {
            m.merge_with_worker_thread(r);
        }
    }

    pub fn begin_iteration(&mut self, state: &mut Record) -> EventResult {
        each!(self, m => m.begin_iteration(state))
    }

    pub fn end_iteration(&mut self, state: &mut Record) -> EventResult {
        each!(self, m => m.end_iteration(state))
    }

    pub fn create_vertex(&mut self, ctx: &mut Ctx, v: &mut Vertex, coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.create_vertex(ctx, v, reborrow(coarse)))
    }

    pub fn create_hanging_vertex(&mut self, ctx: &mut Ctx, v: &mut Vertex, coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.create_hanging_vertex(ctx, v, reborrow(coarse)))
    }

    pub fn destroy_hanging_vertex(&mut self, ctx: &mut Ctx, v: &mut Vertex, coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.destroy_hanging_vertex(ctx, v, reborrow(coarse)))
    }

    pub fn destroy_vertex(&mut self, ctx: &mut Ctx, v: &mut Vertex, coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.destroy_vertex(ctx, v, reborrow(coarse)))
    }

    pub fn touch_vertex_first_time(&mut self, ctx: &mut Ctx, v: &mut Vertex, coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.touch_vertex_first_time(ctx, v, reborrow(coarse)))
    }

    pub fn touch_vertex_last_time(&mut self, ctx: &mut Ctx, v: &mut Vertex, coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.touch_vertex_last_time(ctx, v, reborrow(coarse)))
    }

    pub fn create_cell(&mut self, ctx: &mut Ctx, c: &mut Cell, vs: &mut [Vertex], coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.create_cell(ctx, c, vs, reborrow(coarse)))
    }

    pub fn destroy_cell(&mut self, ctx: &mut Ctx, c: &mut Cell, vs: &mut [Vertex], coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.destroy_cell(ctx, c, vs, reborrow(coarse)))
    }

    pub fn enter_cell(&mut self, ctx: &mut Ctx, c: &mut Cell, vs: &mut [Vertex], coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.enter_cell(ctx, c, vs, reborrow(coarse)))
    }

    pub fn leave_cell(&mut self, ctx: &mut Ctx, c: &mut Cell, vs: &mut [Vertex], coarse: &mut Option<(Cell, Vec<Vertex>)>) -> EventResult {
        each!(self, m => m.leave_cell(ctx, c, vs, reborrow(coarse)))
    }

    pub fn descend(&mut self, ctx: &mut Ctx, c: &mut Cell, vs: &mut [Vertex], kids: &mut [Cell], kvs: &mut [Vertex]) -> EventResult {
        each!(self, m => m.descend(ctx, c, vs, kids, kvs))
    }

    pub fn ascend(&mut self, ctx: &mut Ctx, c: &mut Cell, vs: &mut [Vertex], kids: &mut [Cell], kvs: &mut [Vertex]) -> EventResult {
        each!(self, m => m.ascend(ctx, c, vs, kids, kvs))
    }

    pub fn merge_with_neighbour(&mut self, ctx: &mut Ctx, v: &mut Vertex, n: &Vertex, from: usize) -> EventResult {
        each!(self, m => m.merge_with_neighbour(ctx, v, n, from))
    }

    pub fn prepare_send_to_neighbour(&mut self, ctx: &mut Ctx, v: &mut Vertex, to: usize) -> EventResult {
        each!(self, m => m.prepare_send_to_neighbour(ctx, v, to))
    }

    /// True unless some mapping asks to skip the reduction.
    pub fn prepare_send_to_worker(&mut self, state: &mut Record, vs: &mut [Vertex], worker: usize) -> Result<bool, MappingError> {
        let mut reduce = true;
        for m in self.mappings.iter_mut() {
            reduce &= m.prepare_send_to_worker(state, vs, worker)?;
        }
        Ok(reduce)
    }

    pub fn merge_with_worker(&mut self, state: &mut Record, local: &mut Handover, received: &Handover) -> EventResult {
        each!(self, m => m.merge_with_worker(state, local, received))
    }

    pub fn prepare_send_to_master(&mut self, state: &mut Record, local: &mut Handover) -> EventResult {
        each!(self, m => m.prepare_send_to_master(state, local))
    }

    pub fn merge_with_master(&mut self, state: &mut Record, vs: &mut [Vertex], received: &Handover, worker: usize) -> EventResult {
        each!(self, m => m.merge_with_master(state, vs, received, worker))
    }

    pub fn prepare_copy_to_remote_node(&mut self, entity: &mut EntityMut, to: usize) -> EventResult {
        each!(self, m => m.prepare_copy_to_remote_node(reborrow_entity(entity), to))
    }

    pub fn merge_with_remote_data_due_to_fork_or_join(&mut self, local: &mut EntityMut, remote: &EntityRef, from: usize) -> EventResult {
        each!(self, m => m.merge_with_remote_data_due_to_fork_or_join(reborrow_entity(local), copy_ref(remote), from))
    }
}

fn reborrow(coarse: &mut Option<(Cell, Vec<Vertex>)>) -> Option<Coarse<'_>> {
    coarse.as_mut().map(|(cell, vertices)| Coarse { cell, vertices: vertices.as_mut_slice() })
}

fn reborrow_entity<'a>(e: &'a mut EntityMut) -> EntityMut<'a> {
    match e {
        EntityMut::Vertex(v) => EntityMut::Vertex(v),
        EntityMut::Cell(c) => EntityMut::Cell(c),
    }
}

fn copy_ref<'a>(e: &EntityRef<'a>) -> EntityRef<'a> {
    match e {
        EntityRef::Vertex(v) => EntityRef::Vertex(v),
        EntityRef::Cell(c) => EntityRef::Cell(c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_merge_picks_most_restrictive() {
        use Policy::*;
        assert_eq!(Coloured(2).most_restrictive(Serial), Serial);
        assert_eq!(Coloured(2).most_restrictive(Coloured(7)), Coloured(7));
        assert_eq!(Concurrent.most_restrictive(Coloured(3)), Coloured(3));
        assert_eq!(Concurrent.most_restrictive(Concurrent), Concurrent);
        assert_eq!("7d".parse::<Policy>().unwrap(), Coloured(7));
        assert!("9d".parse::<Policy>().is_err());
    }

    #[test]
    fn communication_merge_ors_flags() {
        let a = CommunicationSpec { reduction_required: true, ..CommunicationSpec::none() };
        let b = CommunicationSpec { down_vertices: true, down_before_traversal: true, ..CommunicationSpec::none() };
        let m = a.most_restrictive(b);
        assert!(m.reduction_required && m.down_vertices && m.down_before_traversal);
        assert!(!m.up_cells);
        assert!(m.needs_down() && m.needs_up());
    }

    #[test]
    fn event_names_round_trip() {
        for k in EventKind::ALL {
            assert_eq!(EventKind::from_name(k.name()), Some(k));
        }
    }

    struct Tag(&'static str);
    impl EventMapping for Tag {
        fn concurrency(&self) -> ConcurrencySpec {
            match self.0 {
                "a" => ConcurrencySpec::uniform(Policy::Coloured(2)),
                _ => ConcurrencySpec { enter_cell: Policy::Serial, ..ConcurrencySpec::uniform(Policy::Concurrent) },
            }
        }
    }

    #[test]
    fn adapter_merges_specs_and_finds_mappings() {
        let a = Adapter::new(vec![Box::new(Tag("a")), Box::new(Tag("b"))]).unwrap();
        let spec = a.concurrency();
        assert_eq!(spec.enter_cell, Policy::Serial);
        assert_eq!(spec.touch_first, Policy::Coloured(2));
        assert_eq!(a.find::<Tag>().unwrap().0, "a");
        assert!(a.replicate().is_none());
        assert_eq!(Adapter::empty().concurrency(), ConcurrencySpec::uniform(Policy::Concurrent));
    }
}
