//! The linearized spacetree: refinement structure, per-cell and per-vertex
//! stream records, hanging-vertex classification and the binary format.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::events::{Adapter, Command};
use crate::fixture::Fixture;
use crate::sfc::{CellCode, ChildOrdering, Curve, Grid, Orientation, Partitioning, SfcError, TraversalOrder, VertexKey};
use crate::storage::{Layout, Record, StorageError};
use crate::trace::Trace;
use crate::traversal::{self, Stats, TraversalError, TraversalOptions};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error(transparent)]
    Sfc(#[from] SfcError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Traversal(#[from] TraversalError),
    #[error("cell {0} is refined but its parent is not")]
    Orphan(String),
    #[error("{0:?} is not supported as a stream order (use depth-first or level-wise)")]
    StreamOrder(TraversalOrder),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
}

/// Regularity marker: height of the perfectly regular subtree below a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Marker {
    #[default]
    Bottom,
    Height(u8),
}

impl Marker {
    pub fn to_byte(self) -> u8 {
        match self {
            Marker::Bottom => 255,
            Marker::Height(h) => h.min(254),
        }
    }

    pub fn from_byte(b: u8) -> Self {
        if b == 255 {
            Marker::Bottom
        } else {
            Marker::Height(b)
        }
    }

    pub fn height(self) -> Option<u8> {
        match self {
            Marker::Bottom => None,
            Marker::Height(h) => Some(h),
        }
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Marker::Bottom => f.write_str("⊥"),
            Marker::Height(h) => write!(f, "{h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellRecord {
    pub refined: bool,
    /// A refine (leaf) or erase (refined) request pending for the next traversal.
    pub change: bool,
    pub marker: Marker,
    pub data: Record,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VertexRecord {
    pub key: VertexKey,
    pub refine: bool,
    pub data: Record,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VertexClass {
    Persistent,
    Hanging,
    /// Not part of the grid at its level.
    Absent,
}

/// Set of refined cells; closed under taking parents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Structure {
    grid: Grid,
    refined: HashSet<CellCode>,
}

impl Structure {
    pub fn new(grid: Grid) -> Self {
        Structure { grid, refined: HashSet::new() }
    }

    pub fn from_refined(grid: Grid, refined: impl IntoIterator<Item = CellCode>) -> Result<Self, TreeError> {
        let refined: HashSet<CellCode> = refined.into_iter().collect();
        for c in &refined {
            if let Some(p) = c.parent() {
                if !refined.contains(&p) {
                    return Err(TreeError::Orphan(c.to_string()));
                }
            }
        }
        Ok(Structure { grid, refined })
    }

    /// Every cell above `depth` refined.
    pub fn regular(grid: Grid, depth: usize) -> Self {
        let mut s = Structure::new(grid);
        let mut level = vec![CellCode::root(grid)];
        for _ in 0..depth {
            let mut next = Vec::new();
            for c in level {
                s.refined.insert(c);
                next.extend((0..grid.children()).map(|i| c.child(i)));
            }
            level = next;
        }
        s
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn refined(&self) -> &HashSet<CellCode> {
        &self.refined
    }

    pub fn is_refined(&self, c: &CellCode) -> bool {
        self.refined.contains(c)
    }

    pub fn exists(&self, c: &CellCode) -> bool {
        match c.parent() {
            None => true,
            Some(p) => self.refined.contains(&p),
        }
    }

    pub fn cell_count(&self) -> usize {
        1 + self.grid.children() * self.refined.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.cell_count() - self.refined.len()
    }

    pub fn max_level(&self) -> usize {
        self.refined.iter().map(|c| c.level() + 1).max().unwrap_or(0)
    }

    pub(crate) fn insert(&mut self, c: CellCode) {
        self.refined.insert(c);
    }

    /// Removes `c` and every refined descendant.
    pub(crate) fn erase_subtree(&mut self, c: &CellCode) {
        self.refined.retain(|r| !c.is_ancestor_or_self_of(r));
    }

    /// All cells in traversal-independent order (level, then coordinates).
    pub fn cells(&self) -> Vec<CellCode> {
        let mut out = vec![CellCode::root(self.grid)];
        let mut refined: Vec<CellCode> = self.refined.iter().copied().collect();
        refined.sort();
        for c in refined {
            out.extend((0..self.grid.children()).map(|i| c.child(i)));
        }
        out.sort();
        out
    }

    /// Refined cells one level up whose children touch `v`.
    pub fn block_parents(&self, v: &VertexKey) -> Vec<CellCode> {
        let mut out: Vec<CellCode> = Vec::new();
        for c in v.adjacent_cells().into_iter().flatten() {
            if let Some(p) = c.parent() {
                if self.refined.contains(&p) && !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// A vertex is hanging if a same-level cell inside the domain around it is missing.
    pub fn is_hanging(&self, v: &VertexKey) -> bool {
        v.level() > 0 && v.adjacent_cells().into_iter().flatten().any(|c| !self.exists(&c))
    }

    pub fn classify(&self, v: &VertexKey) -> VertexClass {
        let adjacent: Vec<CellCode> = v.adjacent_cells().into_iter().flatten().collect();
        let present = adjacent.iter().filter(|c| self.exists(c)).count();
        if present == 0 {
            VertexClass::Absent
        } else if present < adjacent.len() {
            VertexClass::Hanging
        } else {
            VertexClass::Persistent
        }
    }

    /// The `(k+1)^d` vertices of the children of `c`, x varying fastest.
    pub fn child_grid(c: &CellCode) -> Vec<VertexKey> {
        let grid = c.grid();
        let d = grid.dim();
        let side = grid.k() as usize + 1;
        let total = side.pow(d as u32);
        let mut out = Vec::with_capacity(total);
        let mut coords = vec![0u32; d];
        for mut i in 0..total {
            for (a, x) in coords.iter_mut().enumerate() {
                *x = c.coords()[a] * grid.k() + (i % side) as u32;
                i /= side;
            }
            out.push(VertexKey::new(grid, c.level() + 1, &coords).expect("child grid inside the domain"));
        }
        out
    }

    /// Persistent and hanging vertices of the whole grid, by level and position.
    pub fn vertex_census(&self) -> (Vec<VertexKey>, Vec<VertexKey>) {
        let mut all: HashSet<VertexKey> = CellCode::root(self.grid).vertices().collect();
        for c in &self.refined {
            all.extend(Structure::child_grid(c));
        }
        let mut persistent = Vec::new();
        let mut hanging = Vec::new();
        for v in all {
            match self.classify(&v) {
                VertexClass::Persistent => persistent.push(v),
                VertexClass::Hanging => hanging.push(v),
                VertexClass::Absent => {}
            }
        }
        persistent.sort();
        hanging.sort();
        (persistent, hanging)
    }
}

/// Cell and vertex streams. Both are stacks: the next traversal reads from the back.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Streams {
    pub cells: Vec<CellRecord>,
    pub vertices: Vec<VertexRecord>,
    /// The next traversal visits children in reverse order.
    pub backward: bool,
}

/// A spacetree stored as streams in traversal order.
#[derive(Clone, Debug)]
pub struct Spacetree {
    ordering: ChildOrdering,
    order: TraversalOrder,
    layout: Layout,
    structure: Structure,
    streams: Streams,
    carry: BTreeMap<CellCode, Command>,
    state: Record,
}

impl PartialEq for Spacetree {
    fn eq(&self, o: &Self) -> bool {
        self.ordering.curve() == o.ordering.curve()
            && self.grid() == o.grid()
            && self.order == o.order
            && self.layout == o.layout
            && self.structure == o.structure
            && self.streams == o.streams
            && self.carry == o.carry
            && self.state == o.state
    }
}

pub(crate) fn check_order(order: TraversalOrder) -> Result<(), TreeError> {
    match order {
        TraversalOrder::BreadthFirst => Err(TreeError::StreamOrder(order)),
        _ => Ok(()),
    }
}

impl Spacetree {
    /// The unrefined unit hypercube.
    pub fn new(grid: Grid, curve: Curve, order: TraversalOrder, layout: Layout) -> Result<Self, TreeError> {
        Self::from_structure(Structure::new(grid), curve, order, layout)
    }

    pub fn regular(grid: Grid, depth: usize, curve: Curve, order: TraversalOrder, layout: Layout) -> Result<Self, TreeError> {
        Self::from_structure(Structure::regular(grid, depth), curve, order, layout)
    }

    pub fn from_fixture(fixture: &Fixture, curve: Curve, order: TraversalOrder, layout: Layout) -> Result<Self, TreeError> {
        let structure = Structure::from_refined(fixture.grid(), fixture.refined().iter().copied())?;
        Self::from_structure(structure, curve, order, layout)
    }

    pub fn from_structure(structure: Structure, curve: Curve, order: TraversalOrder, layout: Layout) -> Result<Self, TreeError> {
        check_order(order)?;
        let ordering = ChildOrdering::new(curve, structure.grid())?;
        let state = layout.state.default_record();
        let streams = traversal::rebuild(&ordering, order, &layout, &structure, &BTreeMap::new(), &BTreeMap::new(), &BTreeMap::new())?;
        Ok(Spacetree { ordering, order, layout, structure, streams, carry: BTreeMap::new(), state })
    }

    /// Same grid and payload, re-linearized for another traversal order.
    pub fn relinearize(&self, order: TraversalOrder) -> Result<Self, TreeError> {
        check_order(order)?;
        let streams =
            traversal::rebuild(&self.ordering, order, &self.layout, &self.structure, &self.cell_map()?, &self.vertex_map(), &self.carry)?;
        Ok(Spacetree { order, streams, ..self.clone() })
    }

    /// Same grid with payload replaced; entities missing from the maps get default records.
    pub fn with_payload(
        &self,
        cells: &BTreeMap<CellCode, CellRecord>,
        vertices: &BTreeMap<VertexKey, VertexRecord>,
    ) -> Result<Self, TreeError> {
        let streams = traversal::rebuild(&self.ordering, self.order, &self.layout, &self.structure, cells, vertices, &self.carry)?;
        Ok(Spacetree { streams, ..self.clone() })
    }

    pub fn grid(&self) -> Grid {
        self.structure.grid()
    }

    pub fn ordering(&self) -> &ChildOrdering {
        &self.ordering
    }

    pub fn order(&self) -> TraversalOrder {
        self.order
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }

    pub fn state(&self) -> &Record {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut Record {
        &mut self.state
    }

    pub fn carry(&self) -> &BTreeMap<CellCode, Command> {
        &self.carry
    }

    pub fn cell_count(&self) -> usize {
        self.streams.cells.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.streams.vertices.len()
    }

    /// Cell records in the order the next traversal reads them.
    pub fn cell_records(&self) -> Result<Vec<(CellCode, CellRecord)>, TreeError> {
        let root = [(CellCode::root(self.grid()), self.ordering.root_orientation())];
        let walk = walk_stream(&self.ordering, self.order, &self.streams, &root, &|_| false)?;
        Ok(walk.into_iter().map(|(c, i)| (c, self.streams.cells[i].clone())).collect())
    }

    pub fn cell_map(&self) -> Result<BTreeMap<CellCode, CellRecord>, TreeError> {
        Ok(self.cell_records()?.into_iter().collect())
    }

    pub fn vertex_map(&self) -> BTreeMap<VertexKey, VertexRecord> {
        self.streams.vertices.iter().map(|v| (v.key, v.clone())).collect()
    }

    pub fn marker(&self, c: &CellCode) -> Result<Option<Marker>, TreeError> {
        Ok(self.cell_records()?.into_iter().find(|(code, _)| code == c).map(|(_, r)| r.marker))
    }

    pub fn traverse(&mut self, adapter: &mut Adapter, options: &TraversalOptions) -> Result<Stats, TreeError> {
        self.traverse_traced(adapter, options, None)
    }

    /// One grid sweep. On error the tree is left exactly as before.
    pub fn traverse_traced(
        &mut self,
        adapter: &mut Adapter,
        options: &TraversalOptions,
        trace: Option<&mut Trace>,
    ) -> Result<Stats, TreeError> {
        if !adapter.layout().is_prefix_of(&self.layout) {
            return Err(TraversalError::Layout.into());
        }
        let mut state = self.state.clone();
        let out = traversal::traverse(
            &self.ordering,
            self.order,
            &self.layout,
            &self.structure,
            &self.streams,
            &self.carry,
            adapter,
            &mut state,
            options,
            trace,
        )?;
        self.streams = out.streams;
        self.structure = out.structure;
        self.carry = out.carry;
        self.state = state;
        Ok(out.stats)
    }

    /// Binary form; see the README for the byte layout.
    pub fn serialize(&self) -> Vec<u8> {
        let grid = self.grid();
        let n = self.streams.cells.len();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(grid.dim() as u8);
        out.push(grid.k() as u8);
        out.push(match self.ordering.curve() {
            Curve::Morton => 0,
            Curve::Hilbert => 1,
            Curve::Peano => 2,
        });
        out.push(match self.order {
            TraversalOrder::DepthFirst => 0,
            TraversalOrder::BreadthFirst => 1,
            TraversalOrder::LevelWiseDepthFirst => 2,
        });
        out.push(self.streams.backward as u8);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&structure_bits(&self.streams.cells));
        out.extend(self.streams.cells.iter().map(|c| c.marker.to_byte()));
        let manifest = self.layout.manifest();
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for w in self.state.bits() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for c in &self.streams.cells {
            for w in c.data.bits() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.streams.vertices.len() as u64).to_le_bytes());
        for v in &self.streams.vertices {
            put_key(&mut out, v.key.level(), v.key.coords());
            out.push(v.refine as u8);
            for w in v.data.bits() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.carry.len() as u32).to_le_bytes());
        for (c, cmd) in &self.carry {
            put_key(&mut out, c.level(), c.coords());
            out.push(match cmd {
                Command::Refine => 0,
                Command::Erase => 1,
            });
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, TreeError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(TreeError::Corrupt("bad magic".into()));
        }
        if r.u8()? != VERSION {
            return Err(TreeError::Corrupt("unsupported version".into()));
        }
        let dim = r.u8()? as usize;
        let k = r.u8()? as u32;
        let grid = Grid::new(dim, Partitioning::from_k(k)?)?;
        let curve = match r.u8()? {
            0 => Curve::Morton,
            1 => Curve::Hilbert,
            2 => Curve::Peano,
            x => return Err(TreeError::Corrupt(format!("curve tag {x}"))),
        };
        let order = match r.u8()? {
            0 => TraversalOrder::DepthFirst,
            2 => TraversalOrder::LevelWiseDepthFirst,
            x => return Err(TreeError::Corrupt(format!("order tag {x}"))),
        };
        let backward = match r.u8()? {
            0 => false,
            1 => true,
            x => return Err(TreeError::Corrupt(format!("flag byte {x}"))),
        };
        let n = r.u64()? as usize;
        if n > bytes.len() * 4 {
            return Err(TreeError::Corrupt("cell count exceeds input".into()));
        }
        let bits = r.take(structure_bytes(n))?.to_vec();
        let markers = r.take(n)?.to_vec();
        let mlen = r.u32()? as usize;
        let manifest = std::str::from_utf8(r.take(mlen)?).map_err(|_| TreeError::Corrupt("manifest".into()))?;
        let layout = Layout::from_manifest(manifest)?;
        let state = Record::from_bits((0..layout.state.len()).map(|_| r.u64()).collect::<Result<_, _>>()?);
        let mut cells = Vec::with_capacity(n);
        for i in 0..n {
            let data = Record::from_bits((0..layout.cell.len()).map(|_| r.u64()).collect::<Result<_, _>>()?);
            cells.push(CellRecord {
                refined: (bits[2 * i / 8] >> (2 * i % 8)) & 1 == 1,
                change: (bits[(2 * i + 1) / 8] >> ((2 * i + 1) % 8)) & 1 == 1,
                marker: Marker::from_byte(markers[i]),
                data,
            });
        }
        let m = r.u64()? as usize;
        if m > bytes.len() {
            return Err(TreeError::Corrupt("vertex count exceeds input".into()));
        }
        let mut vertices = Vec::with_capacity(m);
        for _ in 0..m {
            let (level, coords) = r.key(dim)?;
            let key = VertexKey::new(grid, level, &coords)?;
            let refine = r.u8()? == 1;
            let data = Record::from_bits((0..layout.vertex.len()).map(|_| r.u64()).collect::<Result<_, _>>()?);
            vertices.push(VertexRecord { key, refine, data });
        }
        let nc = r.u32()? as usize;
        let mut carry = BTreeMap::new();
        for _ in 0..nc {
            let (level, coords) = r.key(dim)?;
            let c = CellCode::from_coords(grid, level, &coords)?;
            let cmd = match r.u8()? {
                0 => Command::Refine,
                1 => Command::Erase,
                x => return Err(TreeError::Corrupt(format!("command tag {x}"))),
            };
            carry.insert(c, cmd);
        }
        if r.at != bytes.len() {
            return Err(TreeError::Corrupt("trailing bytes".into()));
        }
        let ordering = ChildOrdering::new(curve, grid)?;
        let streams = Streams { cells, vertices, backward };
        let root = [(CellCode::root(grid), ordering.root_orientation())];
        let walk = walk_stream(&ordering, order, &streams, &root, &|_| false)?;
        let structure =
            Structure::from_refined(grid, walk.iter().filter(|(_, i)| streams.cells[*i].refined).map(|(c, _)| *c))?;
        Ok(Spacetree { ordering, order, layout, structure, streams, carry, state })
    }
}

const MAGIC: &[u8; 4] = b"SPTR";
const VERSION: u8 = 1;

/// Bytes of the structure section for `n` cells.
pub fn structure_bytes(n: usize) -> usize {
    (2 * n).div_ceil(8)
}

fn structure_bits(cells: &[CellRecord]) -> Vec<u8> {
    let mut bits = vec![0u8; structure_bytes(cells.len())];
    for (i, c) in cells.iter().enumerate() {
        if c.refined {
            bits[2 * i / 8] |= 1 << (2 * i % 8);
        }
        if c.change {
            bits[(2 * i + 1) / 8] |= 1 << ((2 * i + 1) % 8);
        }
    }
    bits
}

fn put_key(out: &mut Vec<u8>, level: usize, coords: &[u32]) {
    out.push(level as u8);
    for c in coords {
        out.extend_from_slice(&c.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TreeError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| TreeError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TreeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TreeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64, TreeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn key(&mut self, dim: usize) -> Result<(usize, Vec<u32>), TreeError> {
        let level = self.u8()? as usize;
        let coords = (0..dim).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        Ok((level, coords))
    }
}

/// Children of `c` in visit order for the given direction.
pub(crate) fn kids(ordering: &ChildOrdering, backward: bool, c: &CellCode, o: Orientation) -> Vec<(CellCode, Orientation)> {
    let visit = ordering.visit(o).expect("orientation states come from the ordering");
    let mut out: Vec<(CellCode, Orientation)> = visit.iter().map(|v| (c.child(v.child), v.orientation)).collect();
    if backward {
        out.reverse();
    }
    out
}

/// Replays the read order of a cell stream, pairing each code with its stack index.
/// `skip` marks cells held elsewhere (not present in this stream).
pub(crate) fn walk_stream(
    ordering: &ChildOrdering,
    order: TraversalOrder,
    streams: &Streams,
    roots: &[(CellCode, Orientation)],
    skip: &dyn Fn(&CellCode) -> bool,
) -> Result<Vec<(CellCode, usize)>, TreeError> {
    struct W<'a> {
        ordering: &'a ChildOrdering,
        streams: &'a Streams,
        skip: &'a dyn Fn(&CellCode) -> bool,
        cursor: usize,
        out: Vec<(CellCode, usize)>,
    }
    impl W<'_> {
        fn read(&mut self, c: CellCode) -> Result<bool, TreeError> {
            if self.cursor == 0 {
                return Err(TreeError::Corrupt("cell stream exhausted".into()));
            }
            self.cursor -= 1;
            self.out.push((c, self.cursor));
            Ok(self.streams.cells[self.cursor].refined)
        }
        fn dfs(&mut self, c: CellCode, o: Orientation, refined: bool) -> Result<(), TreeError> {
            if !refined {
                return Ok(());
            }
            for (k, ko) in kids(self.ordering, self.streams.backward, &c, o) {
                if (self.skip)(&k) {
                    continue;
                }
                let r = self.read(k)?;
                self.dfs(k, ko, r)?;
            }
            Ok(())
        }
        fn lw(&mut self, c: CellCode, o: Orientation, refined: bool) -> Result<(), TreeError> {
            if !refined {
                return Ok(());
            }
            let mut block = Vec::new();
            for (k, ko) in kids(self.ordering, self.streams.backward, &c, o) {
                if (self.skip)(&k) {
                    continue;
                }
                let r = self.read(k)?;
                block.push((k, ko, r));
            }
            for (k, ko, r) in block {
                self.lw(k, ko, r)?;
            }
            Ok(())
        }
    }
    let mut w = W { ordering, streams, skip, cursor: streams.cells.len(), out: Vec::new() };
    match order {
        TraversalOrder::DepthFirst => {
            for &(r, o) in roots {
                let refined = w.read(r)?;
                w.dfs(r, o, refined)?;
            }
        }
        _ => {
            let mut read = Vec::new();
            for &(r, o) in roots {
                read.push((r, o, w.read(r)?));
            }
            for (r, o, refined) in read {
                w.lw(r, o, refined)?;
            }
        }
    }
    if w.cursor != 0 {
        return Err(TreeError::Corrupt(format!("{} unread cells", w.cursor)));
    }
    Ok(w.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(dim: usize, k: u32) -> Grid {
        Grid::new(dim, Partitioning::from_k(k).unwrap()).unwrap()
    }

    #[test]
    fn regular_structure_counts() {
        let s = Structure::regular(g(2, 3), 2);
        assert_eq!(s.cell_count(), 1 + 9 + 81);
        assert_eq!(s.leaf_count(), 81);
        let (p, h) = s.vertex_census();
        assert!(h.is_empty());
        assert_eq!(p.len(), 4 + 16 + 100);
    }

    #[test]
    fn orphans_are_rejected() {
        let grid = g(2, 2);
        let c = CellCode::root(grid).child(1);
        assert!(Structure::from_refined(grid, [c]).is_err());
    }

    #[test]
    fn root_corners_are_persistent() {
        let s = Structure::new(g(3, 2));
        for v in CellCode::root(s.grid()).vertices() {
            assert_eq!(s.classify(&v), VertexClass::Persistent);
        }
    }

    #[test]
    fn marker_bytes_round_trip() {
        for m in [Marker::Bottom, Marker::Height(0), Marker::Height(7)] {
            assert_eq!(Marker::from_byte(m.to_byte()), m);
        }
    }

    #[test]
    fn structure_section_size() {
        assert_eq!(structure_bytes(25), 7);
        assert_eq!(structure_bytes(1), 1);
        assert_eq!(structure_bytes(4), 1);
        assert_eq!(structure_bytes(5), 2);
    }
}
