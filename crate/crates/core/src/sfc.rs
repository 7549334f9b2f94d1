//! Child orderings, cell codes and linearizations of k-partitioned spacetrees.

use std::borrow::Cow;
use std::collections::{HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SfcError {
    #[error("subdivision factor {0} is not supported (expected 2 or 3)")]
    InvalidPartitioning(u32),
    #[error("dimension {0} is outside the supported range 2..={MAX_DIM}")]
    InvalidDimension(usize),
    #[error("{curve:?} ordering is incompatible with k={k}, d={dim}")]
    IncompatibleOrdering { curve: Curve, k: u32, dim: usize },
    #[error("orientation state {0} is not valid for this ordering")]
    InvalidOrientation(u32),
    #[error("child digit {digit} out of range for {children} children")]
    InvalidDigit { digit: usize, children: usize },
    #[error("level {0} exceeds the representable depth")]
    LevelOverflow(usize),
    #[error("cannot parse code `{0}`")]
    Parse(String),
}

/// Per-axis subdivision factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partitioning {
    Bi,
    Tri,
}

impl Partitioning {
    pub fn from_k(k: u32) -> Result<Self, SfcError> {
        match k {
            2 => Ok(Partitioning::Bi),
            3 => Ok(Partitioning::Tri),
            other => Err(SfcError::InvalidPartitioning(other)),
        }
    }

    pub fn k(self) -> u32 {
        match self {
            Partitioning::Bi => 2,
            Partitioning::Tri => 3,
        }
    }
}

/// Dimension and subdivision factor shared by every code of one tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    dim: u8,
    k: u8,
}

impl Grid {
    pub fn new(dim: usize, partitioning: Partitioning) -> Result<Self, SfcError> {
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(SfcError::InvalidDimension(dim));
        }
        Ok(Grid { dim: dim as u8, k: partitioning.k() as u8 })
    }

    pub fn dim(self) -> usize {
        self.dim as usize
    }

    pub fn k(self) -> u32 {
        self.k as u32
    }

    pub fn partitioning(self) -> Partitioning {
        Partitioning::from_k(self.k()).expect("validated at construction")
    }

    /// k^d
    pub fn children(self) -> usize {
        (self.k as usize).pow(self.dim as u32)
    }

    /// 2^d
    pub fn cell_vertices(self) -> usize {
        1 << self.dim
    }

    /// Deepest level whose vertex coordinates still fit into `u32`.
    pub fn max_level(self) -> usize {
        match self.k {
            2 => 30,
            _ => 19,
        }
    }

    /// k^level
    pub fn cells_per_axis(self, level: usize) -> u64 {
        (self.k as u64).pow(level as u32)
    }

    /// Geometric child index `sum c_a k^a` of local child coordinates.
    pub fn child_index(self, local: &[u32]) -> usize {
        local.iter().rev().fold(0usize, |acc, &c| acc * self.k as usize + c as usize)
    }

    /// Inverse of [`Grid::child_index`].
    pub fn child_local(self, mut index: usize) -> [u32; MAX_DIM] {
        let mut local = [0u32; MAX_DIM];
        for slot in local.iter_mut().take(self.dim()) {
            *slot = (index % self.k as usize) as u32;
            index /= self.k as usize;
        }
        local
    }
}

/// A cell identified by its level and integer coordinates at that level.
///
/// The printed form lists one digit group per level, x digit first.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellCode {
    dim: u8,
    k: u8,
    level: u8,
    coords: [u32; MAX_DIM],
}

impl CellCode {
    pub fn root(grid: Grid) -> Self {
        CellCode { dim: grid.dim, k: grid.k, level: 0, coords: [0; MAX_DIM] }
    }

    pub fn from_coords(grid: Grid, level: usize, coords: &[u32]) -> Result<Self, SfcError> {
        if level > grid.max_level() {
            return Err(SfcError::LevelOverflow(level));
        }
        let n = grid.cells_per_axis(level);
        let mut c = [0u32; MAX_DIM];
        for a in 0..grid.dim() {
            let v = *coords.get(a).ok_or_else(|| SfcError::Parse(format!("{coords:?}")))?;
            if v as u64 >= n {
                return Err(SfcError::Parse(format!("coordinate {v} outside level {level}")));
            }
            c[a] = v;
        }
        Ok(CellCode { dim: grid.dim, k: grid.k, level: level as u8, coords: c })
    }

    /// Builds the code of the cell reached by a path of geometric child indices.
    pub fn encode(grid: Grid, path: &[usize]) -> Result<Self, SfcError> {
        let mut code = CellCode::root(grid);
        for &digit in path {
            code = code.try_child(digit)?;
        }
        Ok(code)
    }

    pub fn grid(&self) -> Grid {
        Grid { dim: self.dim, k: self.k }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn level(&self) -> usize {
        self.level as usize
    }

    pub fn coords(&self) -> &[u32] {
        &self.coords[..self.dim as usize]
    }

    pub fn is_root(&self) -> bool {
        self.level == 0
    }

    fn try_child(&self, digit: usize) -> Result<Self, SfcError> {
        let grid = self.grid();
        if digit >= grid.children() {
            return Err(SfcError::InvalidDigit { digit, children: grid.children() });
        }
        if self.level() + 1 > grid.max_level() {
            return Err(SfcError::LevelOverflow(self.level() + 1));
        }
        Ok(self.child(digit))
    }

    /// Child at geometric index `digit`; panics on an out-of-range digit.
    pub fn child(&self, digit: usize) -> Self {
        let grid = self.grid();
        assert!(digit < grid.children(), "child digit out of range");
        let local = grid.child_local(digit);
        let mut out = *self;
        out.level += 1;
        for a in 0..self.dim() {
            out.coords[a] = self.coords[a] * self.k as u32 + local[a];
        }
        out
    }

    pub fn parent(&self) -> Option<Self> {
        if self.level == 0 {
            return None;
        }
        let mut out = *self;
        out.level -= 1;
        for a in 0..self.dim() {
            out.coords[a] = self.coords[a] / self.k as u32;
        }
        Some(out)
    }

    /// Geometric index of this cell within its parent (0 for the root).
    pub fn position_in_parent(&self) -> usize {
        let local: Vec<u32> = self.coords().iter().map(|&c| c % self.k as u32).collect();
        if self.level == 0 {
            0
        } else {
            self.grid().child_index(&local)
        }
    }

    pub fn ancestor_at(&self, level: usize) -> Option<Self> {
        if level > self.level() {
            return None;
        }
        let mut out = *self;
        let shift = (self.k as u32).pow((self.level() - level) as u32);
        out.level = level as u8;
        for a in 0..self.dim() {
            out.coords[a] = self.coords[a] / shift;
        }
        Some(out)
    }

    pub fn is_ancestor_or_self_of(&self, other: &CellCode) -> bool {
        other.ancestor_at(self.level()).as_ref() == Some(self)
    }

    /// Geometric child index per level, root first.
    pub fn digits(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.level());
        let mut c = *self;
        while let Some(p) = c.parent() {
            out.push(c.position_in_parent());
            c = p;
        }
        out.reverse();
        out
    }

    /// Lower-left corner as exact numerators over `k^level`.
    pub fn corner_exact(&self) -> (Vec<u64>, u64) {
        (self.coords().iter().map(|&c| c as u64).collect(), self.grid().cells_per_axis(self.level()))
    }

    pub fn corner(&self) -> Vec<f64> {
        let (num, den) = self.corner_exact();
        num.into_iter().map(|n| n as f64 / den as f64).collect()
    }

    pub fn extent(&self) -> f64 {
        1.0 / self.grid().cells_per_axis(self.level()) as f64
    }

    pub fn neighbor(&self, axis: usize, direction: i32) -> Option<Self> {
        assert!(axis < self.dim(), "axis out of range");
        let n = self.grid().cells_per_axis(self.level()) as i64;
        let moved = self.coords[axis] as i64 + direction as i64;
        if moved < 0 || moved >= n {
            return None;
        }
        let mut out = *self;
        out.coords[axis] = moved as u32;
        Some(out)
    }

    /// The 2^d vertices of this cell, x varying fastest.
    pub fn vertices(&self) -> impl Iterator<Item = VertexKey> + '_ {
        (0..1usize << self.dim).map(move |corner| {
            let mut coords = self.coords;
            for (a, c) in coords.iter_mut().enumerate().take(self.dim()) {
                *c += ((corner >> a) & 1) as u32;
            }
            VertexKey { dim: self.dim, k: self.k, level: self.level, coords }
        })
    }

    pub fn vertex(&self, corner: usize) -> VertexKey {
        let mut coords = self.coords;
        for (a, c) in coords.iter_mut().enumerate().take(self.dim()) {
            *c += ((corner >> a) & 1) as u32;
        }
        VertexKey { dim: self.dim, k: self.k, level: self.level, coords }
    }

    /// Key usable for an SFC-ordered heap: level in the top byte, Morton-style
    /// mixed-radix position below.
    pub fn heap_key(&self) -> u64 {
        let n = self.grid().cells_per_axis(self.level()) as u128;
        let mut index: u128 = 0;
        for a in (0..self.dim()).rev() {
            index = index * n + self.coords[a] as u128;
        }
        ((self.level as u64) << 56) ^ (index as u64 & ((1u64 << 56) - 1))
    }

    pub fn parse(grid: Grid, text: &str) -> Result<Self, SfcError> {
        let text = text.trim();
        let mut code = CellCode::root(grid);
        if text.is_empty() {
            return Ok(code);
        }
        for group in text.split('|') {
            if group.len() != grid.dim() {
                return Err(SfcError::Parse(text.to_string()));
            }
            let mut local = [0u32; MAX_DIM];
            for (a, ch) in group.chars().enumerate() {
                let v = ch.to_digit(10).ok_or_else(|| SfcError::Parse(text.to_string()))?;
                if v >= grid.k() {
                    return Err(SfcError::Parse(text.to_string()));
                }
                local[a] = v;
            }
            code = code.try_child(grid.child_index(&local[..grid.dim()]))?;
        }
        Ok(code)
    }
}

impl fmt::Display for CellCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let grid = self.grid();
        for (i, digit) in self.digits().into_iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            let local = grid.child_local(digit);
            for c in &local[..grid.dim()] {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for CellCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CellCode(l{} {:?})", self.level, self.coords())
    }
}

/// A vertex identified by level and integer position in `[0, k^level]^d`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexKey {
    dim: u8,
    k: u8,
    level: u8,
    coords: [u32; MAX_DIM],
}

impl VertexKey {
    pub fn new(grid: Grid, level: usize, coords: &[u32]) -> Result<Self, SfcError> {
        if level > grid.max_level() {
            return Err(SfcError::LevelOverflow(level));
        }
        let n = grid.cells_per_axis(level);
        let mut c = [0u32; MAX_DIM];
        for a in 0..grid.dim() {
            let v = *coords.get(a).ok_or_else(|| SfcError::Parse(format!("{coords:?}")))?;
            if v as u64 > n {
                return Err(SfcError::Parse(format!("vertex coordinate {v} outside level {level}")));
            }
            c[a] = v;
        }
        Ok(VertexKey { dim: grid.dim, k: grid.k, level: level as u8, coords: c })
    }

    pub fn grid(&self) -> Grid {
        Grid { dim: self.dim, k: self.k }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn level(&self) -> usize {
        self.level as usize
    }

    pub fn coords(&self) -> &[u32] {
        &self.coords[..self.dim as usize]
    }

    pub fn position(&self) -> Vec<f64> {
        let n = self.grid().cells_per_axis(self.level()) as f64;
        self.coords().iter().map(|&c| c as f64 / n).collect()
    }

    /// Position scaled to a common finer level, for exact comparisons across levels.
    pub fn position_at(&self, level: usize) -> Option<Vec<u64>> {
        if level < self.level() {
            return None;
        }
        let s = self.grid().cells_per_axis(level - self.level());
        Some(self.coords().iter().map(|&c| c as u64 * s).collect())
    }

    pub fn on_domain_boundary(&self) -> bool {
        let n = self.grid().cells_per_axis(self.level()) as u32;
        self.coords().iter().any(|&c| c == 0 || c == n)
    }

    /// The same-level cells touching this vertex, `None` where outside the domain.
    /// Index bit `a` set means the cell lies on the upper side along axis `a`.
    pub fn adjacent_cells(&self) -> Vec<Option<CellCode>> {
        let n = self.grid().cells_per_axis(self.level()) as u32;
        (0..1usize << self.dim)
            .map(|side| {
                let mut coords = [0u32; MAX_DIM];
                for a in 0..self.dim() {
                    let upper = (side >> a) & 1 == 1;
                    let c = self.coords[a];
                    if upper {
                        if c >= n {
                            return None;
                        }
                        coords[a] = c;
                    } else {
                        if c == 0 {
                            return None;
                        }
                        coords[a] = c - 1;
                    }
                }
                Some(CellCode { dim: self.dim, k: self.k, level: self.level, coords })
            })
            .collect()
    }

    /// Number of same-level cells this vertex touches inside the unit hypercube.
    pub fn expected_adjacency(&self) -> usize {
        self.adjacent_cells().iter().filter(|c| c.is_some()).count()
    }

    pub fn parse(grid: Grid, text: &str) -> Result<Self, SfcError> {
        let bad = || SfcError::Parse(text.to_string());
        let rest = text.trim().strip_prefix("v:").ok_or_else(bad)?;
        let (level, coords) = rest.split_once(':').ok_or_else(bad)?;
        let level: usize = level.parse().map_err(|_| bad())?;
        let coords: Vec<u32> =
            coords.split(',').map(|c| c.parse::<u32>().map_err(|_| bad())).collect::<Result<_, _>>()?;
        if coords.len() != grid.dim() {
            return Err(bad());
        }
        VertexKey::new(grid, level, &coords)
    }
}

impl fmt::Display for VertexKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v:{}:", self.level)?;
        for (i, c) in self.coords().iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for VertexKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Curve {
    /// Lexicographic key order, x least significant.
    Morton,
    /// Two-dimensional Hilbert motif, k = 2 only.
    Hilbert,
    /// Boustrophedon Peano motif, k = 3, any d.
    Peano,
}

impl std::str::FromStr for Curve {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "morton" | "lexicographic" => Ok(Curve::Morton),
            "hilbert" => Ok(Curve::Hilbert),
            "peano" => Ok(Curve::Peano),
            other => Err(format!("unknown curve `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Orientation(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChildVisit {
    /// Geometric child index.
    pub child: usize,
    pub orientation: Orientation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraversalOrder {
    DepthFirst,
    BreadthFirst,
    LevelWiseDepthFirst,
}

impl std::str::FromStr for TraversalOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dfs" | "depth-first" => Ok(TraversalOrder::DepthFirst),
            "bfs" | "breadth-first" => Ok(TraversalOrder::BreadthFirst),
            "level-wise" | "levelwise" | "lwdfs" | "level-wise-dfs" => Ok(TraversalOrder::LevelWiseDepthFirst),
            other => Err(format!("unknown traversal order `{other}`")),
        }
    }
}

// Hilbert states are elements of the square's symmetry group, encoded as
// bit 0 = swap axes, bit 1 = flip x, bit 2 = flip y (swap applied first).
const H_ID: u32 = 0;
const H_TRANSPOSE: u32 = 1;
const H_ROT180: u32 = 6;
const HILBERT_BASE: [(u32, u32); 4] = [(0, 0), (0, 1), (1, 1), (1, 0)];
const HILBERT_CHILD: [u32; 4] = [H_TRANSPOSE, H_ID, H_TRANSPOSE, H_ROT180];

fn d4_apply(s: u32, (x, y): (u32, u32)) -> (u32, u32) {
    let (x, y) = if s & 1 == 1 { (y, x) } else { (x, y) };
    (x ^ ((s >> 1) & 1), y ^ ((s >> 2) & 1))
}

fn d4_compose(outer: u32, inner: u32) -> u32 {
    let probe = [(0, 0), (1, 0), (0, 1)];
    (0..8)
        .find(|&c| probe.iter().all(|&p| d4_apply(c, p) == d4_apply(outer, d4_apply(inner, p))))
        .expect("the group is closed")
}

/// Child visit permutation per orientation state.
#[derive(Clone, Debug)]
pub struct ChildOrdering {
    curve: Curve,
    grid: Grid,
    table: Vec<Vec<ChildVisit>>,
}

impl ChildOrdering {
    pub fn new(curve: Curve, grid: Grid) -> Result<Self, SfcError> {
        let incompatible = SfcError::IncompatibleOrdering { curve, k: grid.k(), dim: grid.dim() };
        match curve {
            Curve::Morton => {}
            Curve::Hilbert if grid.k() == 2 && grid.dim() == 2 => {}
            Curve::Peano if grid.k() == 3 => {}
            _ => return Err(incompatible),
        }
        let mut ordering = ChildOrdering { curve, grid, table: Vec::new() };
        let states = ordering.state_count();
        if states * grid.children() <= 1 << 18 {
            ordering.table = (0..states as u32).map(|s| ordering.compute(Orientation(s))).collect();
        }
        Ok(ordering)
    }

    pub fn curve(&self) -> Curve {
        self.curve
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn root_orientation(&self) -> Orientation {
        Orientation(0)
    }

    fn state_count(&self) -> usize {
        match self.curve {
            Curve::Morton => 1,
            Curve::Hilbert => 8,
            Curve::Peano => 1 << self.grid.dim(),
        }
    }

    /// Children in visit order together with their orientation states.
    pub fn visit(&self, state: Orientation) -> Result<Cow<'_, [ChildVisit]>, SfcError> {
        if state.0 as usize >= self.state_count() {
            return Err(SfcError::InvalidOrientation(state.0));
        }
        Ok(match self.table.get(state.0 as usize) {
            Some(row) => Cow::Borrowed(row.as_slice()),
            None => Cow::Owned(self.compute(state)),
        })
    }

    fn compute(&self, state: Orientation) -> Vec<ChildVisit> {
        let grid = self.grid;
        match self.curve {
            Curve::Morton => {
                (0..grid.children()).map(|child| ChildVisit { child, orientation: Orientation(0) }).collect()
            }
            Curve::Hilbert => (0..4)
                .map(|i| {
                    let (x, y) = d4_apply(state.0, HILBERT_BASE[i]);
                    ChildVisit {
                        child: (x + 2 * y) as usize,
                        orientation: Orientation(d4_compose(state.0, HILBERT_CHILD[i])),
                    }
                })
                .collect(),
            Curve::Peano => {
                let d = grid.dim();
                (0..grid.children())
                    .map(|i| {
                        let digits = grid.child_local(i);
                        let mut local = [0u32; MAX_DIM];
                        for j in 0..d {
                            let higher: u32 = digits[j + 1..d].iter().sum();
                            local[j] = if higher % 2 == 0 { digits[j] } else { 2 - digits[j] };
                        }
                        let total: u32 = local[..d].iter().sum();
                        let mut flips = 0u32;
                        for (j, &c) in local[..d].iter().enumerate() {
                            if (total - c) % 2 == 1 {
                                flips |= 1 << j;
                            }
                        }
                        let mut reflected = local;
                        for (j, c) in reflected[..d].iter_mut().enumerate() {
                            if (state.0 >> j) & 1 == 1 {
                                *c = 2 - *c;
                            }
                        }
                        ChildVisit {
                            child: grid.child_index(&reflected[..d]),
                            orientation: Orientation(state.0 ^ flips),
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Orders all cells of a tree. `refined` tells whether a cell has children.
pub fn linearize(
    root: CellCode,
    refined: &dyn Fn(&CellCode) -> bool,
    ordering: &ChildOrdering,
    order: TraversalOrder,
) -> Vec<CellCode> {
    let mut out = Vec::new();
    let kids = |c: &CellCode, o: Orientation| -> Vec<(CellCode, Orientation)> {
        ordering
            .visit(o)
            .expect("states produced by the ordering are valid")
            .iter()
            .map(|v| (c.child(v.child), v.orientation))
            .collect()
    };
    match order {
        TraversalOrder::DepthFirst => {
            fn rec(
                c: CellCode,
                o: Orientation,
                refined: &dyn Fn(&CellCode) -> bool,
                kids: &dyn Fn(&CellCode, Orientation) -> Vec<(CellCode, Orientation)>,
                out: &mut Vec<CellCode>,
            ) {
                out.push(c);
                if refined(&c) {
                    for (k, ko) in kids(&c, o) {
                        rec(k, ko, refined, kids, out);
                    }
                }
            }
            rec(root, ordering.root_orientation(), refined, &kids, &mut out);
        }
        TraversalOrder::BreadthFirst => {
            let mut queue = VecDeque::from([(root, ordering.root_orientation())]);
            while let Some((c, o)) = queue.pop_front() {
                out.push(c);
                if refined(&c) {
                    queue.extend(kids(&c, o));
                }
            }
        }
        TraversalOrder::LevelWiseDepthFirst => {
            fn rec(
                c: CellCode,
                o: Orientation,
                refined: &dyn Fn(&CellCode) -> bool,
                kids: &dyn Fn(&CellCode, Orientation) -> Vec<(CellCode, Orientation)>,
                out: &mut Vec<CellCode>,
            ) {
                if !refined(&c) {
                    return;
                }
                let block = kids(&c, o);
                out.extend(block.iter().map(|(k, _)| *k));
                for (k, ko) in block {
                    rec(k, ko, refined, kids, out);
                }
            }
            out.push(root);
            rec(root, ordering.root_orientation(), refined, &kids, &mut out);
        }
    }
    out
}

/// Leaves of a linearization, in order.
pub fn leaves(sequence: &[CellCode], refined: &HashSet<CellCode>) -> Vec<CellCode> {
    sequence.iter().filter(|c| !refined.contains(c)).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g2() -> Grid {
        Grid::new(2, Partitioning::Bi).unwrap()
    }

    fn g(dim: usize, k: u32) -> Grid {
        Grid::new(dim, Partitioning::from_k(k).unwrap()).unwrap()
    }

    #[test]
    fn morton_visits_in_key_order() {
        let o = ChildOrdering::new(Curve::Morton, g2()).unwrap();
        let order: Vec<usize> = o.visit(Orientation(0)).unwrap().iter().map(|v| v.child).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn curve_compatibility() {
        assert!(ChildOrdering::new(Curve::Hilbert, g(3, 2)).is_err());
        assert!(ChildOrdering::new(Curve::Hilbert, g(2, 3)).is_err());
        assert!(ChildOrdering::new(Curve::Peano, g(2, 2)).is_err());
        assert!(ChildOrdering::new(Curve::Peano, g(4, 3)).is_ok());
        assert!(Partitioning::from_k(4).is_err());
        assert!(Grid::new(1, Partitioning::Bi).is_err());
    }

    #[test]
    fn visit_orders_are_permutations() {
        for (curve, grid) in [(Curve::Hilbert, g2()), (Curve::Peano, g(2, 3)), (Curve::Peano, g(3, 3))] {
            let o = ChildOrdering::new(curve, grid).unwrap();
            for s in 0..o.state_count() as u32 {
                let mut seen: Vec<usize> = o.visit(Orientation(s)).unwrap().iter().map(|v| v.child).collect();
                seen.sort();
                assert_eq!(seen, (0..grid.children()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn peano_root_motif_is_boustrophedon() {
        let o = ChildOrdering::new(Curve::Peano, g(2, 3)).unwrap();
        let order: Vec<usize> = o.visit(Orientation(0)).unwrap().iter().map(|v| v.child).collect();
        assert_eq!(order, vec![0, 1, 2, 5, 4, 3, 6, 7, 8]);
    }

    #[test]
    fn invalid_orientation() {
        let o = ChildOrdering::new(Curve::Hilbert, g2()).unwrap();
        assert_eq!(o.visit(Orientation(8)).unwrap_err(), SfcError::InvalidOrientation(8));
    }

    #[test]
    fn display_and_parse() {
        let p = CellCode::encode(g2(), &[0, 1, 3]).unwrap();
        assert_eq!(p.to_string(), "00|10|11");
        assert_eq!(CellCode::parse(g2(), "00|10|11").unwrap(), p);
        assert_eq!(CellCode::root(g2()).to_string(), "");
        assert!(CellCode::parse(g2(), "02").is_err());
        let v = p.vertex(3);
        assert_eq!(VertexKey::parse(g2(), &v.to_string()).unwrap(), v);
    }

    #[test]
    fn vertex_adjacency_counts() {
        let v = VertexKey::new(g2(), 1, &[1, 1]).unwrap();
        assert_eq!(v.expected_adjacency(), 4);
        let corner = VertexKey::new(g2(), 1, &[0, 2]).unwrap();
        assert_eq!(corner.expected_adjacency(), 1);
        assert!(corner.on_domain_boundary());
        let edge = VertexKey::new(g(3, 3), 1, &[0, 1, 2]).unwrap();
        assert_eq!(edge.expected_adjacency(), 4);
    }

    #[test]
    fn heap_keys_distinguish_levels() {
        let root = CellCode::root(g2());
        assert_ne!(root.heap_key(), root.child(0).heap_key());
        assert_ne!(root.child(1).heap_key(), root.child(2).heap_key());
    }
}
