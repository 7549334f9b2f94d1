//! Event traces and the partial-order checker.
//!
//! Text form, one event per line after a `# dim=<d> k=<k>` header:
//! `t=<n> <event> level=<l> id=<id>` where the id is `c:<digits>` (root `c:root`),
//! a vertex key `v:<level>:<x>,<y>..` or `-`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::events::EventKind;
use crate::sfc::{CellCode, Grid, Partitioning, VertexKey};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing `# dim=<d> k=<k>` header")]
    Header,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TraceId {
    Cell(CellCode),
    Vertex(VertexKey),
    None,
}

impl fmt::Display for TraceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceId::Cell(c) if c.is_root() => f.write_str("c:root"),
            TraceId::Cell(c) => write!(f, "c:{c}"),
            TraceId::Vertex(v) => write!(f, "{v}"),
            TraceId::None => f.write_str("-"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub t: u64,
    pub kind: EventKind,
    pub level: usize,
    pub id: TraceId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    grid: Grid,
    events: Vec<TraceEvent>,
    limit: Option<usize>,
    dropped: u64,
    next_t: u64,
}

impl Trace {
    pub fn new(grid: Grid) -> Self {
        Trace { grid, events: Vec::new(), limit: None, dropped: 0, next_t: 0 }
    }

    /// Keeps at most `limit` events; later ones are counted but not stored.
    pub fn with_limit(grid: Grid, limit: usize) -> Self {
        Trace { limit: Some(limit), ..Trace::new(grid) }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn push(&mut self, kind: EventKind, level: usize, id: TraceId) {
        let t = self.next_t;
        self.next_t += 1;
        if self.limit.is_some_and(|l| self.events.len() >= l) {
            self.dropped += 1;
            return;
        }
        self.events.push(TraceEvent { t, kind, level, id });
    }

    pub fn clear(&mut self) {
        self.events.clear();
        self.dropped = 0;
        self.next_t = 0;
    }

    /// Timestamp of the first `kind` event on `id`.
    pub fn time_of(&self, kind: EventKind, id: TraceId) -> Option<u64> {
        self.events.iter().find(|e| e.kind == kind && e.id == id).map(|e| e.t)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# dim={} k={}\n", self.grid.dim(), self.grid.k());
        for e in &self.events {
            let _ = writeln!(s, "t={} {} level={} id={}", e.t, e.kind, e.level, e.id);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut grid = None;
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let err = |m: &str| TraceError::Parse { line: i + 1, message: m.to_string() };
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let mut dim = None;
                let mut k = None;
                for part in h.split_whitespace() {
                    if let Some(x) = part.strip_prefix("dim=") {
                        dim = x.parse::<usize>().ok();
                    } else if let Some(x) = part.strip_prefix("k=") {
                        k = x.parse::<u32>().ok();
                    }
                }
                if let (Some(d), Some(k)) = (dim, k) {
                    let p = Partitioning::from_k(k).map_err(|e| err(&e.to_string()))?;
                    grid = Some(Grid::new(d, p).map_err(|e| err(&e.to_string()))?);
                }
                continue;
            }
            let g = grid.ok_or(TraceError::Header)?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(err("expected `t=<n> <event> level=<l> id=<id>`"));
            }
            let t = parts[0].strip_prefix("t=").and_then(|x| x.parse().ok()).ok_or_else(|| err("bad timestamp"))?;
            let kind = EventKind::from_name(parts[1]).ok_or_else(|| err("unknown event"))?;
            let level = parts[2].strip_prefix("level=").and_then(|x| x.parse().ok()).ok_or_else(|| err("bad level"))?;
            let id = parts[3].strip_prefix("id=").ok_or_else(|| err("bad id"))?;
            let id = if id == "-" {
                TraceId::None
            } else if id == "c:root" {
                TraceId::Cell(CellCode::root(g))
            } else if let Some(c) = id.strip_prefix("c:") {
                TraceId::Cell(CellCode::parse(g, c).map_err(|e| err(&e.to_string()))?)
            } else {
                TraceId::Vertex(VertexKey::parse(g, id).map_err(|e| err(&e.to_string()))?)
            };
            events.push(TraceEvent { t, kind, level, id });
        }
        let grid = grid.ok_or(TraceError::Header)?;
        let next_t = events.last().map_or(0, |e| e.t + 1);
        Ok(Trace { grid, events, limit: None, dropped: 0, next_t })
    }

    /// Violations of the event partial order; empty when the trace is consistent.
    pub fn check(&self) -> Vec<String> {
        Checker::new(self).run()
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[derive(Default)]
struct Times {
    first: Vec<u64>,
    last: Vec<u64>,
    created: Vec<u64>,
    destroyed: Vec<u64>,
}

struct Checker {
    enter: BTreeMap<CellCode, Vec<u64>>,
    leave: HashMap<CellCode, Vec<u64>>,
    vertices: HashMap<VertexKey, Times>,
    out: Vec<String>,
}

/// Each persistent vertex has one first and one last touch; a hanging vertex
/// is recreated for every cell that needs it. Vertex events of the finer
/// level are attributed to the coarse cell whose enter/leave window contains
/// them; a hanging instance belongs to the window of the cell's parent.
impl Checker {
    fn new(trace: &Trace) -> Self {
        let mut c = Checker { enter: BTreeMap::new(), leave: HashMap::new(), vertices: HashMap::new(), out: Vec::new() };
        for e in &trace.events {
            match (e.kind, e.id) {
                (EventKind::EnterCell, TraceId::Cell(x)) => c.enter.entry(x).or_default().push(e.t),
                (EventKind::LeaveCell, TraceId::Cell(x)) => c.leave.entry(x).or_default().push(e.t),
                (EventKind::TouchVertexFirstTime, TraceId::Vertex(v)) => c.vertices.entry(v).or_default().first.push(e.t),
                (EventKind::TouchVertexLastTime, TraceId::Vertex(v)) => c.vertices.entry(v).or_default().last.push(e.t),
                (EventKind::CreateHangingVertex, TraceId::Vertex(v)) => c.vertices.entry(v).or_default().created.push(e.t),
                (EventKind::DestroyHangingVertex, TraceId::Vertex(v)) => {
                    c.vertices.entry(v).or_default().destroyed.push(e.t)
                }
                _ => {}
            }
        }
        c
    }

    fn enter(&self, c: &CellCode) -> Option<u64> {
        self.enter.get(c).and_then(|v| v.first().copied())
    }

    fn leave(&self, c: &CellCode) -> Option<u64> {
        self.leave.get(c).and_then(|v| v.first().copied())
    }

    fn window(&self, c: &CellCode) -> (u64, u64) {
        match c.parent() {
            Some(p) => (self.enter(&p).unwrap_or(0), self.leave(&p).unwrap_or(u64::MAX)),
            None => (0, u64::MAX),
        }
    }

    fn persistent(&self, v: &VertexKey) -> bool {
        self.vertices.get(v).is_some_and(|t| !t.first.is_empty())
    }

    /// First-touch role of `v` as seen from cell `c`.
    fn first(&self, c: &CellCode, v: &VertexKey) -> Option<u64> {
        let t = self.vertices.get(v)?;
        if let Some(&f) = t.first.first() {
            return Some(f);
        }
        let (lo, _) = self.window(c);
        let e = self.enter(c)?;
        t.created.iter().copied().filter(|&x| x > lo && x < e).max()
    }

    fn last(&self, c: &CellCode, v: &VertexKey) -> Option<u64> {
        let t = self.vertices.get(v)?;
        if let Some(&l) = t.last.first() {
            return Some(l);
        }
        let (_, hi) = self.window(c);
        let e = self.leave(c)?;
        t.destroyed.iter().copied().filter(|&x| x > e && x < hi).min()
    }

    fn fail(&mut self, m: String) {
        self.out.push(m);
    }

    fn run(mut self) -> Vec<String> {
        for (c, ts) in &self.enter {
            let leaves = self.leave.get(c).map_or(0, |l| l.len());
            if ts.len() != 1 || leaves != 1 {
                self.out.push(format!("cell {c}: {} enterCell and {leaves} leaveCell events", ts.len()));
            }
        }
        for (v, t) in &self.vertices {
            if !t.first.is_empty() && (t.first.len() != 1 || t.last.len() != 1) {
                self.out.push(format!(
                    "vertex {v}: {} touchVertexFirstTime and {} touchVertexLastTime events",
                    t.first.len(),
                    t.last.len()
                ));
            }
        }
        let cells: Vec<CellCode> = self.enter.keys().copied().collect();
        for c in &cells {
            self.check_cell(c);
        }
        self.out
    }

    fn check_cell(&mut self, a: &CellCode) {
        let (Some(ea), Some(la)) = (self.enter(a), self.leave(a)) else {
            return self.fail(format!("cell {a} is never left"));
        };
        if ea >= la {
            self.fail(format!("leaveCell({a}) precedes enterCell({a})"));
        }
        if let Some(p) = a.parent() {
            if let Some(ep) = self.enter(&p) {
                if ep >= ea {
                    self.fail(format!("enterCell({a}) precedes enterCell of its parent"));
                }
            }
        }
        let verts: Vec<VertexKey> = a.vertices().collect();
        for v in &verts {
            match self.first(a, v) {
                Some(f) if f < ea => {}
                _ => self.fail(format!("no first touch of {v} before enterCell({a})")),
            }
            match self.last(a, v) {
                Some(l) if l > la => {}
                _ => self.fail(format!("no last touch of {v} after leaveCell({a})")),
            }
            if a.is_root() {
                continue;
            }
            self.check_attribution(a, v);
        }
    }

    fn check_attribution(&mut self, a: &CellCode, v: &VertexKey) {
        let (Some(f), Some(l)) = (self.first(a, v), self.last(a, v)) else {
            return;
        };
        let owners: Vec<CellCode> = if self.persistent(v) {
            let mut ps: Vec<CellCode> = v.adjacent_cells().into_iter().flatten().filter_map(|c| c.parent()).collect();
            ps.sort();
            ps.dedup();
            ps
        } else {
            a.parent().into_iter().collect()
        };
        let inside = |c: &CellCode, t: u64| matches!((self.enter(c), self.leave(c)), (Some(e), Some(x)) if e < t && t < x);
        let (Some(fo), Some(lo)) = (
            owners.iter().copied().find(|c| inside(c, f)),
            owners.iter().copied().find(|c| inside(c, l)),
        ) else {
            return self.fail(format!("touches of {v} lie outside every coarse cell containing it"));
        };
        for w in fo.vertices().collect::<Vec<_>>() {
            if self.first(&fo, &w).is_none_or(|x| x >= f) {
                self.fail(format!("first touch of {w} does not precede first touch of {v}"));
            }
        }
        for w in lo.vertices().collect::<Vec<_>>() {
            if self.last(&lo, &w).is_none_or(|x| x <= l) {
                self.fail(format!("last touch of {v} does not precede last touch of {w}"));
            }
        }
    }
}
