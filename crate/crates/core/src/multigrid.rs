//! Additive matrix-free multigrid for `-div(eps grad x) = f` with homogeneous
//! Dirichlet conditions on the unit cube.
//!
//! Vertices adjacent to at least one leaf of their level carry the solution
//! (composite unknowns); vertices whose adjacent cells are all refined carry a
//! coarse-grid correction. Each sweep accumulates residuals in `enterCell`,
//! restricts them at `touchVertexLastTime`, and applies the damped Jacobi
//! update of the previous sweep's residual at the next `touchVertexFirstTime`,
//! after replicas from other ranks have been merged.

use std::fmt;
use std::str::FromStr;

use crate::events::{
    Cell, Coarse, CommunicationSpec, ConcurrencySpec, Ctx, EventMapping, EventResult, Handover, MappingError, Policy,
    Vertex,
};
use crate::sfc::{CellCode, VertexKey};
use crate::spacetree::{Spacetree, TreeError};
use crate::storage::{Exchange, FieldId, FieldType, Layout, Persistence, Record, StorageError};
use crate::traversal::TraversalOptions;

/// Element stiffness matrix of the d-linear element on a cube of side `h`,
/// corners ordered with bit `a` selecting the upper side along axis `a`.
pub fn element_matrix(dim: usize, h: f64, eps: f64) -> Vec<f64> {
    let n = 1usize << dim;
    let stiff = [[1.0, -1.0], [-1.0, 1.0]];
    let mass = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
    let scale = eps * h.powi(dim as i32 - 2);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut sum = 0.0;
            for axis in 0..dim {
                let mut p = 1.0;
                for b in 0..dim {
                    let (bi, bj) = ((i >> b) & 1, (j >> b) & 1);
                    p *= if b == axis { stiff[bi][bj] } else { mass[bi][bj] };
                }
                sum += p;
            }
            a[i * n + j] = scale * sum;
        }
    }
    a
}

/// d-linear interpolation weights of the corners of `coarse` at `fine`.
pub fn weights(coarse: &CellCode, fine: &VertexKey) -> Vec<f64> {
    let dim = coarse.dim();
    let k = coarse.grid().k() as f64;
    let t: Vec<f64> = fine
        .coords()
        .iter()
        .zip(coarse.coords())
        .map(|(&f, &c)| (f as f64 - c as f64 * k) / k)
        .collect();
    (0..1usize << dim)
        .map(|corner| (0..dim).map(|a| if (corner >> a) & 1 == 1 { t[a] } else { 1.0 - t[a] }).product())
        .collect()
}

/// `P u` on the vertices of the children of `coarse` (in [`crate::spacetree::Structure::child_grid`] order).
pub fn prolongate(coarse: &CellCode, fine: &[VertexKey], u: &[f64]) -> Vec<f64> {
    fine.iter().map(|v| weights(coarse, v).iter().zip(u).map(|(w, x)| w * x).sum()).collect()
}

/// `R v` accumulated the way the sweep does it: every fine value is scattered
/// to the coarse corners with the interpolation weights.
pub fn restrict(coarse: &CellCode, fine: &[VertexKey], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 1 << coarse.dim()];
    for (key, val) in fine.iter().zip(v) {
        for (o, w) in out.iter_mut().zip(weights(coarse, key)) {
            *o += w * val;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Fields {
    x: FieldId,
    r: FieldId,
    d: FieldId,
    b: FieldId,
    rr: FieldId,
    dr: FieldId,
    nl: FieldId,
    rp: FieldId,
    dp: FieldId,
    rrp: FieldId,
    drp: FieldId,
    lp: FieldId,
    seen: FieldId,
    eps: FieldId,
    omega: FieldId,
    res2: FieldId,
}

/// The multigrid sweep.
#[derive(Clone, Debug)]
pub struct VCycle {
    pub omega: f64,
    /// Constant right-hand side `f`.
    pub f: f64,
    /// Coefficient given to cells that have none yet.
    pub eps: f64,
    ids: Option<Fields>,
    acc: f64,
    /// Free composite vertices counted in the last residual norm.
    pub unknowns: u64,
}

impl Default for VCycle {
    fn default() -> Self {
        VCycle::new(0.7, 1.0, 1.0)
    }
}

impl VCycle {
    pub fn new(omega: f64, f: f64, eps: f64) -> Self {
        VCycle { omega, f, eps, ids: None, acc: 0.0, unknowns: 0 }
    }

    fn ids(&self) -> Result<Fields, MappingError> {
        self.ids.ok_or_else(|| MappingError::new("multigrid fields not registered"))
    }

    /// Residual 2-norm stored in the state by the last sweep; it describes the
    /// iterate the sweep started from.
    pub fn residual_norm(layout: &Layout, state: &Record) -> Result<f64, StorageError> {
        Ok(state.f64(layout.state.id("res2")?).sqrt())
    }

    pub fn solution_field(layout: &Layout) -> Result<FieldId, StorageError> {
        layout.vertex.id("x")
    }
}

fn pure(v: &Vertex, ids: &Fields) -> bool {
    v.data.i64(ids.seen) == 1 && v.data.i64(ids.lp) == 0
}

fn composite(v: &Vertex, ids: &Fields) -> bool {
    v.data.i64(ids.seen) == 1 && v.data.i64(ids.lp) > 0
}

fn scatter(from: &Vertex, coarse: &mut Coarse, r: FieldId, d: FieldId, val_r: f64, val_d: f64) {
    let w = weights(&coarse.cell.code, &from.key);
    for (cv, w) in coarse.vertices.iter_mut().zip(w) {
        if w != 0.0 {
            cv.data.add_f64(r, w * val_r);
            cv.data.add_f64(d, w * val_d);
        }
    }
}

impl EventMapping for VCycle {
    fn register(&mut self, layout: &mut Layout) -> Result<(), StorageError> {
        use Exchange::*;
        use FieldType::*;
        use Persistence::*;
        let v = &mut layout.vertex;
        let ids = Fields {
            x: v.register("x", F64, Persistent, Local)?,
            r: v.register("r", F64, Discard, Parallelise)?,
            d: v.register("d", F64, Discard, Parallelise)?,
            b: v.register("b", F64, Persistent, Parallelise)?,
            rr: v.register("rr", F64, Discard, Parallelise)?,
            dr: v.register("dr", F64, Discard, Parallelise)?,
            nl: v.register("nl", I64, Discard, Parallelise)?,
            rp: v.register("rp", F64, Persistent, Parallelise)?,
            dp: v.register("dp", F64, Persistent, Parallelise)?,
            rrp: v.register("rrp", F64, Persistent, Parallelise)?,
            drp: v.register("drp", F64, Persistent, Parallelise)?,
            lp: v.register("lp", I64, Persistent, Parallelise)?,
            seen: v.register("seen", I64, Persistent, Local)?,
            eps: layout.cell.register("eps", F64, Persistent, Local)?,
            omega: layout.state.register("omega", F64, Persistent, Parallelise)?,
            res2: layout.state.register("res2", F64, Persistent, Parallelise)?,
        };
        self.ids = Some(ids);
        Ok(())
    }

    fn concurrency(&self) -> ConcurrencySpec {
        ConcurrencySpec {
            touch_first: Policy::Coloured(2),
            touch_last: Policy::Coloured(7),
            enter_cell: Policy::Coloured(2),
            leave_cell: Policy::Concurrent,
            hanging: Policy::Coloured(7),
            multiscale: Policy::Serial,
        }
    }

    fn communication(&self) -> CommunicationSpec {
        CommunicationSpec::everything()
    }

    fn begin_iteration(&mut self, state: &mut Record) -> EventResult {
        let ids = self.ids()?;
        state.set_f64(ids.omega, self.omega);
        state.set_f64(ids.res2, 0.0);
        self.acc = 0.0;
        self.unknowns = 0;
        Ok(())
    }

    fn end_iteration(&mut self, state: &mut Record) -> EventResult {
        let ids = self.ids()?;
        state.add_f64(ids.res2, self.acc);
        self.acc = 0.0;
        Ok(())
    }

    fn create_hanging_vertex(&mut self, _: &mut Ctx, v: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        let ids = self.ids()?;
        if let Some(co) = coarse {
            let w = weights(&co.cell.code, &v.key);
            let x: f64 = co.vertices.iter().zip(w).map(|(cv, w)| w * cv.data.f64(ids.x)).sum();
            v.data.set_f64(ids.x, x);
        }
        Ok(())
    }

    fn destroy_hanging_vertex(&mut self, _: &mut Ctx, v: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        let ids = self.ids()?;
        if let Some(mut co) = coarse {
            let (r, d) = (v.data.f64(ids.r), v.data.f64(ids.d));
            scatter(v, &mut co, ids.r, ids.d, r, d);
        }
        Ok(())
    }

    fn touch_vertex_first_time(&mut self, ctx: &mut Ctx, v: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        let ids = self.ids()?;
        let omega = ctx.state.f64(ids.omega);
        v.data.set_f64(ids.b, 0.0);
        if v.on_domain_boundary() {
            v.data.set_f64(ids.x, 0.0);
            return Ok(());
        }
        if composite(v, &ids) {
            let dp = v.data.f64(ids.dp);
            if dp == 0.0 {
                return Err(MappingError::new(format!("zero diagonal at free vertex {}", v.key)));
            }
            let rp = v.data.f64(ids.rp);
            v.data.add_f64(ids.x, omega * rp / dp);
            if v.neighbour_ranks().all(|r| r > ctx.rank) {
                self.acc += rp * rp;
                self.unknowns += 1;
            }
        } else if pure(v, &ids) {
            let drp = v.data.f64(ids.drp);
            let c = if drp != 0.0 { omega * v.data.f64(ids.rrp) / drp } else { 0.0 };
            v.data.set_f64(ids.x, c);
        }
        if let Some(co) = coarse {
            let w = weights(&co.cell.code, &v.key);
            let corr: f64 = co
                .vertices
                .iter()
                .zip(w)
                .filter(|(cv, _)| pure(cv, &ids) && !cv.hanging)
                .map(|(cv, w)| w * cv.data.f64(ids.x))
                .sum();
            v.data.add_f64(ids.x, corr);
        }
        Ok(())
    }

    fn enter_cell(&mut self, _: &mut Ctx, cell: &mut Cell, vs: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        let ids = self.ids()?;
        if cell.data.f64(ids.eps) <= 0.0 {
            cell.data.set_f64(ids.eps, self.eps);
        }
        if cell.refined {
            return Ok(());
        }
        let dim = cell.code.dim();
        let h = cell.extent();
        let a = element_matrix(dim, h, cell.data.f64(ids.eps));
        let n = vs.len();
        let x: Vec<f64> = vs.iter().map(|v| v.data.f64(ids.x)).collect();
        let load = self.f * h.powi(dim as i32) / n as f64;
        for (i, v) in vs.iter_mut().enumerate() {
            let ax: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum();
            v.data.add_f64(ids.r, load - ax);
            v.data.add_f64(ids.d, a[i * n + i]);
            v.data.add_f64(ids.b, load);
            v.data.add_i64(ids.nl, 1);
        }
        Ok(())
    }

    fn touch_vertex_last_time(&mut self, _: &mut Ctx, v: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        let ids = self.ids()?;
        let free = !v.on_domain_boundary();
        if let Some(mut co) = coarse {
            if free && v.data.i64(ids.seen) == 1 {
                let (r, d) = if composite(v, &ids) {
                    (v.data.f64(ids.r), v.data.f64(ids.d))
                } else {
                    (v.data.f64(ids.rr), v.data.f64(ids.dr))
                };
                scatter(v, &mut co, ids.rr, ids.dr, r, d);
            }
        }
        if pure(v, &ids) {
            v.data.set_f64(ids.x, 0.0);
        }
        for (from, to) in [(ids.r, ids.rp), (ids.d, ids.dp), (ids.rr, ids.rrp), (ids.dr, ids.drp)] {
            let val = v.data.f64(from);
            v.data.set_f64(to, if free { val } else { 0.0 });
        }
        v.data.set_i64(ids.lp, v.data.i64(ids.nl));
        v.data.set_i64(ids.seen, 1);
        Ok(())
    }

    fn merge_with_neighbour(&mut self, _: &mut Ctx, v: &mut Vertex, n: &Vertex, _: usize) -> EventResult {
        let ids = self.ids()?;
        for f in [ids.rp, ids.dp, ids.rrp, ids.drp] {
            v.data.add_f64(f, n.data.f64(f));
        }
        v.data.add_i64(ids.lp, n.data.i64(ids.lp));
        Ok(())
    }

    fn merge_with_worker(&mut self, state: &mut Record, local: &mut Handover, received: &Handover) -> EventResult {
        let ids = self.ids()?;
        *state = received.state.clone();
        for (l, r) in local.vertices.iter_mut().zip(&received.vertices) {
            l.data = r.data.clone();
            for f in [ids.r, ids.d, ids.rr, ids.dr] {
                l.data.set_f64(f, 0.0);
            }
            l.data.set_i64(ids.nl, 0);
        }
        for (l, r) in local.cells.iter_mut().zip(&received.cells) {
            l.data = r.data.clone();
        }
        Ok(())
    }

    fn merge_with_master(&mut self, state: &mut Record, vs: &mut [Vertex], received: &Handover, _: usize) -> EventResult {
        let ids = self.ids()?;
        state.add_f64(ids.res2, received.state.f64(ids.res2));
        for (v, r) in vs.iter_mut().zip(&received.vertices) {
            for f in [ids.r, ids.d, ids.rr, ids.dr] {
                v.data.add_f64(f, r.data.f64(f));
            }
            v.data.add_i64(ids.nl, r.data.i64(ids.nl));
        }
        Ok(())
    }

    fn thread_replicate(&self) -> Option<Box<dyn EventMapping>> {
        Some(Box::new(VCycle { acc: 0.0, unknowns: 0, ..self.clone() }))
    }

    fn merge_with_worker_thread(&mut self, replica: Box<dyn EventMapping>) {
        if let Ok(r) = replica.into_any().downcast::<VCycle>() {
            self.acc += r.acc;
            self.unknowns += r.unknowns;
        }
    }
}

/// Refinement predicate on (cell corner, extent, level).
#[derive(Clone, Debug, PartialEq)]
pub enum Criterion {
    None,
    /// Uniform refinement of every cell with level below the bound.
    LevelBelow(usize),
    /// Cells touching the origin corner, down to the given level.
    Corner(usize),
    /// Cells containing the point, down to the given level.
    Point(Vec<f64>, usize),
}

impl Criterion {
    pub fn wants(&self, corner: &[f64], extent: f64, level: usize) -> bool {
        match self {
            Criterion::None => false,
            Criterion::LevelBelow(n) => level < *n,
            Criterion::Corner(n) => level < *n && corner.iter().all(|&c| c == 0.0),
            Criterion::Point(p, n) => {
                level < *n && corner.iter().zip(p).all(|(&c, &x)| x >= c - 1e-12 && x <= c + extent + 1e-12)
            }
        }
    }

    /// Deepest level the criterion asks for, if bounded.
    pub fn depth(&self) -> usize {
        match self {
            Criterion::None => 0,
            Criterion::LevelBelow(n) | Criterion::Corner(n) | Criterion::Point(_, n) => *n,
        }
    }
}

impl FromStr for Criterion {
    type Err = String;

    /// `none`, `level<N`, `corner<N`, `point(x,y[,z])<N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if s == "none" || s.is_empty() {
            return Ok(Criterion::None);
        }
        let (head, n) = s.rsplit_once('<').ok_or_else(|| format!("bad criterion `{s}`"))?;
        let n: usize = n.parse().map_err(|_| format!("bad level bound in `{s}`"))?;
        match head {
            "level" => Ok(Criterion::LevelBelow(n)),
            "corner" => Ok(Criterion::Corner(n)),
            _ => {
                let inner = head
                    .strip_prefix("point(")
                    .and_then(|x| x.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown criterion `{head}`"))?;
                let p = inner
                    .split(',')
                    .map(|x| x.parse::<f64>().map_err(|_| format!("bad coordinate `{x}`")))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Criterion::Point(p, n))
            }
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::None => f.write_str("none"),
            Criterion::LevelBelow(n) => write!(f, "level<{n}"),
            Criterion::Corner(n) => write!(f, "corner<{n}"),
            Criterion::Point(p, n) => {
                let p: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                write!(f, "point({})<{n}", p.join(","))
            }
        }
    }
}

/// Refines leaves the criterion asks for, up to `max_level`.
#[derive(Clone, Debug)]
pub struct SetupStartGrid {
    pub criterion: Criterion,
    pub max_level: usize,
    pub eps: f64,
    eps_id: Option<FieldId>,
    /// Set when the level cap stopped a refinement the criterion wanted.
    pub capped: bool,
}

impl SetupStartGrid {
    pub fn new(criterion: Criterion, max_level: usize) -> Self {
        SetupStartGrid { criterion, max_level, eps: 1.0, eps_id: None, capped: false }
    }
}

impl EventMapping for SetupStartGrid {
    fn register(&mut self, layout: &mut Layout) -> Result<(), StorageError> {
        self.eps_id = Some(layout.cell.register("eps", FieldType::F64, Persistence::Persistent, Exchange::Local)?);
        Ok(())
    }

    fn create_cell(&mut self, _: &mut Ctx, cell: &mut Cell, _: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        if let Some(id) = self.eps_id {
            cell.data.set_f64(id, self.eps);
        }
        Ok(())
    }

    fn enter_cell(&mut self, ctx: &mut Ctx, cell: &mut Cell, _: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        if let Some(id) = self.eps_id {
            if cell.data.f64(id) <= 0.0 {
                cell.data.set_f64(id, self.eps);
            }
        }
        if cell.refined || !self.criterion.wants(&cell.corner(), cell.extent(), cell.level()) {
            return Ok(());
        }
        if cell.level() >= self.max_level {
            self.capped = true;
        } else {
            ctx.refine(cell.code);
        }
        Ok(())
    }
}

/// Sweeps with [`SetupStartGrid`] until the grid stops changing. Returns the
/// number of sweeps and whether the level cap was hit.
pub fn setup_start_grid(tree: &mut Spacetree, criterion: &Criterion, max_level: usize) -> Result<(usize, bool), TreeError> {
    let mut ad = crate::events::Adapter::new(vec![Box::new(SetupStartGrid::new(criterion.clone(), max_level))])
        .map_err(TreeError::Storage)?;
    let opts = TraversalOptions::default();
    let mut sweeps = 0;
    loop {
        let before = tree.cell_count();
        let st = tree.traverse(&mut ad, &opts)?;
        sweeps += 1;
        if st.commands_applied == 0 && tree.carry().is_empty() && tree.cell_count() == before {
            break;
        }
    }
    let capped = ad.find::<SetupStartGrid>().is_some_and(|s| s.capped);
    Ok((sweeps, capped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_matrix_is_the_bilinear_laplacian() {
        let a = element_matrix(2, 0.37, 1.0);
        let expect = [
            [4.0, -1.0, -1.0, -2.0],
            [-1.0, 4.0, -2.0, -1.0],
            [-1.0, -2.0, 4.0, -1.0],
            [-2.0, -1.0, -1.0, 4.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((a[i * 4 + j] - expect[i][j] / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn element_rows_sum_to_zero() {
        for dim in 1..=3 {
            let a = element_matrix(dim, 0.25, 2.0);
            let n = 1 << dim;
            for i in 0..n {
                assert!((0..n).map(|j| a[i * n + j]).sum::<f64>().abs() < 1e-14);
            }
        }
    }

    #[test]
    fn criteria_parse() {
        assert_eq!("level<2".parse::<Criterion>().unwrap(), Criterion::LevelBelow(2));
        assert_eq!("corner < 4".parse::<Criterion>().unwrap(), Criterion::Corner(4));
        assert_eq!("none".parse::<Criterion>().unwrap(), Criterion::None);
        let p: Criterion = "point(0.5,0.25)<3".parse().unwrap();
        assert_eq!(p.to_string(), "point(0.5,0.25)<3");
        assert!("blob<2".parse::<Criterion>().is_err());
    }
}
