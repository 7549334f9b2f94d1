#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spacetree::events::*;
use spacetree::sfc::*;
use spacetree::spacetree::Structure;
use spacetree::storage::*;

pub fn grid(dim: usize, k: u32) -> Grid {
    Grid::new(dim, Partitioning::from_k(k).unwrap()).unwrap()
}

/// Random refinement up to `levels` levels below the root, at most about `budget` cells.
pub fn random_structure(rng: &mut ChaCha8Rng, g: Grid, levels: usize, budget: usize) -> Structure {
    let root = CellCode::root(g);
    let mut refined = HashSet::from([root]);
    let mut frontier = vec![root];
    let mut cells = 1 + g.children();
    let p = rng.gen_range(0.15..0.6);
    while let Some(c) = frontier.pop() {
        for i in 0..g.children() {
            let k = c.child(i);
            if k.level() < levels && cells + g.children() <= budget && rng.gen_bool(p) {
                refined.insert(k);
                cells += g.children();
                frontier.push(k);
            }
        }
    }
    Structure::from_refined(g, refined).unwrap()
}

/// Integer mapping whose result does not depend on the order of same-level events.
#[derive(Clone, Default)]
pub struct Tally {
    pub ids: Option<(FieldId, FieldId, FieldId, FieldId, FieldId)>,
    pub policy: Option<Policy>,
    pub events: u64,
}

impl Tally {
    pub fn concurrent() -> Self {
        Tally { policy: Some(Policy::Concurrent), ..Default::default() }
    }

    pub fn with(policy: Policy) -> Self {
        Tally { policy: Some(policy), ..Default::default() }
    }
}

impl EventMapping for Tally {
    fn register(&mut self, layout: &mut Layout) -> Result<(), StorageError> {
        let p = Persistence::Persistent;
        let e = Exchange::Parallelise;
        let a = layout.vertex.register("a", FieldType::I64, p, e)?;
        let b = layout.vertex.register("b", FieldType::I64, p, e)?;
        let c = layout.vertex.register("c", FieldType::I64, p, e)?;
        let x = layout.cell.register("x", FieldType::I64, p, e)?;
        let y = layout.cell.register("y", FieldType::I64, p, e)?;
        self.ids = Some((a, b, c, x, y));
        Ok(())
    }

    fn concurrency(&self) -> ConcurrencySpec {
        self.policy.map_or(ConcurrencySpec::serial(), ConcurrencySpec::uniform)
    }

    fn create_hanging_vertex(&mut self, _: &mut Ctx, v: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        let (a, ..) = self.ids.unwrap();
        self.events += 1;
        if let Some(co) = coarse {
            let s: i64 = co.vertices.iter().fold(0i64, |s, w| s.wrapping_add(w.data.i64(a)));
            v.data.set_i64(a, s);
        }
        Ok(())
    }

    fn destroy_hanging_vertex(&mut self, _: &mut Ctx, v: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        let (_, b, c, ..) = self.ids.unwrap();
        self.events += 1;
        if let Some(co) = coarse {
            for w in co.vertices.iter_mut() {
                let n = w.data.i64(c).wrapping_add(v.data.i64(b));
                w.data.set_i64(c, n);
            }
        }
        Ok(())
    }

    fn touch_vertex_first_time(&mut self, _: &mut Ctx, v: &mut Vertex, _: Option<Coarse>) -> EventResult {
        let (a, ..) = self.ids.unwrap();
        self.events += 1;
        v.data.set_i64(a, v.data.i64(a).wrapping_mul(3).wrapping_add(1));
        Ok(())
    }

    fn touch_vertex_last_time(&mut self, _: &mut Ctx, v: &mut Vertex, coarse: Option<Coarse>) -> EventResult {
        let (_, b, c, ..) = self.ids.unwrap();
        self.events += 1;
        if let Some(co) = coarse {
            for w in co.vertices.iter_mut() {
                let n = w.data.i64(c).wrapping_add(v.data.i64(b));
                w.data.set_i64(c, n);
            }
        }
        Ok(())
    }

    fn enter_cell(&mut self, _: &mut Ctx, cell: &mut Cell, vs: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        let (_, b, _, x, _) = self.ids.unwrap();
        self.events += 1;
        let inc = cell.data.i64(x).wrapping_add(1);
        for v in vs.iter_mut() {
            v.data.set_i64(b, v.data.i64(b).wrapping_add(inc));
        }
        cell.data.set_i64(x, inc);
        Ok(())
    }

    fn leave_cell(&mut self, _: &mut Ctx, cell: &mut Cell, vs: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        let (a, _, _, _, y) = self.ids.unwrap();
        self.events += 1;
        let s = vs.iter().fold(0i64, |s, v| s.wrapping_add(v.data.i64(a)));
        cell.data.set_i64(y, cell.data.i64(y).wrapping_mul(7).wrapping_add(s));
        Ok(())
    }

    fn thread_replicate(&self) -> Option<Box<dyn EventMapping>> {
        Some(Box::new(Tally { events: 0, ..self.clone() }))
    }

    fn merge_with_worker_thread(&mut self, replica: Box<dyn EventMapping>) {
        if let Ok(r) = replica.into_any().downcast::<Tally>() {
            self.events += r.events;
        }
    }
}

pub fn tally_adapter(t: Tally) -> Adapter {
    Adapter::new(vec![Box::new(t)]).unwrap()
}

/// Random tree with a few fully refined patches of height 1..=3 grafted on.
pub fn random_with_regular(rng: &mut ChaCha8Rng, g: Grid, budget: usize) -> Structure {
    let base = random_structure(rng, g, 2, budget / 3);
    let mut refined: HashSet<CellCode> = base.refined().clone();
    let mut cells = base.cell_count();
    let leaves: Vec<CellCode> = {
        let mut l: Vec<CellCode> = base.cells().into_iter().filter(|c| !base.is_refined(c)).collect();
        l.sort();
        l
    };
    for _ in 0..3 {
        let c = leaves[rng.gen_range(0..leaves.len())];
        let h = rng.gen_range(1..=3usize);
        let mut level = vec![c];
        for _ in 0..h {
            let add = level.len() * g.children();
            if cells + add > budget {
                break;
            }
            let mut next = Vec::new();
            for x in &level {
                refined.insert(*x);
                next.extend((0..g.children()).map(|i| x.child(i)));
            }
            cells += add;
            level = next;
        }
    }
    Structure::from_refined(g, refined).unwrap()
}

/// Composite d-linear finite element system on the leaves of `s` with
/// homogeneous Dirichlet values, hanging vertices eliminated by
/// interpolation. Returns the solution keyed by position at the finest level.
pub fn fem_solution(s: &Structure, eps: f64, f: f64) -> std::collections::HashMap<Vec<u64>, f64> {
    use spacetree::multigrid::{element_matrix, weights};
    use std::collections::HashMap;
    let fine = s.max_level();
    let leaves: Vec<CellCode> = s.cells().into_iter().filter(|c| !s.is_refined(c)).collect();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut expand_cache: HashMap<VertexKey, Vec<(usize, f64)>> = HashMap::new();

    fn expand(
        s: &Structure,
        v: VertexKey,
        owner: CellCode,
        fine: usize,
        index: &mut HashMap<Vec<u64>, usize>,
        cache: &mut HashMap<VertexKey, Vec<(usize, f64)>>,
    ) -> Vec<(usize, f64)> {
        if v.on_domain_boundary() {
            return Vec::new();
        }
        if let Some(e) = cache.get(&v) {
            return e.clone();
        }
        let out = if s.is_hanging(&v) {
            let p = owner.parent().unwrap();
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for (corner, w) in weights(&p, &v).into_iter().enumerate() {
                if w.abs() < 1e-15 {
                    continue;
                }
                for (i, x) in expand(s, p.vertex(corner), p, fine, index, cache) {
                    acc.push((i, w * x));
                }
            }
            acc
        } else {
            let pos = v.position_at(fine).unwrap();
            let n = index.len();
            vec![(*index.entry(pos).or_insert(n), 1.0)]
        };
        cache.insert(v, out.clone());
        out
    }

    let mut elems = Vec::new();
    for c in &leaves {
        let e: Vec<Vec<(usize, f64)>> =
            c.vertices().map(|v| expand(s, v, *c, fine, &mut index, &mut expand_cache)).collect();
        elems.push((*c, e));
    }
    let n = index.len();
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    let dim = s.grid().dim();
    for (c, e) in &elems {
        let h = c.extent();
        let k = element_matrix(dim, h, eps);
        let nv = e.len();
        let load = f * h.powi(dim as i32) / nv as f64;
        for i in 0..nv {
            for &(gi, wi) in &e[i] {
                b[gi] += wi * load;
                for j in 0..nv {
                    for &(gj, wj) in &e[j] {
                        a[gi * n + gj] += wi * wj * k[i * nv + j];
                    }
                }
            }
        }
    }
    let x = dense_solve(a, b);
    index.into_iter().map(|(p, i)| (p, x[i])).collect()
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if p != col {
            for j in 0..n {
                a.swap(p * n + j, col * n + j);
            }
            b.swap(p, col);
        }
        let d = a[col * n + col];
        for i in col + 1..n {
            let m = a[i * n + col] / d;
            if m == 0.0 {
                continue;
            }
            for j in col..n {
                a[i * n + j] -= m * a[col * n + j];
            }
            b[i] -= m * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i * n + j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i * n + i];
    }
    x
}

/// Integer census: every persistent vertex sums, over past sweeps, the number
/// of leaves around it. Boundary replicas are merged like partial sums and
/// must arrive exactly one sweep after they were written.
#[derive(Clone, Default)]
pub struct Census {
    pub ids: Option<(FieldId, FieldId, FieldId, FieldId, FieldId)>,
    pub sweeps: i64,
    pub late: u64,
}

impl EventMapping for Census {
    fn register(&mut self, layout: &mut Layout) -> Result<(), StorageError> {
        use Exchange::*;
        use FieldType::I64;
        use Persistence::*;
        let n = layout.vertex.register("n", I64, Discard, Parallelise)?;
        let np = layout.vertex.register("np", I64, Persistent, Parallelise)?;
        let total = layout.vertex.register("total", I64, Persistent, Local)?;
        let stamp = layout.vertex.register("stamp", I64, Persistent, Parallelise)?;
        let visits = layout.cell.register("visits", I64, Persistent, Local)?;
        self.ids = Some((n, np, total, stamp, visits));
        Ok(())
    }

    fn communication(&self) -> CommunicationSpec {
        CommunicationSpec::everything()
    }

    fn begin_iteration(&mut self, _: &mut Record) -> EventResult {
        self.sweeps += 1;
        Ok(())
    }

    fn merge_with_neighbour(&mut self, _: &mut Ctx, v: &mut Vertex, n: &Vertex, _: usize) -> EventResult {
        let (_, np, _, stamp, _) = self.ids.unwrap();
        if n.data.i64(stamp) != self.sweeps - 1 {
            self.late += 1;
        }
        v.data.add_i64(np, n.data.i64(np));
        Ok(())
    }

    fn touch_vertex_first_time(&mut self, _: &mut Ctx, v: &mut Vertex, _: Option<Coarse>) -> EventResult {
        let (_, np, total, ..) = self.ids.unwrap();
        v.data.add_i64(total, v.data.i64(np));
        Ok(())
    }

    fn touch_vertex_last_time(&mut self, _: &mut Ctx, v: &mut Vertex, _: Option<Coarse>) -> EventResult {
        let (n, np, _, stamp, _) = self.ids.unwrap();
        v.data.set_i64(np, v.data.i64(n));
        v.data.set_i64(stamp, self.sweeps);
        Ok(())
    }

    fn enter_cell(&mut self, _: &mut Ctx, cell: &mut Cell, vs: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        let (n, _, _, _, visits) = self.ids.unwrap();
        cell.data.add_i64(visits, 1);
        if !cell.refined {
            for v in vs.iter_mut() {
                v.data.add_i64(n, 1);
            }
        }
        Ok(())
    }

    fn thread_replicate(&self) -> Option<Box<dyn EventMapping>> {
        Some(Box::new(self.clone()))
    }
}
