//! Regular subtrees: the height grammar, colour classes and task pools.

use std::collections::{BTreeMap, HashMap};

use crate::sfc::{CellCode, VertexKey};
use crate::spacetree::{Marker, Structure};

/// Runs independent jobs; the caller waits for all of them.
pub trait TaskPool: Send + Sync {
    fn workers(&self) -> usize;
    fn run_all<'s>(&self, jobs: Vec<Box<dyn FnOnce() + Send + 's>>);
}

pub struct SerialPool;

impl TaskPool for SerialPool {
    fn workers(&self) -> usize {
        1
    }

    fn run_all<'s>(&self, jobs: Vec<Box<dyn FnOnce() + Send + 's>>) {
        for j in jobs {
            j();
        }
    }
}

/// One scoped OS thread per job, at most `workers` jobs at a time.
pub struct ThreadPool {
    workers: usize,
}

impl ThreadPool {
    pub fn new(workers: usize) -> Self {
        ThreadPool { workers: workers.max(1) }
    }
}

impl TaskPool for ThreadPool {
    fn workers(&self) -> usize {
        self.workers
    }

    fn run_all<'s>(&self, jobs: Vec<Box<dyn FnOnce() + Send + 's>>) {
        let mut jobs = jobs.into_iter();
        loop {
            let batch: Vec<_> = jobs.by_ref().take(self.workers).collect();
            if batch.is_empty() {
                break;
            }
            std::thread::scope(|s| {
                for j in batch {
                    s.spawn(j);
                }
            });
        }
    }
}

/// Colour of a lattice position: coordinates taken mod `kc`, as a base-`kc` number.
pub fn colour(coords: &[u32], kc: u8) -> usize {
    let kc = kc.max(1) as usize;
    coords.iter().rev().fold(0, |acc, &x| acc * kc + (x as usize % kc))
}

/// Splits items into colour classes, ascending by colour, keeping input order within a class.
pub fn colour_classes<T>(items: Vec<T>, kc: u8, coords: impl Fn(&T) -> Vec<u32>) -> Vec<Vec<T>> {
    let mut classes: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for it in items {
        classes.entry(colour(&coords(&it), kc)).or_default().push(it);
    }
    classes.into_values().collect()
}

/// Number of cell pairs in `cells` that share a vertex.
pub fn shared_vertex_pairs(cells: &[CellCode]) -> u64 {
    let mut by_vertex: HashMap<VertexKey, u64> = HashMap::new();
    for c in cells {
        for v in c.vertices() {
            *by_vertex.entry(v).or_default() += 1;
        }
    }
    let mut pairs: HashMap<(usize, usize), ()> = HashMap::new();
    let index: HashMap<CellCode, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    for (i, c) in cells.iter().enumerate() {
        for v in c.vertices() {
            if by_vertex[&v] < 2 {
                continue;
            }
            for d in v.adjacent_cells().into_iter().flatten() {
                if let Some(&j) = index.get(&d) {
                    if j > i {
                        pairs.insert((i, j), ());
                    }
                }
            }
        }
    }
    pairs.len() as u64
}

/// Regularity markers of a static grid: leaves 0, refined cells whose
/// children all carry height `h` get `h + 1`, everything else is irregular.
/// Leaves next to a hanging vertex inside their parent are irregular.
pub fn heights(structure: &Structure) -> HashMap<CellCode, Marker> {
    let mut cells = structure.cells();
    cells.sort_by_key(|c| std::cmp::Reverse(c.level()));
    let grid = structure.grid();
    let k = grid.k();
    let mut out: HashMap<CellCode, Marker> = HashMap::new();
    for c in cells {
        let m = if !structure.is_refined(&c) {
            let hanging_inside = c.parent().is_some_and(|p| {
                c.vertices().any(|v| {
                    v.coords().iter().zip(p.coords()).all(|(&x, &pc)| x > pc * k && x < pc * k + k)
                        && structure.is_hanging(&v)
                })
            });
            if hanging_inside {
                Marker::Bottom
            } else {
                Marker::Height(0)
            }
        } else {
            let hs: Vec<Marker> = (0..grid.children()).map(|i| out[&c.child(i)]).collect();
            match hs[0] {
                Marker::Height(h) if hs.iter().all(|m| *m == Marker::Height(h)) && h < 254 => Marker::Height(h + 1),
                _ => Marker::Bottom,
            }
        };
        out.insert(c, m);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfc::{Grid, Partitioning};

    #[test]
    fn colours_cover_two_by_two() {
        let got: Vec<usize> = [[0, 0], [1, 0], [0, 1], [1, 1], [2, 3]].iter().map(|c| colour(c, 2)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2]);
    }

    #[test]
    fn same_colour_cells_share_no_vertex() {
        let grid = Grid::new(2, Partitioning::from_k(3).unwrap()).unwrap();
        let s = Structure::regular(grid, 2);
        let leaves: Vec<CellCode> = s.cells().into_iter().filter(|c| c.level() == 2).collect();
        for class in colour_classes(leaves, 2, |c| c.coords().to_vec()) {
            assert_eq!(shared_vertex_pairs(&class), 0);
        }
    }

    #[test]
    fn regular_tree_heights() {
        let grid = Grid::new(2, Partitioning::from_k(3).unwrap()).unwrap();
        let s = Structure::regular(grid, 3);
        let h = heights(&s);
        assert_eq!(h[&CellCode::root(grid)], Marker::Height(3));
    }

    #[test]
    fn thread_pool_runs_everything() {
        let pool = ThreadPool::new(3);
        let mut out = vec![0; 7];
        let jobs: Vec<Box<dyn FnOnce() + Send + '_>> =
            out.iter_mut().enumerate().map(|(i, x)| Box::new(move || *x = i * 2) as Box<dyn FnOnce() + Send>).collect();
        pool.run_all(jobs);
        assert_eq!(out, vec![0, 2, 4, 6, 8, 10, 12]);
    }
}
