mod common;

use std::collections::BTreeMap;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spacetree::distsim::*;
use spacetree::events::{Adapter, EventMapping};
use spacetree::fixture::Fixture;
use spacetree::multigrid::VCycle;
use spacetree::sfc::*;
use spacetree::spacetree::{Spacetree, Structure};
use spacetree::traversal::TraversalOptions;

fn census() -> Vec<Box<dyn EventMapping>> {
    vec![Box::new(Census::default())]
}

fn vcycle() -> Vec<Box<dyn EventMapping>> {
    vec![Box::new(VCycle::new(0.6, 1.0, 1.0))]
}

fn tree_for(s: &Structure, curve: Curve, order: TraversalOrder, factory: Factory) -> Spacetree {
    let ad = Adapter::new(factory()).unwrap();
    Spacetree::from_structure(s.clone(), curve, order, ad.layout().clone()).unwrap()
}

fn field(sim: &Simulator, name: &str) -> BTreeMap<VertexKey, u64> {
    let (_, vs) = sim.gather().unwrap();
    let layout = sim.adapter(0).layout().clone();
    let id = layout.vertex.id(name).unwrap();
    vs.into_iter().map(|(k, r)| (k, r.data.bits()[id.index()])).collect()
}

fn cell_field(sim: &Simulator, name: &str) -> BTreeMap<CellCode, u64> {
    let (cs, _) = sim.gather().unwrap();
    let id = sim.adapter(0).layout().cell.id(name).unwrap();
    cs.into_iter().map(|(k, r)| (k, r.data.bits()[id.index()])).collect()
}

fn fixture_structure() -> Structure {
    let f = Fixture::lettered();
    Structure::from_refined(f.grid(), f.refined().iter().copied()).unwrap()
}

#[test]
fn fixture_split_at_b() {
    let s = fixture_structure();
    let tree = tree_for(&s, Curve::Morton, TraversalOrder::DepthFirst, &census);
    let topo = Topology::greedy(&s, 2).unwrap();
    let mut sim = Simulator::new(&tree, topo, &census, false, TraversalOptions::serial()).unwrap();
    assert_eq!(sim.rank_cells(), vec![16, 9]);
    for _ in 0..3 {
        let r = sim.traverse().unwrap();
        assert_eq!(r.rank_cells.iter().sum::<usize>(), 25);
    }
    assert_eq!(sim.topology().master(1), Some(0));
    let report = sim.report();
    assert!(report.channels[&Channel::VerticalDown] == 3 && report.channels[&Channel::VerticalUp] == 3);
    assert!(report.channels[&Channel::Horizontal] > 0);
    for ((from, to, ch), _) in sim.messages() {
        if matches!(ch, Channel::VerticalDown | Channel::VerticalUp) {
            assert!(sim.topology().master(*to) == Some(*from) || sim.topology().master(*from) == Some(*to));
        }
    }
}

fn census_run(s: &Structure, order: TraversalOrder, ranks: usize, sweeps: usize) -> (BTreeMap<VertexKey, u64>, BTreeMap<CellCode, u64>, u64) {
    let tree = tree_for(s, Curve::Morton, order, &census);
    let topo = Topology::greedy(s, ranks).unwrap();
    let mut sim = Simulator::new(&tree, topo, &census, false, TraversalOptions::serial()).unwrap();
    for _ in 0..sweeps {
        sim.traverse().unwrap();
    }
    let late: u64 = (0..ranks).map(|r| sim.adapter(r).find::<Census>().unwrap().late).sum();
    (field(&sim, "total"), cell_field(&sim, "visits"), late)
}

#[test]
fn integer_census_is_rank_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut shapes = vec![fixture_structure()];
    for i in 0..6 {
        shapes.push(random_structure(&mut rng, grid(2 + i % 2, 2 + (i / 2 % 2) as u32), 3, 400));
    }
    for s in &shapes {
        for order in [TraversalOrder::DepthFirst, TraversalOrder::LevelWiseDepthFirst] {
            let one = census_run(s, order, 1, 4);
            for ranks in [2, 3, 5] {
                let many = census_run(s, order, ranks, 4);
                assert_eq!(one.0, many.0);
                assert_eq!(one.1, many.1);
                assert_eq!(many.2, 0, "a replica arrived in the wrong sweep");
            }
        }
    }
}

#[test]
fn single_rank_matches_plain_traversal() {
    let s = fixture_structure();
    let mut tree = tree_for(&s, Curve::Morton, TraversalOrder::DepthFirst, &census);
    let mut sim = Simulator::new(&tree, Topology::single(1), &census, false, TraversalOptions::serial()).unwrap();
    let mut ad = Adapter::new(census()).unwrap();
    for _ in 0..3 {
        tree.traverse(&mut ad, &TraversalOptions::serial()).unwrap();
        sim.traverse().unwrap();
    }
    let gathered = sim.to_tree(&tree).unwrap();
    let layout = tree.layout().clone();
    let strip = |t: &Spacetree| {
        let mut vs = t.vertex_map();
        for r in vs.values_mut() {
            layout.vertex.reset_discard(&mut r.data);
        }
        vs
    };
    assert_eq!(strip(&gathered), strip(&tree));
    assert_eq!(gathered.cell_map().unwrap(), tree.cell_map().unwrap());
}

fn mg_iterates(s: &Structure, order: TraversalOrder, ranks: usize, n: usize) -> Vec<(f64, BTreeMap<VertexKey, f64>)> {
    let tree = tree_for(s, Curve::Peano, order, &vcycle);
    let topo = Topology::greedy(s, ranks).unwrap();
    let mut sim = Simulator::new(&tree, topo, &vcycle, false, TraversalOptions::serial()).unwrap();
    let x = sim.adapter(0).layout().vertex.id("x").unwrap();
    let mut out = Vec::new();
    for _ in 0..n {
        sim.traverse().unwrap();
        let layout = sim.adapter(0).layout().clone();
        let res = VCycle::residual_norm(&layout, sim.state(0)).unwrap();
        let xs = (0..ranks)
            .flat_map(|r| sim.rank_vertex_map(r).unwrap())
            .map(|(k, rec)| (k, rec.data.f64(x)))
            .collect::<Vec<_>>();
        let mut m = BTreeMap::new();
        for (k, v) in xs {
            if let Some(old) = m.insert(k, v) {
                assert!((old - v).abs() <= 1e-12, "replicas of {k} disagree");
            }
        }
        out.push((res, m));
    }
    out
}

#[test]
fn multigrid_iterates_do_not_depend_on_ranks() {
    let g = grid(2, 3);
    let s = Structure::regular(g, 2);
    for order in [TraversalOrder::DepthFirst, TraversalOrder::LevelWiseDepthFirst] {
        let one = mg_iterates(&s, order, 1, 12);
        let mut tree = tree_for(&s, Curve::Peano, order, &vcycle);
        let mut ad = Adapter::new(vcycle()).unwrap();
        let x = ad.layout().vertex.id("x").unwrap();
        for (res, xs) in &one {
            tree.traverse(&mut ad, &TraversalOptions::serial()).unwrap();
            assert!((VCycle::residual_norm(tree.layout(), tree.state()).unwrap() - res).abs() <= 1e-12);
            for (k, rec) in tree.vertex_map() {
                assert!((rec.data.f64(x) - xs[&k]).abs() <= 1e-12);
            }
        }
        for ranks in [2, 4] {
            let many = mg_iterates(&s, order, ranks, 12);
            for ((r1, x1), (r2, x2)) in one.iter().zip(&many) {
                assert!((r1 - r2).abs() <= 1e-12, "{r1} vs {r2}");
                assert_eq!(x1.len(), x2.len());
                for (k, v) in x1 {
                    assert!((v - x2[k]).abs() <= 1e-12, "{k}: {v} vs {}", x2[k]);
                }
            }
        }
    }
}

#[test]
fn adaptive_multigrid_iterates_do_not_depend_on_ranks() {
    let g = grid(2, 3);
    let mut tree = Spacetree::new(g, Curve::Peano, TraversalOrder::DepthFirst, Adapter::new(vcycle()).unwrap().layout().clone()).unwrap();
    spacetree::multigrid::setup_start_grid(&mut tree, &"corner<3".parse().unwrap(), 3).unwrap();
    let s = tree.structure().clone();
    let one = mg_iterates(&s, TraversalOrder::DepthFirst, 1, 10);
    let many = mg_iterates(&s, TraversalOrder::DepthFirst, 3, 10);
    for ((r1, x1), (r2, x2)) in one.iter().zip(&many) {
        assert!((r1 - r2).abs() <= 1e-12);
        for (k, v) in x1 {
            assert!((v - x2[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn skipped_reductions_never_block() {
    let s = Structure::regular(grid(2, 3), 2);
    for skip in [false, true] {
        let tree = tree_for(&s, Curve::Peano, TraversalOrder::DepthFirst, &vcycle);
        let topo = Topology::greedy(&s, 4).unwrap();
        let mut sim = Simulator::new(&tree, topo, &vcycle, skip, TraversalOptions::serial()).unwrap();
        for _ in 0..3 {
            sim.traverse().unwrap();
        }
        let report = sim.report();
        if skip {
            assert_eq!(report.worker_waits(), 0);
            assert_eq!(report.master_waits(), 0);
            assert_eq!(report.channels.get(&Channel::VerticalUp).copied().unwrap_or(0), 0);
        } else {
            assert!(report.worker_waits() > 0);
            assert!(report.master_waits() > 0);
        }
    }
}

#[test]
fn greedy_balances_a_regular_tree() {
    let s = Structure::regular(grid(2, 3), 3);
    let topo = Topology::greedy(&s, 4).unwrap();
    let owners = topo.owners(&s);
    let mut loads = [0usize; 4];
    for r in owners.values() {
        loads[*r] += 1;
    }
    let (max, min) = (*loads.iter().max().unwrap(), *loads.iter().min().unwrap());
    assert!(min > 0 && max as f64 / min as f64 <= 2.0, "{loads:?}");
    assert_eq!(loads.iter().sum::<usize>(), s.cell_count());
}

#[test]
fn surplus_ranks_stay_idle() {
    let s = Structure::regular(grid(2, 2), 1);
    let tree = tree_for(&s, Curve::Morton, TraversalOrder::DepthFirst, &census);
    let topo = Topology::greedy(&s, 9).unwrap();
    let mut sim = Simulator::new(&tree, topo, &census, false, TraversalOptions::serial()).unwrap();
    sim.traverse().unwrap();
    assert!(sim.rank_cells().contains(&0));
    assert_eq!(sim.rank_cells().iter().sum::<usize>(), 5);
}

#[test]
fn fork_then_join_restores_everything() {
    let s = fixture_structure();
    let f = Fixture::lettered();
    let tree = tree_for(&s, Curve::Morton, TraversalOrder::DepthFirst, &vcycle);
    let topo = Topology::with_cuts(&s, 3, &[(vec![f.code("B").unwrap()], 1)]).unwrap();
    let mut a = Simulator::new(&tree, topo.clone(), &vcycle, false, TraversalOptions::serial()).unwrap();
    let mut b = Simulator::new(&tree, topo.clone(), &vcycle, false, TraversalOptions::serial()).unwrap();
    for _ in 0..3 {
        a.traverse().unwrap();
        b.traverse().unwrap();
    }
    a.settle().unwrap();
    let layout = a.adapter(0).layout().clone();
    let persistent = |sim: &Simulator| {
        let (cs, mut vs) = sim.gather().unwrap();
        for r in vs.values_mut() {
            layout.vertex.reset_discard(&mut r.data);
        }
        (cs, vs)
    };
    let before = persistent(&a);
    let d = f.code("D").unwrap();
    let fork = a.rebalance(&Move { roots: vec![d], to: 2 }).unwrap();
    assert_eq!(fork.cells, 13);
    let join = a.rebalance(&Move { roots: vec![d], to: 0 }).unwrap();
    assert_eq!(join.cells, 13);
    assert_eq!(a.topology(), &topo);
    assert_eq!(persistent(&a), before);
    for _ in 0..3 {
        a.traverse().unwrap();
        b.traverse().unwrap();
    }
    assert_eq!(field(&a, "x"), field(&b, "x"));
    assert!(a.history.iter().all(|h| h.iter().sum::<usize>() == 25));
}

#[test]
fn migration_moves_one_pair_per_entity() {
    let s = fixture_structure();
    let f = Fixture::lettered();
    let b = f.code("B").unwrap();
    let tree = tree_for(&s, Curve::Morton, TraversalOrder::DepthFirst, &census);
    let topo = Topology::with_cuts(&s, 3, &[(vec![b], 1)]).unwrap();
    let mut sim = Simulator::new(&tree, topo, &census, false, TraversalOptions::serial()).unwrap();
    sim.traverse().unwrap();
    let held = sim.rank_vertex_map(1).unwrap().len();
    let m = sim.rebalance(&Move { roots: vec![b], to: 2 }).unwrap();
    assert_eq!(m.cells, 9);
    assert_eq!(m.vertices, held);
    assert_eq!(m.copy_events, 9 + held);
    assert_eq!(m.merge_events, m.copy_events);
    assert_eq!(sim.rank_cells(), vec![16, 0, 9]);
    sim.traverse().unwrap();
    assert_eq!(sim.rank_cells(), vec![16, 0, 9]);
    assert!(sim.rebalance(&Move { roots: vec![f.code("C").unwrap()], to: 2 }).is_err());
    assert!(sim.rebalance(&Move { roots: vec![f.code("I").unwrap(), f.code("J").unwrap()], to: 1 }).is_err());
}

#[test]
fn heap_messages_wait_for_the_lag() {
    let s = fixture_structure();
    let tree = tree_for(&s, Curve::Morton, TraversalOrder::DepthFirst, &census);
    let mut sim = Simulator::new(&tree, Topology::greedy(&s, 2).unwrap(), &census, false, TraversalOptions::serial()).unwrap();
    sim.set_heap_lag(2);
    sim.post_heap(1, 0, 7, vec![1.5, 2.5]);
    assert!(sim.take_heap(0).is_empty());
    sim.traverse().unwrap();
    assert!(sim.take_heap(0).is_empty());
    sim.traverse().unwrap();
    assert_eq!(sim.take_heap(0), vec![(1, 7, vec![1.5, 2.5])]);
}
