mod common;

use std::collections::BTreeMap;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spacetree::events::*;
use spacetree::fixture::Fixture;
use spacetree::regular;
use spacetree::sfc::*;
use spacetree::spacetree::{Spacetree, Structure};
use spacetree::storage::Layout;
use spacetree::trace::{Trace, TraceId};
use spacetree::traversal::TraversalOptions;

fn fixture_tree(curve: Curve, order: TraversalOrder, layout: Layout) -> Spacetree {
    Spacetree::from_fixture(&Fixture::lettered(), curve, order, layout).unwrap()
}

#[test]
fn fixture_traversals_are_consistent() {
    for curve in [Curve::Morton, Curve::Hilbert] {
        for order in [TraversalOrder::DepthFirst, TraversalOrder::LevelWiseDepthFirst] {
            let mut ad = tally_adapter(Tally::default());
            let mut tree = fixture_tree(curve, order, ad.layout().clone());
            for _ in 0..3 {
                let mut trace = Trace::new(tree.grid());
                let st = tree.traverse_traced(&mut ad, &TraversalOptions::default(), Some(&mut trace)).unwrap();
                assert_eq!(trace.check(), Vec::<String>::new(), "{curve:?} {order:?}");
                assert_eq!(st.count(EventKind::EnterCell), 25);
                assert_eq!(st.count(EventKind::LeaveCell), 25);
                let (persistent, _) = tree.structure().vertex_census();
                assert_eq!(st.count(EventKind::TouchVertexFirstTime), persistent.len() as u64);
                assert_eq!(st.count(EventKind::TouchVertexLastTime), persistent.len() as u64);
                assert_eq!(tree.cell_count(), 25);
                assert!(st.max_hanging_creations <= 3);
            }
        }
    }
}

#[test]
fn example_relations_hold() {
    let f = Fixture::lettered();
    let g = f.grid();
    let mut ad = tally_adapter(Tally::default());
    let mut tree = fixture_tree(Curve::Morton, TraversalOrder::DepthFirst, ad.layout().clone());
    let mut trace = Trace::new(g);
    tree.traverse_traced(&mut ad, &TraversalOptions::serial(), Some(&mut trace)).unwrap();
    let cell = |l: &str| TraceId::Cell(f.code(l).unwrap());
    let opqr = TraceId::Vertex(VertexKey::new(g, 3, &[3, 1]).unwrap());
    let hlgj = TraceId::Vertex(VertexKey::new(g, 2, &[2, 1]).unwrap());
    let t = |k, id| trace.time_of(k, id).unwrap_or_else(|| panic!("no {k} on {id}"));
    use EventKind::*;
    assert!(t(TouchVertexFirstTime, hlgj) < t(TouchVertexFirstTime, opqr));
    for c in ["O", "P", "Q", "R"] {
        assert!(t(TouchVertexFirstTime, opqr) < t(EnterCell, cell(c)));
        assert!(t(EnterCell, cell("G")) < t(EnterCell, cell(c)));
        assert!(t(EnterCell, cell(c)) < t(LeaveCell, cell(c)));
        assert!(t(LeaveCell, cell(c)) < t(TouchVertexLastTime, opqr));
    }
    assert!(t(TouchVertexLastTime, opqr) < t(TouchVertexLastTime, hlgj));
    let hlpu = TraceId::Vertex(VertexKey::new(g, 3, &[4, 2]).unwrap());
    assert!(trace.time_of(CreateHangingVertex, hlpu).is_some());
    assert!(trace.time_of(TouchVertexFirstTime, hlpu).is_none());
}

#[test]
fn random_trees_respect_the_partial_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..24 {
        let g = grid(2 + i % 2, 2 + (i / 2 % 2) as u32);
        let s = random_structure(&mut rng, g, 4, 1500);
        for order in [TraversalOrder::DepthFirst, TraversalOrder::LevelWiseDepthFirst] {
            let mut ad = tally_adapter(Tally::default());
            let mut tree = Spacetree::from_structure(s.clone(), Curve::Morton, order, ad.layout().clone()).unwrap();
            for _ in 0..2 {
                let mut trace = Trace::new(g);
                let st = tree.traverse_traced(&mut ad, &TraversalOptions::default(), Some(&mut trace)).unwrap();
                let bad = trace.check();
                assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
                assert!(st.max_hanging_creations < 1 << g.dim());
            }
            assert_eq!(tree.structure(), &s);
        }
    }
}

#[test]
fn stored_markers_match_the_grammar() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..12 {
        let g = grid(2, 2 + (i % 2) as u32);
        let s = random_structure(&mut rng, g, 4, 1500);
        let mut ad = tally_adapter(Tally::default());
        let mut tree =
            Spacetree::from_structure(s.clone(), Curve::Morton, TraversalOrder::DepthFirst, ad.layout().clone()).unwrap();
        tree.traverse(&mut ad, &TraversalOptions::serial()).unwrap();
        let oracle = regular::heights(&s);
        for (c, rec) in tree.cell_records().unwrap() {
            assert_eq!(rec.marker, oracle[&c], "{c}");
        }
    }
}

struct RefineOnce(CellCode);

impl EventMapping for RefineOnce {
    fn enter_cell(&mut self, ctx: &mut Ctx, cell: &mut Cell, _: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        if cell.code == self.0 && !cell.refined {
            ctx.refine(cell.code);
        }
        Ok(())
    }
}

struct EraseAll(CellCode);

impl EventMapping for EraseAll {
    fn enter_cell(&mut self, ctx: &mut Ctx, cell: &mut Cell, _: &mut [Vertex], _: Option<Coarse>) -> EventResult {
        if cell.code == self.0 && cell.refined {
            ctx.erase(cell.code);
        }
        Ok(())
    }
}

#[test]
fn refine_and_erase_round_trip() {
    let f = Fixture::lettered();
    let target = f.code("I").unwrap();
    let mut ad = Adapter::new(vec![Box::new(RefineOnce(target))]).unwrap();
    let mut tree = fixture_tree(Curve::Morton, TraversalOrder::DepthFirst, ad.layout().clone());
    let st = tree.traverse(&mut ad, &TraversalOptions::default()).unwrap();
    assert_eq!(st.count(EventKind::CreateCell), 4);
    assert_eq!(tree.cell_count(), 29);
    assert!(tree.structure().is_refined(&target));
    let mut trace = Trace::new(f.grid());
    tree.traverse_traced(&mut ad, &TraversalOptions::default(), Some(&mut trace)).unwrap();
    assert!(trace.check().is_empty());
    let mut er = Adapter::new(vec![Box::new(EraseAll(target))]).unwrap();
    let mut total = BTreeMap::new();
    for _ in 0..3 {
        let st = tree.traverse(&mut er, &TraversalOptions::default()).unwrap();
        for (k, n) in st.events {
            *total.entry(k).or_insert(0) += n;
        }
    }
    assert_eq!(total.get(&EventKind::DestroyCell), Some(&4));
    assert_eq!(tree.cell_count(), 25);
    assert_eq!(tree.structure(), &Structure::from_refined(f.grid(), f.refined().iter().copied()).unwrap());
}

#[test]
fn serialization_round_trips() {
    let mut ad = tally_adapter(Tally::default());
    let mut tree = fixture_tree(Curve::Hilbert, TraversalOrder::LevelWiseDepthFirst, ad.layout().clone());
    tree.traverse(&mut ad, &TraversalOptions::default()).unwrap();
    let bytes = tree.serialize();
    let back = Spacetree::deserialize(&bytes).unwrap();
    assert_eq!(back, tree);
    assert_eq!(back.serialize(), bytes);
}

#[test]
fn orders_produce_identical_payload() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..6 {
        let g = grid(2, 3);
        let s = random_structure(&mut rng, g, 3, 800);
        let mut maps = Vec::new();
        for order in [TraversalOrder::DepthFirst, TraversalOrder::LevelWiseDepthFirst] {
            let mut ad = tally_adapter(Tally::default());
            let mut tree = Spacetree::from_structure(s.clone(), Curve::Peano, order, ad.layout().clone()).unwrap();
            tree.traverse(&mut ad, &TraversalOptions::serial()).unwrap();
            maps.push(tree.cell_map().unwrap().into_iter().map(|(c, r)| (c, r.data)).collect::<BTreeMap<_, _>>());
        }
        assert_eq!(maps[0], maps[1]);
    }
}
