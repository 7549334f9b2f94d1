mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spacetree::events::Policy;
use spacetree::fixture::Fixture;
use spacetree::sfc::*;
use spacetree::spacetree::{Marker, Spacetree, Structure};
use spacetree::trace::Trace;
use spacetree::traversal::TraversalOptions;

#[test]
fn refined_j_unrolls_twenty_cells() {
    let f = Fixture::lettered();
    let mut refined = f.refined().clone();
    for l in ["S", "T", "U", "V"] {
        refined.insert(f.code(l).unwrap());
    }
    let s = Structure::from_refined(f.grid(), refined).unwrap();
    let mut ad = tally_adapter(Tally::concurrent());
    let mut tree = Spacetree::from_structure(s, Curve::Morton, TraversalOrder::DepthFirst, ad.layout().clone()).unwrap();
    let j = f.code("J").unwrap();
    let st = tree.traverse(&mut ad, &TraversalOptions::default()).unwrap();
    assert_eq!(tree.marker(&j).unwrap(), Some(Marker::Height(2)));
    assert_eq!(st.unrolled_regions, vec![20]);
    assert_eq!(tree.marker(&f.code("D").unwrap()).unwrap(), Some(Marker::Bottom));
}

fn run(s: &Structure, order: TraversalOrder, options: &TraversalOptions, policy: Policy) -> (Spacetree, u64) {
    let mut ad = tally_adapter(Tally::with(policy));
    let mut tree = Spacetree::from_structure(s.clone(), Curve::Morton, order, ad.layout().clone()).unwrap();
    let mut regions = 0;
    for _ in 0..2 {
        let mut trace = Trace::new(s.grid());
        let st = tree.traverse_traced(&mut ad, options, Some(&mut trace)).unwrap();
        assert!(trace.check().is_empty());
        regions += st.unrolled_regions.len() as u64;
    }
    (tree, regions)
}

#[test]
fn unrolled_concurrent_matches_serial() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut unrolled = 0;
    for i in 0..20 {
        let g = grid(2 + i % 2, 2 + (i / 2 % 2) as u32);
        let s = random_with_regular(&mut rng, g, 1200);
        for order in [TraversalOrder::DepthFirst, TraversalOrder::LevelWiseDepthFirst] {
            let (serial, _) = run(&s, order, &TraversalOptions::serial(), Policy::Concurrent);
            let opts = TraversalOptions { unroll_min_f: Some(1), colouring: Policy::Concurrent, workers: 4 };
            let (par, n) = run(&s, order, &opts, Policy::Concurrent);
            unrolled += n;
            assert_eq!(serial.cell_map().unwrap(), par.cell_map().unwrap());
            assert_eq!(serial.vertex_map(), par.vertex_map());
        }
    }
    assert!(unrolled > 0);
}

#[test]
fn colouring_keeps_cells_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..10 {
        let g = grid(2 + i % 2, 3);
        let s = random_with_regular(&mut rng, g, 1500);
        let opts = TraversalOptions { unroll_min_f: Some(1), colouring: Policy::Concurrent, workers: 3 };
        let mut ad = tally_adapter(Tally::with(Policy::Coloured(2)));
        let mut tree = Spacetree::from_structure(s, Curve::Peano, TraversalOrder::DepthFirst, ad.layout().clone()).unwrap();
        let st = tree.traverse(&mut ad, &opts).unwrap();
        assert_eq!(st.colour_conflicts, 0);
        if !st.unrolled_regions.is_empty() {
            assert!(st.coloured_phases > 0);
        }
    }
}
