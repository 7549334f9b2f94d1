use std::collections::BTreeSet;

use spacetree::events::{Adapter, EventMapping};
use spacetree::fixture::Fixture;
use spacetree::multigrid::VCycle;
use spacetree::plot::Plot;
use spacetree::sfc::*;
use spacetree::spacetree::Spacetree;
use spacetree::storage::Layout;
use spacetree::traversal::TraversalOptions;

fn section(text: &str, head: &str) -> Vec<String> {
    let mut lines = text.lines().skip_while(|l| !l.starts_with(head));
    let n: usize = lines.next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    lines.take(n).map(str::to_string).collect()
}

fn plot_fixture(all_levels: bool) -> (Fixture, String) {
    let f = Fixture::lettered();
    let mut tree = Spacetree::from_fixture(&f, Curve::Morton, TraversalOrder::DepthFirst, Layout::default()).unwrap();
    let p = if all_levels { Plot::new(None).all_levels() } else { Plot::new(None) };
    let mut a = Adapter::new(vec![Box::new(p) as Box<dyn EventMapping>]).unwrap();
    tree.traverse(&mut a, &TraversalOptions::serial()).unwrap();
    (f, a.find::<Plot>().unwrap().last().unwrap().to_string())
}

#[test]
fn fixture_leaves_are_plotted() {
    let (f, text) = plot_fixture(false);
    let leaves: Vec<CellCode> = f.refined().iter().flat_map(|c| (0..4).map(|i| c.child(i))).filter(|c| !f.refined().contains(c)).collect();
    assert_eq!(leaves.len(), 19);
    assert_eq!(section(&text, "CELL_TYPES").len(), 19);

    let keys: BTreeSet<VertexKey> = leaves.iter().flat_map(|c| c.vertices().collect::<Vec<_>>()).collect();
    let points = section(&text, "POINTS");
    assert_eq!(points.len(), keys.len());
    let mut want: Vec<String> = keys
        .iter()
        .map(|k| {
            let x = k.position();
            format!("{} {} 0", x[0], x[1])
        })
        .collect();
    let mut got = points.clone();
    want.sort();
    got.sort();
    assert_eq!(got, want);
}

#[test]
fn all_levels_adds_refined_cells() {
    let (f, text) = plot_fixture(true);
    assert_eq!(section(&text, "CELL_TYPES").len(), f.cell_count());
}

#[test]
fn plot_follows_the_solver_in_the_adapter() {
    let grid = Grid::new(2, Partitioning::from_k(3).unwrap()).unwrap();
    let mut a = Adapter::new(vec![
        Box::new(VCycle::default()) as Box<dyn EventMapping>,
        Box::new(Plot::new(None).with_field("b")),
    ])
    .unwrap();
    let mut tree = Spacetree::regular(grid, 1, Curve::Peano, TraversalOrder::DepthFirst, a.layout().clone()).unwrap();
    tree.traverse(&mut a, &TraversalOptions::serial()).unwrap();
    let text = a.find::<Plot>().unwrap().last().unwrap().to_string();
    assert!(text.contains("POINT_DATA 16"));
    let vals: Vec<f64> = text.lines().skip_while(|l| !l.starts_with("SCALARS b")).skip(2).take(16).map(|l| l.parse().unwrap()).collect();
    assert!(vals.iter().any(|&v| v > 0.0));
}

#[test]
fn unknown_field_is_rejected() {
    assert!(Adapter::new(vec![Box::new(Plot::new(None).with_field("x")) as Box<dyn EventMapping>]).is_err());
}

#[test]
fn plots_are_written_to_disk() {
    let dir = std::env::temp_dir().join(format!("plot-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("grid.vtk");
    let grid = Grid::new(3, Partitioning::from_k(2).unwrap()).unwrap();
    let mut tree = Spacetree::regular(grid, 1, Curve::Morton, TraversalOrder::DepthFirst, Layout::default()).unwrap();
    let mut a = Adapter::new(vec![Box::new(Plot::new(Some(path.clone()))) as Box<dyn EventMapping>]).unwrap();
    tree.traverse(&mut a, &TraversalOptions::serial()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
    assert!(text.contains("POINTS 27 double"));
    assert_eq!(section(&text, "CELL_TYPES"), vec!["12"; 8]);
    std::fs::remove_dir_all(dir).unwrap();
}
