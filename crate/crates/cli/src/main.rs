use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spacetree::distsim::{Scenario, Simulator};
use spacetree::events::{Adapter, EventMapping, Policy};
use spacetree::fixture::Fixture;
use spacetree::multigrid::{setup_start_grid, Criterion, SetupStartGrid, VCycle};
use spacetree::plot::Plot;
use spacetree::sfc::{linearize, CellCode, ChildOrdering, Curve, Grid, Partitioning, TraversalOrder};
use spacetree::spacetree::{structure_bytes, Marker, Spacetree, Structure};
use spacetree::storage::Layout;
use spacetree::trace::Trace;
use spacetree::traversal::TraversalOptions;

/// Adaptive Cartesian grids on linearized spacetrees.
#[derive(Parser, Debug)]
#[command(name = "spacetree", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prints the cell sequence of a labelled tree.
    Orders {
        /// Built-in fixture (`figure2`) or path to a labelled tree file.
        #[arg(long, default_value = "figure2")]
        fixture: String,
        /// morton, hilbert or peano.
        #[arg(long, default_value = "morton")]
        curve: Curve,
        /// dfs, bfs, level-wise or all.
        #[arg(long, default_value = "all")]
        order: String,
    },
    /// Solves the Poisson demonstrator with the additive multigrid sweep.
    RunMg {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        tuning: Tuning,
        /// VTK file rewritten after every iteration.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Event trace of the first iteration.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Most events kept in the trace file.
        #[arg(long, default_value_t = 1_000_000)]
        trace_limit: usize,
    },
    /// Runs the multigrid demonstrator on a simulated rank decomposition.
    RunDist {
        /// `key = value` scenario file; flags override its entries.
        scenario: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        tuning: Tuning,
        /// Number of simulated ranks.
        #[arg(long)]
        ranks: Option<usize>,
        /// Masters skip the worker reductions.
        #[arg(long)]
        skip_reduction: bool,
    },
    /// Checks the event partial order of a trace file.
    CheckTrace {
        file: PathBuf,
    },
    /// Writes the leaf grid as a VTK legacy file.
    Plot {
        #[command(flatten)]
        grid: GridArgs,
        /// Output file.
        #[arg(long, short)]
        out: PathBuf,
        /// Plot refined cells as well.
        #[arg(long)]
        all_levels: bool,
    },
    /// Cell, vertex and regularity statistics of a grid.
    Stats {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        tuning: Tuning,
    },
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Spatial dimension.
    #[arg(long, short = 'd', default_value_t = 2)]
    dim: usize,
    /// Subdivision factor (2 or 3).
    #[arg(long, short = 'k', default_value_t = 3)]
    k: u32,
    /// morton, hilbert or peano; defaults to peano for k=3, morton otherwise.
    #[arg(long)]
    curve: Option<Curve>,
    /// dfs, bfs or level-wise.
    #[arg(long, default_value = "dfs")]
    order: TraversalOrder,
    /// Refinement criterion: none, level<N, corner<N or point(x,y)<N.
    #[arg(long, default_value = "level<2")]
    grid: String,
    /// Level cap for the criterion.
    #[arg(long, default_value_t = 6)]
    max_level: usize,
    /// Labelled tree (`figure2` or a path) instead of a criterion.
    #[arg(long, conflicts_with = "seed")]
    fixture: Option<String>,
    /// Random tree from this seed instead of a criterion.
    #[arg(long)]
    seed: Option<u64>,
    /// Depth of random trees.
    #[arg(long, default_value_t = 3)]
    levels: usize,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    /// Number of sweeps.
    #[arg(long)]
    iters: Option<usize>,
    /// Jacobi damping.
    #[arg(long, default_value_t = 0.7)]
    omega: f64,
    /// Constant right-hand side.
    #[arg(long, default_value_t = 1.0)]
    rhs: f64,
    /// Constant material parameter.
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
}

#[derive(Args, Debug, Clone)]
struct Tuning {
    /// Smallest regularity marker that is unrolled, or `off`.
    #[arg(long, default_value = "2")]
    unroll_min_f: String,
    /// Upper bound on concurrency: serial, 2d..7d or concurrent.
    #[arg(long, default_value = "concurrent")]
    colouring: Policy,
    /// Worker threads for unrolled regions.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: 1, error: anyhow!(message.into()) }
}

fn runtime<E: std::error::Error + Send + Sync + 'static>(e: E) -> Failure {
    Failure { code: 2, error: e.into() }
}

type Outcome = Result<String, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Orders { fixture, curve, order } => orders(&fixture, curve, &order),
        Command::RunMg { grid, solver, tuning, plot, trace, trace_limit } => {
            run_mg(&grid, &solver, &tuning, plot, trace, trace_limit)
        }
        Command::RunDist { scenario, grid, solver, tuning, ranks, skip_reduction } => {
            run_dist(scenario, &grid, &solver, &tuning, ranks, skip_reduction)
        }
        Command::CheckTrace { file } => check_trace(&file),
        Command::Plot { grid, out, all_levels } => plot(&grid, out, all_levels),
        Command::Stats { grid, tuning } => stats(&grid, &tuning),
    }
}

fn load_fixture(name: &str) -> Result<Fixture, Failure> {
    if name == "figure2" || name == "lettered" {
        return Ok(Fixture::lettered());
    }
    Fixture::load(name.as_ref()).with_context(|| format!("reading fixture `{name}`")).map_err(Failure::from)
}

fn orders(fixture: &str, curve: Curve, order: &str) -> Outcome {
    let f = load_fixture(fixture)?;
    let ordering = ChildOrdering::new(curve, f.grid()).map_err(|e| invalid(e.to_string()))?;
    let orders: Vec<(&str, TraversalOrder)> = match order {
        "all" => vec![
            ("dfs", TraversalOrder::DepthFirst),
            ("bfs", TraversalOrder::BreadthFirst),
            ("level-wise", TraversalOrder::LevelWiseDepthFirst),
        ],
        o => vec![(o, o.parse().map_err(invalid)?)],
    };
    let root = f.code(f.root_label()).ok_or_else(|| invalid("fixture has no root"))?;
    let refined = f.refined().clone();
    let mut out = String::new();
    for (name, o) in &orders {
        let labels = f.labels_of(&linearize(root, &|c| refined.contains(c), &ordering, *o)).join(",");
        if orders.len() == 1 {
            let _ = writeln!(out, "{labels}");
        } else {
            let _ = writeln!(out, "{name} {labels}");
        }
    }
    Ok(out)
}

struct Setup {
    grid: Grid,
    curve: Curve,
    order: TraversalOrder,
}

impl GridArgs {
    fn validate(&self) -> Result<Setup, Failure> {
        let (grid, curve) = if let Some(name) = &self.fixture {
            let f = load_fixture(name)?;
            (f.grid(), self.curve.unwrap_or(Curve::Morton))
        } else {
            let p = Partitioning::from_k(self.k).map_err(|e| invalid(e.to_string()))?;
            let grid = Grid::new(self.dim, p).map_err(|e| invalid(e.to_string()))?;
            let default = if self.k == 3 { Curve::Peano } else { Curve::Morton };
            (grid, self.curve.unwrap_or(default))
        };
        ChildOrdering::new(curve, grid).map_err(|e| invalid(e.to_string()))?;
        if self.fixture.is_none() && self.seed.is_none() {
            self.criterion()?;
        }
        if self.levels > grid.max_level() {
            return Err(invalid(format!("--levels must be at most {}", grid.max_level())));
        }
        Ok(Setup { grid, curve, order: self.order })
    }

    fn criterion(&self) -> Result<Criterion, Failure> {
        let c: Criterion = self.grid.parse().map_err(|e: String| invalid(e))?;
        if let Criterion::Point(p, _) = &c {
            if p.len() != self.dim {
                return Err(invalid(format!("point {:?} does not have {} coordinates", p, self.dim)));
            }
        }
        Ok(c)
    }

    /// Builds the grid with `layout` as payload.
    fn build(&self, setup: &Setup, layout: &Layout) -> Result<Spacetree, Failure> {
        let structure = if let Some(name) = &self.fixture {
            let f = load_fixture(name)?;
            Structure::from_refined(f.grid(), f.refined().iter().copied()).map_err(runtime)?
        } else if let Some(seed) = self.seed {
            random_structure(setup.grid, seed, self.levels)
        } else {
            let criterion = self.criterion()?;
            let probe = Adapter::new(vec![Box::new(SetupStartGrid::new(criterion.clone(), self.max_level))]).map_err(runtime)?;
            let mut t = Spacetree::new(setup.grid, setup.curve, setup.order, probe.layout().clone()).map_err(runtime)?;
            setup_start_grid(&mut t, &criterion, self.max_level).map_err(runtime)?;
            t.structure().clone()
        };
        Spacetree::from_structure(structure, setup.curve, setup.order, layout.clone()).map_err(runtime)
    }
}

/// Refines each cell above `levels` with probability one half, root always.
fn random_structure(grid: Grid, seed: u64, levels: usize) -> Structure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refined = HashSet::new();
    let mut layer = vec![CellCode::root(grid)];
    for level in 0..levels {
        let mut next = Vec::new();
        for c in layer {
            if level == 0 || rng.gen_bool(0.5) {
                refined.insert(c);
                next.extend((0..grid.children()).map(|i| c.child(i)));
            }
        }
        layer = next;
    }
    Structure::from_refined(grid, refined).expect("refined cells form a tree")
}

impl Tuning {
    fn options(&self) -> Result<TraversalOptions, Failure> {
        let unroll_min_f = match self.unroll_min_f.as_str() {
            "off" | "none" => None,
            v => Some(v.parse::<u8>().map_err(|_| invalid(format!("--unroll-min-f expects a height or `off`, got `{v}`")))?),
        };
        if self.workers == 0 {
            return Err(invalid("--workers must be at least 1"));
        }
        Ok(TraversalOptions { unroll_min_f, colouring: self.colouring, workers: self.workers })
    }
}

impl SolverArgs {
    fn validate(&self) -> Result<(), Failure> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(invalid("--omega must lie in (0, 1]"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || !self.rhs.is_finite() {
            return Err(invalid("--eps must be positive and --rhs finite"));
        }
        Ok(())
    }

    fn vcycle(&self) -> VCycle {
        VCycle::new(self.omega, self.rhs, self.eps)
    }
}

fn run_mg(grid: &GridArgs, solver: &SolverArgs, tuning: &Tuning, plot: Option<PathBuf>, trace: Option<PathBuf>, trace_limit: usize) -> Outcome {
    let setup = grid.validate()?;
    solver.validate()?;
    let options = tuning.options()?;
    let iters = solver.iters.unwrap_or(20);
    let mut mappings: Vec<Box<dyn EventMapping>> = vec![Box::new(solver.vcycle())];
    if let Some(p) = plot {
        mappings.push(Box::new(Plot::new(Some(p)).with_field("x")));
    }
    let mut adapter = Adapter::new(mappings).map_err(runtime)?;
    let mut tree = grid.build(&setup, adapter.layout())?;
    let mut out = String::new();
    let _ = writeln!(out, "cells {} leaves {} vertices {}", tree.cell_count(), tree.structure().leaf_count(), tree.vertex_count());
    for i in 0..iters {
        if let (0, Some(path)) = (i, trace.as_ref()) {
            let mut t = Trace::with_limit(setup.grid, trace_limit);
            tree.traverse_traced(&mut adapter, &options, Some(&mut t)).map_err(runtime)?;
            let mut text = t.to_text();
            if t.dropped() > 0 {
                let _ = writeln!(text, "# dropped={}", t.dropped());
            }
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        } else {
            tree.traverse(&mut adapter, &options).map_err(runtime)?;
        }
        let r = VCycle::residual_norm(tree.layout(), tree.state()).map_err(runtime)?;
        let _ = writeln!(out, "iteration {} residual {:e}", i + 1, r);
    }
    Ok(out)
}

fn run_dist(
    scenario: Option<PathBuf>,
    grid: &GridArgs,
    solver: &SolverArgs,
    tuning: &Tuning,
    ranks: Option<usize>,
    skip_reduction: bool,
) -> Outcome {
    let mut sc = match &scenario {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Scenario::parse(&text).map_err(|e| invalid(e.to_string()))?
        }
        None => Scenario::default(),
    };
    if let Some(key) = sc.extra.keys().next() {
        return Err(invalid(format!("unknown scenario key `{key}`")));
    }
    if let Some(r) = ranks {
        if r == 0 || r > 64 {
            return Err(invalid("--ranks must be between 1 and 64"));
        }
        sc.ranks = r;
    }
    sc.skip_reduction |= skip_reduction;
    if let Some(n) = solver.iters {
        sc.iterations = n;
    }
    let setup = grid.validate()?;
    solver.validate()?;
    let options = tuning.options()?;
    let vcycle = solver.vcycle();
    let factory = move || vec![Box::new(vcycle.clone()) as Box<dyn EventMapping>];
    let layout = Adapter::new(factory()).map_err(runtime)?.layout().clone();
    let tree = grid.build(&setup, &layout)?;
    let topology = sc.topology(tree.structure()).map_err(runtime)?;
    let mut sim = Simulator::new(&tree, topology, &factory, sc.skip_reduction, options).map_err(runtime)?;
    sim.set_heap_lag(sc.heap_lag);
    let mut out = String::new();
    let _ = writeln!(out, "ranks {} skip_reduction {}", sc.ranks, sc.skip_reduction);
    for _ in 0..sc.iterations {
        let sweep = sim.traverse().map_err(runtime)?;
        let r = VCycle::residual_norm(&layout, sim.state(0)).map_err(runtime)?;
        let cells: Vec<String> = sweep.rank_cells.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "iteration {} residual {:e} cells {}", sweep.iteration, r, cells.join(","));
    }
    let _ = writeln!(out, "{}", sim.report());
    Ok(out)
}

fn check_trace(file: &PathBuf) -> Outcome {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    if text.lines().any(|l| l.starts_with("# dropped=")) {
        return Err(invalid("trace is truncated; rerun with a larger --trace-limit"));
    }
    let trace = Trace::parse(&text).map_err(|e| invalid(e.to_string()))?;
    let violations = trace.check();
    if !violations.is_empty() {
        for v in violations.iter().take(20) {
            eprintln!("{v}");
        }
        return Err(invalid(format!("{} violations in {} events", violations.len(), trace.len())));
    }
    Ok(format!("ok {} events\n", trace.len()))
}

fn plot(grid: &GridArgs, path: PathBuf, all_levels: bool) -> Outcome {
    let setup = grid.validate()?;
    let p = if all_levels { Plot::new(Some(path.clone())).all_levels() } else { Plot::new(Some(path.clone())) };
    let mut adapter = Adapter::new(vec![Box::new(p) as Box<dyn EventMapping>]).map_err(runtime)?;
    let mut tree = grid.build(&setup, adapter.layout())?;
    tree.traverse(&mut adapter, &TraversalOptions::serial()).map_err(runtime)?;
    let text = adapter.find::<Plot>().and_then(|p| p.last()).unwrap_or_default();
    let count = |head: &str| {
        text.lines().find_map(|l| l.strip_prefix(head)).and_then(|l| l.split_whitespace().next()).unwrap_or("0").to_string()
    };
    Ok(format!("wrote {} points {} cells {}\n", path.display(), count("POINTS "), count("CELL_TYPES ")))
}

fn stats(grid: &GridArgs, tuning: &Tuning) -> Outcome {
    let setup = grid.validate()?;
    let options = tuning.options()?;
    let mut tree = grid.build(&setup, &Layout::default())?;
    let st = tree.traverse(&mut Adapter::empty(), &options).map_err(runtime)?;
    let s = tree.structure();
    let (persistent, hanging) = s.vertex_census();
    let mut histogram: BTreeMap<(u8, u8), (Marker, usize)> = BTreeMap::new();
    for c in s.cells() {
        let m = tree.marker(&c).map_err(runtime)?.unwrap_or_default();
        let key = match m {
            Marker::Height(h) => (0, h),
            Marker::Bottom => (1, 0),
        };
        histogram.entry(key).or_insert((m, 0)).1 += 1;
    }
    let mut out = String::new();
    let _ = writeln!(out, "dim {} k {} curve {:?} order {:?}", setup.grid.dim(), setup.grid.k(), setup.curve, setup.order);
    let _ = writeln!(out, "cells {}", s.cell_count());
    let _ = writeln!(out, "leaves {}", s.leaf_count());
    let _ = writeln!(out, "refined {}", s.refined().len());
    let _ = writeln!(out, "max level {}", s.max_level());
    let _ = writeln!(out, "persistent vertices {}", persistent.len());
    let _ = writeln!(out, "hanging vertices {}", hanging.len());
    let _ = writeln!(out, "structure bytes {}", structure_bytes(s.cell_count()));
    let _ = writeln!(out, "max hanging creations {}", st.max_hanging_creations);
    let _ = writeln!(out, "unrolled regions {}", st.unrolled_regions.len());
    for (m, n) in histogram.values() {
        let label = match m {
            Marker::Height(h) => h.to_string(),
            Marker::Bottom => "bottom".to_string(),
        };
        let _ = writeln!(out, "marker {label} {n}");
    }
    Ok(out)
}
