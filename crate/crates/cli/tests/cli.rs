use std::path::Path;
use std::process::{Command, Output};

fn spacetree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spacetree")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn orders_prints_the_depth_first_sequence() {
    let o = spacetree(&["orders", "--fixture", "figure2", "--curve", "morton", "--order", "dfs"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "A,B,I,G,Q,R,O,P,F,H,D,J,S,T,U,V,L,M,Y,Z,W,X,N,C,E\n");
}

#[test]
fn orders_reads_tree_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tree");
    std::fs::write(&path, "R: a,b,c,d\nb: e,f,g,h\n").unwrap();
    let o = spacetree(&["orders", "--fixture", arg(&path), "--order", "bfs"]);
    assert_eq!(stdout(&o), "R,a,b,c,d,e,f,g,h\n");
}

#[test]
fn run_mg_trace_passes_the_checker() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.txt");
    let o = spacetree(&["run-mg", "--grid", "corner<3", "--iters", "3", "--trace", arg(&trace)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("iteration")).count(), 3);
    let c = spacetree(&["check-trace", arg(&trace)]);
    assert_eq!(c.status.code(), Some(0));
    assert!(stdout(&c).starts_with("ok "));
}

#[test]
fn truncated_and_tampered_traces_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.txt");
    spacetree(&["run-mg", "--iters", "1", "--trace", arg(&trace), "--trace-limit", "50"]);
    assert_eq!(spacetree(&["check-trace", arg(&trace)]).status.code(), Some(1));

    spacetree(&["run-mg", "--iters", "1", "--trace", arg(&trace)]);
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let first = lines.iter().position(|l| l.contains("touchVertexFirstTime")).unwrap();
    let late = lines[first].split_once(' ').unwrap().1.to_string();
    let late = format!("t=999999999 {late}");
    lines[first] = &late;
    std::fs::write(&trace, lines.join("\n")).unwrap();
    assert_eq!(spacetree(&["check-trace", arg(&trace)]).status.code(), Some(1));
}

#[test]
fn skipped_reductions_report_no_waits() {
    let o = spacetree(&["run-dist", "--ranks", "2", "--skip-reduction"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("master waits 0\n"));
    assert!(out.contains("worker waits 0"));
}

#[test]
fn scenario_files_drive_run_dist() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.txt");
    std::fs::write(&sc, "# four ranks\nranks = 4\niterations = 2\n").unwrap();
    let o = spacetree(&["run-dist", arg(&sc)]);
    let out = stdout(&o);
    assert!(out.starts_with("ranks 4 skip_reduction false\n"));
    assert!(out.contains("total cells 91\n"));
    assert!(!out.contains("master waits 0\n"));
    std::fs::write(&sc, "ranks = 4\nflavour = mint\n").unwrap();
    assert_eq!(spacetree(&["run-dist", arg(&sc)]).status.code(), Some(1));
}

#[test]
fn plot_and_stats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let vtk = dir.path().join("g.vtk");
    let o = spacetree(&["plot", "--fixture", "figure2", "--out", arg(&vtk)]);
    assert!(stdout(&o).ends_with("points 41 cells 19\n"));
    let s = stdout(&spacetree(&["stats", "--fixture", "figure2"]));
    assert!(s.contains("leaves 19\n"));
    assert!(s.contains("structure bytes 7\n"));
    assert!(std::fs::read_to_string(&vtk).unwrap().contains("CELL_TYPES 19\n"));
}

#[test]
fn validation_errors_exit_with_one() {
    for args in [
        &["stats", "-k", "2", "--curve", "peano"][..],
        &["stats", "--curve", "hilbert"],
        &["stats", "--grid", "level<"],
        &["run-mg", "--omega", "1.5"],
        &["run-dist", "--ranks", "0"],
        &["stats", "--unroll-min-f", "tall"],
        &["stats", "--colouring", "9d"],
        &["orders", "--order", "sideways"],
        &["frobnicate"],
    ] {
        let o = spacetree(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    assert_eq!(spacetree(&["check-trace", arg(&missing)]).status.code(), Some(2));
    let blocked = dir.path().join("no/such/dir/g.vtk");
    assert_eq!(spacetree(&["plot", "--out", arg(&blocked)]).status.code(), Some(2));
}

#[test]
fn help_documents_every_flag() {
    let h = stdout(&spacetree(&["run-mg", "--help"]));
    for flag in ["--grid", "--iters", "--omega", "--plot", "--trace", "--trace-limit", "--unroll-min-f", "--colouring", "--seed"] {
        assert!(h.contains(flag), "{flag}");
    }
}

#[test]
fn random_trees_depend_only_on_the_seed() {
    let a = stdout(&spacetree(&["stats", "-k", "2", "--seed", "7", "--levels", "4"]));
    let b = stdout(&spacetree(&["stats", "-k", "2", "--seed", "7", "--levels", "4"]));
    let c = stdout(&spacetree(&["stats", "-k", "2", "--seed", "8", "--levels", "4"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
