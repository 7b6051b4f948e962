use bdtree::density::log_tree_density_terms;
use bdtree::{Hyperparams, Tree};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bdtree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdtree"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bdtree(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn simulate_into(dir: &Path, seed: u64) {
    let seed = seed.to_string();
    let d = dir.to_str().unwrap();
    ok(&[
        "simulate",
        "--n",
        "7",
        "--seed",
        &seed,
        "--out-dir",
        d,
        "--data",
        "3",
        "--lambda-r",
        "1.5",
    ]);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    simulate_into(a.path(), 11);
    simulate_into(b.path(), 11);
    for f in ["tree.json", "features.csv", "data.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    simulate_into(c.path(), 12);
    assert_ne!(
        fs::read(a.path().join("tree.json")).unwrap(),
        fs::read(c.path().join("tree.json")).unwrap()
    );
}

#[test]
fn feature_columns_are_never_empty() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..20 {
        simulate_into(dir.path(), seed);
        let text = fs::read_to_string(dir.path().join("features.csv")).unwrap();
        let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
        assert_eq!(rows.len(), 7);
        for k in 0..rows[0].len() {
            assert!(rows.iter().any(|r| r[k] == "1"), "seed {seed} column {k}");
        }
    }
}

#[test]
fn expected_leaves_grid_shape() {
    let out = ok(&["expected-leaves", "--n-max", "50", "--lambda-r-grid", "0.5,1,1.5"]);
    assert_eq!(out.lines().count(), 1 + 3 * 50);
    let long = ok(&["expected-leaves", "--n-max", "4", "--long"]);
    assert_eq!(long.lines().count(), 1 + 1 + 2 + 3 + 4);
}

#[test]
fn density_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), 5);
    let path = dir.path().join("tree.json");
    let out = ok(&[
        "density",
        "--tree",
        path.to_str().unwrap(),
        "--theta-s",
        "0.7",
        "--lambda-s",
        "2",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let tree = Tree::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
    let hp = Hyperparams {
        theta_s: 0.7,
        lambda_s: 2.0,
        ..Hyperparams::default()
    };
    let terms = log_tree_density_terms(&tree, &hp).unwrap();
    assert_eq!(v["total"].as_f64().unwrap(), terms.total);
    assert_eq!(v["branches"].as_f64().unwrap(), terms.branches);
}

#[test]
fn tiny_fit_writes_archive_and_heldout_score() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), 2);
    let data = dir.path().join("data.csv");
    let out_dir = dir.path().join("fit");
    let args = [
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--iterations",
        "12",
        "--burn-in",
        "4",
        "--thinning",
        "2",
        "--holdout",
        "0.1",
        "--chains",
        "2",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    ok(&args);
    for c in 0..2 {
        let lines = fs::read_to_string(out_dir.join(format!("chain{c}.jsonl"))).unwrap();
        assert_eq!(lines.lines().count(), 4);
        for l in lines.lines() {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let t = Tree::from_json(&v["tree"].to_string()).unwrap();
            assert_eq!(t.n_objects(), 7);
        }
    }
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    let h: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("heldout.json")).unwrap()).unwrap();
    assert_eq!(h["heldout_entries"].as_u64(), Some(2));
    assert!(h["test_log_density"].as_f64().unwrap().is_finite());
    assert!(h["noise_baseline"].as_f64().unwrap().is_finite());
    let first = fs::read(out_dir.join("chain0.jsonl")).unwrap();
    ok(&args);
    assert_eq!(first, fs::read(out_dir.join("chain0.jsonl")).unwrap());
}

#[test]
fn malformed_csv_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "a,b\n1.0,2.0\n3.0,oops\n").unwrap();
    let out = bdtree(&["fit", "--data", p.to_str().unwrap(), "--iterations", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("oops"), "{err}");
    fs::write(&p, "1,2\n3\n").unwrap();
    let out = bdtree(&["fit", "--data", p.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn exit_codes() {
    assert_eq!(bdtree(&["simulate"]).status.code(), Some(2));
    assert_eq!(
        bdtree(&["expected-leaves", "--n-max", "3", "--theta-r", "-1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bdtree(&["density", "--tree", "/nonexistent/tree.json"]).status.code(),
        Some(1)
    );
}

#[test]
fn geweke_with_prior_redraw_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let o = bdtree(&[
        "geweke",
        "--kernel",
        "prior-redraw",
        "--samples",
        "300",
        "--iters",
        "300",
        "--n",
        "3",
        "--allowed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 13);
}
