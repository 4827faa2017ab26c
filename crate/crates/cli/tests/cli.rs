use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icar-select"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn select_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("result.json");
    let data = fixture("sim_n100_k5_seed42.csv");
    let graph = fixture("chain_100.txt");
    for threads in ["1", "3"] {
        let out = run(&[
            "select", "--data", p(&data), "--adjacency", p(&graph), "--threads", threads,
            "--output", p(&out_path),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let got = fs::read_to_string(&out_path).unwrap();
        let want = fs::read_to_string(fixture("select_n100_k5_seed42.json")).unwrap();
        assert!(got == want, "output differs from the golden file with {threads} threads");
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.contains("Top 10 of 64 models"));
        assert!(stdout.contains("Posterior inclusion probabilities"));
    }
}

#[test]
fn simulate_reproduces_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let graph = dir.path().join("g.txt");
    let out = run(&[
        "simulate", "--n", "100", "--k", "5", "--seed", "42", "--output", p(&data),
        "--graph-output", p(&graph),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read_to_string(&data).unwrap(),
        fs::read_to_string(fixture("sim_n100_k5_seed42.csv")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(&graph).unwrap(),
        fs::read_to_string(fixture("chain_100.txt")).unwrap()
    );
}

#[test]
fn simulate_shape_on_stdout() {
    let out = run(&["simulate", "--n", "40", "--k", "3", "--tau", "0.3", "--sigma2", "1", "--beta", "1,1,-0.5,0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "intercept,x1,x2,x3,y");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40);
    for r in rows {
        let vals: Vec<f64> = r.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 5);
        assert!(vals.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn csv_format_writes_models_and_pips() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("sel.csv");
    let out = run(&[
        "select", "--data", p(&fixture("sim_n100_k5_seed42.csv")), "--adjacency",
        p(&fixture("chain_100.txt")), "--format", "csv", "--output", p(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let models = fs::read_to_string(&out_path).unwrap();
    assert_eq!(models.lines().count(), 65);
    assert!(models.starts_with("mask,regressors,spatial,log_prior,log_q,log_post_prob,post_prob"));
    let pip = fs::read_to_string(dir.path().join("sel_pip.csv")).unwrap();
    assert_eq!(pip.lines().count(), 7);
}

#[test]
fn eleven_regressors_score_4096_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let graph = dir.path().join("g.txt");
    let out = run(&[
        "simulate", "--n", "60", "--k", "11", "--graph", "grid", "--seed", "7", "--output",
        p(&data), "--graph-output", p(&graph),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let result = dir.path().join("r.json");
    let out = run(&["select", "--data", p(&data), "--adjacency", p(&graph), "--output", p(&result)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&result).unwrap();
    assert_eq!(text.matches("\"mask\":").count(), 4096 + 2);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let table = stdout.split("Posterior inclusion probabilities\n").nth(1).unwrap();
    let pip_rows = table.lines().filter(|l| l.starts_with('x')).count();
    assert_eq!(pip_rows, 11);
}

#[test]
fn mismatched_sizes_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    assert_eq!(code(&run(&["simulate", "--n", "50", "--output", p(&data)])), 0);
    let out = run(&["select", "--data", p(&data), "--adjacency", p(&fixture("chain_100.txt"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("100 subregions"), "{}", stderr(&out));
}

#[test]
fn bad_inputs_exit_2_before_computing() {
    let graph = fixture("chain_100.txt");
    let out = run(&["select", "--data", "/no/such/file.csv", "--adjacency", p(&graph)]);
    assert_eq!(code(&out), 2);
    let data = fixture("sim_n100_k5_seed42.csv");
    let out = run(&["select", "--data", p(&data), "--adjacency", p(&graph), "--format", "csv"]);
    assert_eq!(code(&out), 2);
    let out = run(&["select", "--data", p(&data), "--adjacency", p(&graph), "--b-fraction", "1.5"]);
    assert_eq!(code(&out), 2);
    let out = run(&["select", "--data", p(&data), "--adjacency", p(&graph), "--regressors", "x1,nope"]);
    assert_eq!(code(&out), 2);
    let out = run(&["simulate", "--n", "20", "--adjacency", p(&graph)]);
    assert_eq!(code(&out), 2);
    let out = run(&["select", "--data", p(&data)]);
    assert_eq!(code(&out), 2, "missing required flag is a usage error");
}

#[test]
fn prior_check_exit_codes() {
    let out = run(&["prior-check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative discrepancy"));

    let out = run(&["prior-check", "--inject-fault"]);
    assert_eq!(code(&out), 1);

    let out = run(&["prior-check", "--n-values", "10", "--p-min", "1", "--p-max", "1", "--instances", "1"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn prior_eval_curve() {
    let out = run(&["prior-eval", "--graph", "chain", "--n", "50", "--tau-grid", "1e-3:1e3:50"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "tau,log_prior");
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (t, v) = l.split_once(',').unwrap();
            (t.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|(_, v)| v.is_finite()));
    assert!((rows[0].0 - 1e-3).abs() < 1e-15 && (rows[49].0 - 1e3).abs() < 1e-9);
}

#[test]
fn benchmark_table_shape() {
    let out = run(&["benchmark", "--n-grid", "100:500:100", "--method", "both", "--k", "2", "--repeats", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n,k,method,threads,seconds,seed");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("1")));
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["select", "simulate", "benchmark", "prior-eval", "prior-check"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}
