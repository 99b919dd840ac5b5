use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use wqcp_cli::manifest::read_csv_hash;
use wqcp_cli::{run_experiment, ExperimentConfig, ExperimentKind, EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_PASS};

const DCP: &str = r#"
[dcp]
sigma = 1.0
theta = 0.5
alpha = 0.5
p = 1.0

[cost]
family = "exponential"
beta = 5.0
"#;

fn wqcp(args: &[&str], env_out: Option<&Path>) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wqcp"));
    cmd.args(args).env_remove("WQCP_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("WQCP_OUT_DIR", dir);
    }
    let out = cmd.output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(2).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn conjugate_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[cost]\nfamily = \"exponential\"\nbeta = 5.0\n");
    let out = dir.path().join("exp");
    let (code, text) = wqcp(
        &["conjugate-table", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code, EXIT_PASS, "{text}");
    let rows = read_rows(&out.join("conjugate_table.csv"));
    assert_eq!(rows.len(), 201);
    let at_slope = rows.iter().find(|r| r[0] == "-5").expect("y = C'(0) row");
    assert_eq!(at_slope[1].parse::<f64>().unwrap(), -1.0);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() <= 1e-5));

    let cfg = write_config(dir.path(), "r.toml", "[cost]\nfamily = \"reciprocal_shifted\"\n");
    let out = dir.path().join("rec");
    let (code, text) = wqcp(
        &["conjugate-table", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code, EXIT_PASS, "{text}");
    let rows = read_rows(&out.join("conjugate_table.csv"));
    let at_minus_one = rows.iter().find(|r| r[0] == "-1").expect("y = -1 row");
    assert!((at_minus_one[1].parse::<f64>().unwrap() + 1.0).abs() < 1e-12);
}

#[test]
fn inadmissible_reciprocal_table() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[cost]\nfamily = \"reciprocal\"\nallow_inadmissible = true\n[conjugate]\ny_min = -4.0\npoints = 50\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let (code, text) = wqcp(&["conjugate-table", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(code, EXIT_PASS, "{text}");
    let rows = read_rows(&dir.path().join("conjugate_table.csv"));
    let first = &rows[0];
    // F(-4) = -2 sqrt(4), F'(-4) = 1 / sqrt(4).
    assert_eq!(first[0].parse::<f64>().unwrap(), -4.0);
    assert!((first[1].parse::<f64>().unwrap() + 4.0).abs() < 1e-12);
    assert!((first[2].parse::<f64>().unwrap() - 0.5).abs() < 1e-12);

    let cfg = write_config(dir.path(), "bad.toml", "[cost]\nfamily = \"reciprocal\"\n[conjugate]\ny_min = -4.0\n");
    let (code, text) = wqcp(&["conjugate-table", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(code, EXIT_ERROR, "{text}");
    assert!(text.contains("allow_inadmissible"));
}

#[test]
fn sweep_is_deterministic_and_split_around_r_star() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{DCP}\n[shooting]\nstep = 0.001\nresidual_tolerance = 1e-5\n[output]\nstride = 50\n");
    let cfg = write_config(dir.path(), "s.toml", &body);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, text) = wqcp(&["sweep-wr", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
        assert_eq!(code, EXIT_PASS, "{text}");
    }
    let csv_a = std::fs::read(a.join("sweep_wr.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("sweep_wr.csv")).unwrap());

    let summary = read_rows(&a.join("sweep_wr_summary.csv"));
    let classes: Vec<&str> = summary.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(
        classes,
        ["LocalMax", "LocalMax", "LocalMax", "LocalMax", "HitZero", "HitZero", "HitZero"]
    );
    let rows = read_rows(&a.join("sweep_wr.csv"));
    let origin: Vec<_> = rows.iter().filter(|r| r[0] == "0").collect();
    assert_eq!(origin.len(), 1);
    assert_eq!((origin[0][1].as_str(), origin[0][3].as_str()), ("0", "LocalMax"));

    let m = manifest(&a.join("sweep_wr.manifest.json"));
    let hash = m["manifest_hash"].as_str().unwrap();
    for file in m["files"].as_array().unwrap() {
        let name = file.as_str().unwrap();
        if name.ends_with(".csv") {
            assert_eq!(read_csv_hash(&a.join(name)).unwrap().as_deref(), Some(hash));
        }
    }
    assert!(m["derived"]["r_star"].as_f64().unwrap() > 0.9);
}

#[test]
fn solve_writes_value_function() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{DCP}\n[shooting]\nstep = 0.0005\n");
    let mut cfg = ExperimentConfig::from_toml(&body).unwrap();
    cfg.resolve_kind(ExperimentKind::Solve).unwrap();
    let m = run_experiment(&cfg, dir.path()).unwrap();
    assert!(m.all_pass(), "{:?}", m.checks);
    let rows = read_rows(&dir.path().join("value_function.csv"));
    let first: Vec<f64> = rows[0].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert_eq!(first[2], -1.0);
    // u*(0) = F'(-1) = ln(5) / 5.
    assert!((first[3] - 5f64.ln() / 5.0).abs() < 1e-12);
    let u0 = m.derived["zero_control_u0"].as_f64().unwrap();
    assert!((u0 - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-6);
}

fn verify_body(extra: &str) -> String {
    format!(
        "{DCP}\n[shooting]\nstep = 0.0005\n[monte_carlo]\ndt = 0.001\nhorizon = 20.0\nn_paths = 400\nbase_seed = 5\n{extra}"
    )
}

#[test]
fn verify_dcp_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "v.toml", &verify_body(""));
    let out = dir.path().join("ok");
    let (code, text) = wqcp(
        &["verify-dcp", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", "2"],
        None,
    );
    assert_eq!(code, EXIT_PASS, "{text}");
    let rows = read_rows(&out.join("verify_dcp.csv"));
    let policies: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(policies, ["feedback", "zero", "constant(4)", "identity"]);
    let m = manifest(&out.join("verify_dcp.manifest.json"));
    assert_eq!(m["workers"], 2);
    assert_eq!(m["config"]["monte_carlo"]["workers"], 2);

    // Zero budgets cannot absorb Monte Carlo noise.
    let strict = verify_body("[budgets]\nse_multiplier = 0.0\nfeedback_abs = 0.0\n");
    let cfg = write_config(dir.path(), "strict.toml", &strict);
    let out = dir.path().join("strict");
    let (code, text) = wqcp(&["verify-dcp", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code, EXIT_CHECK_FAILED, "{text}");
    assert!(text.contains("[FAIL]"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "v.toml", &verify_body(""));
    let (code, text) = wqcp(&["verify-dcp", "--config", cfg.to_str().unwrap(), "--seed", "99"], Some(dir.path()));
    assert_eq!(code, EXIT_PASS, "{text}");
    let m = manifest(&dir.path().join("verify_dcp.manifest.json"));
    assert_eq!(m["config"]["monte_carlo"]["base_seed"], 99);
    let rows = read_rows(&dir.path().join("verify_dcp.csv"));
    assert!(rows.iter().all(|r| r[8] == "99"));
}

#[test]
fn converge_qcp_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{DCP}\n[shooting]\nstep = 0.0005\n[monte_carlo]\ndt = 0.001\nhorizon = 10.0\nn_paths = 100\nbase_seed = 1\n[queue]\nn = [4, 16, 64]\n"
    );
    let mut cfg = ExperimentConfig::from_toml(&body).unwrap();
    cfg.resolve_kind(ExperimentKind::ConvergeQcp).unwrap();
    let m = run_experiment(&cfg, dir.path()).unwrap();
    assert!(m.error.is_none(), "{:?}", m.error);
    let names: Vec<&str> = m.checks.iter().map(|c| c.name.as_str()).collect();
    for expected in ["gap_shrinks", "final_gap", "idle_second_moment_bounded", "zero_control_lower_bound"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    let rows = read_rows(&dir.path().join("converge_qcp.csv"));
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][0], "4");
    assert_eq!(rows[0][1], "feedback");
    assert_eq!(rows[3][1], "zero");
    assert_eq!(m.derived["gaps"].as_array().unwrap().len(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &format!("experiment = \"solve\"\n{DCP}"));
    let (code, text) = wqcp(&["verify-dcp", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(code, EXIT_ERROR, "{text}");
    assert!(text.contains("experiment"));

    let cfg = write_config(dir.path(), "mc.toml", DCP);
    let (code, text) = wqcp(&["verify-dcp", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(code, EXIT_ERROR, "{text}");
    assert!(text.contains("monte_carlo"));

    let (code, _) = wqcp(&["solve", "--config", "/nonexistent/wqcp.toml"], Some(dir.path()));
    assert_eq!(code, EXIT_ERROR);
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, 1e-9..1e-3f64]
}

prop_compose! {
    fn arb_config()(
        kind in prop::sample::select(vec![
            ExperimentKind::SweepWr,
            ExperimentKind::Solve,
            ExperimentKind::VerifyDcp,
            ExperimentKind::ConvergeQcp,
            ExperimentKind::ConjugateTable,
        ]),
        dcp in prop::option::of((finite(), finite(), finite(), finite())),
        beta in finite(),
        step in prop::option::of(finite()),
        mc in prop::option::of((finite(), finite(), 2usize..1_000_000, any::<u64>(), prop::option::of(1usize..64))),
        ns in prop::collection::vec(1u32..5000, 0..6),
        epsilon0 in finite(),
        gamma in prop::option::of(finite()),
        r in prop::collection::vec(finite(), 0..5),
        stride in prop::option::of(1usize..1000),
        constants in prop::collection::vec(finite(), 0..3),
    ) -> ExperimentConfig {
        let mut text = format!("experiment = \"{}\"\n", kind.as_str());
        if let Some((sigma, theta, alpha, p)) = dcp {
            text += &format!("[dcp]\nsigma = {sigma:?}\ntheta = {theta:?}\nalpha = {alpha:?}\np = {p:?}\n");
        }
        text += &format!("[cost]\nfamily = \"exponential\"\nbeta = {beta:?}\n");
        if let Some(step) = step {
            text += &format!("[shooting]\nstep = {step:?}\n");
        }
        if let Some((dt, horizon, n_paths, seed, workers)) = mc {
            text += &format!("[monte_carlo]\ndt = {dt:?}\nhorizon = {horizon:?}\nn_paths = {n_paths}\nbase_seed = {seed}\n");
            if let Some(w) = workers {
                text += &format!("workers = {w}\n");
            }
        }
        if !ns.is_empty() {
            text += &format!("[queue]\nn = {ns:?}\nepsilon0 = {epsilon0:?}\n");
            if let Some(v) = gamma {
                text += &format!("service = {{ family = \"gamma\", variance = {v:?} }}\n");
            }
        }
        text += &format!("[sweep]\nr = {r:?}\n[verify]\nconstants = {constants:?}\n");
        if let Some(s) = stride {
            text += &format!("[output]\nstride = {s}\n");
        }
        ExperimentConfig::from_toml(&text).expect("generated config parses")
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in arb_config()) {
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
