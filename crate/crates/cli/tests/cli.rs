use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncs_core::model::{scalar_instance, NetworkModel};
use ncs_core::{CreSolution, DMatrix, GainSchedule, SimulationSummary};
use tempfile::TempDir;

fn ncs(args: &[&str], out: &Path) -> Output {
    ncs_env(args, out, None)
}

fn ncs_env(args: &[&str], out: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ncs"));
    cmd.args(args).arg("--out").arg(out);
    match threads {
        Some(t) => cmd.env("NCS_THREADS", t),
        None => cmd.env_remove("NCS_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_model(dir: &Path, name: &str, m: &NetworkModel) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(m).unwrap()).unwrap();
    p
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_reference_instance() {
    let d = TempDir::new().unwrap();
    let o = ncs(
        &["solve", "--mode", "indefinite", "--horizon", "10"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cost = json(d.path().join("cost.json"));
    assert!(cost["relative_difference"].as_f64().unwrap() <= 1e-8);
    let gen = json(d.path().join("generalized.json"));
    assert!(gen["all_upsilon_psd"].is_boolean());

    let sol: CreSolution =
        serde_json::from_str(&fs::read_to_string(d.path().join("cre.json")).unwrap()).unwrap();
    assert_eq!(sol.horizon, 10);
    assert_eq!(sol.steps.len(), 12);
    let text = fs::read_to_string(d.path().join("gains.json")).unwrap();
    let g = GainSchedule::from_json(&text).unwrap();
    // artifacts round-trip exactly
    assert_eq!(serde_json::to_string_pretty(&g).unwrap() + "\n", text);
}

#[test]
fn definite_mode_rejects_reference_weights() {
    let d = TempDir::new().unwrap();
    let o = ncs(&["solve"], d.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Q fails the definiteness test"));
}

#[test]
fn zero_r_is_an_input_error() {
    let d = TempDir::new().unwrap();
    let mut m = scalar_instance();
    m.r = DMatrix::zeros(2, 2);
    let cfg = write_model(d.path(), "m.json", &m);
    let o = ncs(&["solve", "--config", cfg.to_str().unwrap()], d.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("R fails"), "{}", stderr(&o));
}

#[test]
fn malformed_config_is_an_input_error() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("bad.json");
    fs::write(&cfg, "{\"m0\": 1}").unwrap();
    assert_eq!(
        code(&ncs(
            &["solve", "--config", cfg.to_str().unwrap()],
            d.path()
        )),
        1
    );
    assert_eq!(
        code(&ncs(&["solve", "--config", "/nonexistent.json"], d.path())),
        1
    );
}

#[test]
fn singular_lambda_exits_two() {
    let d = TempDir::new().unwrap();
    let o = ncs(
        &[
            "solve",
            "--mode",
            "indefinite",
            "--config",
            &low_p_config(d.path()),
        ],
        d.path(),
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("singular"));

    let o = ncs(
        &[
            "check",
            "--mode",
            "indefinite",
            "--config",
            &low_p_config(d.path()),
        ],
        d.path(),
    );
    assert_eq!(code(&o), 2);
    let report = json(d.path().join("check.json"));
    assert_eq!(report["passed"], false);
    assert!(report["error"].as_str().unwrap().contains("singular"));
}

fn low_p_config(dir: &Path) -> String {
    let m = ncs_core::model::reference_instance()
        .unwrap()
        .with_uniform_p(0.3);
    write_model(dir, "low_p.json", &m)
        .to_str()
        .unwrap()
        .to_owned()
}

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    let d = TempDir::new().unwrap();
    let args = [
        "simulate",
        "--mode",
        "indefinite",
        "--horizon",
        "8",
        "--seed",
        "7",
        "--trials",
        "3000",
    ];
    let mut outputs = Vec::new();
    for threads in [None, Some("1"), Some("2")] {
        let out = d.path().join(format!("run{}", outputs.len()));
        let o = ncs_env(&args, &out, threads);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(fs::read(out.join("summary.json")).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let s: SimulationSummary = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(s.trials, 3000);
}

#[test]
fn zero_trials_rejected() {
    let d = TempDir::new().unwrap();
    let cfg = write_model(d.path(), "m.json", &scalar_instance());
    let o = ncs(
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--trials",
            "0",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("trials ≥ 1"));
}

#[test]
fn bad_thread_count_rejected() {
    let d = TempDir::new().unwrap();
    let cfg = write_model(d.path(), "m.json", &scalar_instance());
    let o = ncs_env(
        &["simulate", "--config", cfg.to_str().unwrap()],
        d.path(),
        Some("zero"),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("NCS_THREADS"));
}

#[test]
fn traces_written_on_request() {
    let d = TempDir::new().unwrap();
    let cfg = write_model(d.path(), "m.json", &scalar_instance());
    let out = d.path().join("out");
    let o = ncs(
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--trials",
            "2",
            "--retain-traces",
        ],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut traces: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("trace_"))
        .collect();
    traces.sort();
    assert_eq!(traces, ["trace_0.csv", "trace_1.csv"]);
    let text = fs::read_to_string(out.join("trace_0.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "k,x_1,xhat_1,u_1,u_2,gamma_1,stage_cost"
    );
    assert_eq!(lines.count(), 3);

    let out2 = d.path().join("out2");
    ncs(
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--trials",
            "2",
        ],
        &out2,
    );
    assert!(!out2.join("trace_0.csv").exists());
}

#[test]
fn evaluate_replays_solved_gains() {
    let d = TempDir::new().unwrap();
    let cfg = write_model(d.path(), "m.json", &scalar_instance().with_horizon(4));
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&ncs(&["solve", "--config", cfg], d.path())), 0);
    let gains = d.path().join("gains.json");
    let o = ncs(
        &[
            "evaluate",
            "--config",
            cfg,
            "--gains",
            gains.to_str().unwrap(),
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval = json(d.path().join("evaluation.json"));
    let cost = json(d.path().join("cost.json"));
    assert_eq!(eval["total"], cost["oracle"]);

    // a shorter horizon replays a prefix of the schedule
    let o = ncs(
        &[
            "evaluate",
            "--config",
            cfg,
            "--horizon",
            "2",
            "--gains",
            gains.to_str().unwrap(),
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0);
    // a longer one cannot
    let o = ncs(
        &[
            "evaluate",
            "--config",
            cfg,
            "--horizon",
            "6",
            "--gains",
            gains.to_str().unwrap(),
        ],
        d.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn check_passes_and_catches_bad_gains() {
    let d = TempDir::new().unwrap();
    let cfg = write_model(d.path(), "m.json", &scalar_instance().with_horizon(3));
    let cfg = cfg.to_str().unwrap();
    let o = ncs(&["check", "--config", cfg], d.path());
    assert_eq!(
        code(&o),
        0,
        "{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        stderr(&o)
    );
    assert_eq!(json(d.path().join("check.json"))["passed"], true);

    ncs(&["solve", "--config", cfg], d.path());
    let path = d.path().join("gains.json");
    let mut g = GainSchedule::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
    g.steps[1].ktilde[0][(0, 0)] += 0.5;
    fs::write(&path, serde_json::to_string(&g).unwrap()).unwrap();
    let o = ncs(
        &["check", "--config", cfg, "--gains", path.to_str().unwrap()],
        d.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("stationarity"));
}

#[test]
fn sweep_entries_and_errors() {
    let d = TempDir::new().unwrap();
    let cfg = write_model(d.path(), "m.json", &scalar_instance().with_horizon(5));
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&ncs(&["sweep", "--config", cfg], d.path())), 1);
    assert_eq!(
        code(&ncs(&["sweep", "--config", cfg, "--p", "1.5"], d.path())),
        1
    );

    let o = ncs(
        &[
            "sweep", "--config", cfg, "--p", "0.5", "--trials", "300", "--seed", "4",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = json(d.path().join("sweep.json"));
    assert_eq!(sweep.as_array().unwrap().len(), 1);
    // the scalar instance already has p = 0.5, so this equals a plain simulation
    let o = ncs(
        &[
            "simulate", "--config", cfg, "--trials", "300", "--seed", "4",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        sweep[0]["cost_mean"],
        json(d.path().join("summary.json"))["cost_mean"]
    );
}
