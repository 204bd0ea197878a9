use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hybrid_mgr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-mgr"))
        .args(args)
        .env_remove("HYBRID_MGR_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn oracle_reports_bundled_optima() {
    let out = hybrid_mgr(&["oracle", "--grid", "maze_8x8", "--delta", "2"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("cost 18"), "{}", stdout(&out));

    let out = hybrid_mgr(&["oracle", "--grid", "hallways", "--delta", "0", "--json"]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["cost"], 15);
    assert_eq!(doc["interventions"], 0);
}

#[test]
fn oracle_rejects_infeasible_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("walled.txt");
    fs::write(&path, "S.F\n##F\n..G\n").unwrap();
    let out = hybrid_mgr(&["oracle", "--grid", path.to_str().unwrap(), "--delta", "0"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unreachable"), "{err}");
}

#[test]
fn missing_grid_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "grids = [\"absent.txt\"]\n").unwrap();
    let out = hybrid_mgr(&["train-agents", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.txt"));
}

fn small_experiment(dir: &Path) -> String {
    fs::write(dir.join("lane.txt"), "....G\n.....\nS...F\n").unwrap();
    let cfg = dir.join("exp.toml");
    fs::write(
        &cfg,
        r#"grids = ["lane.txt"]
teams = [["Low", "High"]]
delta_I = [0, 2]
agent_episodes = 3000
manager_episodes = 300
eval_episodes = 5
out_dir = "out"
"#,
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn stepwise_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let out = hybrid_mgr(&["train-agents", "--config", &cfg, "--json"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let files: Vec<String> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(files.len(), 2);

    let out = hybrid_mgr(&[
        "train-manager",
        "--config",
        &cfg,
        "--grid",
        "lane",
        "--delta",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir
        .path()
        .join("out/managers/lane/Low+High_d2.json")
        .exists());

    let out = hybrid_mgr(&["evaluate", "--config", &cfg, "--delta", "2"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("lane Low+High delta_I=2"));

    // delta 0 has no stored manager yet
    let out = hybrid_mgr(&["evaluate", "--config", &cfg, "--delta", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifact"));
}

#[test]
fn reproduce_tables_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let first_out = dir.path().join("a");
    let second_out = dir.path().join("b");
    for out_dir in [&first_out, &second_out] {
        let out = hybrid_mgr(&[
            "reproduce-tables",
            "--config",
            &cfg,
            "--seed",
            "9",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(stdout(&out).contains("| Low, High |"));
    }
    let a = fs::read(first_out.join("results.csv")).unwrap();
    let b = fs::read(second_out.join("results.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a)
        .unwrap()
        .starts_with("grid,team,delta_I,mean_cost,optimal,success_rate,mean_rho\n"));
}
