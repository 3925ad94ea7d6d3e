use std::path::Path;
use std::process::{Command, Output};

fn dart(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dart"));
    cmd.args(args).env_remove("DART_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn header_seed(path: &Path) -> u64 {
    let text = std::fs::read_to_string(path).unwrap();
    let head: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    head["config"]["seed"].as_u64().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&dart(&["cost", "--preset", "toy"], &[])), 0);
    assert_eq!(code(&dart(&["cost", "--weight-bytes", "3"], &[])), 2);
    assert_eq!(code(&dart(&["cost", "--preset", "gpt5"], &[])), 2);
    assert_eq!(code(&dart(&["cost", "--rho", "1.0"], &[])), 3);
    assert_eq!(
        code(&dart(&["generate", "--rho", "0.99", "--gen-len", "5"], &[])),
        3
    );
    assert_eq!(
        code(&dart(
            &["generate", "--gen-len", "5"],
            &[("DART_SEED", "x")]
        )),
        2
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[drift]\nwindow = 0\n").unwrap();
    let o = dart(&["generate", "-c", bad.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("window"));
}

#[test]
fn seed_precedence_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("run.toml");
    std::fs::write(
        &cfg,
        "seed = 1\ngen_len = 60\n[workload]\nregimes = 2\nswitch_points = [30]\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let run = |trace: &str, extra: &[&str], env: &[(&str, &str)]| {
        let t = p(trace);
        let mut args = vec![
            "generate",
            "-c",
            c,
            "--trace",
            t.to_str().unwrap(),
            "--summary",
            "/dev/null",
        ];
        args.extend_from_slice(extra);
        assert_eq!(code(&dart(&args, env)), 0);
        t
    };
    assert_eq!(header_seed(&run("a.jsonl", &[], &[])), 1);
    assert_eq!(header_seed(&run("b.jsonl", &[], &[("DART_SEED", "7")])), 7);
    let c_path = run("c.jsonl", &["--seed", "9"], &[("DART_SEED", "7")]);
    assert_eq!(header_seed(&c_path), 9);

    let r = p("r.jsonl");
    let o = dart(
        &[
            "--sequential",
            "generate",
            "--replay",
            c_path.to_str().unwrap(),
            "--trace",
            r.to_str().unwrap(),
            "--summary",
            "/dev/null",
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&r).unwrap(), std::fs::read(&c_path).unwrap());
}

#[test]
fn cost_json_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("cost.json");
    assert_eq!(
        code(&dart(
            &[
                "cost",
                "--preset",
                "llama70b",
                "--json",
                json.to_str().unwrap()
            ],
            &[]
        )),
        0
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["ratios"]["attention_flops"], 1.0);
    assert!((v["ratios"]["mlp_flops"].as_f64().unwrap() - 0.3).abs() < 1e-3);

    let traj = dir.path().join("d.jsonl");
    assert_eq!(
        code(&dart(
            &[
                "detect",
                "--runs",
                "2",
                "--trajectory",
                traj.to_str().unwrap()
            ],
            &[]
        )),
        0
    );
    let plots = dir.path().join("plots");
    let o = dart(
        &[
            "plot",
            traj.to_str().unwrap(),
            "--out-dir",
            plots.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    assert!(plots.join("trajectory.svg").is_file());

    let broken = dir.path().join("broken.jsonl");
    let text = std::fs::read_to_string(&traj).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "not json";
    std::fs::write(&broken, lines.join("\n")).unwrap();
    let o = dart(
        &[
            "plot",
            broken.to_str().unwrap(),
            "--out-dir",
            plots.to_str().unwrap(),
        ],
        &[],
    );
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn synth_model_file_round_trips_through_generate() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.dartw");
    assert_eq!(
        code(&dart(
            &["synth-model", "--seed", "4", "-o", m.to_str().unwrap()],
            &[]
        )),
        0
    );
    let t = dir.path().join("t.jsonl");
    let o = dart(
        &[
            "generate",
            "--model",
            m.to_str().unwrap(),
            "--gen-len",
            "20",
            "--trace",
            t.to_str().unwrap(),
            "--summary",
            "/dev/null",
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    let missing = dart(&["generate", "--model", "/nonexistent/m.dartw"], &[]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_regime.toml");
    let cfg = dart_core::harness::RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.workload.switch_points, vec![200]);
}
