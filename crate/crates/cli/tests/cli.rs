use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simulmega"))
        .args(args)
        .output()
        .expect("spawn simulmega")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Short training budget shared by the pipeline tests.
const QUICK: &str = "\
# quick pipeline
train.steps_stage1 = 40
train.steps_stage2 = 20
train.warmup_steps = 5
eval.lambdas = 0.9, 0.7, 0.5, 0.3, 0.1
";

#[test]
fn gen_data_is_byte_deterministic() {
    let d = TempDir::new().unwrap();
    ok(run(&["gen-data", "--n", "50", "--out", &p(&d, "a.jsonl")]));
    ok(run(&["gen-data", "--n", "50", "--out", &p(&d, "b.jsonl")]));
    let a = std::fs::read(d.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|b| **b == b'\n').count(), 50);
}

#[test]
fn usage_errors_exit_1() {
    let d = TempDir::new().unwrap();
    assert_eq!(
        code(&run(&["gen-data", "--n", "0", "--out", &p(&d, "x")])),
        1
    );
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(
        code(&run(&[
            "gen-data",
            "--n",
            "5",
            "--out",
            &p(&d, "x"),
            "--set",
            "task.bogus=1"
        ])),
        1
    );
    ok(run(&[
        "gen-data",
        "--n",
        "5",
        "--out",
        &p(&d, "data.jsonl"),
    ]));
    let stage2 = run(&[
        "train",
        "--stage",
        "2",
        "--data",
        &p(&d, "data.jsonl"),
        "--out",
        &p(&d, "m.ckpt"),
    ]);
    assert_eq!(code(&stage2), 1);
    assert!(String::from_utf8_lossy(&stage2.stderr).contains("stage-1 checkpoint"));
    let missing = run(&[
        "train",
        "--stage",
        "2",
        "--data",
        &p(&d, "data.jsonl"),
        "--out",
        &p(&d, "m.ckpt"),
        "--resume",
        &p(&d, "nowhere.ckpt"),
    ]);
    assert_eq!(code(&missing), 1);
    std::fs::write(d.path().join("bad.cfg"), "model.d_model = 64\nnot a pair\n").unwrap();
    let bad = run(&[
        "gen-data",
        "--n",
        "5",
        "--out",
        &p(&d, "x"),
        "--config",
        &p(&d, "bad.cfg"),
    ]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let d = TempDir::new().unwrap();
    ok(run(&[
        "gen-data",
        "--n",
        "4",
        "--out",
        &p(&d, "data.jsonl"),
    ]));
    std::fs::write(d.path().join("m.ckpt"), b"garbage").unwrap();
    std::fs::write(d.path().join("m.ckpt.cfg"), "").unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        &p(&d, "m.ckpt"),
        "--data",
        &p(&d, "data.jsonl"),
        "--out-dir",
        &p(&d, "eval"),
    ]);
    assert_eq!(code(&o), 2);
}

fn csv_without_timing(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let wall = header
        .iter()
        .position(|h| *h == "wall_ms_per_token")
        .unwrap();
    lines
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != wall)
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn pipeline_composes() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("quick.cfg"), QUICK).unwrap();
    let cfg = p(&d, "quick.cfg");
    ok(run(&[
        "gen-data",
        "--n",
        "64",
        "--out",
        &p(&d, "train.jsonl"),
        "--config",
        &cfg,
    ]));
    ok(run(&[
        "gen-data",
        "--n",
        "6",
        "--first-id",
        "100000",
        "--out",
        &p(&d, "valid.jsonl"),
        "--config",
        &cfg,
    ]));
    ok(run(&[
        "train",
        "--stage",
        "1",
        "--data",
        &p(&d, "train.jsonl"),
        "--out",
        &p(&d, "s1.ckpt"),
        "--config",
        &cfg,
    ]));
    let side = std::fs::read_to_string(d.path().join("s1.ckpt.cfg")).unwrap();
    assert!(side.starts_with("# config_hash = "));
    assert!(side.contains("train.steps_stage1 = 40"));
    let log = std::fs::read_to_string(d.path().join("s1.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 40);

    ok(run(&[
        "train",
        "--stage",
        "2",
        "--data",
        &p(&d, "train.jsonl"),
        "--out",
        &p(&d, "s2.ckpt"),
        "--resume",
        &p(&d, "s1.ckpt"),
        "--drop-offline-loss",
    ]));
    let log2 = std::fs::read_to_string(d.path().join("s2.ckpt.log.jsonl")).unwrap();
    assert_eq!(log2.lines().count(), 20);
    for line in log2.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["offline"].as_f64(), Some(0.0), "{line}");
    }
    let side2 = std::fs::read_to_string(d.path().join("s2.ckpt.cfg")).unwrap();
    assert!(side2.contains("train.drop_offline_loss = true"));

    let eval_args = |out: &str| {
        vec![
            "eval".to_string(),
            "--checkpoint".into(),
            p(&d, "s2.ckpt"),
            "--data".into(),
            p(&d, "valid.jsonl"),
            "--out-dir".into(),
            p(&d, out),
        ]
    };
    let a: Vec<String> = eval_args("eval_a");
    ok(run(&a.iter().map(String::as_str).collect::<Vec<_>>()));
    let b: Vec<String> = eval_args("eval_b");
    ok(run(&b.iter().map(String::as_str).collect::<Vec<_>>()));
    let rows = csv_without_timing(&d.path().join("eval_a/curve.csv"));
    assert_eq!(rows, csv_without_timing(&d.path().join("eval_b/curve.csv")));
    assert_eq!(rows.len(), 6);
    let lambdas: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(lambdas, ["0.9", "0.7", "0.5", "0.3", "0.1", "0"]);

    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d.path().join("eval_a/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(summary["curve"].as_array().unwrap().len(), 5);
    let mean_x = {
        let text = std::fs::read_to_string(d.path().join("valid.jsonl")).unwrap();
        let lens: Vec<f64> = text
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["source"].as_array().unwrap().len() as f64
            })
            .collect();
        lens.iter().sum::<f64>() / lens.len() as f64
    };
    let offline_al = summary["offline"]["AL"].as_f64().unwrap();
    assert!(
        (offline_al - mean_x).abs() < 1e-9,
        "{offline_al} vs {mean_x}"
    );

    let sim = ok(run(&[
        "simulate",
        "--checkpoint",
        &p(&d, "s2.ckpt"),
        "--data",
        &p(&d, "valid.jsonl"),
        "--index",
        "2",
        "--lambda",
        "0.5",
        "--trace",
        &p(&d, "trace.jsonl"),
    ]));
    let tokens_line = sim.lines().find(|l| l.starts_with("tokens ")).unwrap();
    let sim_tokens: Vec<u64> = serde_json::from_str(&tokens_line["tokens ".len()..]).unwrap();
    let hyps = std::fs::read_to_string(d.path().join("eval_a/hypotheses.jsonl")).unwrap();
    let third_at_half = hyps
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["lambda"].as_f64() == Some(0.5))
        .nth(2)
        .unwrap();
    let eval_tokens: Vec<u64> =
        serde_json::from_value(third_at_half["outcome"]["tokens"].clone()).unwrap();
    assert_eq!(sim_tokens, eval_tokens);
    assert!(sim.lines().last().unwrap().starts_with("AL="));
    for line in sim.lines().filter(|l| l.contains(" p=")) {
        let p: f64 = line.rsplit("p=").next().unwrap().parse().unwrap();
        assert!(p > 0.0 && p < 1.0, "{line}");
    }
    let trace = std::fs::read_to_string(d.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().all(|l| l.contains("\"action\":")));
}

#[test]
fn near_zero_threshold_reads_everything_first() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("quick.cfg"), QUICK).unwrap();
    let cfg = p(&d, "quick.cfg");
    ok(run(&[
        "gen-data",
        "--n",
        "16",
        "--out",
        &p(&d, "train.jsonl"),
        "--config",
        &cfg,
    ]));
    ok(run(&[
        "train",
        "--stage",
        "1",
        "--data",
        &p(&d, "train.jsonl"),
        "--out",
        &p(&d, "s1.ckpt"),
        "--config",
        &cfg,
        "--set",
        "train.steps_stage1=5",
    ]));
    let sim = ok(run(&[
        "simulate",
        "--checkpoint",
        &p(&d, "s1.ckpt"),
        "--data",
        &p(&d, "train.jsonl"),
        "--lambda",
        "0.000001",
    ]));
    let actions: Vec<&str> = sim
        .lines()
        .filter_map(|l| l.split_whitespace().nth(1))
        .filter(|a| *a == "READ" || *a == "WRITE")
        .collect();
    let first_write = actions.iter().position(|a| *a == "WRITE").unwrap();
    assert!(first_write > 0);
    assert!(
        actions[first_write..].iter().all(|a| *a == "WRITE"),
        "{sim}"
    );
}
