use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn prm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prm"))
        .args(args)
        .env("PRM_LOG", "error")
        .output()
        .expect("run prm")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const DATA_FILES: [&str; 5] = [
    "rerank_train.jsonl",
    "rerank_test.jsonl",
    "candidates_train.jsonl",
    "candidates_test.jsonl",
    "pretrain.jsonl",
];

#[test]
fn synth_with_zero_requests_gives_an_empty_valid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = prm(&["synth", "--requests", "0", "--pretrain-records", "0", "--out", out_dir]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in DATA_FILES {
        let data = dir.path().join("data").join(f);
        assert_eq!(fs::read_to_string(&data).unwrap(), "");
        let m = json(&data.with_extension("manifest.json"));
        assert_eq!(m["num_records"], 0);
    }
}

#[test]
fn synth_is_deterministic_and_manifests_count_lines() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let out = prm(&["synth", "--requests", "60", "--pretrain-records", "80", "--test-requests", "20", "--seed", seed, "--out", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        p.join("data")
    };
    let (a, b, c) = (run("a", "4"), run("b", "4"), run("c", "5"));
    for f in DATA_FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("pretrain.jsonl")).unwrap(), fs::read(c.join("pretrain.jsonl")).unwrap());

    for f in DATA_FILES {
        let text = fs::read_to_string(a.join(f)).unwrap();
        let m = json(&a.join(f).with_extension("manifest.json"));
        assert_eq!(m["num_records"].as_u64().unwrap() as usize, text.lines().count(), "{f}");
    }
    let test_lines = fs::read_to_string(a.join("rerank_test.jsonl")).unwrap().lines().count();
    assert_eq!(test_lines, 20);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small\nseed = 5\nsynth.requests = 30\nsynth.pretrain_records = 10\ntest_requests = 5\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = prm(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9", "--requests", "12", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let prov = json(&out_dir.join("provenance/synth.json"));
    assert_eq!(prov["seed"], 9);
    assert_eq!(prov["config"]["synth"]["requests"], 12);
    assert_eq!(prov["config"]["synth"]["pretrain_records"], 10);
}

#[test]
fn exit_codes_separate_configuration_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let unknown = prm(&["synth", "--set", "synth.no_such_key=1", "--out", out_dir]);
    assert_eq!(code(&unknown), 2);
    let bad_spec = prm(&["synth", "--requests", "5", "--set", "synth.list_len=0", "--out", out_dir]);
    assert_eq!(code(&bad_spec), 2);
    let bad_stage = prm(&["pipeline", "--stages", "nope", "--out", out_dir]);
    assert_eq!(code(&bad_stage), 2);
    let missing_dep = prm(&["pipeline", "--stages", "eval", "--out", out_dir]);
    assert_eq!(code(&missing_dep), 2);
    assert!(String::from_utf8_lossy(&missing_dep.stderr).contains("train-prm"));
    let corrupt = dir.path().join("corrupt.json");
    fs::write(&corrupt, "{}").unwrap();
    let runtime = prm(&["serve", "--checkpoint", corrupt.to_str().unwrap(), "--out", out_dir]);
    assert_eq!(code(&runtime), 1);
}

#[test]
fn pipeline_then_serve_matches_eval_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out_s = out_dir.to_str().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(
        &cfg,
        "synth.requests = 120\nsynth.pretrain_records = 400\ntest_requests = 30\nn_max = 10\n\
         baseline.train.max_steps = 10\npretrain.train.max_steps = 10\npretrain.hidden = [8, 4]\n\
         prm.model.d_model = 8\nprm.model.num_heads = 2\nprm.model.num_blocks = 1\n\
         prm.train.max_steps = 10\nprm.train.batch_size = 16\n",
    )
    .unwrap();
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(code(&prm(&["synth", "--config", cfg_s, "--out", out_s])), 0);
    let run = prm(&["pipeline", "--config", cfg_s, "--out", out_s]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["models/prm.json", "reports/metrics.json", "reports/attention_category.csv", "provenance/eval.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    let mut child = Command::new(env!("CARGO_BIN_EXE_prm"))
        .args(["serve", "--port", "0", "--out", out_s])
        .env("PRM_LOG", "error")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
    let addr = first.trim().strip_prefix("listening on ").expect("address line").to_string();

    let stream = TcpStream::connect(&addr).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let test = fs::read_to_string(out_dir.join("lists/test.jsonl")).unwrap();
    let dumps = fs::read_to_string(out_dir.join("reports/scores.jsonl")).unwrap();
    for (req, expected) in test.lines().zip(dumps.lines()).take(10) {
        writer.write_all(format!("{req}\n").as_bytes()).unwrap();
        let mut reply = String::new();
        reader.read_line(&mut reply).unwrap();
        let got: Value = serde_json::from_str(&reply).unwrap();
        let want: Value = serde_json::from_str(expected).unwrap();
        assert_eq!(got["order"], want["order"]);
        let g: Vec<f64> = serde_json::from_value(got["scores"].clone()).unwrap();
        let w: Vec<f64> = serde_json::from_value(want["scores"].clone()).unwrap();
        for (a, b) in g.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    child.kill().unwrap();
    child.wait().unwrap();
}
