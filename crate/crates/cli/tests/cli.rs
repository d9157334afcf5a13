use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 15] = [
    "world.G=4",
    "world.s=8",
    "world.z=2",
    "world.C=4",
    "masked.layers=2",
    "masked.dim=16",
    "masked.heads=2",
    "masked.mlp_hidden=24",
    "train.steps=3",
    "train.batch_size=2",
    "train.warmup_steps=1",
    "eval.episodes=4",
    "eval.batch=2",
    "eval.bench.warmup=0",
    "eval.bench.repetitions=1",
];

fn hwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hwm")).args(args).output().expect("binary runs")
}

fn tiny_args<'a>(cmd: &'a str, out: &'a str) -> Vec<String> {
    let mut v = vec![cmd.to_string(), "--preset".into(), "masked-base".into(), "--out".into(), out.into()];
    for s in TINY {
        v.push("--set".into());
        v.push(s.into());
    }
    v
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    hwm(&refs)
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn full_scale_flow_base_has_about_1_36_billion_parameters() {
    let out = ok(&hwm(&["params", "--preset", "flow-base", "--full-scale", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let b = v["billions"].as_f64().unwrap();
    assert!((b / 1.36 - 1.0).abs() < 0.1, "{b}");
}

#[test]
fn params_without_a_preset_lists_all_eight() {
    let out = ok(&hwm(&["params", "--json"]));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
    assert_eq!(rows.len(), 8);
    let text = ok(&hwm(&["params"]));
    assert!(text.contains("flow-fullshare") && text.contains("masked-split"));
}

#[test]
fn training_twice_gives_identical_logs() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let mut args = tiny_args("train", out);
    args.extend(["--seed".into(), "7".into()]);
    ok(&run(&args));
    let metrics = std::fs::read(d.path().join("metrics.tsv")).unwrap();
    let ckpt = std::fs::read(d.path().join("checkpoint.hwmc")).unwrap();
    assert_eq!(String::from_utf8_lossy(&metrics).lines().count(), 3);
    ok(&run(&args));
    assert_eq!(metrics, std::fs::read(d.path().join("metrics.tsv")).unwrap());
    assert_eq!(ckpt, std::fs::read(d.path().join("checkpoint.hwmc")).unwrap());

    // The dumped config reproduces the same run.
    let cfg = d.path().join("config.json");
    let copy = d.path().join("effective.json");
    std::fs::copy(&cfg, &copy).unwrap();
    ok(&hwm(&["train", "--config", copy.to_str().unwrap()]));
    assert_eq!(metrics, std::fs::read(d.path().join("metrics.tsv")).unwrap());
    assert_eq!(ckpt, std::fs::read(d.path().join("checkpoint.hwmc")).unwrap());
}

#[test]
fn oracle_eval_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    let mut args = tiny_args("eval", d.path().to_str().unwrap());
    args.extend(["--oracle".into(), "--json".into()]);
    let out = ok(&run(&args));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[0]["token_accuracy"].as_f64(), Some(1.0));
    assert_eq!(v[0]["psnr_db"].as_f64(), Some(100.0));
    assert!(d.path().join("eval.json").exists());
}

#[test]
fn sample_eval_and_bench_after_training() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    ok(&run(&tiny_args("train", out)));
    let mut args = tiny_args("sample", out);
    args.extend(["--count".into(), "2".into()]);
    let listed = ok(&run(&args));
    assert_eq!(listed.lines().count(), 5);
    assert!(Path::new(&d.path().join("samples/sample_000.png")).exists());
    let table = ok(&run(&tiny_args("eval", out)));
    assert!(table.contains("Token accuracy"));
    let mut args = tiny_args("bench", out);
    args.push("--all-variants".into());
    let table = ok(&run(&args));
    assert!(table.contains("masked-fullshare") && table.contains("Samples per second"));
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["params".into(), "--preset".into(), "masked-giant".into()],
        vec!["params".into(), "--set".into(), "world.nope=3".into()],
        tiny_args("eval", out),
        vec!["train".into(), "--config".into(), d.path().join("missing.json").to_str().unwrap().into()],
    ];
    for args in cases {
        let o = run(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        assert!(!o.stderr.is_empty());
    }
    let o = run(&tiny_args("eval", out));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}
