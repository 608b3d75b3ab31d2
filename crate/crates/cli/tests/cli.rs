//! End-to-end runs of the `triplane` binary.

use std::path::Path;
use std::process::{Command, Output};

use triplane::config::ModelConfig;
use triplane::{vxg, Tensor};

fn triplane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triplane")).args(args).env("TRIPLANE_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = triplane(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir`, sorted, with its bytes.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&f).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    for out in [&a, &b] {
        ok(&["gen-data", "--out", p(out), "--seed", "5", "--count", "8", "--dims", "16", "--task", "complete"]);
    }
    ok(&["gen-data", "--out", p(&c), "--seed", "6", "--count", "8", "--dims", "16", "--task", "complete"]);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    assert_eq!(tree(&a).len(), 8 * 2 + 2);
    assert_eq!(json(&a.join("report.json"))["class_counts"], serde_json::json!([2, 2, 2, 2]));
}

#[test]
fn flops_orders_backbone_below_dense_at_128() {
    let d = tempfile::tempdir().unwrap();
    let (b, dense) = (d.path().join("backbone.json"), d.path().join("dense3d.json"));
    ok(&["config", "--preset", "backbone", "--dims", "32", "--out", p(&b)]);
    ok(&["config", "--preset", "dense3d", "--dims", "32", "--out", p(&dense)]);
    let total = |cfg: &Path| {
        let text = ok(&["flops", "--config", p(cfg), "--dims", "128"]);
        assert!(text.contains("total"));
        json(&cfg.with_file_name(format!("{}.flops.json", cfg.file_stem().unwrap().to_str().unwrap())))["report"]["total"]
            .as_u64()
            .unwrap()
    };
    assert!(total(&b) < total(&dense));
    let out = d.path().join("cmp.json");
    ok(&["flops", "--config", p(&b), "--compare", p(&dense), "--dims", "64", "--out", p(&out)]);
    assert_eq!(json(&out)["comparison"]["labels"], serde_json::json!(["backbone", "dense3d"]));
}

#[test]
fn train_eval_and_plot_are_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let val = d.path().join("val");
    ok(&["gen-data", "--out", p(&data), "--seed", "1", "--count", "8", "--dims", "16", "--task", "complete"]);
    ok(&["gen-data", "--out", p(&val), "--seed", "2", "--count", "4", "--dims", "16", "--task", "complete"]);
    let mut runs = Vec::new();
    for preset in ["backbone", "hybrid-1/4"] {
        let cfg = d.path().join(format!("{}.json", preset.replace('/', "_")));
        ok(&["config", "--preset", preset, "--dims", "16", "--out", p(&cfg)]);
        let outs: Vec<_> = ["x", "y"].iter().map(|s| d.path().join(format!("{}-{s}", preset.replace('/', "_")))).collect();
        for out in &outs {
            ok(&[
                "train", "--config", p(&cfg), "--data", p(&data), "--val", p(&val), "--out", p(out), "--epochs", "2", "--batch-size", "4",
                "--seed", "3",
            ]);
        }
        assert_eq!(tree(&outs[0]), tree(&outs[1]), "{preset}");
        let report = json(&outs[0].join("report.json"));
        // The echoed config parses back to the same structure.
        let echoed = ModelConfig::from_json(&report["config"].to_string()).unwrap();
        assert_eq!(echoed, ModelConfig::from_json(&std::fs::read_to_string(&cfg).unwrap()).unwrap());
        let ck = outs[0].join("checkpoint.json");
        let e1 = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&val)]);
        let e2 = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&val)]);
        assert_eq!(e1, e2);
        assert!(e1.contains("iou"));
        let ev = json(&outs[0].join("checkpoint.eval.json"));
        assert_eq!(ev["metrics"]["iou"], report["val"]["iou"]);
        runs.push(outs[0].join("metrics.csv"));
    }
    let svg = d.path().join("fig.svg");
    ok(&["plot", "--metrics", p(&runs[0]), p(&runs[1]), "--out", p(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let series: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("series")).collect();
    assert_eq!(series.len(), 2);
    assert_eq!(series[0].attribute("data-label"), Some("backbone"));
    assert_eq!(json(&svg.with_extension("json"))["series"].as_array().unwrap().len(), 2);
}

#[test]
fn bench_writes_csv_and_json() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("h.json");
    ok(&["config", "--preset", "hybrid-1/2", "--dims", "16", "--out", p(&cfg)]);
    let csv = d.path().join("bench.csv");
    let text = ok(&["bench", "--config", p(&cfg), "--iters", "10", "--out", p(&csv)]);
    assert!(text.contains("volumes/s") && text.contains("1 threads"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
    assert_eq!(json(&csv.with_extension("json"))["iters"], 10);
    let o = triplane(&["bench", "--config", p(&cfg), "--iters", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

fn reason(o: &Output) -> String {
    let e = String::from_utf8_lossy(&o.stderr).into_owned();
    assert_eq!(e.trim_end().lines().count(), 1, "{e}");
    e
}

#[test]
fn exit_codes_follow_the_contract() {
    let d = tempfile::tempdir().unwrap();
    // Configuration: an unknown key.
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{"variant": "backbone", "dims": [16, 16, 16], "wings": 2}"#).unwrap();
    let o = triplane(&["flops", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(reason(&o).starts_with("error[config]:"));
    let o = triplane(&["gen-data", "--out", p(d.path()), "--count", "x", "--task", "complete"]);
    assert_eq!(o.status.code(), Some(1));
    reason(&o);

    // I/O: a missing file.
    let o = triplane(&["flops", "--config", p(&d.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(reason(&o).starts_with("error[io]:"));

    // Numeric: a NaN voxel in the training data.
    let data = d.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--count", "4", "--dims", "16", "--task", "complete"]);
    let mut v: Tensor<f32> = vxg::read(&data.join("input_00002.vxg")).unwrap();
    v.set(&[0, 8, 8, 8], f32::NAN);
    vxg::write(&data.join("input_00002.vxg"), &v).unwrap();
    let cfg = d.path().join("b.json");
    ok(&["config", "--preset", "backbone", "--dims", "16", "--out", p(&cfg)]);
    let o = triplane(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&d.path().join("run")), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(reason(&o).starts_with("error[numeric]:"));

    // A truncated voxel file is a format error.
    let bytes = std::fs::read(data.join("input_00001.vxg")).unwrap();
    std::fs::write(data.join("input_00001.vxg"), &bytes[..bytes.len() - 4]).unwrap();
    let o = triplane(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&d.path().join("run2"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(reason(&o).contains("input_00001.vxg"));
}
