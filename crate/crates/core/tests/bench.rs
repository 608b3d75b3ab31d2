//! Benchmark harness: summary statistics, allocation discipline and the concurrent path.

use triplane::autodiff::Tape;
use triplane::bench::{append_csv, bench_forward, BenchConfig, BenchResult};
use triplane::config::{ModelConfig, PeMode};
use triplane::flops::count_stages;
use triplane::nn::Bound;
use triplane::{Model, Tensor};

fn quick() -> BenchConfig {
    BenchConfig {
        threads: Some(1),
        ..BenchConfig::default()
    }
}

#[test]
fn result_fields_are_consistent() {
    let cfg = ModelConfig::preset("hybrid-1/2", [16; 3]).unwrap();
    let r = bench_forward(&cfg, [16; 3], &quick()).unwrap();
    assert!((r.throughput - 1000.0 / r.mean_ms).abs() < 1e-9);
    assert!(r.p95_ms >= r.median_ms && r.median_ms >= 0.0);
    assert_eq!((r.iters, r.warmup, r.threads), (10, 3, 1));
    assert_eq!(r.flops, count_stages(&cfg, [16; 3]).unwrap().total());
    assert_eq!(r.config_hash, cfg.hash());
    assert_eq!(r.config_id, "hybrid(1/2)");
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["iters"], 10);
}

#[test]
fn timed_region_does_not_allocate() {
    for (name, pe) in [("backbone", PeMode::Transformer), ("hybrid-1/2", PeMode::Sinusoidal), ("dense3d", PeMode::None)] {
        let cfg = ModelConfig::preset(name, [16; 3]).unwrap().with_pe(pe);
        for concurrent in [false, true] {
            let bc = BenchConfig { concurrent, ..quick() };
            let r = bench_forward(&cfg, [16; 3], &bc).unwrap();
            assert_eq!(r.timed_allocations, 0, "{name} concurrent={concurrent}");
        }
    }
}

#[test]
fn too_few_iterations_are_rejected() {
    let cfg = ModelConfig::preset("backbone", [16; 3]).unwrap();
    assert!(bench_forward(&cfg, [16; 3], &BenchConfig { iters: 9, ..quick() }).is_err());
    assert!(bench_forward(&cfg, [16; 3], &BenchConfig { warmup: 2, ..quick() }).is_err());
    assert!(bench_forward(&cfg, [16; 3], &BenchConfig { threads: Some(0), ..quick() }).is_err());
}

#[test]
fn concurrent_streams_compute_the_same_output() {
    let cfg = ModelConfig::preset("hybrid-1/4", [16; 3]).unwrap().with_pe(PeMode::Transformer);
    let model = Model::<f64>::new(cfg).unwrap();
    let x = Tensor::from_fn(&model.input_shape(), |i| ((i[1] * 7 + i[2] * 3 + i[3]) % 5) as f64 / 5.0);
    let (mut a, mut pa) = (Tape::inference(), Bound::new());
    model.params.bind(&mut a, &mut pa).unwrap();
    let xa = a.constant(&x).unwrap();
    let seq = model.forward(&mut a, &pa, xa).unwrap();

    let (mut m, mut pm, mut s, mut ps) = (Tape::inference(), Bound::new(), Tape::inference(), Bound::new());
    model.params.bind(&mut m, &mut pm).unwrap();
    model.params.bind(&mut s, &mut ps).unwrap();
    let (xm, xs) = (m.constant(&x).unwrap(), s.constant(&x).unwrap());
    let par = model.forward_concurrent(&mut m, &pm, xm, &mut s, &ps, xs).unwrap();
    assert_eq!(a.value(seq.output).data(), m.value(par.output).data());
    assert_eq!(seq.stages, par.stages);
}

#[test]
fn csv_ledger_writes_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let cfg = ModelConfig::preset("backbone", [16; 3]).unwrap();
    let r = bench_forward(&cfg, [16; 3], &quick()).unwrap();
    append_csv(&path, std::slice::from_ref(&r)).unwrap();
    append_csv(&path, &[r]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], BenchResult::csv_header());
    assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
}

#[test]
fn doubling_iterations_keeps_the_mean_steady() {
    let cfg = ModelConfig::preset("backbone", [32; 3]).unwrap();
    let bc = BenchConfig {
        warmup: 5,
        iters: 20,
        min_sample_ms: 20.0,
        ..quick()
    };
    let a = bench_forward(&cfg, [32; 3], &bc).unwrap();
    let b = bench_forward(&cfg, [32; 3], &BenchConfig { iters: 40, ..bc }).unwrap();
    let change = (b.mean_ms / a.mean_ms - 1.0).abs();
    assert!(change < 0.05, "{} ms vs {} ms", a.mean_ms, b.mean_ms);
}
