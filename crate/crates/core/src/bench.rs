//! Forward-only latency and throughput on the CPU.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Bound;
use crate::tensor::Tensor;

/// Environment variable read when no thread count is given.
pub const THREADS_ENV: &str = "TRIPLANE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    /// Worker threads; `None` reads [`THREADS_ENV`], then falls back to all cores.
    pub threads: Option<usize>,
    /// Runs the volumetric branch beside the plane stream.
    pub concurrent: bool,
    /// Samples shorter than this repeat the forward pass and report the mean.
    pub min_sample_ms: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 3,
            iters: 10,
            threads: None,
            concurrent: false,
            min_sample_ms: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config_id: String,
    pub config_hash: String,
    pub dims: [usize; 3],
    pub threads: usize,
    pub concurrent: bool,
    pub warmup: usize,
    pub iters: usize,
    /// Forward passes per timed sample.
    pub repeats: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Volumes per second, `1000 / mean_ms`.
    pub throughput: f64,
    pub flops: u64,
    /// Fresh tape buffers allocated inside the timed region.
    pub timed_allocations: u64,
}

const CSV_HEADER: &str = "config_id,config_hash,dims,threads,concurrent,warmup,iters,repeats,mean_ms,median_ms,p95_ms,throughput,flops,timed_allocations";

impl BenchResult {
    pub fn csv_header() -> &'static str {
        CSV_HEADER
    }

    pub fn csv_row(&self) -> String {
        let d = self.dims;
        format!(
            "{},{},{}x{}x{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.3},{},{}",
            self.config_id,
            self.config_hash,
            d[0],
            d[1],
            d[2],
            self.threads,
            self.concurrent,
            self.warmup,
            self.iters,
            self.repeats,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.throughput,
            self.flops,
            self.timed_allocations
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Appends rows to a CSV ledger, writing the header when the file is new.
pub fn append_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut text = String::new();
    if fresh {
        let _ = writeln!(text, "{CSV_HEADER}");
    }
    for r in results {
        let _ = writeln!(text, "{}", r.csv_row());
    }
    std::fs::OpenOptions::new().create(true).append(true).open(path)?.write_all(text.as_bytes())?;
    Ok(())
}

/// Thread count from the argument, then [`THREADS_ENV`], then the core count.
pub fn resolve_threads(threads: Option<usize>) -> Result<usize> {
    let n = match threads {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

/// Sorted-sample summary: mean, median, and nearest-rank 95th percentile.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    (mean, median, p95)
}

struct Runner<'a> {
    model: &'a Model<f32>,
    input: &'a Tensor<f32>,
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    concurrent: bool,
    main: Tape<f32>,
    side: Tape<f32>,
    pm: Bound,
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    ps: Bound,
}

impl Runner<'_> {
    fn step(&mut self) -> Result<u64> {
        self.main.reset();
        self.model.params.bind(&mut self.main, &mut self.pm)?;
        let x = self.main.constant(self.input)?;
        #[cfg(feature = "parallel")]
        if self.concurrent {
            self.side.reset();
            self.model.params.bind(&mut self.side, &mut self.ps)?;
            let xs = self.side.constant(self.input)?;
            let f = self.model.forward_concurrent(&mut self.main, &self.pm, x, &mut self.side, &self.ps, xs)?;
            return Ok(f.stages.total());
        }
        let f = self.model.forward(&mut self.main, &self.pm, x)?;
        Ok(f.stages.total())
    }

    fn misses(&self) -> u64 {
        self.main.pool_misses() + self.side.pool_misses()
    }
}

fn run(model: &Model<f32>, input: &Tensor<f32>, bc: &BenchConfig) -> Result<(Vec<f64>, usize, u64, u64)> {
    let mut r = Runner {
        model,
        input,
        concurrent: bc.concurrent,
        main: Tape::inference(),
        side: Tape::inference(),
        pm: Bound::new(),
        ps: Bound::new(),
    };
    let mut flops = 0;
    let mut first = f64::INFINITY;
    for _ in 0..bc.warmup {
        let t = Instant::now();
        flops = r.step()?;
        first = first.min(t.elapsed().as_secs_f64() * 1e3);
    }
    let repeats = if first >= bc.min_sample_ms { 1 } else { (bc.min_sample_ms / first.max(1e-6)).ceil() as usize };
    let mut samples = Vec::with_capacity(bc.iters);
    let before = r.misses();
    for _ in 0..bc.iters {
        let t = Instant::now();
        for _ in 0..repeats {
            r.step()?;
        }
        samples.push(t.elapsed().as_secs_f64() * 1e3 / repeats as f64);
    }
    Ok((samples, repeats, flops, r.misses() - before))
}

/// Times `iters` forward passes of `config` at `dims` on one fixed random input.
pub fn bench_forward(config: &ModelConfig, dims: [usize; 3], bc: &BenchConfig) -> Result<BenchResult> {
    if bc.warmup < 3 || bc.iters < 10 {
        return Err(Error::Config(format!("need warmup ≥ 3 and iters ≥ 10, got {} and {}", bc.warmup, bc.iters)));
    }
    let mut cfg = config.clone();
    cfg.dims = dims;
    let model = Model::<f32>::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let shape = model.input_shape();
    let input = Tensor::from_fn(&shape, |_| rng.random::<f32>());
    let threads = resolve_threads(bc.threads)?;

    #[cfg(feature = "parallel")]
    let (samples, repeats, flops, misses) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(|| run(&model, &input, bc))?;
    #[cfg(not(feature = "parallel"))]
    let (samples, repeats, flops, misses) = run(&model, &input, bc)?;

    let (mean, median, p95) = summarize(&samples);
    Ok(BenchResult {
        config_id: cfg.label(),
        config_hash: cfg.hash(),
        dims,
        threads,
        concurrent: bc.concurrent,
        warmup: bc.warmup,
        iters: bc.iters,
        repeats,
        mean_ms: mean,
        median_ms: median,
        p95_ms: p95,
        throughput: 1000.0 / mean,
        flops,
        timed_allocations: misses,
    })
}
