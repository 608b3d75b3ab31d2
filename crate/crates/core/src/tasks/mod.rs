//! Synthetic completion and classification tasks: datasets, training and evaluation.

pub mod metrics;
pub mod shapes;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{ModelConfig, Task};
use crate::error::{Error, Result};
use crate::model::{Model, Target};
use crate::nn::{Adam, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::vxg;

pub use metrics::MetricSet;
pub use shapes::{gen_shapes, occlude, ShapeClass};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor<f32>,
    /// The complete shape; equal to `input` for classification.
    pub target: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub dims: [usize; 3],
    pub task: Task,
    /// Fraction of occupied voxels removed from completion inputs.
    #[serde(default = "default_occlusion")]
    pub occlusion: f64,
    #[serde(default = "all_classes")]
    pub classes: Vec<ShapeClass>,
}

fn default_occlusion() -> f64 {
    0.4
}

fn all_classes() -> Vec<ShapeClass> {
    ShapeClass::ALL.to_vec()
}

impl DatasetSpec {
    pub fn new(seed: u64, count: usize, dims: [usize; 3], task: Task) -> Self {
        DatasetSpec {
            seed,
            count,
            dims,
            task,
            occlusion: default_occlusion(),
            classes: all_classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    labels: Vec<usize>,
}

const MANIFEST: &str = "manifest.json";

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let shapes = gen_shapes(spec.seed, spec.count, spec.dims, &spec.classes)?;
        let samples = shapes
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let input = match spec.task {
                    Task::Complete => occlude(&s.volume, spec.occlusion, spec.seed ^ (0x5EED_0000 + i as u64))?,
                    Task::Classify => s.volume.clone(),
                };
                Ok(Sample {
                    input,
                    target: s.volume,
                    label: s.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { spec: spec.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// The first `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |s: &[Sample]| Dataset {
            spec: DatasetSpec { count: s.len(), ..self.spec.clone() },
            samples: s.to_vec(),
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }

    /// Writes `manifest.json`, `input_NNNNN.vxg` and, for completion, `target_NNNNN.vxg`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            spec: self.spec.clone(),
            labels: self.labels(),
        };
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        for (i, s) in self.samples.iter().enumerate() {
            vxg::write(&dir.join(format!("input_{i:05}.vxg")), &s.input)?;
            if self.spec.task == Task::Complete {
                vxg::write(&dir.join(format!("target_{i:05}.vxg")), &s.target)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        let mut samples = Vec::with_capacity(m.labels.len());
        for (i, &label) in m.labels.iter().enumerate() {
            let input = vxg::read(&dir.join(format!("input_{i:05}.vxg")))?;
            let target = match m.spec.task {
                Task::Complete => vxg::read(&dir.join(format!("target_{i:05}.vxg")))?,
                Task::Classify => input.clone(),
            };
            let want = [1, m.spec.dims[0], m.spec.dims[1], m.spec.dims[2]];
            if input.shape() != want || target.shape() != want {
                return Err(Error::Format(format!("sample {i} does not have shape {want:?}")));
            }
            samples.push(Sample { input, target, label });
        }
        Ok(Dataset { spec: m.spec, samples })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stops after this many optimizer steps when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub schedule: Schedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the planned steps.
    Cosine,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    8
}

fn default_epochs() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            max_steps: None,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Optimizer steps the run will take on `n` samples.
    pub fn planned_steps(&self, n: usize) -> usize {
        let all = self.epochs * n.div_ceil(self.batch_size);
        self.max_steps.map_or(all, |m| m.min(all))
    }

    /// Learning rate for the zero-based step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => 0.5 * self.lr * (1.0 + (std::f64::consts::PI * t as f64 / total.max(1) as f64).cos()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "need lr ≥ 0, batch_size ≥ 1, epochs ≥ 1; got {}, {}, {}",
                self.lr, self.batch_size, self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,split,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
    }
    s
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("epoch,split,metric,value") {
        return Err(Error::Format("metrics CSV must start with epoch,split,metric,value".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("malformed metrics row: {l}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(LogRow {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                split: f[1].trim().into(),
                metric: f[2].trim().into(),
                value: f[3].trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub struct TrainOutcome {
    /// The parameters with the best validation score (the last epoch without validation).
    pub model: Model<f32>,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub steps: usize,
}

fn check_compatible(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if cfg.task != data.spec.task {
        return Err(Error::Config(format!("model task {:?} does not match dataset task {:?}", cfg.task, data.spec.task)));
    }
    if cfg.dims != data.spec.dims || cfg.in_channels != 1 {
        return Err(Error::Config(format!(
            "model expects {}×{:?}, dataset holds 1×{:?}",
            cfg.in_channels, cfg.dims, data.spec.dims
        )));
    }
    if cfg.task == Task::Classify && cfg.num_classes < data.spec.classes.len() {
        return Err(Error::Config(format!("{} classes in the model, {} in the data", cfg.num_classes, data.spec.classes.len())));
    }
    Ok(())
}

fn target_of<'a>(task: Task, s: &'a Sample) -> Target<'a, f32> {
    match task {
        Task::Complete => Target::Occupancy(&s.target),
        Task::Classify => Target::Label(s.label),
    }
}

/// Loss and per-parameter gradients for one sample.
fn sample_grads(model: &Model<f32>, tape: &mut Tape<f32>, bound: &mut Bound, s: &Sample) -> Result<(f64, Vec<Vec<f32>>)> {
    tape.reset();
    model.params.bind(tape, bound)?;
    let x = tape.constant(&s.input)?;
    let fwd = model.forward(tape, bound, x)?;
    let loss = model.loss(tape, fwd.output, target_of(model.config.task, s))?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    tape.backward(loss)?;
    let grads = (0..model.params.len())
        .map(|id| match tape.grad(bound[id]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; model.params.get(id).numel()],
        })
        .collect();
    Ok((value, grads))
}

fn batch_grads(model: &Model<f32>, batch: &[&Sample]) -> Result<Vec<(f64, Vec<Vec<f32>>)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch
            .par_iter()
            .map_init(|| (Tape::new(), Bound::new()), |(tape, bound), s| sample_grads(model, tape, bound, s))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let (mut tape, mut bound) = (Tape::new(), Bound::new());
        batch.iter().map(|s| sample_grads(model, &mut tape, &mut bound, s)).collect()
    }
}

/// Adam on mean per-sample gradients. Per-sample gradients are summed in
/// batch order, so results do not depend on the thread count.
pub fn train(cfg: ModelConfig, train_set: &Dataset, val: Option<&Dataset>, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    check_compatible(&cfg, train_set)?;
    if let Some(v) = val {
        check_compatible(&cfg, v)?;
    }
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = Model::<f32>::new(cfg)?;
    let mut adam = Adam::<f32>::new(&model.params, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut steps = 0;
    let total = tc.planned_steps(train_set.len());
    let mut sum: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    'epochs: for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let results = batch_grads(&model, &batch).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {}: {m}", steps + 1)),
                e => e,
            })?;
            sum.iter_mut().for_each(|g| g.fill(0.0));
            for (loss, grads) in &results {
                loss_sum += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            seen += results.len();
            let inv = 1.0 / results.len() as f32;
            sum.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            adam.lr = tc.lr_at(steps, total);
            adam.update(&mut model.params, &sum);
            steps += 1;
        }
        if seen > 0 {
            log.push(LogRow {
                epoch,
                split: "train".into(),
                metric: "loss".into(),
                value: loss_sum / seen as f64,
            });
        }
        let score = match val {
            Some(v) => {
                let m = evaluate(&model, v)?;
                for (name, value) in m.entries() {
                    log.push(LogRow {
                        epoch,
                        split: "val".into(),
                        metric: name.into(),
                        value,
                    });
                }
                match model.config.task {
                    Task::Complete => m.iou.unwrap_or(0.0),
                    Task::Classify => m.accuracy.unwrap_or(0.0),
                }
            }
            None => epoch as f64,
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.params.clone()));
        }
        if tc.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        steps,
    })
}

/// Predicted label or thresholded occupancy per sample, plus the mean loss.
fn predict_all(model: &Model<f32>, data: &Dataset) -> Result<Vec<(Tensor<f32>, f64)>> {
    let one = |tape: &mut Tape<f32>, bound: &mut Bound, s: &Sample| -> Result<(Tensor<f32>, f64)> {
        tape.reset();
        model.params.bind(tape, bound)?;
        let x = tape.constant(&s.input)?;
        let fwd = model.forward(tape, bound, x)?;
        let loss = model.loss(tape, fwd.output, target_of(model.config.task, s))?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        Ok((tape.value(fwd.output).clone(), value))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.samples
            .par_iter()
            .map_init(|| (Tape::inference(), Bound::new()), |(t, b), s| one(t, b, s))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let (mut t, mut b) = (Tape::inference(), Bound::new());
        data.samples.iter().map(|s| one(&mut t, &mut b, s)).collect()
    }
}

/// Task metrics and mean loss on `data`. Completion logits are thresholded at 0
/// (probability 0.5).
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<MetricSet> {
    check_compatible(&model.config, data)?;
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let outputs = predict_all(model, data)?;
    let loss = outputs.iter().map(|(_, l)| l).sum::<f64>() / outputs.len() as f64;
    let mut m = match model.config.task {
        Task::Complete => {
            let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = outputs
                .into_iter()
                .zip(&data.samples)
                .map(|((logits, _), s)| (logits.map(|z| if z > 0.0 { 1.0 } else { 0.0 }), s.target.clone()))
                .collect();
            metrics::completion_metrics(&pairs)?
        }
        Task::Classify => {
            let pred: Vec<usize> = outputs.iter().map(|(l, _)| metrics::argmax(l.data())).collect();
            metrics::classification_metrics(&pred, &data.labels(), model.config.num_classes)?
        }
    };
    m.loss = Some(loss);
    Ok(m)
}
