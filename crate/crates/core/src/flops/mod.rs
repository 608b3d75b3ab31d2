//! Analytic FLOP counts for every stage of every model variant.
//!
//! The counts mirror the forward pass op by op under the conventions in
//! [`rules`], so they agree with the tape's runtime counter.

pub mod rules;

use std::fmt;

use serde::Serialize;

use crate::config::{BranchInput, ModelConfig, PeConfig, PeMode, Task, TokenLayout, Variant};
use crate::error::{Error, Result};
use crate::model::{Model, Stage, StageFlops};
use crate::volumetric::{pool_factor, target_dims};

fn positive(op: &'static str, vals: &[usize]) -> Result<()> {
    if vals.contains(&0) {
        return Err(Error::invalid(op, format!("dimensions must be positive, got {vals:?}")));
    }
    Ok(())
}

/// Same-padded stride-1 2D conv without bias: `2·k²·C_in·C_out·H·W`.
pub fn count_conv2d(cin: usize, cout: usize, k: usize, h: usize, w: usize) -> Result<u64> {
    positive("count_conv2d", &[cin, cout, k, h, w])?;
    Ok(rules::conv(cin, cout, k * k, h * w, false))
}

/// Same-padded stride-1 3D conv without bias: `2·k³·C_in·C_out·D·H·W`.
pub fn count_conv3d(cin: usize, cout: usize, k: usize, dims: [usize; 3]) -> Result<u64> {
    positive("count_conv3d", &[cin, cout, k, dims[0], dims[1], dims[2]])?;
    Ok(rules::conv(cin, cout, k * k * k, dims.iter().product(), false))
}

pub fn count_matmul(m: usize, k: usize, n: usize) -> Result<u64> {
    positive("count_matmul", &[m, k, n])?;
    Ok(rules::matmul(m, k, n))
}

/// One multi-head self-attention block on `seq` tokens of width `dim`:
/// Q/K/V/output projections with bias, `QKᵀ` and `AV` (`2·seq²·dim` each),
/// score scaling and softmax.
pub fn count_attention(seq: usize, dim: usize, heads: usize) -> Result<u64> {
    positive("count_attention", &[seq, dim, heads])?;
    if !dim.is_multiple_of(heads) {
        return Err(Error::invalid("count_attention", format!("dim {dim} is not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let per_head = rules::matmul(seq, dh, seq) + rules::elementwise(seq * seq) + rules::softmax(seq * seq) + rules::matmul(seq, seq, dh);
    Ok(4 * linear(seq, dim, dim) + heads as u64 * per_head)
}

fn linear(m: usize, din: usize, dout: usize) -> u64 {
    rules::matmul(m, din, dout) + rules::elementwise(m * dout)
}

/// Conv stack `cin → widths… → cout` over `plane` positions, relu between layers.
fn conv_stack(cin: usize, widths: &[usize], cout: usize, taps: usize, plane: usize) -> u64 {
    let mut c = cin;
    let mut total = 0;
    for (i, &w) in widths.iter().chain(std::iter::once(&cout)).enumerate() {
        if i > 0 {
            total += rules::elementwise(c * plane);
        }
        total += rules::conv(c, w, taps, plane, true);
        c = w;
    }
    total
}

fn resize(channels: usize, from: [usize; 3], to: [usize; 3]) -> u64 {
    let mut cur = from;
    let mut total = 0;
    for ax in 0..3 {
        if cur[ax] != to[ax] {
            cur[ax] = to[ax];
            total += rules::resize_axis(channels * cur.iter().product::<usize>());
        }
    }
    total
}

fn encoder_layer(seq: usize, pe: &PeConfig) -> u64 {
    let d = pe.model_dim;
    let fd = pe.ffn_mult * d;
    let attn = count_attention(seq, d, pe.heads).unwrap_or(0);
    2 * rules::layer_norm(seq * d)
        + attn
        + 2 * rules::elementwise(seq * d)
        + linear(seq, d, fd)
        + rules::elementwise(seq * fd)
        + linear(seq, fd, d)
}

/// Transformer PE from axis tokens to both sets of profiles.
fn transformer_pe(cfg: &ModelConfig) -> u64 {
    let pe = &cfg.pe;
    let (c, cp, d) = (cfg.in_channels, cfg.plane_channels, pe.model_dim);
    let dims = cfg.dims;
    let mut total = 0;
    let seq = match pe.layout {
        TokenLayout::Profiles => {
            for &dk in &dims {
                total += linear(c, dk, d) + rules::elementwise(c * d);
            }
            3 * c
        }
        TokenLayout::Slices => {
            for &dk in &dims {
                total += linear(dk, c, d) + rules::elementwise(dk * d);
                if pe.position_embeddings {
                    total += rules::elementwise(dk * d);
                }
            }
            dims.iter().sum()
        }
    };
    total += pe.layers as u64 * encoder_layer(seq, pe) + rules::layer_norm(seq * d);
    for &dk in &dims {
        total += match pe.layout {
            TokenLayout::Profiles => linear(c, d, dk) + rules::mean_axis(c * d, d) + linear(1, d, cp * dk),
            TokenLayout::Slices => linear(dk, d, c) + linear(dk, d, cp),
        };
    }
    total
}

/// Profiles from fixed per-axis coordinate features.
fn coordinate_pe(cfg: &ModelConfig) -> u64 {
    let pe = &cfg.pe;
    let mut total = 0;
    for &dk in &cfg.dims {
        let din = if pe.mode == PeMode::Mlp {
            total += linear(dk, 1, pe.mlp_hidden) + rules::elementwise(dk * pe.mlp_hidden);
            pe.mlp_hidden
        } else {
            2 * pe.frequencies
        };
        total += linear(dk, din, cfg.in_channels) + linear(dk, din, cfg.plane_channels);
    }
    total
}

fn tri_plane(cfg: &ModelConfig, s: &mut StageFlops) {
    let [dx, dy, dz] = cfg.dims;
    let n = dx * dy * dz;
    let (c, cp) = (cfg.in_channels, cfg.plane_channels);
    let areas = [dy * dz, dx * dz, dx * dy];
    let mut add = |stage: Stage, f: u64| s.0[stage as usize] += f;

    for &a in &areas {
        add(Stage::Projection, rules::mean_axis(c * n, c * a));
    }

    let profiles = cfg.pe.mode.has_profiles();
    if cfg.pe.mode == PeMode::Transformer {
        // Tokens read off P_z and P_y.
        let tokens = rules::mean_axis(c * dx * dy, c * dx) + rules::mean_axis(c * dx * dy, c * dy) + rules::mean_axis(c * dx * dz, c * dz);
        add(Stage::PositionalEncoding, tokens + transformer_pe(cfg));
    } else if profiles {
        add(Stage::PositionalEncoding, coordinate_pe(cfg));
    }
    if profiles {
        for (k, &a) in areas.iter().enumerate() {
            add(Stage::PositionalEncoding, rules::mean_axis(c * cfg.dims[k], c) + 3 * rules::elementwise(c * a));
        }
    }

    let taps = cfg.kernel * cfg.kernel;
    for &a in &areas {
        add(Stage::PlaneEncoders, conv_stack(cfg.plane_in_channels(), &cfg.encoder_widths, cp, taps, a));
    }

    for &a in &areas {
        add(Stage::Lifting, rules::elementwise(cp * a));
    }
    if profiles {
        add(Stage::PositionalEncoding, rules::elementwise(cp * (2 * areas[0] + areas[1])));
    }
    add(Stage::Lifting, 2 * rules::elementwise(cp * n));

    if let Some(r) = cfg.ratio {
        let cin = match (cfg.branch_input, cfg.pe.mode) {
            (BranchInput::Modulated, PeMode::Coordconv) => c + 3,
            _ => c,
        };
        if cfg.branch_input == BranchInput::Modulated && profiles {
            add(Stage::PositionalEncoding, 3 * rules::elementwise(c * n));
        }
        let coarse = target_dims(cfg.dims, r).unwrap_or(cfg.dims);
        let m = coarse.iter().product::<usize>();
        let down = match pool_factor(r) {
            Some(_) => rules::avg_pool(cin * n, cin * m),
            None => resize(cin, cfg.dims, coarse),
        };
        let k3 = cfg.kernel.pow(3);
        add(
            Stage::VolumeBranch,
            down + conv_stack(cin, &cfg.volume_widths, cp, k3, m) + resize(cp, coarse, cfg.dims),
        );
        add(Stage::Fusion, rules::elementwise(cp * n));
    }
    let mixer = cfg.mixer_layers();
    if mixer > 0 {
        add(Stage::Fusion, conv_stack(cp, &vec![cp; mixer - 1], cp, 1, n));
    }
}

fn dense(cfg: &ModelConfig, s: &mut StageFlops) {
    let n: usize = cfg.dims.iter().product();
    let half = cfg.dims.map(|d| d.div_ceil(2));
    let m: usize = half.iter().product();
    let [w1, w2] = [cfg.dense_widths[0], cfg.dense_widths[1]];
    let k3 = cfg.kernel.pow(3);
    let e = rules::elementwise;
    let f = rules::conv(cfg.in_channels, w1, k3, n, true)
        + e(w1 * n)
        + rules::conv(w1, w1, k3, n, true)
        + e(w1 * n)
        + rules::avg_pool(w1 * n, w1 * m)
        + rules::conv(w1, w2, k3, m, true)
        + e(w2 * m)
        + rules::conv(w2, w2, k3, m, true)
        + e(w2 * m)
        + resize(w2, half, cfg.dims)
        + rules::conv(w2, w1, 1, n, true)
        + 2 * e(w1 * n)
        + rules::conv(w1, w1, k3, n, true)
        + e(w1 * n);
    s.0[Stage::Dense as usize] += f;
}

fn head(cfg: &ModelConfig, s: &mut StageFlops) {
    let n: usize = cfg.dims.iter().product();
    let c = cfg.head_channels();
    s.0[Stage::Head as usize] += match cfg.task {
        Task::Complete => rules::conv(c, 1, 1, n, true),
        Task::Classify => rules::mean_axis(c * n, c) + linear(1, c, cfg.num_classes),
    };
}

/// Per-stage forward FLOPs of `config` evaluated at `dims`.
pub fn count_stages(config: &ModelConfig, dims: [usize; 3]) -> Result<StageFlops> {
    let mut cfg = config.clone();
    cfg.dims = dims;
    cfg.validate()?;
    let mut s = StageFlops::default();
    match cfg.variant {
        Variant::Dense3d => dense(&cfg, &mut s),
        Variant::Backbone | Variant::Hybrid => tri_plane(&cfg, &mut s),
    }
    head(&cfg, &mut s);
    Ok(s)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StageEntry {
    pub stage: Stage,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FlopsReport {
    pub label: String,
    pub config_hash: String,
    pub dims: [usize; 3],
    pub stages: Vec<StageEntry>,
    pub total: u64,
    pub params: usize,
    /// Positional-encoding FLOPs over the total.
    pub pe_share: f64,
    /// FLOPs that scale with plane area (projection, plane encoders) over the total.
    pub plane_share: f64,
}

impl FlopsReport {
    pub fn get(&self, stage: Stage) -> u64 {
        self.stages.iter().find(|e| e.stage == stage).map_or(0, |e| e.flops)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [dx, dy, dz] = self.dims;
        writeln!(f, "{} at {dx}x{dy}x{dz} ({} params)", self.label, self.params)?;
        writeln!(f, "{:<22}{:>16}{:>9}", "stage", "FLOPs", "share")?;
        for e in &self.stages {
            let share = 100.0 * e.flops as f64 / self.total.max(1) as f64;
            writeln!(f, "{:<22}{:>16}{:>8.3}%", e.stage.name(), e.flops, share)?;
        }
        write!(f, "{:<22}{:>16}{:>8.3}%", "total", self.total, 100.0)
    }
}

/// Full report for `config` at `dims`. Stages a variant does not use are omitted.
pub fn count_model(config: &ModelConfig, dims: [usize; 3]) -> Result<FlopsReport> {
    let s = count_stages(config, dims)?;
    let mut cfg = config.clone();
    cfg.dims = dims;
    let params = Model::<f32>::new(cfg.clone())?.params.num_scalars();
    let stages: Vec<StageEntry> = Stage::ALL
        .iter()
        .filter(|&&st| s.get(st) > 0)
        .map(|&stage| StageEntry { stage, flops: s.get(stage) })
        .collect();
    let total = s.total();
    let share = |f: u64| f as f64 / total.max(1) as f64;
    Ok(FlopsReport {
        label: cfg.label(),
        config_hash: cfg.hash(),
        dims,
        stages,
        total,
        params,
        pe_share: share(s.get(Stage::PositionalEncoding)),
        plane_share: share(s.get(Stage::Projection) + s.get(Stage::PlaneEncoders)),
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Comparison {
    pub dims: [usize; 3],
    pub labels: Vec<String>,
    pub totals: Vec<u64>,
    /// `ratios[i][j] = totals[i] / totals[j]`.
    pub ratios: Vec<Vec<f64>>,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [dx, dy, dz] = self.dims;
        writeln!(f, "totals at {dx}x{dy}x{dz}")?;
        write!(f, "{:<16}{:>16}", "model", "GFLOPs")?;
        for l in &self.labels {
            write!(f, "{l:>14}")?;
        }
        for (i, l) in self.labels.iter().enumerate() {
            write!(f, "\n{l:<16}{:>16.4}", self.totals[i] as f64 / 1e9)?;
            for r in &self.ratios[i] {
                write!(f, "{r:>14.4}")?;
            }
        }
        Ok(())
    }
}

/// Totals of each config at `dims`, in input order, with pairwise ratios.
pub fn compare(configs: &[ModelConfig], dims: [usize; 3]) -> Result<Comparison> {
    let mut labels = Vec::with_capacity(configs.len());
    let mut totals = Vec::with_capacity(configs.len());
    for c in configs {
        let mut c = c.clone();
        c.dims = dims;
        labels.push(c.label());
        totals.push(count_stages(&c, dims)?.total());
    }
    let ratios = totals
        .iter()
        .map(|&a| totals.iter().map(|&b| a as f64 / b as f64).collect())
        .collect();
    Ok(Comparison { dims, labels, totals, ratios })
}
