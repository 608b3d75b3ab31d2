//! Adaptive positional modulation.
//!
//! An encoder maps axis summaries (or fixed coordinate features) to per-axis,
//! per-channel profiles `e_{c,k}`. A profile set expands to a weight volume
//! by the separable outer sum `W(c,i,j,k) = e_x[c,i] + e_y[c,j] + e_z[c,k]`.
//! `W_pre` is added to the input before projection and `W_post` to the
//! lifted volume.
//!
//! Because `W` is an outer sum, neither addition has to materialize a
//! volume: averaging `V + W_pre` along axis `k` equals the plane `P_k` plus
//! the two other profiles and the mean of `e_k`, and `T + W_post` equals
//! lifting planes that carry the profiles. [`premodulate_planes`] and
//! [`postmodulate_planes`] implement that folded route in `O(D²)`;
//! [`build_weight_volume`], [`pre_modulate`] and [`post_modulate`] are the
//! direct `O(D³)` construction.

use crate::autodiff::{Tape, Var};
use crate::backbone::plane_dims;
use crate::config::{ModelConfig, PeMode, TokenLayout};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Per-axis profiles for the two modulation sites, as tape handles.
/// `pre[k]` is `C×D_k`, `post[k]` is `C'×D_k`.
#[derive(Clone, Copy, Debug)]
pub struct AxisEmbeddings {
    pub pre: [Var; 3],
    pub post: [Var; 3],
}

/// `i / (D - 1)` for `i in 0..D`; a single sample sits at 0.
pub fn normalized_coords(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![0.0];
    }
    (0..d).map(|i| i as f64 / (d - 1) as f64).collect()
}

/// Three coordinate channels `3×Dx×Dy×Dz`; channel `a` holds the normalized
/// coordinate along axis `a`.
pub fn coordinate_channels<R: Real>(dims: [usize; 3]) -> Tensor<R> {
    let u: Vec<Vec<f64>> = dims.iter().map(|&d| normalized_coords(d)).collect();
    Tensor::from_fn(&[3, dims[0], dims[1], dims[2]], |i| R::lit(u[i[0]][i[i[0] + 1]]))
}

/// The mean projections of [`coordinate_channels`] onto each plane, built
/// directly: along its own axis a coordinate averages to a constant.
pub fn coordinate_planes<R: Real>(dims: [usize; 3]) -> [Tensor<R>; 3] {
    let u: Vec<Vec<f64>> = dims.iter().map(|&d| normalized_coords(d)).collect();
    let mean: Vec<f64> = u.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    std::array::from_fn(|k| {
        let pd = plane_dims(dims, k);
        let rest: Vec<usize> = (0..3).filter(|&a| a != k).collect();
        Tensor::from_fn(&[3, pd[0], pd[1]], |i| {
            let a = i[0];
            let v = if a == k {
                mean[a]
            } else if a == rest[0] {
                u[a][i[1]]
            } else {
                u[a][i[2]]
            };
            R::lit(v)
        })
    })
}

/// `[sin(π f u), cos(π f u)]` for `f = 1, 2, 4, …`; shape `D×2F`.
pub fn sinusoid_features<R: Real>(d: usize, frequencies: usize) -> Tensor<R> {
    let u = normalized_coords(d);
    Tensor::from_fn(&[d, 2 * frequencies], |i| {
        let f = (1u64 << (i[1] % frequencies)) as f64;
        let arg = std::f64::consts::PI * f * u[i[0]];
        R::lit(if i[1] < frequencies { arg.sin() } else { arg.cos() })
    })
}

/// `t_k[c, i]`: the mean of `V` over the two axes other than `k`, read off
/// the projected planes.
pub fn summarize_tokens<R: Real>(tape: &mut Tape<R>, planes: &[Var; 3]) -> Result<[Var; 3]> {
    Ok([
        tape.mean_axis(planes[2], 2)?,
        tape.mean_axis(planes[2], 1)?,
        tape.mean_axis(planes[1], 1)?,
    ])
}

/// [`summarize_tokens`] computed from the volume itself.
pub fn summarize_tokens_volume<R: Real>(tape: &mut Tape<R>, v: Var) -> Result<[Var; 3]> {
    let xy = tape.mean_axis(v, 3)?;
    let xz = tape.mean_axis(v, 2)?;
    Ok([tape.mean_axis(xy, 2)?, tape.mean_axis(xy, 1)?, tape.mean_axis(xz, 1)?])
}

fn profile_channels<R: Real>(tape: &Tape<R>, op: &'static str, e: &[Var; 3], dims: [usize; 3]) -> Result<usize> {
    let c = tape.shape(e[0]).first().copied().unwrap_or(0);
    for (k, &v) in e.iter().enumerate() {
        if tape.shape(v) != [c, dims[k]] {
            return Err(Error::shape(op, tape.shape(v), &[c, dims[k]]));
        }
    }
    Ok(c)
}

/// `W(c,i,j,k) = e_x[c,i] + e_y[c,j] + e_z[c,k]`.
pub fn build_weight_volume<R: Real>(tape: &mut Tape<R>, e: &[Var; 3], dims: [usize; 3]) -> Result<Var> {
    profile_channels(tape, "build_weight_volume", e, dims)?;
    let [dx, dy, dz] = dims;
    let wx = tape.broadcast_axis(e[0], 2, dy)?;
    let wx = tape.broadcast_axis(wx, 3, dz)?;
    let wy = tape.broadcast_axis(e[1], 1, dx)?;
    let wy = tape.broadcast_axis(wy, 3, dz)?;
    let wz = tape.broadcast_axis(e[2], 1, dx)?;
    let wz = tape.broadcast_axis(wz, 2, dy)?;
    let w = tape.add(wx, wy)?;
    tape.add(w, wz)
}

/// `V' = V + W_pre`.
pub fn pre_modulate<R: Real>(tape: &mut Tape<R>, v: Var, w_pre: Var) -> Result<Var> {
    tape.add(v, w_pre)
}

/// `T' = T + W_post`.
pub fn post_modulate<R: Real>(tape: &mut Tape<R>, t: Var, w_post: Var) -> Result<Var> {
    tape.add(t, w_post)
}

/// Profile `e` (`C×D`) replicated over a plane axis so that it runs along
/// plane axis `along` (1 or 2) of a `C×A×B` plane.
fn spread<R: Real>(tape: &mut Tape<R>, e: Var, along: usize, pd: [usize; 2]) -> Result<Var> {
    if along == 1 {
        tape.broadcast_axis(e, 2, pd[1])
    } else {
        tape.broadcast_axis(e, 1, pd[0])
    }
}

/// Projections of `V + W_pre` from the projections of `V`:
/// `P'_k = P_k + e_a + e_b + mean(e_k)` with `a < b` the plane's axes.
pub fn premodulate_planes<R: Real>(tape: &mut Tape<R>, planes: [Var; 3], pre: &[Var; 3]) -> Result<[Var; 3]> {
    let dims = [tape.shape(planes[1])[1], tape.shape(planes[0])[1], tape.shape(planes[0])[2]];
    profile_channels(tape, "premodulate_planes", pre, dims)?;
    let mut out = planes;
    for (k, p) in out.iter_mut().enumerate() {
        let pd = plane_dims(dims, k);
        let (a, b) = match k {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let ea = spread(tape, pre[a], 1, pd)?;
        let eb = spread(tape, pre[b], 2, pd)?;
        let m = tape.mean_axis(pre[k], 1)?;
        let m = tape.broadcast_axis(m, 1, pd[0])?;
        let m = tape.broadcast_axis(m, 2, pd[1])?;
        let s = tape.add(*p, ea)?;
        let s = tape.add(s, eb)?;
        *p = tape.add(s, m)?;
    }
    Ok(out)
}

/// Planes whose lift equals `lift(weighted) + W_post`: the `y` and `z`
/// profiles ride on the `x` plane and the `x` profile on the `y` plane.
pub fn postmodulate_planes<R: Real>(tape: &mut Tape<R>, weighted: [Var; 3], post: &[Var; 3]) -> Result<[Var; 3]> {
    let dims = [tape.shape(weighted[1])[1], tape.shape(weighted[0])[1], tape.shape(weighted[0])[2]];
    profile_channels(tape, "postmodulate_planes", post, dims)?;
    let px = plane_dims(dims, 0);
    let ey = spread(tape, post[1], 1, px)?;
    let ez = spread(tape, post[2], 2, px)?;
    let ax = tape.add(weighted[0], ey)?;
    let ax = tape.add(ax, ez)?;
    let ex = spread(tape, post[0], 1, plane_dims(dims, 1))?;
    let ay = tape.add(weighted[1], ex)?;
    Ok([ax, ay, weighted[2]])
}

/// One pre-norm encoder block: self-attention then a relu feed-forward,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct TransformerPe {
    pub layout: TokenLayout,
    pub heads: usize,
    pub model_dim: usize,
    /// Per-axis `D_k → d` maps (profiles) or one shared `C → d` map (slices).
    pub input: Vec<Linear>,
    pub axis_emb: [ParamId; 3],
    pub pos_emb: Option<ParamId>,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
    pub pre: Vec<Linear>,
    pub post: Vec<Linear>,
    pub plane_channels: usize,
}

impl TransformerPe {
    pub fn new<R: Real>(store: &mut ParamStore<R>, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let pe = &cfg.pe;
        let d = pe.model_dim;
        let (c, cp) = (cfg.in_channels, cfg.plane_channels);
        let input = match pe.layout {
            TokenLayout::Profiles => (0..3)
                .map(|k| Linear::new(store, init, &format!("pe.in{k}"), cfg.dims[k], d))
                .collect::<Result<_>>()?,
            TokenLayout::Slices => vec![Linear::new(store, init, "pe.in", c, d)?],
        };
        let axis_emb = [
            store.add("pe.axis_x", init.normal(&[d], 0.02))?,
            store.add("pe.axis_y", init.normal(&[d], 0.02))?,
            store.add("pe.axis_z", init.normal(&[d], 0.02))?,
        ];
        let pos_emb = match (pe.layout, pe.position_embeddings) {
            (TokenLayout::Slices, true) => Some(store.add("pe.pos", init.normal(&[pe.max_positions, d], 0.02))?),
            _ => None,
        };
        let mut layers = Vec::with_capacity(pe.layers);
        for l in 0..pe.layers {
            let n = |s: &str| format!("pe.l{l}.{s}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(store, &n("ln1"), d)?,
                q: Linear::new(store, init, &n("q"), d, d)?,
                k: Linear::new(store, init, &n("k"), d, d)?,
                v: Linear::new(store, init, &n("v"), d, d)?,
                o: Linear::new(store, init, &n("o"), d, d)?,
                ln2: LayerNorm::new(store, &n("ln2"), d)?,
                ff1: Linear::new(store, init, &n("ff1"), d, pe.ffn_mult * d)?,
                ff2: Linear::new(store, init, &n("ff2"), pe.ffn_mult * d, d)?,
            });
        }
        let final_ln = LayerNorm::new(store, "pe.ln", d)?;
        let (pre, post) = match pe.layout {
            TokenLayout::Profiles => (
                (0..3)
                    .map(|k| Linear::zeros(store, &format!("pe.pre{k}"), d, cfg.dims[k]))
                    .collect::<Result<_>>()?,
                (0..3)
                    .map(|k| Linear::zeros(store, &format!("pe.post{k}"), d, cp * cfg.dims[k]))
                    .collect::<Result<_>>()?,
            ),
            TokenLayout::Slices => (vec![Linear::zeros(store, "pe.pre", d, c)?], vec![Linear::zeros(store, "pe.post", d, cp)?]),
        };
        Ok(TransformerPe {
            layout: pe.layout,
            heads: pe.heads,
            model_dim: d,
            input,
            axis_emb,
            pos_emb,
            layers,
            final_ln,
            pre,
            post,
            plane_channels: cp,
        })
    }

    /// Embeds the three token sets into one `L×d` sequence.
    pub fn embed<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, tokens: &[Var; 3]) -> Result<Var> {
        let mut parts = [tokens[0]; 3];
        for k in 0..3 {
            let x = match self.layout {
                TokenLayout::Profiles => self.input[k].forward(tape, p, tokens[k])?,
                TokenLayout::Slices => {
                    let rows = tape.transpose(tokens[k])?;
                    let x = self.input[0].forward(tape, p, rows)?;
                    match self.pos_emb {
                        Some(pos) => {
                            let n = tape.shape(x)[0];
                            let pe = tape.narrow(p[pos], 0, 0, n)?;
                            tape.add(x, pe)?
                        }
                        None => x,
                    }
                }
            };
            parts[k] = tape.add_row_bias(x, p[self.axis_emb[k]])?;
        }
        tape.concat(&parts, 0)
    }

    /// Multi-head self-attention over the rows of `h`. Attention weights are
    /// pushed to `probe` when given.
    fn attention<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, layer: &EncoderLayer, h: Var, mut probe: Option<&mut Vec<Var>>) -> Result<Var> {
        let q = layer.q.forward(tape, p, h)?;
        let k = layer.k.forward(tape, p, h)?;
        let v = layer.v.forward(tape, p, h)?;
        let dh = self.model_dim / self.heads;
        let scale = R::lit(1.0 / (dh as f64).sqrt());
        let mut outs = smallvec::SmallVec::<[Var; 8]>::new();
        for head in 0..self.heads {
            let qh = tape.narrow(q, 1, head * dh, dh)?;
            let kh = tape.narrow(k, 1, head * dh, dh)?;
            let vh = tape.narrow(v, 1, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, 1)?;
            if let Some(probe) = probe.as_deref_mut() {
                probe.push(a);
            }
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat(&outs, 1)?;
        layer.o.forward(tape, p, cat)
    }

    /// Runs the encoder stack on an embedded sequence.
    pub fn encode_sequence<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, mut x: Var, mut probe: Option<&mut Vec<Var>>) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.ln1.forward(tape, p, x)?;
            let a = self.attention(tape, p, layer, h, probe.as_deref_mut())?;
            x = tape.add(x, a)?;
            let h = layer.ln2.forward(tape, p, x)?;
            let h = layer.ff1.forward(tape, p, h)?;
            let h = tape.relu(h)?;
            let h = layer.ff2.forward(tape, p, h)?;
            x = tape.add(x, h)?;
        }
        self.final_ln.forward(tape, p, x)
    }

    /// Tokens to profiles for both modulation sites.
    pub fn encode<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, tokens: &[Var; 3], probe: Option<&mut Vec<Var>>) -> Result<AxisEmbeddings> {
        let x = self.embed(tape, p, tokens)?;
        let h = self.encode_sequence(tape, p, x, probe)?;
        let mut pre = *tokens;
        let mut post = *tokens;
        let mut offset = 0;
        for k in 0..3 {
            let [c, dk] = [tape.shape(tokens[k])[0], tape.shape(tokens[k])[1]];
            match self.layout {
                TokenLayout::Profiles => {
                    let rows = tape.narrow(h, 0, offset, c)?;
                    offset += c;
                    pre[k] = self.pre[k].forward(tape, p, rows)?;
                    let pooled = tape.mean_axis(rows, 0)?;
                    let pooled = tape.reshape(pooled, &[1, self.model_dim])?;
                    let e = self.post[k].forward(tape, p, pooled)?;
                    post[k] = tape.reshape(e, &[self.plane_channels, dk])?;
                }
                TokenLayout::Slices => {
                    let rows = tape.narrow(h, 0, offset, dk)?;
                    offset += dk;
                    let e = self.pre[0].forward(tape, p, rows)?;
                    pre[k] = tape.transpose(e)?;
                    let e = self.post[0].forward(tape, p, rows)?;
                    post[k] = tape.transpose(e)?;
                }
            }
        }
        Ok(AxisEmbeddings { pre, post })
    }
}

/// Per-axis learned maps from fixed coordinate features to profiles.
#[derive(Clone, Debug)]
pub struct CoordinatePe {
    /// Hidden layer of the coordinate MLP; absent for the sinusoidal map.
    pub hidden: Option<[Linear; 3]>,
    pub pre: [Linear; 3],
    pub post: [Linear; 3],
}

#[derive(Clone, Debug)]
pub enum PeArch {
    None,
    Coordconv,
    Coordinate(CoordinatePe),
    Transformer(Box<TransformerPe>),
}

/// Fixed tensors the encoders consume.
#[derive(Clone, Debug)]
pub struct PeConsts<R: Real> {
    /// Per-axis `D_k×F` coordinate features (sinusoidal or raw coordinate).
    pub features: Option<[Tensor<R>; 3]>,
    pub coord_planes: Option<[Tensor<R>; 3]>,
    pub coord_volume: Option<Tensor<R>>,
}

impl PeArch {
    pub fn new<R: Real>(store: &mut ParamStore<R>, init: &mut Init, cfg: &ModelConfig) -> Result<(Self, PeConsts<R>)> {
        let pe = &cfg.pe;
        let mut consts = PeConsts {
            features: None,
            coord_planes: None,
            coord_volume: None,
        };
        let arch = match pe.mode {
            PeMode::None => PeArch::None,
            PeMode::Coordconv => {
                consts.coord_planes = Some(coordinate_planes(cfg.dims));
                consts.coord_volume = Some(coordinate_channels(cfg.dims));
                PeArch::Coordconv
            }
            PeMode::Sinusoidal | PeMode::Mlp => {
                let sinusoidal = pe.mode == PeMode::Sinusoidal;
                consts.features = Some(std::array::from_fn(|k| {
                    if sinusoidal {
                        sinusoid_features(cfg.dims[k], pe.frequencies)
                    } else {
                        let u = normalized_coords(cfg.dims[k]);
                        Tensor::from_fn(&[cfg.dims[k], 1], |i| R::lit(u[i[0]]))
                    }
                }));
                let (din, hidden) = if sinusoidal {
                    (2 * pe.frequencies, None)
                } else {
                    let h = [0, 1, 2].map(|k| Linear::new(store, init, &format!("pe.hidden{k}"), 1, pe.mlp_hidden));
                    let [a, b, c] = h;
                    (pe.mlp_hidden, Some([a?, b?, c?]))
                };
                let pre = [0, 1, 2].map(|k| Linear::zeros(store, &format!("pe.pre{k}"), din, cfg.in_channels));
                let post = [0, 1, 2].map(|k| Linear::zeros(store, &format!("pe.post{k}"), din, cfg.plane_channels));
                let [p0, p1, p2] = pre;
                let [q0, q1, q2] = post;
                PeArch::Coordinate(CoordinatePe {
                    hidden,
                    pre: [p0?, p1?, p2?],
                    post: [q0?, q1?, q2?],
                })
            }
            PeMode::Transformer => PeArch::Transformer(Box::new(TransformerPe::new(store, init, cfg)?)),
        };
        Ok((arch, consts))
    }

    /// Profiles for both sites, or `None` for modes without profiles.
    /// `tokens` must be given for the transformer.
    pub fn embeddings<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        consts: &PeConsts<R>,
        tokens: Option<&[Var; 3]>,
    ) -> Result<Option<AxisEmbeddings>> {
        match self {
            PeArch::None | PeArch::Coordconv => Ok(None),
            PeArch::Transformer(t) => {
                let tokens = tokens.ok_or_else(|| Error::invalid("embeddings", "transformer needs axis tokens"))?;
                t.encode(tape, p, tokens, None).map(Some)
            }
            PeArch::Coordinate(c) => {
                let features = consts.features.as_ref().expect("coordinate features");
                let mut pre = [Var(0); 3];
                let mut post = [Var(0); 3];
                for k in 0..3 {
                    let mut h = tape.constant(&features[k])?;
                    if let Some(hidden) = &c.hidden {
                        h = hidden[k].forward(tape, p, h)?;
                        h = tape.relu(h)?;
                    }
                    let e = c.pre[k].forward(tape, p, h)?;
                    pre[k] = tape.transpose(e)?;
                    let e = c.post[k].forward(tape, p, h)?;
                    post[k] = tape.transpose(e)?;
                }
                Ok(Some(AxisEmbeddings { pre, post }))
            }
        }
    }
}
