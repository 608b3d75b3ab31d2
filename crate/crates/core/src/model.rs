//! Model assembly: the tri-plane variants, the dense 3D baseline, task heads
//! and per-stage FLOP metering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{encode_planes, lambda_params, lift, project_planes, weight_planes, PlaneEncoderParams, TriPlaneSet};
use crate::config::{BranchInput, ModelConfig, PeMode, Task, Variant};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, Linear, NamedTensor, ParamId, ParamStore};
use crate::posmod::{
    build_weight_volume, post_modulate, postmodulate_planes, pre_modulate, premodulate_planes, summarize_tokens,
    summarize_tokens_volume, AxisEmbeddings, PeArch, PeConsts,
};
use crate::tensor::{Real, Tensor};
use crate::volumetric::{Mixer, VolumeBranch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Projection,
    PositionalEncoding,
    PlaneEncoders,
    Lifting,
    VolumeBranch,
    Fusion,
    Dense,
    Head,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Projection,
        Stage::PositionalEncoding,
        Stage::PlaneEncoders,
        Stage::Lifting,
        Stage::VolumeBranch,
        Stage::Fusion,
        Stage::Dense,
        Stage::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Projection => "projection",
            Stage::PositionalEncoding => "positional_encoding",
            Stage::PlaneEncoders => "plane_encoders",
            Stage::Lifting => "lifting",
            Stage::VolumeBranch => "volume_branch",
            Stage::Fusion => "fusion",
            Stage::Dense => "dense",
            Stage::Head => "head",
        }
    }
}

/// FLOPs executed per stage during one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageFlops(pub [u64; 8]);

impl StageFlops {
    pub fn get(&self, s: Stage) -> u64 {
        self.0[s as usize]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

struct Meter {
    last: u64,
    flops: StageFlops,
}

impl Meter {
    fn new<R: Real>(tape: &Tape<R>) -> Self {
        Meter {
            last: tape.flops(),
            flops: StageFlops::default(),
        }
    }

    fn mark<R: Real>(&mut self, tape: &Tape<R>, stage: Stage) {
        let now = tape.flops();
        self.flops.0[stage as usize] += now - self.last;
        self.last = now;
    }
}

struct PlaneStream {
    lifted: Var,
    emb: Option<AxisEmbeddings>,
    modulated: Option<Var>,
}

/// How positional modulation is applied. Both routes compute the same
/// function; `Materialized` builds the weight volumes explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Folded,
    Materialized,
}

/// Output handle plus the intermediates tests and tools inspect.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub output: Var,
    pub stages: StageFlops,
    /// `T'`, the lifted (and post-modulated) volume.
    pub lifted: Option<Var>,
    /// `G`, the upsampled branch features.
    pub branch: Option<Var>,
    /// Input of the task head.
    pub features: Var,
    pub embeddings: Option<AxisEmbeddings>,
}

#[derive(Clone, Debug)]
pub enum Head {
    /// 1×1×1 conv to one occupancy logit per voxel.
    Complete(Conv),
    /// Global average pool then a linear map to class logits.
    Classify(Linear),
}

impl Head {
    fn new<R: Real>(store: &mut ParamStore<R>, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.head_channels();
        Ok(match cfg.task {
            Task::Complete => Head::Complete(Conv::new(store, init, "head", 3, c, 1, 1, true)?),
            Task::Classify => Head::Classify(Linear::new(store, init, "head", c, cfg.num_classes)?),
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, y: Var) -> Result<Var> {
        match self {
            Head::Complete(conv) => conv.forward(tape, p, y),
            Head::Classify(lin) => {
                let s = tape.shape(y);
                let (c, n) = (s[0], s[1..].iter().product::<usize>());
                let flat = tape.reshape(y, &[c, n])?;
                let pooled = tape.mean_axis(flat, 1)?;
                let row = tape.reshape(pooled, &[1, c])?;
                let logits = lin.forward(tape, p, row)?;
                let k = tape.shape(logits)[1];
                tape.reshape(logits, &[k])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TriPlaneArch {
    pub encoders: PlaneEncoderParams,
    pub lambdas: [ParamId; 3],
    pub pe: PeArch,
    pub branch: Option<VolumeBranch>,
    pub mixer: Mixer,
}

/// Two-level 3D U-Net: full-resolution pair, pooled pair, upsample, skip, refine.
#[derive(Clone, Debug)]
pub struct DenseArch {
    pub enc1: [Conv; 2],
    pub enc2: [Conv; 2],
    pub up: Conv,
    pub dec: Conv,
}

#[derive(Clone, Debug)]
pub enum Arch {
    TriPlane(TriPlaneArch),
    Dense(DenseArch),
}

pub enum Target<'a, R> {
    /// Per-voxel occupancy in `[0, 1]`, shaped like the output.
    Occupancy(&'a Tensor<R>),
    Label(usize),
}

pub struct Model<R: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
    pub arch: Arch,
    pub head: Head,
    consts: PeConsts<R>,
}

/// Independent initializer streams so that enabling one component never
/// changes the initial values of another.
mod streams {
    pub const CORE: u64 = 0;
    pub const PE: u64 = 1;
    pub const BRANCH: u64 = 2;
    pub const MIXER: u64 = 3;
}

impl<R: Real> Model<R> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let stream = |s: u64| Init::new(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s));
        let mut core = stream(streams::CORE);
        let mut store = ParamStore::new();
        let mut consts = PeConsts {
            features: None,
            coord_planes: None,
            coord_volume: None,
        };
        let arch = match cfg.variant {
            Variant::Dense3d => {
                let [w1, w2] = [cfg.dense_widths[0], cfg.dense_widths[1]];
                let k = cfg.kernel;
                let mut conv = |name: &str, cin, cout, k| Conv::new(&mut store, &mut core, name, 3, cin, cout, k, true);
                let enc1 = [conv("dense.e1a", cfg.in_channels, w1, k)?, conv("dense.e1b", w1, w1, k)?];
                let enc2 = [conv("dense.e2a", w1, w2, k)?, conv("dense.e2b", w2, w2, k)?];
                let up = conv("dense.up", w2, w1, 1)?;
                let dec = conv("dense.dec", w1, w1, k)?;
                Arch::Dense(DenseArch { enc1, enc2, up, dec })
            }
            Variant::Backbone | Variant::Hybrid => {
                let encoders = PlaneEncoderParams::new(
                    &mut store,
                    &mut core,
                    cfg.plane_in_channels(),
                    &cfg.encoder_widths,
                    cfg.plane_channels,
                    cfg.kernel,
                    cfg.shared_encoders,
                )?;
                let lambdas = lambda_params(&mut store, cfg.plane_channels, cfg.per_channel_lambda)?;
                let (pe, pe_consts) = PeArch::new(&mut store, &mut stream(streams::PE), cfg)?;
                consts = pe_consts;
                let branch = match cfg.ratio {
                    Some(r) => {
                        let cin = match (cfg.branch_input, cfg.pe.mode) {
                            (BranchInput::Modulated, PeMode::Coordconv) => cfg.in_channels + 3,
                            _ => cfg.in_channels,
                        };
                        Some(VolumeBranch::new(
                            &mut store,
                            &mut stream(streams::BRANCH),
                            r,
                            cin,
                            &cfg.volume_widths,
                            cfg.plane_channels,
                            cfg.kernel,
                        )?)
                    }
                    None => None,
                };
                let mixer = Mixer::new(&mut store, &mut stream(streams::MIXER), cfg.plane_channels, cfg.mixer_layers())?;
                Arch::TriPlane(TriPlaneArch {
                    encoders,
                    lambdas,
                    pe,
                    branch,
                    mixer,
                })
            }
        };
        let head = Head::new(&mut store, &mut core, cfg)?;
        Ok(Model {
            config,
            params: store,
            arch,
            head,
            consts,
        })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        let d = self.config.dims;
        [self.config.in_channels, d[0], d[1], d[2]]
    }

    pub fn tri_plane(&self) -> Option<&TriPlaneArch> {
        match &self.arch {
            Arch::TriPlane(t) => Some(t),
            Arch::Dense(_) => None,
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Forward> {
        self.forward_with(tape, p, x, Route::Folded)
    }

    pub fn forward_with(&self, tape: &mut Tape<R>, p: &Bound, x: Var, route: Route) -> Result<Forward> {
        if tape.shape(x) != self.input_shape() {
            return Err(Error::shape("model", tape.shape(x), &self.input_shape()));
        }
        match &self.arch {
            Arch::TriPlane(arch) => self.tri_plane_forward(arch, tape, p, x, route),
            Arch::Dense(arch) => self.dense_forward(arch, tape, p, x),
        }
    }

    fn tri_plane_forward(&self, arch: &TriPlaneArch, tape: &mut Tape<R>, p: &Bound, x: Var, route: Route) -> Result<Forward> {
        let mut m = Meter::new(tape);
        let stream = self.plane_stream(arch, tape, p, x, route, &mut m)?;
        let g = match &arch.branch {
            Some(b) => {
                let input = self.branch_input(tape, x, &stream, &mut m)?;
                let g = b.forward(tape, p, input, self.config.dims)?;
                m.mark(tape, Stage::VolumeBranch);
                Some(g)
            }
            None => None,
        };
        self.finish(arch, tape, p, stream, g, m)
    }

    /// Inference with the volumetric branch on `side`, run alongside the
    /// plane stream on `main`. `x` and `xs` hold the same input on each tape.
    /// Falls back to [`Model::forward`] when the branch reads modulated input
    /// or there is no branch.
    #[cfg(feature = "parallel")]
    pub fn forward_concurrent(&self, main: &mut Tape<R>, pm: &Bound, x: Var, side: &mut Tape<R>, ps: &Bound, xs: Var) -> Result<Forward> {
        let arch = match &self.arch {
            Arch::TriPlane(a) if a.branch.is_some() && self.config.branch_input == BranchInput::Raw => a,
            _ => return self.forward(main, pm, x),
        };
        if main.shape(x) != self.input_shape() || side.shape(xs) != self.input_shape() {
            return Err(Error::shape("model", main.shape(x), &self.input_shape()));
        }
        let branch = arch.branch.as_ref().expect("checked above");
        let before = side.flops();
        let mut m = Meter::new(main);
        let (stream, g) = rayon::join(
            || self.plane_stream(arch, main, pm, x, Route::Folded, &mut m),
            || branch.forward(side, ps, xs, self.config.dims),
        );
        let (stream, g) = (stream?, g?);
        let g = main.constant(side.value(g))?;
        m.flops.0[Stage::VolumeBranch as usize] += side.flops() - before;
        m.last = main.flops();
        self.finish(arch, main, pm, stream, Some(g), m)
    }

    /// Everything up to the lifted features `T'`.
    fn plane_stream(&self, arch: &TriPlaneArch, tape: &mut Tape<R>, p: &Bound, x: Var, route: Route, m: &mut Meter) -> Result<PlaneStream> {
        let dims = self.config.dims;
        let coordconv = self.config.pe.mode == PeMode::Coordconv;
        let transformer = matches!(arch.pe, PeArch::Transformer(_));

        let (planes, emb, modulated) = match route {
            Route::Folded => {
                let mut planes = project_planes(tape, x)?;
                m.mark(tape, Stage::Projection);
                let tokens = if transformer { Some(summarize_tokens(tape, &planes)?) } else { None };
                let emb = arch.pe.embeddings(tape, p, &self.consts, tokens.as_ref())?;
                if let Some(e) = &emb {
                    planes = premodulate_planes(tape, planes, &e.pre)?;
                }
                if coordconv {
                    let coords = self.consts.coord_planes.as_ref().expect("coordinate planes");
                    for (plane, c) in planes.iter_mut().zip(coords) {
                        let c = tape.constant(c)?;
                        *plane = tape.concat(&[*plane, c], 0)?;
                    }
                }
                m.mark(tape, Stage::PositionalEncoding);
                (planes, emb, None)
            }
            Route::Materialized => {
                let tokens = if transformer { Some(summarize_tokens_volume(tape, x)?) } else { None };
                let emb = arch.pe.embeddings(tape, p, &self.consts, tokens.as_ref())?;
                let mut v = x;
                if let Some(e) = &emb {
                    let w = build_weight_volume(tape, &e.pre, dims)?;
                    v = pre_modulate(tape, x, w)?;
                }
                if coordconv {
                    let c = tape.constant(self.consts.coord_volume.as_ref().expect("coordinate volume"))?;
                    v = tape.concat(&[x, c], 0)?;
                }
                m.mark(tape, Stage::PositionalEncoding);
                let planes = project_planes(tape, v)?;
                m.mark(tape, Stage::Projection);
                (planes, emb, Some(v))
            }
        };

        let features = encode_planes(tape, p, &arch.encoders, planes)?;
        m.mark(tape, Stage::PlaneEncoders);
        let set = TriPlaneSet {
            features,
            lambdas: arch.lambdas.map(|l| p[l]),
        };
        let mut weighted = weight_planes(tape, &set)?;
        m.mark(tape, Stage::Lifting);
        let lifted = match (route, &emb) {
            (Route::Folded, Some(e)) => {
                weighted = postmodulate_planes(tape, weighted, &e.post)?;
                m.mark(tape, Stage::PositionalEncoding);
                let t = lift(tape, weighted, dims)?;
                m.mark(tape, Stage::Lifting);
                t
            }
            (Route::Materialized, Some(e)) => {
                let t = lift(tape, weighted, dims)?;
                m.mark(tape, Stage::Lifting);
                let w = build_weight_volume(tape, &e.post, dims)?;
                let t = post_modulate(tape, t, w)?;
                m.mark(tape, Stage::PositionalEncoding);
                t
            }
            (_, None) => {
                let t = lift(tape, weighted, dims)?;
                m.mark(tape, Stage::Lifting);
                t
            }
        };

        Ok(PlaneStream { lifted, emb, modulated })
    }

    fn branch_input(&self, tape: &mut Tape<R>, x: Var, stream: &PlaneStream, m: &mut Meter) -> Result<Var> {
        let dims = self.config.dims;
        let coordconv = self.config.pe.mode == PeMode::Coordconv;
        Ok(match self.config.branch_input {
            BranchInput::Raw => x,
            BranchInput::Modulated => match stream.modulated {
                Some(v) => v,
                None => {
                    let mut v = x;
                    if let Some(e) = &stream.emb {
                        let w = build_weight_volume(tape, &e.pre, dims)?;
                        v = pre_modulate(tape, x, w)?;
                    }
                    if coordconv {
                        let c = tape.constant(self.consts.coord_volume.as_ref().expect("coordinate volume"))?;
                        v = tape.concat(&[x, c], 0)?;
                    }
                    m.mark(tape, Stage::PositionalEncoding);
                    v
                }
            },
        })
    }

    /// `head(φ(T' + G))`.
    fn finish(&self, arch: &TriPlaneArch, tape: &mut Tape<R>, p: &Bound, stream: PlaneStream, g: Option<Var>, mut m: Meter) -> Result<Forward> {
        let lifted = stream.lifted;
        let mut y = lifted;
        if let Some(g) = g {
            y = tape.add(lifted, g)?;
        }
        y = arch.mixer.forward(tape, p, y)?;
        m.mark(tape, Stage::Fusion);
        let output = self.head.forward(tape, p, y)?;
        m.mark(tape, Stage::Head);
        Ok(Forward {
            output,
            stages: m.flops,
            lifted: Some(lifted),
            branch: g,
            features: y,
            embeddings: stream.emb,
        })
    }

    fn dense_forward(&self, arch: &DenseArch, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Forward> {
        let mut m = Meter::new(tape);
        let a = arch.enc1[0].forward(tape, p, x)?;
        let a = tape.relu(a)?;
        let s1 = arch.enc1[1].forward(tape, p, a)?;
        let s1 = tape.relu(s1)?;
        let d = tape.avg_pool3d(s1, [2, 2, 2])?;
        let b = arch.enc2[0].forward(tape, p, d)?;
        let b = tape.relu(b)?;
        let b = arch.enc2[1].forward(tape, p, b)?;
        let b = tape.relu(b)?;
        let u = tape.trilinear_resize(b, self.config.dims)?;
        let u = arch.up.forward(tape, p, u)?;
        let y = tape.add(u, s1)?;
        let y = tape.relu(y)?;
        let y = arch.dec.forward(tape, p, y)?;
        let y = tape.relu(y)?;
        m.mark(tape, Stage::Dense);
        let output = self.head.forward(tape, p, y)?;
        m.mark(tape, Stage::Head);
        Ok(Forward {
            output,
            stages: m.flops,
            lifted: None,
            branch: None,
            features: y,
            embeddings: None,
        })
    }

    /// Mean voxel-wise BCE on occupancy logits, or softmax cross-entropy on class logits.
    pub fn loss(&self, tape: &mut Tape<R>, output: Var, target: Target<'_, R>) -> Result<Var> {
        match (self.config.task, target) {
            (Task::Complete, Target::Occupancy(t)) => {
                let t = tape.constant(t)?;
                tape.bce_with_logits(output, t)
            }
            (Task::Classify, Target::Label(l)) => tape.cross_entropy(output, l),
            _ => Err(Error::Config("target kind does not match the task".into())),
        }
    }

    /// Inference on one volume.
    pub fn predict(&self, v: &Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::inference();
        let mut bound = Bound::new();
        self.params.bind(&mut tape, &mut bound)?;
        let x = tape.constant(v)?;
        let f = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(f.output).clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.export(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut m = Model::new(ck.config.clone())?;
        m.params.import(&ck.params)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
