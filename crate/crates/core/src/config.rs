//! Model configuration: every architecture choice in one JSON-serializable value.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plane stream only: project, encode, lift, head.
    Backbone,
    /// Plane stream plus a low-resolution 3D branch and a per-voxel mixer.
    Hybrid,
    /// Full-resolution 3D convolutional baseline.
    Dense3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    None,
    Sinusoidal,
    Coordconv,
    Mlp,
    Transformer,
}

impl PeMode {
    pub const ALL: [PeMode; 5] = [PeMode::None, PeMode::Sinusoidal, PeMode::Coordconv, PeMode::Mlp, PeMode::Transformer];

    /// Whether the mode produces axis profiles (and so weight volumes).
    pub fn has_profiles(self) -> bool {
        matches!(self, PeMode::Sinusoidal | PeMode::Mlp | PeMode::Transformer)
    }
}

/// How the transformer turns axis summaries into a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenLayout {
    /// One token per (input channel, axis), carrying that channel's whole
    /// axis profile. Sequence length is `3·C`.
    Profiles,
    /// One token per slice index, carrying the channel vector at that index.
    /// Sequence length is `Dx + Dy + Dz`.
    Slices,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchInput {
    /// The raw input volume.
    Raw,
    /// The input volume after adding the pre-projection weight volume.
    Modulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Per-voxel occupancy logits.
    Complete,
    /// Class logits from globally pooled features.
    Classify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeConfig {
    pub mode: PeMode,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub layout: TokenLayout,
    pub position_embeddings: bool,
    /// Sinusoidal frequencies are `1, 2, 4, …` up to this many.
    pub frequencies: usize,
    pub mlp_hidden: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            mode: PeMode::None,
            model_dim: 32,
            heads: 8,
            layers: 2,
            ffn_mult: 2,
            max_positions: 512,
            layout: TokenLayout::Profiles,
            position_embeddings: true,
            frequencies: 4,
            mlp_hidden: 16,
        }
    }
}

fn default_dims() -> [usize; 3] {
    [32, 32, 32]
}
fn one() -> usize {
    1
}
fn sixteen() -> usize {
    16
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn encoder_widths() -> Vec<usize> {
    vec![16, 16]
}
fn volume_widths() -> Vec<usize> {
    vec![8, 8]
}
fn dense_widths() -> Vec<usize> {
    vec![16, 32]
}
fn raw() -> BranchInput {
    BranchInput::Raw
}
fn complete() -> Task {
    Task::Complete
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "one")]
    pub in_channels: usize,
    /// Feature channels of the planes, the lifted volume and the branch output.
    #[serde(default = "sixteen")]
    pub plane_channels: usize,
    /// Hidden widths of each plane encoder; the last layer outputs `plane_channels`.
    #[serde(default = "encoder_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default)]
    pub shared_encoders: bool,
    #[serde(default)]
    pub per_channel_lambda: bool,
    /// Per-axis downsample ratio of the 3D branch; absent disables the branch.
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default = "volume_widths")]
    pub volume_widths: Vec<usize>,
    #[serde(default = "raw")]
    pub branch_input: BranchInput,
    /// 1×1×1 layers after fusion; zero makes the mixer the identity.
    /// Absent means 0 for the backbone and 2 for the hybrid.
    #[serde(default)]
    pub mixer_layers: Option<usize>,
    #[serde(default = "dense_widths")]
    pub dense_widths: Vec<usize>,
    #[serde(default)]
    pub pe: PeConfig,
    #[serde(default = "complete")]
    pub task: Task,
    #[serde(default = "four")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, dims: [usize; 3]) -> Self {
        ModelConfig {
            variant,
            dims,
            in_channels: 1,
            plane_channels: 16,
            encoder_widths: encoder_widths(),
            kernel: 3,
            shared_encoders: false,
            per_channel_lambda: false,
            ratio: (variant == Variant::Hybrid).then_some(0.5),
            volume_widths: volume_widths(),
            branch_input: BranchInput::Raw,
            mixer_layers: None,
            dense_widths: dense_widths(),
            pe: PeConfig::default(),
            task: Task::Complete,
            num_classes: 4,
            seed: 0,
        }
    }

    /// Named configurations: `backbone`, `hybrid-1/2`, `hybrid-1/4`, `dense3d`.
    pub fn preset(name: &str, dims: [usize; 3]) -> Result<Self> {
        let mut c = match name {
            "backbone" => Self::new(Variant::Backbone, dims),
            "dense3d" => Self::new(Variant::Dense3d, dims),
            _ => match name.strip_prefix("hybrid-") {
                Some("1/2") | Some("0.5") => Self::new(Variant::Hybrid, dims),
                Some("1/4") | Some("0.25") => Self::new(Variant::Hybrid, dims),
                _ => return Err(Error::Config(format!("unknown preset {name}"))),
            },
        };
        if name.ends_with("1/4") || name.ends_with("0.25") {
            c.ratio = Some(0.25);
        }
        Ok(c)
    }

    pub fn with_pe(mut self, mode: PeMode) -> Self {
        self.pe.mode = mode;
        self
    }

    pub fn with_task(mut self, task: Task) -> Self {
        self.task = task;
        self
    }

    pub fn mixer_layers(&self) -> usize {
        self.mixer_layers.unwrap_or(match self.variant {
            Variant::Hybrid => 2,
            _ => 0,
        })
    }

    /// Channels the plane encoders see: the input plus any appended coordinates.
    pub fn plane_in_channels(&self) -> usize {
        self.in_channels + if self.pe.mode == PeMode::Coordconv { 3 } else { 0 }
    }

    /// Channels entering the task head.
    pub fn head_channels(&self) -> usize {
        match self.variant {
            Variant::Dense3d => self.dense_widths[0],
            _ => self.plane_channels,
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self.task {
            Task::Complete => vec![1, self.dims[0], self.dims[1], self.dims[2]],
            Task::Classify => vec![self.num_classes],
        }
    }

    /// Length of the transformer token sequence.
    pub fn sequence_len(&self) -> usize {
        match self.pe.layout {
            TokenLayout::Profiles => 3 * self.in_channels,
            TokenLayout::Slices => self.dims.iter().sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.in_channels == 0 || self.plane_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.encoder_widths.contains(&0) || self.volume_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.task == Task::Classify && self.num_classes < 2 {
            return bad("classification needs at least two classes".into());
        }
        match self.variant {
            Variant::Backbone => {
                if self.ratio.is_some() {
                    return bad("the backbone has no volumetric branch; remove \"ratio\"".into());
                }
                if self.mixer_layers() != 0 {
                    return bad("the backbone has no mixer; use the hybrid variant".into());
                }
            }
            Variant::Hybrid => {}
            Variant::Dense3d => {
                if self.dense_widths.len() != 2 || self.dense_widths.contains(&0) {
                    return bad("dense_widths must hold two positive widths".into());
                }
                if self.pe.mode != PeMode::None || self.ratio.is_some() {
                    return bad("dense3d takes neither positional modulation nor a ratio".into());
                }
            }
        }
        if let Some(r) = self.ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("ratio must lie in (0, 1], got {r}"));
            }
        }
        let pe = &self.pe;
        if pe.mode == PeMode::Transformer {
            if pe.model_dim == 0 || pe.heads == 0 || !pe.model_dim.is_multiple_of(pe.heads) {
                return bad(format!("model_dim {} must be a positive multiple of heads {}", pe.model_dim, pe.heads));
            }
            if pe.layers == 0 || pe.ffn_mult == 0 {
                return bad("transformer needs at least one layer and a positive ffn_mult".into());
            }
            let longest = match pe.layout {
                TokenLayout::Profiles => self.sequence_len(),
                TokenLayout::Slices => *self.dims.iter().max().unwrap(),
            };
            if longest > pe.max_positions {
                return bad(format!("token sequence of {longest} exceeds max_positions {}", pe.max_positions));
            }
        }
        if pe.mode == PeMode::Sinusoidal && pe.frequencies == 0 {
            return bad("sinusoidal encoding needs at least one frequency".into());
        }
        if pe.mode == PeMode::Mlp && pe.mlp_hidden == 0 {
            return bad("mlp encoding needs a positive hidden width".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Short human-readable identifier such as `hybrid(1/2)`.
    pub fn label(&self) -> String {
        match (self.variant, self.ratio) {
            (Variant::Hybrid, Some(r)) => {
                let inv = 1.0 / r;
                if (inv - inv.round()).abs() < 1e-9 {
                    format!("hybrid(1/{})", inv.round())
                } else {
                    format!("hybrid({r})")
                }
            }
            (Variant::Hybrid, None) => "hybrid(no branch)".into(),
            (Variant::Backbone, _) => "backbone".into(),
            (Variant::Dense3d, _) => "dense3d".into(),
        }
    }
}
