//! Low-resolution 3D branch and summation fusion.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, ParamStore};
use crate::tensor::Real;

/// `ceil(r·D_k)` per axis, at least 1.
pub fn target_dims(dims: [usize; 3], ratio: f64) -> Result<[usize; 3]> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("downsample", format!("ratio must lie in (0, 1], got {ratio}")));
    }
    // The slack keeps ratios like 1/3 from rounding up past an exact multiple.
    Ok(dims.map(|d| ((ratio * d as f64) - 1e-9).ceil().max(1.0) as usize))
}

/// `1/r` when it is an integer greater than one.
pub fn pool_factor(ratio: f64) -> Option<usize> {
    let inv = 1.0 / ratio;
    let f = inv.round();
    ((inv - f).abs() < 1e-9 && f >= 2.0).then_some(f as usize)
}

/// Block-mean pooling when `1/r` is integral, trilinear resampling to
/// `ceil(r·D)` otherwise; `r = 1` is the identity.
pub fn downsample<R: Real>(tape: &mut Tape<R>, v: Var, ratio: f64) -> Result<Var> {
    let s = tape.shape(v);
    if s.len() != 4 {
        return Err(Error::invalid("downsample", format!("expected C×Dx×Dy×Dz, got {s:?}")));
    }
    let dims = [s[1], s[2], s[3]];
    let target = target_dims(dims, ratio)?;
    match pool_factor(ratio) {
        Some(f) => tape.avg_pool3d(v, [f; 3]),
        None if target == dims => Ok(v),
        None => tape.trilinear_resize(v, target),
    }
}

pub fn upsample_to<R: Real>(tape: &mut Tape<R>, g: Var, dims: [usize; 3]) -> Result<Var> {
    tape.trilinear_resize(g, dims)
}

/// The compact 3D CNN `h`: 3D convs with relu between layers.
#[derive(Clone, Debug)]
pub struct VolumeBranch {
    pub ratio: f64,
    pub layers: Vec<Conv>,
}

impl VolumeBranch {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        init: &mut Init,
        ratio: f64,
        cin: usize,
        hidden: &[usize],
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        target_dims([1, 1, 1], ratio)?;
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut c = cin;
        for (i, &w) in hidden.iter().chain(std::iter::once(&cout)).enumerate() {
            layers.push(Conv::new(store, init, &format!("vol.{i}"), 3, c, w, kernel, true)?);
            c = w;
        }
        Ok(VolumeBranch { ratio, layers })
    }

    pub fn encode<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }

    /// `G`: downsample, encode, upsample back to `dims`.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, v: Var, dims: [usize; 3]) -> Result<Var> {
        let coarse = downsample(tape, v, self.ratio)?;
        let g = self.encode(tape, p, coarse)?;
        upsample_to(tape, g, dims)
    }
}

/// The per-voxel mixer `φ`: 1×1×1 convs with relu between layers. With no
/// layers it is the identity.
#[derive(Clone, Debug, Default)]
pub struct Mixer {
    pub layers: Vec<Conv>,
}

impl Mixer {
    pub fn new<R: Real>(store: &mut ParamStore<R>, init: &mut Init, channels: usize, layers: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| Conv::new(store, init, &format!("mix.{i}"), 3, channels, channels, 1, true))
            .collect::<Result<_>>()?;
        Ok(Mixer { layers })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }
}

/// `Ŷ = φ(T' + G)`.
pub fn fuse<R: Real>(tape: &mut Tape<R>, p: &Bound, mixer: &Mixer, t_prime: Var, g: Var) -> Result<Var> {
    let s = tape.add(t_prime, g)?;
    mixer.forward(tape, p, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_dims_round_up() {
        assert_eq!(target_dims([32, 32, 32], 0.5).unwrap(), [16, 16, 16]);
        assert_eq!(target_dims([5, 6, 7], 0.5).unwrap(), [3, 3, 4]);
        assert_eq!(target_dims([30, 9, 1], 1.0 / 3.0).unwrap(), [10, 3, 1]);
        assert_eq!(target_dims([10, 10, 10], 0.3).unwrap(), [3, 3, 3]);
        assert!(target_dims([4, 4, 4], 0.0).is_err());
    }

    #[test]
    fn pool_factor_needs_integral_inverse() {
        assert_eq!(pool_factor(0.5), Some(2));
        assert_eq!(pool_factor(0.25), Some(4));
        assert_eq!(pool_factor(1.0), None);
        assert_eq!(pool_factor(0.3), None);
    }
}
