//! Procedural shapes rasterized from signed distances, and occlusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Box,
    Torus,
    Cone,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Sphere, ShapeClass::Box, ShapeClass::Torus, ShapeClass::Cone];
}

/// Smallest side length the generator accepts.
pub const MIN_DIM: usize = 16;
/// Smallest fraction of voxels above the occupancy threshold.
pub const MIN_FILL: f64 = 0.01;
pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// `1×Dx×Dy×Dz` occupancy in `[0, 1]`.
    pub volume: Tensor<f32>,
    pub label: usize,
    pub class: ShapeClass,
    /// Shape parameters in voxel units; for a sphere, `[radius]`.
    pub params: Vec<f64>,
}

type Vec3 = [f64; 3];

fn len(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn len2(x: f64, y: f64) -> f64 {
    (x * x + y * y).sqrt()
}

/// Signed distance to a cone of half-height `h` and base radius `r` whose
/// base sits at `y = -h` and apex at `y = +h`.
fn cone_sdf(p: Vec3, h: f64, r: f64) -> f64 {
    let (qx, qy) = (len2(p[0], p[2]), p[1]);
    let (k1x, k1y) = (0.0, h);
    let (k2x, k2y) = (-r, 2.0 * h);
    let cap = if qy < 0.0 { r } else { 0.0 };
    let (cax, cay) = (qx - qx.min(cap), qy.abs() - h);
    let t = (((k1x - qx) * k2x + (k1y - qy) * k2y) / (k2x * k2x + k2y * k2y)).clamp(0.0, 1.0);
    let (cbx, cby) = (qx - k1x + k2x * t, qy - k1y + k2y * t);
    let s = if cbx < 0.0 && cay < 0.0 { -1.0 } else { 1.0 };
    s * (cax * cax + cay * cay).min(cbx * cbx + cby * cby).sqrt()
}

fn sdf(class: ShapeClass, params: &[f64], p: Vec3) -> f64 {
    match class {
        ShapeClass::Sphere => len(p) - params[0],
        ShapeClass::Box => {
            let q = [p[0].abs() - params[0], p[1].abs() - params[1], p[2].abs() - params[2]];
            len(q.map(|v| v.max(0.0))) + q[0].max(q[1]).max(q[2]).min(0.0)
        }
        ShapeClass::Torus => len2(len2(p[0], p[2]) - params[0], p[1]) - params[1],
        ShapeClass::Cone => cone_sdf(p, params[0], params[1]),
    }
}

/// Uniform random rotation from a unit quaternion.
fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Shape parameters scaled to the smallest side `d`.
fn draw_params(class: ShapeClass, rng: &mut ChaCha8Rng, d: f64) -> Vec<f64> {
    let mut u = |lo: f64, hi: f64| d * rng.random_range(lo..hi);
    match class {
        ShapeClass::Sphere => vec![u(0.18, 0.34)],
        ShapeClass::Box => vec![u(0.12, 0.24), u(0.12, 0.24), u(0.12, 0.24)],
        ShapeClass::Torus => vec![u(0.2, 0.28), u(0.08, 0.13)],
        ShapeClass::Cone => vec![u(0.2, 0.3), u(0.2, 0.3)],
    }
}

/// Occupancy `clamp(0.5 - sdf, 0, 1)` sampled at voxel centers.
pub fn rasterize(class: ShapeClass, params: &[f64], center: Vec3, rot: &[[f64; 3]; 3], dims: [usize; 3]) -> Tensor<f32> {
    Tensor::from_fn(&[1, dims[0], dims[1], dims[2]], |i| {
        let p = [0, 1, 2].map(|a| i[a + 1] as f64 + 0.5 - center[a]);
        // Rotate into the shape frame with the transpose.
        let q = [0, 1, 2].map(|r| rot[0][r] * p[0] + rot[1][r] * p[1] + rot[2][r] * p[2]);
        (0.5 - sdf(class, params, q)).clamp(0.0, 1.0) as f32
    })
}

pub fn occupied(v: &Tensor<f32>) -> usize {
    v.data().iter().filter(|&&x| x > THRESHOLD).count()
}

fn sample_one(seed: u64, index: u64, class: ShapeClass, label: usize, dims: [usize; 3]) -> ShapeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let d = *dims.iter().min().expect("three dims") as f64;
    let n = dims.iter().product::<usize>() as f64;
    loop {
        let params = draw_params(class, &mut rng, d);
        let center = dims.map(|a| a as f64 / 2.0 + rng.random_range(-0.06..0.06) * d);
        let rot = rotation(&mut rng);
        let volume = rasterize(class, &params, center, &rot, dims);
        if occupied(&volume) as f64 >= MIN_FILL * n {
            return ShapeSample { volume, label, class, params };
        }
    }
}

/// `count` shapes cycling through `classes`, so every class appears
/// `count / classes.len()` times when that divides evenly. Each sample draws
/// from its own stream, so the result depends only on `seed`.
pub fn gen_shapes(seed: u64, count: usize, dims: [usize; 3], classes: &[ShapeClass]) -> Result<Vec<ShapeSample>> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::invalid("gen_shapes", format!("dims must be at least {MIN_DIM} per axis, got {dims:?}")));
    }
    if classes.is_empty() {
        return Err(Error::invalid("gen_shapes", "need at least one class"));
    }
    let make = |i: usize| {
        let label = i % classes.len();
        sample_one(seed, i as u64, classes[label], label, dims)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..count).into_par_iter().map(make).collect())
    }
    #[cfg(not(feature = "parallel"))]
    Ok((0..count).map(make).collect())
}

/// Zeroes the first voxels, in a seeded axis order and direction, until
/// `round(fraction·occupied)` occupied voxels are removed. The region is a
/// half-space slab plus a partial slab and a partial row: contiguous and
/// axis-aligned.
pub fn occlude(v: &Tensor<f32>, fraction: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("occlude", format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let s = v.shape();
    if s.len() != 4 {
        return Err(Error::invalid("occlude", format!("expected C×Dx×Dy×Dz, got {s:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes: [usize; 3] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][rng.random_range(0..6)];
    let flip: [bool; 3] = [rng.random(), rng.random(), rng.random()];
    let dims = [s[1], s[2], s[3]];
    let goal = (fraction * occupied(v) as f64).round() as usize;
    let mut out = v.clone();
    let (c, n) = (s[0], dims.iter().product::<usize>());
    let mut removed = 0;
    'sweep: for a in 0..dims[axes[0]] {
        for b in 0..dims[axes[1]] {
            for cc in 0..dims[axes[2]] {
                if removed >= goal {
                    break 'sweep;
                }
                let mut idx = [0; 3];
                for (&ax, val) in axes.iter().zip([a, b, cc]) {
                    idx[ax] = if flip[ax] { dims[ax] - 1 - val } else { val };
                }
                let off = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
                for ch in 0..c {
                    let x = &mut out.data_mut()[ch * n + off];
                    removed += usize::from(*x > THRESHOLD);
                    *x = 0.0;
                }
            }
        }
    }
    Ok(out)
}
