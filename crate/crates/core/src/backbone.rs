//! Orthogonal mean projections, plane encoders, and broadcast-sum lifting.
//!
//! Plane `k` drops axis `k` and keeps the other two in `(x, y, z)` order:
//! `P_x` is indexed `(y, z)`, `P_y` is `(x, z)` and `P_z` is `(x, y)`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// A channel-major volume `C×Dx×Dy×Dz`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<R: Real> {
    data: Tensor<R>,
}

impl<R: Real> VoxelGrid<R> {
    pub fn new(data: Tensor<R>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::invalid("voxel_grid", format!("expected non-empty C×Dx×Dy×Dz, got {s:?}")));
        }
        Ok(VoxelGrid { data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        VoxelGrid {
            data: Tensor::zeros(&[channels, dims[0], dims[1], dims[2]]),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<R> {
        self.data
    }
}

/// Spatial shape of plane `k` for a volume of `dims`.
pub fn plane_dims(dims: [usize; 3], k: usize) -> [usize; 2] {
    match k {
        0 => [dims[1], dims[2]],
        1 => [dims[0], dims[2]],
        _ => [dims[0], dims[1]],
    }
}

/// `[P_x, P_y, P_z]`: the mean of `v` along each spatial axis.
pub fn project_planes<R: Real>(tape: &mut Tape<R>, v: Var) -> Result<[Var; 3]> {
    if tape.shape(v).len() != 4 {
        return Err(Error::invalid("project_planes", format!("expected C×Dx×Dy×Dz, got {:?}", tape.shape(v))));
    }
    Ok([tape.mean_axis(v, 1)?, tape.mean_axis(v, 2)?, tape.mean_axis(v, 3)?])
}

/// A 2D conv stack with relu between layers.
#[derive(Clone, Debug)]
pub struct PlaneEncoder {
    pub layers: Vec<Conv>,
}

impl PlaneEncoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        init: &mut Init,
        name: &str,
        cin: usize,
        hidden: &[usize],
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut c = cin;
        for (i, &w) in hidden.iter().chain(std::iter::once(&cout)).enumerate() {
            layers.push(Conv::new(store, init, &format!("{name}.{i}"), 2, c, w, kernel, true)?);
            c = w;
        }
        Ok(PlaneEncoder { layers })
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

/// The three plane encoders; shared encoders hold three copies of one set of ids.
#[derive(Clone, Debug)]
pub struct PlaneEncoderParams {
    pub encoders: [PlaneEncoder; 3],
    pub shared: bool,
}

impl PlaneEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        init: &mut Init,
        cin: usize,
        hidden: &[usize],
        cout: usize,
        kernel: usize,
        shared: bool,
    ) -> Result<Self> {
        let encoders = if shared {
            let e = PlaneEncoder::new(store, init, "enc", cin, hidden, cout, kernel)?;
            [e.clone(), e.clone(), e]
        } else {
            [
                PlaneEncoder::new(store, init, "enc_x", cin, hidden, cout, kernel)?,
                PlaneEncoder::new(store, init, "enc_y", cin, hidden, cout, kernel)?,
                PlaneEncoder::new(store, init, "enc_z", cin, hidden, cout, kernel)?,
            ]
        };
        Ok(PlaneEncoderParams { encoders, shared })
    }
}

/// Plane features `F_k` and their lifting weights `λ_k`, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct TriPlaneSet {
    pub features: [Var; 3],
    pub lambdas: [Var; 3],
}

/// Checks that `[P_x, P_y, P_z]` share a channel count and come from one volume;
/// returns `(channels, dims)`.
pub fn plane_geometry<R: Real>(tape: &Tape<R>, planes: &[Var; 3]) -> Result<(usize, [usize; 3])> {
    let s: Vec<&[usize]> = planes.iter().map(|&p| tape.shape(p)).collect();
    if s.iter().any(|s| s.len() != 3) {
        return Err(Error::invalid("planes", "each plane must be C×A×B"));
    }
    let dims = [s[1][1], s[0][1], s[0][2]];
    let consistent = s[0][0] == s[1][0]
        && s[1][0] == s[2][0]
        && s[1][2] == dims[2]
        && s[2][1] == dims[0]
        && s[2][2] == dims[1];
    if !consistent {
        return Err(Error::invalid("planes", format!("plane shapes {s:?} do not come from one volume")));
    }
    Ok((s[0][0], dims))
}

/// `F_k = g_k(P_k)` for each plane.
pub fn encode_planes<R: Real>(tape: &mut Tape<R>, p: &Bound, params: &PlaneEncoderParams, planes: [Var; 3]) -> Result<[Var; 3]> {
    plane_geometry(tape, &planes)?;
    let mut out = planes;
    for (f, enc) in out.iter_mut().zip(&params.encoders) {
        *f = enc.forward(tape, p, *f)?;
    }
    Ok(out)
}

/// `λ_k·F_k` on each plane. A one-element `λ` scales the whole plane; a
/// `C'`-vector scales per channel.
pub fn weight_planes<R: Real>(tape: &mut Tape<R>, set: &TriPlaneSet) -> Result<[Var; 3]> {
    let mut out = set.features;
    for (f, &l) in out.iter_mut().zip(&set.lambdas) {
        *f = if tape.value(l).numel() == 1 {
            tape.scale_by(l, *f)?
        } else {
            tape.scale_channels(l, *f)?
        };
    }
    Ok(out)
}

/// Replicates each plane along its missing axis and sums:
/// `T(c,i,j,k) = A_x(c,j,k) + A_y(c,i,k) + A_z(c,i,j)`.
pub fn lift<R: Real>(tape: &mut Tape<R>, planes: [Var; 3], dims: [usize; 3]) -> Result<Var> {
    let (_, d) = plane_geometry(tape, &planes)?;
    if d != dims {
        return Err(Error::invalid("lift", format!("planes describe {d:?}, expected {dims:?}")));
    }
    let bx = tape.broadcast_axis(planes[0], 1, dims[0])?;
    let by = tape.broadcast_axis(planes[1], 2, dims[1])?;
    let bz = tape.broadcast_axis(planes[2], 3, dims[2])?;
    let t = tape.add(bx, by)?;
    tape.add(t, bz)
}

/// `T = λ_x F̂_x + λ_y F̂_y + λ_z F̂_z`, where `F̂_k` is `F_k` broadcast along axis `k`.
pub fn lift_and_fuse<R: Real>(tape: &mut Tape<R>, set: &TriPlaneSet, dims: [usize; 3]) -> Result<Var> {
    let weighted = weight_planes(tape, set)?;
    lift(tape, weighted, dims)
}

/// Learnable lifting weights, initialized to `1/3`.
pub fn lambda_params<R: Real>(store: &mut ParamStore<R>, channels: usize, per_channel: bool) -> Result<[ParamId; 3]> {
    let shape: &[usize] = if per_channel { &[channels] } else { &[1] };
    let third = R::lit(1.0 / 3.0);
    Ok([
        store.add("lambda_x", Tensor::full(shape, third))?,
        store.add("lambda_y", Tensor::full(shape, third))?,
        store.add("lambda_z", Tensor::full(shape, third))?,
    ])
}
