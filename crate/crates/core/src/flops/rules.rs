//! Per-operation FLOP conventions.
//!
//! One multiply-add is two FLOPs. Every elementwise operation (including
//! bias additions and activations) costs one FLOP per output element. Pure
//! data movement (broadcast, reshape, slicing, concatenation, transpose) is
//! free.

pub const fn elementwise(n: usize) -> u64 {
    n as u64
}

/// Full-window convolution count: padded taps are counted like real ones.
pub const fn conv(cin: usize, cout: usize, taps: usize, out_plane: usize, bias: bool) -> u64 {
    let macs = (taps * cin * cout * out_plane) as u64;
    2 * macs + if bias { (cout * out_plane) as u64 } else { 0 }
}

pub const fn matmul(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Sums over the reduced axis plus one division per output.
pub const fn mean_axis(n_in: usize, n_out: usize) -> u64 {
    (n_in + n_out) as u64
}

/// One linear resize along a single axis: a subtract, multiply and add per output.
pub const fn resize_axis(n_out: usize) -> u64 {
    3 * n_out as u64
}

pub const fn avg_pool(n_in: usize, n_out: usize) -> u64 {
    (n_in + n_out) as u64
}

pub const fn softmax(n: usize) -> u64 {
    4 * n as u64
}

pub const fn layer_norm(n: usize) -> u64 {
    8 * n as u64
}

pub const fn sum(n: usize) -> u64 {
    n as u64
}

pub const fn mean(n: usize) -> u64 {
    n as u64 + 1
}

pub const fn bce_with_logits(n: usize) -> u64 {
    6 * n as u64
}

pub const fn cross_entropy(classes: usize) -> u64 {
    4 * classes as u64
}
