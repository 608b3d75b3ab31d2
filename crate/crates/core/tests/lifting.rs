//! Projection, plane encoding, lifting, positional modulation and the
//! volumetric branch checked against pointwise oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplane::autodiff::gradcheck::{grad_check, GradCheck};
use triplane::backbone::{encode_planes, lift, lift_and_fuse, project_planes, PlaneEncoderParams, TriPlaneSet};
use triplane::config::{ModelConfig, PeMode, TokenLayout, Variant};
use triplane::nn::{Bound, Init, ParamStore};
use triplane::posmod::{
    build_weight_volume, post_modulate, pre_modulate, premodulate_planes, summarize_tokens, summarize_tokens_volume, TransformerPe,
};
use triplane::volumetric::{downsample, fuse, upsample_to, Mixer, VolumeBranch};
use triplane::{Tape, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn ramp(shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product::<usize>();
    Tensor::new(shape, (1..=n).map(|v| v as f64).collect()).unwrap()
}

fn planes_of(v: &Tensor<f64>) -> [Tensor<f64>; 3] {
    let mut tape = Tape::inference();
    let x = tape.constant(v).unwrap();
    project_planes(&mut tape, x).unwrap().map(|p| tape.value(p).clone())
}

#[test]
fn projections_of_simple_volumes() {
    let [px, py, pz] = planes_of(&Tensor::full(&[1, 3, 4, 5], 2.5));
    for p in [&px, &py, &pz] {
        assert!(p.data().iter().all(|&v| v == 2.5));
    }
    assert_eq!((px.shape(), py.shape(), pz.shape()), (&[1, 4, 5][..], &[1, 3, 5][..], &[1, 3, 4][..]));

    let [_, _, pz] = planes_of(&ramp(&[1, 2, 2, 2]));
    assert_eq!(pz.at(&[0, 0, 0]), 1.5);

    let mut v = Tensor::zeros(&[1, 8, 8, 8]);
    let (i, j, k) = (2, 5, 7);
    v.set(&[0, i, j, k], 1.0);
    let [_, _, pz] = planes_of(&v);
    for a in 0..8 {
        for b in 0..8 {
            let want = if (a, b) == (i, j) { 0.125 } else { 0.0 };
            assert_eq!(pz.at(&[0, a, b]), want);
        }
    }
}

/// Encoders with `layers` convs of the given kernel; returns store and params.
fn encoders(cin: usize, hidden: &[usize], cout: usize, kernel: usize) -> (ParamStore<f64>, PlaneEncoderParams) {
    let mut store = ParamStore::new();
    let params = PlaneEncoderParams::new(&mut store, &mut Init::new(3), cin, hidden, cout, kernel, false).unwrap();
    (store, params)
}

fn encode(store: &ParamStore<f64>, params: &PlaneEncoderParams, planes: &[Tensor<f64>; 3]) -> [Tensor<f64>; 3] {
    let mut tape = Tape::inference();
    let mut bound = Bound::new();
    store.bind(&mut tape, &mut bound).unwrap();
    let vars = [0, 1, 2].map(|k| tape.constant(&planes[k]).unwrap());
    encode_planes(&mut tape, &bound, params, vars).unwrap().map(|f| tape.value(f).clone())
}

#[test]
fn identity_and_zero_encoders() {
    let (mut store, params) = encoders(1, &[], 1, 1);
    for k in ["x", "y", "z"] {
        store.set_by_name(&format!("enc_{k}.0.w"), Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    }
    let planes = planes_of(&random(&[1, 3, 4, 5], 1));
    assert_eq!(encode(&store, &params, &planes), planes);

    let (store, params) = encoders(1, &[4], 2, 3);
    let zero = planes_of(&Tensor::zeros(&[1, 3, 4, 5]));
    for f in encode(&store, &params, &zero) {
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}

/// Same-padded 2D correlation by nested loops.
fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    Tensor::from_fn(&[cout, h, wd], |o| {
        let mut acc = b.at(&[o[0]]);
        for c in 0..cin {
            for di in 0..k {
                for dj in 0..k {
                    let (si, sj) = (o[1] as isize + di as isize - pad, o[2] as isize + dj as isize - pad);
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                        acc += w.at(&[o[0], c, di, dj]) * x.at(&[c, si as usize, sj as usize]);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn one_conv_layer_matches_nested_loops_per_plane() {
    let (mut store, params) = encoders(1, &[], 3, 3);
    for k in ["x", "y", "z"] {
        store.set_by_name(&format!("enc_{k}.0.b"), random(&[3], 9)).unwrap();
    }
    let planes = planes_of(&random(&[1, 4, 5, 6], 2));
    let got = encode(&store, &params, &planes);
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        let w = store.by_name(&format!("enc_{name}.0.w")).unwrap();
        let b = store.by_name(&format!("enc_{name}.0.b")).unwrap();
        assert!(got[k].max_rel_diff(&conv2d_oracle(&planes[k], w, b), 1.0) < 1e-12);
    }
}

fn lift_values(features: &[Tensor<f64>; 3], lambdas: [f64; 3], dims: [usize; 3]) -> Tensor<f64> {
    let mut tape = Tape::inference();
    let f = [0, 1, 2].map(|k| tape.constant(&features[k]).unwrap());
    let l = lambdas.map(|l| tape.constant(&Tensor::full(&[1], l)).unwrap());
    let t = lift_and_fuse(&mut tape, &TriPlaneSet { features: f, lambdas: l }, dims).unwrap();
    tape.value(t).clone()
}

fn random_planes(c: usize, dims: [usize; 3], seed: u64) -> [Tensor<f64>; 3] {
    [
        random(&[c, dims[1], dims[2]], seed),
        random(&[c, dims[0], dims[2]], seed + 1),
        random(&[c, dims[0], dims[1]], seed + 2),
    ]
}

/// `T(c,i,j,k) = λx·Fx(c,j,k) + λy·Fy(c,i,k) + λz·Fz(c,i,j)` evaluated one voxel at a time.
fn closed_form(f: &[Tensor<f64>; 3], l: [f64; 3], c: usize, i: usize, j: usize, k: usize) -> f64 {
    l[0] * f[0].at(&[c, j, k]) + l[1] * f[1].at(&[c, i, k]) + l[2] * f[2].at(&[c, i, j])
}

#[test]
fn lifting_selection_and_constants() {
    let dims = [3, 4, 5];
    let f = random_planes(2, dims, 4);
    let t = lift_values(&f, [1.0, 0.0, 0.0], dims);
    for c in 0..2 {
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    assert_eq!(t.at(&[c, i, j, k]), f[0].at(&[c, j, k]));
                }
            }
        }
    }
    let consts = [
        Tensor::full(&[1, 4, 5], 0.5),
        Tensor::full(&[1, 3, 5], -2.0),
        Tensor::full(&[1, 3, 4], 4.0),
    ];
    assert!(lift_values(&consts, [1.0; 3], dims).data().iter().all(|&v| v == 2.5));
}

#[test]
fn lifting_matches_pointwise_queries_on_random_4_cubed() {
    let dims = [4, 4, 4];
    let f = random_planes(3, dims, 10);
    let l = [0.3, -1.2, 0.7];
    let t = lift_values(&f, l, dims);
    let mut checked = 0;
    for c in 0..3 {
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let want = closed_form(&f, l, c, i, j, k);
                    assert!((t.at(&[c, i, j, k]) - want).abs() <= 1e-12 * want.abs().max(1.0));
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 3 * 64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lifting_is_linear_in_each_plane_and_lambda(seed in 0u64..10_000, a in -2.0f64..2.0, k in 0usize..3) {
        let dims = [3, 2, 4];
        let f = random_planes(2, dims, seed);
        let g = random_planes(2, dims, seed + 100);
        let l = [0.4, -0.9, 1.3];
        // Linear in F_k: T(F_k + a·G_k) = T(F_k) + a·T_k(G_k).
        let mut mixed = f.clone();
        mixed[k] = Tensor::from_fn(f[k].shape(), |i| f[k].at(i) + a * g[k].at(i));
        let mut only = [0.0; 3];
        only[k] = l[k];
        let lhs = lift_values(&mixed, l, dims);
        let base = lift_values(&f, l, dims);
        let part = lift_values(&g, only, dims);
        let rhs = Tensor::from_fn(base.shape(), |i| base.at(i) + a * part.at(i));
        prop_assert!(lhs.max_rel_diff(&rhs, 1.0) < 1e-12);
        // Linear in λ_k.
        let mut l2 = l;
        l2[k] += a;
        let mut unit = [0.0; 3];
        unit[k] = 1.0;
        let shifted = lift_values(&f, l2, dims);
        let sel = lift_values(&f, unit, dims);
        let rhs = Tensor::from_fn(base.shape(), |i| base.at(i) + a * sel.at(i));
        prop_assert!(shifted.max_rel_diff(&rhs, 1.0) < 1e-12);
    }

    #[test]
    fn tokens_average_to_the_global_mean(seed in 0u64..10_000, dx in 1usize..5, dy in 1usize..5, dz in 1usize..5) {
        let v = random(&[2, dx, dy, dz], seed);
        let mut tape = Tape::inference();
        let x = tape.constant(&v).unwrap();
        let planes = project_planes(&mut tape, x).unwrap();
        let from_planes = summarize_tokens(&mut tape, &planes).unwrap();
        let from_volume = summarize_tokens_volume(&mut tape, x).unwrap();
        for c in 0..2 {
            let n = (dx * dy * dz) as f64;
            let global: f64 = (0..dx * dy * dz).map(|i| v.data()[c * dx * dy * dz + i]).sum::<f64>() / n;
            for k in 0..3 {
                let t = tape.value(from_planes[k]);
                let d = t.shape()[1];
                let m: f64 = (0..d).map(|i| t.at(&[c, i])).sum::<f64>() / d as f64;
                prop_assert!((m - global).abs() < 1e-12);
                prop_assert!(t.max_rel_diff(tape.value(from_volume[k]), 1.0) < 1e-12);
            }
        }
    }

    #[test]
    fn weight_volume_sum_and_separability(seed in 0u64..10_000, dx in 1usize..5, dy in 1usize..5, dz in 1usize..5) {
        let e = [random(&[2, dx], seed), random(&[2, dy], seed + 1), random(&[2, dz], seed + 2)];
        let mut tape = Tape::inference();
        let ev = [0, 1, 2].map(|k| tape.constant(&e[k]).unwrap());
        let w = build_weight_volume(&mut tape, &ev, [dx, dy, dz]).unwrap();
        let w = tape.value(w).clone();
        let total: f64 = w.data().iter().sum();
        let s = |t: &Tensor<f64>| t.data().iter().sum::<f64>();
        let want = (dy * dz) as f64 * s(&e[0]) + (dx * dz) as f64 * s(&e[1]) + (dx * dy) as f64 * s(&e[2]);
        prop_assert!((total - want).abs() < 1e-9 * want.abs().max(1.0));
        // Adjacent x-slices differ by the constant e_x[i+1] - e_x[i].
        for c in 0..2 {
            for i in 1..dx {
                let off = e[0].at(&[c, i]) - e[0].at(&[c, i - 1]);
                for j in 0..dy {
                    for k in 0..dz {
                        prop_assert!((w.at(&[c, i, j, k]) - w.at(&[c, i - 1, j, k]) - off).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn token_example_and_constant_tokens() {
    let mut tape = Tape::inference();
    let x = tape.constant(&ramp(&[1, 2, 2, 2])).unwrap();
    let t = summarize_tokens_volume(&mut tape, x).unwrap();
    assert_eq!(tape.value(t[0]).at(&[0, 0]), 2.5);
    let c = tape.constant(&Tensor::full(&[1, 3, 2, 4], -1.5)).unwrap();
    for t in summarize_tokens_volume(&mut tape, c).unwrap() {
        assert!(tape.value(t).data().iter().all(|&v| v == -1.5));
    }
}

#[test]
fn weight_volume_examples() {
    let mut tape = Tape::inference();
    let zeros = [2, 3, 4].map(|d| tape.constant(&Tensor::zeros(&[1, d])).unwrap());
    let w = build_weight_volume(&mut tape, &zeros, [2, 3, 4]).unwrap();
    assert!(tape.value(w).data().iter().all(|&v| v == 0.0));
    let ex = tape.constant(&Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let w = build_weight_volume(&mut tape, &[ex, zeros[1], zeros[2]], [2, 3, 4]).unwrap();
    let w = tape.value(w);
    for j in 0..3 {
        for k in 0..4 {
            assert_eq!((w.at(&[0, 0, j, k]), w.at(&[0, 1, j, k])), (1.0, 0.0));
        }
    }
    assert!(build_weight_volume(&mut tape, &[ex, zeros[1], zeros[2]], [3, 3, 4]).is_err());
}

#[test]
fn modulation_is_plain_addition() {
    let v = random(&[2, 3, 4, 2], 5);
    let w = random(&[2, 3, 4, 2], 6);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(&v).unwrap();
    let zero = tape.constant(&Tensor::zeros(v.shape())).unwrap();
    let same = pre_modulate(&mut tape, xv, zero).unwrap();
    assert_eq!(tape.value(same), &v);
    let wv = tape.param(&w).unwrap();
    let up = pre_modulate(&mut tape, xv, wv).unwrap();
    let back = tape.sub(up, wv).unwrap();
    assert_eq!(tape.value(back).max_rel_diff(&v, 1.0), 0.0);

    // d(sum(T'))/dW_post is all ones.
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(&v).unwrap();
    let wv = tape.param(&w).unwrap();
    let t = post_modulate(&mut tape, xv, wv).unwrap();
    let s = tape.sum(t).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(wv).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn premodulated_planes_equal_projections_of_the_modulated_volume() {
    let dims = [3, 4, 5];
    let v = random(&[2, 3, 4, 5], 1);
    let e = [random(&[2, 3], 2), random(&[2, 4], 3), random(&[2, 5], 4)];
    let mut tape = Tape::inference();
    let x = tape.constant(&v).unwrap();
    let ev = [0, 1, 2].map(|k| tape.constant(&e[k]).unwrap());
    let planes = project_planes(&mut tape, x).unwrap();
    let folded = premodulate_planes(&mut tape, planes, &ev).unwrap();
    let w = build_weight_volume(&mut tape, &ev, dims).unwrap();
    let vm = pre_modulate(&mut tape, x, w).unwrap();
    let direct = project_planes(&mut tape, vm).unwrap();
    for k in 0..3 {
        assert!(tape.value(folded[k]).max_rel_diff(tape.value(direct[k]), 1.0) < 1e-12);
    }
}

fn transformer(layout: TokenLayout, pos: bool, dims: [usize; 3]) -> (ParamStore<f64>, TransformerPe) {
    let mut cfg = ModelConfig::new(Variant::Backbone, dims).with_pe(PeMode::Transformer);
    cfg.pe.layout = layout;
    cfg.pe.position_embeddings = pos;
    cfg.pe.model_dim = 16;
    cfg.pe.heads = 4;
    let mut store = ParamStore::new();
    let t = TransformerPe::new(&mut store, &mut Init::new(1), &cfg).unwrap();
    (store, t)
}

#[test]
fn zero_heads_give_zero_embeddings_and_attention_rows_are_distributions() {
    for layout in [TokenLayout::Profiles, TokenLayout::Slices] {
        let dims = [3, 4, 5];
        let (store, pe) = transformer(layout, true, dims);
        let mut tape = Tape::inference();
        let mut bound = Bound::new();
        store.bind(&mut tape, &mut bound).unwrap();
        let x = tape.constant(&random(&[1, 3, 4, 5], 2)).unwrap();
        let tokens = summarize_tokens_volume(&mut tape, x).unwrap();
        let mut probe = Vec::new();
        let e = pe.encode(&mut tape, &bound, &tokens, Some(&mut probe)).unwrap();
        for v in e.pre.iter().chain(&e.post) {
            assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(probe.len(), 2 * 4, "one matrix per layer and head");
        for a in probe {
            let a = tape.value(a);
            let l = a.shape()[0];
            for r in 0..l {
                let s: f64 = (0..l).map(|c| a.at(&[r, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn slice_profiles(store: &ParamStore<f64>, pe: &TransformerPe, v: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut tape = Tape::inference();
    let mut bound = Bound::new();
    store.bind(&mut tape, &mut bound).unwrap();
    let x = tape.constant(v).unwrap();
    let tokens = summarize_tokens_volume(&mut tape, x).unwrap();
    let e = pe.encode(&mut tape, &bound, &tokens, None).unwrap();
    e.pre.iter().chain(&e.post).map(|&v| tape.value(v).clone()).collect()
}

/// Without position embeddings the slice encoder is permutation-equivariant
/// along each axis: reordering x-slices reorders the x profiles only.
#[test]
fn slice_encoder_without_positions_is_permutation_equivariant() {
    let (mut store, pe) = transformer(TokenLayout::Slices, false, [4, 3, 3]);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        let s = store.by_name(n).unwrap().shape().to_vec();
        store.set_by_name(n, random(&s, 50 + i as u64)).unwrap();
    }
    let v = random(&[1, 4, 3, 3], 3);
    let sigma = [3, 1, 2, 0];
    let swapped = Tensor::from_fn(v.shape(), |i| v.at(&[i[0], sigma[i[1]], i[2], i[3]]));
    let (a, b) = (slice_profiles(&store, &pe, &v), slice_profiles(&store, &pe, &swapped));
    for site in [0, 3] {
        let moved = Tensor::from_fn(a[site].shape(), |i| a[site].at(&[i[0], sigma[i[1]]]));
        assert!(b[site].max_rel_diff(&moved, 1.0) < 1e-12);
    }
    for site in [1, 2, 4, 5] {
        assert!(b[site].max_rel_diff(&a[site], 1.0) < 1e-12);
    }

    // Two identical x-slices: swapping them is a no-op and their profile entries agree.
    let twin = Tensor::from_fn(v.shape(), |i| v.at(&[i[0], if i[1] == 2 { 0 } else { i[1] }, i[2], i[3]]));
    let swap02 = Tensor::from_fn(v.shape(), |i| twin.at(&[i[0], [2, 1, 0, 3][i[1]], i[2], i[3]]));
    let (p, q) = (slice_profiles(&store, &pe, &twin), slice_profiles(&store, &pe, &swap02));
    assert_eq!(p, q);
    for e in [&p[0], &p[3]] {
        for c in 0..e.shape()[0] {
            assert_eq!(e.at(&[c, 0]), e.at(&[c, 2]));
        }
    }
}

#[test]
fn overlong_sequences_are_rejected() {
    let mut cfg = ModelConfig::new(Variant::Backbone, [40, 4, 4]).with_pe(PeMode::Transformer);
    cfg.pe.layout = TokenLayout::Slices;
    cfg.pe.max_positions = 32;
    assert!(cfg.validate().is_err());
    cfg.pe.max_positions = 40;
    assert!(cfg.validate().is_ok());
}

fn down(v: &Tensor<f64>, r: f64) -> Tensor<f64> {
    let mut tape = Tape::inference();
    let x = tape.constant(v).unwrap();
    let y = downsample(&mut tape, x, r).unwrap();
    tape.value(y).clone()
}

#[test]
fn downsampling_examples() {
    let v = random(&[2, 4, 5, 3], 8);
    assert_eq!(down(&v, 1.0), v);
    for r in [0.5, 0.25, 1.0 / 3.0, 0.7] {
        let c = down(&Tensor::full(&[1, 6, 5, 4], 0.3), r);
        assert!(c.data().iter().all(|&x| (x - 0.3).abs() < 1e-12), "r = {r}");
    }
    let v = random(&[1, 4, 4, 4], 9);
    let d = down(&v, 0.5);
    assert_eq!(d.shape(), &[1, 2, 2, 2]);
    let mut corner = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                corner += v.at(&[0, i, j, k]);
            }
        }
    }
    assert!((d.at(&[0, 0, 0, 0]) - corner / 8.0).abs() < 1e-12);
    assert_eq!(down(&random(&[1, 7, 5, 3], 1), 1.0 / 3.0).shape(), &[1, 3, 2, 1]);
}

#[test]
fn branch_identity_kernel_zero_input_and_constant_upsampling() {
    let mut store = ParamStore::<f64>::new();
    let branch = VolumeBranch::new(&mut store, &mut Init::new(0), 0.5, 1, &[], 1, 3).unwrap();
    let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
    w.set(&[0, 0, 1, 1, 1], 1.0);
    store.set_by_name("vol.0.w", w).unwrap();
    let v = random(&[1, 4, 4, 4], 2);
    let mut tape = Tape::inference();
    let mut bound = Bound::new();
    store.bind(&mut tape, &mut bound).unwrap();
    let x = tape.constant(&v).unwrap();
    let coarse = downsample(&mut tape, x, 0.5).unwrap();
    let enc = branch.encode(&mut tape, &bound, coarse).unwrap();
    assert_eq!(tape.value(enc), tape.value(coarse));
    let z = tape.constant(&Tensor::zeros(&[1, 4, 4, 4])).unwrap();
    let g = branch.forward(&mut tape, &bound, z, [4, 4, 4]).unwrap();
    assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
    let c = tape.constant(&Tensor::full(&[2, 2, 3, 2], 1.25)).unwrap();
    let u = upsample_to(&mut tape, c, [5, 7, 4]).unwrap();
    assert!(tape.value(u).data().iter().all(|&v| (v - 1.25).abs() < 1e-12));
}

#[test]
fn fusion_with_zero_branch_and_no_mixer_is_the_lifted_volume() {
    let mut tape = Tape::<f64>::inference();
    let t = tape.constant(&random(&[3, 2, 3, 4], 1)).unwrap();
    let g = tape.constant(&Tensor::zeros(&[3, 2, 3, 4])).unwrap();
    let y = fuse(&mut tape, &Bound::new(), &Mixer::default(), t, g).unwrap();
    assert_eq!(tape.value(y), tape.value(t));
}

#[test]
fn gradients_through_fusion_and_backbone() {
    let mut store = ParamStore::<f64>::new();
    let mixer = Mixer::new(&mut store, &mut Init::new(4), 2, 2).unwrap();
    let mut inputs = vec![random(&[2, 4, 4, 4], 1), random(&[2, 4, 4, 4], 2)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let bound = Bound::from_vars(v[2..].to_vec());
        let y = fuse(tape, &bound, &mixer, v[0], v[1])?;
        let y = tape.mul(y, y)?;
        tape.sum(y)
    };
    let r = grad_check(f, &inputs, &GradCheck::default()).unwrap();
    assert!(r.passed, "{r:?}");

    let (store, params) = encoders(1, &[3], 2, 3);
    let mut inputs = vec![random(&[1, 5, 5, 5], 3), random(&[1], 4), random(&[1], 5), random(&[1], 6)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let bound = Bound::from_vars(v[4..].to_vec());
        let planes = project_planes(tape, v[0])?;
        let feats = encode_planes(tape, &bound, &params, planes)?;
        let t = lift_and_fuse(tape, &TriPlaneSet { features: feats, lambdas: [v[1], v[2], v[3]] }, [5, 5, 5])?;
        let t = tape.mul(t, t)?;
        tape.sum(t)
    };
    let r = grad_check(f, &inputs, &GradCheck { max_coords: Some(40), ..GradCheck::default() }).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn lift_rejects_planes_from_different_volumes() {
    let mut tape = Tape::<f64>::inference();
    let f = random_planes(1, [3, 4, 5], 1).map(|p| tape.constant(&p).unwrap());
    assert!(lift(&mut tape, f, [3, 4, 6]).is_err());
}
