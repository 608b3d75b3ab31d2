//! Whole-model identities: runtime vs analytic FLOPs, the folded vs
//! materialized modulation routes, reduction and zero-head identities, axis
//! equivariance and end-to-end gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplane::autodiff::gradcheck::{grad_check, GradCheck};
use triplane::config::{BranchInput, ModelConfig, PeMode, Task, TokenLayout, Variant};
use triplane::flops::count_stages;
use triplane::model::{Forward, Model, Route, Stage};
use triplane::nn::Bound;
use triplane::{Real, Tape, Tensor};

fn random<R: Real>(shape: &[usize], seed: u64) -> Tensor<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| R::lit(rng.random_range(-1.0..1.0)))
}

/// Overwrites every parameter, including zero-initialized heads, with noise.
fn scramble<R: Real>(m: &mut Model<R>, seed: u64) {
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        let shape = m.params.by_name(n).unwrap().shape().to_vec();
        let t = random::<R>(&shape, seed * 1000 + i as u64).map(|v| v * R::lit(0.5));
        m.params.set_by_name(n, t).unwrap();
    }
}

struct Run<R: Real> {
    tape: Tape<R>,
    fwd: Forward,
}

impl<R: Real> Run<R> {
    fn out(&self) -> &Tensor<R> {
        self.tape.value(self.fwd.output)
    }
}

fn run<R: Real>(m: &Model<R>, x: &Tensor<R>, route: Route) -> Run<R> {
    let mut tape = Tape::inference();
    let mut bound = Bound::new();
    m.params.bind(&mut tape, &mut bound).unwrap();
    let xv = tape.constant(x).unwrap();
    let fwd = m.forward_with(&mut tape, &bound, xv, route).unwrap();
    Run { tape, fwd }
}

fn input<R: Real>(cfg: &ModelConfig, seed: u64) -> Tensor<R> {
    let d = cfg.dims;
    random(&[cfg.in_channels, d[0], d[1], d[2]], seed)
}

/// A spread of configurations covering every variant, PE mode, layout, ratio kind and head.
fn config_zoo(dims: [usize; 3]) -> Vec<ModelConfig> {
    let mut out = vec![ModelConfig::new(Variant::Dense3d, dims), ModelConfig::new(Variant::Backbone, dims)];
    for mode in PeMode::ALL {
        for ratio in [Some(0.5), Some(1.0 / 3.0), Some(1.0), None] {
            let mut c = ModelConfig::new(Variant::Hybrid, dims).with_pe(mode);
            c.ratio = ratio;
            c.pe.model_dim = 8;
            c.pe.heads = 2;
            c.encoder_widths = vec![4];
            c.volume_widths = vec![3];
            c.plane_channels = 3;
            out.push(c);
        }
    }
    let mut slices = ModelConfig::new(Variant::Hybrid, dims).with_pe(PeMode::Transformer);
    slices.pe.layout = TokenLayout::Slices;
    out.push(slices.clone());
    slices.pe.position_embeddings = false;
    out.push(slices);
    let mut modulated = ModelConfig::new(Variant::Hybrid, dims).with_pe(PeMode::Mlp);
    modulated.branch_input = BranchInput::Modulated;
    out.push(modulated.clone());
    modulated.pe.mode = PeMode::Coordconv;
    out.push(modulated);
    let mut extras = ModelConfig::new(Variant::Hybrid, dims).with_pe(PeMode::Sinusoidal);
    extras.shared_encoders = true;
    extras.per_channel_lambda = true;
    extras.in_channels = 2;
    extras.mixer_layers = Some(3);
    out.push(extras);
    let more: Vec<ModelConfig> = out.iter().map(|c| c.clone().with_task(Task::Classify)).collect();
    out.extend(more);
    out
}

#[test]
fn runtime_counter_matches_analytic_count_per_stage() {
    for dims in [[6, 5, 4], [3, 7, 2]] {
        for (i, cfg) in config_zoo(dims).into_iter().enumerate() {
            let m = Model::<f32>::new(cfg.clone()).unwrap();
            let r = run(&m, &input(&cfg, i as u64), Route::Folded);
            let analytic = count_stages(&cfg, dims).unwrap();
            assert_eq!(r.fwd.stages, analytic, "{} {:?} {:?}", cfg.label(), cfg.pe.mode, cfg.task);
            assert_eq!(r.tape.flops(), analytic.total());
        }
    }
}

#[test]
fn presets_agree_with_analytic_totals_at_32() {
    for name in ["backbone", "hybrid-1/2", "hybrid-1/4", "dense3d"] {
        let cfg = ModelConfig::preset(name, [32; 3]).unwrap();
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        let r = run(&m, &input(&cfg, 1), Route::Folded);
        let analytic = count_stages(&cfg, cfg.dims).unwrap().total() as f64;
        let measured = r.tape.flops() as f64;
        assert!((measured - analytic).abs() / analytic < 0.01, "{name}: {measured} vs {analytic}");
    }
}

#[test]
fn folded_route_matches_materialized_weight_volumes() {
    for (i, cfg) in config_zoo([5, 4, 3]).into_iter().enumerate() {
        if cfg.variant == Variant::Dense3d {
            continue;
        }
        let mut m = Model::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut m, i as u64 + 7);
        let x = input(&cfg, i as u64);
        let folded = run(&m, &x, Route::Folded);
        let mat = run(&m, &x, Route::Materialized);
        let t_f = folded.tape.value(folded.fwd.lifted.unwrap());
        let t_m = mat.tape.value(mat.fwd.lifted.unwrap());
        assert!(t_f.max_rel_diff(t_m, 1.0) < 1e-10, "{} {:?}: lifted differs", cfg.label(), cfg.pe.mode);
        assert!(folded.out().max_rel_diff(mat.out(), 1.0) < 1e-10, "{} {:?}: output differs", cfg.label(), cfg.pe.mode);
    }
}

#[test]
fn modulation_is_active_after_scrambling() {
    // Guards the route test above against vacuous agreement.
    let cfg = ModelConfig::new(Variant::Hybrid, [5, 4, 3]).with_pe(PeMode::Transformer);
    let mut on = Model::<f64>::new(cfg.clone()).unwrap();
    scramble(&mut on, 3);
    let mut off = Model::<f64>::new(cfg.clone().with_pe(PeMode::None)).unwrap();
    for (n, t) in on.params.iter() {
        if off.params.id(n).is_some() {
            off.params.set_by_name(n, t.clone()).unwrap();
        }
    }
    let x = input(&cfg, 9);
    assert!(run(&on, &x, Route::Folded).out().max_rel_diff(run(&off, &x, Route::Folded).out(), 1.0) > 1e-3);
}

#[test]
fn hybrid_without_branch_pe_or_mixer_is_bitwise_backbone() {
    for dims in [[6, 5, 4], [8, 8, 8]] {
        for task in [Task::Complete, Task::Classify] {
            let backbone = ModelConfig::new(Variant::Backbone, dims).with_task(task);
            let mut hybrid = ModelConfig::new(Variant::Hybrid, dims).with_task(task);
            hybrid.ratio = None;
            hybrid.mixer_layers = Some(0);
            let b = Model::<f32>::new(backbone.clone()).unwrap();
            let h = Model::<f32>::new(hybrid).unwrap();
            let x = input(&backbone, 4);
            let (yb, yh) = (run(&b, &x, Route::Folded), run(&h, &x, Route::Folded));
            assert_eq!(yb.out().data(), yh.out().data());
        }
    }
}

#[test]
fn zero_initialized_heads_make_pe_bitwise_inert() {
    for mode in [PeMode::Sinusoidal, PeMode::Mlp, PeMode::Transformer] {
        for layout in [TokenLayout::Profiles, TokenLayout::Slices] {
            for variant in [Variant::Backbone, Variant::Hybrid] {
                let off = ModelConfig::new(variant, [6, 5, 4]);
                let mut on = off.clone().with_pe(mode);
                on.pe.layout = layout;
                let a = Model::<f32>::new(off.clone()).unwrap();
                let b = Model::<f32>::new(on).unwrap();
                let x = input(&off, 11);
                for route in [Route::Folded, Route::Materialized] {
                    let (ya, yb) = (run(&a, &x, route), run(&b, &x, route));
                    assert_eq!(ya.out().data(), yb.out().data(), "{mode:?} {layout:?} {variant:?} {route:?}");
                }
            }
        }
    }
}

#[test]
fn identity_mixer_returns_lifted_plus_branch() {
    let mut cfg = ModelConfig::new(Variant::Hybrid, [4, 4, 4]);
    cfg.mixer_layers = Some(1);
    let mut m = Model::<f64>::new(cfg.clone()).unwrap();
    scramble(&mut m, 5);
    let c = cfg.plane_channels;
    m.params
        .set_by_name("mix.0.w", Tensor::from_fn(&[c, c, 1, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 }))
        .unwrap();
    m.params.set_by_name("mix.0.b", Tensor::zeros(&[c])).unwrap();
    let r = run(&m, &input(&cfg, 2), Route::Folded);
    let t = r.tape.value(r.fwd.lifted.unwrap());
    let g = r.tape.value(r.fwd.branch.unwrap());
    let y = r.tape.value(r.fwd.features);
    let sum: Vec<f64> = t.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
    assert_eq!(y.data(), &sum[..]);
}

#[test]
fn constant_input_through_identity_planes_gives_three_c() {
    let mut cfg = ModelConfig::new(Variant::Backbone, [4, 3, 5]);
    cfg.encoder_widths = vec![];
    cfg.kernel = 1;
    cfg.plane_channels = 1;
    let mut m = Model::<f64>::new(cfg.clone()).unwrap();
    for k in ["x", "y", "z"] {
        m.params.set_by_name(&format!("enc_{k}.0.w"), Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        m.params.set_by_name(&format!("lambda_{k}"), Tensor::full(&[1], 1.0)).unwrap();
    }
    m.params.set_by_name("head.w", Tensor::full(&[1, 1, 1, 1, 1], 1.0)).unwrap();
    let y = m.predict(&Tensor::full(&[1, 4, 3, 5], 0.7)).unwrap();
    assert!(y.data().iter().all(|&v| (v - 2.1).abs() < 1e-12));
}

#[test]
fn zero_input_with_zero_biases_gives_zero_logits() {
    for cfg in config_zoo([4, 4, 4]) {
        if cfg.pe.mode == PeMode::Coordconv {
            // Coordinate channels are nonzero by construction.
            continue;
        }
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        let y = m.predict(&Tensor::zeros(&[cfg.in_channels, 4, 4, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "{} {:?}", cfg.label(), cfg.pe.mode);
    }
}

/// `out[p(a)] = in[a]` for a permutation `p` of the three spatial axes.
fn permute_volume(t: &Tensor<f64>, p: [usize; 3]) -> Tensor<f64> {
    t.permute(&[0, 1 + p[0], 1 + p[1], 1 + p[2]]).unwrap()
}

#[test]
fn shared_symmetric_encoders_make_the_backbone_axis_equivariant() {
    let mut cfg = ModelConfig::new(Variant::Backbone, [5, 5, 5]);
    cfg.shared_encoders = true;
    let mut m = Model::<f64>::new(cfg.clone()).unwrap();
    // Equal λ holds at init. Kernels must commute with plane transposition,
    // since permuting axes can transpose a plane.
    let names: Vec<String> = m.params.iter().filter(|(n, _)| n.starts_with("enc.") && n.ends_with(".w")).map(|(n, _)| n.to_string()).collect();
    for n in names {
        let w = m.params.by_name(&n).unwrap().clone();
        let wt = w.permute(&[0, 1, 3, 2]).unwrap();
        let sym = Tensor::from_fn(w.shape(), |i| 0.5 * (w.at(i) + wt.at(i)));
        m.params.set_by_name(&n, sym).unwrap();
    }
    let x = input(&cfg, 21);
    let y = m.predict(&x).unwrap();
    for p in [[1, 0, 2], [0, 2, 1], [2, 1, 0], [1, 2, 0], [2, 0, 1]] {
        let yp = m.predict(&permute_volume(&x, p)).unwrap();
        assert!(yp.max_rel_diff(&permute_volume(&y, p), 1.0) < 1e-12, "{p:?}");
    }
}

#[test]
fn end_to_end_hybrid_gradients_in_every_pe_mode() {
    for mode in PeMode::ALL {
        let mut cfg = ModelConfig::new(Variant::Hybrid, [5, 5, 5]).with_pe(mode);
        cfg.encoder_widths = vec![3];
        cfg.plane_channels = 3;
        cfg.volume_widths = vec![2];
        cfg.pe.model_dim = 8;
        cfg.pe.heads = 2;
        let mut m = Model::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut m, 13);
        let x = input::<f64>(&cfg, 3);
        let target = random::<f64>(&[1, 5, 5, 5], 4).map(|v| 0.5 + 0.5 * v);
        let mut inputs = vec![x];
        inputs.extend(m.params.iter().map(|(_, t)| t.clone()));
        let f = |tape: &mut Tape<f64>, vars: &[triplane::Var]| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let fwd = m.forward(tape, &bound, vars[0])?;
            m.loss(tape, fwd.output, triplane::model::Target::Occupancy(&target))
        };
        let opts = GradCheck {
            max_coords: Some(12),
            seed: 1,
            ..GradCheck::default()
        };
        let report = grad_check(f, &inputs, &opts).unwrap();
        assert!(report.passed, "{mode:?}: {report:?}");
    }
}

#[test]
fn classification_head_gradients() {
    let cfg = ModelConfig::new(Variant::Hybrid, [4, 4, 4]).with_task(Task::Classify);
    let mut m = Model::<f64>::new(cfg.clone()).unwrap();
    scramble(&mut m, 17);
    let mut inputs = vec![input::<f64>(&cfg, 5)];
    inputs.extend(m.params.iter().map(|(_, t)| t.clone()));
    let f = |tape: &mut Tape<f64>, vars: &[triplane::Var]| {
        let bound = Bound::from_vars(vars[1..].to_vec());
        let fwd = m.forward(tape, &bound, vars[0])?;
        m.loss(tape, fwd.output, triplane::model::Target::Label(2))
    };
    let opts = GradCheck {
        max_coords: Some(12),
        ..GradCheck::default()
    };
    let report = grad_check(f, &inputs, &opts).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn stage_meter_attributes_every_flop() {
    let cfg = ModelConfig::new(Variant::Hybrid, [8, 8, 8]).with_pe(PeMode::Transformer);
    let m = Model::<f32>::new(cfg.clone()).unwrap();
    let r = run(&m, &input(&cfg, 0), Route::Folded);
    assert_eq!(r.fwd.stages.total(), r.tape.flops());
    assert_eq!(r.fwd.stages.get(Stage::Dense), 0);
    for s in [Stage::Projection, Stage::PositionalEncoding, Stage::PlaneEncoders, Stage::Lifting, Stage::VolumeBranch, Stage::Fusion, Stage::Head] {
        assert!(r.fwd.stages.get(s) > 0, "{s:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::new(Variant::Hybrid, [4, 5, 6]).with_pe(PeMode::Mlp);
    let mut m = Model::<f32>::new(cfg.clone()).unwrap();
    scramble(&mut m, 8);
    let path = dir.path().join("m.json");
    m.checkpoint().save(&path).unwrap();
    let back = Model::<f32>::from_checkpoint(&triplane::model::Checkpoint::load(&path).unwrap()).unwrap();
    let x = input(&cfg, 1);
    assert_eq!(m.predict(&x).unwrap().data(), back.predict(&x).unwrap().data());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let m = Model::<f32>::new(ModelConfig::new(Variant::Backbone, [4, 4, 4])).unwrap();
    assert!(m.predict(&Tensor::zeros(&[1, 4, 4, 5])).is_err());
}
