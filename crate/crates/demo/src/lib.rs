//! Browser demo: project a generated shape onto three planes, lift the planes
//! back into a volume, and compare the analytic cost of the model variants.
//!
//! The plain functions are what the tests exercise; the `Demo` and `costs`
//! exports only convert errors for JavaScript.

use serde::Serialize;
use triplane::backbone::{lift_and_fuse, project_planes, TriPlaneSet};
use triplane::config::{ModelConfig, PeMode};
use triplane::flops::count_stages;
use triplane::model::Stage;
use triplane::tasks::metrics::iou;
use triplane::tasks::shapes::{gen_shapes, ShapeClass, THRESHOLD};
use triplane::{Error, Result, Tape, Tensor};
use wasm_bindgen::prelude::*;

/// Largest side the page offers; keeps a lift under a few milliseconds.
pub const MAX_DIM: usize = 64;

pub fn parse_class(name: &str) -> Result<ShapeClass> {
    ShapeClass::ALL
        .into_iter()
        .find(|c| format!("{c:?}").eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Config(format!("unknown shape {name:?}; expected sphere, box, torus or cone")))
}

/// A cubic shape with its projections and the equal-weight lift of those projections.
pub struct View {
    pub d: usize,
    pub volume: Tensor<f32>,
    pub planes: [Tensor<f32>; 3],
    pub lifted: Tensor<f32>,
}

impl View {
    pub fn new(class: ShapeClass, d: usize, seed: u64) -> Result<View> {
        if d > MAX_DIM {
            return Err(Error::Config(format!("side {d} exceeds {MAX_DIM}")));
        }
        let volume = gen_shapes(seed, 1, [d; 3], &[class])?.remove(0).volume;
        let mut tape = Tape::inference();
        let x = tape.constant(&volume)?;
        let planes = project_planes(&mut tape, x)?;
        let third = tape.constant(&Tensor::full(&[1], 1.0 / 3.0))?;
        let set = TriPlaneSet {
            features: planes,
            lambdas: [third; 3],
        };
        let lifted = lift_and_fuse(&mut tape, &set, [d; 3])?;
        Ok(View {
            d,
            planes: planes.map(|p| tape.value(p).clone()),
            lifted: tape.value(lifted).clone(),
            volume,
        })
    }

    /// Row-major `d×d` plane `k` (x, y or z collapsed).
    pub fn plane(&self, k: usize) -> &[f32] {
        self.planes[k.min(2)].data()
    }

    /// The `d×d` cut at depth `i` along the first axis.
    pub fn volume_slice(&self, i: usize) -> &[f32] {
        cut(&self.volume, self.d, i)
    }

    pub fn lifted_slice(&self, i: usize) -> &[f32] {
        cut(&self.lifted, self.d, i)
    }

    /// IoU between the occupied voxels and the lift thresholded at `t`.
    pub fn lift_iou(&self, t: f32) -> Result<f64> {
        let bin = |v: &Tensor<f32>, t: f32| v.map(|x| if x > t { 1.0 } else { 0.0 });
        iou(&bin(&self.lifted, t), &bin(&self.volume, THRESHOLD))
    }
}

fn cut(t: &Tensor<f32>, d: usize, i: usize) -> &[f32] {
    let i = i.min(d - 1);
    &t.data()[i * d * d..(i + 1) * d * d]
}

#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub label: String,
    pub stages: Vec<(&'static str, u64)>,
    pub total: u64,
}

/// Per-stage forward FLOPs of the four presets at side `d`; PE is on for the tri-plane variants.
pub fn cost_rows(d: usize, pe: PeMode) -> Result<Vec<CostRow>> {
    ["backbone", "hybrid-1/4", "hybrid-1/2", "dense3d"]
        .into_iter()
        .map(|name| {
            let mut cfg = ModelConfig::preset(name, [d; 3])?;
            if name != "dense3d" {
                cfg = cfg.with_pe(pe);
            }
            let s = count_stages(&cfg, [d; 3])?;
            Ok(CostRow {
                label: cfg.label(),
                stages: Stage::ALL.iter().map(|&st| (st.name(), s.get(st))).filter(|&(_, f)| f > 0).collect(),
                total: s.total(),
            })
        })
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(View);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(class: &str, d: usize, seed: u32) -> std::result::Result<Demo, JsError> {
        let class = parse_class(class).map_err(js)?;
        View::new(class, d, seed as u64).map(Demo).map_err(js)
    }

    pub fn side(&self) -> usize {
        self.0.d
    }

    pub fn plane(&self, k: usize) -> Vec<f32> {
        self.0.plane(k).to_vec()
    }

    pub fn volume_slice(&self, i: usize) -> Vec<f32> {
        self.0.volume_slice(i).to_vec()
    }

    pub fn lifted_slice(&self, i: usize) -> Vec<f32> {
        self.0.lifted_slice(i).to_vec()
    }

    pub fn lift_iou(&self, t: f32) -> std::result::Result<f64, JsError> {
        self.0.lift_iou(t).map_err(js)
    }
}

/// JSON array of [`CostRow`]; `pe` is `none`, `sinusoidal`, `mlp` or `transformer`.
#[wasm_bindgen]
pub fn costs(d: usize, pe: &str) -> std::result::Result<String, JsError> {
    let pe: PeMode = serde_json::from_value(serde_json::Value::String(pe.into())).map_err(|e| JsError::new(&e.to_string()))?;
    let rows = cost_rows(d, pe).map_err(js)?;
    Ok(serde_json::to_string(&rows).expect("plain data serializes"))
}
