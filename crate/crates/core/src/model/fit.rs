//! Closed-form ridge fit of the linear heads on a clean split, trunk frozen.

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;

use super::{sample_input, CellTargets, LossTarget, SurrogateModel, CELL_OUTPUTS, FEATURES, GRID, SEG_CLASSES};
use crate::dataset::Sample;
use crate::error::{Error, Result};

const DIM: usize = FEATURES + 1;
/// Pixel heads are fitted on every `PIXEL_STRIDE`-th row and column.
const PIXEL_STRIDE: usize = 4;
const LOGIT_TARGET: f64 = 4.0;
const OBJECTNESS_TARGET: f64 = 3.0;

type Gram = SMatrix<f64, DIM, DIM>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub pixel_rows: usize,
    pub cell_rows: usize,
    pub occupied_cells: usize,
}

/// Normal equations `sum x x^T` and `sum x y^T` for a multi-output regression.
#[derive(Clone)]
struct Normal {
    xtx: Gram,
    xty: Vec<SVector<f64, DIM>>,
    rows: usize,
}

impl Normal {
    fn new(outs: usize) -> Self {
        Self {
            xtx: Gram::zeros(),
            xty: vec![SVector::zeros(); outs],
            rows: 0,
        }
    }

    fn add(&mut self, feat: &[f64; FEATURES], y: &[f64]) {
        let mut x = SVector::<f64, DIM>::zeros();
        for f in 0..FEATURES {
            x[f] = feat[f];
        }
        x[FEATURES] = 1.0;
        self.xtx += x * x.transpose();
        for (acc, &v) in self.xty.iter_mut().zip(y) {
            *acc += x * v;
        }
        self.rows += 1;
    }

    fn merge(&mut self, other: &Normal) {
        self.xtx += other.xtx;
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += b;
        }
        self.rows += other.rows;
    }

    /// Ridge solution per output as `(weights, bias)`; the bias is not penalised.
    fn solve(&self, lambda: f64) -> Option<Vec<([f64; FEATURES], f64)>> {
        if self.rows == 0 {
            return None;
        }
        let mut a = self.xtx;
        for f in 0..FEATURES {
            a[(f, f)] += lambda * self.rows as f64;
        }
        let chol = a.cholesky()?;
        Some(
            self.xty
                .iter()
                .map(|b| {
                    let beta = chol.solve(b);
                    (std::array::from_fn(|f| beta[f]), beta[FEATURES])
                })
                .collect(),
        )
    }
}

fn inverse_softplus(d: f64) -> f64 {
    d + (-(-d).exp_m1()).ln()
}

struct Partial {
    pixel: Normal,
    objectness: Normal,
    occupied: Normal,
}

fn accumulate(model: &SurrogateModel, sample: &Sample) -> Result<Partial> {
    let input = sample_input(sample)?;
    let target = LossTarget::from_sample(sample)?;
    let full = model.full_rect();
    let trunk = model.trunk(&input, full);
    let pixel_outs = model.pixel_head.as_ref().map_or(0, |h| h.outs);
    let mut part = Partial {
        pixel: Normal::new(pixel_outs),
        objectness: Normal::new(1),
        occupied: Normal::new(CELL_OUTPUTS - 1),
    };
    let w = model.width as usize;
    if model.pixel_head.is_some() {
        for y in (0..model.height as usize).step_by(PIXEL_STRIDE) {
            for x in (0..w).step_by(PIXEL_STRIDE) {
                let i = y * w + x;
                let feat = trunk.feature(i);
                match &target {
                    LossTarget::Semantic { labels, .. } => {
                        let mut t = [0.0; SEG_CLASSES];
                        t[labels[i] as usize] = LOGIT_TARGET;
                        part.pixel.add(&feat, &t);
                    }
                    LossTarget::Depth { depth, .. } | LossTarget::Stereo { depth, .. } => {
                        if depth.is_valid(i) {
                            part.pixel.add(&feat, &[inverse_softplus(f64::from(depth.depth_m[i]))]);
                        }
                    }
                    LossTarget::Detection { .. } => {}
                }
            }
        }
    }
    let cells: Option<&CellTargets> = match &target {
        LossTarget::Detection { cells } | LossTarget::Stereo { cells, .. } => Some(cells),
        _ => None,
    };
    if let (Some(t), Some(_)) = (cells, &model.cell_head) {
        let grid = model.grid();
        for j in 0..GRID {
            for i in 0..GRID {
                let c = (j * GRID + i) as usize;
                let pooled = model.pooled(&trunk, grid.cell_rect(i, j));
                let obj = if t.occupied[c] { OBJECTNESS_TARGET } else { -OBJECTNESS_TARGET };
                part.objectness.add(&pooled, &[obj]);
                if t.occupied[c] {
                    let mut y = [0.0; CELL_OUTPUTS - 1];
                    y[..4].copy_from_slice(&t.offsets[c]);
                    y[4 + t.class[c]] = LOGIT_TARGET;
                    part.occupied.add(&pooled, &y);
                }
            }
        }
    }
    Ok(part)
}

/// Fits the heads by ridge regression on trunk features of `samples`:
/// one-hot logits for segmentation, inverse-softplus depth for depth heads,
/// and objectness/offset/class targets per grid cell for detection.
/// Outputs with no training rows keep their current weights.
pub fn fit_heads(model: &mut SurrogateModel, samples: &[Sample], lambda: f64) -> Result<FitReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge penalty must be finite and >= 0, got {lambda}")));
    }
    for s in samples {
        if s.annotation.task() != model.task || (s.width, s.height) != (model.width, model.height) {
            return Err(Error::DimensionMismatch(format!(
                "sample {} ({} {}x{}) does not match the {} {}x{} model",
                s.name,
                s.annotation.task(),
                s.width,
                s.height,
                model.task,
                model.width,
                model.height
            )));
        }
    }
    let frozen = &*model;
    let parts = samples
        .par_iter()
        .map(|s| accumulate(frozen, s))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Partial {
        pixel: Normal::new(frozen.pixel_head.as_ref().map_or(0, |h| h.outs)),
        objectness: Normal::new(1),
        occupied: Normal::new(CELL_OUTPUTS - 1),
    };
    for p in &parts {
        total.pixel.merge(&p.pixel);
        total.objectness.merge(&p.objectness);
        total.occupied.merge(&p.occupied);
    }
    let report = FitReport {
        pixel_rows: total.pixel.rows,
        cell_rows: total.objectness.rows,
        occupied_cells: total.occupied.rows,
    };
    if let (Some(h), Some(sol)) = (model.pixel_head.as_mut(), total.pixel.solve(lambda)) {
        for (o, (w, b)) in sol.into_iter().enumerate() {
            h.weights[o * FEATURES..(o + 1) * FEATURES].copy_from_slice(&w);
            h.bias[o] = b;
        }
    }
    if let Some(h) = model.cell_head.as_mut() {
        if let Some(sol) = total.objectness.solve(lambda) {
            let (w, b) = sol[0];
            h.weights[..FEATURES].copy_from_slice(&w);
            h.bias[0] = b;
        }
        if let Some(sol) = total.occupied.solve(lambda) {
            for (k, (w, b)) in sol.into_iter().enumerate() {
                let o = k + 1;
                h.weights[o * FEATURES..(o + 1) * FEATURES].copy_from_slice(&w);
                h.bias[o] = b;
            }
        }
    }
    Ok(report)
}
