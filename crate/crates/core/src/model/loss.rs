//! Task losses and their gradients with respect to head outputs.
//!
//! Segmentation: mean pixel cross-entropy. Depth: mean squared log error over
//! valid pixels. Detection: mean objectness BCE over all grid cells plus
//! smooth-L1 on the four box offsets, averaged over occupied cells. Stereo:
//! depth plus detection.

use super::{sigmoid, softplus, CellGrid, HeadOutputs, SurrogateModel, TaskPrediction, CELL_OUTPUTS, MIN_DEPTH_M, SEG_CLASSES};
use crate::annotate::{DepthMap, TaskAnnotation};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::render::PixelRect;
use crate::scene::{ObjectClass, Task};

/// Per-cell detection targets, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    pub occupied: Vec<bool>,
    /// `(dx, dy, dw, dh)` of the assigned box.
    pub offsets: Vec<[f64; 4]>,
    pub class: Vec<usize>,
    pub occupied_count: usize,
}

impl CellTargets {
    /// Each box is assigned to the cell holding its centre; a cell with
    /// several centres keeps the largest box (earliest on ties).
    pub fn from_boxes(grid: &CellGrid, boxes: &[(ObjectClass, [f64; 4])]) -> Self {
        let n = grid.count();
        let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
        for (k, (_, b)) in boxes.iter().enumerate() {
            if b[2] <= 0.0 || b[3] <= 0.0 {
                continue;
            }
            let cx = (b[0] + b[2] / 2.0).clamp(0.0, f64::from(grid.width) - 1e-9);
            let cy = (b[1] + b[3] / 2.0).clamp(0.0, f64::from(grid.height) - 1e-9);
            let cell = grid.cell_of_y(cy as u32) as usize * super::GRID as usize + grid.cell_of_x(cx as u32) as usize;
            let area = b[2] * b[3];
            if best[cell].is_none_or(|(a, _)| area > a) {
                best[cell] = Some((area, k));
            }
        }
        let mut out = CellTargets {
            occupied: vec![false; n],
            offsets: vec![[0.0; 4]; n],
            class: vec![0; n],
            occupied_count: 0,
        };
        for (cell, slot) in best.iter().enumerate() {
            let Some((_, k)) = slot else { continue };
            let (class, b) = boxes[*k];
            let r = grid.cell_rect(cell as u32 % super::GRID, cell as u32 / super::GRID);
            let (cw, ch) = (f64::from(r.width), f64::from(r.height));
            let ccx = f64::from(r.x0) + cw / 2.0;
            let ccy = f64::from(r.y0) + ch / 2.0;
            out.occupied[cell] = true;
            out.offsets[cell] = [
                (b[0] + b[2] / 2.0 - ccx) / cw,
                (b[1] + b[3] / 2.0 - ccy) / ch,
                (b[2] / cw).ln(),
                (b[3] / ch).ln(),
            ];
            out.class[cell] = class.index();
            out.occupied_count += 1;
        }
        out
    }
}

/// Ground truth in the form the losses consume.
#[derive(Debug, Clone, PartialEq)]
pub enum LossTarget {
    Semantic { width: u32, height: u32, labels: Vec<u8> },
    Depth { depth: DepthMap, valid: usize },
    Detection { cells: CellTargets },
    Stereo { depth: DepthMap, valid: usize, cells: CellTargets },
}

impl LossTarget {
    pub fn task(&self) -> Task {
        match self {
            LossTarget::Semantic { .. } => Task::SemanticSegmentation,
            LossTarget::Depth { .. } => Task::MonocularDepth,
            LossTarget::Detection { .. } => Task::Detection2D,
            LossTarget::Stereo { .. } => Task::StereoDetection3D,
        }
    }

    /// Stereo targets need the dense left depth in `aux_depth`.
    pub fn from_annotation(annotation: &TaskAnnotation, aux_depth: Option<&DepthMap>, grid: &CellGrid) -> Result<Self> {
        Ok(match annotation {
            TaskAnnotation::Semantic(m) => LossTarget::Semantic {
                width: m.width,
                height: m.height,
                labels: m.labels.clone(),
            },
            TaskAnnotation::Depth(d) => LossTarget::Depth {
                valid: d.valid_count(),
                depth: d.clone(),
            },
            TaskAnnotation::Boxes2D(boxes) => LossTarget::Detection {
                cells: CellTargets::from_boxes(grid, &boxes.iter().map(|b| (b.class, b.bbox)).collect::<Vec<_>>()),
            },
            TaskAnnotation::Boxes3D(boxes) => {
                let depth = aux_depth
                    .ok_or_else(|| Error::InvalidArgument("stereo targets need a dense depth map".into()))?
                    .clone();
                let b2: Vec<_> = boxes
                    .iter()
                    .map(|b| {
                        let [l, t, r, btm] = b.bbox2d;
                        (b.class, [l, t, r - l, btm - t])
                    })
                    .collect();
                LossTarget::Stereo {
                    valid: depth.valid_count(),
                    depth,
                    cells: CellTargets::from_boxes(grid, &b2),
                }
            }
        })
    }

    pub fn from_sample(sample: &Sample) -> Result<Self> {
        let grid = CellGrid {
            width: sample.width,
            height: sample.height,
        };
        Self::from_annotation(&sample.annotation, sample.aux_depth.as_ref(), &grid)
    }
}

#[inline]
fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// BCE with logits and its derivative.
#[inline]
fn bce(s: f64, y: bool) -> (f64, f64) {
    let t = if y { 1.0 } else { 0.0 };
    (softplus(s) - t * s, sigmoid(s) - t)
}

fn seg_term(logits: impl Fn(usize) -> f64, label: u8, inv_n: f64, grad: Option<&mut [f64; SEG_CLASSES]>) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for k in 0..SEG_CLASSES {
        m = m.max(logits(k));
    }
    let mut z = 0.0;
    for k in 0..SEG_CLASSES {
        z += (logits(k) - m).exp();
    }
    let lse = m + z.ln();
    if let Some(g) = grad {
        for k in 0..SEG_CLASSES {
            g[k] = ((logits(k) - lse).exp() - if k == label as usize { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (lse - logits(label as usize)) * inv_n
}

fn depth_term(pred: f64, gt: f32, inv_v: f64) -> (f64, f64) {
    let r = pred.ln() - f64::from(gt).ln();
    (r * r * inv_v, 2.0 * r * inv_v / pred)
}

fn cell_terms(values: &[f64; CELL_OUTPUTS], t: &CellTargets, cell: usize, total: usize) -> (f64, [f64; CELL_OUTPUTS]) {
    let mut g = [0.0; CELL_OUTPUTS];
    let inv_g = 1.0 / total as f64;
    let (l, d) = bce(values[0], t.occupied[cell]);
    let mut loss = l * inv_g;
    g[0] = d * inv_g;
    if t.occupied[cell] {
        let inv_k = 1.0 / t.occupied_count as f64;
        for k in 0..4 {
            let (l, d) = smooth_l1(values[1 + k] - t.offsets[cell][k]);
            loss += l * inv_k;
            g[1 + k] = d * inv_k;
        }
    }
    (loss, g)
}

fn check_shape(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!("{what}: {got} values, expected {want}")));
    }
    Ok(())
}

/// Loss of a full-image prediction against its target.
pub fn task_loss(pred: &TaskPrediction, target: &LossTarget) -> Result<f64> {
    if pred.task() != target.task() {
        return Err(Error::TaskMismatch {
            expected: pred.task(),
            actual: target.task(),
        });
    }
    let depth_loss = |depth_m: &[f64], gt: &DepthMap, valid: usize| -> Result<f64> {
        check_shape("depth", depth_m.len(), gt.depth_m.len())?;
        if valid == 0 {
            return Ok(0.0);
        }
        let inv_v = 1.0 / valid as f64;
        Ok((0..depth_m.len())
            .filter(|&i| gt.is_valid(i))
            .map(|i| depth_term(depth_m[i], gt.depth_m[i], inv_v).0)
            .sum())
    };
    let det_loss = |values: &[[f64; CELL_OUTPUTS]], t: &CellTargets| -> Result<f64> {
        check_shape("cells", values.len(), t.occupied.len())?;
        Ok(values
            .iter()
            .enumerate()
            .map(|(c, v)| cell_terms(v, t, c, values.len()).0)
            .sum())
    };
    Ok(match (pred, target) {
        (TaskPrediction::Segmentation { width, height, logits }, LossTarget::Semantic { labels, .. }) => {
            let n = *width as usize * *height as usize;
            check_shape("labels", labels.len(), n)?;
            check_shape("logits", logits.len(), n * SEG_CLASSES)?;
            let inv_n = 1.0 / n as f64;
            (0..n)
                .map(|i| seg_term(|k| logits[k * n + i], labels[i], inv_n, None))
                .sum()
        }
        (TaskPrediction::Depth { depth_m, .. }, LossTarget::Depth { depth, valid }) => depth_loss(depth_m, depth, *valid)?,
        (TaskPrediction::Detection { cells, .. }, LossTarget::Detection { cells: t }) => det_loss(&cells.values, t)?,
        (TaskPrediction::Stereo { depth_m, cells, .. }, LossTarget::Stereo { depth, valid, cells: t }) => {
            depth_loss(depth_m, depth, *valid)? + det_loss(&cells.values, t)?
        }
        _ => unreachable!("tasks checked above"),
    })
}

/// Loss terms inside `rect` and gradients for the pixel-head outputs
/// (`outs x area`) and for each cell in `heads.cells`.
pub(crate) fn window_loss(
    model: &SurrogateModel,
    heads: &HeadOutputs,
    rect: &PixelRect,
    target: &LossTarget,
) -> Result<(f64, Vec<f64>, Vec<[f64; CELL_OUTPUTS]>)> {
    let n = rect.area();
    let (w, h) = (model.width as usize, model.height as usize);
    let full_index = |i: usize| (rect.y0 as usize + i / rect.width as usize) * w + rect.x0 as usize + i % rect.width as usize;
    let mut g_pixel = vec![0.0; heads.pixel.len()];
    let mut g_cells = vec![[0.0; CELL_OUTPUTS]; heads.cells.len()];
    let mut loss = 0.0;

    let depth_part = |depth: &DepthMap, valid: usize, g_pixel: &mut [f64]| -> Result<f64> {
        check_shape("depth", depth.depth_m.len(), w * h)?;
        if valid == 0 {
            return Ok(0.0);
        }
        let inv_v = 1.0 / valid as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let fi = full_index(i);
            if !depth.is_valid(fi) {
                continue;
            }
            let z = heads.pixel[i];
            let sp = softplus(z);
            let pred = sp.max(MIN_DEPTH_M);
            let (l, dl) = depth_term(pred, depth.depth_m[fi], inv_v);
            acc += l;
            g_pixel[i] = if sp >= MIN_DEPTH_M { dl * sigmoid(z) } else { 0.0 };
        }
        Ok(acc)
    };
    let cell_part = |t: &CellTargets, g_cells: &mut [[f64; CELL_OUTPUTS]]| -> f64 {
        let grid = model.grid();
        let mut acc = 0.0;
        for (k, &(ci, cj)) in heads.cells.iter().enumerate() {
            let cell = (cj * super::GRID + ci) as usize;
            let (l, g) = cell_terms(&heads.cell_values[k], t, cell, grid.count());
            acc += l;
            g_cells[k] = g;
        }
        acc
    };

    match target {
        LossTarget::Semantic { labels, .. } => {
            check_shape("labels", labels.len(), w * h)?;
            let inv_n = 1.0 / (w * h) as f64;
            let mut g = [0.0; SEG_CLASSES];
            for i in 0..n {
                loss += seg_term(|k| heads.pixel[k * n + i], labels[full_index(i)], inv_n, Some(&mut g));
                for k in 0..SEG_CLASSES {
                    g_pixel[k * n + i] = g[k];
                }
            }
        }
        LossTarget::Depth { depth, valid } => loss += depth_part(depth, *valid, &mut g_pixel)?,
        LossTarget::Detection { cells } => loss += cell_part(cells, &mut g_cells),
        LossTarget::Stereo { depth, valid, cells } => {
            loss += depth_part(depth, *valid, &mut g_pixel)?;
            loss += cell_part(cells, &mut g_cells);
        }
    }
    Ok((loss, g_pixel, g_cells))
}
