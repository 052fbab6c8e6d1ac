//! Small differentiable task models used as white-box victims.
//!
//! Every model shares one trunk: a 5x5 convolution with 8 filters, zero
//! padding at the image border, and a leaky ReLU. Heads are linear maps of the
//! trunk features, per pixel (segmentation, depth) or per grid cell on the
//! mean-pooled features (detection). All arithmetic is f64 and every sum runs
//! in a fixed order, so outputs are bit-stable.
//!
//! Gradients are computed for a window: the loss terms whose receptive fields
//! touch the window are evaluated (normalised by the full-image counts) and
//! back-propagated to the input. With the full image as window this is the
//! exact gradient of the full loss; for a smaller window it is still exact for
//! every input pixel the window's margin was built around.

mod fit;
mod loss;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{Box3D, DepthMap, SemanticMap};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, CameraIntrinsics, Eye};
use crate::render::{FrameBuffers, PixelRect};
use crate::rng::CounterRng;
use crate::scene::{ObjectClass, Task, TaskProfile};

pub use fit::{fit_heads, FitReport};
pub use loss::{task_loss, CellTargets, LossTarget};

pub const FEATURES: usize = 8;
pub const KERNEL: usize = 5;
/// Half-width of the convolution window.
pub const RADIUS: u32 = 2;
pub const LEAK: f64 = 0.1;
/// The detection grid has this many cells per side.
pub const GRID: u32 = 16;
/// Horizontal shift between the left image and the right image in the stereo
/// difference channels.
pub const STEREO_SHIFT: u32 = 8;
pub const SCORE_THRESHOLD: f64 = 0.3;
pub const NMS_IOU: f64 = 0.5;
/// Per-cell detection outputs: objectness, dx, dy, dw, dh, three class logits.
pub const CELL_OUTPUTS: usize = 8;
pub const SEG_CLASSES: usize = crate::render::label::NUM_CLASSES;
/// Depth predictions never fall below this.
pub const MIN_DEPTH_M: f64 = 1e-6;
const INIT_SCALE: f64 = 0.1;

pub fn input_channels(task: Task) -> usize {
    if task.is_stereo() {
        9
    } else {
        3
    }
}

#[inline]
fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

#[inline]
fn lrelu_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAK
    }
}

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Linear map from the 8 trunk features to `outs` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub outs: usize,
    /// `outs x FEATURES`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Head {
    fn init(outs: usize, rng: &mut CounterRng) -> Self {
        Self {
            outs,
            weights: (0..outs * FEATURES).map(|_| rng.uniform(-INIT_SCALE, INIT_SCALE)).collect(),
            bias: (0..outs).map(|_| rng.uniform(-INIT_SCALE, INIT_SCALE)).collect(),
        }
    }

    #[inline]
    fn apply(&self, o: usize, feat: &[f64; FEATURES]) -> f64 {
        let w = &self.weights[o * FEATURES..(o + 1) * FEATURES];
        let mut s = self.bias[o];
        for f in 0..FEATURES {
            s += w[f] * feat[f];
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub task: Task,
    pub weight_seed: u64,
    pub width: u32,
    pub height: u32,
    pub in_channels: usize,
    /// `FEATURES x in_channels x 5 x 5`.
    pub conv_weights: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// Segmentation logits or the depth pre-activation.
    pub pixel_head: Option<Head>,
    /// Detection outputs per grid cell.
    pub cell_head: Option<Head>,
    /// Camera used to lift stereo detections to 3D.
    pub intrinsics: CameraIntrinsics,
}

/// Deterministic initial weights for the task's default image size.
pub fn init_model(task: Task, weight_seed: u64) -> SurrogateModel {
    init_model_for(&TaskProfile::for_task(task), weight_seed)
}

pub fn init_model_for(profile: &TaskProfile, weight_seed: u64) -> SurrogateModel {
    let task = profile.task;
    let c = input_channels(task);
    let mut rng = CounterRng::new(weight_seed, "surrogate-weights", 0);
    let conv_weights = (0..FEATURES * c * KERNEL * KERNEL)
        .map(|_| rng.uniform(-INIT_SCALE, INIT_SCALE))
        .collect();
    let conv_bias = (0..FEATURES).map(|_| rng.uniform(-INIT_SCALE, INIT_SCALE)).collect();
    let pixel_head = match task {
        Task::SemanticSegmentation => Some(Head::init(SEG_CLASSES, &mut rng)),
        Task::MonocularDepth | Task::StereoDetection3D => Some(Head::init(1, &mut rng)),
        Task::Detection2D => None,
    };
    let cell_head = matches!(task, Task::Detection2D | Task::StereoDetection3D)
        .then(|| Head::init(CELL_OUTPUTS, &mut rng));
    SurrogateModel {
        task,
        weight_seed,
        width: profile.width,
        height: profile.height,
        in_channels: c,
        conv_weights,
        conv_bias,
        pixel_head,
        cell_head,
        intrinsics: profile.intrinsics(),
    }
}

/// Planar input channels covering `rect` of the full image.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPlanes {
    pub rect: PixelRect,
    pub channels: usize,
    /// `channels x height x width`.
    pub data: Vec<f64>,
}

impl InputPlanes {
    pub fn zeros(rect: PixelRect, channels: usize) -> Self {
        Self {
            rect,
            channels,
            data: vec![0.0; channels * rect.area()],
        }
    }

    /// From interleaved RGB covering `rect`.
    pub fn from_rgb(rgb: &[f64], rect: PixelRect) -> Self {
        let n = rect.area();
        assert_eq!(rgb.len(), 3 * n, "rgb length does not match the rectangle");
        let mut out = Self::zeros(rect, 3);
        for i in 0..n {
            for c in 0..3 {
                out.data[c * n + i] = rgb[3 * i + c];
            }
        }
        out
    }

    pub fn from_buffers(fb: &FrameBuffers) -> Self {
        Self::from_rgb(&fb.rgb, fb.rect())
    }

    /// Stereo channels over `left.rect()`: left RGB, right RGB, and
    /// `left(x) - right(x - 8)` (right taken as 0 left of the image). `right`
    /// must cover `left.rect()` extended 8 pixels to the left (clipped at 0).
    pub fn stereo(left: &FrameBuffers, right: &FrameBuffers) -> Self {
        let rect = left.rect();
        let need = stereo_right_rect(&rect);
        assert!(
            right.x0 <= need.x0
                && right.y0 <= need.y0
                && right.x0 + right.width >= need.x0 + need.width
                && right.y0 + right.height >= need.y0 + need.height,
            "right buffers do not cover the shifted window"
        );
        let n = rect.area();
        let mut out = Self::zeros(rect, 9);
        let rw = right.width as usize;
        for y in 0..rect.height as usize {
            let gy = rect.y0 as usize + y;
            let ry = gy - right.y0 as usize;
            for x in 0..rect.width as usize {
                let gx = rect.x0 as usize + x;
                let i = y * rect.width as usize + x;
                let ri = ry * rw + (gx - right.x0 as usize);
                for c in 0..3 {
                    let l = left.rgb[3 * i + c];
                    let r = right.rgb[3 * ri + c];
                    let shifted = if gx >= STEREO_SHIFT as usize {
                        right.rgb[3 * (ri - STEREO_SHIFT as usize) + c]
                    } else {
                        0.0
                    };
                    out.data[c * n + i] = l;
                    out.data[(3 + c) * n + i] = r;
                    out.data[(6 + c) * n + i] = l - shifted;
                }
            }
        }
        out
    }

    /// Splits a stereo gradient into interleaved upstream gradients for the
    /// left buffers (over `self.rect`) and the right buffers (over `right_rect`).
    pub fn stereo_backward(&self, right_rect: PixelRect) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(self.channels, 9);
        let rect = self.rect;
        let n = rect.area();
        let mut gl = vec![0.0; 3 * n];
        let mut gr = vec![0.0; 3 * right_rect.area()];
        let rw = right_rect.width as usize;
        for y in 0..rect.height as usize {
            let gy = rect.y0 as usize + y;
            let ry = gy - right_rect.y0 as usize;
            for x in 0..rect.width as usize {
                let gx = rect.x0 as usize + x;
                let i = y * rect.width as usize + x;
                let ri = ry * rw + (gx - right_rect.x0 as usize);
                for c in 0..3 {
                    let gd = self.data[(6 + c) * n + i];
                    gl[3 * i + c] = self.data[c * n + i] + gd;
                    gr[3 * ri + c] += self.data[(3 + c) * n + i];
                    if gx >= STEREO_SHIFT as usize {
                        gr[3 * (ri - STEREO_SHIFT as usize) + c] -= gd;
                    }
                }
            }
        }
        (gl, gr)
    }

    /// Interleaved RGB view of a 3-channel gradient.
    pub fn to_interleaved(&self) -> Vec<f64> {
        let n = self.rect.area();
        let mut out = vec![0.0; self.channels * n];
        for i in 0..n {
            for c in 0..self.channels {
                out[self.channels * i + c] = self.data[c * n + i];
            }
        }
        out
    }
}

/// Full-image model input for a stored sample.
pub fn sample_input(sample: &Sample) -> Result<InputPlanes> {
    let full = sample.full_rect();
    if sample.rgb_right.is_some() {
        Ok(InputPlanes::stereo(
            &sample.frame_buffers(Eye::Left, full),
            &sample.frame_buffers(Eye::Right, full),
        ))
    } else {
        Ok(InputPlanes::from_rgb(&sample.image(Eye::Mono), full))
    }
}

/// Full-image loss of `model` on a stored sample.
pub fn sample_loss(model: &SurrogateModel, sample: &Sample) -> Result<f64> {
    let pred = model.forward(&sample_input(sample)?)?;
    task_loss(&pred, &LossTarget::from_sample(sample)?)
}

/// The right-image window a stereo input over `rect` reads from.
pub fn stereo_right_rect(rect: &PixelRect) -> PixelRect {
    let x0 = rect.x0.saturating_sub(STEREO_SHIFT);
    PixelRect {
        x0,
        y0: rect.y0,
        width: rect.x0 + rect.width - x0,
        height: rect.height,
    }
}

/// Grid of `GRID x GRID` cells with integer boundaries `i * W / GRID`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellGrid {
    pub width: u32,
    pub height: u32,
}

impl CellGrid {
    pub fn x_bound(&self, i: u32) -> u32 {
        (u64::from(i) * u64::from(self.width) / u64::from(GRID)) as u32
    }

    pub fn y_bound(&self, j: u32) -> u32 {
        (u64::from(j) * u64::from(self.height) / u64::from(GRID)) as u32
    }

    pub fn cell_of_x(&self, x: u32) -> u32 {
        (0..GRID).rev().find(|&i| self.x_bound(i) <= x).unwrap_or(0)
    }

    pub fn cell_of_y(&self, y: u32) -> u32 {
        (0..GRID).rev().find(|&j| self.y_bound(j) <= y).unwrap_or(0)
    }

    pub fn count(&self) -> usize {
        (GRID * GRID) as usize
    }

    /// Pixel rectangle of cell `(i, j)`.
    pub fn cell_rect(&self, i: u32, j: u32) -> PixelRect {
        let (x0, y0) = (self.x_bound(i), self.y_bound(j));
        PixelRect {
            x0,
            y0,
            width: self.x_bound(i + 1) - x0,
            height: self.y_bound(j + 1) - y0,
        }
    }

    /// Smallest cell-aligned rectangle containing `rect`.
    pub fn align(&self, rect: &PixelRect) -> PixelRect {
        if rect.is_empty() {
            return *rect;
        }
        let (i0, j0) = (self.cell_of_x(rect.x0), self.cell_of_y(rect.y0));
        let (i1, j1) = (
            self.cell_of_x(rect.x0 + rect.width - 1),
            self.cell_of_y(rect.y0 + rect.height - 1),
        );
        let (x0, y0) = (self.x_bound(i0), self.y_bound(j0));
        PixelRect {
            x0,
            y0,
            width: self.x_bound(i1 + 1) - x0,
            height: self.y_bound(j1 + 1) - y0,
        }
    }

    /// Cells `(i, j)` lying inside a cell-aligned `rect`, row-major.
    pub fn cells_in(&self, rect: &PixelRect) -> Vec<(u32, u32)> {
        if rect.is_empty() {
            return Vec::new();
        }
        let (i0, j0) = (self.cell_of_x(rect.x0), self.cell_of_y(rect.y0));
        let (i1, j1) = (
            self.cell_of_x(rect.x0 + rect.width - 1),
            self.cell_of_y(rect.y0 + rect.height - 1),
        );
        let mut out = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                out.push((i, j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Raw per-cell outputs, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutputs {
    pub values: Vec<[f64; CELL_OUTPUTS]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskPrediction {
    Segmentation {
        width: u32,
        height: u32,
        /// `SEG_CLASSES` planes of `width x height` scores.
        logits: Vec<f64>,
    },
    Detection {
        cells: CellOutputs,
        detections: Vec<Detection>,
    },
    Depth {
        width: u32,
        height: u32,
        depth_m: Vec<f64>,
    },
    Stereo {
        width: u32,
        height: u32,
        depth_m: Vec<f64>,
        cells: CellOutputs,
        detections: Vec<Detection>,
        boxes: Vec<Box3D>,
    },
}

impl TaskPrediction {
    pub fn task(&self) -> Task {
        match self {
            TaskPrediction::Segmentation { .. } => Task::SemanticSegmentation,
            TaskPrediction::Detection { .. } => Task::Detection2D,
            TaskPrediction::Depth { .. } => Task::MonocularDepth,
            TaskPrediction::Stereo { .. } => Task::StereoDetection3D,
        }
    }

    /// Arg-max labels (ties to the lower class index).
    pub fn semantic_map(&self) -> Option<SemanticMap> {
        let TaskPrediction::Segmentation { width, height, logits } = self else {
            return None;
        };
        let n = *width as usize * *height as usize;
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for k in 1..SEG_CLASSES {
                    if logits[k * n + i] > logits[best * n + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Some(SemanticMap {
            width: *width,
            height: *height,
            labels,
        })
    }

    pub fn depth_map(&self) -> Option<DepthMap> {
        match self {
            TaskPrediction::Depth { width, height, depth_m } | TaskPrediction::Stereo { width, height, depth_m, .. } => {
                Some(DepthMap {
                    width: *width,
                    height: *height,
                    depth_m: depth_m.iter().map(|&d| d as f32).collect(),
                })
            }
            _ => None,
        }
    }

    pub fn detections(&self) -> Option<&[Detection]> {
        match self {
            TaskPrediction::Detection { detections, .. } | TaskPrediction::Stereo { detections, .. } => {
                Some(detections)
            }
            _ => None,
        }
    }

    pub fn boxes_3d(&self) -> Option<&[Box3D]> {
        match self {
            TaskPrediction::Stereo { boxes, .. } => Some(boxes),
            _ => None,
        }
    }
}

/// Trunk activations over an output rectangle.
pub(crate) struct Trunk {
    pub rect: PixelRect,
    /// `FEATURES x area` pre-activations.
    pub pre: Vec<f64>,
}

impl Trunk {
    #[inline]
    pub fn feature(&self, i: usize) -> [f64; FEATURES] {
        let n = self.rect.area();
        std::array::from_fn(|f| lrelu(self.pre[f * n + i]))
    }
}

/// Head outputs over an output rectangle.
pub(crate) struct HeadOutputs {
    /// `outs x area` for the pixel head.
    pub pixel: Vec<f64>,
    /// Cells inside the rectangle and their outputs and pooled features.
    pub cells: Vec<(u32, u32)>,
    pub cell_values: Vec<[f64; CELL_OUTPUTS]>,
}

fn iou_xywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Greedy suppression by descending score (ties by index).
pub fn nms(dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        if keep.iter().all(|k| iou_xywh(&k.bbox, &dets[i].bbox) <= iou) {
            keep.push(dets[i]);
        }
    }
    keep
}

impl SurrogateModel {
    pub fn grid(&self) -> CellGrid {
        CellGrid {
            width: self.width,
            height: self.height,
        }
    }

    pub fn full_rect(&self) -> PixelRect {
        PixelRect {
            x0: 0,
            y0: 0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn all_weights(&self) -> impl Iterator<Item = f64> + '_ {
        let heads = self.pixel_head.iter().chain(&self.cell_head);
        self.conv_weights
            .iter()
            .chain(&self.conv_bias)
            .copied()
            .chain(heads.flat_map(|h| h.weights.iter().chain(&h.bias).copied()))
    }

    /// SHA-256 of the JSON serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: SurrogateModel =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("model file: {e}")))?;
        let expect = FEATURES * m.in_channels * KERNEL * KERNEL;
        if m.in_channels != input_channels(m.task)
            || m.conv_weights.len() != expect
            || m.conv_bias.len() != FEATURES
            || !m.all_weights().all(f64::is_finite)
        {
            return Err(Error::InvalidConfig("model file has inconsistent or non-finite weights".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn check_input(&self, input: &InputPlanes, out: &PixelRect) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "model takes {} channels, input has {}",
                self.in_channels, input.channels
            )));
        }
        if input.data.len() != input.channels * input.rect.area() {
            return Err(Error::DimensionMismatch("input planes have the wrong length".into()));
        }
        let full = self.full_rect();
        let need = out.expand(RADIUS, &full);
        let r = input.rect;
        let covers = r.x0 <= need.x0
            && r.y0 <= need.y0
            && r.x0 + r.width >= need.x0 + need.width
            && r.y0 + r.height >= need.y0 + need.height
            && r.x0 + r.width <= self.width
            && r.y0 + r.height <= self.height;
        if !covers {
            return Err(Error::DimensionMismatch(format!(
                "input window {r:?} does not cover {need:?} inside a {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Convolution pre-activations over `out`. Rows are processed one at a
    /// time so the working set stays in cache; each output still sums its
    /// taps in (channel, ky, kx) order.
    pub(crate) fn trunk(&self, input: &InputPlanes, out: PixelRect) -> Trunk {
        let n_out = out.area();
        let ow = out.width as usize;
        let (iw, in_n) = (input.rect.width as usize, input.rect.area());
        let c_in = self.in_channels;
        let mut pre = vec![0.0; FEATURES * n_out];
        let spans: [Option<(usize, usize)>; KERNEL] = std::array::from_fn(|kx| valid_span(out.x0, out.width, kx, self.width));
        for oy in 0..out.height as usize {
            let y = out.y0 as i64 + oy as i64;
            for f in 0..FEATURES {
                let row = &mut pre[f * n_out + oy * ow..f * n_out + (oy + 1) * ow];
                row.fill(self.conv_bias[f]);
                for c in 0..c_in {
                    let src = &input.data[c * in_n..(c + 1) * in_n];
                    for ky in 0..KERNEL {
                        let gy = y + ky as i64 - RADIUS as i64;
                        if gy < 0 || gy >= i64::from(self.height) {
                            continue;
                        }
                        let src_row = &src[(gy as usize - input.rect.y0 as usize) * iw..][..iw];
                        for (kx, span) in spans.iter().enumerate() {
                            let Some((xs, xe)) = *span else { continue };
                            let w = self.conv_weights[((f * c_in + c) * KERNEL + ky) * KERNEL + kx];
                            let sx0 = (out.x0 as usize + xs + kx) - RADIUS as usize - input.rect.x0 as usize;
                            for (d, v) in row[xs..xe].iter_mut().zip(&src_row[sx0..sx0 + (xe - xs)]) {
                                *d += w * v;
                            }
                        }
                    }
                }
            }
        }
        Trunk { rect: out, pre }
    }

    /// Back-propagates `g_pre` (same layout as the trunk pre-activations,
    /// already multiplied by the activation slope) to the input window.
    fn trunk_backward(&self, g_pre: &[f64], out: &PixelRect, input_rect: PixelRect) -> InputPlanes {
        let mut grad = InputPlanes::zeros(input_rect, self.in_channels);
        let n_out = out.area();
        let ow = out.width as usize;
        let (iw, in_n) = (input_rect.width as usize, input_rect.area());
        let spans: [Option<(usize, usize)>; KERNEL] = std::array::from_fn(|kx| valid_span(out.x0, out.width, kx, self.width));
        for c in 0..self.in_channels {
            for iy in 0..input_rect.height as usize {
                let gy = input_rect.y0 as i64 + iy as i64;
                let dst = &mut grad.data[c * in_n + iy * iw..c * in_n + (iy + 1) * iw];
                for f in 0..FEATURES {
                    for ky in 0..KERNEL {
                        let oy = gy - ky as i64 + RADIUS as i64 - i64::from(out.y0);
                        if oy < 0 || oy >= i64::from(out.height) {
                            continue;
                        }
                        let g_row = &g_pre[f * n_out + oy as usize * ow..][..ow];
                        for (kx, span) in spans.iter().enumerate() {
                            let Some((xs, xe)) = *span else { continue };
                            let w = self.conv_weights[((f * self.in_channels + c) * KERNEL + ky) * KERNEL + kx];
                            let sx0 = (out.x0 as usize + xs + kx) - RADIUS as usize - input_rect.x0 as usize;
                            for (d, g) in dst[sx0..sx0 + (xe - xs)].iter_mut().zip(&g_row[xs..xe]) {
                                *d += w * g;
                            }
                        }
                    }
                }
            }
        }
        grad
    }

    pub(crate) fn heads(&self, trunk: &Trunk) -> HeadOutputs {
        let n = trunk.rect.area();
        let mut pixel = Vec::new();
        if let Some(h) = &self.pixel_head {
            pixel = vec![0.0; h.outs * n];
            for i in 0..n {
                let feat = trunk.feature(i);
                for o in 0..h.outs {
                    pixel[o * n + i] = h.apply(o, &feat);
                }
            }
        }
        let mut cells = Vec::new();
        let mut cell_values = Vec::new();
        if let Some(h) = &self.cell_head {
            let grid = self.grid();
            cells = grid.cells_in(&trunk.rect);
            for &(ci, cj) in &cells {
                let pooled = self.pooled(trunk, grid.cell_rect(ci, cj));
                cell_values.push(std::array::from_fn(|o| h.apply(o, &pooled)));
            }
        }
        HeadOutputs {
            pixel,
            cells,
            cell_values,
        }
    }

    fn pooled(&self, trunk: &Trunk, cell: PixelRect) -> [f64; FEATURES] {
        let mut acc = [0.0; FEATURES];
        let tw = trunk.rect.width as usize;
        for y in cell.y0..cell.y0 + cell.height {
            let row = (y - trunk.rect.y0) as usize * tw;
            for x in cell.x0..cell.x0 + cell.width {
                let feat = trunk.feature(row + (x - trunk.rect.x0) as usize);
                for f in 0..FEATURES {
                    acc[f] += feat[f];
                }
            }
        }
        let inv = 1.0 / cell.area() as f64;
        acc.map(|a| a * inv)
    }

    fn decode_cells(&self, cells: &[(u32, u32)], values: &[[f64; CELL_OUTPUTS]]) -> Vec<Detection> {
        let grid = self.grid();
        let mut dets = Vec::new();
        for (&(i, j), v) in cells.iter().zip(values) {
            let score = sigmoid(v[0]);
            if score < SCORE_THRESHOLD {
                continue;
            }
            let r = grid.cell_rect(i, j);
            let (cw, ch) = (f64::from(r.width), f64::from(r.height));
            let cx = f64::from(r.x0) + cw / 2.0 + v[1] * cw;
            let cy = f64::from(r.y0) + ch / 2.0 + v[2] * ch;
            let w = cw * v[3].clamp(-5.0, 5.0).exp();
            let h = ch * v[4].clamp(-5.0, 5.0).exp();
            let mut best = 0;
            for k in 1..3 {
                if v[5 + k] > v[5 + best] {
                    best = k;
                }
            }
            dets.push(Detection {
                class: ObjectClass::ALL[best],
                bbox: [cx - w / 2.0, cy - h / 2.0, w, h],
                score,
            });
        }
        nms(dets, NMS_IOU)
    }

    /// Lifts 2D detections with the median predicted depth inside each box.
    fn lift(&self, dets: &[Detection], depth: &[f64]) -> Vec<Box3D> {
        let k = &self.intrinsics;
        let (w, h) = (self.width as i64, self.height as i64);
        dets.iter()
            .filter_map(|d| {
                let x0 = (d.bbox[0].floor() as i64).clamp(0, w - 1);
                let y0 = (d.bbox[1].floor() as i64).clamp(0, h - 1);
                let x1 = ((d.bbox[0] + d.bbox[2]).ceil() as i64).clamp(x0 + 1, w);
                let y1 = ((d.bbox[1] + d.bbox[3]).ceil() as i64).clamp(y0 + 1, h);
                let mut vals: Vec<f64> = (y0..y1)
                    .flat_map(|y| (x0..x1).map(move |x| (y * w + x) as usize))
                    .map(|i| depth[i])
                    .collect();
                vals.sort_by(f64::total_cmp);
                let dz = *vals.get(vals.len() / 2)?;
                let (l, wd, ht) = d.class.nominal_dims();
                let u = d.bbox[0] + d.bbox[2] / 2.0;
                let v_bottom = d.bbox[1] + d.bbox[3];
                let z = dz + l / 2.0;
                let x = (u - k.cx) * z / k.fx;
                let y = (v_bottom - k.cy) * dz / k.fy;
                let ry = -std::f64::consts::FRAC_PI_2;
                Some(Box3D {
                    class: d.class,
                    dimensions: [ht, wd, l],
                    location: [x, y, z],
                    rotation_y: ry,
                    alpha: wrap_angle(ry - x.atan2(z)),
                    truncation: 0.0,
                    occlusion: 0,
                    bbox2d: [d.bbox[0], d.bbox[1], d.bbox[0] + d.bbox[2], d.bbox[1] + d.bbox[3]],
                    score: Some(d.score),
                })
            })
            .collect()
    }

    /// Full-image prediction.
    pub fn forward(&self, input: &InputPlanes) -> Result<TaskPrediction> {
        let full = self.full_rect();
        if input.rect != full {
            return Err(Error::DimensionMismatch(format!(
                "forward needs the full {}x{} image, got window {:?}",
                self.width, self.height, input.rect
            )));
        }
        self.check_input(input, &full)?;
        let trunk = self.trunk(input, full);
        let heads = self.heads(&trunk);
        let (width, height) = (self.width, self.height);
        let depth = || heads.pixel.iter().map(|&z| softplus(z).max(MIN_DEPTH_M)).collect::<Vec<f64>>();
        Ok(match self.task {
            Task::SemanticSegmentation => TaskPrediction::Segmentation {
                width,
                height,
                logits: heads.pixel.clone(),
            },
            Task::MonocularDepth => TaskPrediction::Depth {
                width,
                height,
                depth_m: depth(),
            },
            Task::Detection2D => TaskPrediction::Detection {
                detections: self.decode_cells(&heads.cells, &heads.cell_values),
                cells: CellOutputs {
                    values: heads.cell_values.clone(),
                },
            },
            Task::StereoDetection3D => {
                let depth_m = depth();
                let detections = self.decode_cells(&heads.cells, &heads.cell_values);
                let boxes = self.lift(&detections, &depth_m);
                TaskPrediction::Stereo {
                    width,
                    height,
                    depth_m,
                    cells: CellOutputs {
                        values: heads.cell_values.clone(),
                    },
                    detections,
                    boxes,
                }
            }
        })
    }

    /// The loss-term window needed for exact gradients on input pixels in
    /// `need` (and, for stereo, right-image pixels in `need_right`).
    pub fn loss_window(&self, need: &PixelRect, need_right: Option<&PixelRect>) -> PixelRect {
        let full = self.full_rect();
        let mut out = need.expand(RADIUS, &full);
        if let Some(r) = need_right {
            // Right pixel x feeds the right channels at x and the difference channel at x + 8.
            let shifted = PixelRect {
                x0: r.x0,
                y0: r.y0,
                width: r.width + STEREO_SHIFT,
                height: r.height,
            };
            out = out.union(&shifted.expand(RADIUS, &full));
        }
        if self.cell_head.is_some() {
            out = self.grid().align(&out);
        }
        out
    }

    /// Input window required to evaluate the loss terms in `out`.
    pub fn input_window(&self, out: &PixelRect) -> PixelRect {
        out.expand(RADIUS, &self.full_rect())
    }

    /// [`Self::loss_and_grad`] without the backward pass.
    pub fn window_loss(&self, input: &InputPlanes, target: &LossTarget, out: PixelRect) -> Result<f64> {
        Ok(self.window_forward(input, target, out)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn window_forward(
        &self,
        input: &InputPlanes,
        target: &LossTarget,
        out: PixelRect,
    ) -> Result<(f64, Trunk, Vec<f64>, Vec<[f64; CELL_OUTPUTS]>, Vec<(u32, u32)>)> {
        self.check_input(input, &out)?;
        if target.task() != self.task {
            return Err(Error::TaskMismatch {
                expected: self.task,
                actual: target.task(),
            });
        }
        if self.cell_head.is_some() && self.grid().align(&out) != out {
            return Err(Error::InvalidArgument(format!("window {out:?} is not aligned to the detection grid")));
        }
        let trunk = self.trunk(input, out);
        let heads = self.heads(&trunk);
        let (loss, g_pixel, g_cells) = loss::window_loss(self, &heads, &trunk.rect, target)?;
        Ok((loss, trunk, g_pixel, g_cells, heads.cells))
    }

    /// Loss terms inside `out` (normalised by full-image counts) and their
    /// gradient with respect to `input`. `out` must be cell-aligned for
    /// detection heads; with `out` = the full image this is the full loss.
    pub fn loss_and_grad(&self, input: &InputPlanes, target: &LossTarget, out: PixelRect) -> Result<(f64, InputPlanes)> {
        let (loss, trunk, g_pixel, g_cells, cells) = self.window_forward(input, target, out)?;
        let n = out.area();
        if target.task() != self.task {
            return Err(Error::TaskMismatch {
                expected: self.task,
                actual: target.task(),
            });
        }
        if self.cell_head.is_some() && self.grid().align(&out) != out {
            return Err(Error::InvalidArgument(format!("window {out:?} is not aligned to the detection grid")));
        }
        let mut g_feat = vec![0.0; FEATURES * n];
        if let Some(h) = &self.pixel_head {
            for i in 0..n {
                for o in 0..h.outs {
                    let g = g_pixel[o * n + i];
                    if g != 0.0 {
                        for f in 0..FEATURES {
                            g_feat[f * n + i] += h.weights[o * FEATURES + f] * g;
                        }
                    }
                }
            }
        }
        if let Some(h) = &self.cell_head {
            let grid = self.grid();
            for (&(ci, cj), g) in cells.iter().zip(&g_cells) {
                let mut gp = [0.0; FEATURES];
                for o in 0..CELL_OUTPUTS {
                    for f in 0..FEATURES {
                        gp[f] += h.weights[o * FEATURES + f] * g[o];
                    }
                }
                let r = grid.cell_rect(ci, cj);
                let inv = 1.0 / r.area() as f64;
                for y in r.y0..r.y0 + r.height {
                    let row = (y - out.y0) as usize * out.width as usize;
                    for x in r.x0..r.x0 + r.width {
                        let i = row + (x - out.x0) as usize;
                        for f in 0..FEATURES {
                            g_feat[f * n + i] += gp[f] * inv;
                        }
                    }
                }
            }
        }
        for (g, &p) in g_feat.iter_mut().zip(&trunk.pre) {
            *g *= lrelu_slope(p);
        }
        Ok((loss, self.trunk_backward(&g_feat, &out, input.rect)))
    }
}

/// Output columns `[xs, xe)` (relative to `x0`) whose tap `kx` lands inside the image.
#[inline]
fn valid_span(x0: u32, width: u32, kx: usize, img_w: u32) -> Option<(usize, usize)> {
    let off = kx as i64 - RADIUS as i64;
    let lo = (-off - i64::from(x0)).max(0);
    let hi = (i64::from(img_w) - off - i64::from(x0)).min(i64::from(width));
    (lo < hi).then_some((lo as usize, hi as usize))
}
