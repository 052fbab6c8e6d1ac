//! Input-transform defenses, patch detectors, and the twin-split detection
//! evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, SplitManifest};
use crate::error::{Error, Result};
use crate::geometry::Eye;
use crate::metrics::auroc;

#[cfg(test)]
mod tests;

/// Side of the square blocks used by the reference detector and its masks.
pub const DETECTOR_BLOCK: usize = 16;
pub const DETECTOR_PERCENTILE: f64 = 0.99;
pub const DEFAULT_MASK_QUANTILE: f64 = 0.98;
pub const MASK_GRAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgsParams {
    pub block: usize,
    pub overlap: usize,
    pub threshold: f64,
    pub smoothing: f64,
}

impl Default for LgsParams {
    fn default() -> Self {
        Self {
            block: 15,
            overlap: 5,
            threshold: 0.1,
            smoothing: 2.3,
        }
    }
}

impl LgsParams {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.overlap >= self.block {
            return Err(Error::InvalidArgument(format!(
                "LGS needs block > overlap >= 0, got block {} overlap {}",
                self.block, self.overlap
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("LGS threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::InvalidArgument(format!("LGS smoothing {} must be > 0", self.smoothing)));
        }
        Ok(())
    }
}

fn check_image(image: &[f64], width: usize, height: usize) -> Result<()> {
    if image.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {width}x{height} RGB image",
            image.len()
        )));
    }
    Ok(())
}

pub fn grayscale(image: &[f64]) -> Vec<f64> {
    image.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Block start offsets along one axis: stride `block - overlap`, with the
/// last block flush against the far edge.
fn block_starts(len: usize, block: usize, stride: usize) -> Vec<usize> {
    if len <= block {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..=len - block).step_by(stride).collect();
    if *v.last().expect("nonempty") != len - block {
        v.push(len - block);
    }
    v
}

/// Local gradient smoothing. The gray-level gradient magnitude
/// `|dI/dx| + |dI/dy|` (forward differences, zero on the last column/row) is
/// normalized by its maximum within each overlapping block; a pixel covered by
/// several blocks keeps the largest normalized value. Pixels above
/// `threshold` are attenuated by `clamp(1 - smoothing * g, 0, 1)`.
pub fn lgs_defend(image: &[f64], width: usize, height: usize, params: &LgsParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_image(image, width, height)?;
    let gray = grayscale(image);
    let mut grad = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let dx = if x + 1 < width { gray[i + 1] - gray[i] } else { 0.0 };
            let dy = if y + 1 < height { gray[i + width] - gray[i] } else { 0.0 };
            grad[i] = dx.abs() + dy.abs();
        }
    }
    let stride = params.block - params.overlap;
    let mut norm = vec![0.0f64; width * height];
    for &by in &block_starts(height, params.block, stride) {
        for &bx in &block_starts(width, params.block, stride) {
            let (ye, xe) = ((by + params.block).min(height), (bx + params.block).min(width));
            let mut m = 0.0f64;
            for y in by..ye {
                for x in bx..xe {
                    m = m.max(grad[y * width + x]);
                }
            }
            if m <= 0.0 {
                continue;
            }
            for y in by..ye {
                for x in bx..xe {
                    let i = y * width + x;
                    norm[i] = norm[i].max(grad[i] / m);
                }
            }
        }
    }
    let mut out = image.to_vec();
    for (i, &g) in norm.iter().enumerate() {
        if g > params.threshold {
            let k = (1.0 - params.smoothing * g).clamp(0.0, 1.0);
            for c in 0..3 {
                out[3 * i + c] = (image[3 * i + c] * k).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Paints masked pixels mid-gray.
pub fn mask_defend(image: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if image.len() != mask.len() * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{} image values for a {}-pixel mask",
            image.len(),
            mask.len()
        )));
    }
    let mut out = image.to_vec();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out[3 * i..3 * i + 3].fill(MASK_GRAY);
    }
    Ok(out)
}

/// Mean absolute 4-neighbour Laplacian of the gray image per
/// `DETECTOR_BLOCK`-pixel block, with edge replication at the border.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEnergy {
    pub cols: usize,
    pub rows: usize,
    pub energy: Vec<f64>,
}

pub fn block_energy(image: &[f64], width: usize, height: usize) -> Result<BlockEnergy> {
    check_image(image, width, height)?;
    let gray = grayscale(image);
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        gray[y * width + x]
    };
    let (cols, rows) = (width.div_ceil(DETECTOR_BLOCK), height.div_ceil(DETECTOR_BLOCK));
    let mut sum = vec![0.0; cols * rows];
    let mut count = vec![0usize; cols * rows];
    for y in 0..height {
        for x in 0..width {
            let (xi, yi) = (x as isize, y as isize);
            let lap = at(xi - 1, yi) + at(xi + 1, yi) + at(xi, yi - 1) + at(xi, yi + 1) - 4.0 * at(xi, yi);
            let b = (y / DETECTOR_BLOCK) * cols + x / DETECTOR_BLOCK;
            sum[b] += lap.abs();
            count[b] += 1;
        }
    }
    let energy = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    Ok(BlockEnergy { cols, rows, energy })
}

/// Nearest-rank quantile of `values` (`q` in (0, 1]).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub score: f64,
    pub detector_name: String,
}

/// Scores a sample; higher means more likely patched.
pub trait PatchDetector: Sync {
    fn name(&self) -> &str;

    fn score(&self, manifest: &SplitManifest, sample: &Sample) -> Result<f64>;

    /// Per-block anomaly energies, for detectors that localize.
    fn block_energy(&self, _image: &[f64], _width: usize, _height: usize) -> Option<Result<BlockEnergy>> {
        None
    }
}

/// 99th percentile of the block high-frequency energy.
pub fn reference_detector(image: &[f64], width: usize, height: usize) -> Result<DetectorScore> {
    let e = block_energy(image, width, height)?;
    Ok(DetectorScore {
        score: quantile(&e.energy, DETECTOR_PERCENTILE),
        detector_name: ReferenceDetector.name().into(),
    })
}

pub struct ReferenceDetector;

impl PatchDetector for ReferenceDetector {
    fn name(&self) -> &str {
        "reference"
    }

    fn score(&self, _manifest: &SplitManifest, sample: &Sample) -> Result<f64> {
        let image = sample.image(sample.eyes()[0]);
        Ok(reference_detector(&image, sample.width as usize, sample.height as usize)?.score)
    }

    fn block_energy(&self, image: &[f64], width: usize, height: usize) -> Option<Result<BlockEnergy>> {
        Some(block_energy(image, width, height))
    }
}

/// Scores every image the same.
pub struct ConstantDetector;

impl PatchDetector for ConstantDetector {
    fn name(&self) -> &str {
        "constant"
    }

    fn score(&self, _manifest: &SplitManifest, _sample: &Sample) -> Result<f64> {
        Ok(0.0)
    }
}

/// Looks up the split's patch fingerprint.
pub struct OracleDetector;

impl PatchDetector for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, manifest: &SplitManifest, _sample: &Sample) -> Result<f64> {
        Ok(if manifest.is_patched() { 1.0 } else { 0.0 })
    }
}

/// Blocks whose energy exceeds the image's `quantile`-level energy, dilated
/// by one block in all eight directions.
pub fn detector_mask(
    image: &[f64],
    width: usize,
    height: usize,
    detector: &dyn PatchDetector,
    quantile_level: f64,
) -> Result<Vec<bool>> {
    if !(quantile_level > 0.0 && quantile_level < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile {quantile_level} outside (0, 1)")));
    }
    let e = detector.block_energy(image, width, height).ok_or_else(|| {
        Error::InvalidArgument(format!("detector {} does not localize", detector.name()))
    })??;
    let cut = quantile(&e.energy, quantile_level);
    let hot: Vec<bool> = e.energy.iter().map(|&v| v > cut).collect();
    let mut dilated = vec![false; hot.len()];
    for r in 0..e.rows {
        for c in 0..e.cols {
            if !hot[r * e.cols + c] {
                continue;
            }
            for rr in r.saturating_sub(1)..(r + 2).min(e.rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(e.cols) {
                    dilated[rr * e.cols + cc] = true;
                }
            }
        }
    }
    Ok((0..width * height)
        .map(|i| dilated[(i / width / DETECTOR_BLOCK) * e.cols + (i % width) / DETECTOR_BLOCK])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub name: String,
    pub score: f64,
    pub is_patched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub detector: String,
    pub auroc: f64,
    /// Patched split first, then the clean twin, each in sample order.
    pub scores: Vec<ScoredImage>,
}

/// The splits must be twins and only one of them patched.
pub fn check_detection_twins(patched: &SplitManifest, clean: &SplitManifest) -> Result<()> {
    patched.check_twin(clean)?;
    if patched.patch_fingerprint == clean.patch_fingerprint {
        return Err(Error::NotTwins(format!(
            "both splits carry patch fingerprint {}",
            patched.patch_fingerprint
        )));
    }
    Ok(())
}

/// AUROC of `detector` separating the patched split from its clean twin.
pub fn detection_eval(detector: &dyn PatchDetector, patched: &Dataset, clean: &Dataset) -> Result<DetectionEval> {
    check_detection_twins(&patched.manifest, &clean.manifest)?;
    let score_split = |ds: &Dataset, is_patched: bool| -> Result<Vec<ScoredImage>> {
        ds.samples
            .par_iter()
            .map(|s| {
                let score = detector.score(&ds.manifest, s)?;
                if !score.is_finite() {
                    return Err(Error::InvalidArgument(format!("detector {} gave {score} on {}", detector.name(), s.name)));
                }
                Ok(ScoredImage {
                    name: s.name.clone(),
                    score,
                    is_patched,
                })
            })
            .collect()
    };
    let mut scores = score_split(patched, true)?;
    scores.extend(score_split(clean, false)?);
    let pos: Vec<f64> = scores.iter().filter(|s| s.is_patched).map(|s| s.score).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.is_patched).map(|s| s.score).collect();
    Ok(DetectionEval {
        detector: detector.name().into(),
        auroc: auroc(&pos, &neg)?,
        scores,
    })
}

/// Which defense `cmd_evaluate` applies before inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    Lgs(LgsParams),
    /// Gray out the ground-truth pixels of the given surfaces.
    Mask,
}

/// Applies `defense` to one eye of `sample`. `surfaces` names the patched
/// surfaces for the mask defense.
pub fn apply_defense(defense: &Defense, sample: &Sample, eye: Eye, image: Vec<f64>, surfaces: &[u32]) -> Result<Vec<f64>> {
    match defense {
        Defense::Lgs(p) => lgs_defend(&image, sample.width as usize, sample.height as usize, p),
        Defense::Mask => mask_defend(&image, &sample.surface_mask(eye, surfaces)),
    }
}
