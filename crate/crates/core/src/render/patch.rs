//! Patch textures, bilinear compositing onto surfaces, and its adjoint.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{desaturate, desaturate_transpose, render, FrameBuffers};
use crate::error::{Error, Result};
use crate::geometry::{invert_homography, plane_homography, CameraRig, Eye, PlanarSurface};
use crate::scene::{surface_instance_id, ScenePlacement};

pub const DEFAULT_PATCH_ROWS: usize = 150;
pub const DEFAULT_PATCH_COLS: usize = 300;

/// `rows x cols` RGB texture in [0, 1], row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTexture {
    pub rows: usize,
    pub cols: usize,
    pub texels: Vec<f64>,
}

impl PatchTexture {
    pub fn new(rows: usize, cols: usize, texels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || texels.len() != rows * cols * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} texel values for a {rows}x{cols} texture",
                texels.len()
            )));
        }
        if let Some(bad) = texels.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("texel value {bad} outside [0, 1]")));
        }
        Ok(Self { rows, cols, texels })
    }

    pub fn filled(rows: usize, cols: usize, rgb: [f64; 3]) -> Self {
        Self {
            rows,
            cols,
            texels: rgb.iter().copied().cycle().take(rows * cols * 3).collect(),
        }
    }

    /// 150 x 300 mid-gray, the default initialization.
    pub fn gray() -> Self {
        Self::filled(DEFAULT_PATCH_ROWS, DEFAULT_PATCH_COLS, [0.5; 3])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn texel(&self, v: usize, u: usize) -> [f64; 3] {
        let i = 3 * (v * self.cols + u);
        [self.texels[i], self.texels[i + 1], self.texels[i + 2]]
    }

    pub fn clamp_unit(&mut self) {
        for t in &mut self.texels {
            *t = t.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.texels.iter().sum::<f64>() / self.texels.len() as f64
    }

    /// SHA-256 over the dimensions and the exact texel bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for t in &self.texels {
            h.update(t.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// The texture's aspect must match the host surface's within 5%.
    pub fn check_aspect(&self, surface: &PlanarSurface) -> Result<()> {
        let tex = self.cols as f64 / self.rows as f64;
        let host = surface.width_m / surface.height_m;
        if (tex / host - 1.0).abs() > 0.05 {
            return Err(Error::DimensionMismatch(format!(
                "texture aspect {tex:.3} does not match surface aspect {host:.3}"
            )));
        }
        Ok(())
    }
}

/// Bilinear taps with clamp-to-edge addressing. Exact integer coordinates put
/// all weight on the lower index.
#[inline]
fn taps(u: f64, v: f64, rows: usize, cols: usize) -> [(usize, f64); 4] {
    let (uf, vf) = (u.floor(), v.floor());
    let (fu, fv) = (u - uf, v - vf);
    let clampi = |x: f64, n: usize| (x.max(0.0) as usize).min(n - 1);
    let (u0, u1) = (clampi(uf, cols), clampi(uf + 1.0, cols));
    let (v0, v1) = (clampi(vf, rows), clampi(vf + 1.0, rows));
    [
        (v0 * cols + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * cols + u1, fu * (1.0 - fv)),
        (v1 * cols + u0, (1.0 - fu) * fv),
        (v1 * cols + u1, fu * fv),
    ]
}

/// Pixel-to-texel map for one surface seen by the buffers' eye.
fn pixel_to_texel(fb: &FrameBuffers, rig: &CameraRig, surface: &PlanarSurface, dims: (usize, usize)) -> Result<Matrix3<f64>> {
    let pose = rig.eye_pose(fb.eye);
    let h = plane_homography(&rig.intrinsics, &pose, surface, dims)?;
    Ok(invert_homography(&h)?.matrix)
}

#[inline]
fn map(hinv: &Matrix3<f64>, px: f64, py: f64) -> (f64, f64) {
    let p = hinv * Vector3::new(px, py, 1.0);
    (p.x / p.z, p.y / p.z)
}

/// Visits `(buffer index, taps)` for every pixel showing `surface`.
fn for_each_surface_pixel(
    fb: &FrameBuffers,
    rig: &CameraRig,
    surface: &PlanarSurface,
    dims: (usize, usize),
    mut f: impl FnMut(usize, [(usize, f64); 4]),
) -> Result<()> {
    let id = surface_instance_id(surface.surface_id);
    if !fb.instance_id.contains(&id) {
        return Ok(());
    }
    let hinv = pixel_to_texel(fb, rig, surface, dims)?;
    let w = fb.width as usize;
    for (i, _) in fb.instance_id.iter().enumerate().filter(|(_, &v)| v == id) {
        let px = f64::from(fb.x0) + (i % w) as f64 + 0.5;
        let py = f64::from(fb.y0) + (i / w) as f64 + 0.5;
        let (u, v) = map(&hinv, px, py);
        f(i, taps(u, v, dims.0, dims.1));
    }
    Ok(())
}

/// Draws `patch` over the visible pixels of `surface`, scaled by each pixel's
/// shading and passed through the weather desaturation.
pub fn composite_patch_in_place(
    fb: &mut FrameBuffers,
    surface: &PlanarSurface,
    patch: &PatchTexture,
    rig: &CameraRig,
) -> Result<()> {
    let mut writes = Vec::new();
    for_each_surface_pixel(fb, rig, surface, patch.dims(), |i, tp| {
        let mut c = [0.0; 3];
        for (t, w) in tp {
            for k in 0..3 {
                c[k] += w * patch.texels[3 * t + k];
            }
        }
        writes.push((i, c));
    })?;
    let desat = fb.desaturation;
    for (i, c) in writes {
        let s = fb.shading[i];
        let out = desaturate(c.map(|x| x * s), desat);
        fb.rgb[3 * i..3 * i + 3].copy_from_slice(&out);
        fb.patch_region[i] = true;
    }
    Ok(())
}

pub fn composite_patch(
    fb: &FrameBuffers,
    surface: &PlanarSurface,
    patch: &PatchTexture,
    rig: &CameraRig,
) -> Result<FrameBuffers> {
    let mut out = fb.clone();
    composite_patch_in_place(&mut out, surface, patch, rig)?;
    Ok(out)
}

/// Applies `patches[i]` to the i-th surface in ascending `surface_id` order.
pub fn composite_patches(
    fb: &mut FrameBuffers,
    scene: &ScenePlacement,
    patches: &[PatchTexture],
    rig: &CameraRig,
) -> Result<()> {
    let surfaces = scene.surfaces_sorted();
    if patches.len() > surfaces.len() {
        return Err(Error::InvalidArgument(format!(
            "{} patches for {} surfaces",
            patches.len(),
            surfaces.len()
        )));
    }
    for (s, p) in surfaces.iter().zip(patches) {
        composite_patch_in_place(fb, &s.surface, p, rig)?;
    }
    Ok(())
}

/// Adjoint of [`composite_patch_in_place`]: d loss / d texels given
/// `upstream` = d loss / d rgb of the buffers. Texels never sampled get zero.
pub fn patch_gradient(
    fb: &FrameBuffers,
    surface: &PlanarSurface,
    dims: (usize, usize),
    rig: &CameraRig,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if upstream.len() != fb.rgb.len() {
        return Err(Error::DimensionMismatch(format!(
            "upstream has {} values, buffers have {}",
            upstream.len(),
            fb.rgb.len()
        )));
    }
    let mut grad = vec![0.0; dims.0 * dims.1 * 3];
    let desat = fb.desaturation;
    for_each_surface_pixel(fb, rig, surface, dims, |i, tp| {
        let g = [upstream[3 * i], upstream[3 * i + 1], upstream[3 * i + 2]];
        if g == [0.0; 3] {
            return;
        }
        let s = fb.shading[i];
        let gt = desaturate_transpose(g, desat).map(|x| x * s);
        for (t, w) in tp {
            if w != 0.0 {
                for k in 0..3 {
                    grad[3 * t + k] += w * gt[k];
                }
            }
        }
    })?;
    Ok(grad)
}

/// Renders `scene` and returns the texel gradient for the surface `surface_id`.
pub fn scene_patch_gradient(
    scene: &ScenePlacement,
    rig: &CameraRig,
    eye: Eye,
    surface_id: u32,
    patch: &PatchTexture,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let surface = scene
        .surface(surface_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no surface {surface_id} in scene")))?;
    let fb = render(scene, rig, eye);
    patch_gradient(&fb, &surface.surface, patch.dims(), rig, upstream)
}
