//! Untargeted white-box patch optimization against the surrogate models.
//!
//! Each step draws a batch from the clean training split, composites the
//! current textures onto the stored images, and pulls the loss gradient back
//! through the compositing to the texels. Only the loss terms whose receptive
//! field touches a target surface are evaluated, which gives the exact
//! gradient at a fraction of the full-image cost.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_patch_png, save_patch_png, Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::Eye;
use crate::metrics::{evaluate_split, MetricReport};
use crate::model::{stereo_right_rect, InputPlanes, LossTarget, SurrogateModel};
use crate::render::{composite_patch_in_place, patch_gradient, PatchTexture, PixelRect, DEFAULT_PATCH_COLS, DEFAULT_PATCH_ROWS};
use crate::rng::CounterRng;
use crate::scene::AttackSituation;

#[cfg(test)]
mod tests;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    Gray,
    RandomSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOptions {
    pub steps: usize,
    pub step_size: f64,
    pub batch: usize,
    pub init: PatchInit,
    pub momentum: f64,
    /// Surfaces to attack; empty means every surface of the situation.
    pub target_surfaces: Vec<u32>,
    /// Seeds batch sampling and random initialization.
    pub seed: u64,
    /// The best-so-far check runs over the whole split every this many steps
    /// and after the last one.
    pub eval_every: usize,
    /// Texture size `(rows, cols)`.
    pub patch_dims: (usize, usize),
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.01,
            batch: 8,
            init: PatchInit::Gray,
            momentum: 0.9,
            target_surfaces: Vec::new(),
            seed: 0,
            eval_every: 100,
            patch_dims: (DEFAULT_PATCH_ROWS, DEFAULT_PATCH_COLS),
        }
    }
}

impl AttackOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be finite and >= 0, got {}", self.step_size));
        }
        if self.batch < 1 {
            return bad("batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        if self.patch_dims.0 == 0 || self.patch_dims.1 == 0 {
            return bad("patch dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Uniform texels from a counter RNG keyed by `seed`.
pub fn random_patch(seed: u64, dims: (usize, usize)) -> PatchTexture {
    let mut rng = CounterRng::new(seed, "random-patch", 0);
    let texels = (0..dims.0 * dims.1 * 3).map(|_| rng.next_f64()).collect();
    PatchTexture::new(dims.0, dims.1, texels).expect("positive dimensions")
}

fn initial_patch(opts: &AttackOptions, k: usize) -> PatchTexture {
    match opts.init {
        PatchInit::Gray => PatchTexture::filled(opts.patch_dims.0, opts.patch_dims.1, [0.5; 3]),
        PatchInit::RandomSeeded => {
            random_patch(CounterRng::new(opts.seed, "attack-init", k as u64).next_u64(), opts.patch_dims)
        }
    }
}

/// Windows of one sample that the patch objective needs.
struct SampleWindow {
    /// Loss-term window (left or mono image coordinates).
    out: PixelRect,
    input: PixelRect,
    right: Option<PixelRect>,
}

/// The patch-dependent part of one sample's loss: target, windows, and the
/// surfaces that are actually visible.
pub struct PatchObjective<'a> {
    model: &'a SurrogateModel,
    sample: &'a Sample,
    target: LossTarget,
    surfaces: Vec<u32>,
    window: Option<SampleWindow>,
}

fn union_opt(a: Option<PixelRect>, b: Option<PixelRect>) -> Option<PixelRect> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.union(&b)),
        (a, b) => a.or(b),
    }
}

impl<'a> PatchObjective<'a> {
    pub fn new(model: &'a SurrogateModel, sample: &'a Sample, surfaces: &[u32]) -> Result<Self> {
        if (sample.width, sample.height) != (model.width, model.height) || sample.annotation.task() != model.task {
            return Err(Error::DimensionMismatch(format!(
                "sample {} ({} {}x{}) does not match the {} {}x{} model",
                sample.name,
                sample.annotation.task(),
                sample.width,
                sample.height,
                model.task,
                model.width,
                model.height
            )));
        }
        if let Some(id) = surfaces.iter().find(|&&id| sample.surface(id).is_none()) {
            return Err(Error::SituationMismatch {
                expected: format!("a scene with surface {id}"),
                actual: format!("sample {}", sample.name),
            });
        }
        let target = LossTarget::from_sample(sample)?;
        let eyes = sample.eyes();
        let need = surfaces
            .iter()
            .fold(None, |acc, &id| union_opt(acc, sample.surface_bounds(eyes[0], id)));
        let need_right = if eyes.len() > 1 {
            surfaces
                .iter()
                .fold(None, |acc, &id| union_opt(acc, sample.surface_bounds(Eye::Right, id)))
        } else {
            None
        };
        let window = match (need, need_right) {
            (None, None) => None,
            (l, r) => {
                // A surface seen by the right eye only still needs a left
                // anchor; its own bounds are a harmless superset.
                let anchor = l.unwrap_or_else(|| r.expect("one side is visible"));
                let out = model.loss_window(&anchor, r.as_ref());
                let input = model.input_window(&out);
                let right = (eyes.len() > 1).then(|| stereo_right_rect(&input));
                Some(SampleWindow { out, input, right })
            }
        };
        Ok(Self {
            model,
            sample,
            target,
            surfaces: surfaces.to_vec(),
            window,
        })
    }

    /// Whether any target surface is visible in this sample.
    pub fn is_active(&self) -> bool {
        self.window.is_some()
    }

    fn composite(&self, eye: Eye, rect: PixelRect, patches: &[PatchTexture]) -> Result<crate::render::FrameBuffers> {
        let mut fb = self.sample.frame_buffers(eye, rect);
        for (&id, p) in self.surfaces.iter().zip(patches) {
            let surface = self.sample.surface(id).expect("checked on construction");
            composite_patch_in_place(&mut fb, surface, p, self.sample.rig())?;
        }
        Ok(fb)
    }

    fn input(&self, w: &SampleWindow, patches: &[PatchTexture]) -> Result<InputPlanes> {
        let eyes = self.sample.eyes();
        let left = self.composite(eyes[0], w.input, patches)?;
        Ok(match w.right {
            Some(r) => InputPlanes::stereo(&left, &self.composite(Eye::Right, r, patches)?),
            None => InputPlanes::from_buffers(&left),
        })
    }

    /// Sum of the loss terms the patches can influence; 0 when no target
    /// surface is visible.
    pub fn loss(&self, patches: &[PatchTexture]) -> Result<f64> {
        self.loss_and_grad(patches, false).map(|(l, _)| l)
    }

    /// Windowed loss and its gradient with respect to each patch's texels.
    pub fn loss_and_patch_grad(&self, patches: &[PatchTexture]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.loss_and_grad(patches, true)
    }

    fn loss_and_grad(&self, patches: &[PatchTexture], want_grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut grads: Vec<Vec<f64>> = patches.iter().map(|p| vec![0.0; p.texels.len()]).collect();
        let Some(w) = &self.window else {
            return Ok((0.0, grads));
        };
        let input = self.input(w, patches)?;
        if !want_grad {
            return Ok((self.model.window_loss(&input, &self.target, w.out)?, grads));
        }
        let (loss, g) = self.model.loss_and_grad(&input, &self.target, w.out)?;
        let eyes = self.sample.eyes();
        let upstream: Vec<(Eye, PixelRect, Vec<f64>)> = match w.right {
            Some(r) => {
                let (gl, gr) = g.stereo_backward(r);
                vec![(eyes[0], w.input, gl), (Eye::Right, r, gr)]
            }
            None => vec![(eyes[0], w.input, g.to_interleaved())],
        };
        for (eye, rect, up) in &upstream {
            let fb = self.sample.frame_buffers(*eye, *rect);
            for ((&id, p), acc) in self.surfaces.iter().zip(patches).zip(grads.iter_mut()) {
                let surface = self.sample.surface(id).expect("checked on construction");
                let pg = patch_gradient(&fb, surface, p.dims(), self.sample.rig(), up)?;
                for (a, b) in acc.iter_mut().zip(&pg) {
                    *a += b;
                }
            }
        }
        Ok((loss, grads))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// One texture per target surface, in `surfaces` order.
    pub patches: Vec<PatchTexture>,
    pub surfaces: Vec<u32>,
    /// Mean patch-dependent loss over the split at initialization.
    pub initial_loss: f64,
    /// Mean patch-dependent loss of the returned patches.
    pub best_loss: f64,
    pub best_step: usize,
    /// `(step, mean loss)` at every evaluation.
    pub history: Vec<(usize, f64)>,
}

fn mean_split_loss(objectives: &[PatchObjective], patches: &[PatchTexture]) -> Result<f64> {
    let losses = objectives
        .par_iter()
        .map(|o| o.loss(patches))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / objectives.len() as f64)
}

/// Batch indices for `step`: a seeded partial shuffle, so no sample repeats
/// within a batch.
fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = CounterRng::new(seed, "attack-batch", step as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    let k = batch.min(n);
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn resolve_surfaces(situation: &AttackSituation, opts: &AttackOptions) -> Result<Vec<u32>> {
    let available: Vec<u32> = situation.surfaces.iter().map(|s| s.surface.surface_id).collect();
    if opts.target_surfaces.is_empty() {
        return Ok(available);
    }
    let mut out = Vec::new();
    for &id in &opts.target_surfaces {
        if !available.contains(&id) {
            return Err(Error::InvalidArgument(format!("situation {} has no surface {id}", situation.name)));
        }
        if out.contains(&id) {
            return Err(Error::InvalidArgument(format!("surface {id} listed twice")));
        }
        out.push(id);
    }
    Ok(out)
}

/// One momentum update of a single texture. Each texture is normalized by
/// its own max-norm, so textures on different surfaces update independently.
pub fn ascent_step(patch: &mut PatchTexture, velocity: &mut [f64], grad: &[f64], opts: &AttackOptions) {
    for (v, g) in velocity.iter_mut().zip(grad) {
        *v = opts.momentum * *v + g;
    }
    let norm = velocity.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = opts.step_size / (norm + 1e-12);
    for (x, v) in patch.texels.iter_mut().zip(velocity.iter()) {
        *x += scale * v;
    }
    patch.clamp_unit();
}

/// Momentum ascent on the mean windowed loss with per-patch max-norm
/// normalized steps, keeping the best patches seen at evaluation points.
pub fn optimize_patch(
    model: &SurrogateModel,
    train: &Dataset,
    situation: &AttackSituation,
    opts: &AttackOptions,
) -> Result<AttackResult> {
    opts.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    if train.manifest.situation != situation.name {
        return Err(Error::SituationMismatch {
            expected: situation.name.clone(),
            actual: train.manifest.situation.clone(),
        });
    }
    if train.manifest.is_patched() {
        return Err(Error::Lifecycle(format!(
            "training split {} already contains a patch",
            train.manifest.split
        )));
    }
    if train.task() != model.task {
        return Err(Error::TaskMismatch {
            expected: model.task,
            actual: train.task(),
        });
    }
    let surfaces = resolve_surfaces(situation, opts)?;
    let mut patches: Vec<PatchTexture> = (0..surfaces.len()).map(|k| initial_patch(opts, k)).collect();
    for (p, &id) in patches.iter().zip(&surfaces) {
        let s = situation
            .surfaces
            .iter()
            .find(|s| s.surface.surface_id == id)
            .expect("resolved above");
        p.check_aspect(&s.surface)?;
    }
    let objectives = train
        .samples
        .iter()
        .map(|s| PatchObjective::new(model, s, &surfaces))
        .collect::<Result<Vec<_>>>()?;

    let initial_loss = mean_split_loss(&objectives, &patches)?;
    let mut best = (initial_loss, 0, patches.clone());
    let mut history = vec![(0, initial_loss)];
    let mut velocity: Vec<Vec<f64>> = patches.iter().map(|p| vec![0.0; p.texels.len()]).collect();
    for step in 1..=opts.steps {
        let idx = batch_indices(opts.seed, step, objectives.len(), opts.batch);
        let grads = idx
            .par_iter()
            .map(|&i| objectives[i].loss_and_patch_grad(&patches).map(|(_, g)| g))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / idx.len() as f64;
        for (k, (p, v)) in patches.iter_mut().zip(velocity.iter_mut()).enumerate() {
            let mean: Vec<f64> = (0..v.len())
                .map(|t| grads.iter().map(|g| g[k][t]).sum::<f64>() * inv)
                .collect();
            ascent_step(p, v, &mean, opts);
        }
        if step % opts.eval_every == 0 || step == opts.steps {
            let loss = mean_split_loss(&objectives, &patches)?;
            history.push((step, loss));
            if loss > best.0 {
                best = (loss, step, patches.clone());
            }
        }
    }
    let (best_loss, best_step, patches) = best;
    Ok(AttackResult {
        patches,
        surfaces,
        initial_loss,
        best_loss,
        best_step,
        history,
    })
}

/// Provenance stored next to a saved patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub situation: String,
    pub surface_id: u32,
    pub task: crate::scene::Task,
    pub model_fingerprint: String,
    pub options: AttackOptions,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
    pub patch_fingerprint: String,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes the 8-bit PNG and its JSON sidecar. The sidecar fingerprint is
/// that of the quantized texture, i.e. of what a later load returns.
pub fn save_patch(png: &Path, patch: &PatchTexture, mut sidecar: PatchSidecar) -> Result<()> {
    save_patch_png(png, patch)?;
    sidecar.patch_fingerprint = load_patch_png(png)?.fingerprint();
    let side = sidecar_path(png);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_sidecar(png: &Path) -> Result<PatchSidecar> {
    let side = sidecar_path(png);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))
}

/// Task metric on clean, random-patch, and adversarial twin splits, with
/// deltas against the clean baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub task: crate::scene::Task,
    pub metric: String,
    pub clean: f64,
    pub random: f64,
    pub adv: f64,
    /// `adv - clean`.
    pub delta_adv: f64,
    /// `random - clean`.
    pub delta_random: f64,
    pub clean_loss: f64,
    pub random_loss: f64,
    pub adv_loss: f64,
    pub reports: [MetricReport; 3],
}

pub fn attack_report(model: &SurrogateModel, clean: &Dataset, random: &Dataset, adv: &Dataset) -> Result<AttackReport> {
    for ds in [clean, random, adv] {
        if ds.task() != model.task {
            return Err(Error::TaskMismatch {
                expected: model.task,
                actual: ds.task(),
            });
        }
    }
    clean.manifest.check_twin(&random.manifest)?;
    clean.manifest.check_twin(&adv.manifest)?;
    let [c, r, a] = [clean, random, adv].map(|ds| evaluate_split(model, ds, None));
    let (c, r, a) = (c?, r?, a?);
    Ok(AttackReport {
        task: model.task,
        metric: c.report.metric.clone(),
        clean: c.report.value,
        random: r.report.value,
        adv: a.report.value,
        delta_adv: a.report.value - c.report.value,
        delta_random: r.report.value - c.report.value,
        clean_loss: c.mean_loss,
        random_loss: r.mean_loss,
        adv_loss: a.mean_loss,
        reports: [c.report, r.report, a.report],
    })
}
