//! On-disk splits in the four task formats, pose metadata, and split generation.
//!
//! A split lives in `<root_dir>/<split>/`. Besides the task tree every split
//! holds `manifest.json`, `poses/<name>.json`, and `surfaces/<name>.png`, an
//! 8-bit map with `surface_id + 1` on pixels showing an attackable surface
//! (0 elsewhere). The surface maps let attacks re-composite patches onto stored
//! images without re-rendering.

pub mod coco;
pub mod kitti;
pub mod png;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{
    annotate, cityscapes_id, depth_annotation, from_cityscapes_id, AnnotationConfig, Box2D, DepthMap,
    SemanticMap, TaskAnnotation,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraRig, Eye, PlanarSurface, Pose};
use crate::render::{composite_patches, render, FrameBuffers, LightingParams, PatchTexture, PixelRect};
use crate::scene::{
    find_situation, sample_scene, surface_instance_id, AttackSituation, CollectionConfig, NpcDensity,
    ScenePlacement, SimulationConfig, SurfaceKind, Task, TaskProfile, WeatherPreset,
};

/// Tolerance on the extrinsic rotation block when reading pose files.
pub const POSE_ORTHONORMAL_TOL: f64 = 1e-6;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NO_PATCH: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub task: Task,
    pub root_dir: PathBuf,
    pub split: String,
    pub sample_count: usize,
    pub seed: u64,
    pub situation: String,
    /// SHA-256 over the patch textures, or `"none"`.
    pub patch_fingerprint: String,
    pub town: String,
    pub weather: WeatherPreset,
    pub npc_density: NpcDensity,
    pub patched_surface_ids: Vec<u32>,
    pub image_width: u32,
    pub image_height: u32,
    pub names: Vec<String>,
}

impl SplitManifest {
    pub fn is_patched(&self) -> bool {
        self.patch_fingerprint != NO_PATCH
    }

    /// Twins come from the same task, seed, situation, and sample set; only
    /// their patches may differ.
    pub fn check_twin(&self, other: &SplitManifest) -> Result<()> {
        let mut diffs = Vec::new();
        if self.task != other.task {
            diffs.push(format!("task {} vs {}", self.task, other.task));
        }
        if self.seed != other.seed {
            diffs.push(format!("seed {} vs {}", self.seed, other.seed));
        }
        if self.situation != other.situation {
            diffs.push(format!("situation {} vs {}", self.situation, other.situation));
        }
        if self.names != other.names {
            diffs.push(format!("sample sets differ ({} vs {} samples)", self.sample_count, other.sample_count));
        }
        if (self.image_width, self.image_height) != (other.image_width, other.image_height) {
            diffs.push("image sizes differ".into());
        }
        if self.weather != other.weather || self.npc_density != other.npc_density {
            diffs.push("simulation settings differ".into());
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::NotTwins(diffs.join("; ")))
        }
    }
}

pub fn sample_name(situation: &str, seed: u64, index: u64) -> String {
    format!("{situation}_{seed}_{index:05}")
}

/// Row-major 3x4 `[R | t]`.
pub type Matrix34 = [[f64; 4]; 3];

pub fn pose_to_matrix(pose: &Pose) -> Matrix34 {
    let mut m = [[0.0; 4]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for c in 0..3 {
            row[c] = pose.rotation[(r, c)];
        }
        row[3] = pose.translation[r];
    }
    m
}

pub fn matrix_to_pose(m: &Matrix34, path: &Path) -> Result<Pose> {
    let rotation = nalgebra::Matrix3::from_fn(|r, c| m[r][c]);
    let translation = nalgebra::Vector3::new(m[0][3], m[1][3], m[2][3]);
    let err = (rotation.transpose() * rotation - nalgebra::Matrix3::identity()).abs().max();
    if !err.is_finite() || err > POSE_ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
        return Err(Error::format(path, format!("rotation block is not orthonormal (error {err:e})")));
    }
    Ok(Pose { rotation, translation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRecord {
    pub surface_id: u32,
    /// World-to-surface, like the camera extrinsic.
    pub pose: Matrix34,
    pub width_m: f64,
    pub height_m: f64,
    pub kind: SurfaceKind,
    /// Lambertian shading of the side facing the camera.
    pub shading: f64,
}

impl SurfaceRecord {
    pub fn planar(&self, path: &Path) -> Result<PlanarSurface> {
        Ok(PlanarSurface {
            pose: matrix_to_pose(&self.pose, path)?,
            width_m: self.width_m,
            height_m: self.height_m,
            surface_id: self.surface_id,
        })
    }
}

/// Camera and surface geometry of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub name: String,
    pub index: u64,
    pub intrinsics: CameraIntrinsics,
    /// World-to-left-camera.
    pub extrinsic: Matrix34,
    pub baseline_m: f64,
    pub surfaces: Vec<SurfaceRecord>,
    pub lighting: LightingParams,
}

impl PoseRecord {
    fn build(name: &str, scene: &ScenePlacement, rig: &CameraRig, fb: &FrameBuffers) -> Self {
        let surfaces = scene
            .surfaces_sorted()
            .into_iter()
            .map(|s| {
                let id = s.instance_id();
                let shading = fb
                    .instance_id
                    .iter()
                    .position(|&v| v == id)
                    .map(|i| fb.shading[i])
                    .unwrap_or_else(|| scene.lighting.shade(&s.surface.normal()));
                SurfaceRecord {
                    surface_id: s.surface.surface_id,
                    pose: pose_to_matrix(&s.surface.pose),
                    width_m: s.surface.width_m,
                    height_m: s.surface.height_m,
                    kind: s.kind,
                    shading,
                }
            })
            .collect();
        Self {
            name: name.to_string(),
            index: scene.sample_index,
            intrinsics: rig.intrinsics,
            extrinsic: pose_to_matrix(&rig.pose),
            baseline_m: rig.baseline_m,
            surfaces,
            lighting: scene.lighting,
        }
    }

    pub fn rig(&self, path: &Path) -> Result<CameraRig> {
        Ok(CameraRig {
            intrinsics: self.intrinsics,
            pose: matrix_to_pose(&self.extrinsic, path)?,
            baseline_m: self.baseline_m,
        })
    }
}

/// One loaded or freshly generated sample. Images are 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
    pub rgb_right: Option<Vec<u8>>,
    pub surface_map: Vec<u8>,
    pub surface_map_right: Option<Vec<u8>>,
    pub annotation: TaskAnnotation,
    /// Dense left-camera depth for stereo samples (the stereo model's depth target).
    pub aux_depth: Option<DepthMap>,
    pub pose: PoseRecord,
    rig: CameraRig,
    surfaces: Vec<PlanarSurface>,
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn surface_map(fb: &FrameBuffers) -> Vec<u8> {
    fb.instance_id
        .iter()
        .map(|&id| {
            if id >= surface_instance_id(0) && id < surface_instance_id(255) {
                (id - surface_instance_id(0) + 1) as u8
            } else {
                0
            }
        })
        .collect()
}

impl Sample {
    pub fn from_render(
        name: String,
        scene: &ScenePlacement,
        rig: &CameraRig,
        left: &FrameBuffers,
        right: Option<&FrameBuffers>,
        annotation: TaskAnnotation,
        aux_depth: Option<DepthMap>,
    ) -> Self {
        let pose = PoseRecord::build(&name, scene, rig, left);
        let surfaces = scene.surfaces_sorted().into_iter().map(|s| s.surface).collect();
        Self {
            name,
            width: left.width,
            height: left.height,
            rgb: left.rgb.iter().map(|&v| to_u8(v)).collect(),
            rgb_right: right.map(|fb| fb.rgb.iter().map(|&v| to_u8(v)).collect()),
            surface_map: surface_map(left),
            surface_map_right: right.map(surface_map),
            annotation,
            aux_depth,
            pose,
            rig: *rig,
            surfaces,
        }
    }

    fn from_parts(
        name: String,
        rgb: (Vec<u8>, Option<Vec<u8>>),
        maps: (Vec<u8>, Option<Vec<u8>>),
        annotation: TaskAnnotation,
        aux_depth: Option<DepthMap>,
        pose: PoseRecord,
        pose_path: &Path,
    ) -> Result<Self> {
        let rig = pose.rig(pose_path)?;
        let surfaces = pose
            .surfaces
            .iter()
            .map(|s| s.planar(pose_path))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name,
            width: pose.intrinsics.width,
            height: pose.intrinsics.height,
            rgb: rgb.0,
            rgb_right: rgb.1,
            surface_map: maps.0,
            surface_map_right: maps.1,
            annotation,
            aux_depth,
            pose,
            rig,
            surfaces,
        })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    /// Attackable surfaces in ascending id order.
    pub fn surfaces(&self) -> &[PlanarSurface] {
        &self.surfaces
    }

    pub fn surface(&self, surface_id: u32) -> Option<&PlanarSurface> {
        self.surfaces.iter().find(|s| s.surface_id == surface_id)
    }

    pub fn eyes(&self) -> &'static [Eye] {
        if self.rgb_right.is_some() {
            &[Eye::Left, Eye::Right]
        } else {
            &[Eye::Mono]
        }
    }

    fn eye_data(&self, eye: Eye) -> (&[u8], &[u8]) {
        match eye {
            Eye::Right => (
                self.rgb_right.as_deref().expect("right image on a mono sample"),
                self.surface_map_right.as_deref().expect("right surface map on a mono sample"),
            ),
            _ => (&self.rgb, &self.surface_map),
        }
    }

    /// Image in [0, 1] as f64, RGB interleaved.
    pub fn image(&self, eye: Eye) -> Vec<f64> {
        self.eye_data(eye).0.iter().map(|&v| f64::from(v) / 255.0).collect()
    }

    pub fn full_rect(&self) -> PixelRect {
        PixelRect {
            x0: 0,
            y0: 0,
            width: self.width,
            height: self.height,
        }
    }

    /// Buffers for compositing patches onto the stored image inside `rect`:
    /// RGB, surface instance ids, and per-surface shading. Depth and semantic
    /// channels are left blank.
    pub fn frame_buffers(&self, eye: Eye, rect: PixelRect) -> FrameBuffers {
        let (rgb, map) = self.eye_data(eye);
        let mut fb = FrameBuffers::blank(rect, eye, self.pose.lighting.desaturation);
        let w = self.width as usize;
        let mut k = 0;
        for y in rect.y0..rect.y0 + rect.height {
            for x in rect.x0..rect.x0 + rect.width {
                let i = y as usize * w + x as usize;
                for c in 0..3 {
                    fb.rgb[3 * k + c] = f64::from(rgb[3 * i + c]) / 255.0;
                }
                let m = map[i];
                if m > 0 {
                    let id = u32::from(m - 1);
                    fb.instance_id[k] = surface_instance_id(id);
                    if let Some(s) = self.pose.surfaces.iter().find(|s| s.surface_id == id) {
                        fb.shading[k] = s.shading;
                    }
                }
                k += 1;
            }
        }
        fb
    }

    /// Pixels showing any of `surface_ids`.
    pub fn surface_mask(&self, eye: Eye, surface_ids: &[u32]) -> Vec<bool> {
        self.eye_data(eye)
            .1
            .iter()
            .map(|&m| m > 0 && surface_ids.contains(&u32::from(m - 1)))
            .collect()
    }

    /// Bounding rectangle of the pixels showing `surface_id`.
    pub fn surface_bounds(&self, eye: Eye, surface_id: u32) -> Option<PixelRect> {
        let map = self.eye_data(eye).1;
        let key = u8::try_from(surface_id + 1).ok()?;
        let w = self.width as usize;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in map.iter().enumerate().filter(|(_, &m)| m == key) {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| PixelRect {
            x0: x0 as u32,
            y0: y0 as u32,
            width: (x1 - x0 + 1) as u32,
            height: (y1 - y0 + 1) as u32,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn task(&self) -> Task {
        self.manifest.task
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground-truth patch mask (left or mono eye) of every sample.
    pub fn patch_masks(&self) -> Vec<Vec<bool>> {
        self.samples
            .iter()
            .map(|s| s.surface_mask(s.eyes()[0], &self.manifest.patched_surface_ids))
            .collect()
    }
}

/// Task-dependent file locations inside a split directory.
struct Layout<'a> {
    dir: &'a Path,
    split: &'a str,
    town: &'a str,
}

impl Layout<'_> {
    fn image(&self, task: Task, name: &str) -> PathBuf {
        match task {
            Task::SemanticSegmentation => self
                .dir
                .join("leftImg8bit")
                .join(self.split)
                .join(self.town)
                .join(format!("{name}_leftImg8bit.png")),
            Task::Detection2D => self.dir.join("images").join(self.split).join(format!("{name}.png")),
            Task::StereoDetection3D => self.dir.join("image_2").join(format!("{name}.png")),
            Task::MonocularDepth => self.dir.join("image").join(format!("{name}.png")),
        }
    }

    fn right_image(&self, name: &str) -> PathBuf {
        self.dir.join("image_3").join(format!("{name}.png"))
    }

    fn seg_labels(&self, name: &str) -> PathBuf {
        self.dir
            .join("gtFine")
            .join(self.split)
            .join(self.town)
            .join(format!("{name}_gtFine_labelIds.png"))
    }

    fn coco(&self) -> PathBuf {
        self.dir.join("annotations").join(format!("instances_{}.json", self.split))
    }

    fn kitti_label(&self, name: &str) -> PathBuf {
        self.dir.join("label_2").join(format!("{name}.txt"))
    }

    fn calib(&self, name: &str) -> PathBuf {
        self.dir.join("calib").join(format!("{name}.txt"))
    }

    fn depth(&self, name: &str) -> PathBuf {
        self.dir.join("depth").join(format!("{name}.png"))
    }

    fn stereo_depth(&self, name: &str) -> PathBuf {
        self.dir.join("depth_2").join(format!("{name}.png"))
    }

    fn pose(&self, name: &str) -> PathBuf {
        self.dir.join("poses").join(format!("{name}.json"))
    }

    fn surfaces(&self, name: &str, right: bool) -> PathBuf {
        let suffix = if right { "_right" } else { "" };
        self.dir.join("surfaces").join(format!("{name}{suffix}.png"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::format(path, "file is missing"));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn encode_depth(d: &DepthMap) -> Vec<u16> {
    d.depth_m.iter().map(|&v| (f64::from(v) * 256.0).round() as u16).collect()
}

fn decode_depth(values: Vec<u16>, width: u32, height: u32) -> DepthMap {
    DepthMap {
        width,
        height,
        depth_m: values.into_iter().map(|v| (f64::from(v) / 256.0) as f32).collect(),
    }
}

/// Directory of a split: `<root_dir>/<split>`.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

fn write_sample(layout: &Layout, task: Task, s: &Sample) -> Result<()> {
    let (w, h) = (s.width, s.height);
    png::write_rgb8(&layout.image(task, &s.name), &s.rgb, w, h)?;
    png::write_gray8(&layout.surfaces(&s.name, false), &s.surface_map, w, h)?;
    if let (Some(rgb), Some(map)) = (&s.rgb_right, &s.surface_map_right) {
        png::write_rgb8(&layout.right_image(&s.name), rgb, w, h)?;
        png::write_gray8(&layout.surfaces(&s.name, true), map, w, h)?;
    }
    match &s.annotation {
        TaskAnnotation::Semantic(m) => {
            let ids: Vec<u8> = m.labels.iter().map(|&l| cityscapes_id(l)).collect();
            png::write_gray8(&layout.seg_labels(&s.name), &ids, m.width, m.height)?;
        }
        TaskAnnotation::Boxes2D(_) => {}
        TaskAnnotation::Boxes3D(boxes) => {
            write_text(&layout.kitti_label(&s.name), &kitti::format_labels(boxes))?;
            write_text(&layout.calib(&s.name), &kitti::format_calib(&s.pose.intrinsics, s.pose.baseline_m))?;
        }
        TaskAnnotation::Depth(d) => {
            png::write_gray16(&layout.depth(&s.name), &encode_depth(d), d.width, d.height)?;
        }
    }
    if let Some(d) = &s.aux_depth {
        png::write_gray16(&layout.stereo_depth(&s.name), &encode_depth(d), d.width, d.height)?;
    }
    let json = serde_json::to_string_pretty(&s.pose).expect("pose record serializes");
    write_text(&layout.pose(&s.name), &json)
}

/// Writes `dataset` under `<root_dir>/<split>/`, replacing a previous split
/// there. Returns the split directory.
pub fn write_split(dataset: &Dataset) -> Result<PathBuf> {
    let m = &dataset.manifest;
    let dir = split_dir(&m.root_dir, &m.split);
    for s in &dataset.samples {
        if s.annotation.task() != m.task {
            return Err(Error::format(
                &dir,
                format!("sample {} carries {} annotations in a {} split", s.name, s.annotation.task(), m.task),
            ));
        }
    }
    if m.sample_count != dataset.samples.len() {
        return Err(Error::format(&dir, "manifest sample count does not match the samples"));
    }
    if dir.join(MANIFEST_FILE).exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let layout = Layout {
        dir: &dir,
        split: &m.split,
        town: &m.town,
    };
    dataset
        .samples
        .par_iter()
        .map(|s| write_sample(&layout, m.task, s))
        .collect::<Result<Vec<()>>>()?;
    if m.task == Task::Detection2D {
        let images: Vec<(String, u32, u32, &[Box2D])> = dataset
            .samples
            .iter()
            .map(|s| {
                let boxes: &[Box2D] = match &s.annotation {
                    TaskAnnotation::Boxes2D(b) => b,
                    _ => unreachable!("checked above"),
                };
                (format!("{}.png", s.name), s.width, s.height, boxes)
            })
            .collect();
        let file = coco::build(&images);
        let json = serde_json::to_string_pretty(&file).expect("coco file serializes");
        write_text(&layout.coco(), &json)?;
    }
    let json = serde_json::to_string_pretty(m).expect("manifest serializes");
    write_text(&dir.join(MANIFEST_FILE), &json)?;
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<SplitManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = read_text(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn check_dims(path: &Path, got: (u32, u32), want: (u32, u32)) -> Result<()> {
    if got != want {
        return Err(Error::format(
            path,
            format!("image is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1),
        ));
    }
    Ok(())
}

fn read_sample(
    layout: &Layout,
    task: Task,
    name: &str,
    coco_boxes: Option<&std::collections::BTreeMap<String, Vec<Box2D>>>,
) -> Result<Sample> {
    let pose_path = layout.pose(name);
    let pose: PoseRecord =
        serde_json::from_str(&read_text(&pose_path)?).map_err(|e| Error::format(&pose_path, e.to_string()))?;
    let dims = (pose.intrinsics.width, pose.intrinsics.height);

    let img_path = layout.image(task, name);
    let (rgb, w, h) = png::read_rgb8(&img_path)?;
    check_dims(&img_path, (w, h), dims)?;
    let map_path = layout.surfaces(name, false);
    let (map, w, h) = png::read_gray8(&map_path)?;
    check_dims(&map_path, (w, h), dims)?;

    let (mut rgb_right, mut map_right, mut aux_depth) = (None, None, None);
    let annotation = match task {
        Task::SemanticSegmentation => {
            let path = layout.seg_labels(name);
            let (ids, w, h) = png::read_gray8(&path)?;
            check_dims(&path, (w, h), dims)?;
            let labels = ids
                .iter()
                .map(|&id| from_cityscapes_id(id).ok_or_else(|| Error::format(&path, format!("unmapped label id {id}"))))
                .collect::<Result<Vec<u8>>>()?;
            TaskAnnotation::Semantic(SemanticMap {
                width: w,
                height: h,
                labels,
            })
        }
        Task::Detection2D => {
            let boxes = coco_boxes
                .and_then(|m| m.get(name))
                .ok_or_else(|| Error::format(layout.coco(), format!("no image entry for {name}")))?;
            TaskAnnotation::Boxes2D(boxes.clone())
        }
        Task::StereoDetection3D => {
            let path = layout.right_image(name);
            let (r, w, h) = png::read_rgb8(&path)?;
            check_dims(&path, (w, h), dims)?;
            rgb_right = Some(r);
            let path = layout.surfaces(name, true);
            let (m, w, h) = png::read_gray8(&path)?;
            check_dims(&path, (w, h), dims)?;
            map_right = Some(m);
            let path = layout.stereo_depth(name);
            let (d, w, h) = png::read_gray16(&path)?;
            check_dims(&path, (w, h), dims)?;
            aux_depth = Some(decode_depth(d, w, h));
            let path = layout.calib(name);
            kitti::parse_calib(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
            let path = layout.kitti_label(name);
            let boxes = kitti::parse_labels(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
            TaskAnnotation::Boxes3D(boxes)
        }
        Task::MonocularDepth => {
            let path = layout.depth(name);
            let (d, w, h) = png::read_gray16(&path)?;
            check_dims(&path, (w, h), dims)?;
            TaskAnnotation::Depth(decode_depth(d, w, h))
        }
    };
    Sample::from_parts(
        name.to_string(),
        (rgb, rgb_right),
        (map, map_right),
        annotation,
        aux_depth,
        pose,
        &pose_path,
    )
}

/// Loads `<root>/<split>/`. The manifest must exist and name `task`.
pub fn read_split(root: &Path, split: &str, task: Task) -> Result<Dataset> {
    read_split_dir(&split_dir(root, split), task)
}

pub fn read_split_dir(dir: &Path, task: Task) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.task != task {
        return Err(Error::TaskMismatch {
            expected: task,
            actual: manifest.task,
        });
    }
    if manifest.names.len() != manifest.sample_count {
        return Err(Error::format(dir.join(MANIFEST_FILE), "sample_count does not match names"));
    }
    let layout = Layout {
        dir,
        split: &manifest.split,
        town: &manifest.town,
    };
    let coco_boxes = if task == Task::Detection2D {
        let path = layout.coco();
        Some(coco::parse(&read_text(&path)?, &path)?)
    } else {
        None
    };
    let samples = manifest
        .names
        .par_iter()
        .map(|name| read_sample(&layout, task, name, coco_boxes.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

/// Renders and annotates one sample with `patches` drawn on the surfaces.
pub fn generate_sample(
    situation: &AttackSituation,
    sim: &SimulationConfig,
    profile: &TaskProfile,
    index: u64,
    patches: &[PatchTexture],
    annotation_cfg: &AnnotationConfig,
) -> Result<Sample> {
    let scene = sample_scene(situation, sim, index)?;
    let rig = profile.rig(&scene);
    let task = profile.task;
    let draw = |eye: Eye| -> Result<FrameBuffers> {
        let mut fb = render(&scene, &rig, eye);
        composite_patches(&mut fb, &scene, patches, &rig)?;
        Ok(fb)
    };
    let (left, right) = if task.is_stereo() {
        (draw(Eye::Left)?, Some(draw(Eye::Right)?))
    } else {
        (draw(Eye::Mono)?, None)
    };
    let annotation = annotate(task, &left, &scene, &rig, annotation_cfg);
    let aux_depth = task.is_stereo().then(|| depth_annotation(&left));
    let name = sample_name(&situation.name, sim.seed, index);
    Ok(Sample::from_render(name, &scene, &rig, &left, right.as_ref(), annotation, aux_depth))
}

/// Fingerprint of a patch set, or `"none"` when empty.
pub fn patches_fingerprint(patches: &[PatchTexture]) -> String {
    match patches {
        [] => NO_PATCH.to_string(),
        [one] => one.fingerprint(),
        many => {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            for p in many {
                h.update(p.fingerprint().as_bytes());
            }
            hex::encode(h.finalize())
        }
    }
}

/// Builds a split in memory. The collection seed (if set) overrides `sim.seed`.
pub fn generate_dataset(
    cfg: &CollectionConfig,
    sim: &SimulationConfig,
    profile: &TaskProfile,
    patches: &[PatchTexture],
) -> Result<Dataset> {
    cfg.validate()?;
    let situation = find_situation(&cfg.situation_name)?;
    generate_dataset_for(cfg, sim, &situation, profile, patches)
}

/// As [`generate_dataset`] for an explicit (possibly customised) situation.
pub fn generate_dataset_for(
    cfg: &CollectionConfig,
    sim: &SimulationConfig,
    situation: &AttackSituation,
    profile: &TaskProfile,
    patches: &[PatchTexture],
) -> Result<Dataset> {
    if profile.task != cfg.task {
        return Err(Error::TaskMismatch {
            expected: cfg.task,
            actual: profile.task,
        });
    }
    if patches.len() > situation.surfaces.len() {
        return Err(Error::InvalidConfig(format!(
            "{} patches for {} surface(s) of `{}`",
            patches.len(),
            situation.surfaces.len(),
            situation.name
        )));
    }
    let mut surface_ids: Vec<u32> = situation.surfaces.iter().map(|s| s.surface.surface_id).collect();
    surface_ids.sort_unstable();
    for (p, id) in patches.iter().zip(&surface_ids) {
        let s = situation
            .surfaces
            .iter()
            .find(|t| t.surface.surface_id == *id)
            .expect("id from the situation");
        p.check_aspect(&s.surface)?;
    }
    let sim = SimulationConfig {
        seed: cfg.effective_seed(sim),
        ..*sim
    };
    let annotation_cfg = AnnotationConfig::default();
    let samples = (0..cfg.num_samples as u64)
        .into_par_iter()
        .map(|i| generate_sample(situation, &sim, profile, i, patches, &annotation_cfg))
        .collect::<Result<Vec<_>>>()?;
    let manifest = SplitManifest {
        task: cfg.task,
        root_dir: cfg.root_dir.clone(),
        split: cfg.split.clone(),
        sample_count: samples.len(),
        seed: sim.seed,
        situation: situation.name.clone(),
        patch_fingerprint: patches_fingerprint(patches),
        town: cfg.town.clone(),
        weather: sim.weather_preset,
        npc_density: sim.npc_density,
        patched_surface_ids: surface_ids[..patches.len()].to_vec(),
        image_width: profile.width,
        image_height: profile.height,
        names: samples.iter().map(|s| s.name.clone()).collect(),
    };
    Ok(Dataset { manifest, samples })
}

/// Loads the configured patches, generates, and writes the split.
pub fn generate_split(cfg: &CollectionConfig, sim: &SimulationConfig) -> Result<SplitManifest> {
    let patches = cfg
        .patch_paths
        .iter()
        .map(|p| load_patch_png(p))
        .collect::<Result<Vec<_>>>()?;
    let profile = cfg.profile();
    let dataset = generate_dataset(cfg, sim, &profile, &patches)?;
    write_split(&dataset)?;
    Ok(dataset.manifest)
}

/// Stores texels as 8-bit RGB with value `round(t * 255)`.
pub fn save_patch_png(path: &Path, patch: &PatchTexture) -> Result<()> {
    let bytes: Vec<u8> = patch.texels.iter().map(|&t| to_u8(t)).collect();
    png::write_rgb8(path, &bytes, patch.cols as u32, patch.rows as u32)
}

pub fn load_patch_png(path: &Path) -> Result<PatchTexture> {
    let (bytes, w, h) = png::read_rgb8(path)?;
    PatchTexture::new(h as usize, w as usize, bytes.iter().map(|&v| f64::from(v) / 255.0).collect())
}
