//! Ground truth from rendered buffers and scene state.
//!
//! Visibility is measured by counting an object's pixels in the instance
//! buffer against the pixels it covers when rendered alone. Objects below the
//! visibility or area thresholds are not annotated.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::polygon::{area, clip_convex, convex_hull};
use crate::geometry::{wrap_angle, CameraRig, Eye};
use crate::render::{cuboid_coverage, label, FrameBuffers, PixelRect};
use crate::scene::{ObjectClass, ScenePlacement, Task};

/// Largest depth the 16-bit, 1/256 m encoding can hold.
pub const MAX_DEPTH_M: f64 = 655.35;
/// Depths are stored on this grid so the on-disk encoding is exact.
pub const DEPTH_STEP_M: f64 = 1.0 / 256.0;

/// Visibility and occlusion thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationConfig {
    pub min_visible_fraction: f64,
    pub min_pixels: usize,
    /// Visible fraction at or above which occlusion is 0.
    pub fully_visible: f64,
    /// Visible fraction at or above which occlusion is 1 (else 2).
    pub partly_visible: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            min_visible_fraction: 0.25,
            min_pixels: 64,
            fully_visible: 0.85,
            partly_visible: 0.5,
        }
    }
}

impl AnnotationConfig {
    pub fn occlusion_level(&self, visible_fraction: f64) -> u8 {
        if visible_fraction >= self.fully_visible {
            0
        } else if visible_fraction >= self.partly_visible {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

/// Ground-truth 2D box; `bbox` is `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub class: ObjectClass,
    pub bbox: [f64; 4],
    pub visible_fraction: f64,
    pub instance_id: u32,
}

/// KITTI-style 3D box in the left camera frame (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub class: ObjectClass,
    /// (height, width, length) in metres.
    pub dimensions: [f64; 3],
    /// Bottom centre of the box.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub alpha: f64,
    pub truncation: f64,
    pub occlusion: u8,
    /// (left, top, right, bottom) in pixels.
    pub bbox2d: [f64; 4],
    /// Detection confidence; `None` for ground truth.
    pub score: Option<f64>,
}

/// Depth in metres on the 1/256 m grid; 0 marks invalid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depth_m: Vec<f32>,
}

impl DepthMap {
    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        let d = self.depth_m[i];
        d > 0.0 && f64::from(d) <= MAX_DEPTH_M
    }

    pub fn valid_count(&self) -> usize {
        (0..self.depth_m.len()).filter(|&i| self.is_valid(i)).count()
    }
}

/// Quantizes a depth to the storage grid, or 0 when it cannot be stored.
pub fn quantize_depth(d: f64) -> f32 {
    if !d.is_finite() || d <= 0.0 {
        return 0.0;
    }
    let q = (d * 256.0).round();
    if !(1.0..=65535.0).contains(&q) {
        0.0
    } else {
        (q / 256.0) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskAnnotation {
    Semantic(SemanticMap),
    Boxes2D(Vec<Box2D>),
    Boxes3D(Vec<Box3D>),
    Depth(DepthMap),
}

impl TaskAnnotation {
    pub fn task(&self) -> Task {
        match self {
            TaskAnnotation::Semantic(_) => Task::SemanticSegmentation,
            TaskAnnotation::Boxes2D(_) => Task::Detection2D,
            TaskAnnotation::Boxes3D(_) => Task::StereoDetection3D,
            TaskAnnotation::Depth(_) => Task::MonocularDepth,
        }
    }
}

pub fn semantic_annotation(fb: &FrameBuffers) -> SemanticMap {
    SemanticMap {
        width: fb.width,
        height: fb.height,
        labels: fb.semantic_id.clone(),
    }
}

pub fn depth_annotation(fb: &FrameBuffers) -> DepthMap {
    DepthMap {
        width: fb.width,
        height: fb.height,
        depth_m: fb.depth_m.iter().map(|&d| quantize_depth(d)).collect(),
    }
}

pub fn patch_mask_gt(fb: &FrameBuffers) -> Vec<bool> {
    fb.patch_region.clone()
}

/// One NPC's visible pixels, including any surface it carries.
struct Visibility {
    npc: usize,
    fraction: f64,
    bounds: PixelRect,
}

fn visibilities(fb: &FrameBuffers, scene: &ScenePlacement, rig: &CameraRig, cfg: &AnnotationConfig) -> Vec<Visibility> {
    let w = fb.width as usize;
    let n = scene.npc_boxes.len();
    // Map instance ids to owning NPC indices.
    let mut owner_of_surface = std::collections::HashMap::new();
    for s in &scene.surfaces {
        if let Some(o) = s.owner {
            owner_of_surface.insert(s.instance_id(), o);
        }
    }
    let mut counts = vec![0usize; n];
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for (i, &id) in fb.instance_id.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let npc = if (id as usize) <= n {
            Some(id as usize - 1)
        } else {
            owner_of_surface.get(&id).copied()
        };
        if let Some(k) = npc {
            counts[k] += 1;
            let (x, y) = (i % w, i / w);
            let b = &mut bounds[k];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
    }
    let mut out = Vec::new();
    for k in 0..n {
        if counts[k] == 0 || counts[k] < cfg.min_pixels {
            continue;
        }
        let (coverage, _) = cuboid_coverage(&scene.npc_boxes[k].cuboid, rig, fb.eye);
        if coverage == 0 {
            continue;
        }
        let fraction = (counts[k] as f64 / coverage as f64).min(1.0);
        if fraction < cfg.min_visible_fraction {
            continue;
        }
        let b = bounds[k];
        out.push(Visibility {
            npc: k,
            fraction,
            bounds: PixelRect {
                x0: fb.x0 + b.0 as u32,
                y0: fb.y0 + b.1 as u32,
                width: (b.2 - b.0 + 1) as u32,
                height: (b.3 - b.1 + 1) as u32,
            },
        });
    }
    out
}

/// Visible 2D boxes, in NPC order.
pub fn boxes_2d(fb: &FrameBuffers, scene: &ScenePlacement, rig: &CameraRig, cfg: &AnnotationConfig) -> Vec<Box2D> {
    visibilities(fb, scene, rig, cfg)
        .into_iter()
        .map(|v| {
            let npc = &scene.npc_boxes[v.npc];
            Box2D {
                class: npc.class,
                bbox: [
                    f64::from(v.bounds.x0),
                    f64::from(v.bounds.y0),
                    f64::from(v.bounds.width),
                    f64::from(v.bounds.height),
                ],
                visible_fraction: v.fraction,
                instance_id: npc.instance_id,
            }
        })
        .collect()
}

const TRUNCATION_NEAR_M: f64 = 0.1;

/// Fraction of the box's projected outline that falls outside the image.
pub fn truncation(corners_cam: &[Vector3<f64>; 8], rig: &CameraRig) -> f64 {
    const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (2, 3),
        (4, 5),
        (6, 7),
        (0, 2),
        (1, 3),
        (4, 6),
        (5, 7),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
    let intr = &rig.intrinsics;
    let project = |p: &Vector3<f64>| Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy);
    // Clip the solid against the near plane, then project.
    let mut pts: Vec<Vector2<f64>> = corners_cam
        .iter()
        .filter(|p| p.z > TRUNCATION_NEAR_M)
        .map(project)
        .collect();
    for (a, b) in EDGES {
        let (pa, pb) = (corners_cam[a], corners_cam[b]);
        if (pa.z > TRUNCATION_NEAR_M) != (pb.z > TRUNCATION_NEAR_M) {
            let t = (TRUNCATION_NEAR_M - pa.z) / (pb.z - pa.z);
            pts.push(project(&(pa + (pb - pa) * t)));
        }
    }
    let hull = convex_hull(&pts);
    let full = area(&hull);
    if full <= 0.0 {
        return 1.0;
    }
    let (w, h) = (f64::from(intr.width), f64::from(intr.height));
    let image = [
        Vector2::new(0.0, 0.0),
        Vector2::new(w, 0.0),
        Vector2::new(w, h),
        Vector2::new(0.0, h),
    ];
    let inside = area(&clip_convex(&hull, &image));
    (1.0 - inside / full).clamp(0.0, 1.0)
}

/// KITTI-style labels for visible NPCs, in the buffers' camera frame.
pub fn boxes_3d(scene: &ScenePlacement, rig: &CameraRig, fb: &FrameBuffers, cfg: &AnnotationConfig) -> Vec<Box3D> {
    let cam = rig.eye_pose(fb.eye);
    visibilities(fb, scene, rig, cfg)
        .into_iter()
        .map(|v| {
            let npc = &scene.npc_boxes[v.npc];
            let c = &npc.cuboid;
            let loc = cam.apply(&c.bottom_center());
            let heading = cam.rotation * Vector3::new(c.yaw.cos(), c.yaw.sin(), 0.0);
            let rotation_y = wrap_angle((-heading.z).atan2(heading.x));
            let alpha = wrap_angle(rotation_y - loc.x.atan2(loc.z));
            let corners = c.corners().map(|p| cam.apply(&p));
            let b = v.bounds;
            Box3D {
                class: npc.class,
                dimensions: [c.dims.2, c.dims.1, c.dims.0],
                location: [loc.x, loc.y, loc.z],
                rotation_y,
                alpha,
                truncation: truncation(&corners, rig),
                occlusion: cfg.occlusion_level(v.fraction),
                bbox2d: [
                    f64::from(b.x0),
                    f64::from(b.y0),
                    f64::from(b.x0 + b.width),
                    f64::from(b.y0 + b.height),
                ],
                score: None,
            }
        })
        .collect()
}

/// The annotation `task` needs, from the (left) buffers.
pub fn annotate(task: Task, fb: &FrameBuffers, scene: &ScenePlacement, rig: &CameraRig, cfg: &AnnotationConfig) -> TaskAnnotation {
    debug_assert!(fb.eye != Eye::Right);
    match task {
        Task::SemanticSegmentation => TaskAnnotation::Semantic(semantic_annotation(fb)),
        Task::Detection2D => TaskAnnotation::Boxes2D(boxes_2d(fb, scene, rig, cfg)),
        Task::StereoDetection3D => TaskAnnotation::Boxes3D(boxes_3d(scene, rig, fb, cfg)),
        Task::MonocularDepth => TaskAnnotation::Depth(depth_annotation(fb)),
    }
}

/// Label of each reduced class in the CityScapes id space.
pub fn cityscapes_id(label_id: u8) -> u8 {
    match label_id {
        label::ROAD => 7,
        label::SIDEWALK => 8,
        label::BUILDING => 11,
        label::SKY => 23,
        label::VEHICLE => 26,
        label::PEDESTRIAN => 24,
        label::BILLBOARD => 20,
        _ => 6,
    }
}

/// Inverse of [`cityscapes_id`]; truck (27) folds into vehicle.
pub fn from_cityscapes_id(id: u8) -> Option<u8> {
    Some(match id {
        7 => label::ROAD,
        8 => label::SIDEWALK,
        11 => label::BUILDING,
        23 => label::SKY,
        26 | 27 => label::VEHICLE,
        24 => label::PEDESTRIAN,
        20 => label::BILLBOARD,
        6 => label::GROUND_OTHER,
        _ => return None,
    })
}
