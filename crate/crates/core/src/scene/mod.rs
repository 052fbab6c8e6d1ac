//! Scene description: tasks, attack situations, configuration files, and
//! deterministic placement sampling.

mod config;
mod lighting;
mod sampling;
mod situations;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{CameraIntrinsics, CameraRig, PlanarSurface, Pose};
use crate::render::LightingParams;

pub use config::{
    apply_billboard_overrides, parse_collection_config, parse_simulation_config, CollectionConfig,
    SimulationConfig,
};
pub use lighting::lighting_from_preset;
pub use sampling::{effective_npc_limits, sample_scene, EGO_CAMERA_HEIGHT_M, MAX_PLACEMENT_ATTEMPTS, NPC_MAX_IOU};
pub use situations::{builtin_situations, find_situation, BILLBOARD_HEIGHT_M, BILLBOARD_WIDTH_M};

/// Instance ids at or above this value belong to attackable surfaces.
pub const SURFACE_INSTANCE_BASE: u32 = 1000;

pub fn surface_instance_id(surface_id: u32) -> u32 {
    SURFACE_INSTANCE_BASE + surface_id
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SemanticSegmentation,
    Detection2D,
    StereoDetection3D,
    MonocularDepth,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::SemanticSegmentation,
        Task::Detection2D,
        Task::StereoDetection3D,
        Task::MonocularDepth,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::SemanticSegmentation => "semantic_segmentation",
            Task::Detection2D => "detection_2d",
            Task::StereoDetection3D => "stereo_detection_3d",
            Task::MonocularDepth => "monocular_depth",
        }
    }

    /// Default image size (width, height).
    pub fn resolution(&self) -> (u32, u32) {
        match self {
            Task::SemanticSegmentation => (1024, 512),
            Task::Detection2D => (800, 600),
            Task::StereoDetection3D | Task::MonocularDepth => (1216, 352),
        }
    }

    pub fn is_stereo(&self) -> bool {
        matches!(self, Task::StereoDetection3D)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "semantic_segmentation" | "segmentation" | "ss" => Task::SemanticSegmentation,
            "detection_2d" | "2d_object_detection" | "object_detection_2d" | "2dod" => Task::Detection2D,
            "stereo_detection_3d" | "stereo_3d_object_detection" | "3d_object_detection" | "3dod" => {
                Task::StereoDetection3D
            }
            "monocular_depth" | "depth" | "monocular_depth_estimation" => Task::MonocularDepth,
            _ => return Err(Error::UnknownTask(s.to_string())),
        })
    }
}

/// Image size and camera for a task. Exposed so callers can run at other scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskProfile {
    pub task: Task,
    pub width: u32,
    pub height: u32,
    pub baseline_m: f64,
}

impl TaskProfile {
    pub fn for_task(task: Task) -> Self {
        let (width, height) = task.resolution();
        Self {
            task,
            width,
            height,
            baseline_m: if task.is_stereo() { 0.54 } else { 0.0 },
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.width, self.height)
    }

    pub fn rig(&self, placement: &ScenePlacement) -> CameraRig {
        CameraRig {
            intrinsics: self.intrinsics(),
            pose: placement.camera_pose,
            baseline_m: self.baseline_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Truck, ObjectClass::Pedestrian];

    pub fn kitti_name(&self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Truck => "Truck",
            ObjectClass::Pedestrian => "Pedestrian",
        }
    }

    pub fn from_kitti_name(s: &str) -> Option<Self> {
        match s {
            "Car" => Some(ObjectClass::Car),
            "Truck" => Some(ObjectClass::Truck),
            "Pedestrian" => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }

    /// COCO category ids (person = 1, car = 3, truck = 8).
    pub fn coco_id(&self) -> u32 {
        match self {
            ObjectClass::Car => 3,
            ObjectClass::Truck => 8,
            ObjectClass::Pedestrian => 1,
        }
    }

    pub fn from_coco_id(id: u32) -> Option<Self> {
        match id {
            3 => Some(ObjectClass::Car),
            8 => Some(ObjectClass::Truck),
            1 => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }

    pub fn coco_name(&self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "person",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    /// Nominal (length, width, height) in metres.
    pub fn nominal_dims(&self) -> (f64, f64, f64) {
        match self {
            ObjectClass::Car => (4.2, 1.8, 1.5),
            ObjectClass::Truck => (7.5, 2.5, 3.2),
            ObjectClass::Pedestrian => (0.6, 0.6, 1.75),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceKind {
    Billboard,
    TruckBack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SunRelation {
    Behind,
    Side,
    Front,
}

impl SunRelation {
    /// World yaw of the situation's road frame. The sun sits at world azimuth 0,
    /// and the ego looks roughly along road +x.
    pub fn road_yaw(&self) -> f64 {
        match self {
            SunRelation::Behind => std::f64::consts::PI,
            SunRelation::Side => std::f64::consts::FRAC_PI_2,
            SunRelation::Front => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeatherPreset {
    CloudyNoon,
    ClearNoon,
    CloudySunset,
    ClearSunset,
    SoftRainNoon,
}

impl WeatherPreset {
    pub const ALL: [WeatherPreset; 5] = [
        WeatherPreset::CloudyNoon,
        WeatherPreset::ClearNoon,
        WeatherPreset::CloudySunset,
        WeatherPreset::ClearSunset,
        WeatherPreset::SoftRainNoon,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WeatherPreset::CloudyNoon => "CloudyNoon",
            WeatherPreset::ClearNoon => "ClearNoon",
            WeatherPreset::CloudySunset => "CloudySunset",
            WeatherPreset::ClearSunset => "ClearSunset",
            WeatherPreset::SoftRainNoon => "SoftRainNoon",
        }
    }
}

impl FromStr for WeatherPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "");
        WeatherPreset::ALL
            .into_iter()
            .find(|w| w.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown weather preset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NpcDensity {
    Low,
    Medium,
    High,
}

impl NpcDensity {
    pub fn count_range(&self) -> (u32, u32) {
        match self {
            NpcDensity::Low => (0, 2),
            NpcDensity::Medium => (2, 5),
            NpcDensity::High => (5, 9),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NpcDensity::Low => "low",
            NpcDensity::Medium => "medium",
            NpcDensity::High => "high",
        }
    }
}

impl FromStr for NpcDensity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(NpcDensity::Low),
            "medium" => Ok(NpcDensity::Medium),
            "high" => Ok(NpcDensity::High),
            _ => Err(Error::InvalidConfig(format!("unknown npc density `{s}`"))),
        }
    }
}

/// Spawn region, expressed in the situation's road frame.
///
/// For the ego, `distance_range_m` is the along-road distance behind the primary
/// surface and `lateral_range_m` the offset from the road centre (or from the
/// truck's lane). For NPCs the distance is measured the same way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnLimits {
    pub distance_range_m: (f64, f64),
    pub lateral_range_m: (f64, f64),
    pub yaw_jitter_deg: (f64, f64),
    pub count_range: (u32, u32),
}

impl SpawnLimits {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = self.distance_range_m.0 <= self.distance_range_m.1
            && self.distance_range_m.0 > 0.0
            && self.lateral_range_m.0 <= self.lateral_range_m.1
            && self.yaw_jitter_deg.0 <= self.yaw_jitter_deg.1
            && self.count_range.0 <= self.count_range.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid spawn limits {self:?}")))
        }
    }
}

/// Attackable surface template in the road frame (x along the road, z up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTemplate {
    pub surface: PlanarSurface,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSituation {
    pub name: String,
    /// Surfaces in the road frame. For `TruckBack` the pose is relative to a
    /// truck whose centre sits at the road-frame origin.
    pub surfaces: Vec<SurfaceTemplate>,
    pub surface_kind: SurfaceKind,
    pub ego_spawn_limits: SpawnLimits,
    pub npc_spawn_limits: SpawnLimits,
    pub sun_relation: SunRelation,
}

impl AttackSituation {
    pub fn primary(&self) -> &SurfaceTemplate {
        &self.surfaces[0]
    }
}

/// Horizontal placement frame of the road: `world = Rz(yaw) * road`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadFrame {
    pub yaw: f64,
}

impl RoadFrame {
    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
    }

    pub fn to_road(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z)
    }

    /// Road half-width; |y| beyond this and up to [`Self::SIDEWALK_EDGE`] is sidewalk.
    pub const ROAD_EDGE: f64 = 7.0;
    pub const SIDEWALK_EDGE: f64 = 10.0;
}

/// Upright box with a yaw about world z. `dims = (length, width, height)`,
/// length along the heading. `center` is the geometric centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: Vector3<f64>,
    pub dims: (f64, f64, f64),
    pub yaw: f64,
}

impl Cuboid {
    pub fn bottom_center(&self) -> Vector3<f64> {
        self.center - Vector3::new(0.0, 0.0, self.dims.2 / 2.0)
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (l, w, h) = self.dims;
        let (s, c) = self.yaw.sin_cos();
        let fwd = Vector3::new(c, s, 0.0) * (l / 2.0);
        let left = Vector3::new(-s, c, 0.0) * (w / 2.0);
        let up = Vector3::new(0.0, 0.0, h / 2.0);
        let mut out = [Vector3::zeros(); 8];
        let mut k = 0;
        for a in [1.0, -1.0] {
            for b in [1.0, -1.0] {
                for d in [1.0, -1.0] {
                    out[k] = self.center + fwd * a + left * b + up * d;
                    k += 1;
                }
            }
        }
        out
    }

    pub fn upright(&self) -> crate::geometry::polygon::UprightBox {
        crate::geometry::polygon::UprightBox {
            center: Vector2::new(self.center.x, self.center.y),
            length: self.dims.0,
            width: self.dims.1,
            yaw: self.yaw,
            bottom: self.center.z - self.dims.2 / 2.0,
            height: self.dims.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpcBox {
    pub class: ObjectClass,
    pub cuboid: Cuboid,
    pub albedo: [f64; 3],
    pub instance_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticBox {
    pub cuboid: Cuboid,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedSurface {
    pub surface: PlanarSurface,
    pub kind: SurfaceKind,
    /// Index into `npc_boxes` of the vehicle carrying this surface, if any.
    pub owner: Option<usize>,
    pub albedo: [f64; 3],
}

impl PlacedSurface {
    pub fn instance_id(&self) -> u32 {
        surface_instance_id(self.surface.surface_id)
    }
}

/// One fully placed scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePlacement {
    pub situation: String,
    pub sample_index: u64,
    /// World-to-camera pose of the ego's (left) camera.
    pub camera_pose: Pose,
    pub npc_boxes: Vec<NpcBox>,
    pub surfaces: Vec<PlacedSurface>,
    pub static_boxes: Vec<StaticBox>,
    pub lighting: LightingParams,
    pub road: RoadFrame,
    /// (master seed, sample index)
    pub seed_trace: (u64, u64),
}

impl ScenePlacement {
    /// Empty world (ground and sky only) seen from a camera at the origin
    /// looking along world +x.
    pub fn empty(lighting: LightingParams) -> Self {
        Self {
            situation: "empty".into(),
            sample_index: 0,
            camera_pose: Pose::camera_looking(Vector3::new(0.0, 0.0, EGO_CAMERA_HEIGHT_M), 0.0),
            npc_boxes: Vec::new(),
            surfaces: Vec::new(),
            static_boxes: Vec::new(),
            lighting,
            road: RoadFrame { yaw: 0.0 },
            seed_trace: (0, 0),
        }
    }

    /// Surfaces in ascending `surface_id` order.
    pub fn surfaces_sorted(&self) -> Vec<&PlacedSurface> {
        let mut v: Vec<_> = self.surfaces.iter().collect();
        v.sort_by_key(|s| s.surface.surface_id);
        v
    }

    pub fn surface(&self, surface_id: u32) -> Option<&PlacedSurface> {
        self.surfaces.iter().find(|s| s.surface.surface_id == surface_id)
    }
}
