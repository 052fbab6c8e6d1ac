//! The built-in library of ten attack situations.
//!
//! Each billboard is laid out in a flat road frame (road along +x, centre line
//! at y = 0); the frame's world yaw is chosen from the situation's sun relation.

use nalgebra::Vector3;

use super::{AttackSituation, SpawnLimits, SunRelation, SurfaceKind, SurfaceTemplate};
use crate::error::{Error, Result};
use crate::geometry::{PlanarSurface, Pose};

pub const BILLBOARD_HEIGHT_M: f64 = 3.7;
pub const BILLBOARD_WIDTH_M: f64 = 7.4;
pub const BILLBOARD_ALBEDO: [f64; 3] = [0.55, 0.55, 0.55];

/// Host truck for the truck-back situation: (length, width, height).
pub const TRUCK_DIMS: (f64, f64, f64) = (8.0, 2.5, 3.6);
pub const TRUCK_ALBEDO: [f64; 3] = [0.82, 0.82, 0.8];
pub const TRUCK_PATCH_WIDTH_M: f64 = 2.4;
pub const TRUCK_PATCH_HEIGHT_M: f64 = 1.2;
pub const TRUCK_PATCH_CENTER_Z: f64 = 1.9;
/// Gap between the truck's back face and the patch plane.
pub const TRUCK_PATCH_OFFSET_M: f64 = 0.02;

struct BillboardSpec {
    /// +1 for the left road side, -1 for the right.
    side: f64,
    x: f64,
    lateral: f64,
    facing_deg: f64,
    bottom: f64,
}

fn billboard(id: u32, spec: &BillboardSpec) -> SurfaceTemplate {
    let a = spec.facing_deg.to_radians();
    let normal = Vector3::new(-a.cos(), -spec.side * a.sin(), 0.0);
    let center = Vector3::new(
        spec.x,
        spec.side * spec.lateral,
        spec.bottom + BILLBOARD_HEIGHT_M / 2.0,
    );
    SurfaceTemplate {
        surface: PlanarSurface {
            pose: Pose::facing(center, normal),
            width_m: BILLBOARD_WIDTH_M,
            height_m: BILLBOARD_HEIGHT_M,
            surface_id: id,
        },
        albedo: BILLBOARD_ALBEDO,
    }
}

fn billboard_ego_limits() -> SpawnLimits {
    SpawnLimits {
        distance_range_m: (5.0, 40.0),
        lateral_range_m: (-6.0, 6.0),
        yaw_jitter_deg: (-10.0, 10.0),
        count_range: (1, 1),
    }
}

fn billboard_npc_limits() -> SpawnLimits {
    SpawnLimits {
        distance_range_m: (1.0, 45.0),
        lateral_range_m: (-6.0, 6.0),
        yaw_jitter_deg: (-10.0, 10.0),
        count_range: (2, 5),
    }
}

fn billboard_situation(name: &str, sun: SunRelation, specs: &[BillboardSpec]) -> AttackSituation {
    AttackSituation {
        name: name.to_string(),
        surfaces: specs
            .iter()
            .enumerate()
            .map(|(i, s)| billboard(i as u32, s))
            .collect(),
        surface_kind: SurfaceKind::Billboard,
        ego_spawn_limits: billboard_ego_limits(),
        npc_spawn_limits: billboard_npc_limits(),
        sun_relation: sun,
    }
}

fn truck_situation() -> AttackSituation {
    let center = Vector3::new(
        -TRUCK_DIMS.0 / 2.0 - TRUCK_PATCH_OFFSET_M,
        0.0,
        TRUCK_PATCH_CENTER_Z,
    );
    AttackSituation {
        name: "truck".to_string(),
        surfaces: vec![SurfaceTemplate {
            surface: PlanarSurface {
                pose: Pose::facing(center, Vector3::new(-1.0, 0.0, 0.0)),
                width_m: TRUCK_PATCH_WIDTH_M,
                height_m: TRUCK_PATCH_HEIGHT_M,
                surface_id: 0,
            },
            albedo: TRUCK_ALBEDO,
        }],
        surface_kind: SurfaceKind::TruckBack,
        ego_spawn_limits: SpawnLimits {
            distance_range_m: (6.0, 25.0),
            lateral_range_m: (-0.3, 0.3),
            yaw_jitter_deg: (-1.0, 1.0),
            count_range: (1, 1),
        },
        npc_spawn_limits: SpawnLimits {
            distance_range_m: (1.0, 45.0),
            lateral_range_m: (1.5, 6.0),
            yaw_jitter_deg: (-10.0, 10.0),
            count_range: (2, 5),
        },
        sun_relation: SunRelation::Behind,
    }
}

/// billboard01..billboard09 followed by `truck`.
pub fn builtin_situations() -> Vec<AttackSituation> {
    use SunRelation::*;
    let one = |side, lateral, facing_deg, bottom| BillboardSpec {
        side,
        x: 0.0,
        lateral,
        facing_deg,
        bottom,
    };
    let at = |x, side, lateral, facing_deg| BillboardSpec {
        side,
        x,
        lateral,
        facing_deg,
        bottom: 2.0,
    };
    vec![
        billboard_situation("billboard01", Behind, &[one(1.0, 9.0, 20.0, 2.2)]),
        billboard_situation("billboard02", Behind, &[one(1.0, 9.0, 15.0, 2.0)]),
        billboard_situation("billboard03", Side, &[one(-1.0, 9.0, 25.0, 2.2)]),
        billboard_situation("billboard04", Side, &[one(1.0, 10.0, 30.0, 2.0)]),
        billboard_situation(
            "billboard05",
            Behind,
            &[at(0.0, 1.0, 9.0, 20.0), at(0.0, -1.0, 9.0, 20.0)],
        ),
        billboard_situation(
            "billboard06",
            Side,
            &[at(0.0, 1.0, 9.0, 15.0), at(8.0, -1.0, 10.0, 15.0)],
        ),
        billboard_situation(
            "billboard07",
            Front,
            &[at(0.0, 1.0, 10.0, 25.0), at(15.0, -1.0, 9.0, 20.0)],
        ),
        billboard_situation("billboard08", Behind, &[one(-1.0, 10.0, 20.0, 2.5)]),
        billboard_situation("billboard09", Front, &[one(1.0, 9.0, 15.0, 2.0)]),
        truck_situation(),
    ]
}

pub fn find_situation(name: &str) -> Result<AttackSituation> {
    builtin_situations()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownSituation(name.to_string()))
}
