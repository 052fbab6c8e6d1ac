use nalgebra::{Vector2, Vector3};

use super::situations::{TRUCK_ALBEDO, TRUCK_DIMS};
use super::{
    lighting_from_preset, AttackSituation, Cuboid, NpcBox, ObjectClass, PlacedSurface, RoadFrame,
    ScenePlacement, SimulationConfig, SpawnLimits, StaticBox, SurfaceKind,
};
use crate::error::{Error, Result};
use crate::geometry::polygon::box_iou_3d;
use crate::geometry::{PlanarSurface, Pose};
use crate::rng::CounterRng;

pub const EGO_CAMERA_HEIGHT_M: f64 = 1.6;
/// Rejection-sampling budget per NPC.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
/// Largest volume IoU tolerated between two NPC boxes.
pub const NPC_MAX_IOU: f64 = 0.10;
/// Minimum horizontal clearance between the ego camera and any NPC footprint.
const EGO_CLEARANCE_M: f64 = 1.0;
const TRUCK_LANE_Y: f64 = -1.75;

const CAR_PALETTE: [[f64; 3]; 6] = [
    [0.70, 0.10, 0.10],
    [0.10, 0.20, 0.60],
    [0.15, 0.15, 0.15],
    [0.85, 0.85, 0.85],
    [0.50, 0.50, 0.55],
    [0.10, 0.45, 0.20],
];

/// NPC limits with the count range taken from the simulation's density.
pub fn effective_npc_limits(situation: &AttackSituation, sim: &SimulationConfig) -> SpawnLimits {
    SpawnLimits {
        count_range: sim.npc_density.count_range(),
        ..situation.npc_spawn_limits
    }
}

fn road_surface(road: &RoadFrame, s: &PlanarSurface) -> PlanarSurface {
    let center = road.to_world(&s.center());
    let n = s.normal();
    let normal = road.to_world(&Vector3::new(n.x, n.y, 0.0));
    PlanarSurface {
        pose: Pose::facing(center, normal),
        ..*s
    }
}

fn road_cuboid(road: &RoadFrame, c: &Cuboid) -> Cuboid {
    Cuboid {
        center: road.to_world(&c.center),
        dims: c.dims,
        yaw: c.yaw + road.yaw,
    }
}

/// Row of buildings on each side of the street; a function of the situation only.
fn buildings(name: &str, road: &RoadFrame) -> Vec<StaticBox> {
    let mut rng = CounterRng::new(0, &format!("{name}/buildings"), 0);
    let mut out = Vec::new();
    for side in [1.0, -1.0] {
        let mut x = -110.0;
        while x < 110.0 {
            let length = rng.uniform(12.0, 26.0);
            let depth = rng.uniform(8.0, 14.0);
            let height = rng.uniform(8.0, 28.0);
            let setback = rng.uniform(14.0, 17.0);
            let shade = rng.uniform(0.35, 0.7);
            let tint = rng.uniform(-0.08, 0.08);
            let c = Cuboid {
                center: Vector3::new(x + length / 2.0, side * (setback + depth / 2.0), height / 2.0),
                dims: (length, depth, height),
                yaw: 0.0,
            };
            out.push(StaticBox {
                cuboid: road_cuboid(road, &c),
                albedo: [shade + tint, shade, shade - tint],
            });
            x += length + rng.uniform(2.0, 8.0);
        }
    }
    out
}

fn sample_class(rng: &mut CounterRng) -> ObjectClass {
    let r = rng.next_f64();
    if r < 0.65 {
        ObjectClass::Car
    } else if r < 0.75 {
        ObjectClass::Truck
    } else {
        ObjectClass::Pedestrian
    }
}

fn npc_albedo(class: ObjectClass, rng: &mut CounterRng) -> [f64; 3] {
    match class {
        ObjectClass::Car => CAR_PALETTE[rng.below(CAR_PALETTE.len())],
        ObjectClass::Truck => [0.6, 0.55, 0.4],
        ObjectClass::Pedestrian => {
            let j = rng.uniform(-0.1, 0.1);
            [0.55 + j, 0.35 + j, 0.3 + j]
        }
    }
}

fn clear_of_ego(c: &Cuboid, ego_xy: Vector2<f64>) -> bool {
    let d = ego_xy - Vector2::new(c.center.x, c.center.y);
    let (s, co) = c.yaw.sin_cos();
    let lx = d.x * co + d.y * s;
    let ly = -d.x * s + d.y * co;
    lx.abs() > c.dims.0 / 2.0 + EGO_CLEARANCE_M || ly.abs() > c.dims.1 / 2.0 + EGO_CLEARANCE_M
}

/// Places the ego, NPCs, and surfaces for one sample. Pure in
/// `(sim.seed, sample_index, situation.name)` and the situation's limits.
pub fn sample_scene(
    situation: &AttackSituation,
    sim: &SimulationConfig,
    sample_index: u64,
) -> Result<ScenePlacement> {
    situation.ego_spawn_limits.validate()?;
    let npc_limits = effective_npc_limits(situation, sim);
    npc_limits.validate()?;
    if situation.surfaces.is_empty() {
        return Err(Error::InvalidConfig(format!("situation `{}` has no surfaces", situation.name)));
    }

    let mut rng = CounterRng::new(sim.seed, &situation.name, sample_index);
    let road = RoadFrame {
        yaw: situation.sun_relation.road_yaw(),
    };

    let mut npc_road: Vec<(ObjectClass, Cuboid, [f64; 3])> = Vec::new();
    let mut surfaces_road: Vec<(PlanarSurface, [f64; 3], Option<usize>)> = Vec::new();

    match situation.surface_kind {
        SurfaceKind::TruckBack => {
            // The host truck goes first; its surface rides on it.
            let tx = rng.uniform(-20.0, 20.0);
            let ty = TRUCK_LANE_Y + rng.uniform(-0.3, 0.3);
            let tyaw = rng.uniform(-3.0, 3.0).to_radians();
            let truck = Cuboid {
                center: Vector3::new(tx, ty, TRUCK_DIMS.2 / 2.0),
                dims: TRUCK_DIMS,
                yaw: tyaw,
            };
            npc_road.push((ObjectClass::Truck, truck, TRUCK_ALBEDO));
            let host = RoadFrame { yaw: tyaw };
            for t in &situation.surfaces {
                let local = road_surface(&host, &t.surface);
                let center = local.center() + Vector3::new(tx, ty, 0.0);
                surfaces_road.push((
                    PlanarSurface {
                        pose: Pose::facing(center, local.normal()),
                        ..local
                    },
                    t.albedo,
                    Some(0),
                ));
            }
        }
        SurfaceKind::Billboard => {
            for t in &situation.surfaces {
                surfaces_road.push((t.surface, t.albedo, None));
            }
        }
    }

    // Ego camera, looking at the primary surface centre with yaw jitter.
    let primary = surfaces_road[0].0.center();
    let ego = &situation.ego_spawn_limits;
    let dist = rng.uniform(ego.distance_range_m.0, ego.distance_range_m.1);
    let lateral = rng.uniform(ego.lateral_range_m.0, ego.lateral_range_m.1);
    let jitter = rng.uniform(ego.yaw_jitter_deg.0, ego.yaw_jitter_deg.1).to_radians();
    let lateral_base = match situation.surface_kind {
        SurfaceKind::TruckBack => primary.y,
        SurfaceKind::Billboard => 0.0,
    };
    let ego_road = Vector3::new(primary.x - dist, lateral_base + lateral, EGO_CAMERA_HEIGHT_M);
    let heading_road = (primary.y - ego_road.y).atan2(primary.x - ego_road.x) + jitter;
    let camera_pose = Pose::camera_looking(road.to_world(&ego_road), heading_road + road.yaw);

    // NPCs by per-object rejection sampling.
    let count = rng.range_inclusive(npc_limits.count_range.0, npc_limits.count_range.1);
    let ego_xy = Vector2::new(ego_road.x, ego_road.y);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let class = sample_class(&mut rng);
            let (l, w, h) = class.nominal_dims();
            let scale = rng.uniform(0.92, 1.08);
            let d = rng.uniform(npc_limits.distance_range_m.0, npc_limits.distance_range_m.1);
            let y = rng.uniform(npc_limits.lateral_range_m.0, npc_limits.lateral_range_m.1);
            let jit = rng.uniform(npc_limits.yaw_jitter_deg.0, npc_limits.yaw_jitter_deg.1).to_radians();
            let yaw = match class {
                ObjectClass::Pedestrian => rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
                _ if y < 0.0 => jit,
                _ => std::f64::consts::PI + jit,
            };
            let albedo = npc_albedo(class, &mut rng);
            let dims = (l * scale, w * scale, h * scale);
            let cand = Cuboid {
                center: Vector3::new(primary.x - d, y, dims.2 / 2.0),
                dims,
                yaw,
            };
            let overlaps = npc_road
                .iter()
                .any(|(_, other, _)| box_iou_3d(&cand.upright(), &other.upright()) > NPC_MAX_IOU);
            if !overlaps && clear_of_ego(&cand, ego_xy) {
                npc_road.push((class, cand, albedo));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementFailure(format!(
                "{}: NPC {k} could not be placed in {MAX_PLACEMENT_ATTEMPTS} attempts (sample {sample_index})",
                situation.name
            )));
        }
    }

    let npc_boxes = npc_road
        .iter()
        .enumerate()
        .map(|(i, (class, c, albedo))| NpcBox {
            class: *class,
            cuboid: road_cuboid(&road, c),
            albedo: *albedo,
            instance_id: i as u32 + 1,
        })
        .collect();
    let surfaces = surfaces_road
        .iter()
        .map(|(s, albedo, owner)| PlacedSurface {
            surface: road_surface(&road, s),
            kind: situation.surface_kind,
            owner: *owner,
            albedo: *albedo,
        })
        .collect();

    Ok(ScenePlacement {
        situation: situation.name.clone(),
        sample_index,
        camera_pose,
        npc_boxes,
        surfaces,
        static_boxes: buildings(&situation.name, &road),
        lighting: lighting_from_preset(sim.weather_preset),
        road,
        seed_trace: (sim.seed, sample_index),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{builtin_situations, find_situation, NpcDensity, WeatherPreset};

    fn sim(seed: u64) -> SimulationConfig {
        SimulationConfig {
            seed,
            npc_density: NpcDensity::Medium,
            weather_preset: WeatherPreset::ClearNoon,
        }
    }

    #[test]
    fn deterministic() {
        let s = find_situation("billboard02").unwrap();
        let a = sample_scene(&s, &sim(5), 3).unwrap();
        let b = sample_scene(&s, &sim(5), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_ego_distance() {
        let s = find_situation("billboard02").unwrap();
        let a = sample_scene(&s, &sim(1), 0).unwrap();
        let b = sample_scene(&s, &sim(2), 0).unwrap();
        let dist = |p: &ScenePlacement| (p.camera_pose.origin() - p.surfaces[0].surface.center()).norm();
        assert_ne!(dist(&a), dist(&b));
    }

    #[test]
    fn index_independence() {
        let s = find_situation("billboard04").unwrap();
        let alone = sample_scene(&s, &sim(9), 7).unwrap();
        // Sampling other indices first must not perturb index 7.
        for i in 0..7 {
            sample_scene(&s, &sim(9), i).unwrap();
        }
        assert_eq!(alone, sample_scene(&s, &sim(9), 7).unwrap());
    }

    /// Ray from the camera along its optical axis hits the truck-back rectangle.
    #[test]
    fn truck_back_on_optical_axis() {
        let s = find_situation("truck").unwrap();
        for seed in 0..20 {
            let p = sample_scene(&s, &sim(seed), seed % 3).unwrap();
            let o = p.camera_pose.origin();
            let dir = p.camera_pose.axis(2);
            let surf = &p.surfaces[0].surface;
            let n = surf.normal();
            let t = (surf.center() - o).dot(&n) / dir.dot(&n);
            assert!(t > 0.0);
            let hit = o + dir * t - surf.center();
            let lx = hit.dot(&surf.pose.axis(0));
            let ly = hit.dot(&surf.pose.axis(1));
            assert!(lx.abs() <= surf.width_m / 2.0 && ly.abs() <= surf.height_m / 2.0, "seed {seed}: ({lx}, {ly})");
            assert_eq!(p.npc_boxes[0].class, ObjectClass::Truck);
            assert_eq!(p.surfaces[0].owner, Some(0));
        }
    }

    #[test]
    fn limits_hold_for_all_situations() {
        for s in builtin_situations() {
            for density in [NpcDensity::Low, NpcDensity::Medium, NpcDensity::High] {
                let cfg = SimulationConfig {
                    seed: 11,
                    npc_density: density,
                    weather_preset: WeatherPreset::ClearNoon,
                };
                let limits = effective_npc_limits(&s, &cfg);
                for i in 0..100 {
                    let p = sample_scene(&s, &cfg, i).unwrap();
                    check_limits(&s, &p, &limits);
                }
            }
        }
    }

    pub(crate) fn check_limits(s: &AttackSituation, p: &ScenePlacement, npc: &SpawnLimits) {
        let primary = p.road.to_road(&p.surfaces[0].surface.center());
        let ego = p.road.to_road(&p.camera_pose.origin());
        let d = primary.x - ego.x;
        let lim = &s.ego_spawn_limits;
        assert!(d >= lim.distance_range_m.0 - 1e-9 && d <= lim.distance_range_m.1 + 1e-9, "{}: d={d}", s.name);
        let base = if s.surface_kind == SurfaceKind::TruckBack { primary.y } else { 0.0 };
        let lat = ego.y - base;
        assert!(lat >= lim.lateral_range_m.0 - 1e-9 && lat <= lim.lateral_range_m.1 + 1e-9);
        // Camera is in front of the primary surface.
        let surf = &p.surfaces[0].surface;
        assert!((p.camera_pose.origin() - surf.center()).dot(&surf.normal()) > 0.0);
        let extra = usize::from(s.surface_kind == SurfaceKind::TruckBack);
        let n = (p.npc_boxes.len() - extra) as u32;
        assert!(n >= npc.count_range.0 && n <= npc.count_range.1);
        for (i, a) in p.npc_boxes.iter().enumerate() {
            for b in &p.npc_boxes[i + 1..] {
                assert!(box_iou_3d(&a.cuboid.upright(), &b.cuboid.upright()) <= NPC_MAX_IOU);
            }
        }
        for b in &p.npc_boxes[extra..] {
            let r = p.road.to_road(&b.cuboid.center);
            let dd = primary.x - r.x;
            assert!(dd >= npc.distance_range_m.0 - 1e-9 && dd <= npc.distance_range_m.1 + 1e-9);
            assert!(r.y >= npc.lateral_range_m.0 - 1e-9 && r.y <= npc.lateral_range_m.1 + 1e-9);
        }
    }

    #[test]
    fn too_tight_limits_fail() {
        let mut s = find_situation("billboard02").unwrap();
        s.npc_spawn_limits.distance_range_m = (1.0, 1.0);
        s.npc_spawn_limits.lateral_range_m = (0.0, 0.0);
        let cfg = SimulationConfig {
            seed: 3,
            npc_density: NpcDensity::High,
            weather_preset: WeatherPreset::ClearNoon,
        };
        assert!(matches!(sample_scene(&s, &cfg, 0), Err(Error::PlacementFailure(_))));
    }
}
