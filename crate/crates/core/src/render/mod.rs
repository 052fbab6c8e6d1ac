//! Deterministic CPU renderer: ground, sky, cuboids, and planar surfaces, with
//! differentiable patch compositing.
//!
//! Every pixel casts one ray through its centre and keeps the nearest hit
//! (z-buffer semantics; equal depths resolve to the primitive listed first).
//! Shading is Lambertian with one directional light plus ambient, and weather
//! desaturation is a fixed linear colour transform applied last.

mod patch;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, CameraRig, Eye, Pose};
use crate::scene::{Cuboid, ObjectClass, RoadFrame, ScenePlacement, SurfaceKind};

pub use patch::{
    composite_patch, composite_patch_in_place, composite_patches, patch_gradient, scene_patch_gradient,
    PatchTexture, DEFAULT_PATCH_COLS, DEFAULT_PATCH_ROWS,
};

/// Reduced semantic label set.
pub mod label {
    pub const ROAD: u8 = 0;
    pub const SIDEWALK: u8 = 1;
    pub const BUILDING: u8 = 2;
    pub const SKY: u8 = 3;
    pub const VEHICLE: u8 = 4;
    pub const PEDESTRIAN: u8 = 5;
    pub const BILLBOARD: u8 = 6;
    pub const GROUND_OTHER: u8 = 7;
    pub const NUM_CLASSES: usize = 8;
    pub const NAMES: [&str; NUM_CLASSES] = [
        "road", "sidewalk", "building", "sky", "vehicle", "pedestrian", "billboard", "ground_other",
    ];
}

/// Rays closer than this are ignored.
pub const NEAR_M: f64 = 0.05;
/// Ground hits beyond this depth are drawn as sky.
pub const MAX_GROUND_DEPTH_M: f64 = 600.0;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const ROAD_ALBEDO: [f64; 3] = [0.32, 0.32, 0.34];
const SIDEWALK_ALBEDO: [f64; 3] = [0.62, 0.6, 0.56];
const GROUND_ALBEDO: [f64; 3] = [0.36, 0.44, 0.26];
const SKY_RGB: [f64; 3] = [0.55, 0.7, 0.92];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightingParams {
    pub sun_elevation_deg: f64,
    pub sun_azimuth_deg: f64,
    pub direct_intensity: f64,
    pub ambient_intensity: f64,
    pub desaturation: f64,
}

impl LightingParams {
    /// Unit vector pointing from the scene towards the sun (world frame).
    pub fn sun_direction(&self) -> Vector3<f64> {
        let (e, a) = (self.sun_elevation_deg.to_radians(), self.sun_azimuth_deg.to_radians());
        Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
    }

    /// Shading factor for a world-frame surface normal.
    pub fn shade(&self, normal: &Vector3<f64>) -> f64 {
        let lambert = normal.dot(&self.sun_direction()).max(0.0);
        (self.ambient_intensity + self.direct_intensity * lambert).clamp(0.0, 1.0)
    }

    fn sky(&self) -> [f64; 3] {
        let k = (0.6 + 0.4 * (self.ambient_intensity + self.direct_intensity)).min(1.0);
        SKY_RGB.map(|c| c * k)
    }
}

/// `(1 - s) * rgb + s * luma(rgb)`, the weather colour transform.
#[inline]
pub fn desaturate(rgb: [f64; 3], s: f64) -> [f64; 3] {
    let y = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
    rgb.map(|c| (1.0 - s) * c + s * y)
}

/// Transpose of [`desaturate`], used to pull gradients back through it.
#[inline]
pub fn desaturate_transpose(g: [f64; 3], s: f64) -> [f64; 3] {
    let sum = g[0] + g[1] + g[2];
    [0, 1, 2].map(|c| (1.0 - s) * g[c] + s * LUMA[c] * sum)
}

/// Axis-aligned pixel rectangle `[x0, x0 + width) x [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn full(intr: &CameraIntrinsics) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width: intr.width,
            height: intr.height,
        }
    }

    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Grows by `margin` on every side, clipped to `bounds`.
    pub fn expand(&self, margin: u32, bounds: &PixelRect) -> Self {
        let x0 = self.x0.saturating_sub(margin).max(bounds.x0);
        let y0 = self.y0.saturating_sub(margin).max(bounds.y0);
        let x1 = (self.x0 + self.width + margin).min(bounds.x0 + bounds.width);
        let y1 = (self.y0 + self.height + margin).min(bounds.y0 + bounds.height);
        Self {
            x0,
            y0,
            width: x1.saturating_sub(x0),
            height: y1.saturating_sub(y0),
        }
    }

    /// Smallest rectangle containing both.
    pub fn union(&self, other: &PixelRect) -> Self {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        let x0 = self.x0.min(other.x0);
        let y0 = self.y0.min(other.y0);
        let x1 = (self.x0 + self.width).max(other.x0 + other.width);
        let y1 = (self.y0 + self.height).max(other.y0 + other.height);
        Self {
            x0,
            y0,
            width: x1 - x0,
            height: y1 - y0,
        }
    }
}

/// Render output. Buffers cover `width x height` pixels whose top-left pixel is
/// `(x0, y0)` of the full image, row-major, RGB interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuffers {
    pub width: u32,
    pub height: u32,
    pub x0: u32,
    pub y0: u32,
    pub eye: Eye,
    pub rgb: Vec<f64>,
    pub depth_m: Vec<f64>,
    pub instance_id: Vec<u32>,
    pub semantic_id: Vec<u8>,
    pub patch_region: Vec<bool>,
    /// Lambertian shading factor of the visible surface (1 for sky).
    pub shading: Vec<f64>,
    pub desaturation: f64,
}

impl FrameBuffers {
    pub fn blank(rect: PixelRect, eye: Eye, desaturation: f64) -> Self {
        let n = rect.area();
        Self {
            width: rect.width,
            height: rect.height,
            x0: rect.x0,
            y0: rect.y0,
            eye,
            rgb: vec![0.0; 3 * n],
            depth_m: vec![f64::INFINITY; n],
            instance_id: vec![0; n],
            semantic_id: vec![label::SKY; n],
            patch_region: vec![false; n],
            shading: vec![1.0; n],
            desaturation,
        }
    }

    pub fn rect(&self) -> PixelRect {
        PixelRect {
            x0: self.x0,
            y0: self.y0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Sub-window in full-image coordinates; must lie inside these buffers.
    pub fn crop(&self, rect: PixelRect) -> FrameBuffers {
        assert!(
            rect.x0 >= self.x0
                && rect.y0 >= self.y0
                && rect.x0 + rect.width <= self.x0 + self.width
                && rect.y0 + rect.height <= self.y0 + self.height,
            "crop outside buffers"
        );
        let mut out = FrameBuffers::blank(rect, self.eye, self.desaturation);
        let w = self.width as usize;
        for y in 0..rect.height as usize {
            let sy = y + (rect.y0 - self.y0) as usize;
            let sx = (rect.x0 - self.x0) as usize;
            let src = sy * w + sx;
            let dst = y * rect.width as usize;
            let n = rect.width as usize;
            out.rgb[3 * dst..3 * (dst + n)].copy_from_slice(&self.rgb[3 * src..3 * (src + n)]);
            out.depth_m[dst..dst + n].copy_from_slice(&self.depth_m[src..src + n]);
            out.instance_id[dst..dst + n].copy_from_slice(&self.instance_id[src..src + n]);
            out.semantic_id[dst..dst + n].copy_from_slice(&self.semantic_id[src..src + n]);
            out.patch_region[dst..dst + n].copy_from_slice(&self.patch_region[src..src + n]);
            out.shading[dst..dst + n].copy_from_slice(&self.shading[src..src + n]);
        }
        out
    }

    /// Bounding rectangle (full-image coordinates) of pixels with `instance`.
    pub fn instance_bounds(&self, instance: u32) -> Option<PixelRect> {
        let w = self.width as usize;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, &id) in self.instance_id.iter().enumerate() {
            if id == instance {
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
        (x0 != usize::MAX).then(|| PixelRect {
            x0: self.x0 + x0 as u32,
            y0: self.y0 + y0 as u32,
            width: (x1 - x0 + 1) as u32,
            height: (y1 - y0 + 1) as u32,
        })
    }
}

/// Ray–primitive tests happen in the camera frame, with rays from the origin
/// along `(dx, dy, 1)` so the hit parameter is the depth.
#[derive(Debug, Clone)]
enum Shape {
    Box {
        center: Vector3<f64>,
        axes: [Vector3<f64>; 3],
        half: [f64; 3],
        /// Shading of faces +a0, -a0, +a1, -a1, +a2, -a2.
        face_shade: [f64; 6],
    },
    Quad {
        center: Vector3<f64>,
        ex: Vector3<f64>,
        ey: Vector3<f64>,
        normal: Vector3<f64>,
        half_w: f64,
        half_h: f64,
        shade_front: f64,
        shade_back: f64,
    },
}

#[derive(Debug, Clone)]
struct Primitive {
    shape: Shape,
    albedo: [f64; 3],
    instance: u32,
    semantic: u8,
    /// Candidate pixel range `[x0, x1) x [y0, y1)`, full-image coordinates.
    bounds: [i64; 4],
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    depth: f64,
    shade: f64,
}

impl Shape {
    #[inline]
    fn intersect(&self, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Shape::Box {
                center,
                axes,
                half,
                face_shade,
            } => {
                let mut t_in = f64::NEG_INFINITY;
                let mut t_out = f64::INFINITY;
                let mut face = 0;
                for i in 0..3 {
                    let o = -center.dot(&axes[i]);
                    let dd = d.dot(&axes[i]);
                    if dd.abs() < 1e-15 {
                        if o.abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let (near, far, f) = if dd > 0.0 {
                        ((-half[i] - o) / dd, (half[i] - o) / dd, 2 * i + 1)
                    } else {
                        ((half[i] - o) / dd, (-half[i] - o) / dd, 2 * i)
                    };
                    if near > t_in {
                        t_in = near;
                        face = f;
                    }
                    t_out = t_out.min(far);
                }
                (t_in <= t_out && t_in > NEAR_M).then(|| Hit {
                    depth: t_in,
                    shade: face_shade[face],
                })
            }
            Shape::Quad {
                center,
                ex,
                ey,
                normal,
                half_w,
                half_h,
                shade_front,
                shade_back,
            } => {
                let dn = d.dot(normal);
                if dn.abs() < 1e-15 {
                    return None;
                }
                let t = center.dot(normal) / dn;
                if t <= NEAR_M {
                    return None;
                }
                let p = d * t - center;
                if p.dot(ex).abs() > *half_w || p.dot(ey).abs() > *half_h {
                    return None;
                }
                let front = center.dot(normal) < 0.0;
                Some(Hit {
                    depth: t,
                    shade: if front { *shade_front } else { *shade_back },
                })
            }
        }
    }
}

fn semantic_for_class(class: ObjectClass) -> u8 {
    match class {
        ObjectClass::Car | ObjectClass::Truck => label::VEHICLE,
        ObjectClass::Pedestrian => label::PEDESTRIAN,
    }
}

/// Candidate pixel bounds of a convex point set, or `None` when entirely behind.
fn screen_bounds(intr: &CameraIntrinsics, pts_cam: &[Vector3<f64>]) -> Option<[i64; 4]> {
    if pts_cam.iter().all(|p| p.z <= NEAR_M) {
        return None;
    }
    if pts_cam.iter().any(|p| p.z <= NEAR_M) {
        return Some([0, 0, i64::from(intr.width), i64::from(intr.height)]);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts_cam {
        let u = intr.fx * p.x / p.z + intr.cx;
        let v = intr.fy * p.y / p.z + intr.cy;
        x0 = x0.min(u);
        x1 = x1.max(u);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    let clampi = |v: f64, hi: u32| (v.clamp(-1.0, f64::from(hi) + 1.0)) as i64;
    Some([
        clampi((x0 - 0.5).floor() - 1.0, intr.width).max(0),
        clampi((y0 - 0.5).floor() - 1.0, intr.height).max(0),
        clampi((x1 - 0.5).ceil() + 2.0, intr.width).min(i64::from(intr.width)),
        clampi((y1 - 0.5).ceil() + 2.0, intr.height).min(i64::from(intr.height)),
    ])
}

fn box_primitive(
    c: &Cuboid,
    cam: &Pose,
    intr: &CameraIntrinsics,
    lighting: &LightingParams,
    albedo: [f64; 3],
    instance: u32,
    semantic: u8,
) -> Option<Primitive> {
    let (s, co) = c.yaw.sin_cos();
    let world_axes = [Vector3::new(co, s, 0.0), Vector3::new(-s, co, 0.0), Vector3::z()];
    let mut face_shade = [0.0; 6];
    for i in 0..3 {
        face_shade[2 * i] = lighting.shade(&world_axes[i]);
        face_shade[2 * i + 1] = lighting.shade(&(-world_axes[i]));
    }
    let corners: Vec<_> = c.corners().iter().map(|p| cam.apply(p)).collect();
    let bounds = screen_bounds(intr, &corners)?;
    Some(Primitive {
        shape: Shape::Box {
            center: cam.apply(&c.center),
            axes: world_axes.map(|a| cam.rotation * a),
            half: [c.dims.0 / 2.0, c.dims.1 / 2.0, c.dims.2 / 2.0],
            face_shade,
        },
        albedo,
        instance,
        semantic,
        bounds,
    })
}

struct Prepared {
    prims: Vec<Primitive>,
    intr: CameraIntrinsics,
    cam: Pose,
    /// Camera-frame unit vector along world up, and the camera's height term.
    ground_n: Vector3<f64>,
    ground_h: f64,
    road: RoadFrame,
    lighting: LightingParams,
    ground_shade: f64,
}

impl Prepared {
    fn new(scene: &ScenePlacement, rig: &CameraRig, eye: Eye) -> Self {
        let cam = rig.eye_pose(eye);
        let intr = rig.intrinsics;
        let lighting = scene.lighting;
        let mut prims = Vec::new();
        for (i, npc) in scene.npc_boxes.iter().enumerate() {
            let inst = i as u32 + 1;
            debug_assert_eq!(npc.instance_id, inst);
            if let Some(p) = box_primitive(
                &npc.cuboid,
                &cam,
                &intr,
                &lighting,
                npc.albedo,
                npc.instance_id,
                semantic_for_class(npc.class),
            ) {
                prims.push(p);
            }
        }
        for s in scene.surfaces_sorted() {
            let surf = &s.surface;
            let corners: Vec<_> = surf.corners().iter().map(|p| cam.apply(p)).collect();
            let Some(bounds) = screen_bounds(&intr, &corners) else {
                continue;
            };
            let n_world = surf.normal();
            prims.push(Primitive {
                shape: Shape::Quad {
                    center: cam.apply(&surf.center()),
                    ex: cam.rotation * surf.pose.axis(0),
                    ey: cam.rotation * surf.pose.axis(1),
                    normal: cam.rotation * n_world,
                    half_w: surf.width_m / 2.0,
                    half_h: surf.height_m / 2.0,
                    shade_front: lighting.shade(&n_world),
                    shade_back: lighting.shade(&(-n_world)),
                },
                albedo: s.albedo,
                instance: s.instance_id(),
                semantic: match s.kind {
                    SurfaceKind::Billboard => label::BILLBOARD,
                    SurfaceKind::TruckBack => label::VEHICLE,
                },
                bounds,
            });
        }
        for b in &scene.static_boxes {
            if let Some(p) = box_primitive(&b.cuboid, &cam, &intr, &lighting, b.albedo, 0, label::BUILDING) {
                prims.push(p);
            }
        }
        let ground_n = cam.rotation * Vector3::z();
        Self {
            prims,
            intr,
            ground_h: ground_n.dot(&cam.translation),
            ground_n,
            cam,
            road: scene.road,
            lighting,
            ground_shade: lighting.shade(&Vector3::z()),
        }
    }

    #[inline]
    fn ray(&self, x: u32, y: u32) -> Vector3<f64> {
        self.intr.back_project(f64::from(x) + 0.5, f64::from(y) + 0.5)
    }

    /// Background (ground or sky) for a ray.
    fn background(&self, d: &Vector3<f64>) -> (f64, [f64; 3], u8, f64) {
        let dn = self.ground_n.dot(d);
        if dn < -1e-12 {
            let t = self.ground_h / dn;
            if t > NEAR_M && t <= MAX_GROUND_DEPTH_M {
                let world = self.cam.inverse().apply(&(d * t));
                let y = self.road.to_road(&world).y.abs();
                let (albedo, lab) = if y <= RoadFrame::ROAD_EDGE {
                    (ROAD_ALBEDO, label::ROAD)
                } else if y <= RoadFrame::SIDEWALK_EDGE {
                    (SIDEWALK_ALBEDO, label::SIDEWALK)
                } else {
                    (GROUND_ALBEDO, label::GROUND_OTHER)
                };
                return (t, albedo, lab, self.ground_shade);
            }
        }
        (f64::INFINITY, self.lighting.sky(), label::SKY, 1.0)
    }
}

fn render_prepared(prep: &Prepared, rect: PixelRect, eye: Eye) -> FrameBuffers {
    let mut out = FrameBuffers::blank(rect, eye, prep.lighting.desaturation);
    let w = rect.width as usize;
    if w == 0 || rect.height == 0 {
        return out;
    }
    let desat = prep.lighting.desaturation;
    let rows = out
        .rgb
        .par_chunks_mut(3 * w)
        .zip(out.depth_m.par_chunks_mut(w))
        .zip(out.instance_id.par_chunks_mut(w))
        .zip(out.semantic_id.par_chunks_mut(w))
        .zip(out.shading.par_chunks_mut(w))
        .enumerate();
    rows.for_each(|(r, ((((rgb, depth), inst), sem), shade))| {
        let y = rect.y0 + r as u32;
        let yi = i64::from(y);
        let active: Vec<&Primitive> = prep
            .prims
            .iter()
            .filter(|p| p.bounds[1] <= yi && yi < p.bounds[3])
            .collect();
        for c in 0..w {
            let x = rect.x0 + c as u32;
            let xi = i64::from(x);
            let d = prep.ray(x, y);
            let (mut best, mut albedo, mut lab, mut s) = prep.background(&d);
            let mut id = 0;
            let mut sky = best.is_infinite() && lab == label::SKY;
            for p in &active {
                if xi < p.bounds[0] || xi >= p.bounds[2] {
                    continue;
                }
                if let Some(hit) = p.shape.intersect(&d) {
                    if hit.depth < best {
                        best = hit.depth;
                        albedo = p.albedo;
                        lab = p.semantic;
                        s = hit.shade;
                        id = p.instance;
                        sky = false;
                    }
                }
            }
            let color = if sky { albedo } else { albedo.map(|a| a * s) };
            let color = desaturate(color, desat);
            rgb[3 * c..3 * c + 3].copy_from_slice(&color);
            depth[c] = best;
            inst[c] = id;
            sem[c] = lab;
            shade[c] = s;
        }
    });
    out
}

/// Renders the full image for one eye.
pub fn render(scene: &ScenePlacement, rig: &CameraRig, eye: Eye) -> FrameBuffers {
    render_window(scene, rig, eye, PixelRect::full(&rig.intrinsics))
}

/// Renders only the pixels inside `rect`; identical to cropping [`render`].
pub fn render_window(scene: &ScenePlacement, rig: &CameraRig, eye: Eye, rect: PixelRect) -> FrameBuffers {
    let prep = Prepared::new(scene, rig, eye);
    render_prepared(&prep, rect, eye)
}

/// Pixels covered by one cuboid when nothing else is in the scene: the count
/// and the tight bounds.
pub fn cuboid_coverage(cuboid: &Cuboid, rig: &CameraRig, eye: Eye) -> (usize, Option<PixelRect>) {
    let cam = rig.eye_pose(eye);
    let intr = rig.intrinsics;
    let lighting = LightingParams {
        sun_elevation_deg: 90.0,
        sun_azimuth_deg: 0.0,
        direct_intensity: 0.0,
        ambient_intensity: 1.0,
        desaturation: 0.0,
    };
    let Some(prim) = box_primitive(cuboid, &cam, &intr, &lighting, [1.0; 3], 1, 0) else {
        return (0, None);
    };
    let [bx0, by0, bx1, by1] = prim.bounds;
    let mut count = 0usize;
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, -1, -1);
    for y in by0..by1 {
        for x in bx0..bx1 {
            let d = intr.back_project(x as f64 + 0.5, y as f64 + 0.5);
            if prim.shape.intersect(&d).is_some() {
                count += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    let rect = (count > 0).then(|| PixelRect {
        x0: x0 as u32,
        y0: y0 as u32,
        width: (x1 - x0 + 1) as u32,
        height: (y1 - y0 + 1) as u32,
    });
    (count, rect)
}
