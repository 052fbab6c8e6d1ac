//! Pinhole camera, rigid poses, and plane-to-image homographies.
//!
//! Conventions: the world frame is right-handed and z-up; camera frames are
//! x-right, y-down, z-forward. A [`Pose`] maps world coordinates into the
//! frame of the entity it is attached to. Pixel centres sit at `(x + 0.5, y + 0.5)`.

pub mod polygon;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation/det tolerance for [`Pose`] validation.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Below this |det| a homography is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && cx > 0.0
            && cx < f64::from(width)
            && cy > 0.0
            && cy < f64::from(height);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "intrinsics fx={fx} fy={fy} cx={cx} cy={cy} for {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, 90 degree horizontal field of view, centred principal point.
    pub fn centered(width: u32, height: u32) -> Self {
        let f = f64::from(width) / 2.0;
        Self {
            fx: f,
            fy: f,
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Direction (camera frame, z = 1) through the continuous pixel coordinate.
    pub fn back_project(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rigid transform `p_frame = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidConfig(format!(
                "rotation is not proper orthonormal (|RtR-I|={ortho:e}, det={det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera pose for a camera at `position` heading along world azimuth `yaw`
    /// (radians, CCW from +x) with zero pitch and roll.
    pub fn camera_looking(position: Vector3<f64>, yaw: f64) -> Self {
        let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * position),
        }
    }

    /// Frame of a vertical plane facing horizontal direction `normal`:
    /// local x runs to the viewer's right, local y up, local z along `normal`.
    pub fn facing(center: Vector3<f64>, normal: Vector3<f64>) -> Self {
        let up = Vector3::z();
        let n = Vector3::new(normal.x, normal.y, 0.0).normalize();
        let ex = up.cross(&n);
        let rotation = Matrix3::from_rows(&[ex.transpose(), up.transpose(), n.transpose()]);
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Origin of the posed frame, in world coordinates.
    pub fn origin(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World direction of the frame's i-th axis.
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.rotation.row(i).transpose()
    }
}

/// Rectangular planar surface in its local z = 0 plane, centred on the frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarSurface {
    pub pose: Pose,
    pub width_m: f64,
    pub height_m: f64,
    pub surface_id: u32,
}

impl PlanarSurface {
    pub fn center(&self) -> Vector3<f64> {
        self.pose.origin()
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.pose.axis(2)
    }

    /// World point at surface-local (x, y).
    pub fn local_to_world(&self, x: f64, y: f64) -> Vector3<f64> {
        self.center() + self.pose.axis(0) * x + self.pose.axis(1) * y
    }

    /// Corners in texture order: top-left, top-right, bottom-right, bottom-left.
    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let (hw, hh) = (self.width_m / 2.0, self.height_m / 2.0);
        [
            self.local_to_world(-hw, hh),
            self.local_to_world(hw, hh),
            self.local_to_world(hw, -hh),
            self.local_to_world(-hw, -hh),
        ]
    }

    /// World point at the centre of texel (u, v) for a `rows x cols` texture.
    pub fn texel_world(&self, u: f64, v: f64, rows: usize, cols: usize) -> Vector3<f64> {
        let x = (u + 0.5) / cols as f64 * self.width_m - self.width_m / 2.0;
        let y = self.height_m / 2.0 - (v + 0.5) / rows as f64 * self.height_m;
        self.local_to_world(x, y)
    }
}

/// Maps texel coordinates (u, v, 1) to homogeneous image pixels. Stored unnormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Copy scaled so the bottom-right entry is 1.
    pub fn normalized(&self) -> Self {
        let s = self.matrix[(2, 2)];
        Self {
            matrix: if s != 0.0 { self.matrix / s } else { self.matrix },
        }
    }

    /// Applies the map; `None` when the point lands on or behind the line at infinity.
    pub fn apply(&self, u: f64, v: f64) -> Option<Vector2<f64>> {
        let p = self.matrix * Vector3::new(u, v, 1.0);
        (p.z.abs() > f64::EPSILON).then(|| Vector2::new(p.x / p.z, p.y / p.z))
    }

    pub fn det(&self) -> f64 {
        self.matrix.determinant()
    }
}

/// Intrinsics plus the world-to-(left-)camera pose and stereo baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub baseline_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    Mono,
    Left,
    Right,
}

impl CameraRig {
    /// The camera for one eye; the right eye sits `baseline_m` along camera +x.
    pub fn eye_pose(&self, eye: Eye) -> Pose {
        match eye {
            Eye::Mono | Eye::Left => self.pose,
            Eye::Right => Pose {
                rotation: self.pose.rotation,
                translation: self.pose.translation - Vector3::new(self.baseline_m, 0.0, 0.0),
            },
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.origin()
    }
}

/// Pinhole projection. Returns the pixel and the camera-frame depth z; for
/// z <= 0 the pixel is finite but meaningless.
pub fn project_point(intr: &CameraIntrinsics, cam_pose: &Pose, world_pt: &Vector3<f64>) -> (Vector2<f64>, f64) {
    let p = cam_pose.apply(world_pt);
    let z = p.z;
    let zs = if z.abs() < 1e-12 { 1e-12f64.copysign(z) } else { z };
    (
        Vector2::new(intr.fx * p.x / zs + intr.cx, intr.fy * p.y / zs + intr.cy),
        z,
    )
}

/// Homography taking texel (u, v) of a `texel_dims = (rows, cols)` texture on
/// `surface` to its image pixel.
pub fn plane_homography(
    intr: &CameraIntrinsics,
    cam_pose: &Pose,
    surface: &PlanarSurface,
    texel_dims: (usize, usize),
) -> Result<Homography> {
    let (rows, cols) = texel_dims;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("texture has zero size".into()));
    }
    let center_cam = cam_pose.apply(&surface.center());
    if center_cam.z <= 0.0 {
        return Err(Error::DegenerateView(format!(
            "surface {} centre is behind the camera (z = {:.3})",
            surface.surface_id, center_cam.z
        )));
    }
    let ex = cam_pose.rotation * surface.pose.axis(0);
    let ey = cam_pose.rotation * surface.pose.axis(1);
    let plane = Matrix3::from_columns(&[ex, ey, center_cam]);
    let sx = surface.width_m / cols as f64;
    let sy = surface.height_m / rows as f64;
    let texel_to_local = Matrix3::new(
        sx,
        0.0,
        0.5 * sx - surface.width_m / 2.0,
        0.0,
        -sy,
        surface.height_m / 2.0 - 0.5 * sy,
        0.0,
        0.0,
        1.0,
    );
    let h = Homography {
        matrix: intr.matrix() * plane * texel_to_local,
    };
    let det = h.det();
    if det.abs() < SINGULAR_DET {
        return Err(Error::DegenerateView(format!(
            "surface {} is edge-on (|det| = {:e})",
            surface.surface_id,
            det.abs()
        )));
    }
    Ok(h)
}

pub fn invert_homography(h: &Homography) -> Result<Homography> {
    let det = h.det();
    if !det.is_finite() || det.abs() <= SINGULAR_DET {
        return Err(Error::SingularHomography(det.abs()));
    }
    let inv = h
        .matrix
        .try_inverse()
        .ok_or(Error::SingularHomography(det.abs()))?;
    Ok(Homography { matrix: inv })
}

/// Wraps an angle to [-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if x < -std::f64::consts::PI {
        x += two_pi;
    }
    x
}
