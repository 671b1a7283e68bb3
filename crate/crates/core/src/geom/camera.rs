use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calibrated pinhole camera. Extrinsics map world to camera coordinates
/// (x right, y down, z forward), in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

/// Fold an image-plane vector `(vx, vy)` (pixel axes, y down) into a line
/// angle `η ∈ (0, π]`, counter-clockwise on screen from the +x axis.
pub fn image_vector_angle(vx: f64, vy: f64) -> f64 {
    super::angles::wrap_pi((-vy).atan2(vx))
}

impl Camera {
    pub fn new(intrinsics: Matrix3<f64>, extrinsics: Matrix3x4<f64>, width: u32, height: u32) -> Result<Self> {
        let rotation: Matrix3<f64> = extrinsics.fixed_view::<3, 3>(0, 0).into();
        let translation: Vector3<f64> = extrinsics.column(3).into();
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::contract("camera focal lengths must be positive"));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::contract("intrinsics must be upper triangular with K[2,2] = 1"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::contract(format!("extrinsic rotation is not orthonormal (error {err:e})")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("camera image size must be nonzero"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image y
    /// points along `-up`). `fov_x` is the horizontal field of view.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fov_x: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(0.0, 0.0, -1.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye.coords);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        let intrinsics = Matrix3::new(
            f,
            0.0,
            0.5 * width as f64,
            0.0,
            f,
            0.5 * height as f64,
            0.0,
            0.0,
            1.0,
        );
        Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn extrinsics(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.set_column(3, &self.translation);
        m
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Unit optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Point2<f64> {
        let k = &self.intrinsics;
        let x = pc.x / pc.z;
        let y = pc.y / pc.z;
        Point2::new(k[(0, 0)] * x + k[(0, 1)] * y + k[(0, 2)], k[(1, 1)] * y + k[(1, 2)])
    }

    pub fn project_point(&self, p: &Point3<f64>) -> Result<Point2<f64>> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        Ok(self.project_camera_point(&pc))
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, p: &Point3<f64>) -> f64 {
        self.to_camera(p).z
    }

    /// Image line angle of a 3D direction, using the rotation only.
    pub fn project_direction(&self, d: &Vector3<f64>) -> Result<f64> {
        self.project_direction_tol(d, 1e-9)
    }

    pub(crate) fn project_direction_tol(&self, d: &Vector3<f64>, tol: f64) -> Result<f64> {
        let dc = self.rotation * d;
        let planar = (dc.x * dc.x + dc.y * dc.y).sqrt();
        if planar <= tol * dc.norm() {
            return Err(Error::DegenerateDirection);
        }
        // Skew enters through the first row of K.
        let k = &self.intrinsics;
        let vx = k[(0, 0)] * dc.x + k[(0, 1)] * dc.y;
        let vy = k[(1, 1)] * dc.y;
        Ok(image_vector_angle(vx, vy))
    }

    /// World-space ray through a continuous pixel coordinate.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Point3<f64>, Vector3<f64>) {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        let dir = self.rotation.transpose() * Vector3::new(x, y, 1.0);
        (self.center(), dir.normalize())
    }

    /// Ray through the center of integer pixel `(x, y)`.
    pub fn pixel_center_ray(&self, x: u32, y: u32) -> (Point3<f64>, Vector3<f64>) {
        self.pixel_ray(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Jacobian of the pixel coordinate with respect to the camera-space
    /// point, ignoring skew.
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let (fx, fy) = (self.fx(), self.fy());
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(fx * iz, 0.0, -fx * pc.x * iz2, 0.0, fy * iz, -fy * pc.y * iz2)
    }

    /// Horizontal field of view in radians.
    pub fn fov_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.fx()).atan()
    }

    /// Same camera rotated about its own optical axis by `angle` (radians,
    /// counter-clockwise on screen).
    pub fn rolled(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        // Screen CCW with y down is a clockwise rotation in camera (x, y).
        let roll = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        let mut out = self.clone();
        out.rotation = roll * self.rotation;
        out.translation = roll * self.translation;
        out
    }
}

/// Reads the plain-text camera file: per camera, 9 intrinsic values,
/// 12 extrinsic values (row-major), then width and height.
pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)?;
    parse_cameras(&text).map_err(|msg| Error::Parse {
        path: path.display().to_string(),
        msg,
    })
}

pub fn parse_cameras(text: &str) -> std::result::Result<Vec<Camera>, String> {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace())
        .collect();
    if tokens.len() % 23 != 0 {
        return Err(format!(
            "expected a multiple of 23 values per camera block, found {}",
            tokens.len()
        ));
    }
    let mut cams = Vec::new();
    for (ci, chunk) in tokens.chunks(23).enumerate() {
        let mut vals = [0.0f64; 21];
        for (k, t) in chunk[..21].iter().enumerate() {
            vals[k] = t
                .parse()
                .map_err(|_| format!("camera {ci}: value {k} ('{t}') is not a number"))?;
        }
        let w: u32 = chunk[21]
            .parse()
            .map_err(|_| format!("camera {ci}: width '{}' is not an integer", chunk[21]))?;
        let h: u32 = chunk[22]
            .parse()
            .map_err(|_| format!("camera {ci}: height '{}' is not an integer", chunk[22]))?;
        let k = Matrix3::from_row_slice(&vals[..9]);
        let e = Matrix3x4::from_row_slice(&vals[9..21]);
        let cam = Camera::new(k, e, w, h).map_err(|e| format!("camera {ci}: {e}"))?;
        cams.push(cam);
    }
    Ok(cams)
}

pub fn format_cameras(cams: &[Camera]) -> String {
    let mut s = String::new();
    for c in cams {
        let k = &c.intrinsics;
        let e = c.extrinsics();
        let row = |vals: Vec<f64>| vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        let kv: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |cc| k[(r, cc)])).collect();
        let ev: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |cc| e[(r, cc)])).collect();
        let _ = writeln!(s, "{}", row(kv));
        let _ = writeln!(s, "{}", row(ev));
        let _ = writeln!(s, "{} {}\n", c.width, c.height);
    }
    s
}

pub fn write_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    std::fs::write(path, format_cameras(cams))?;
    Ok(())
}

/// Evenly spread viewpoints on a sphere around `target`, skipping the
/// lowest band (below the subject). Deterministic.
pub fn sphere_rig(
    count: usize,
    target: Point3<f64>,
    radius: f64,
    fov_x: f64,
    width: u32,
    height: u32,
) -> Vec<Camera> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut cams = Vec::with_capacity(count);
    // First camera looks at the face (+z side), the rest follow a
    // Fibonacci spiral over elevations in [-35°, 85°].
    let (lo, hi) = ((-35f64).to_radians().sin(), 85f64.to_radians().sin());
    for i in 0..count {
        let dir = if i == 0 {
            Vector3::new(0.0, 0.15, 1.0).normalize()
        } else {
            let t = (i as f64 - 0.5) / (count.max(2) - 1) as f64;
            let y = hi - (hi - lo) * t;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64 + PI / 2.0;
            Vector3::new(r * a.cos(), y, r * a.sin())
        };
        let eye = target + dir * radius;
        cams.push(Camera::look_at(eye, target, Vector3::y(), fov_x, width, height));
    }
    cams
}
