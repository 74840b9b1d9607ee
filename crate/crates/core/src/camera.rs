//! Calibrated pinhole cameras with two-term radial distortion, extrinsic
//! corrections for bundle adjustment, and rig file I/O.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{RowMap, Tape, Var};
use crate::so3::{self, Mat3, Vec3};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point is behind camera `{camera}` (depth {depth})")]
    BehindCamera { camera: String, depth: f64 },
    #[error("camera `{camera}`: {message}")]
    Invalid { camera: String, message: String },
    #[error("rig file {path}: {message}")]
    Format { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One calibrated camera. World-to-camera: `p = R(rotation) X + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    #[serde(rename = "rotation_axis_angle")]
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

/// Learned extrinsic correction: left-multiplied axis-angle rotation and additive translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicDelta {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl ExtrinsicDelta {
    pub fn is_zero(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }

    /// Rotation angle in degrees and translation norm in millimeters.
    pub fn magnitude_deg_mm(&self) -> (f64, f64) {
        let rot = norm3(&self.rotation).to_degrees();
        let tr = norm3(&self.translation) * 1000.0;
        (rot, tr)
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl Camera {
    pub fn rotation_matrix(&self) -> Mat3 {
        so3::rodrigues(&self.rotation)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |message: &str| CameraError::Invalid {
            camera: self.name.clone(),
            message: message.to_string(),
        };
        let all = [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2];
        if !all
            .iter()
            .chain(&self.rotation)
            .chain(&self.translation)
            .all(|v| v.is_finite())
        {
            return Err(bad("non-finite parameter"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(bad("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("image size must be positive"));
        }
        Ok(())
    }

    /// World point to camera frame, with an optional extrinsic correction.
    pub fn to_camera_frame(&self, delta: &ExtrinsicDelta, x: &Vec3) -> Vec3 {
        let r = so3::mat_mul(&so3::rodrigues(&delta.rotation), &self.rotation_matrix());
        let p = so3::mat_vec(&r, x);
        [
            p[0] + self.translation[0] + delta.translation[0],
            p[1] + self.translation[1] + delta.translation[1],
            p[2] + self.translation[2] + delta.translation[2],
        ]
    }

    /// Camera-frame point to distorted pixel coordinates. Depth must be positive.
    pub fn project_camera_frame(&self, p: &Vec3) -> Result<[f64; 2], CameraError> {
        if !(p[2] > 0.0) {
            return Err(CameraError::BehindCamera {
                camera: self.name.clone(),
                depth: p[2],
            });
        }
        Ok(self.intrinsics().pixel(p))
    }

    /// `Π(X; c, δ)`.
    pub fn project(&self, delta: &ExtrinsicDelta, x: &Vec3) -> Result<[f64; 2], CameraError> {
        self.project_camera_frame(&self.to_camera_frame(delta, x))
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            k1: self.k1,
            k2: self.k2,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let r = self.rotation_matrix();
        let c = so3::mat_t_vec(&r, &self.translation);
        [-c[0], -c[1], -c[2]]
    }
}

/// Bakes `delta` into a camera whose own delta is zero.
pub fn compose_extrinsic_delta(camera: &Camera, delta: &ExtrinsicDelta) -> Camera {
    let mut out = camera.clone();
    if delta.rotation != [0.0; 3] {
        let r = so3::mat_mul(&so3::rodrigues(&delta.rotation), &camera.rotation_matrix());
        out.rotation = so3::log(&r);
    }
    for k in 0..3 {
        out.translation[k] += delta.translation[k];
    }
    out
}

/// Extrinsic disagreement between two cameras: relative rotation angle in
/// degrees and translation-vector difference in millimeters.
pub fn extrinsic_error(a: &Camera, b: &Camera) -> (f64, f64) {
    let rel = so3::mat_mul(&a.rotation_matrix(), &so3::transpose(&b.rotation_matrix()));
    let angle = norm3(&so3::log(&rel)).to_degrees();
    let d = [
        a.translation[0] - b.translation[0],
        a.translation[1] - b.translation[1],
        a.translation[2] - b.translation[2],
    ];
    (angle, norm3(&d) * 1000.0)
}

/// Pinhole intrinsics with radial distortion, usable as a tape row map
/// from camera-frame points (`n x 3`) to pixels (`n x 2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Intrinsics {
    #[inline]
    pub fn pixel(&self, p: &[f64; 3]) -> [f64; 2] {
        let u = p[0] / p[2];
        let v = p[1] / p[2];
        let r2 = u * u + v * v;
        let f = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        [self.fx * u * f + self.cx, self.fy * v * f + self.cy]
    }
}

impl RowMap for Intrinsics {
    fn in_cols(&self) -> usize {
        3
    }

    fn out_cols(&self) -> usize {
        2
    }

    fn forward(&self, input: &[f64], output: &mut [f64]) {
        // Points at non-positive depth carry zero weight; keep them finite.
        if !(input[2] > 0.0) {
            output[0] = self.cx;
            output[1] = self.cy;
            return;
        }
        let px = self.pixel(&[input[0], input[1], input[2]]);
        output.copy_from_slice(&px);
    }

    fn backward(&self, input: &[f64], _output: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
        let z = input[2];
        if !(z > 0.0) {
            return;
        }
        let u = input[0] / z;
        let v = input[1] / z;
        let r2 = u * u + v * v;
        let f = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let df = self.k1 + 2.0 * self.k2 * r2;
        // Chain through (u', v') = (u f, v f) and then through (u, v) = (x/z, y/z).
        let gu_d = grad_out[0] * self.fx;
        let gv_d = grad_out[1] * self.fy;
        let gu = gu_d * (f + 2.0 * u * u * df) + gv_d * (2.0 * u * v * df);
        let gv = gu_d * (2.0 * u * v * df) + gv_d * (f + 2.0 * v * v * df);
        grad_in[0] += gu / z;
        grad_in[1] += gv / z;
        grad_in[2] -= (gu * u + gv * v) / z;
    }
}

/// Records `Π` for `points` (`n x 3`) on the tape. `delta_rot` and
/// `delta_trans` are `1 x 3` or `None` for a frozen camera. Returns the
/// camera-frame points and the pixels.
pub fn project_on_tape(tape: &mut Tape, camera: &Camera, points: Var, delta: Option<(Var, Var)>) -> (Var, Var) {
    let base_rot = tape.constant(Tensor::row(&camera.rotation_matrix()));
    let base_t = tape.constant(Tensor::row(&camera.translation));
    let (rot, trans) = match delta {
        Some((dr, dt)) => {
            let rd = tape.rodrigues(dr);
            (tape.rot_mul(rd, base_rot), tape.add(base_t, dt))
        }
        None => (base_rot, base_t),
    };
    let rotated = tape.rot_apply(rot, points);
    let cam = tape.add(rotated, trans);
    let pixels = tape.map_rows(cam, Arc::new(camera.intrinsics()));
    (cam, pixels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.cameras.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name == name)
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self, CameraError> {
        let cameras: Vec<Camera> = serde_json::from_str(text).map_err(|e| CameraError::Format {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        if cameras.is_empty() {
            return Err(CameraError::Format {
                path: path.to_string(),
                message: "rig has no cameras".into(),
            });
        }
        for (i, c) in cameras.iter().enumerate() {
            c.validate()?;
            if cameras[..i].iter().any(|o| o.name == c.name) {
                return Err(CameraError::Format {
                    path: path.to_string(),
                    message: format!("duplicate camera name `{}`", c.name),
                });
            }
        }
        Ok(Self { cameras })
    }

    pub fn load(path: &Path) -> Result<Self, CameraError> {
        let text = std::fs::read_to_string(path).map_err(|source| CameraError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.cameras).expect("camera serialization")
    }

    /// Rig with every delta baked in.
    pub fn refined(&self, deltas: &[ExtrinsicDelta]) -> Self {
        Self {
            cameras: self
                .cameras
                .iter()
                .zip(deltas)
                .map(|(c, d)| compose_extrinsic_delta(c, d))
                .collect(),
        }
    }
}

/// Camera placed at `center` looking at `target`, with world `z` up in the image as `-y`.
pub fn look_at(name: &str, center: Vec3, target: Vec3, intr: Intrinsics, width: u32, height: u32) -> Camera {
    let sub = |a: Vec3, b: Vec3| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: Vec3, b: Vec3| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let unit = |a: Vec3| {
        let n = norm3(&a);
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let forward = unit(sub(target, center));
    let right = unit(cross(forward, [0.0, 0.0, 1.0]));
    let down = cross(forward, right);
    // Rows of R are the camera axes expressed in world coordinates.
    let r = [
        right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1], forward[2],
    ];
    let rc = so3::mat_vec(&r, &center);
    Camera {
        name: name.to_string(),
        fx: intr.fx,
        fy: intr.fy,
        cx: intr.cx,
        cy: intr.cy,
        k1: intr.k1,
        k2: intr.k2,
        rotation: so3::log(&r),
        translation: [-rc[0], -rc[1], -rc[2]],
        width,
        height,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple() -> Camera {
        Camera {
            name: "c".into(),
            fx: 1000.0,
            fy: 1000.0,
            cx: 500.0,
            cy: 400.0,
            k1: 0.0,
            k2: 0.0,
            rotation: [0.0; 3],
            translation: [0.0; 3],
            width: 1000,
            height: 800,
        }
    }

    #[test]
    fn projection_examples() {
        let c = simple();
        let d = ExtrinsicDelta::default();
        assert_eq!(c.project(&d, &[0.0, 0.0, 2.0]).unwrap(), [500.0, 400.0]);
        assert_eq!(c.project(&d, &[0.2, -0.1, 2.0]).unwrap(), [600.0, 350.0]);
        let mut k = simple();
        k.k1 = 0.1;
        // u = 0.1, r² = 0.01, factor 1.001.
        let px = k.project(&d, &[0.2, 0.0, 2.0]).unwrap();
        assert!((px[0] - 600.1).abs() < 1e-9);
        assert!(matches!(
            c.project(&d, &[0.0, 0.0, -1.0]),
            Err(CameraError::BehindCamera { .. })
        ));
        assert!(c.project(&d, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn projection_on_optical_axis_and_distortion_oracle() {
        let mut c = simple();
        c.cx = 0.0;
        c.cy = 0.0;
        let d = ExtrinsicDelta::default();
        assert_eq!(c.project(&d, &[0.0, 0.0, 2.0]).unwrap(), [0.0, 0.0]);
        assert_eq!(c.project(&d, &[0.1, 0.0, 2.0]).unwrap(), [50.0, 0.0]);
        c.k1 = -0.1;
        // Independent evaluation: u = 0.2, v = 0.1, r² = 0.05, factor 1 - 0.005.
        let px = c.project(&d, &[0.2, 0.1, 1.0]).unwrap();
        assert!((px[0] - 1000.0 * 0.2 * 0.995).abs() < 1e-9);
        assert!((px[1] - 1000.0 * 0.1 * 0.995).abs() < 1e-9);
    }

    #[test]
    fn compose_examples() {
        let mut c = simple();
        c.rotation = [0.0, 0.0, 30f64.to_radians()];
        assert_eq!(compose_extrinsic_delta(&c, &ExtrinsicDelta::default()), c);
        let shifted = compose_extrinsic_delta(
            &c,
            &ExtrinsicDelta {
                rotation: [0.0; 3],
                translation: [0.01, 0.0, 0.0],
            },
        );
        assert_eq!(shifted.translation, [0.01, 0.0, 0.0]);
        let turned = compose_extrinsic_delta(
            &c,
            &ExtrinsicDelta {
                rotation: [0.0, 0.0, 0.5f64.to_radians()],
                translation: [0.0; 3],
            },
        );
        let direct = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), 30.5f64.to_radians());
        let got = turned.rotation_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((got[3 * i + j] - direct[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn depth_scaling_along_ray_is_invariant() {
        let mut c = simple();
        c.rotation = [0.2, 0.1, -0.3];
        c.translation = [0.1, 0.2, 3.0];
        let d = ExtrinsicDelta::default();
        let p = c.to_camera_frame(&d, &[0.3, -0.2, 0.5]);
        let a = c.project_camera_frame(&p).unwrap();
        let b = c.project_camera_frame(&[2.5 * p[0], 2.5 * p[1], 2.5 * p[2]]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }

    #[test]
    fn baked_delta_projects_identically() {
        let mut c = simple();
        c.rotation = [0.1, -0.2, 0.05];
        c.translation = [0.3, 0.1, 4.0];
        c.k1 = -0.05;
        c.k2 = 0.01;
        let d = ExtrinsicDelta {
            rotation: [0.01, 0.004, -0.008],
            translation: [0.01, -0.02, 0.005],
        };
        let baked = compose_extrinsic_delta(&c, &d);
        for x in [[0.1, 0.2, 0.3], [-0.5, 0.4, 1.0], [0.0, 0.0, 0.0]] {
            let a = c.project(&d, &x).unwrap();
            let b = baked.project(&ExtrinsicDelta::default(), &x).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let intr = Intrinsics {
            fx: 1600.0,
            fy: 1600.0,
            cx: 1024.0,
            cy: 768.0,
            k1: 0.0,
            k2: 0.0,
        };
        let c = look_at("a", [5.0, 1.0, 1.8], [0.0, 0.0, 0.9], intr, 2048, 1536);
        let px = c.project(&ExtrinsicDelta::default(), &[0.0, 0.0, 0.9]).unwrap();
        assert!((px[0] - 1024.0).abs() < 1e-9 && (px[1] - 768.0).abs() < 1e-9);
        // Higher points appear higher in the image.
        let up = c.project(&ExtrinsicDelta::default(), &[0.0, 0.0, 1.5]).unwrap();
        assert!(up[1] < 768.0);
        let center = c.center();
        assert!((center[0] - 5.0).abs() < 1e-9 && (center[2] - 1.8).abs() < 1e-9);
    }

    #[test]
    fn rig_json_round_trip_and_errors() {
        let rig = CameraRig {
            cameras: vec![simple()],
        };
        let text = rig.to_json();
        assert!(text.contains("rotation_axis_angle"));
        assert_eq!(CameraRig::from_json(&text, "r").unwrap(), rig);
        assert!(CameraRig::from_json("[]", "r").is_err());
        assert!(CameraRig::from_json("{", "r").is_err());
        let dup = format!("[{0},{0}]", serde_json::to_string(&simple()).unwrap());
        assert!(CameraRig::from_json(&dup, "r").is_err());
    }

    #[test]
    fn pinhole_vjp_matches_finite_differences() {
        let intr = Intrinsics {
            fx: 900.0,
            fy: 950.0,
            cx: 10.0,
            cy: 20.0,
            k1: -0.2,
            k2: 0.05,
        };
        let x = [0.3, -0.2, 1.7];
        let g = [0.7, -1.3];
        let mut grad = [0.0; 3];
        let mut out = [0.0; 2];
        intr.forward(&x, &mut out);
        intr.backward(&x, &out, &g, &mut grad);
        for k in 0..3 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let (p, m) = (intr.pixel(&xp), intr.pixel(&xm));
            let fd = (g[0] * (p[0] - m[0]) + g[1] * (p[1] - m[1])) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }
}
