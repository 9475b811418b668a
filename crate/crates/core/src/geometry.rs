//! Pixel to sensor-frame mapping and frame transforms.
//!
//! Sensor frame: x along the arc chord (drone forward), y across the skin
//! width, z toward the skin surface. The skin is an arc of radius `R` whose
//! centre sits `d` behind the frame origin, so a contact at chord position x
//! lies at `z = sqrt(R^2 - x^2) - d`.
//!
//! The local contact frame at arc angle `theta` has axes (tangent along the
//! arc, width, outward normal). It is the sensor frame rotated about y by
//! `theta`, so the normal raw displacement `Dn >= 0` lands on the outward
//! normal and a press at the apex yields a positive `Dz` for a force pointing
//! along `-z`.

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::Polynomial1D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("x3D = {x3d_mm:.3} mm lies outside the sensing arc of radius {radius_mm} mm")]
    OutOfSurface { x3d_mm: f64, radius_mm: f64 },
    #[error("quaternion norm {0} is not 1")]
    NotUnit(f64),
    #[error("invalid geometry: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorGeometry {
    /// Arc radius, m.
    pub radius_m: f64,
    /// Distance from the arc centre to the sensor frame origin, m.
    pub offset_m: f64,
    /// Pixel column to chord position, mm.
    #[serde(default = "placeholder_g1")]
    pub g1: Polynomial1D,
    /// Pixel row to lateral position, mm.
    #[serde(default)]
    pub g2: Polynomial1D,
}

/// Uncalibrated column map for the default 960 px wide image (3 px per mm,
/// centred); replaced by the fitted map when a model is loaded.
fn placeholder_g1() -> Polynomial1D {
    Polynomial1D::affine(1.0 / 3.0, -160.0)
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            radius_m: 0.22,
            offset_m: 0.06,
            g1: placeholder_g1(),
            g2: Polynomial1D::zero(),
        }
    }
}

impl SensorGeometry {
    pub fn radius_mm(&self) -> f64 {
        1000.0 * self.radius_m
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.radius_m > self.offset_m && self.offset_m >= 0.0 && self.radius_m.is_finite()) {
            return Err(GeometryError::Invalid("need R > d >= 0"));
        }
        Ok(())
    }

    fn check(&self, x3d: f64) -> Result<(), GeometryError> {
        if !(x3d.abs() < self.radius_mm()) {
            return Err(GeometryError::OutOfSurface {
                x3d_mm: x3d,
                radius_mm: self.radius_mm(),
            });
        }
        Ok(())
    }

    /// Height of the surface point above the chord position `x3d` (mm).
    pub fn surface_z(&self, x3d: f64) -> Result<f64, GeometryError> {
        self.check(x3d)?;
        let r = self.radius_mm();
        Ok((r * r - x3d * x3d).sqrt() - 1000.0 * self.offset_m)
    }

    /// Arc angle of the contact, measured from the sensor z axis.
    pub fn arc_angle(&self, x3d: f64) -> Result<f64, GeometryError> {
        self.check(x3d)?;
        Ok((x3d / self.radius_mm()).asin())
    }
}

/// Contact location in mm in the sensor frame.
pub fn pixel_to_sensor(x2d: f64, y2d: f64, geo: &SensorGeometry) -> Result<[f64; 3], GeometryError> {
    pixel_to_sensor_with(&geo.g1, x2d, y2d, geo)
}

pub fn pixel_to_sensor_with(g1: &Polynomial1D, x2d: f64, y2d: f64, geo: &SensorGeometry) -> Result<[f64; 3], GeometryError> {
    let x = g1.eval(x2d);
    let z = geo.surface_z(x)?;
    Ok([x, geo.g2.eval(y2d), z])
}

/// Local contact frame to sensor frame.
pub fn contact_rotation(x3d: f64, geo: &SensorGeometry) -> Result<Rotation3<f64>, GeometryError> {
    let theta = geo.arc_angle(x3d)?;
    Ok(Rotation3::from_axis_angle(&Vector3::y_axis(), theta))
}

/// Express `(Ds1, Ds2, Dn)` in the sensor frame as `(Dx, Dy, Dz)`.
pub fn rotate_raw(raw: [f64; 3], rot: &Rotation3<f64>) -> [f64; 3] {
    let v = rot * Vector3::from(raw);
    [v.x, v.y, v.z]
}

/// Drone pose: position in m and body-to-global orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Build from `[w, x, y, z]`; the quaternion must already be unit length.
    pub fn new(position: [f64; 3], wxyz: [f64; 4]) -> Result<Self, GeometryError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let n = q.norm();
        if !((n - 1.0).abs() <= 1e-9) {
            return Err(GeometryError::NotUnit(n));
        }
        Ok(Self {
            position: Vector3::from(position),
            orientation: UnitQuaternion::new_unchecked(q),
        })
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            position: self.position.into(),
            orientation: self.wxyz(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Pose::new(r.position, r.orientation).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    /// `[w, x, y, z]`
    orientation: [f64; 4],
}

/// Fixed sensor-to-body transform; translation in m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Sensor-frame point (mm) to global coordinates (m).
pub fn sensor_to_global(c_mm: [f64; 3], pose: &Pose, body: &RigidTransform) -> [f64; 3] {
    let b = body.apply(Vector3::from(c_mm) / 1000.0);
    let g = pose.position + pose.orientation * b;
    [g.x, g.y, g.z]
}

/// Global point (m) back to the sensor frame (mm).
pub fn global_to_sensor(g: [f64; 3], pose: &Pose, body: &RigidTransform) -> [f64; 3] {
    let b = pose.orientation.inverse() * (Vector3::from(g) - pose.position);
    let c = body.apply_inverse(b) * 1000.0;
    [c.x, c.y, c.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn geo() -> SensorGeometry {
        SensorGeometry::default()
    }

    #[test]
    fn surface_height_matches_circle() {
        let g = geo();
        assert!((g.surface_z(0.0).unwrap() - 160.0).abs() < 1e-12);
        assert!((g.surface_z(110.0).unwrap() - 130.525_588_832_576_5).abs() < 1e-9);
        let a = g.surface_z(160.0).unwrap();
        assert!((a - 90.996_688_705_415_2).abs() < 1e-9);
        assert_eq!(a, g.surface_z(-160.0).unwrap());
        assert!(matches!(g.surface_z(220.0), Err(GeometryError::OutOfSurface { .. })));
    }

    #[test]
    fn pixel_to_sensor_uses_maps() {
        let mut g = geo();
        g.g1 = Polynomial1D::affine(0.5, -100.0);
        let [x, y, z] = pixel_to_sensor(420.0, 77.0, &g).unwrap();
        assert_eq!((x, y), (110.0, 0.0));
        assert!((z - 130.525_588_832_576_5).abs() < 1e-9);
        g.g1 = Polynomial1D::affine(1.0, 0.0);
        assert!(pixel_to_sensor(300.0, 0.0, &g).is_err());
    }

    #[test]
    fn rotation_angles() {
        let g = geo();
        let r0 = contact_rotation(0.0, &g).unwrap();
        assert!((r0.matrix() - nalgebra::Matrix3::identity()).norm() < 1e-15);
        assert!((g.arc_angle(110.0).unwrap().to_degrees() - 30.0).abs() < 1e-12);
        let r = contact_rotation(110.0, &g).unwrap();
        let back = Rotation3::from_axis_angle(&Vector3::y_axis(), -g.arc_angle(110.0).unwrap()) * r;
        assert!((back.matrix() - nalgebra::Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn rotated_raw_displacements() {
        let id = Rotation3::identity();
        assert_eq!(rotate_raw([0.0, 0.0, 5.0], &id), [0.0, 0.0, 5.0]);
        let quarter = Rotation3::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2);
        let [x, y, z] = rotate_raw([0.0, 0.0, 5.0], &quarter);
        assert!((x - 5.0).abs() < 1e-12 && y.abs() < 1e-12 && z.abs() < 1e-12);
        // the outward normal of the arc point is the rotated local z axis
        let g = geo();
        let x3d = 80.0;
        let n = rotate_raw([0.0, 0.0, 1.0], &contact_rotation(x3d, &g).unwrap());
        let z = g.surface_z(x3d).unwrap() + 1000.0 * g.offset_m;
        assert!((n[0] - x3d / g.radius_mm()).abs() < 1e-12 && (n[2] - z / g.radius_mm()).abs() < 1e-12);
    }

    #[test]
    fn global_transform_examples() {
        let body = RigidTransform::identity();
        let p = sensor_to_global([0.0, 0.0, 160.0], &Pose::identity(), &body);
        assert_eq!(p, [0.0, 0.0, 0.16]);
        let moved = Pose::new([1.0, 0.0, 0.5], [1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = sensor_to_global([10.0, -20.0, 160.0], &moved, &body);
        let base = sensor_to_global([10.0, -20.0, 160.0], &Pose::identity(), &body);
        for i in 0..3 {
            assert!((q[i] - base[i] - [1.0, 0.0, 0.5][i]).abs() < 1e-15);
        }
    }

    #[test]
    fn yaw_matches_matrix_oracle() {
        let h = (FRAC_PI_2 / 2.0).cos();
        let pose = Pose::new([0.0; 3], [h, 0.0, 0.0, (FRAC_PI_2 / 2.0).sin()]).unwrap();
        let c = [100.0, 30.0, 160.0];
        let got = sensor_to_global(c, &pose, &RigidTransform::identity());
        // right-handed yaw by +90 deg about z: (x, y) -> (-y, x)
        let m = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| m[i][j] * c[j] / 1000.0).sum();
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_validation_and_serde() {
        assert!(Pose::new([0.0; 3], [1.0, 0.1, 0.0, 0.0]).is_err());
        let p = Pose::new([1.0, 2.0, 3.0], [0.0, 1.0, 0.0, 0.0]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Pose>(&json).unwrap(), p);
        assert!(serde_json::from_str::<Pose>(r#"{"position":[0,0,0],"orientation":[2,0,0,0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn circle_identity(x in -219.0f64..219.0) {
            let g = geo();
            let z = g.surface_z(x).unwrap();
            let r = g.radius_mm();
            prop_assert!((x * x + (z + 1000.0 * g.offset_m).powi(2) - r * r).abs() < 1e-9);
        }

        #[test]
        fn rotations_are_proper(x in -219.0f64..219.0) {
            let m = contact_rotation(x, &geo()).unwrap().into_inner();
            prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).norm() < 1e-12);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotation_preserves_norm(a in -10.0f64..10.0, b in -10.0f64..10.0, c in 0.0f64..10.0, x in -200.0f64..200.0) {
            let v = rotate_raw([a, b, c], &contact_rotation(x, &geo()).unwrap());
            let n0 = (a * a + b * b + c * c).sqrt();
            let n1 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            prop_assert!((n0 - n1).abs() < 1e-12);
        }

        #[test]
        fn global_roundtrip(px in -5.0f64..5.0, yaw in -3.0f64..3.0, pitch in -1.0f64..1.0,
                            cx in -150.0f64..150.0, cz in 50.0f64..200.0) {
            let q = UnitQuaternion::from_euler_angles(0.1, pitch, yaw);
            let pose = Pose { position: Vector3::new(px, -px, 0.3), orientation: q };
            let body = RigidTransform { rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, 0.2), translation: Vector3::new(0.01, 0.0, -0.02) };
            let g = sensor_to_global([cx, 5.0, cz], &pose, &body);
            let back = global_to_sensor(g, &pose, &body);
            prop_assert!((back[0] - cx).abs() < 1e-9 && (back[1] - 5.0).abs() < 1e-9 && (back[2] - cz).abs() < 1e-9);
        }
    }
}
