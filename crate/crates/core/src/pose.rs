//! 25-component camera poses and the multi-view pose sampler.
//!
//! Layout: 16 extrinsic values (row-major 4x4 camera-to-world transform)
//! followed by 9 intrinsic values (row-major 3x3, normalized image
//! coordinates). The camera sits on a sphere of fixed radius looking at the
//! origin; only yaw and pitch vary, roll is always zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const CAMERA_RADIUS: f64 = 2.7;
pub const FOCAL_LENGTH: f64 = 4.2647;
pub const PRINCIPAL_POINT: f64 = 0.5;
pub const POSE_COMPONENTS: usize = 25;

const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub extrinsic: [f64; 16],
    pub intrinsic: [f64; 9],
}

/// Closed interval of angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
}

impl AngleRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(Error::Config(format!(
                "{what} range [{}, {}] is not a well-ordered finite interval",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

impl CameraPose {
    /// Camera on the orbit sphere at the given yaw/pitch (degrees), roll 0.
    pub fn from_yaw_pitch(yaw_deg: f64, pitch_deg: f64) -> Self {
        let (sy, cy) = yaw_deg.to_radians().sin_cos();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        // Columns: camera x axis, camera y axis, and the origin-to-camera
        // direction (camera looks along -z).
        let r = [
            [cy, -sp * sy, sy * cp],
            [0.0, cp, sp],
            [-sy, -sp * cy, cy * cp],
        ];
        let t = [
            CAMERA_RADIUS * r[0][2],
            CAMERA_RADIUS * r[1][2],
            CAMERA_RADIUS * r[2][2],
        ];
        let mut extrinsic = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                extrinsic[i * 4 + j] = r[i][j];
            }
            extrinsic[i * 4 + 3] = t[i];
        }
        extrinsic[15] = 1.0;
        Self {
            extrinsic,
            intrinsic: default_intrinsic(),
        }
    }

    pub fn from_components(components: &[f64]) -> Result<Self> {
        if components.len() != POSE_COMPONENTS {
            return Err(Error::Dimension(format!(
                "camera pose needs {POSE_COMPONENTS} components, got {}",
                components.len()
            )));
        }
        let mut extrinsic = [0.0; 16];
        let mut intrinsic = [0.0; 9];
        extrinsic.copy_from_slice(&components[..16]);
        intrinsic.copy_from_slice(&components[16..]);
        let pose = Self {
            extrinsic,
            intrinsic,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn components(&self) -> [f64; POSE_COMPONENTS] {
        let mut out = [0.0; POSE_COMPONENTS];
        out[..16].copy_from_slice(&self.extrinsic);
        out[16..].copy_from_slice(&self.intrinsic);
        out
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let e = &self.extrinsic;
        [[e[0], e[1], e[2]], [e[4], e[5], e[6]], [e[8], e[9], e[10]]]
    }

    /// Largest absolute entry of `RᵀR - I`.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = self.rotation();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn yaw(&self) -> f64 {
        let r = self.rotation();
        r[0][2].atan2(r[2][2]).to_degrees()
    }

    pub fn pitch(&self) -> f64 {
        let r = self.rotation();
        r[1][2].clamp(-1.0, 1.0).asin().to_degrees()
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .extrinsic
            .iter()
            .chain(&self.intrinsic)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Dimension(
                "camera pose has non-finite components".into(),
            ));
        }
        let defect = self.orthonormality_defect();
        if defect > ORTHONORMAL_TOL {
            return Err(Error::Dimension(format!(
                "camera rotation is not orthonormal (defect {defect:e})"
            )));
        }
        if self.intrinsic[8] != 1.0 {
            return Err(Error::Dimension(format!(
                "intrinsic[8] must be 1, got {}",
                self.intrinsic[8]
            )));
        }
        Ok(())
    }
}

fn default_intrinsic() -> [f64; 9] {
    [
        FOCAL_LENGTH,
        0.0,
        PRINCIPAL_POINT,
        0.0,
        FOCAL_LENGTH,
        PRINCIPAL_POINT,
        0.0,
        0.0,
        1.0,
    ]
}

/// Frontal camera: yaw 0, pitch 0.
pub fn canonical_pose() -> CameraPose {
    CameraPose::from_yaw_pitch(0.0, 0.0)
}

/// Draws `n` poses with yaw and pitch uniform over the given ranges.
pub fn sample_multiview_poses(
    rng: &mut SeededRng,
    n: usize,
    yaw: AngleRange,
    pitch: AngleRange,
) -> Result<Vec<CameraPose>> {
    if n == 0 {
        return Err(Error::Config("multi-view sampler needs n >= 1".into()));
    }
    yaw.validate("yaw")?;
    pitch.validate("pitch")?;
    Ok((0..n)
        .map(|_| {
            let y = rng.uniform(yaw.lo, yaw.hi);
            let p = rng.uniform(pitch.lo, pitch.hi);
            CameraPose::from_yaw_pitch(y, p)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_is_frontal_and_orthonormal() {
        let p = canonical_pose();
        assert_eq!(p.yaw(), 0.0);
        assert_eq!(p.pitch(), 0.0);
        assert!(p.orthonormality_defect() < 1e-6);
        assert_eq!(p, canonical_pose());
        // camera sits on +z at the orbit radius
        assert!((p.extrinsic[11] - CAMERA_RADIUS).abs() < 1e-12);
    }

    #[test]
    fn yaw_pitch_accessors_round_trip() {
        for &(y, p) in &[(30.0, 0.0), (-50.0, 30.0), (12.5, -17.25), (0.0, -30.0)] {
            let pose = CameraPose::from_yaw_pitch(y, p);
            assert!((pose.yaw() - y).abs() < 1e-9, "yaw {y}");
            assert!((pose.pitch() - p).abs() < 1e-9, "pitch {p}");
            assert!(pose.orthonormality_defect() < 1e-12);
            pose.validate().unwrap();
        }
    }

    #[test]
    fn camera_looks_at_origin() {
        let pose = CameraPose::from_yaw_pitch(40.0, -20.0);
        let r = pose.rotation();
        let t = [pose.extrinsic[3], pose.extrinsic[7], pose.extrinsic[11]];
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - CAMERA_RADIUS).abs() < 1e-12);
        for i in 0..3 {
            assert!((t[i] / norm - r[i][2]).abs() < 1e-12);
        }
        // roll-free: camera x axis has no vertical component
        assert!(r[1][0].abs() < 1e-12);
    }

    #[test]
    fn components_round_trip() {
        let pose = CameraPose::from_yaw_pitch(-10.0, 5.0);
        let back = CameraPose::from_components(&pose.components()).unwrap();
        assert_eq!(pose, back);
        assert!(CameraPose::from_components(&[0.0; 24]).is_err());
        let mut bad = pose.components();
        bad[0] = 2.0;
        assert!(CameraPose::from_components(&bad).is_err());
    }

    #[test]
    fn sampler_bounds_and_determinism() {
        let yaw = AngleRange::new(-50.0, 50.0);
        let pitch = AngleRange::new(-30.0, 30.0);
        let a = sample_multiview_poses(&mut SeededRng::new(7), 3, yaw, pitch).unwrap();
        let b = sample_multiview_poses(&mut SeededRng::new(7), 3, yaw, pitch).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        for p in &a {
            assert!(yaw.contains(p.yaw()) && pitch.contains(p.pitch()));
        }
    }

    #[test]
    fn degenerate_range_gives_canonical() {
        let z = AngleRange::new(0.0, 0.0);
        let poses = sample_multiview_poses(&mut SeededRng::new(1), 1, z, z).unwrap();
        assert_eq!(poses[0], canonical_pose());
    }

    #[test]
    fn malformed_ranges_are_config_errors() {
        let ok = AngleRange::new(-1.0, 1.0);
        let bad = AngleRange::new(1.0, -1.0);
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            sample_multiview_poses(&mut rng, 3, bad, ok),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_multiview_poses(&mut rng, 0, ok, ok),
            Err(Error::Config(_))
        ));
        assert!(sample_multiview_poses(&mut rng, 2, ok, AngleRange::new(f64::NAN, 0.0)).is_err());
    }
}
