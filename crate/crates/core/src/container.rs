//! Flat binary container for latents and poses, plus a JSON debug form.
//!
//! Binary layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `ITPC`                            |
//! | 4      | 2    | version (`1`)                           |
//! | 6      | 1    | kind: `1` latent, `2` camera pose       |
//! | 7      | 1    | reserved, `0`                           |
//! | 8      | 4    | rows (latent layers, or `1` for a pose) |
//! | 12     | 4    | cols (latent width, or `25`)            |
//! | 16     | 4·n  | `rows * cols` IEEE-754 f32 values       |

use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::LatentCode;
use crate::pose::{CameraPose, POSE_COMPONENTS};

pub const MAGIC: &[u8; 4] = b"ITPC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ContainerKind {
    Latent = 1,
    Pose = 2,
}

fn encode(kind: ContainerKind, rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.push(0);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8], expect: ContainerKind, origin: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |reason: &str| Error::incompatible(origin, reason);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing container magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    if bytes[6] != expect as u8 {
        return Err(bad(&format!(
            "container holds kind {}, expected {}",
            bytes[6], expect as u8
        )));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| bad("dimension overflow"))?;
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(bad(&format!(
            "payload is {} bytes, header promises {}",
            bytes.len() - HEADER_LEN,
            4 * n
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((rows, cols, values))
}

pub fn encode_latent(latent: &LatentCode) -> Vec<u8> {
    encode(
        ContainerKind::Latent,
        latent.layers(),
        latent.width(),
        latent.values(),
    )
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentCode> {
    decode_latent_from(bytes, Path::new("<memory>"))
}

fn decode_latent_from(bytes: &[u8], origin: &Path) -> Result<LatentCode> {
    let (rows, cols, values) = decode(bytes, ContainerKind::Latent, origin)?;
    LatentCode::new(rows, cols, values)
}

pub fn encode_pose(pose: &CameraPose) -> Vec<u8> {
    encode(ContainerKind::Pose, 1, POSE_COMPONENTS, &pose.components())
}

/// Decodes a pose. f32 storage perturbs the rotation by ~1e-7, well inside
/// the orthonormality tolerance.
pub fn decode_pose(bytes: &[u8]) -> Result<CameraPose> {
    decode_pose_from(bytes, Path::new("<memory>"))
}

fn decode_pose_from(bytes: &[u8], origin: &Path) -> Result<CameraPose> {
    let (rows, cols, values) = decode(bytes, ContainerKind::Pose, origin)?;
    if rows != 1 || cols != POSE_COMPONENTS {
        return Err(Error::incompatible(
            origin,
            format!("pose container has shape {rows}x{cols}"),
        ));
    }
    CameraPose::from_components(&values)
}

pub fn write_latent(path: &Path, latent: &LatentCode) -> Result<()> {
    std::fs::write(path, encode_latent(latent)).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<LatentCode> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latent_from(&bytes, path)
}

pub fn write_pose(path: &Path, pose: &CameraPose) -> Result<()> {
    std::fs::write(path, encode_pose(pose)).map_err(|e| Error::io(path, e))
}

pub fn read_pose(path: &Path) -> Result<CameraPose> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pose_from(&bytes, path)
}

/// Human-readable JSON form, for debugging only (full f64 precision).
pub fn latent_to_text(latent: &LatentCode) -> String {
    serde_json::to_string_pretty(latent).expect("latent serializes")
}

pub fn latent_from_text(text: &str) -> Result<LatentCode> {
    let raw: LatentCode =
        serde_json::from_str(text).map_err(|e| Error::incompatible("<text>", e.to_string()))?;
    LatentCode::new(raw.layers(), raw.width(), raw.values().to_vec())
}

pub fn pose_to_text(pose: &CameraPose) -> String {
    serde_json::to_string_pretty(pose).expect("pose serializes")
}

pub fn pose_from_text(text: &str) -> Result<CameraPose> {
    let pose: CameraPose =
        serde_json::from_str(text).map_err(|e| Error::incompatible("<text>", e.to_string()))?;
    pose.validate()?;
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let latent = LatentCode::filled(2, 3, 1.5);
        let bytes = encode_latent(&latent);
        assert_eq!(&bytes[..4], b"ITPC");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn wrong_kind_and_truncation_are_rejected() {
        let latent = LatentCode::filled(2, 3, 0.5);
        let bytes = encode_latent(&latent);
        assert!(decode_pose(&bytes).is_err());
        assert!(decode_latent(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_latent(&bad),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn pose_round_trip_stays_valid() {
        let pose = CameraPose::from_yaw_pitch(23.0, -11.0);
        let back = decode_pose(&encode_pose(&pose)).unwrap();
        assert!((back.yaw() - 23.0).abs() < 1e-4);
        assert!((back.pitch() + 11.0).abs() < 1e-4);
        let text = pose_from_text(&pose_to_text(&pose)).unwrap();
        assert_eq!(text, pose);
    }

    proptest! {
        #[test]
        fn latent_round_trip_matches_f32_rounding(seed in any::<u64>(), layers in 1usize..6, width in 1usize..40) {
            let mut rng = SeededRng::new(seed);
            let latent = LatentCode::new(layers, width, rng.normal_vec(layers * width)).unwrap();
            let back = decode_latent(&encode_latent(&latent)).unwrap();
            prop_assert!(back.same_shape(&latent));
            for (a, b) in latent.values().iter().zip(back.values()) {
                prop_assert_eq!(f64::from(*a as f32), *b);
            }
            let text = latent_from_text(&latent_to_text(&latent)).unwrap();
            prop_assert_eq!(text, latent);
        }
    }
}
