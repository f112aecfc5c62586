//! Mapping between external checkpoint tensors and the four generator
//! submodules.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! checkpoint = "weights/ffhq512"
//!
//! [submodules]
//! synthesis = ["backbone.synthesis.*"]
//! mapping = ["backbone.mapping.*"]
//! superresolution = ["superresolution.*"]
//! decoder = ["decoder.*"]
//! ```
//!
//! Patterns ending in `*` match by prefix, anything else must match a tensor
//! name exactly. Reading weights requires the `checkpoint-adapter` feature.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{ParamSet, Submodule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub checkpoint: PathBuf,
    pub submodules: BTreeMap<Submodule, Vec<String>>,
}

impl AdapterManifest {
    /// Tensor-name table for an EG3D-style tri-plane generator.
    pub fn eg3d(checkpoint: impl Into<PathBuf>) -> Self {
        let table = [
            (Submodule::Synthesis, "backbone.synthesis.*"),
            (Submodule::Mapping, "backbone.mapping.*"),
            (Submodule::Superresolution, "superresolution.*"),
            (Submodule::Decoder, "decoder.*"),
        ];
        Self {
            checkpoint: checkpoint.into(),
            submodules: table
                .into_iter()
                .map(|(m, p)| (m, vec![p.to_string()]))
                .collect(),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let m: AdapterManifest =
            toml::from_str(text).map_err(|e| Error::incompatible(origin, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        for m in Submodule::ALL {
            match self.submodules.get(&m) {
                Some(p) if !p.is_empty() => {}
                _ => {
                    return Err(Error::Config(format!(
                        "adapter manifest has no tensor patterns for submodule {m}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Submodule owning `tensor`, if any pattern matches.
    pub fn submodule_of(&self, tensor: &str) -> Option<Submodule> {
        self.submodules.iter().find_map(|(m, patterns)| {
            patterns
                .iter()
                .any(|p| match p.strip_suffix('*') {
                    Some(prefix) => tensor.starts_with(prefix),
                    None => tensor == p,
                })
                .then_some(*m)
        })
    }

    /// Reads every `<tensor>.f32` file (raw little-endian f32) in the
    /// checkpoint directory and concatenates them per submodule in
    /// tensor-name order. Unmatched tensors are skipped with a warning.
    #[cfg(feature = "checkpoint-adapter")]
    pub fn load_params(&self) -> Result<ParamSet> {
        let dir = &self.checkpoint;
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("f32") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push((stem.to_string(), path.clone()));
                }
            }
        }
        names.sort();
        let mut tensors: [Vec<f64>; 4] = Default::default();
        for (name, path) in names {
            let Some(m) = self.submodule_of(&name) else {
                log::warn!("tensor {name} matches no submodule; skipped");
                continue;
            };
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::incompatible(&path, "length is not a multiple of 4"));
            }
            tensors[m.index()].extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))),
            );
        }
        let [syn, map, sr, dec] = tensors;
        Ok(ParamSet::new(syn, map, sr, dec))
    }

    #[cfg(not(feature = "checkpoint-adapter"))]
    pub fn load_params(&self) -> Result<ParamSet> {
        Err(Error::Unavailable(format!(
            "loading {} needs a build with the checkpoint-adapter feature",
            self.checkpoint.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eg3d_table_round_trips_through_toml() {
        let m = AdapterManifest::eg3d("ckpt");
        let text = toml::to_string(&m).unwrap();
        let back = AdapterManifest::parse(&text, Path::new("m.toml")).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            m.submodule_of("backbone.mapping.fc0.weight"),
            Some(Submodule::Mapping)
        );
        assert_eq!(
            m.submodule_of("decoder.net.0.bias"),
            Some(Submodule::Decoder)
        );
        assert_eq!(m.submodule_of("unrelated"), None);
    }

    #[test]
    fn missing_submodule_is_config_error() {
        let text = "checkpoint = \"x\"\n[submodules]\nsynthesis = [\"a\"]\n";
        assert!(matches!(
            AdapterManifest::parse(text, Path::new("m.toml")),
            Err(Error::Config(_))
        ));
        let bad = "checkpoint = \"x\"\n[submodules]\nrenderer = [\"a\"]\n";
        assert!(AdapterManifest::parse(bad, Path::new("m.toml")).is_err());
    }

    #[cfg(not(feature = "checkpoint-adapter"))]
    #[test]
    fn loading_without_feature_is_unavailable() {
        let m = AdapterManifest::eg3d("ckpt");
        assert!(matches!(m.load_params(), Err(Error::Unavailable(_))));
    }

    #[cfg(feature = "checkpoint-adapter")]
    #[test]
    fn loads_raw_tensors_by_submodule() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, vals: &[f32]| {
            let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(dir.path().join(format!("{name}.f32")), bytes).unwrap();
        };
        write("decoder.b", &[3.0]);
        write("decoder.a", &[1.0, 2.0]);
        write("backbone.mapping.w", &[5.0]);
        let m = AdapterManifest::eg3d(dir.path());
        let p = m.load_params().unwrap();
        assert_eq!(p.get(Submodule::Decoder), &[1.0, 2.0, 3.0]);
        assert_eq!(p.get(Submodule::Mapping), &[5.0]);
        assert!(p.get(Submodule::Synthesis).is_empty());
    }
}
