//! Layered style latents and layer-masked mixing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer style code: `layers` rows of `width` values, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    layers: usize,
    width: usize,
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(layers: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if layers == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "latent must have at least one layer and unit width, got {layers}x{width}"
            )));
        }
        if values.len() != layers * width {
            return Err(Error::Dimension(format!(
                "latent {layers}x{width} needs {} values, got {}",
                layers * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("latent contains non-finite values".into()));
        }
        Ok(Self {
            layers,
            width,
            values,
        })
    }

    pub fn zeros(layers: usize, width: usize) -> Self {
        Self::filled(layers, width, 0.0)
    }

    pub fn filled(layers: usize, width: usize, value: f64) -> Self {
        assert!(layers > 0 && width > 0);
        Self {
            layers,
            width,
            values: vec![value; layers * width],
        }
    }

    /// Replicates one mapped style vector across every layer (W to W+).
    pub fn broadcast(style: &[f64], layers: usize) -> Self {
        assert!(layers > 0 && !style.is_empty());
        let mut values = Vec::with_capacity(layers * style.len());
        for _ in 0..layers {
            values.extend_from_slice(style);
        }
        Self {
            layers,
            width: style.len(),
            values,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row for a 1-based layer index.
    pub fn layer(&self, index: usize) -> &[f64] {
        let start = (index - 1) * self.width;
        &self.values[start..start + self.width]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers == other.layers && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Inclusive, 1-based span of latent layers (`13..=18` style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub lo: usize,
    pub hi: usize,
}

impl LayerRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.lo >= 1 && self.lo <= self.hi && self.hi <= layers {
            Ok(())
        } else {
            Err(Error::Range {
                lo: self.lo,
                hi: self.hi,
                layers,
            })
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.lo..=self.hi).contains(&layer)
    }

    pub fn len(&self) -> usize {
        self.hi + 1 - self.lo
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Interpolates `base` toward `injected` on the layers in `range` only:
/// `weight * base + (1 - weight) * injected`. Layers outside the range are
/// copied from `base` untouched.
pub fn mix_latent(
    base: &LatentCode,
    injected: &LatentCode,
    weight: f64,
    range: LayerRange,
) -> Result<LatentCode> {
    if !base.same_shape(injected) {
        return Err(Error::Dimension(format!(
            "cannot mix {}x{} with {}x{}",
            base.layers, base.width, injected.layers, injected.width
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Config(format!(
            "mixing weight must lie in [0, 1], got {weight}"
        )));
    }
    range.validate(base.layers)?;

    let mut out = base.clone();
    let w = base.width;
    let span = (range.lo - 1) * w..range.hi * w;
    for (o, i) in out.values[span.clone()]
        .iter_mut()
        .zip(&injected.values[span])
    {
        *o = weight * *o + (1.0 - weight) * *i;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masked_interpolation_on_fine_layers() {
        let base = LatentCode::filled(18, 512, 1.0);
        let injected = LatentCode::zeros(18, 512);
        let out = mix_latent(&base, &injected, 0.2, LayerRange::new(13, 18)).unwrap();
        for l in 1..=12 {
            assert!(out.layer(l).iter().all(|&v| v == 1.0));
        }
        for l in 13..=18 {
            assert!(out.layer(l).iter().all(|&v| v == 0.2));
        }
    }

    #[test]
    fn self_mix_is_identity() {
        let mut rng = crate::rng::SeededRng::new(5);
        let w = LatentCode::new(14, 512, rng.normal_vec(14 * 512)).unwrap();
        let out = mix_latent(&w, &w, 0.2, LayerRange::new(9, 13)).unwrap();
        for (a, b) in out.values().iter().zip(w.values()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_weight_selects_injected() {
        let base = LatentCode::filled(14, 512, 1.0);
        let injected = LatentCode::filled(14, 512, 2.0);
        let out = mix_latent(&base, &injected, 0.0, LayerRange::new(9, 13)).unwrap();
        for l in 1..=14 {
            let expect = if (9..=13).contains(&l) { 2.0 } else { 1.0 };
            assert!(out.layer(l).iter().all(|&v| v == expect), "layer {l}");
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = LatentCode::zeros(14, 512);
        let b = LatentCode::zeros(18, 512);
        assert!(matches!(
            mix_latent(&a, &b, 0.5, LayerRange::new(1, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let a = LatentCode::zeros(14, 8);
        for r in [
            LayerRange::new(0, 3),
            LayerRange::new(5, 4),
            LayerRange::new(9, 15),
        ] {
            assert!(matches!(
                mix_latent(&a, &a, 0.5, r),
                Err(Error::Range { .. })
            ));
        }
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(LatentCode::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(LatentCode::new(0, 2, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn outside_range_untouched(
            layers in 1usize..20,
            width in 1usize..16,
            seed in any::<u64>(),
            weight in 0.0f64..=1.0,
            a in 1usize..20,
            b in 1usize..20,
        ) {
            let lo = a.min(b).min(layers);
            let hi = a.max(b).min(layers);
            let mut rng = crate::rng::SeededRng::new(seed);
            let base = LatentCode::new(layers, width, rng.normal_vec(layers * width)).unwrap();
            let inj = LatentCode::new(layers, width, rng.normal_vec(layers * width)).unwrap();
            let range = LayerRange::new(lo, hi);
            let out = mix_latent(&base, &inj, weight, range).unwrap();
            for l in 1..=layers {
                for (k, (&o, (&b, &i))) in out.layer(l).iter().zip(base.layer(l).iter().zip(inj.layer(l))).enumerate() {
                    if range.contains(l) {
                        prop_assert_eq!(o, weight * b + (1.0 - weight) * i, "layer {} idx {}", l, k);
                    } else {
                        prop_assert_eq!(o.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }
}
