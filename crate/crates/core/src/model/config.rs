use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FipError, Result};
use crate::modalities::{ModalityKind, N_MODALITIES};
use crate::sigsim::ModulationScheme;

/// Architecture of the multimodal masked autoencoder.
///
/// `decoder_layers` maps each modality to its decoder depth. A modality missing
/// from the map has no decoder (and therefore no reconstruction loss).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub encoder_layers: usize,
    pub decoder_layers: BTreeMap<ModalityKind, usize>,
    pub decoder_width: usize,
    pub n_modalities: usize,
    pub n_classes: usize,
}

fn depths(target: usize, other: usize) -> BTreeMap<ModalityKind, usize> {
    ModalityKind::ALL
        .iter()
        .map(|&m| (m, if m == ModalityKind::Constellation { target } else { other }))
        .collect()
}

impl ModelConfig {
    /// Small configuration for CPU runs: 32x32 images, 8x8 patches, width 64.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            mlp_ratio: 4,
            encoder_layers: 4,
            decoder_layers: depths(4, 2),
            decoder_width: 48,
            n_modalities: N_MODALITIES,
            n_classes: ModulationScheme::ALL.len(),
        }
    }

    /// The full-size ViT-Base layout: 224x224 images, 16x16 patches, width 768,
    /// 12 encoder layers, target decoder depth 8 and other decoders depth 4.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            d_model: 768,
            n_heads: 12,
            mlp_ratio: 4,
            encoder_layers: 12,
            decoder_layers: depths(8, 4),
            decoder_width: 384,
            n_modalities: N_MODALITIES,
            n_classes: ModulationScheme::ALL.len(),
        }
    }

    /// 2x2 patch grid of 2x2 patches with width 8, for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 4,
            patch_size: 2,
            d_model: 8,
            n_heads: 2,
            mlp_ratio: 2,
            encoder_layers: 1,
            decoder_layers: depths(2, 1),
            decoder_width: 8,
            n_modalities: N_MODALITIES,
            n_classes: ModulationScheme::ALL.len(),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch: 3 * P^2.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn decoder_depth(&self, m: ModalityKind) -> Option<usize> {
        self.decoder_layers.get(&m).copied()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(FipError::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.decoder_width.is_multiple_of(self.n_heads) {
            return err(format!(
                "decoder_width {} not divisible by n_heads {}",
                self.decoder_width, self.n_heads
            ));
        }
        // 2-D sin-cos tables split the width into four equal parts.
        if !self.d_model.is_multiple_of(4) || !self.decoder_width.is_multiple_of(4) || self.d_model == 0 || self.decoder_width == 0 {
            return err("d_model and decoder_width must be positive multiples of 4".into());
        }
        if self.mlp_ratio == 0 || self.encoder_layers == 0 {
            return err("mlp_ratio and encoder_layers must be >= 1".into());
        }
        if let Some((m, _)) = self.decoder_layers.iter().find(|(_, &d)| d == 0) {
            return err(format!("decoder depth for {m} must be >= 1"));
        }
        if self.n_modalities != N_MODALITIES {
            return err(format!("n_modalities must be {N_MODALITIES}"));
        }
        if self.n_classes != ModulationScheme::ALL.len() {
            return err(format!("n_classes must be {}", ModulationScheme::ALL.len()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::desk().n_patches(), 16);
        assert_eq!(ModelConfig::desk().patch_dim(), 192);
        assert_eq!(ModelConfig::paper().n_patches(), 196);
    }

    #[test]
    fn paper_decoder_depths() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.decoder_depth(ModalityKind::Constellation), Some(8));
        for m in [ModalityKind::Scalogram, ModalityKind::RawSignal, ModalityKind::Noise] {
            assert_eq!(cfg.decoder_depth(m), Some(4));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::desk();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.decoder_layers.insert(ModalityKind::Noise, 0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_uses_field_names_and_rejects_unknown_keys() {
        let json = serde_json::to_value(ModelConfig::desk()).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        for k in [
            "image_size",
            "patch_size",
            "d_model",
            "n_heads",
            "mlp_ratio",
            "encoder_layers",
            "decoder_layers",
            "decoder_width",
            "n_modalities",
            "n_classes",
        ] {
            assert!(keys.contains(&k.to_string()), "{k}");
        }
        assert_eq!(json["decoder_layers"]["constellation"], 4);
        let mut bad = json.clone();
        bad["d_modle"] = 3.into();
        assert!(serde_json::from_value::<ModelConfig>(bad).is_err());
    }
}
