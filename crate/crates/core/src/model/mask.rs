use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FipError, Result};
use crate::modalities::{ModalityKind, N_MODALITIES};

/// round(ratio * n_patches), halves rounding away from zero.
pub fn masked_count_for(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).round() as usize
}

/// A uniformly random set of exactly `round(ratio * n_patches)` masked positions.
pub fn sample_mask<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(FipError::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = masked_count_for(n_patches, ratio);
    let mut mask = vec![false; n_patches];
    for i in rand::seq::index::sample(rng, n_patches, k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Per-modality patch masks for one sample; `true` marks a masked patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masks: Vec<Vec<bool>>,
    pub masked_count: Vec<usize>,
    pub ratios: Vec<f64>,
}

impl MaskPlan {
    pub fn sample<R: Rng + ?Sized>(n_patches: usize, ratios: &[f64; N_MODALITIES], rng: &mut R) -> Result<Self> {
        let mut masks = Vec::with_capacity(N_MODALITIES);
        for &r in ratios {
            masks.push(sample_mask(n_patches, r, rng)?);
        }
        Ok(Self::from_masks(masks, ratios.to_vec()))
    }

    pub fn from_masks(masks: Vec<Vec<bool>>, ratios: Vec<f64>) -> Self {
        let masked_count = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
        MaskPlan {
            masks,
            masked_count,
            ratios,
        }
    }

    /// Nothing masked in any modality.
    pub fn unmasked(n_patches: usize) -> Self {
        Self::from_masks(vec![vec![false; n_patches]; N_MODALITIES], vec![0.0; N_MODALITIES])
    }

    pub fn n_patches(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }

    pub fn visible(&self, m: ModalityKind) -> Vec<usize> {
        (0..self.n_patches()).filter(|&i| !self.masks[m.index()][i]).collect()
    }

    pub fn masked(&self, m: ModalityKind) -> Vec<usize> {
        (0..self.n_patches()).filter(|&i| self.masks[m.index()][i]).collect()
    }

    pub fn masked_count(&self, m: ModalityKind) -> usize {
        self.masked_count[m.index()]
    }
}
