use serde::{Deserialize, Serialize};

use super::masknet::{argmax_first, mask_window, rgb_window, score_crop_batch};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::raster::RgbRaster;
use crate::scene::SceneSample;
use crate::tensor::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorVariant {
    /// White-on-black crops of each instance's visible mask.
    PreSegmented,
    /// Raw scene crops, clutter included.
    Cluttered,
}

/// Ground-truth crops for every instance with a visible pixel, as
/// `(instance index, crop)`.
pub fn candidate_crops(variant: DiscriminatorVariant, sample: &SceneSample) -> Vec<(usize, RgbRaster)> {
    sample
        .instances
        .iter()
        .enumerate()
        .filter_map(|(i, inst)| {
            let com = inst.com?;
            if inst.visible_mask.is_empty() {
                return None;
            }
            let c = (com.0 as f64, com.1 as f64);
            let crop = match variant {
                DiscriminatorVariant::PreSegmented => mask_window(&inst.visible_mask, c),
                DiscriminatorVariant::Cluttered => rgb_window(&sample.scene, c),
            };
            Some((i, crop))
        })
        .collect()
}

/// Scores `crops` against `target` with the weighted-L1 head.
pub fn score_crops(
    params: &ModelParams,
    config: &ModelConfig,
    target: &RgbRaster,
    crops: &[&RgbRaster],
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(crops.len());
    for c in crops.chunks(64) {
        out.extend(score_crop_batch(params, config, target, c)?);
    }
    Ok(out)
}

/// Picks the instance whose crop best matches the target. Returns the
/// chosen instance index and `(instance index, score)` for each candidate.
pub fn discriminator_forward(
    params: &ModelParams,
    config: &ModelConfig,
    variant: DiscriminatorVariant,
    target: &RgbRaster,
    sample: &SceneSample,
) -> Result<(usize, Vec<(usize, f32)>)> {
    let cands = candidate_crops(variant, sample);
    if cands.is_empty() {
        return Err(Error::NoCandidate);
    }
    let crops: Vec<&RgbRaster> = cands.iter().map(|(_, c)| c).collect();
    let scores = score_crops(params, config, target, &crops)?;
    let best = argmax_first(&scores).expect("non-empty");
    Ok((
        cands[best].0,
        cands.iter().map(|(i, _)| *i).zip(scores).collect(),
    ))
}
