//! Siamese U-net, MaskNet and the discriminator oracles.

mod arch;
mod discriminator;
mod masknet;

pub use arch::{
    decode_segmentation, encode_scene, encode_target, match_target, siamese_unet_forward, SceneEncoding,
};
pub use discriminator::{candidate_crops, discriminator_forward, score_crops, DiscriminatorVariant};
pub use masknet::{
    crop_at_com, decide, one_hot_seed, propose_all, propose_at, Decision, Proposal, ProposalContext, SeedMode,
    PROPOSAL_THRESHOLD,
};
pub(crate) use masknet::{decode_proposals, head_scores};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbRaster;
use crate::rng::{mix_seed, CounterRng};
use crate::tensor::{init_msra, ModelParams, Tensor};

/// Spatial size of the scene embedding grid.
pub const GRID: usize = 12;
/// Scene pixels per grid cell.
pub const STRIDE: usize = 8;

pub const DEFAULT_WIDTHS: [usize; 6] = [32, 64, 128, 256, 384, 384];
pub const REDUCED_WIDTHS: [usize; 6] = [16, 32, 64, 128, 192, 192];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SiameseUnet,
    MaskNet,
    PresegDiscriminator,
    ClutterDiscriminator,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::SiameseUnet,
        ModelKind::MaskNet,
        ModelKind::PresegDiscriminator,
        ModelKind::ClutterDiscriminator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SiameseUnet => "siamese_unet",
            ModelKind::MaskNet => "masknet",
            ModelKind::PresegDiscriminator => "preseg_discriminator",
            ModelKind::ClutterDiscriminator => "clutter_discriminator",
        }
    }

    fn components(self) -> &'static [Component] {
        use Component::*;
        match self {
            ModelKind::SiameseUnet => &[TargetEncoder, SceneEncoder, Decoder],
            ModelKind::MaskNet => &[TargetEncoder, SceneEncoder, Decoder, CropEncoder, Head],
            ModelKind::PresegDiscriminator | ModelKind::ClutterDiscriminator => {
                &[TargetEncoder, CropEncoder, Head]
            }
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Target,
    Scene,
}

/// Layer plan for one encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channel_widths: [usize; 6],
    pub variant: EncoderVariant,
}

impl EncoderConfig {
    pub fn kernels(&self) -> [usize; 6] {
        match self.variant {
            EncoderVariant::Target => [3, 3, 3, 3, 2, 1],
            EncoderVariant::Scene => [3, 3, 3, 3, 3, 1],
        }
    }

    /// Whether a 2×2 average pool precedes layer `i` (0-based).
    pub fn pool_before(&self, i: usize) -> bool {
        match self.variant {
            EncoderVariant::Target => i >= 1,
            EncoderVariant::Scene => (1..=3).contains(&i),
        }
    }

    pub fn dilation(&self, i: usize) -> usize {
        if self.variant == EncoderVariant::Scene && i == 4 {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: [usize; 6],
    /// L2-normalize embeddings before the matching inner product.
    #[serde(default)]
    pub cosine_match: bool,
    /// MaskNet proposals seeded without the target embedding.
    #[serde(default)]
    pub untargeted: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: DEFAULT_WIDTHS,
            cosine_match: false,
            untargeted: false,
        }
    }
}

impl ModelConfig {
    pub fn with_widths(widths: [usize; 6]) -> Self {
        Self {
            widths,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Argument(format!("channel widths must be positive: {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn encoder(&self, variant: EncoderVariant) -> EncoderConfig {
        EncoderConfig {
            channel_widths: self.widths,
            variant,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.widths[5]
    }

    /// Decoder output widths: the encoder widths mirrored, ending in 2 logits.
    pub fn decoder_widths(&self) -> [usize; 6] {
        let w = self.widths;
        [w[4], w[3], w[2], w[1], w[0], 2]
    }

    /// Decoder input widths (previous output concatenated with the skip).
    pub fn decoder_inputs(&self) -> [usize; 6] {
        let w = self.widths;
        [2 * w[5], 2 * w[4], 2 * w[3], 2 * w[2], 2 * w[1], 2 * w[0]]
    }
}

#[derive(Clone, Copy)]
enum Component {
    TargetEncoder,
    SceneEncoder,
    CropEncoder,
    Decoder,
    Head,
}

pub const TARGET_ENC: &str = "target_enc";
pub const SCENE_ENC: &str = "scene_enc";
pub const CROP_ENC: &str = "crop_enc";
pub const DECODER: &str = "dec";
pub const MATCH_NORM: &str = "match";
pub const HEAD: &str = "decision";

fn conv_block(
    params: &mut ModelParams,
    rng: &mut CounterRng,
    prefix: &str,
    kernel: [usize; 4],
    norm: bool,
) -> Result<()> {
    let cout = kernel[3];
    params.insert(format!("{prefix}.k"), init_msra(&kernel, rng)?)?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))?;
    if norm {
        params.insert(format!("{prefix}.g"), Tensor::filled(&[cout], 1.0))?;
        params.insert(format!("{prefix}.o"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

fn init_encoder(params: &mut ModelParams, seed: u64, prefix: &str, enc: &EncoderConfig) -> Result<()> {
    let mut rng = CounterRng::new(mix_seed(&[seed, prefix.len() as u64, fnv(prefix)]));
    let kernels = enc.kernels();
    let mut cin = 3;
    for (i, (&k, &cout)) in kernels.iter().zip(&enc.channel_widths).enumerate() {
        conv_block(params, &mut rng, &format!("{prefix}.l{}", i + 1), [k, k, cin, cout], true)?;
        cin = cout;
    }
    Ok(())
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Fresh parameters for `kind`. Each component draws from its own stream,
/// so a component's initial weights do not depend on which others exist.
pub fn init_params(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::new();
    for c in kind.components() {
        match c {
            Component::TargetEncoder => {
                init_encoder(&mut params, seed, TARGET_ENC, &config.encoder(EncoderVariant::Target))?
            }
            Component::CropEncoder => {
                init_encoder(&mut params, seed, CROP_ENC, &config.encoder(EncoderVariant::Target))?
            }
            Component::SceneEncoder => {
                init_encoder(&mut params, seed, SCENE_ENC, &config.encoder(EncoderVariant::Scene))?
            }
            Component::Decoder => {
                let d = config.embedding_dim();
                params.insert(format!("{MATCH_NORM}.g"), Tensor::filled(&[d], 1.0))?;
                params.insert(format!("{MATCH_NORM}.o"), Tensor::zeros(&[d]))?;
                let mut rng = CounterRng::new(mix_seed(&[seed, 3, fnv(DECODER)]));
                let (ins, outs) = (config.decoder_inputs(), config.decoder_widths());
                for i in 0..6 {
                    conv_block(
                        &mut params,
                        &mut rng,
                        &format!("{DECODER}.l{}", i + 1),
                        [3, 3, ins[i], outs[i]],
                        i < 5,
                    )?;
                }
            }
            Component::Head => {
                // Negative weights: a larger L1 distance means a worse match.
                let d = config.embedding_dim();
                params.insert(format!("{HEAD}.w"), Tensor::filled(&[d], -1.0 / d as f32))?;
                params.insert(format!("{HEAD}.b"), Tensor::zeros(&[1]))?;
            }
        }
    }
    Ok(params)
}

/// Stacks RGB rasters into a `[B, H, W, 3]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&RgbRaster]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for im in images {
        if (im.width(), im.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "mixed image sizes {}x{} and {w}x{h}",
                im.width(),
                im.height()
            )));
        }
        data.extend(im.to_unit_f32());
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}
