use super::{EncoderConfig, EncoderVariant, ModelConfig, DECODER, MATCH_NORM, SCENE_ENC, TARGET_ENC};
use crate::error::{shape_err, Result};
use crate::scene::{SCENE_SIZE, TARGET_SIZE};
use crate::tensor::{Graph, Var};

fn conv_ln_relu(g: &mut Graph, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
    let k = g.param(&format!("{prefix}.k"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.conv2d(x, k, b, dilation)?;
    let gain = g.param(&format!("{prefix}.g"))?;
    let off = g.param(&format!("{prefix}.o"))?;
    let n = g.layer_norm(y, gain, off)?;
    Ok(g.relu(n))
}

fn check_image(g: &Graph, x: Var, size: usize, what: &str) -> Result<()> {
    match g.shape(x) {
        [_, h, w, 3] if *h == size && *w == size => Ok(()),
        s => Err(shape_err(format!("{what} expects [B, {size}, {size}, 3], got {s:?}"))),
    }
}

/// Runs one encoder and returns every layer's activation.
fn encode(g: &mut Graph, x: Var, prefix: &str, enc: &EncoderConfig) -> Result<[Var; 6]> {
    let mut h = x;
    let mut acts = [x; 6];
    for (i, act) in acts.iter_mut().enumerate() {
        if enc.pool_before(i) {
            h = g.avg_pool2(h)?;
        }
        h = conv_ln_relu(g, h, &format!("{prefix}.l{}", i + 1), enc.dilation(i))?;
        *act = h;
    }
    Ok(acts)
}

/// Embeds `[B, 32, 32, 3]` targets to `[B, 1, 1, C]` with the encoder at `prefix`.
pub fn encode_target(g: &mut Graph, images: Var, prefix: &str, config: &ModelConfig) -> Result<Var> {
    check_image(g, images, TARGET_SIZE, "target encoder")?;
    let acts = encode(g, images, prefix, &config.encoder(EncoderVariant::Target))?;
    Ok(acts[5])
}

#[derive(Clone, Copy, Debug)]
pub struct SceneEncoding {
    /// `[B, 12, 12, C]`
    pub embedding: Var,
    /// Encoder layer outputs at 96, 48, 24, 12, 12 and 12 pixels.
    pub skips: [Var; 6],
}

pub fn encode_scene(g: &mut Graph, images: Var, config: &ModelConfig) -> Result<SceneEncoding> {
    check_image(g, images, SCENE_SIZE, "scene encoder")?;
    let skips = encode(g, images, SCENE_ENC, &config.encoder(EncoderVariant::Scene))?;
    Ok(SceneEncoding {
        embedding: skips[5],
        skips,
    })
}

/// Heatmap `H = E·t` per grid cell and the layer-normalized seed `LN(H ⊗ t)`.
pub fn match_target(g: &mut Graph, scene_emb: Var, target_emb: Var, config: &ModelConfig) -> Result<(Var, Var)> {
    let (e, t) = if config.cosine_match {
        (g.normalize_channels(scene_emb), g.normalize_channels(target_emb))
    } else {
        (scene_emb, target_emb)
    };
    let heat = g.channel_dot(e, t)?;
    let outer = g.channel_scale(heat, target_emb)?;
    let seed = normalize_seed(g, outer)?;
    Ok((heat, seed))
}

pub(crate) fn normalize_seed(g: &mut Graph, seed: Var) -> Result<Var> {
    let gain = g.param(&format!("{MATCH_NORM}.g"))?;
    let off = g.param(&format!("{MATCH_NORM}.o"))?;
    g.layer_norm(seed, gain, off)
}

/// Decodes a `[B, 12, 12, C]` seed to `[B, 96, 96, 1]` foreground probabilities.
/// `skips` may have batch 1 and are then shared by every seed.
pub fn decode_segmentation(g: &mut Graph, seed: Var, skips: &[Var; 6]) -> Result<Var> {
    let b = g.shape(seed)[0];
    let sb = g.shape(skips[0])[0];
    let skips: Vec<Var> = if sb == b {
        skips.to_vec()
    } else if sb == 1 {
        skips.iter().map(|&s| g.tile_batch(s, b)).collect::<Result<_>>()?
    } else {
        return Err(shape_err(format!("decoder: seed batch {b} vs skip batch {sb}")));
    };
    // Decoder layer i concatenates encoder skip 6 - i.
    let mut h = seed;
    for i in 0..6 {
        let x = g.concat(h, skips[5 - i])?;
        let prefix = format!("{DECODER}.l{}", i + 1);
        h = if i < 5 {
            conv_ln_relu(g, x, &prefix, 1)?
        } else {
            let k = g.param(&format!("{prefix}.k"))?;
            let bias = g.param(&format!("{prefix}.b"))?;
            g.conv2d(x, k, bias, 1)?
        };
        if (2..=4).contains(&i) {
            h = g.upsample_nn2(h)?;
        }
    }
    let p = g.softmax2(h)?;
    g.select_channel(p, 1)
}

/// Full Siamese U-net: `[B,32,32,3]` targets and `[B,96,96,3]` scenes to
/// `[B,96,96,1]` foreground probabilities.
pub fn siamese_unet_forward(g: &mut Graph, targets: Var, scenes: Var, config: &ModelConfig) -> Result<Var> {
    if g.shape(targets)[0] != g.shape(scenes)[0] {
        return Err(shape_err(format!(
            "target batch {:?} vs scene batch {:?}",
            g.shape(targets),
            g.shape(scenes)
        )));
    }
    let t = encode_target(g, targets, TARGET_ENC, config)?;
    let enc = encode_scene(g, scenes, config)?;
    let (_, seed) = match_target(g, enc.embedding, t, config)?;
    decode_segmentation(g, seed, &enc.skips)
}
