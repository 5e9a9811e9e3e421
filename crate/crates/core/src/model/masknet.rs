use rayon::prelude::*;

use super::arch::{decode_segmentation, encode_scene, encode_target, normalize_seed};
use super::{images_to_tensor, ModelConfig, CROP_ENC, GRID, HEAD, TARGET_ENC};
use crate::error::{shape_err, Error, Result};
use crate::raster::{clamped_window, Mask, RgbRaster};
use crate::scene::{SCENE_SIZE, TARGET_SIZE};
use crate::tensor::{Graph, ModelParams, Tensor, Var};

pub const PROPOSAL_THRESHOLD: f32 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// One-hot heatmap times the target embedding.
    Targeted,
    /// One-hot broadcast over all channels, target ignored.
    Untargeted,
}

impl SeedMode {
    pub fn from_config(config: &ModelConfig) -> Self {
        if config.untargeted {
            SeedMode::Untargeted
        } else {
            SeedMode::Targeted
        }
    }
}

#[derive(Clone, Debug)]
pub struct Proposal {
    /// (row, column) on the 12×12 grid.
    pub grid: (usize, usize),
    /// Foreground probabilities, row-major 96×96.
    pub seg_map: Vec<f32>,
    pub mask: Mask,
    pub com: Option<(f64, f64)>,
    /// White-on-black 32×32 crop around `com`; `None` for empty masks.
    pub crop: Option<RgbRaster>,
    pub score: f32,
}

impl Proposal {
    pub fn grid_index(&self) -> usize {
        self.grid.0 * GRID + self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.crop.is_none()
    }

    /// Thresholds `seg_map` at [`PROPOSAL_THRESHOLD`] and crops around the mask.
    pub fn from_seg_map(grid: (usize, usize), seg_map: Vec<f32>) -> Self {
        let mask = Mask::from_vec(
            SCENE_SIZE,
            SCENE_SIZE,
            seg_map.iter().map(|&p| p >= PROPOSAL_THRESHOLD).collect(),
        );
        let com = mask.center_of_mass();
        let crop = crop_at_com(&mask).ok();
        Self {
            grid,
            seg_map,
            mask,
            com,
            crop,
            score: 0.0,
        }
    }
}

/// 32×32 white-on-black crop of `mask` centered on its rounded center of
/// mass, with the window clamped inside the frame.
pub fn crop_at_com(mask: &Mask) -> Result<RgbRaster> {
    let com = mask.center_of_mass().ok_or(Error::EmptyMask)?;
    Ok(mask_window(mask, com))
}

pub(crate) fn mask_window(mask: &Mask, center: (f64, f64)) -> RgbRaster {
    let (x0, y0) = clamped_window(center, TARGET_SIZE, mask.width());
    let mut out = RgbRaster::filled(TARGET_SIZE, TARGET_SIZE, [0, 0, 0]);
    for y in 0..TARGET_SIZE.min(mask.height()) {
        for x in 0..TARGET_SIZE.min(mask.width()) {
            if mask.get(x0 + x, y0 + y) {
                out.set(x, y, [255, 255, 255]);
            }
        }
    }
    out
}

pub(crate) fn rgb_window(image: &RgbRaster, center: (f64, f64)) -> RgbRaster {
    let (x0, y0) = clamped_window(center, TARGET_SIZE, image.width());
    let mut out = RgbRaster::filled(TARGET_SIZE, TARGET_SIZE, [0, 0, 0]);
    for y in 0..TARGET_SIZE.min(image.height()) {
        for x in 0..TARGET_SIZE.min(image.width()) {
            out.set(x, y, image.get(x0 + x, y0 + y));
        }
    }
    out
}

/// Pre-normalization seeds for `cells`, one per batch row. `target_emb` is
/// `[N, 1, 1, C]` with `N = cells.len()`.
pub fn one_hot_seed(
    g: &mut Graph,
    target_emb: Var,
    cells: &[(usize, usize)],
    mode: SeedMode,
) -> Result<Var> {
    let n = cells.len();
    let c = *g.shape(target_emb).last().unwrap_or(&0);
    if g.shape(target_emb) != [n, 1, 1, c] {
        return Err(shape_err(format!(
            "{} seed cells for target embedding {:?}",
            n,
            g.shape(target_emb)
        )));
    }
    if let Some(bad) = cells.iter().find(|(i, j)| *i >= GRID || *j >= GRID) {
        return Err(Error::Argument(format!("grid location {bad:?} outside 12x12")));
    }
    match mode {
        SeedMode::Targeted => {
            let mut h = Tensor::zeros(&[n, GRID, GRID, 1]);
            for (b, &(i, j)) in cells.iter().enumerate() {
                h.data_mut()[(b * GRID + i) * GRID + j] = 1.0;
            }
            let hv = g.input(h);
            g.channel_scale(hv, target_emb)
        }
        SeedMode::Untargeted => {
            let mut s = Tensor::zeros(&[n, GRID, GRID, c]);
            for (b, &(i, j)) in cells.iter().enumerate() {
                let o = ((b * GRID + i) * GRID + j) * c;
                s.data_mut()[o..o + c].fill(1.0);
            }
            Ok(g.input(s))
        }
    }
}

/// Layer-normalized proposal seeds followed by the decoder; `skips` may be
/// batch 1 (shared scene) or batch `cells.len()`.
pub(crate) fn decode_proposals(
    g: &mut Graph,
    target_emb: Var,
    skips: &[Var; 6],
    cells: &[(usize, usize)],
    mode: SeedMode,
) -> Result<Var> {
    let raw = one_hot_seed(g, target_emb, cells, mode)?;
    let seed = normalize_seed(g, raw)?;
    decode_segmentation(g, seed, skips)
}

/// Encoder outputs reused by all proposals of one (target, scene) pair.
#[derive(Clone, Debug)]
pub struct ProposalContext {
    pub target_emb: Tensor,
    pub skips: Vec<Tensor>,
}

impl ProposalContext {
    pub fn encode(params: &ModelParams, config: &ModelConfig, target: &RgbRaster, scene: &RgbRaster) -> Result<Self> {
        let mut g = Graph::with_params(params);
        let tv = g.input(images_to_tensor(&[target])?);
        let sv = g.input(images_to_tensor(&[scene])?);
        let t = encode_target(&mut g, tv, TARGET_ENC, config)?;
        let enc = encode_scene(&mut g, sv, config)?;
        Ok(Self {
            target_emb: g.tensor(t),
            skips: enc.skips.iter().map(|&s| g.tensor(s)).collect(),
        })
    }

    fn decode_cells(
        &self,
        params: &ModelParams,
        cells: &[(usize, usize)],
        mode: SeedMode,
    ) -> Result<Vec<Proposal>> {
        let mut g = Graph::with_params(params);
        let t = g.input(self.target_emb.clone());
        let t = g.tile_batch(t, cells.len())?;
        let skips: Vec<Var> = self.skips.iter().map(|s| g.input(s.clone())).collect();
        let skips: [Var; 6] = skips.try_into().map_err(|_| shape_err("expected 6 skips"))?;
        let out = decode_proposals(&mut g, t, &skips, cells, mode)?;
        let px = SCENE_SIZE * SCENE_SIZE;
        Ok(g.value(out)
            .chunks(px)
            .zip(cells)
            .map(|(p, &cell)| Proposal::from_seg_map(cell, p.to_vec()))
            .collect())
    }
}

/// Decodes the proposal seeded at grid cell `(row, col)`.
pub fn propose_at(
    params: &ModelParams,
    ctx: &ProposalContext,
    location: (usize, usize),
    mode: SeedMode,
) -> Result<Proposal> {
    if location.0 >= GRID || location.1 >= GRID {
        return Err(Error::Argument(format!("grid location {location:?} outside 12x12")));
    }
    Ok(ctx.decode_cells(params, &[location], mode)?.remove(0))
}

/// All 144 proposals in grid order, decoded `chunk` at a time.
pub fn propose_all(
    params: &ModelParams,
    ctx: &ProposalContext,
    mode: SeedMode,
    chunk: usize,
) -> Result<Vec<Proposal>> {
    let cells: Vec<(usize, usize)> = (0..GRID).flat_map(|i| (0..GRID).map(move |j| (i, j))).collect();
    let parts: Vec<Vec<Proposal>> = cells
        .par_chunks(chunk.max(1))
        .map(|c| ctx.decode_cells(params, c, mode))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Weighted-L1 similarity head: `sigmoid(Σ w·|a − t| + b)` for crops
/// `[N,32,32,3]` against target embeddings `[N,1,1,C]`.
pub(crate) fn head_scores(g: &mut Graph, target_emb: Var, crops: Var, config: &ModelConfig) -> Result<Var> {
    let a = encode_target(g, crops, CROP_ENC, config)?;
    let n = g.shape(a)[0];
    let c = config.embedding_dim();
    let a = g.reshape(a, &[n, c])?;
    let t = g.reshape(target_emb, &[n, c])?;
    let d = g.sub(a, t)?;
    let d = g.abs(d);
    let w = g.param(&format!("{HEAD}.w"))?;
    let b = g.param(&format!("{HEAD}.b"))?;
    let logits = g.linear(d, w, b)?;
    Ok(g.sigmoid(logits))
}

/// Scores each crop against `target` with the target and crop encoders.
pub(crate) fn score_crop_batch(
    params: &ModelParams,
    config: &ModelConfig,
    target: &RgbRaster,
    crops: &[&RgbRaster],
) -> Result<Vec<f32>> {
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::with_params(params);
    let tv = g.input(images_to_tensor(&[target])?);
    let t = encode_target(&mut g, tv, TARGET_ENC, config)?;
    let t = g.tile_batch(t, crops.len())?;
    let cv = g.input(images_to_tensor(crops)?);
    let s = head_scores(&mut g, t, cv, config)?;
    Ok(g.value(s).to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub winner: usize,
    pub scores: Vec<f32>,
}

/// Index of the highest score; ties go to the lowest index.
pub(crate) fn argmax_first(scores: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores every non-empty proposal against the target and picks the winner.
/// Empty proposals score 0 and never win.
pub fn decide(
    params: &ModelParams,
    config: &ModelConfig,
    target: &RgbRaster,
    proposals: &mut [Proposal],
) -> Result<Decision> {
    let live: Vec<usize> = (0..proposals.len()).filter(|&i| !proposals[i].is_empty()).collect();
    if live.is_empty() {
        return Err(Error::NoCandidate);
    }
    let crops: Vec<&RgbRaster> = live.iter().map(|&i| proposals[i].crop.as_ref().unwrap()).collect();
    let live_scores: Vec<f32> = crops
        .par_chunks(48)
        .map(|c| score_crop_batch(params, config, target, c))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let mut scores = vec![0.0f32; proposals.len()];
    for (&i, &s) in live.iter().zip(&live_scores) {
        scores[i] = s;
        proposals[i].score = s;
    }
    let best_live = argmax_first(&live_scores).expect("non-empty");
    Ok(Decision {
        winner: live[best_live],
        scores,
    })
}
