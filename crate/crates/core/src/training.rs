//! Training loops for the Siamese U-net, both MaskNet stages and the
//! discriminator oracles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, decode_proposals, encode_scene, encode_target, head_scores, images_to_tensor, init_params,
    siamese_unet_forward, DiscriminatorVariant, ModelConfig, ModelKind, ProposalContext, SeedMode, CROP_ENC,
    GRID, HEAD, STRIDE, TARGET_ENC,
};
use crate::raster::RgbRaster;
use crate::rng::{mix_seed, CounterRng};
use crate::scene::{SceneSample, SCENE_SIZE};
use crate::tensor::{adam_step, AdamConfig, Gradients, Graph, ModelParams, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_halving_epochs: Vec<usize>,
    pub weight_decay: f64,
}

impl Schedule {
    /// Siamese U-net and oracle discriminators.
    pub fn baseline() -> Self {
        Self {
            epochs: 20,
            batch_size: 250,
            initial_lr: 5e-4,
            lr_halving_epochs: vec![10, 15, 17],
            weight_decay: 1e-9,
        }
    }

    pub fn oracle() -> Self {
        Self::baseline()
    }

    /// MaskNet proposal fine-tuning.
    pub fn proposal() -> Self {
        Self {
            epochs: 5,
            batch_size: 50,
            initial_lr: 5e-5,
            lr_halving_epochs: vec![2, 3, 4],
            weight_decay: 1e-9,
        }
    }

    /// MaskNet decision stage.
    pub fn decision() -> Self {
        Self {
            epochs: 5,
            batch_size: 250,
            initial_lr: 2.5e-4,
            lr_halving_epochs: vec![2, 3, 4],
            weight_decay: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.initial_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Argument(format!("invalid schedule {self:?}")));
        }
        let h = &self.lr_halving_epochs;
        if h.windows(2).any(|w| w[0] >= w[1]) || h.iter().any(|&e| e >= self.epochs) {
            return Err(Error::Argument(format!(
                "halving epochs {h:?} must be strictly increasing and below {}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// Learning rate during (0-based) epoch `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let halvings = self.lr_halving_epochs.iter().filter(|&&h| h <= epoch).count();
        self.initial_lr * 0.5f64.powi(halvings as i32)
    }
}

/// Random-access training samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<SceneSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [SceneSample] {
    fn len(&self) -> usize {
        <[SceneSample]>::len(self)
    }
    fn sample(&self, index: usize) -> Result<SceneSample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<SceneSample> {
    fn len(&self) -> usize {
        <[SceneSample]>::len(self)
    }
    fn sample(&self, index: usize) -> Result<SceneSample> {
        Ok(self[index].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub kind: ModelKind,
    pub schedule: Schedule,
    pub seed: u64,
    pub metrics: Vec<MetricRecord>,
}

type Validator<'a> = dyn Fn(&ModelParams) -> Result<f64> + Sync + 'a;

pub struct TrainOptions<'a> {
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Samples per graph; gradients of a batch are accumulated over chunks.
    pub micro_batch: usize,
    /// Called after each epoch; its value is logged as `val`.
    pub validator: Option<&'a Validator<'a>>,
    /// Receives each record as it is produced.
    pub on_record: Option<&'a (dyn Fn(&MetricRecord) + Sync + 'a)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            seed: 0,
            max_steps: None,
            micro_batch: 8,
            validator: None,
            on_record: None,
        }
    }
}

impl<'a> TrainOptions<'a> {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Per-chunk loss. Receives the samples of one micro-batch and a stream
/// for any random choices; returns the mean loss over the chunk's terms,
/// the number of terms and the parameter gradients of that mean.
type ChunkLoss<'f> =
    dyn Fn(&ModelParams, &[SceneSample], &mut CounterRng) -> Result<Option<(f64, usize, Gradients)>> + 'f;

fn scale_grads(g: &mut Gradients, s: f32) {
    for (_, v) in g.entries.iter_mut() {
        v.iter_mut().for_each(|x| *x *= s);
    }
}

fn run_loop(
    kind: ModelKind,
    params: &mut ModelParams,
    source: &dyn SampleSource,
    schedule: &Schedule,
    opts: &TrainOptions,
    chunk_loss: &ChunkLoss,
) -> Result<TrainRun> {
    schedule.validate()?;
    if source.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut run = TrainRun {
        kind,
        schedule: schedule.clone(),
        seed: opts.seed,
        metrics: Vec::new(),
    };
    let emit = |run: &mut TrainRun, rec: MetricRecord| {
        if let Some(f) = opts.on_record {
            f(&rec);
        }
        run.metrics.push(rec);
    };
    let mut step = 0u64;
    'epochs: for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at_epoch(epoch);
        let adam = AdamConfig::new(lr, schedule.weight_decay);
        let mut order: Vec<usize> = (0..source.len()).collect();
        CounterRng::new(mix_seed(&[opts.seed, 0x5eed, epoch as u64])).shuffle(&mut order);
        for batch in order.chunks(schedule.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let samples: Vec<SceneSample> = batch
                .par_iter()
                .map(|&i| source.sample(i).map_err(|e| Error::AtSample { index: i as u64, source: Box::new(e) }))
                .collect::<Result<_>>()?;
            let mut rng = CounterRng::new(mix_seed(&[opts.seed, 0x57e9, step]));
            let mut parts = Vec::new();
            for chunk in samples.chunks(opts.micro_batch.max(1)) {
                if let Some(p) = chunk_loss(params, chunk, &mut rng)? {
                    parts.push(p);
                }
            }
            let terms: usize = parts.iter().map(|p| p.1).sum();
            if terms == 0 {
                continue;
            }
            params.zero_grad();
            let mut loss = 0.0f64;
            for (l, n, mut g) in parts {
                let w = n as f64 / terms as f64;
                loss += l * w;
                scale_grads(&mut g, w as f32);
                params.accumulate(&g);
            }
            // Frozen entries never receive gradients.
            for name in params.names().map(String::from).collect::<Vec<_>>() {
                let e = params.entry_mut(&name).unwrap();
                if !e.frozen && e.grad.is_none() {
                    e.grad = Some(vec![0.0; e.value.len()]);
                }
            }
            adam_step(params, &adam)?;
            if !loss.is_finite() {
                return Err(Error::State(format!("loss became {loss} at step {step}")));
            }
            emit(
                &mut run,
                MetricRecord {
                    step,
                    epoch,
                    lr,
                    loss,
                    val: None,
                },
            );
            step += 1;
        }
        if let Some(v) = opts.validator {
            let val = v(params)?;
            if let Some(last) = run.metrics.last_mut() {
                last.val = Some(val);
                if let Some(f) = opts.on_record {
                    f(last);
                }
            }
        }
    }
    Ok(run)
}

fn targets_and_scenes(samples: &[SceneSample]) -> Result<(Tensor, Tensor)> {
    let t: Vec<&RgbRaster> = samples.iter().map(|s| &s.target_image).collect();
    let sc: Vec<&RgbRaster> = samples.iter().map(|s| &s.scene).collect();
    Ok((images_to_tensor(&t)?, images_to_tensor(&sc)?))
}

pub fn seg_label(samples: &[SceneSample]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * SCENE_SIZE * SCENE_SIZE);
    for s in samples {
        data.extend(s.seg_map.iter().map(|b| b as u8 as f32));
    }
    Tensor::new(vec![samples.len(), SCENE_SIZE, SCENE_SIZE, 1], data)
}

/// Mean pixelwise bce of the Siamese U-net on `samples`.
pub fn baseline_loss(params: &ModelParams, config: &ModelConfig, samples: &[SceneSample]) -> Result<(f64, Gradients)> {
    let (t, s) = targets_and_scenes(samples)?;
    let mut g = Graph::with_params(params);
    let (tv, sv) = (g.input(t), g.input(s));
    let p = siamese_unet_forward(&mut g, tv, sv, config)?;
    let l = g.bce(p, &seg_label(samples)?)?;
    let loss = g.value(l)[0] as f64;
    Ok((loss, g.backward(l)?))
}

pub fn train_baseline(
    config: &ModelConfig,
    source: &dyn SampleSource,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainRun)> {
    let mut params = init_params(ModelKind::SiameseUnet, config, opts.seed)?;
    let run = continue_baseline(&mut params, config, source, schedule, opts)?;
    Ok((params, run))
}

/// Trains existing Siamese U-net parameters further.
pub fn continue_baseline(
    params: &mut ModelParams,
    config: &ModelConfig,
    source: &dyn SampleSource,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    let f = |p: &ModelParams, chunk: &[SceneSample], _: &mut CounterRng| {
        let (l, g) = baseline_loss(p, config, chunk)?;
        Ok(Some((l, chunk.len(), g)))
    };
    run_loop(ModelKind::SiameseUnet, params, source, schedule, opts, &f)
}

/// Grid cells whose centers (`8j + 3.5`) are nearest to `com`, ordered by
/// distance, ties by grid index.
pub fn nearest_cells(com: (f64, f64), k: usize) -> Vec<(usize, usize)> {
    let center = |j: usize| (STRIDE * j) as f64 + (STRIDE as f64 - 1.0) / 2.0;
    let mut cells: Vec<((usize, usize), f64)> = (0..GRID)
        .flat_map(|i| (0..GRID).map(move |j| (i, j)))
        .map(|(i, j)| ((i, j), (center(j) - com.0).powi(2) + (center(i) - com.1).powi(2)))
        .collect();
    cells.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    cells.into_iter().take(k).map(|c| c.0).collect()
}

fn random_other_cells(rng: &mut CounterRng, exclude: &[(usize, usize)], k: usize) -> Vec<(usize, usize)> {
    let mut pool: Vec<(usize, usize)> = (0..GRID)
        .flat_map(|i| (0..GRID).map(move |j| (i, j)))
        .filter(|c| !exclude.contains(c))
        .collect();
    rng.shuffle(&mut pool);
    pool.truncate(k);
    pool
}

fn target_com(s: &SceneSample) -> Result<(f64, f64)> {
    s.target()
        .com
        .map(|c| (c.0 as f64, c.1 as f64))
        .ok_or_else(|| Error::State(format!("sample {} has an invisible target", s.sample_seed)))
}

/// Proposal cells and labels for fine-tuning: 4 positives nearest the
/// target com (label = seg map) then 4 random negatives (label = empty).
pub fn proposal_cells(sample: &SceneSample, rng: &mut CounterRng) -> Result<Vec<((usize, usize), bool)>> {
    let pos = nearest_cells(target_com(sample)?, 4);
    let neg = random_other_cells(rng, &pos, 4);
    Ok(pos
        .into_iter()
        .map(|c| (c, true))
        .chain(neg.into_iter().map(|c| (c, false)))
        .collect())
}

pub fn finetune_proposal(
    params: &mut ModelParams,
    config: &ModelConfig,
    source: &dyn SampleSource,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    let mode = SeedMode::from_config(config);
    let f = |p: &ModelParams, chunk: &[SceneSample], rng: &mut CounterRng| {
        let mut cells = Vec::new();
        let mut label = Vec::new();
        let px = SCENE_SIZE * SCENE_SIZE;
        for s in chunk {
            for (c, positive) in proposal_cells(s, rng)? {
                cells.push(c);
                if positive {
                    label.extend(s.seg_map.iter().map(|b| b as u8 as f32));
                } else {
                    label.extend(std::iter::repeat_n(0.0, px));
                }
            }
        }
        let per = cells.len() / chunk.len();
        let (t, s) = targets_and_scenes(chunk)?;
        let mut g = Graph::with_params(p);
        let (tv, sv) = (g.input(t), g.input(s));
        let temb = encode_target(&mut g, tv, TARGET_ENC, config)?;
        let temb = g.tile_batch(temb, per)?;
        let enc = encode_scene(&mut g, sv, config)?;
        let skips: Vec<Var> = enc.skips.iter().map(|&v| g.tile_batch(v, per)).collect::<Result<_>>()?;
        let skips: [Var; 6] = skips.try_into().expect("six skips");
        let out = decode_proposals(&mut g, temb, &skips, &cells, mode)?;
        let label = Tensor::new(vec![cells.len(), SCENE_SIZE, SCENE_SIZE, 1], label)?;
        let l = g.bce(out, &label)?;
        let loss = g.value(l)[0] as f64;
        Ok(Some((loss, cells.len(), g.backward(l)?)))
    };
    run_loop(ModelKind::MaskNet, params, source, schedule, opts, &f)
}

/// Builds MaskNet parameters from a trained Siamese U-net: the proposal
/// network is copied, the crop encoder starts as a copy of the target
/// encoder and the decision head is fresh.
pub fn masknet_from_baseline(base: &ModelParams, config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut p = init_params(ModelKind::MaskNet, config, seed)?;
    for (name, e) in base.iter() {
        let dst = p
            .entry_mut(name)
            .ok_or_else(|| Error::State(format!("baseline parameter {name} has no MaskNet slot")))?;
        if dst.value.shape() != e.value.shape() {
            return Err(Error::IncompatibleCheckpoint(vec![name.to_string()]));
        }
        dst.value = e.value.clone();
    }
    copy_target_to_crop_encoder(&mut p)?;
    Ok(p)
}

pub fn copy_target_to_crop_encoder(p: &mut ModelParams) -> Result<()> {
    let pairs: Vec<(String, Tensor)> = p
        .iter()
        .filter_map(|(n, e)| {
            n.strip_prefix(TARGET_ENC)
                .map(|rest| (format!("{CROP_ENC}{rest}"), e.value.clone()))
        })
        .collect();
    for (name, v) in pairs {
        let dst = p
            .entry_mut(&name)
            .ok_or_else(|| Error::State(format!("missing {name}")))?;
        dst.value = v;
    }
    Ok(())
}

/// Freezes everything except the crop encoder and decision head.
pub fn freeze_for_decision(p: &mut ModelParams) {
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        let trainable = n.starts_with(CROP_ENC) || n.starts_with(HEAD);
        p.entry_mut(&n).unwrap().frozen = !trainable;
    }
}

/// One positive cell (a random one of the 4 nearest the target com) and 3
/// random other cells.
pub fn decision_cells(sample: &SceneSample, rng: &mut CounterRng) -> Result<Vec<((usize, usize), bool)>> {
    let near = nearest_cells(target_com(sample)?, 4);
    let pos = near[rng.index(near.len())];
    let neg = random_other_cells(rng, &[pos], 3);
    Ok(std::iter::once((pos, true))
        .chain(neg.into_iter().map(|c| (c, false)))
        .collect())
}

/// Trains the decision stage. The crop encoder is re-initialized from the
/// target encoder; everything but the crop encoder and head stays frozen.
pub fn train_decision(
    params: &mut ModelParams,
    config: &ModelConfig,
    source: &dyn SampleSource,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    copy_target_to_crop_encoder(params)?;
    freeze_for_decision(params);
    let mode = SeedMode::from_config(config);
    let f = |p: &ModelParams, chunk: &[SceneSample], rng: &mut CounterRng| {
        let mut crops: Vec<RgbRaster> = Vec::new();
        let mut owners: Vec<usize> = Vec::new();
        let mut labels: Vec<f32> = Vec::new();
        for (k, s) in chunk.iter().enumerate() {
            let ctx = ProposalContext::encode(p, config, &s.target_image, &s.scene)?;
            for (cell, positive) in decision_cells(s, rng)? {
                let prop = model::propose_at(p, &ctx, cell, mode)?;
                if let Some(c) = prop.crop {
                    crops.push(c);
                    owners.push(k);
                    labels.push(positive as u8 as f32);
                }
            }
        }
        if crops.is_empty() {
            return Ok(None);
        }
        crop_pair_loss(p, config, chunk, &owners, &crops, labels).map(Some)
    };
    let run = run_loop(ModelKind::MaskNet, params, source, schedule, opts, &f);
    params.set_frozen("", false);
    run
}

/// bce of head scores for `(target of chunk[owner], crop)` pairs.
fn crop_pair_loss(
    p: &ModelParams,
    config: &ModelConfig,
    chunk: &[SceneSample],
    owners: &[usize],
    crops: &[RgbRaster],
    labels: Vec<f32>,
) -> Result<(f64, usize, Gradients)> {
    let targets: Vec<&RgbRaster> = owners.iter().map(|&k| &chunk[k].target_image).collect();
    let crop_refs: Vec<&RgbRaster> = crops.iter().collect();
    let mut g = Graph::with_params(p);
    let tv = g.input(images_to_tensor(&targets)?);
    let t = encode_target(&mut g, tv, TARGET_ENC, config)?;
    let cv = g.input(images_to_tensor(&crop_refs)?);
    let s = head_scores(&mut g, t, cv, config)?;
    let n = labels.len();
    let l = g.bce(s, &Tensor::new(vec![n, 1], labels)?)?;
    let loss = g.value(l)[0] as f64;
    Ok((loss, n, g.backward(l)?))
}

/// Target crop plus 3 crops of other visible instances (drawn with
/// replacement when fewer than 3 exist), as `(instance index, label)`.
pub fn oracle_crop_choice(sample: &SceneSample, rng: &mut CounterRng) -> Vec<(usize, bool)> {
    let others: Vec<usize> = sample
        .instances
        .iter()
        .enumerate()
        .filter(|(i, inst)| *i != sample.target_index && !inst.visible_mask.is_empty())
        .map(|(i, _)| i)
        .collect();
    let mut out = vec![(sample.target_index, true)];
    if others.len() >= 3 {
        let mut pool = others;
        rng.shuffle(&mut pool);
        out.extend(pool.into_iter().take(3).map(|i| (i, false)));
    } else if !others.is_empty() {
        out.extend((0..3).map(|_| (others[rng.index(others.len())], false)));
    }
    out
}

pub fn train_oracle_discriminator(
    variant: DiscriminatorVariant,
    config: &ModelConfig,
    source: &dyn SampleSource,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainRun)> {
    let mut params = init_params(discriminator_kind(variant), config, opts.seed)?;
    let run = continue_oracle_discriminator(variant, &mut params, config, source, schedule, opts)?;
    Ok((params, run))
}

fn discriminator_kind(variant: DiscriminatorVariant) -> ModelKind {
    match variant {
        DiscriminatorVariant::PreSegmented => ModelKind::PresegDiscriminator,
        DiscriminatorVariant::Cluttered => ModelKind::ClutterDiscriminator,
    }
}

/// Trains existing discriminator parameters further.
pub fn continue_oracle_discriminator(
    variant: DiscriminatorVariant,
    params: &mut ModelParams,
    config: &ModelConfig,
    source: &dyn SampleSource,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    let f = |p: &ModelParams, chunk: &[SceneSample], rng: &mut CounterRng| {
        let mut crops = Vec::new();
        let mut owners = Vec::new();
        let mut labels = Vec::new();
        for (k, s) in chunk.iter().enumerate() {
            let cands = model::candidate_crops(variant, s);
            for (inst, positive) in oracle_crop_choice(s, rng) {
                if let Some((_, c)) = cands.iter().find(|(i, _)| *i == inst) {
                    crops.push(c.clone());
                    owners.push(k);
                    labels.push(positive as u8 as f32);
                }
            }
        }
        if crops.is_empty() {
            return Ok(None);
        }
        crop_pair_loss(p, config, chunk, &owners, &crops, labels).map(Some)
    };
    run_loop(discriminator_kind(variant), params, source, schedule, opts, &f)
}
