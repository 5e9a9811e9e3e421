//! Metrics, model evaluation and report tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    decide, discriminator_forward, images_to_tensor, init_params, propose_all, siamese_unet_forward,
    DiscriminatorVariant, ModelConfig, ModelKind, ProposalContext, SeedMode,
};
use crate::raster::{Mask, RgbRaster};
use crate::scene::{SceneSample, SCENE_SIZE};
use crate::tensor::{Graph, ModelParams};
use crate::training::SampleSource;

pub const IOU_THRESHOLD: f32 = 0.3;
pub const LOC_RADIUS: f64 = 5.0;

pub fn threshold(pred: &[f32], width: usize, height: usize, tau: f32) -> Mask {
    Mask::from_vec(width, height, pred.iter().map(|&p| p >= tau).collect())
}

/// IoU of two masks; `truth` must be non-empty.
pub fn mask_iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Argument("iou against an empty ground truth".into()));
    }
    if !pred.same_dims(truth) {
        return Err(Error::Shape(format!(
            "iou of {}x{} and {}x{} masks",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(pred.intersection_count(truth) as f64 / pred.union_count(truth) as f64)
}

/// IoU of a thresholded probability raster against a binary truth.
pub fn iou(pred: &[f32], truth: &Mask, tau: f32) -> Result<f64> {
    if pred.len() != truth.width() * truth.height() {
        return Err(Error::Shape(format!(
            "prediction of {} values for a {}x{} truth",
            pred.len(),
            truth.width(),
            truth.height()
        )));
    }
    mask_iou(&threshold(pred, truth.width(), truth.height(), tau), truth)
}

/// Hit iff the two points are at most `radius` apart.
pub fn localization_hit(pred: (f64, f64), truth: (f64, f64), radius: f64) -> bool {
    let d2 = (pred.0 - truth.0).powi(2) + (pred.1 - truth.1).powi(2);
    d2 <= radius * radius
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// MaskNet: score the best of all 144 proposals instead of the decided one.
    pub best_proposal: bool,
    /// Pre-segmented oracle: wrong choices earn their mask IoU instead of 0.
    pub partial_credit: bool,
    pub threshold: f32,
    pub radius: f64,
    /// Samples per forward graph.
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            best_proposal: false,
            partial_credit: false,
            threshold: IOU_THRESHOLD,
            radius: LOC_RADIUS,
            batch: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    /// `None` where the model has no segmentation output.
    pub iou: Option<f64>,
    pub loc_hit: bool,
    /// Winning proposal grid index or chosen instance index.
    pub winner: Option<usize>,
    /// MaskNet only: the decided proposal's IoU and the best over all proposals.
    pub decided_iou: Option<f64>,
    pub best_proposal_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub split: String,
    pub level: usize,
    pub n_samples: usize,
    pub mean_iou: Option<f64>,
    pub localization_accuracy: f64,
    pub records: Vec<SampleRecord>,
}

impl EvalResult {
    fn from_records(model: String, split: String, level: usize, records: Vec<SampleRecord>) -> Self {
        let n = records.len();
        let ious: Vec<f64> = records.iter().filter_map(|r| r.iou).collect();
        let mean_iou = (!ious.is_empty() && ious.len() == n).then(|| ious.iter().sum::<f64>() / n as f64);
        let hits = records.iter().filter(|r| r.loc_hit).count();
        Self {
            model,
            split,
            level,
            n_samples: n,
            mean_iou,
            localization_accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            records,
        }
    }
}

/// Label used in reports for a model kind and options.
pub fn model_label(kind: ModelKind, options: &EvalOptions) -> String {
    match kind {
        ModelKind::MaskNet if options.best_proposal => "masknet_best_proposal".into(),
        k => k.as_str().into(),
    }
}

/// Errors unless `params` has exactly the tensors `kind` needs under `config`.
pub fn check_params(kind: ModelKind, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let want = init_params(kind, config, 0)?;
    let mut bad = Vec::new();
    for (name, e) in want.iter() {
        match params.get(name) {
            Some(t) if t.shape() == e.value.shape() => {}
            _ => bad.push(name.to_string()),
        }
    }
    if !bad.is_empty() || params.len() != want.len() {
        return Err(Error::Argument(format!(
            "parameters do not fit a {kind} model ({} missing or mis-shaped{})",
            bad.len(),
            if params.len() != want.len() { ", extra tensors present" } else { "" }
        )));
    }
    Ok(())
}

fn mask_com(m: &Mask) -> Option<(f64, f64)> {
    m.center_of_mass()
}

fn truth_com(s: &SceneSample) -> Result<(f64, f64)> {
    s.target()
        .com
        .map(|c| (c.0 as f64, c.1 as f64))
        .ok_or_else(|| Error::Argument(format!("sample {} has no visible target", s.sample_seed)))
}

fn record_from_raster(index: usize, pred: &[f32], s: &SceneSample, o: &EvalOptions) -> Result<SampleRecord> {
    let m = threshold(pred, SCENE_SIZE, SCENE_SIZE, o.threshold);
    let iou = mask_iou(&m, &s.seg_map)?;
    let truth = truth_com(s)?;
    let hit = mask_com(&m).is_some_and(|c| localization_hit(c, truth, o.radius));
    Ok(SampleRecord {
        index,
        iou: Some(iou),
        loc_hit: hit,
        winner: None,
        decided_iou: None,
        best_proposal_iou: None,
    })
}

/// Siamese U-net foreground rasters for a batch of samples.
pub fn predict_siamese(params: &ModelParams, config: &ModelConfig, samples: &[SceneSample]) -> Result<Vec<Vec<f32>>> {
    let t: Vec<&RgbRaster> = samples.iter().map(|s| &s.target_image).collect();
    let sc: Vec<&RgbRaster> = samples.iter().map(|s| &s.scene).collect();
    let mut g = Graph::with_params(params);
    let tv = g.input(images_to_tensor(&t)?);
    let sv = g.input(images_to_tensor(&sc)?);
    let p = siamese_unet_forward(&mut g, tv, sv, config)?;
    Ok(g.value(p).chunks(SCENE_SIZE * SCENE_SIZE).map(|c| c.to_vec()).collect())
}

/// MaskNet on one sample: decided and best-proposal IoU plus localization.
pub fn evaluate_masknet_sample(
    params: &ModelParams,
    config: &ModelConfig,
    index: usize,
    s: &SceneSample,
    o: &EvalOptions,
) -> Result<SampleRecord> {
    let ctx = ProposalContext::encode(params, config, &s.target_image, &s.scene)?;
    let mut props = propose_all(params, &ctx, SeedMode::from_config(config), o.batch.max(1))?;
    let ious: Vec<f64> = props
        .iter()
        .map(|p| iou(&p.seg_map, &s.seg_map, o.threshold))
        .collect::<Result<_>>()?;
    let best = ious.iter().copied().fold(0.0f64, f64::max);
    let truth = truth_com(s)?;
    let (winner, decided, hit) = match decide(params, config, &s.target_image, &mut props) {
        Ok(d) => {
            let w = &props[d.winner];
            let hit = w.com.is_some_and(|c| localization_hit(c, truth, o.radius));
            (Some(w.grid_index()), ious[d.winner], hit)
        }
        Err(Error::NoCandidate) => (None, 0.0, false),
        Err(e) => return Err(e),
    };
    Ok(SampleRecord {
        index,
        iou: Some(if o.best_proposal { best } else { decided }),
        loc_hit: hit,
        winner,
        decided_iou: Some(decided),
        best_proposal_iou: Some(best),
    })
}

fn evaluate_discriminator_sample(
    params: &ModelParams,
    config: &ModelConfig,
    variant: DiscriminatorVariant,
    index: usize,
    s: &SceneSample,
    o: &EvalOptions,
) -> Result<SampleRecord> {
    let (chosen, _) = discriminator_forward(params, config, variant, &s.target_image, s)?;
    let inst = &s.instances[chosen];
    let truth = truth_com(s)?;
    let hit = inst
        .com
        .is_some_and(|c| localization_hit((c.0 as f64, c.1 as f64), truth, o.radius));
    let iou = match variant {
        DiscriminatorVariant::Cluttered => None,
        DiscriminatorVariant::PreSegmented => Some(if chosen == s.target_index {
            1.0
        } else if o.partial_credit {
            mask_iou(&inst.visible_mask, &s.seg_map)?
        } else {
            0.0
        }),
    };
    Ok(SampleRecord {
        index,
        iou,
        loc_hit: hit,
        winner: Some(chosen),
        decided_iou: None,
        best_proposal_iou: None,
    })
}

/// Runs `kind` over every sample of `source`. Samples are processed in
/// parallel; records come back in index order.
pub fn evaluate_model(
    kind: ModelKind,
    params: &ModelParams,
    config: &ModelConfig,
    source: &dyn SampleSource,
    split: &str,
    options: &EvalOptions,
) -> Result<EvalResult> {
    check_params(kind, config, params)?;
    if source.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let n = source.len();
    let batch = options.batch.max(1);
    let starts: Vec<usize> = (0..n).step_by(batch).collect();
    let chunks: Vec<Vec<SampleRecord>> = starts
        .par_iter()
        .map(|&start| -> Result<Vec<SampleRecord>> {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            let samples: Vec<SceneSample> = idx
                .iter()
                .map(|&i| source.sample(i).map_err(|e| Error::AtSample { index: i as u64, source: Box::new(e) }))
                .collect::<Result<_>>()?;
            match kind {
                ModelKind::SiameseUnet => {
                    let preds = predict_siamese(params, config, &samples)?;
                    idx.iter()
                        .zip(&samples)
                        .zip(&preds)
                        .map(|((&i, s), p)| record_from_raster(i, p, s, options))
                        .collect()
                }
                ModelKind::MaskNet => idx
                    .iter()
                    .zip(&samples)
                    .map(|(&i, s)| evaluate_masknet_sample(params, config, i, s, options))
                    .collect(),
                ModelKind::PresegDiscriminator | ModelKind::ClutterDiscriminator => {
                    let variant = if kind == ModelKind::PresegDiscriminator {
                        DiscriminatorVariant::PreSegmented
                    } else {
                        DiscriminatorVariant::Cluttered
                    };
                    idx.iter()
                        .zip(&samples)
                        .map(|(&i, s)| evaluate_discriminator_sample(params, config, variant, i, s, options))
                        .collect()
                }
            }
        })
        .collect::<Result<_>>()?;
    let records: Vec<SampleRecord> = chunks.into_iter().flatten().collect();
    let level = source.sample(0)?.level;
    Ok(EvalResult::from_records(model_label(kind, options), split.to_string(), level, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub model: String,
    pub panel: String,
    pub x: Vec<usize>,
    pub y: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub csv: String,
    pub series: Vec<PlotSeries>,
}

pub const CSV_HEADER: &str = "model,split,level,n,mean_iou,loc_acc";

/// CSV table (one row per result) and per-model level series for the
/// `iou` and `localization` panels.
pub fn aggregate_report(results: &[EvalResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Argument("no results to aggregate".into()));
    }
    let mut seen = HashSet::new();
    for r in results {
        if !seen.insert((r.model.as_str(), r.level, r.split.as_str())) {
            return Err(Error::Argument(format!(
                "duplicate result for model {} level {} split {}",
                r.model, r.level, r.split
            )));
        }
    }
    let mut rows: Vec<&EvalResult> = results.iter().collect();
    rows.sort_by(|a, b| (&a.model, &a.split, a.level).cmp(&(&b.model, &b.split, b.level)));
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        let iou = r.mean_iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{},{:.6}",
            r.model, r.split, r.level, r.n_samples, iou, r.localization_accuracy
        )
        .expect("write to string");
    }
    let mut by_model: BTreeMap<(&str, &str), Vec<&EvalResult>> = BTreeMap::new();
    for r in &rows {
        by_model.entry((r.model.as_str(), r.split.as_str())).or_default().push(r);
    }
    let mut series = Vec::new();
    for ((model, split), rs) in by_model {
        let x: Vec<usize> = rs.iter().map(|r| r.level).collect();
        let name = if split.is_empty() { model.to_string() } else { format!("{model}/{split}") };
        series.push(PlotSeries {
            model: name.clone(),
            panel: "iou".into(),
            x: x.clone(),
            y: rs.iter().map(|r| r.mean_iou).collect(),
        });
        series.push(PlotSeries {
            model: name,
            panel: "localization".into(),
            x,
            y: rs.iter().map(|r| Some(r.localization_accuracy)).collect(),
        });
    }
    Ok(Report { csv, series })
}
