//! Training-free baseline: match transformed copies of the target glyph
//! against segmented scene characters.
//!
//! A template and a candidate are compared at every relative offset; the
//! score is the IoU at the offset with the largest overlap. Because the
//! pixel counts of both shapes are fixed, that offset also maximizes IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::omniglot::Glyph;
use crate::raster::Mask;
use crate::rng::CounterRng;
use crate::scene::{SceneSample, ROTATION_RANGE, SCALE_RANGE, SHEAR_RANGE, TARGET_SIZE};
use crate::warp::{warp_tight, GlyphAffine};

pub const ROTATION_STEPS: usize = 11;
pub const SHEAR_STEPS: usize = 7;
pub const SCALE_STEPS: usize = 11;
pub const BANK_SIZE: usize = ROTATION_STEPS * SHEAR_STEPS * SCALE_STEPS * SCALE_STEPS;

/// A binary shape as one `u128` per row, tightly cropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitShape {
    width: usize,
    height: usize,
    rows: Vec<u128>,
    row_counts: Vec<u32>,
    col_counts: Vec<u32>,
    count: u32,
}

impl BitShape {
    /// Tight crop of `mask`. Fails on empty masks or widths over 128.
    pub fn from_mask(mask: &Mask) -> Result<Self> {
        let Some(bb) = mask.bbox() else {
            return Err(Error::Argument("empty shape".into()));
        };
        let (w, h) = (bb.width(), bb.height());
        if w > 128 {
            return Err(Error::Argument(format!("shape width {w} exceeds 128")));
        }
        let mut rows = vec![0u128; h];
        let mut col_counts = vec![0u32; w];
        for (x, y) in mask.ones() {
            let (cx, cy) = (x - bb.x0, y - bb.y0);
            rows[cy] |= 1u128 << cx;
            col_counts[cx] += 1;
        }
        let row_counts: Vec<u32> = rows.iter().map(|r| r.count_ones()).collect();
        let count = row_counts.iter().sum();
        Ok(Self {
            width: w,
            height: h,
            rows,
            row_counts,
            col_counts,
            count,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    /// |self ∩ other| with `self` shifted by (dx, dy) into `other`'s frame.
    pub fn overlap_at(&self, other: &BitShape, dx: isize, dy: isize) -> u32 {
        let r0 = (-dy).max(0) as usize;
        let r1 = (other.height as isize - dy).min(self.height as isize);
        if r1 <= r0 as isize {
            return 0;
        }
        let mut acc = 0;
        for r in r0..r1 as usize {
            let t = self.rows[r];
            let shifted = if dx >= 0 {
                if dx >= 128 {
                    0
                } else {
                    t << dx
                }
            } else if -dx >= 128 {
                0
            } else {
                t >> (-dx)
            };
            acc += (shifted & other.rows[(r as isize + dy) as usize]).count_ones();
        }
        acc
    }
}

/// `bound[d]` for shifts `d = lo..` of `a` over `b`: Σ_i min(a[i], b[i + d]).
fn projection_bounds(a: &[u32], b: &[u32]) -> (isize, Vec<u32>) {
    let lo = -(a.len() as isize) + 1;
    let hi = b.len() as isize - 1;
    let mut out = Vec::with_capacity((hi - lo + 1) as usize);
    for d in lo..=hi {
        let mut s = 0;
        for (i, &av) in a.iter().enumerate() {
            let j = i as isize + d;
            if j >= 0 && (j as usize) < b.len() {
                s += av.min(b[j as usize]);
            }
        }
        out.push(s);
    }
    (lo, out)
}

/// Largest overlap of `t` over `c` across all offsets. Offsets whose
/// projection bound is below `need` are skipped, so a result below `need`
/// is only a lower bound.
pub fn max_overlap(t: &BitShape, c: &BitShape, need: u32) -> u32 {
    let (ylo, yb) = projection_bounds(&t.row_counts, &c.row_counts);
    let (xlo, xb) = projection_bounds(&t.col_counts, &c.col_counts);
    let xmax = xb.iter().copied().max().unwrap_or(0);
    let mut dys: Vec<usize> = (0..yb.len()).filter(|&i| yb[i] >= need && yb[i] > 0).collect();
    dys.sort_by(|&a, &b| yb[b].cmp(&yb[a]).then(a.cmp(&b)));
    let xs: Vec<usize> = {
        let mut v: Vec<usize> = (0..xb.len()).filter(|&i| xb[i] >= need && xb[i] > 0).collect();
        v.sort_by(|&a, &b| xb[b].cmp(&xb[a]).then(a.cmp(&b)));
        v
    };
    let mut best = 0u32;
    for &iy in &dys {
        let ybound = yb[iy].min(xmax);
        if ybound <= best || ybound < need {
            break;
        }
        for &ix in &xs {
            let bound = xb[ix].min(yb[iy]);
            if bound <= best || bound < need {
                break;
            }
            let ov = t.overlap_at(c, xlo + ix as isize, ylo + iy as isize);
            if ov > best {
                best = ov;
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// IoU at the best alignment, in [0, 1].
    #[default]
    Iou,
    /// Pixel overlap count at the best alignment.
    RawCorrelation,
}

fn score_from_overlap(kind: ScoreKind, ov: u32, t: u32, c: u32) -> f64 {
    match kind {
        ScoreKind::Iou => ov as f64 / (t + c - ov) as f64,
        ScoreKind::RawCorrelation => ov as f64,
    }
}

/// Best-offset IoU of two binary shapes.
pub fn match_score(template: &Mask, candidate: &Mask) -> Result<f64> {
    match_score_with(template, candidate, ScoreKind::Iou)
}

pub fn match_score_with(template: &Mask, candidate: &Mask, kind: ScoreKind) -> Result<f64> {
    let t = BitShape::from_mask(template)?;
    let c = BitShape::from_mask(candidate)?;
    let ov = max_overlap(&t, &c, 0);
    Ok(score_from_overlap(kind, ov, t.count, c.count))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateTransform {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

/// `n` evenly spaced values covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// The full transform grid in bank order (rotation, shear, x scale, y scale).
pub fn transform_grid() -> Vec<TemplateTransform> {
    let rots = linspace(ROTATION_RANGE.0, ROTATION_RANGE.1, ROTATION_STEPS);
    let shears = linspace(SHEAR_RANGE.0, SHEAR_RANGE.1, SHEAR_STEPS);
    let scales = linspace(SCALE_RANGE.0, SCALE_RANGE.1, SCALE_STEPS);
    let mut out = Vec::with_capacity(BANK_SIZE);
    for &r in &rots {
        for &s in &shears {
            for &sx in &scales {
                for &sy in &scales {
                    out.push(TemplateTransform {
                        rotation_deg: r,
                        shear_deg: s,
                        scale_x: sx,
                        scale_y: sy,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TemplateBank {
    pub transforms: Vec<TemplateTransform>,
    /// One entry per transform; `None` where the warped template is empty.
    pub templates: Vec<Option<Mask>>,
    shapes: Vec<Option<BitShape>>,
}

impl TemplateBank {
    /// A bank of arbitrary shapes, with identity transforms recorded.
    pub fn from_masks(masks: Vec<Mask>) -> Self {
        let transforms = vec![
            TemplateTransform {
                rotation_deg: 0.0,
                shear_deg: 0.0,
                scale_x: 1.0,
                scale_y: 1.0,
            };
            masks.len()
        ];
        let templates: Vec<Option<Mask>> = masks.into_iter().map(|m| (!m.is_empty()).then_some(m)).collect();
        let shapes = templates
            .iter()
            .map(|t| t.as_ref().and_then(|m| BitShape::from_mask(m).ok()))
            .collect();
        Self {
            transforms,
            templates,
            shapes,
        }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn usable(&self) -> usize {
        self.shapes.iter().filter(|s| s.is_some()).count()
    }
}

/// Warps `target_mask` (a 32×32 target-frame mask, scale measured on that
/// canvas) by every grid transform and crops each result tightly.
pub fn build_templates(target_mask: &Mask) -> Result<TemplateBank> {
    build_templates_on(target_mask, TARGET_SIZE as f64)
}

/// As [`build_templates`], with the mask's canvas spanning `canvas_px`
/// pixels at scale 1.
pub fn build_templates_on(mask: &Mask, canvas_px: f64) -> Result<TemplateBank> {
    if mask.is_empty() {
        return Err(Error::Argument("cannot build templates from an empty mask".into()));
    }
    let transforms = transform_grid();
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let templates: Vec<Option<Mask>> = transforms
        .iter()
        .map(|t| {
            let a = GlyphAffine {
                rotation_deg: t.rotation_deg,
                shear_deg: t.shear_deg,
                width_px: w * t.scale_x / canvas_px,
                height_px: h * t.scale_y / canvas_px,
            };
            let m = warp_tight(mask, &a);
            (!m.is_empty()).then_some(m)
        })
        .collect();
    let shapes = templates
        .iter()
        .map(|t| t.as_ref().and_then(|m| BitShape::from_mask(m).ok()))
        .collect();
    Ok(TemplateBank {
        transforms,
        templates,
        shapes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub winner: usize,
    /// Best score per candidate. Exact for the winner and any candidate
    /// tying it; others may be lower bounds unless `exhaustive` was set.
    pub scores: Vec<f64>,
    /// Template index of the winning match.
    pub template: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub score: ScoreKind,
    /// Compute every candidate's best score exactly.
    pub exhaustive: bool,
}

/// Upper bound on the score of a pair before looking at pixels.
fn size_bound(kind: ScoreKind, t: u32, c: u32) -> f64 {
    match kind {
        ScoreKind::Iou => t.min(c) as f64 / t.max(c) as f64,
        ScoreKind::RawCorrelation => t.min(c) as f64,
    }
}

/// Smallest overlap whose score reaches `best`.
fn overlap_needed(kind: ScoreKind, best: f64, t: u32, c: u32) -> u32 {
    let raw = match kind {
        ScoreKind::Iou => best * (t + c) as f64 / (1.0 + best),
        ScoreKind::RawCorrelation => best,
    };
    // Rounding slack keeps exact ties reachable.
    (raw - 1e-9).ceil().max(0.0) as u32
}

/// Best-first search over (candidate, template) pairs.
pub fn classify_with_bank(bank: &TemplateBank, candidates: &[Mask], opts: MatchOptions) -> Result<Classification> {
    let shapes: Vec<Option<BitShape>> = candidates.iter().map(|c| BitShape::from_mask(c).ok()).collect();
    if shapes.iter().all(|s| s.is_none()) {
        return Err(Error::NoCandidate);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ci, cs) in shapes.iter().enumerate() {
        let Some(cs) = cs else { continue };
        for (ti, ts) in bank.shapes.iter().enumerate() {
            if let Some(ts) = ts {
                pairs.push((size_bound(opts.score, ts.count, cs.count), ci, ti));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut scores = vec![0.0f64; candidates.len()];
    let mut best = (f64::NEG_INFINITY, usize::MAX, usize::MAX);
    for &(ub, ci, ti) in &pairs {
        let bar = if opts.exhaustive { scores[ci] } else { best.0 };
        if ub < bar {
            if opts.exhaustive {
                continue;
            }
            break;
        }
        let (t, c) = (bank.shapes[ti].as_ref().unwrap(), shapes[ci].as_ref().unwrap());
        let need = if bar.is_finite() {
            overlap_needed(opts.score, bar, t.count, c.count)
        } else {
            0
        };
        let ov = max_overlap(t, c, need);
        let s = score_from_overlap(opts.score, ov, t.count, c.count);
        if s > scores[ci] {
            scores[ci] = s;
        }
        if s > best.0 || (s == best.0 && (ci, ti) < (best.1, best.2)) {
            best = (s, ci, ti);
        }
    }
    Ok(Classification {
        winner: best.1,
        scores,
        template: best.2,
    })
}

/// Picks the candidate that best matches any transformed copy of the target.
pub fn template_classify(target_mask: &Mask, candidates: &[Mask]) -> Result<Classification> {
    let bank = build_templates(target_mask)?;
    classify_with_bank(&bank, candidates, MatchOptions::default())
}

/// Template matching on one scene with oracle instance masks. Returns the
/// chosen instance index and whether it is the target.
pub fn classify_scene(sample: &SceneSample, opts: MatchOptions) -> Result<(usize, bool)> {
    let bank = build_templates(&sample.target_mask())?;
    let visible: Vec<usize> = (0..sample.instances.len())
        .filter(|&i| !sample.instances[i].visible_mask.is_empty())
        .collect();
    let cands: Vec<Mask> = visible.iter().map(|&i| sample.instances[i].visible_mask.clone()).collect();
    let c = classify_with_bank(&bank, &cands, opts)?;
    let chosen = visible[c.winner];
    Ok((chosen, chosen == sample.target_index))
}

/// Canvas size for rendering glyphs in the 5-way task (middle of the scale range).
pub const FIVE_WAY_CANVAS: f64 = (SCALE_RANGE.0 + SCALE_RANGE.1) / 2.0;

fn render_at(glyph: &Mask, px: f64) -> Mask {
    warp_tight(glyph, &GlyphAffine::scale_only(px, px))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Glyph indices, one per way.
    pub support: Vec<usize>,
    pub query: usize,
    /// Position of the query's class in `support`.
    pub answer: usize,
}

/// Draws an `n`-way one-shot episode: `n` classes, one support drawer per
/// class and a different drawer of one class as the query.
pub fn sample_episode(classes: &[Vec<usize>], ways: usize, rng: &mut CounterRng) -> Result<Episode> {
    if classes.len() < ways || classes.iter().any(|c| c.len() < 2) {
        return Err(Error::Argument(format!(
            "{ways}-way episodes need {ways} classes with 2+ drawers"
        )));
    }
    let mut order: Vec<usize> = (0..classes.len()).collect();
    rng.shuffle(&mut order);
    let chosen = &order[..ways];
    let answer = rng.index(ways);
    let mut support = Vec::with_capacity(ways);
    let mut query = 0;
    for (k, &c) in chosen.iter().enumerate() {
        let members = &classes[c];
        let a = rng.index(members.len());
        support.push(members[a]);
        if k == answer {
            let mut b = rng.index(members.len() - 1);
            if b >= a {
                b += 1;
            }
            query = members[b];
        }
    }
    Ok(Episode { support, query, answer })
}

/// Classifies one episode: templates from the query, supports as candidates.
pub fn run_episode(glyphs: &[Glyph], ep: &Episode, opts: MatchOptions) -> Result<bool> {
    let query = render_at(&glyphs[ep.query].bitmap, TARGET_SIZE as f64);
    let bank = build_templates(&query)?;
    let cands: Vec<Mask> = ep
        .support
        .iter()
        .map(|&i| render_at(&glyphs[i].bitmap, FIVE_WAY_CANVAS))
        .collect();
    Ok(classify_with_bank(&bank, &cands, opts)?.winner == ep.answer)
}
