//! Cluttered-scene synthesis.
//!
//! Characters are dropped into a 96×96 black canvas one after another; each
//! one paints over everything drawn before it. The last character is a
//! different drawer's rendition of the target class and is placed so that
//! it lies entirely inside the frame.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::omniglot::{CorpusSplit, Glyph, GlyphId, SplitName};
use crate::raster::{Mask, Rgb, RgbRaster};
use crate::rng::{mix_seed, CounterRng};
use crate::warp::{canvas_center, warp_ink, GlyphAffine};

pub const SCENE_SIZE: usize = 96;
pub const TARGET_SIZE: usize = 32;
pub const PUBLISHED_LEVELS: [usize; 7] = [4, 8, 16, 32, 64, 128, 256];
pub const BACKGROUND: Rgb = [0, 0, 0];

pub const ROTATION_RANGE: (f64, f64) = (-20.0, 20.0);
pub const SHEAR_RANGE: (f64, f64) = (-10.0, 10.0);
pub const SCALE_RANGE: (f64, f64) = (16.0, 64.0);

/// Minimum Chebyshev distance (exclusive) between any two colors in a scene.
pub const COLOR_SEPARATION: u8 = 8;

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f32,
    pub shear: f32,
    pub scale_x: f32,
    pub scale_y: f32,
}

impl AffineParams {
    pub fn in_range(&self) -> bool {
        let within = |v: f32, (lo, hi): (f64, f64)| (lo..=hi).contains(&(v as f64));
        within(self.rotation, ROTATION_RANGE)
            && within(self.shear, SHEAR_RANGE)
            && within(self.scale_x, SCALE_RANGE)
            && within(self.scale_y, SCALE_RANGE)
    }

    pub fn to_glyph_affine(self) -> GlyphAffine {
        GlyphAffine {
            rotation_deg: self.rotation as f64,
            shear_deg: self.shear as f64,
            width_px: self.scale_x as f64,
            height_px: self.scale_y as f64,
        }
    }
}

pub fn sample_affine(rng: &mut CounterRng) -> AffineParams {
    AffineParams {
        rotation: rng.uniform(ROTATION_RANGE.0, ROTATION_RANGE.1) as f32,
        shear: rng.uniform(SHEAR_RANGE.0, SHEAR_RANGE.1) as f32,
        scale_x: rng.uniform(SCALE_RANGE.0, SCALE_RANGE.1) as f32,
        scale_y: rng.uniform(SCALE_RANGE.0, SCALE_RANGE.1) as f32,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedInstance {
    pub glyph: GlyphId,
    pub affine: AffineParams,
    pub center: (f32, f32),
    pub color: Rgb,
    /// Footprint ignoring occlusion (clipped to the frame).
    pub full_mask: Mask,
    /// Footprint minus everything drawn later.
    pub visible_mask: Mask,
    /// Center of mass of `visible_mask`; `None` when fully occluded.
    pub com: Option<(f32, f32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub target_image: RgbRaster,
    pub scene: RgbRaster,
    pub seg_map: Mask,
    pub instances: Vec<PlacedInstance>,
    pub target_index: usize,
    pub level: usize,
    pub sample_seed: u64,
}

impl SceneSample {
    pub fn target(&self) -> &PlacedInstance {
        &self.instances[self.target_index]
    }

    /// The binarized target image (non-background pixels).
    pub fn target_mask(&self) -> Mask {
        let img = &self.target_image;
        Mask::from_fn(img.width(), img.height(), |x, y| img.get(x, y) != BACKGROUND)
    }
}

/// A rendered footprint together with whether any ink fell outside the frame.
#[derive(Clone, Debug)]
pub struct Render {
    pub footprint: Mask,
    pub clipped: bool,
}

/// Renders `glyph` under `affine`, with the glyph canvas center at `center`.
pub fn render_glyph(glyph: &Mask, affine: &AffineParams, center: (f64, f64)) -> Result<Render> {
    let mut footprint = Mask::new(SCENE_SIZE, SCENE_SIZE);
    let mut clipped = false;
    for (x, y) in warp_ink(glyph, &affine.to_glyph_affine(), center) {
        if x >= 0 && y >= 0 && (x as usize) < SCENE_SIZE && (y as usize) < SCENE_SIZE {
            footprint.set(x as usize, y as usize, true);
        } else {
            clipped = true;
        }
    }
    if footprint.is_empty() {
        return Err(Error::DegenerateRender);
    }
    Ok(Render { footprint, clipped })
}

/// Dead-leaves compositing. Returns the scene and each instance's visible mask.
pub fn compose_scene(instances: &[(Mask, Rgb)], background: Rgb) -> (RgbRaster, Vec<Mask>) {
    let mut scene = RgbRaster::filled(SCENE_SIZE, SCENE_SIZE, background);
    for (footprint, color) in instances {
        scene.paint(footprint, *color);
    }
    let mut covered = Mask::new(SCENE_SIZE, SCENE_SIZE);
    let mut visible = vec![Mask::new(SCENE_SIZE, SCENE_SIZE); instances.len()];
    for (k, (footprint, _)) in instances.iter().enumerate().rev() {
        visible[k] = footprint.minus(&covered);
        covered.union_with(footprint);
    }
    (scene, visible)
}

fn chebyshev(a: Rgb, b: Rgb) -> u8 {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap()
}

fn draw_color(rng: &mut CounterRng, used: &[Rgb]) -> Rgb {
    loop {
        let v = rng.next_u64();
        let c = [(v >> 16) as u8, (v >> 8) as u8, v as u8];
        if used.iter().all(|&u| chebyshev(u, c) > COLOR_SEPARATION) {
            return c;
        }
    }
}

/// The 32×32 instruction image: the glyph canvas rescaled, in one color.
pub fn render_target_image(glyph: &Mask, color: Rgb) -> RgbRaster {
    let affine = GlyphAffine::scale_only(TARGET_SIZE as f64, TARGET_SIZE as f64);
    let mut img = RgbRaster::filled(TARGET_SIZE, TARGET_SIZE, BACKGROUND);
    for (x, y) in warp_ink(glyph, &affine, canvas_center(TARGET_SIZE, TARGET_SIZE)) {
        if x >= 0 && y >= 0 && (x as usize) < TARGET_SIZE && (y as usize) < TARGET_SIZE {
            img.set(x as usize, y as usize, color);
        }
    }
    img
}

struct Drawn {
    glyph: usize,
    affine: AffineParams,
    center: (f32, f32),
    color: Rgb,
    footprint: Mask,
}

fn place(
    rng: &mut CounterRng,
    glyph: &Glyph,
    require_inside: bool,
) -> Result<(AffineParams, (f32, f32), Mask)> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let affine = sample_affine(rng);
        let center = (
            rng.uniform(0.0, SCENE_SIZE as f64) as f32,
            rng.uniform(0.0, SCENE_SIZE as f64) as f32,
        );
        match render_glyph(&glyph.bitmap, &affine, (center.0 as f64, center.1 as f64)) {
            Ok(r) if !(require_inside && r.clipped) => return Ok((affine, center, r.footprint)),
            _ => continue,
        }
    }
    Err(Error::DegenerateRender)
}

/// Generates one scene with `level` characters in total (the target included).
///
/// Distractors are drawn uniformly with replacement from the split, skipping
/// the target's character class so the ground truth is unambiguous.
pub fn generate_sample(level: usize, split: &CorpusSplit, sample_seed: u64) -> Result<SceneSample> {
    if level < 2 {
        return Err(Error::InvalidLevel(level));
    }
    if split.is_empty() {
        return Err(Error::SplitTooSmall("split has no glyphs".into()));
    }
    let mut rng = CounterRng::new(sample_seed);

    let shown = rng.index(split.len());
    let class = split.class_of(shown);
    let siblings: Vec<usize> = split
        .class_members(class)
        .iter()
        .copied()
        .filter(|&g| g != shown)
        .collect();
    if siblings.is_empty() {
        return Err(Error::SplitTooSmall(format!(
            "class of {} has a single drawer",
            split.glyphs[shown].id
        )));
    }
    let in_scene = siblings[rng.index(siblings.len())];
    if split.num_classes() < 2 {
        return Err(Error::SplitTooSmall("need at least two character classes".into()));
    }

    let target_color = draw_color(&mut rng, &[BACKGROUND]);
    let target_image = render_target_image(&split.glyphs[shown].bitmap, target_color);

    let mut used = vec![BACKGROUND];
    let mut drawn: Vec<Drawn> = Vec::with_capacity(level);
    for _ in 0..level - 1 {
        let g = loop {
            let g = rng.index(split.len());
            if split.class_of(g) != class {
                break g;
            }
        };
        let color = draw_color(&mut rng, &used);
        used.push(color);
        let (affine, center, footprint) = place(&mut rng, &split.glyphs[g], false)?;
        drawn.push(Drawn {
            glyph: g,
            affine,
            center,
            color,
            footprint,
        });
    }
    let color = draw_color(&mut rng, &used);
    let (affine, center, footprint) = place(&mut rng, &split.glyphs[in_scene], true)?;
    drawn.push(Drawn {
        glyph: in_scene,
        affine,
        center,
        color,
        footprint,
    });

    let layers: Vec<(Mask, Rgb)> = drawn.iter().map(|d| (d.footprint.clone(), d.color)).collect();
    let (scene, visible) = compose_scene(&layers, BACKGROUND);
    let instances: Vec<PlacedInstance> = drawn
        .into_iter()
        .zip(visible)
        .map(|(d, visible_mask)| PlacedInstance {
            glyph: split.glyphs[d.glyph].id.clone(),
            affine: d.affine,
            center: d.center,
            color: d.color,
            com: visible_mask
                .center_of_mass()
                .map(|(x, y)| (x as f32, y as f32)),
            full_mask: d.footprint,
            visible_mask,
        })
        .collect();
    let seg_map = instances[level - 1].visible_mask.clone();
    Ok(SceneSample {
        target_image,
        scene,
        seg_map,
        instances,
        target_index: level - 1,
        level,
        sample_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub split: SplitName,
    pub level: usize,
    pub count: u64,
    pub global_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Argument("dataset count must be positive".into()));
        }
        if self.level < 2 {
            return Err(Error::InvalidLevel(self.level));
        }
        Ok(())
    }

    /// `mix_seed([global_seed, split tag, level, index])`.
    pub fn sample_seed(&self, index: u64) -> u64 {
        mix_seed(&[self.global_seed, self.split.tag(), self.level as u64, index])
    }
}

/// Ordered, restartable stream of samples.
pub struct DatasetStream<'a> {
    spec: DatasetSpec,
    split: &'a CorpusSplit,
    next: u64,
}

impl<'a> DatasetStream<'a> {
    pub fn starting_at(mut self, index: u64) -> Self {
        self.next = index;
        self
    }
}

impl Iterator for DatasetStream<'_> {
    type Item = Result<SceneSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.spec.count {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(generate_indexed(&self.spec, self.split, i))
    }
}

fn generate_indexed(spec: &DatasetSpec, split: &CorpusSplit, index: u64) -> Result<SceneSample> {
    generate_sample(spec.level, split, spec.sample_seed(index)).map_err(|e| Error::AtSample {
        index,
        source: Box::new(e),
    })
}

pub fn generate_dataset<'a>(spec: &DatasetSpec, split: &'a CorpusSplit) -> Result<DatasetStream<'a>> {
    spec.validate()?;
    Ok(DatasetStream {
        spec: spec.clone(),
        split,
        next: 0,
    })
}

/// Generates `range` in parallel; output order is index order.
pub fn generate_range(
    spec: &DatasetSpec,
    split: &CorpusSplit,
    range: Range<u64>,
) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    range
        .into_par_iter()
        .map(|i| generate_indexed(spec, split, i))
        .collect()
}
