//! Procedural stand-in for the Omniglot corpus.
//!
//! Each synthetic character is a small set of Bézier strokes; each of its 20
//! drawers renders a jittered copy of those strokes with its own pen width.
//! [`write_corpus`] lays the result out exactly like the public Omniglot
//! release so the regular loader can read it.

use std::path::Path;

use crate::error::Result;
use crate::omniglot::{Corpus, Glyph, GlyphId, DRAWERS_PER_CHARACTER, GLYPH_SIZE};
use crate::raster::Mask;
use crate::rng::{mix_seed, CounterRng};

#[derive(Clone, Debug)]
pub struct SynthCorpusConfig {
    pub alphabets: usize,
    pub characters_per_alphabet: usize,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            alphabets: 6,
            characters_per_alphabet: 12,
            seed: 2018,
        }
    }
}

type Point = (f64, f64);

#[derive(Clone, Debug)]
struct Stroke {
    ctrl: [Point; 4],
}

fn sample_character(rng: &mut CounterRng) -> Vec<Stroke> {
    let n_strokes = 2 + rng.index(3);
    (0..n_strokes)
        .map(|_| {
            let mut ctrl = [(0.0, 0.0); 4];
            let start = (rng.uniform(18.0, 87.0), rng.uniform(18.0, 87.0));
            ctrl[0] = start;
            for k in 1..4 {
                let prev = ctrl[k - 1];
                ctrl[k] = (
                    (prev.0 + rng.uniform(-40.0, 40.0)).clamp(14.0, 91.0),
                    (prev.1 + rng.uniform(-40.0, 40.0)).clamp(14.0, 91.0),
                );
            }
            Stroke { ctrl }
        })
        .collect()
}

fn bezier(c: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    let (a, b, cc, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * c[0].0 + b * c[1].0 + cc * c[2].0 + d * c[3].0,
        a * c[0].1 + b * c[1].1 + cc * c[2].1 + d * c[3].1,
    )
}

fn render_drawer(strokes: &[Stroke], rng: &mut CounterRng) -> Mask {
    let radius = rng.uniform(1.6, 2.6);
    let angle = rng.uniform(-6.0, 6.0).to_radians();
    let scale = rng.uniform(0.9, 1.1);
    let shift = (rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0));
    let c = (GLYPH_SIZE as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let warp = |p: Point| {
        let (dx, dy) = ((p.0 - c) * scale, (p.1 - c) * scale);
        (c + cos * dx - sin * dy + shift.0, c + sin * dx + cos * dy + shift.1)
    };
    let mut mask = Mask::new(GLYPH_SIZE, GLYPH_SIZE);
    for s in strokes {
        let mut ctrl = s.ctrl;
        for p in ctrl.iter_mut() {
            *p = warp((p.0 + rng.gaussian() * 2.5, p.1 + rng.gaussian() * 2.5));
        }
        let steps = 120;
        for i in 0..=steps {
            let (px, py) = bezier(&ctrl, i as f64 / steps as f64);
            let r = radius.ceil() as i64 + 1;
            for yy in (py.round() as i64 - r)..=(py.round() as i64 + r) {
                for xx in (px.round() as i64 - r)..=(px.round() as i64 + r) {
                    if xx < 0 || yy < 0 || xx >= GLYPH_SIZE as i64 || yy >= GLYPH_SIZE as i64 {
                        continue;
                    }
                    let d2 = (xx as f64 - px).powi(2) + (yy as f64 - py).powi(2);
                    if d2 <= radius * radius {
                        mask.set(xx as usize, yy as usize, true);
                    }
                }
            }
        }
    }
    mask
}

/// All glyphs of a synthetic corpus half, in the same order the loader
/// would produce after writing them to disk.
pub fn synth_glyphs(config: &SynthCorpusConfig, which: Corpus) -> Vec<Glyph> {
    let half_tag = match which {
        Corpus::Background => 0u64,
        Corpus::Evaluation => 1u64,
    };
    let mut out = Vec::new();
    for a in 0..config.alphabets {
        let alphabet = format!("{}_{:02}", alphabet_prefix(which), a);
        for ch in 0..config.characters_per_alphabet {
            let mut char_rng = CounterRng::new(mix_seed(&[config.seed, half_tag, a as u64, ch as u64]));
            let strokes = sample_character(&mut char_rng);
            for drawer in 1..=DRAWERS_PER_CHARACTER as u32 {
                let mut rng = char_rng.fork(drawer as u64);
                let mut bitmap = render_drawer(&strokes, &mut rng);
                if bitmap.is_empty() {
                    bitmap.set(GLYPH_SIZE / 2, GLYPH_SIZE / 2, true);
                }
                out.push(Glyph {
                    id: GlyphId {
                        alphabet: alphabet.clone(),
                        character_index: ch as u32 + 1,
                        drawer_index: drawer,
                    },
                    bitmap,
                });
            }
        }
    }
    out
}

fn alphabet_prefix(which: Corpus) -> &'static str {
    match which {
        Corpus::Background => "Synthetic_Background",
        Corpus::Evaluation => "Synthetic_Evaluation",
    }
}

/// Writes both corpus halves under `root` in the Omniglot directory layout.
pub fn write_corpus(root: &Path, config: &SynthCorpusConfig) -> Result<()> {
    let mut global_id = 0usize;
    for which in [Corpus::Background, Corpus::Evaluation] {
        let base = root.join(which.dir_name());
        let glyphs = synth_glyphs(config, which);
        for chunk in glyphs.chunks(DRAWERS_PER_CHARACTER) {
            global_id += 1;
            let id = &chunk[0].id;
            let dir = base
                .join(&id.alphabet)
                .join(format!("character{:02}", id.character_index));
            std::fs::create_dir_all(&dir)?;
            for g in chunk {
                let pixels: Vec<u8> = g
                    .bitmap
                    .iter()
                    .map(|ink| if ink { 0 } else { 255 })
                    .collect();
                let img = image::GrayImage::from_raw(GLYPH_SIZE as u32, GLYPH_SIZE as u32, pixels)
                    .expect("buffer size matches");
                let path = dir.join(format!("{:04}_{:02}.png", global_id, g.id.drawer_index));
                img.save(&path).map_err(|e| std::io::Error::other(e.to_string()))?;
            }
        }
    }
    Ok(())
}
