#![allow(dead_code)]

use omniseg::glyph_synth::{synth_glyphs, SynthCorpusConfig};
use omniseg::model::ModelConfig;
use omniseg::omniglot::{make_splits, Corpus, CorpusSplit, SplitName};
use omniseg::raster::RgbRaster;
use omniseg::rng::CounterRng;
use omniseg::scene::{generate_range, DatasetSpec, SceneSample};

/// (train, validation, one-shot) over a small procedural corpus.
pub fn splits() -> (CorpusSplit, CorpusSplit, CorpusSplit) {
    let cfg = SynthCorpusConfig {
        alphabets: 3,
        characters_per_alphabet: 6,
        seed: 11,
    };
    make_splits(&synth_glyphs(&cfg, Corpus::Background), &synth_glyphs(&cfg, Corpus::Evaluation)).unwrap()
}

pub fn samples(split: &CorpusSplit, level: usize, count: u64, seed: u64) -> Vec<SceneSample> {
    let spec = DatasetSpec {
        split: SplitName::Train,
        level,
        count,
        global_seed: seed,
    };
    generate_range(&spec, split, 0..count).unwrap()
}

pub fn micro() -> ModelConfig {
    ModelConfig::with_widths([4, 4, 4, 4, 8, 8])
}

pub fn random_rgb(w: usize, h: usize, seed: u64) -> RgbRaster {
    let mut rng = CounterRng::new(seed);
    RgbRaster::from_vec(w, h, (0..w * h * 3).map(|_| rng.below(256) as u8).collect())
}
