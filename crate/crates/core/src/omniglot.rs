//! Loading the Omniglot image corpus and splitting it by drawer.
//!
//! Expected layout (the public release):
//! `<root>/images_background/<Alphabet>/characterNN/<id>_<drawer>.png`
//! and the same under `images_evaluation`, every image 105×105 grayscale.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

pub const GLYPH_SIZE: usize = 105;
pub const DRAWERS_PER_CHARACTER: usize = 20;
pub const INK_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corpus {
    Background,
    Evaluation,
}

impl Corpus {
    pub fn dir_name(self) -> &'static str {
        match self {
            Corpus::Background => "images_background",
            Corpus::Evaluation => "images_evaluation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GlyphId {
    pub alphabet: String,
    pub character_index: u32,
    pub drawer_index: u32,
}

impl GlyphId {
    pub fn class_key(&self) -> (&str, u32) {
        (&self.alphabet, self.character_index)
    }
}

impl fmt::Display for GlyphId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/character{:02}/drawer{:02}",
            self.alphabet, self.character_index, self.drawer_index
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub id: GlyphId,
    /// 105×105, ink = true.
    pub bitmap: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    OneShot,
}

impl SplitName {
    /// Tag folded into per-sample seeds.
    pub fn tag(self) -> u64 {
        match self {
            SplitName::Train => 1,
            SplitName::Validation => 2,
            SplitName::OneShot => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::OneShot => "one_shot",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "one_shot" | "one-shot" | "oneshot" => Ok(SplitName::OneShot),
            other => Err(Error::Argument(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named set of glyphs plus an index of the drawers available per character.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub glyphs: Vec<Glyph>,
    classes: Vec<Vec<usize>>,
    class_of: Vec<usize>,
}

impl CorpusSplit {
    pub fn new(name: SplitName, glyphs: Vec<Glyph>) -> Self {
        let mut by_class: BTreeMap<(String, u32), Vec<usize>> = BTreeMap::new();
        for (i, g) in glyphs.iter().enumerate() {
            by_class
                .entry((g.id.alphabet.clone(), g.id.character_index))
                .or_default()
                .push(i);
        }
        let mut class_of = vec![0; glyphs.len()];
        let classes: Vec<Vec<usize>> = by_class.into_values().collect();
        for (c, members) in classes.iter().enumerate() {
            for &i in members {
                class_of[i] = c;
            }
        }
        Self {
            name,
            glyphs,
            classes,
            class_of,
        }
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Glyph indices belonging to class `c`, in split order.
    pub fn class_members(&self, c: usize) -> &[usize] {
        &self.classes[c]
    }

    pub fn class_of(&self, glyph_index: usize) -> usize {
        self.class_of[glyph_index]
    }

    /// Distinct alphabets, sorted.
    pub fn alphabets(&self) -> Vec<String> {
        let mut names: Vec<String> = self.glyphs.iter().map(|g| g.id.alphabet.clone()).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Pixel is ink iff its normalized intensity is below 0.5.
pub fn binarize_glyph(gray: &[f32], width: usize, height: usize) -> Mask {
    assert_eq!(gray.len(), width * height);
    Mask::from_vec(width, height, gray.iter().map(|&v| v < INK_THRESHOLD).collect())
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedCorpus {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Entries of `dir`, sorted by raw path bytes.
fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));
    Ok(out)
}

fn parse_character_dir(path: &Path) -> Result<u32> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.strip_prefix("character")
        .and_then(|n| n.parse::<u32>().ok())
        .filter(|&n| n >= 1)
        .ok_or_else(|| malformed(path, "expected directory named characterNN"))
}

fn parse_drawer(path: &Path) -> Result<u32> {
    let stem = path.file_stem().and_then(|n| n.to_str()).unwrap_or("");
    let (id, drawer) = stem
        .rsplit_once('_')
        .ok_or_else(|| malformed(path, "expected file named <id>_<drawer>.png"))?;
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(path, "non-numeric character id in filename"));
    }
    drawer
        .parse::<u32>()
        .ok()
        .filter(|d| (1..=DRAWERS_PER_CHARACTER as u32).contains(d))
        .ok_or_else(|| malformed(path, "drawer suffix must be an integer in 1..=20"))
}

fn load_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| malformed(path, e.to_string()))?;
    let gray = img.to_luma8();
    if gray.width() as usize != GLYPH_SIZE || gray.height() as usize != GLYPH_SIZE {
        return Err(malformed(
            path,
            format!("image is {}x{}, expected 105x105", gray.width(), gray.height()),
        ));
    }
    let unit: Vec<f32> = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(binarize_glyph(&unit, GLYPH_SIZE, GLYPH_SIZE))
}

/// Loads every glyph of one corpus half. Glyph order follows the byte order of
/// paths, so repeated loads are identical.
pub fn load_corpus(root: &Path, which: Corpus) -> Result<Vec<Glyph>> {
    let dir = root.join(which.dir_name());
    if !dir.is_dir() {
        return Err(Error::CorpusNotFound(dir));
    }
    let mut files: Vec<(GlyphId, PathBuf)> = Vec::new();
    for alphabet_dir in sorted_entries(&dir)? {
        if !alphabet_dir.is_dir() {
            continue;
        }
        let alphabet = alphabet_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| malformed(&alphabet_dir, "alphabet name is not UTF-8"))?
            .to_string();
        for char_dir in sorted_entries(&alphabet_dir)? {
            if !char_dir.is_dir() {
                continue;
            }
            let character_index = parse_character_dir(&char_dir)?;
            for file in sorted_entries(&char_dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let drawer_index = parse_drawer(&file)?;
                files.push((
                    GlyphId {
                        alphabet: alphabet.clone(),
                        character_index,
                        drawer_index,
                    },
                    file,
                ));
            }
        }
    }
    if files.is_empty() {
        return Err(Error::CorpusNotFound(dir));
    }
    files
        .into_par_iter()
        .map(|(id, path)| {
            let bitmap = load_png(&path)?;
            if bitmap.is_empty() {
                return Err(malformed(&path, "glyph has no ink pixels"));
            }
            Ok(Glyph { id, bitmap })
        })
        .collect()
}

/// Splits by drawer: train gets the ten smallest drawer indices of every
/// background character, validation the other ten, one-shot the ten largest
/// drawer indices of every evaluation character.
pub fn make_splits(
    background: &[Glyph],
    evaluation: &[Glyph],
) -> Result<(CorpusSplit, CorpusSplit, CorpusSplit)> {
    let (train, validation) = split_by_drawer(background)?;
    let (_, one_shot) = split_by_drawer(evaluation)?;
    Ok((
        CorpusSplit::new(SplitName::Train, train),
        CorpusSplit::new(SplitName::Validation, validation),
        CorpusSplit::new(SplitName::OneShot, one_shot),
    ))
}

fn split_by_drawer(glyphs: &[Glyph]) -> Result<(Vec<Glyph>, Vec<Glyph>)> {
    let mut by_class: BTreeMap<(&str, u32), Vec<&Glyph>> = BTreeMap::new();
    for g in glyphs {
        by_class.entry(g.id.class_key()).or_default().push(g);
    }
    let half = DRAWERS_PER_CHARACTER / 2;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for ((alphabet, character), mut members) in by_class {
        members.sort_by_key(|g| g.id.drawer_index);
        let mut drawers: Vec<u32> = members.iter().map(|g| g.id.drawer_index).collect();
        drawers.dedup();
        if members.len() != DRAWERS_PER_CHARACTER || drawers.len() != DRAWERS_PER_CHARACTER {
            return Err(Error::MalformedCorpus {
                path: PathBuf::from(format!("{alphabet}/character{character:02}")),
                reason: format!(
                    "expected {DRAWERS_PER_CHARACTER} distinct drawers, found {}",
                    drawers.len()
                ),
            });
        }
        first.extend(members[..half].iter().map(|&g| g.clone()));
        second.extend(members[half..].iter().map(|&g| g.clone()));
    }
    Ok((first, second))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph(alphabet: &str, character: u32, drawer: u32) -> Glyph {
        let mut bitmap = Mask::new(GLYPH_SIZE, GLYPH_SIZE);
        bitmap.set(drawer as usize, character as usize, true);
        Glyph {
            id: GlyphId {
                alphabet: alphabet.into(),
                character_index: character,
                drawer_index: drawer,
            },
            bitmap,
        }
    }

    #[test]
    fn binarize_edge_cases() {
        let white = vec![1.0f32; 105 * 105];
        assert!(binarize_glyph(&white, 105, 105).is_empty());
        let black = vec![0.0f32; 105 * 105];
        assert_eq!(binarize_glyph(&black, 105, 105).count(), 105 * 105);
        let mut one = white.clone();
        one[500] = 0.0;
        assert_eq!(binarize_glyph(&one, 105, 105).count(), 1);
    }

    #[test]
    fn first_ten_drawers_go_to_train() {
        // Reverse insertion order so the split cannot rely on input order.
        let bg: Vec<Glyph> = (1..=20).rev().map(|d| glyph("A", 1, d)).collect();
        let ev: Vec<Glyph> = (1..=20).map(|d| glyph("Z", 1, d)).collect();
        let (train, val, one_shot) = make_splits(&bg, &ev).unwrap();
        let drawers = |s: &CorpusSplit| s.glyphs.iter().map(|g| g.id.drawer_index).collect::<Vec<_>>();
        assert_eq!(drawers(&train), (1..=10).collect::<Vec<_>>());
        assert_eq!(drawers(&val), (11..=20).collect::<Vec<_>>());
        assert_eq!(drawers(&one_shot), (11..=20).collect::<Vec<_>>());
        assert_eq!(train.num_classes(), 1);
        assert_eq!(train.class_members(0).len(), 10);
    }

    #[test]
    fn wrong_drawer_count_is_malformed() {
        let bg: Vec<Glyph> = (1..=19).map(|d| glyph("A", 1, d)).collect();
        let err = make_splits(&bg, &[]).unwrap_err();
        assert!(matches!(err, Error::MalformedCorpus { .. }));
    }

    #[test]
    fn drawer_parsing() {
        assert_eq!(parse_drawer(Path::new("a/0709_07.png")).unwrap(), 7);
        assert!(parse_drawer(Path::new("a/0709-07.png")).is_err());
        assert!(parse_drawer(Path::new("a/0709_21.png")).is_err());
        assert_eq!(parse_character_dir(Path::new("x/character12")).unwrap(), 12);
        assert!(parse_character_dir(Path::new("x/char12")).is_err());
    }

    #[test]
    fn missing_and_empty_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(tmp.path(), Corpus::Background),
            Err(Error::CorpusNotFound(_))
        ));
        std::fs::create_dir(tmp.path().join("images_background")).unwrap();
        assert!(matches!(
            load_corpus(tmp.path(), Corpus::Background),
            Err(Error::CorpusNotFound(_))
        ));
    }
}
