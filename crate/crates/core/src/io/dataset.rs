//! Scene datasets as a JSON manifest plus binary shards.
//!
//! Each shard `shard-NNNNN.bin` is a small header followed by concatenated
//! records; `shard-NNNNN.idx` holds `records + 1` absolute byte offsets, so
//! any record can be read independently of the others.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::omniglot::{GlyphId, SplitName};
use crate::raster::{Mask, RgbRaster};
use crate::rng::ALGORITHM_ID;
use crate::scene::{AffineParams, DatasetSpec, PlacedInstance, SceneSample, SCENE_SIZE, TARGET_SIZE};
use crate::training::SampleSource;

pub const DATASET_VERSION: u32 = 1;
/// Bumped whenever scene generation changes output for a given seed.
pub const GENERATOR_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SHARD_RECORDS: u64 = 10_000;

const SHARD_MAGIC: &[u8; 4] = b"OSDS";
const INDEX_MAGIC: &[u8; 4] = b"OSDI";
const SHARD_HEADER: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub index: String,
    pub first_record: u64,
    pub records: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub global_seed: u64,
    pub split: SplitName,
    pub level: usize,
    pub count: u64,
    pub prng_algorithm: String,
    pub generator_version: u32,
    pub shards: Vec<ShardInfo>,
}

impl Manifest {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            split: self.split,
            level: self.level,
            count: self.count,
            global_seed: self.global_seed,
        }
    }
}

/// Row-major runs `(start, length)` over the flattened mask; a run never
/// continues past the end of a row.
pub fn rle_encode(mask: &Mask) -> Result<Vec<(u16, u16)>> {
    let (w, h) = (mask.width(), mask.height());
    if w * h > u16::MAX as usize + 1 {
        return Err(Error::Argument(format!("{w}x{h} mask too large for u16 runs")));
    }
    let mut runs = Vec::new();
    for y in 0..h {
        let mut x = 0;
        while x < w {
            if mask.get(x, y) {
                let start = x;
                while x < w && mask.get(x, y) {
                    x += 1;
                }
                runs.push(((y * w + start) as u16, (x - start) as u16));
            } else {
                x += 1;
            }
        }
    }
    Ok(runs)
}

pub fn rle_decode(width: usize, height: usize, runs: &[(u16, u16)]) -> Result<Mask> {
    let mut m = Mask::new(width, height);
    for &(start, len) in runs {
        let (start, len) = (start as usize, len as usize);
        let (x0, y) = (start % width.max(1), start / width.max(1));
        if y >= height || x0 + len > width || len == 0 {
            return Err(Error::Argument(format!("run ({start}, {len}) outside {width}x{height}")));
        }
        for x in x0..x0 + len {
            m.set(x, y, true);
        }
    }
    Ok(m)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend(v.to_bits().to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn runs(&mut self, mask: &Mask) -> Result<()> {
        let runs = rle_encode(mask)?;
        self.u16(u16::try_from(runs.len()).map_err(|_| Error::Argument("too many runs".into()))?);
        for (s, l) in runs {
            self.u16(s);
            self.u16(l);
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptDataset {
                record: self.record,
                reason: format!("record truncated at byte {}", self.buf.len()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptDataset {
            record: self.record,
            reason: reason.into(),
        }
    }
    fn runs(&mut self) -> Result<Mask> {
        let n = self.u16()? as usize;
        let mut runs = Vec::with_capacity(n);
        for _ in 0..n {
            runs.push((self.u16()?, self.u16()?));
        }
        rle_decode(SCENE_SIZE, SCENE_SIZE, &runs).map_err(|e| self.corrupt(e.to_string()))
    }
}

/// Serializes one sample (layout documented in the README).
pub fn encode_record(s: &SceneSample) -> Result<Vec<u8>> {
    let size_ok = |r: &RgbRaster, n| r.width() == n && r.height() == n;
    if !size_ok(&s.target_image, TARGET_SIZE) || !size_ok(&s.scene, SCENE_SIZE) {
        return Err(Error::Argument("sample rasters have unexpected sizes".into()));
    }
    let narrow = |v: usize, what: &str| u16::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u16")));
    let mut w = Writer(Vec::with_capacity(32 * 1024));
    w.u64(s.sample_seed);
    w.u16(narrow(s.target_index, "target index")?);
    w.u16(narrow(s.level, "level")?);
    w.bytes(s.target_image.as_bytes());
    w.bytes(s.scene.as_bytes());
    w.bytes(&s.seg_map.pack_bits());
    w.u16(narrow(s.instances.len(), "instance count")?);
    for inst in &s.instances {
        let name = inst.glyph.alphabet.as_bytes();
        w.u16(narrow(name.len(), "alphabet name length")?);
        w.bytes(name);
        w.u32(inst.glyph.character_index);
        w.u32(inst.glyph.drawer_index);
        for v in [inst.affine.rotation, inst.affine.shear, inst.affine.scale_x, inst.affine.scale_y] {
            w.f32(v);
        }
        w.f32(inst.center.0);
        w.f32(inst.center.1);
        for c in inst.color {
            w.u8(c);
        }
        let com = inst.com.unwrap_or((f32::NAN, f32::NAN));
        w.f32(com.0);
        w.f32(com.1);
        w.runs(&inst.visible_mask)?;
        w.runs(&inst.full_mask)?;
    }
    Ok(w.0)
}

pub fn decode_record(bytes: &[u8], record: u64) -> Result<SceneSample> {
    let mut r = Reader { buf: bytes, pos: 0, record };
    let sample_seed = r.u64()?;
    let target_index = r.u16()? as usize;
    let level = r.u16()? as usize;
    let target_image = RgbRaster::from_vec(TARGET_SIZE, TARGET_SIZE, r.take(TARGET_SIZE * TARGET_SIZE * 3)?.to_vec());
    let scene = RgbRaster::from_vec(SCENE_SIZE, SCENE_SIZE, r.take(SCENE_SIZE * SCENE_SIZE * 3)?.to_vec());
    let seg_map = Mask::unpack_bits(SCENE_SIZE, SCENE_SIZE, r.take((SCENE_SIZE * SCENE_SIZE).div_ceil(8))?)
        .ok_or_else(|| r.corrupt("bad seg map"))?;
    let n = r.u16()? as usize;
    let mut instances = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let alphabet = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.corrupt("alphabet is not UTF-8"))?;
        let glyph = GlyphId {
            alphabet,
            character_index: r.u32()?,
            drawer_index: r.u32()?,
        };
        let affine = AffineParams {
            rotation: r.f32()?,
            shear: r.f32()?,
            scale_x: r.f32()?,
            scale_y: r.f32()?,
        };
        let center = (r.f32()?, r.f32()?);
        let color = [r.u8()?, r.u8()?, r.u8()?];
        let com = (r.f32()?, r.f32()?);
        let com = (!com.0.is_nan()).then_some(com);
        let visible_mask = r.runs()?;
        let full_mask = r.runs()?;
        instances.push(PlacedInstance {
            glyph,
            affine,
            center,
            color,
            full_mask,
            visible_mask,
            com,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if target_index >= instances.len() {
        return Err(r.corrupt(format!("target index {target_index} out of {} instances", instances.len())));
    }
    Ok(SceneSample {
        target_image,
        scene,
        seg_map,
        instances,
        target_index,
        level,
        sample_seed,
    })
}

fn shard_names(i: usize) -> (String, String) {
    (format!("shard-{i:05}.bin"), format!("shard-{i:05}.idx"))
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut h = magic.to_vec();
    h.extend(DATASET_VERSION.to_le_bytes());
    h
}

/// Single-writer shard builder. Files appear only when complete; the
/// manifest is written last.
pub struct DatasetWriter {
    dir: PathBuf,
    manifest: Manifest,
    shard_records: u64,
    shard: Vec<u8>,
    offsets: Vec<u64>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, spec: &DatasetSpec, shard_records: u64) -> Result<Self> {
        spec.validate()?;
        if shard_records == 0 {
            return Err(Error::Argument("shard size must be positive".into()));
        }
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                format_version: DATASET_VERSION,
                global_seed: spec.global_seed,
                split: spec.split,
                level: spec.level,
                count: 0,
                prng_algorithm: ALGORITHM_ID.to_string(),
                generator_version: GENERATOR_VERSION,
                shards: Vec::new(),
            },
            shard_records,
            shard: header(SHARD_MAGIC),
            offsets: vec![SHARD_HEADER as u64],
        })
    }

    pub fn push(&mut self, sample: &SceneSample) -> Result<()> {
        let rec = encode_record(sample)?;
        self.shard.extend(rec);
        self.offsets.push(self.shard.len() as u64);
        self.manifest.count += 1;
        if self.offsets.len() as u64 - 1 == self.shard_records {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let records = self.offsets.len() as u64 - 1;
        if records == 0 {
            return Ok(());
        }
        let (file, index) = shard_names(self.manifest.shards.len());
        let mut idx = header(INDEX_MAGIC);
        idx.extend(records.to_le_bytes());
        for o in &self.offsets {
            idx.extend(o.to_le_bytes());
        }
        atomic_write(&self.dir.join(&file), &self.shard)?;
        atomic_write(&self.dir.join(&index), &idx)?;
        self.manifest.shards.push(ShardInfo {
            file,
            index,
            first_record: self.manifest.count - records,
            records,
        });
        self.shard = header(SHARD_MAGIC);
        self.offsets = vec![SHARD_HEADER as u64];
        Ok(())
    }

    pub fn finish(mut self) -> Result<Manifest> {
        self.flush()?;
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        atomic_write(&self.dir.join(MANIFEST_FILE), &json)?;
        Ok(self.manifest)
    }
}

/// Writes `samples` (which must come from `spec`, in index order).
pub fn write_dataset<I>(dir: &Path, spec: &DatasetSpec, samples: I, shard_records: u64) -> Result<Manifest>
where
    I: IntoIterator<Item = Result<SceneSample>>,
{
    let mut w = DatasetWriter::create(dir, spec, shard_records)?;
    for s in samples {
        w.push(&s?)?;
    }
    if w.manifest.count != spec.count {
        return Err(Error::Argument(format!(
            "spec promises {} samples, got {}",
            spec.count, w.manifest.count
        )));
    }
    w.finish()
}

struct OpenShard {
    file: File,
    len: u64,
    first: u64,
    offsets: Vec<u64>,
}

/// Random-access reader. `get` takes `&self` and reads at fixed offsets, so
/// it may be called from many threads at once.
pub struct DatasetReader {
    pub manifest: Manifest,
    shards: Vec<OpenShard>,
}

fn check_header(bytes: &[u8], magic: &[u8; 4], what: &Path) -> Result<()> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::UnsupportedFormat(format!("{} has a bad header", what.display())));
    }
    let v = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if v != DATASET_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "{} has version {v}, expected {DATASET_VERSION}",
            what.display()
        )));
    }
    Ok(())
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&mpath)?)
            .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != DATASET_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "dataset version {}, expected {DATASET_VERSION}",
                manifest.format_version
            )));
        }
        let total: u64 = manifest.shards.iter().map(|s| s.records).sum();
        if total != manifest.count {
            return Err(Error::CorruptDataset {
                record: total.min(manifest.count),
                reason: format!("manifest count {} but shards hold {total}", manifest.count),
            });
        }
        let mut shards = Vec::with_capacity(manifest.shards.len());
        for info in &manifest.shards {
            let ipath = dir.join(&info.index);
            let idx = std::fs::read(&ipath)?;
            check_header(&idx, INDEX_MAGIC, &ipath)?;
            let n = info.records as usize;
            if idx.len() != 16 + 8 * (n + 1) || u64::from_le_bytes(idx[8..16].try_into().unwrap()) != info.records {
                return Err(Error::CorruptDataset {
                    record: info.first_record,
                    reason: format!("{} does not match the manifest", ipath.display()),
                });
            }
            let offsets: Vec<u64> = idx[16..]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let spath = dir.join(&info.file);
            let file = File::open(&spath)?;
            let len = file.metadata()?.len();
            let mut head = [0u8; SHARD_HEADER];
            read_at(&file, &mut head, 0).map_err(|_| Error::UnsupportedFormat(format!("{} is empty", spath.display())))?;
            check_header(&head, SHARD_MAGIC, &spath)?;
            shards.push(OpenShard {
                file,
                len,
                first: info.first_record,
                offsets,
            });
        }
        Ok(Self { manifest, shards })
    }

    pub fn len(&self) -> u64 {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn get(&self, index: u64) -> Result<SceneSample> {
        if index >= self.manifest.count {
            return Err(Error::Argument(format!("record {index} out of {}", self.manifest.count)));
        }
        let shard = self
            .shards
            .iter()
            .rev()
            .find(|s| s.first <= index)
            .expect("shards cover all records");
        let local = (index - shard.first) as usize;
        let (a, b) = (shard.offsets[local], shard.offsets[local + 1]);
        if b < a || b > shard.len {
            return Err(Error::CorruptDataset {
                record: index,
                reason: format!("shard truncated ({} bytes, record ends at {b})", shard.len),
            });
        }
        let mut buf = vec![0u8; (b - a) as usize];
        read_at(&shard.file, &mut buf, a).map_err(|e| Error::CorruptDataset {
            record: index,
            reason: e.to_string(),
        })?;
        decode_record(&buf, index)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

impl SampleSource for DatasetReader {
    fn len(&self) -> usize {
        self.manifest.count as usize
    }
    fn sample(&self, index: usize) -> Result<SceneSample> {
        self.get(index as u64)
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = file.try_clone()?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)
}
