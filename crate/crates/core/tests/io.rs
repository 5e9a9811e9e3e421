use std::fs;
use std::path::Path;

use omniseg::glyph_synth::{synth_glyphs, SynthCorpusConfig};
use omniseg::io::{
    decode_checkpoint, decode_record, encode_checkpoint, encode_record, load_checkpoint, metrics_from_jsonl,
    metrics_to_jsonl, rle_decode, rle_encode, save_checkpoint, write_dataset, DatasetReader, Manifest, TrainSettings,
    MANIFEST_FILE,
};
use omniseg::model::{init_params, ModelConfig, ModelKind};
use omniseg::omniglot::{make_splits, Corpus, CorpusSplit, SplitName};
use omniseg::raster::Mask;
use omniseg::rng::CounterRng;
use omniseg::scene::{generate_dataset, generate_range, DatasetSpec};
use omniseg::tensor::ModelParams;
use omniseg::training::{MetricRecord, SampleSource, Schedule};
use omniseg::Error;

fn corpus() -> CorpusSplit {
    let cfg = SynthCorpusConfig {
        alphabets: 3,
        characters_per_alphabet: 6,
        seed: 11,
    };
    make_splits(&synth_glyphs(&cfg, Corpus::Background), &synth_glyphs(&cfg, Corpus::Evaluation))
        .unwrap()
        .0
}

fn tiny() -> ModelConfig {
    ModelConfig::with_widths([4, 4, 4, 4, 8, 8])
}

/// Independent decoding oracle: paint each run pixel by pixel.
fn paint_runs(w: usize, h: usize, runs: &[(u16, u16)]) -> Mask {
    let mut flat = vec![false; w * h];
    for &(s, l) in runs {
        for v in &mut flat[s as usize..(s + l) as usize] {
            *v = true;
        }
    }
    Mask::from_vec(w, h, flat)
}

#[test]
fn rle_examples() {
    assert!(rle_encode(&Mask::new(96, 96)).unwrap().is_empty());
    let full = Mask::from_fn(96, 96, |_, _| true);
    let runs = rle_encode(&full).unwrap();
    assert_eq!(runs.len(), 96);
    for (y, &(s, l)) in runs.iter().enumerate() {
        assert_eq!((s as usize, l), (y * 96, 96));
    }
    let mut rng = CounterRng::new(4);
    for _ in 0..200 {
        let d = rng.next_f64();
        let m = Mask::from_fn(96, 96, |_, _| rng.next_f64() < d);
        let runs = rle_encode(&m).unwrap();
        assert_eq!(paint_runs(96, 96, &runs), m);
        assert_eq!(rle_decode(96, 96, &runs).unwrap(), m);
        // Maximal runs: no two consecutive runs touch within a row.
        for w in runs.windows(2) {
            let end = w[0].0 as usize + w[0].1 as usize;
            assert!(end < w[1].0 as usize || end % 96 == 0);
        }
    }
}

#[test]
fn records_round_trip_bit_exact() {
    let split = corpus();
    let mut rng = CounterRng::new(99);
    for trial in 0..100u64 {
        let level = [2usize, 4, 8, 32, 64][rng.index(5)];
        let spec = DatasetSpec {
            split: SplitName::Train,
            level,
            count: 1,
            global_seed: rng.next_u64(),
        };
        let s = generate_range(&spec, &split, 0..1).unwrap().remove(0);
        let bytes = encode_record(&s).unwrap();
        let back = decode_record(&bytes, trial).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_record(&back).unwrap(), bytes);
    }
}

fn write(dir: &Path, spec: &DatasetSpec, split: &CorpusSplit, shard: u64) -> Manifest {
    write_dataset(dir, spec, generate_dataset(spec, split).unwrap(), shard).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn dataset_files_round_trip_and_are_deterministic() {
    let split = corpus();
    let spec = DatasetSpec {
        split: SplitName::Train,
        level: 4,
        count: 23,
        global_seed: 7,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = write(a.path(), &spec, &split, 10);
    write(b.path(), &spec, &split, 10);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(m.count, 23);
    assert_eq!(m.shards.iter().map(|s| s.records).collect::<Vec<_>>(), vec![10, 10, 3]);

    let reader = DatasetReader::open(a.path()).unwrap();
    assert_eq!(reader.manifest.spec(), spec);
    let expected = generate_range(&spec, &split, 0..23).unwrap();
    // Out-of-order access exercises position independence.
    for i in [22u64, 0, 11, 10, 9, 5] {
        assert_eq!(reader.get(i).unwrap(), expected[i as usize]);
    }
    assert_eq!(reader.iter().collect::<Result<Vec<_>, _>>().unwrap(), expected);
    assert_eq!(SampleSource::len(&reader), 23);
    assert!(matches!(reader.get(23), Err(Error::Argument(_))));
}

#[test]
fn truncated_shard_names_the_record() {
    let split = corpus();
    let spec = DatasetSpec {
        split: SplitName::Validation,
        level: 4,
        count: 5,
        global_seed: 1,
    };
    let d = tempfile::tempdir().unwrap();
    let m = write(d.path(), &spec, &split, 100);
    let shard = d.path().join(&m.shards[0].file);
    let len = fs::metadata(&shard).unwrap().len();
    fs::OpenOptions::new().write(true).open(&shard).unwrap().set_len(len - 10).unwrap();
    let r = DatasetReader::open(d.path()).unwrap();
    assert!(r.get(3).is_ok());
    match r.get(4) {
        Err(Error::CorruptDataset { record, .. }) => assert_eq!(record, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn newer_versions_are_rejected() {
    let split = corpus();
    let spec = DatasetSpec {
        split: SplitName::Train,
        level: 3,
        count: 2,
        global_seed: 1,
    };
    let d = tempfile::tempdir().unwrap();
    let mut m = write(d.path(), &spec, &split, 100);
    m.format_version += 1;
    fs::write(d.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(DatasetReader::open(d.path()), Err(Error::UnsupportedFormat(_))));

    m.format_version -= 1;
    m.count += 1;
    fs::write(d.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(DatasetReader::open(d.path()), Err(Error::CorruptDataset { .. })));
}

fn randomize(p: &mut ModelParams, rng: &mut CounterRng) {
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        let e = p.entry_mut(&n).unwrap();
        for v in e.value.data_mut().iter_mut().chain(e.m.iter_mut()).chain(e.v.iter_mut()) {
            *v = f32::from_bits(rng.next_u64() as u32 & 0xbfff_ffff);
        }
        e.frozen = rng.below(2) == 0;
    }
    p.step = rng.next_u64() >> 20;
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let mut rng = CounterRng::new(17);
    for trial in 0..100u64 {
        let kind = ModelKind::ALL[rng.index(4)];
        let mut p = init_params(kind, &tiny(), trial).unwrap();
        randomize(&mut p, &mut rng);
        let with_opt = trial % 2 == 0;
        let bytes = encode_checkpoint(kind, &tiny(), &p, with_opt).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!((ck.kind, &ck.config, ck.has_optimizer), (kind, &tiny(), with_opt));
        for (name, e) in p.iter() {
            let got = ck.params.entry(name).unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(got.value.data()), bits(e.value.data()));
            assert_eq!(got.value.shape(), e.value.shape());
            assert_eq!(got.frozen, e.frozen);
            if with_opt {
                assert_eq!(bits(&got.m), bits(&e.m));
                assert_eq!(bits(&got.v), bits(&e.v));
            }
        }
        assert_eq!(ck.params.names().collect::<Vec<_>>(), p.names().collect::<Vec<_>>());
        assert_eq!(encode_checkpoint(kind, &ck.config, &ck.params, with_opt).unwrap(), bytes);
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let p = init_params(ModelKind::SiameseUnet, &tiny(), 3).unwrap();
    let (a, b) = (d.path().join("a.ckpt"), d.path().join("b.ckpt"));
    save_checkpoint(&a, ModelKind::SiameseUnet, &tiny(), &p, true).unwrap();
    let ck = load_checkpoint(&a).unwrap();
    save_checkpoint(&b, ck.kind, &ck.config, &ck.params, true).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn baseline_initializes_masknet_where_possible() {
    let base = init_params(ModelKind::SiameseUnet, &tiny(), 1).unwrap();
    let ck = decode_checkpoint(&encode_checkpoint(ModelKind::SiameseUnet, &tiny(), &base, false).unwrap()).unwrap();
    let mut net = init_params(ModelKind::MaskNet, &tiny(), 2).unwrap();
    let report = ck.load_into(&mut net, false).unwrap();
    assert_eq!(report.loaded.len(), base.len());
    assert!(report.unused.is_empty());
    assert!(!report.fresh.is_empty());
    assert!(report.fresh.iter().all(|n| n.starts_with("crop_enc.") || n.starts_with("decision.")));
    for n in &report.loaded {
        assert_eq!(net.get(n), base.get(n));
    }
    assert!(matches!(ck.load_into(&mut net, true), Err(Error::IncompatibleCheckpoint(_))));
}

#[test]
fn shape_mismatch_lists_offenders() {
    let small = init_params(ModelKind::SiameseUnet, &tiny(), 1).unwrap();
    let ck = decode_checkpoint(&encode_checkpoint(ModelKind::SiameseUnet, &tiny(), &small, false).unwrap()).unwrap();
    let mut wide = init_params(ModelKind::SiameseUnet, &ModelConfig::with_widths([4, 4, 4, 4, 8, 16]), 1).unwrap();
    match ck.load_into(&mut wide, false) {
        Err(Error::IncompatibleCheckpoint(list)) => {
            assert!(list.iter().any(|s| s.starts_with("target_enc.l6.k")));
            assert!(list.iter().any(|s| s.starts_with("dec.l1.k")));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupt_checkpoints_are_unsupported() {
    let p = init_params(ModelKind::PresegDiscriminator, &tiny(), 1).unwrap();
    let good = encode_checkpoint(ModelKind::PresegDiscriminator, &tiny(), &p, false).unwrap();
    let mut bad = good.clone();
    bad[20] = b'#';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedFormat(_))));
    let mut newer = good.clone();
    newer[4] = 2;
    assert!(matches!(decode_checkpoint(&newer), Err(Error::UnsupportedFormat(_))));
    assert!(matches!(decode_checkpoint(b"nope"), Err(Error::UnsupportedFormat(_))));
    assert!(matches!(decode_checkpoint(&good[..good.len() - 4]), Err(Error::UnsupportedFormat(_))));
}

#[test]
fn config_precedence_cli_over_file_over_default() {
    let file = TrainSettings::from_toml("epochs = 30\nbatch_size = 16\nseed = 5\n").unwrap();
    let cli = TrainSettings {
        batch_size: Some(4),
        ..Default::default()
    };
    let r = TrainSettings::default().overlay(file).overlay(cli).resolve(Schedule::baseline()).unwrap();
    assert_eq!(r.schedule.batch_size, 4);
    assert_eq!(r.schedule.epochs, 30);
    assert_eq!(r.seed, 5);
    assert_eq!(r.schedule.initial_lr, Schedule::baseline().initial_lr);
    assert_eq!(r.config, ModelConfig::default());
    assert!(TrainSettings::from_toml("epoch = 3").is_err());
    assert!(TrainSettings::from_toml("micro_batch = 0").unwrap().resolve(Schedule::baseline()).is_err());
}

#[test]
fn published_schedules_survive_config_files() {
    for s in [Schedule::baseline(), Schedule::proposal(), Schedule::decision(), Schedule::oracle()] {
        let settings = TrainSettings {
            epochs: Some(s.epochs),
            batch_size: Some(s.batch_size),
            initial_lr: Some(s.initial_lr),
            lr_halving_epochs: Some(s.lr_halving_epochs.clone()),
            weight_decay: Some(s.weight_decay),
            ..Default::default()
        };
        let text = settings.to_toml().unwrap();
        let back = TrainSettings::from_toml(&text).unwrap();
        assert_eq!(back, settings);
        assert_eq!(back.resolve(Schedule::baseline()).unwrap().schedule, s);
    }
}

#[test]
fn metrics_jsonl_round_trip() {
    let recs = vec![
        MetricRecord {
            step: 1,
            epoch: 0,
            lr: 5e-4,
            loss: 0.7,
            val: None,
        },
        MetricRecord {
            step: 2,
            epoch: 0,
            lr: 5e-4,
            loss: 0.6,
            val: Some(0.25),
        },
    ];
    let text = metrics_to_jsonl(&recs).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(metrics_from_jsonl(&text).unwrap(), recs);
}
