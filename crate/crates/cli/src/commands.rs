use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context, Result};
use omniseg::eval::{aggregate_report, evaluate_model, EvalOptions, EvalResult};
use omniseg::glyph_synth::{write_corpus, SynthCorpusConfig};
use omniseg::io::{
    atomic_write, load_checkpoint, metrics_to_jsonl, save_checkpoint, Checkpoint, DatasetReader, DatasetWriter,
    TrainSettings, MANIFEST_FILE,
};
use omniseg::model::{init_params, DiscriminatorVariant, ModelKind};
use omniseg::omniglot::{load_corpus, make_splits, Corpus, CorpusSplit, SplitName};
use omniseg::rng::CounterRng;
use omniseg::scene::{generate_range, DatasetSpec, SceneSample};
use omniseg::template::{classify_scene, run_episode, sample_episode, MatchOptions};
use omniseg::tensor::ModelParams;
use omniseg::training::{
    continue_baseline, continue_oracle_discriminator, finetune_proposal, masknet_from_baseline, train_baseline,
    train_decision, train_oracle_discriminator, MetricRecord, SampleSource, Schedule, TrainOptions,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    Cli, Command, CorpusArgs, EvalArgs, EvalModel, GenerateArgs, ReportArgs, SynthCorpusArgs, TemplateMatchArgs,
    TrainArgs, TrainModel,
};

/// Samples generated per parallel batch while writing a dataset.
const GENERATE_CHUNK: u64 = 256;
/// Samples scored by the per-epoch validator.
const VALIDATION_SAMPLES: usize = 1000;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::TemplateMatch(a) => template_match(a),
        Command::Report(a) => report(a),
        Command::SynthCorpus(a) => synth_corpus(a),
    }
}

/// First `n` samples of another source.
struct Prefix<'a> {
    inner: &'a dyn SampleSource,
    n: usize,
}

impl SampleSource for Prefix<'_> {
    fn len(&self) -> usize {
        self.n.min(self.inner.len())
    }
    fn sample(&self, index: usize) -> omniseg::Result<SceneSample> {
        self.inner.sample(index)
    }
}

fn corpus_root(args: &CorpusArgs) -> Result<&Path> {
    args.omniglot_dir.as_deref().ok_or_else(|| {
        anyhow!("no corpus given: pass --omniglot-dir or set OMNIGLOT_DIR (`omniseg synth-corpus` writes a stand-in)")
    })
}

fn load_split(root: &Path, split: SplitName) -> Result<CorpusSplit> {
    let (background, evaluation) = match split {
        SplitName::OneShot => (Vec::new(), load_corpus(root, Corpus::Evaluation)?),
        _ => (load_corpus(root, Corpus::Background)?, Vec::new()),
    };
    let (train, validation, one_shot) = make_splits(&background, &evaluation)?;
    Ok(match split {
        SplitName::Train => train,
        SplitName::Validation => validation,
        SplitName::OneShot => one_shot,
    })
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => atomic_write(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let split: SplitName = a.split.parse()?;
    let spec = DatasetSpec {
        split,
        level: a.level,
        count: a.count,
        global_seed: a.seed,
    };
    spec.validate()?;
    let corpus = load_split(corpus_root(&a.corpus)?, split)?;

    // Build the whole directory beside the target, then move it into place.
    let parent = parent_dir(&a.out);
    fs::create_dir_all(parent)?;
    let staging = tempfile::Builder::new().prefix(".omniseg-generate").tempdir_in(parent)?;
    let mut writer = DatasetWriter::create(staging.path(), &spec, a.shard_records)?;
    let mut start = 0;
    while start < a.count {
        let end = (start + GENERATE_CHUNK).min(a.count);
        for s in generate_range(&spec, &corpus, start..end)? {
            writer.push(&s)?;
        }
        start = end;
    }
    let manifest = writer.finish()?;

    if a.out.exists() {
        let is_dataset = a.out.join(MANIFEST_FILE).is_file();
        let is_empty_dir = a.out.is_dir() && fs::read_dir(&a.out)?.next().is_none();
        if !(is_dataset || is_empty_dir) {
            bail!("{} exists and is not a dataset directory; refusing to replace it", a.out.display());
        }
        fs::remove_dir_all(&a.out)?;
    }
    fs::rename(staging.keep(), &a.out)?;
    eprintln!(
        "wrote {} {} samples at level {} to {} ({} shards)",
        manifest.count,
        split,
        manifest.level,
        a.out.display(),
        manifest.shards.len()
    );
    Ok(())
}

fn train_kind(m: TrainModel) -> ModelKind {
    match m {
        TrainModel::SiameseUnet => ModelKind::SiameseUnet,
        TrainModel::MasknetProposal | TrainModel::MasknetDecision => ModelKind::MaskNet,
        TrainModel::DiscPreseg => ModelKind::PresegDiscriminator,
        TrainModel::DiscClutter => ModelKind::ClutterDiscriminator,
    }
}

fn cli_settings(a: &TrainArgs) -> Result<TrainSettings> {
    let widths = match &a.widths {
        Some(w) => Some(
            <[usize; 6]>::try_from(w.as_slice())
                .map_err(|_| anyhow!("--widths needs exactly 6 values, got {}", w.len()))?,
        ),
        None => None,
    };
    Ok(TrainSettings {
        widths,
        cosine_match: a.cosine_match.then_some(true),
        untargeted: a.untargeted.then_some(true),
        epochs: a.epochs,
        batch_size: a.batch_size,
        initial_lr: a.lr,
        lr_halving_epochs: a.lr_halving_epochs.clone(),
        weight_decay: a.weight_decay,
        seed: a.seed,
        max_steps: a.max_steps,
        micro_batch: a.micro_batch,
    })
}

fn expect_kind(ckpt: &Checkpoint, allowed: &[ModelKind], path: &Path) -> Result<()> {
    if !allowed.contains(&ckpt.kind) {
        let want: Vec<&str> = allowed.iter().map(|k| k.as_str()).collect();
        bail!(
            "model kind mismatch: expected a {} checkpoint, but {} holds {}",
            want.join(" or "),
            path.display(),
            ckpt.kind
        );
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let kind = train_kind(a.model);
    let init = match &a.init {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    if init.is_none() && matches!(a.model, TrainModel::MasknetProposal | TrainModel::MasknetDecision) {
        bail!("--init is required for {:?}", a.model);
    }

    // Precedence: flags, then the config file, then the init checkpoint's
    // architecture, then built-in defaults.
    let from_init = init
        .as_ref()
        .map(|c| TrainSettings {
            widths: Some(c.config.widths),
            cosine_match: Some(c.config.cosine_match),
            untargeted: Some(c.config.untargeted),
            ..Default::default()
        })
        .unwrap_or_default();
    let from_file = match &a.config {
        Some(p) => TrainSettings::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainSettings::default(),
    };
    let default_schedule = match a.model {
        TrainModel::SiameseUnet => Schedule::baseline(),
        TrainModel::MasknetProposal => Schedule::proposal(),
        TrainModel::MasknetDecision => Schedule::decision(),
        TrainModel::DiscPreseg | TrainModel::DiscClutter => Schedule::oracle(),
    };
    let r = from_init.overlay(from_file).overlay(cli_settings(&a)?).resolve(default_schedule)?;
    let cfg = r.config.clone();

    let data = DatasetReader::open(&a.dataset).with_context(|| format!("opening {}", a.dataset.display()))?;
    let val_data = match &a.val_dataset {
        Some(p) => Some(DatasetReader::open(p).with_context(|| format!("opening {}", p.display()))?),
        None => None,
    };
    let val_source = val_data.as_ref().map(|d| Prefix {
        inner: d,
        n: VALIDATION_SAMPLES,
    });
    let validator = |p: &ModelParams| -> omniseg::Result<f64> {
        let src = val_source.as_ref().expect("validator only installed with a validation set");
        let res = evaluate_model(kind, p, &cfg, src, "validation", &EvalOptions::default())?;
        Ok(res.mean_iou.unwrap_or(res.localization_accuracy))
    };
    let log = |m: &MetricRecord| {
        if m.step % 10 == 0 || m.val.is_some() {
            let val = m.val.map(|v| format!(" val {v:.4}")).unwrap_or_default();
            eprintln!("step {} epoch {} lr {:.3e} loss {:.5}{val}", m.step, m.epoch, m.lr, m.loss);
        }
    };
    let opts = TrainOptions {
        seed: r.seed,
        max_steps: r.max_steps,
        micro_batch: r.micro_batch,
        validator: val_source.is_some().then_some(&validator as _),
        on_record: Some(&log),
    };

    let load_same = |ckpt: &Checkpoint| -> Result<ModelParams> {
        let mut p = init_params(kind, &cfg, r.seed)?;
        ckpt.load_into(&mut p, true)?;
        Ok(p)
    };
    let init_path = a.init.as_deref().unwrap_or(Path::new(""));
    let (params, run) = match (a.model, &init) {
        (TrainModel::SiameseUnet, None) => train_baseline(&cfg, &data, &r.schedule, &opts)?,
        (TrainModel::SiameseUnet, Some(c)) => {
            expect_kind(c, &[ModelKind::SiameseUnet], init_path)?;
            let mut p = load_same(c)?;
            let run = continue_baseline(&mut p, &cfg, &data, &r.schedule, &opts)?;
            (p, run)
        }
        (TrainModel::MasknetProposal, Some(c)) => {
            expect_kind(c, &[ModelKind::SiameseUnet, ModelKind::MaskNet], init_path)?;
            let mut p = if c.kind == ModelKind::SiameseUnet {
                masknet_from_baseline(&c.params, &cfg, r.seed)?
            } else {
                load_same(c)?
            };
            let run = finetune_proposal(&mut p, &cfg, &data, &r.schedule, &opts)?;
            (p, run)
        }
        (TrainModel::MasknetDecision, Some(c)) => {
            expect_kind(c, &[ModelKind::MaskNet], init_path)?;
            let mut p = load_same(c)?;
            let run = train_decision(&mut p, &cfg, &data, &r.schedule, &opts)?;
            (p, run)
        }
        (TrainModel::DiscPreseg | TrainModel::DiscClutter, init) => {
            let variant = if a.model == TrainModel::DiscPreseg {
                DiscriminatorVariant::PreSegmented
            } else {
                DiscriminatorVariant::Cluttered
            };
            match init {
                None => train_oracle_discriminator(variant, &cfg, &data, &r.schedule, &opts)?,
                Some(c) => {
                    expect_kind(c, &[kind], init_path)?;
                    let mut p = load_same(c)?;
                    let run = continue_oracle_discriminator(variant, &mut p, &cfg, &data, &r.schedule, &opts)?;
                    (p, run)
                }
            }
        }
        (TrainModel::MasknetProposal | TrainModel::MasknetDecision, None) => unreachable!(),
    };

    save_checkpoint(&a.out, kind, &cfg, &params, true).with_context(|| format!("writing {}", a.out.display()))?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    });
    atomic_write(&metrics_path, metrics_to_jsonl(&run.metrics)?.as_bytes())?;
    let last = run.metrics.last().map(|m| format!("{:.5}", m.loss)).unwrap_or_else(|| "n/a".into());
    eprintln!(
        "trained {} for {} steps (final loss {last}); checkpoint {}, metrics {}",
        kind,
        run.metrics.len(),
        a.out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn eval_kind(m: EvalModel) -> ModelKind {
    match m {
        EvalModel::SiameseUnet => ModelKind::SiameseUnet,
        EvalModel::Masknet => ModelKind::MaskNet,
        EvalModel::DiscPreseg => ModelKind::PresegDiscriminator,
        EvalModel::DiscClutter => ModelKind::ClutterDiscriminator,
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let kind = eval_kind(a.model);
    let ckpt = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    if ckpt.kind != kind {
        bail!(
            "model kind mismatch: --model asks for {kind}, but checkpoint {} holds {}",
            a.ckpt.display(),
            ckpt.kind
        );
    }
    if (a.best_proposal_oracle || a.untargeted) && kind != ModelKind::MaskNet {
        bail!("--best-proposal-oracle and --untargeted apply to masknet only, not {kind}");
    }
    if a.partial_credit && kind != ModelKind::PresegDiscriminator {
        bail!("--partial-credit applies to preseg_discriminator only, not {kind}");
    }
    let mut cfg = ckpt.config.clone();
    cfg.untargeted |= a.untargeted;

    let data = DatasetReader::open(&a.dataset).with_context(|| format!("opening {}", a.dataset.display()))?;
    let source = Prefix {
        inner: &data,
        n: a.limit.unwrap_or(usize::MAX),
    };
    let opts = EvalOptions {
        best_proposal: a.best_proposal_oracle,
        partial_credit: a.partial_credit,
        ..Default::default()
    };
    let mut result = evaluate_model(kind, &ckpt.params, &cfg, &source, data.manifest.split.as_str(), &opts)?;
    if cfg.untargeted {
        result.model.push_str("_untargeted");
    }
    let iou = result.mean_iou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    eprintln!(
        "{} on {} level {}: n {} mean_iou {iou} loc_acc {:.4}",
        result.model, result.split, result.level, result.n_samples, result.localization_accuracy
    );
    write_json(&result, a.out.as_deref())
}

#[derive(Serialize)]
struct SceneMatch {
    index: usize,
    chosen: usize,
    correct: bool,
}

#[derive(Serialize)]
struct MatchSummary {
    mode: &'static str,
    split: Option<String>,
    level: Option<usize>,
    n: usize,
    correct: usize,
    accuracy: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    records: Vec<SceneMatch>,
}

fn template_match(a: TemplateMatchArgs) -> Result<()> {
    let mut summaries = Vec::new();
    if let Some(path) = &a.dataset {
        let data = DatasetReader::open(path).with_context(|| format!("opening {}", path.display()))?;
        let n = a.limit.unwrap_or(usize::MAX).min(data.len() as usize);
        let done = AtomicUsize::new(0);
        let records: Vec<SceneMatch> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<SceneMatch> {
                let s = data.get(i as u64)?;
                let (chosen, correct) = classify_scene(&s, MatchOptions::default())?;
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                if k % 10 == 0 {
                    eprintln!("{k}/{n} scenes");
                }
                Ok(SceneMatch {
                    index: i,
                    chosen,
                    correct,
                })
            })
            .collect::<Result<_>>()?;
        let correct = records.iter().filter(|r| r.correct).count();
        summaries.push(MatchSummary {
            mode: "cluttered",
            split: Some(data.manifest.split.as_str().into()),
            level: Some(data.manifest.level),
            n,
            correct,
            accuracy: correct as f64 / n.max(1) as f64,
            records,
        });
    }
    if let Some(episodes) = a.episodes {
        let split = CorpusSplit::new(SplitName::OneShot, load_corpus(corpus_root(&a.corpus)?, Corpus::Evaluation)?);
        let classes: Vec<Vec<usize>> = (0..split.num_classes()).map(|c| split.class_members(c).to_vec()).collect();
        let mut rng = CounterRng::new(a.seed);
        let eps = (0..episodes)
            .map(|_| sample_episode(&classes, a.ways, &mut rng))
            .collect::<omniseg::Result<Vec<_>>>()?;
        let hits: Vec<bool> = eps
            .par_iter()
            .map(|ep| run_episode(&split.glyphs, ep, MatchOptions::default()))
            .collect::<omniseg::Result<_>>()?;
        let correct = hits.iter().filter(|&&h| h).count();
        summaries.push(MatchSummary {
            mode: if a.ways == 5 { "five_way" } else { "n_way" },
            split: None,
            level: None,
            n: episodes,
            correct,
            accuracy: correct as f64 / episodes.max(1) as f64,
            records: Vec::new(),
        });
    }
    if summaries.is_empty() {
        bail!("template-match needs --dataset and/or --episodes");
    }
    for s in &summaries {
        eprintln!("{}: {}/{} correct ({:.1}%)", s.mode, s.correct, s.n, 100.0 * s.accuracy);
    }
    if summaries.len() == 1 {
        write_json(&summaries[0], a.out.as_deref())
    } else {
        write_json(&summaries, a.out.as_deref())
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "json"));
    files.sort();
    let results = files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<EvalResult>(&text).with_context(|| format!("{} is not an evaluation result", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = aggregate_report(&results)?;
    fs::create_dir_all(&a.out)?;
    atomic_write(&a.out.join("report.csv"), rep.csv.as_bytes())?;
    let mut plot = String::new();
    for s in &rep.series {
        plot.push_str(&serde_json::to_string(s)?);
        plot.push('\n');
    }
    atomic_write(&a.out.join("plot_data.jsonl"), plot.as_bytes())?;
    eprintln!(
        "{} results -> {} (table) and {} series",
        results.len(),
        a.out.join("report.csv").display(),
        rep.series.len()
    );
    Ok(())
}

fn synth_corpus(a: SynthCorpusArgs) -> Result<()> {
    let cfg = SynthCorpusConfig {
        alphabets: a.alphabets,
        characters_per_alphabet: a.characters,
        seed: a.seed,
    };
    write_corpus(&a.out, &cfg)?;
    eprintln!(
        "wrote {} alphabets x {} characters per half to {}",
        a.alphabets,
        a.characters,
        a.out.display()
    );
    Ok(())
}
