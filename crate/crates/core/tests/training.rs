mod common;

use common::{micro, samples, splits};
use omniseg::model::{init_params, DiscriminatorVariant, ModelConfig, ModelKind};
use omniseg::rng::CounterRng;
use omniseg::tensor::ModelParams;
use omniseg::training::{
    baseline_loss, copy_target_to_crop_encoder, decision_cells, finetune_proposal, masknet_from_baseline,
    nearest_cells, oracle_crop_choice, proposal_cells, train_baseline, train_decision, train_oracle_discriminator,
    Schedule, TrainOptions,
};
use omniseg::Error;
use proptest::prelude::*;

fn tiny_schedule(epochs: usize, batch: usize, lr: f64) -> Schedule {
    Schedule {
        epochs,
        batch_size: batch,
        initial_lr: lr,
        lr_halving_epochs: vec![],
        weight_decay: 1e-9,
    }
}

fn bits(p: &ModelParams, prefix: &str) -> Vec<(String, Vec<u32>)> {
    p.iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, e)| (n.to_string(), e.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn published_schedules() {
    let b = Schedule::baseline();
    assert_eq!((b.epochs, b.batch_size, b.initial_lr, b.weight_decay), (20, 250, 5e-4, 1e-9));
    assert_eq!(b.lr_halving_epochs, [10, 15, 17]);
    let p = Schedule::proposal();
    assert_eq!((p.epochs, p.batch_size, p.initial_lr), (5, 50, 5e-5));
    assert_eq!(p.lr_halving_epochs, [2, 3, 4]);
    let d = Schedule::decision();
    assert_eq!((d.epochs, d.batch_size, d.initial_lr), (5, 250, 2.5e-4));
    assert_eq!(d.lr_halving_epochs, [2, 3, 4]);
    assert_eq!(Schedule::oracle(), b);
    for s in [b, p, d] {
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Schedule>(&json).unwrap(), s);
        s.validate().unwrap();
    }
}

#[test]
fn bad_schedules_are_rejected() {
    let mut s = Schedule::baseline();
    s.lr_halving_epochs = vec![10, 10];
    assert!(s.validate().is_err());
    s.lr_halving_epochs = vec![15, 10];
    assert!(s.validate().is_err());
    s.lr_halving_epochs = vec![20];
    assert!(s.validate().is_err());
    s.lr_halving_epochs = vec![];
    s.batch_size = 0;
    assert!(s.validate().is_err());
}

#[test]
fn lr_at_published_epochs() {
    let s = Schedule::baseline();
    let lrs: Vec<f64> = (0..20).map(|e| s.lr_at_epoch(e)).collect();
    assert_eq!(lrs[9], 5e-4);
    assert_eq!(lrs[10], 2.5e-4);
    assert_eq!(lrs[15], 1.25e-4);
    assert_eq!(lrs[17], 6.25e-5);
    assert_eq!(lrs[19], 6.25e-5);
}

proptest! {
    #[test]
    fn lr_halves_once_per_passed_milestone(
        mut hs in proptest::collection::btree_set(0usize..40, 0..6),
        lr in 1e-6f64..1e-2, e in 0usize..50,
    ) {
        let halvings: Vec<usize> = std::mem::take(&mut hs).into_iter().collect();
        let s = Schedule { epochs: 50, batch_size: 1, initial_lr: lr, lr_halving_epochs: halvings.clone(), weight_decay: 0.0 };
        let passed = halvings.iter().filter(|&&h| h <= e).count() as i32;
        prop_assert!((s.lr_at_epoch(e) - lr * 2f64.powi(-passed)).abs() <= 1e-18);
    }
}

#[test]
fn zero_epochs_leave_initialization() {
    let (train, _, _) = splits();
    let data = samples(&train, 4, 4, 1);
    let (p, run) = train_baseline(&micro(), &data, &tiny_schedule(0, 2, 1e-3), &TrainOptions::with_seed(9)).unwrap();
    assert_eq!(p, init_params(ModelKind::SiameseUnet, &micro(), 9).unwrap());
    assert!(run.metrics.is_empty());
    let empty: Vec<omniseg::scene::SceneSample> = Vec::new();
    assert!(matches!(
        train_baseline(&micro(), &empty, &tiny_schedule(1, 2, 1e-3), &TrainOptions::with_seed(9)),
        Err(Error::Argument(_))
    ));
}

#[test]
fn training_is_reproducible() {
    let (train, _, _) = splits();
    let data = samples(&train, 4, 6, 2);
    let sched = tiny_schedule(2, 3, 1e-3);
    let opts = TrainOptions {
        micro_batch: 2,
        ..TrainOptions::with_seed(4)
    };
    let (a, ra) = train_baseline(&micro(), &data, &sched, &opts).unwrap();
    let (b, rb) = train_baseline(&micro(), &data, &sched, &opts).unwrap();
    assert_eq!(bits(&a, ""), bits(&b, ""));
    assert_eq!(ra, rb);
    assert_eq!(ra.metrics.len(), 4);
    assert!(ra.metrics.windows(2).all(|w| w[0].step < w[1].step));
    assert_ne!(bits(&a, ""), bits(&init_params(ModelKind::SiameseUnet, &micro(), 4).unwrap(), ""));
}

#[test]
fn untrained_loss_is_sane() {
    let (train, _, _) = splits();
    let data = samples(&train, 8, 2, 3);
    let cfg = ModelConfig::default();
    let p = init_params(ModelKind::SiameseUnet, &cfg, 0).unwrap();
    let (loss, _) = baseline_loss(&p, &cfg, &data).unwrap();
    assert!((0.1..=1.5).contains(&loss), "{loss}");
}

/// Enumerates all grid centers and sorts by distance (ties by row, column).
fn nearest_oracle(com: (f64, f64), k: usize) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for i in 0..12 {
        for j in 0..12 {
            let (cx, cy) = (8.0 * j as f64 + 3.5, 8.0 * i as f64 + 3.5);
            all.push(((com.0 - cx).hypot(com.1 - cy), (i, j)));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|x| x.1).collect()
}

#[test]
fn nearest_cells_match_enumeration() {
    let mut got = nearest_cells((48.0, 48.0), 4);
    got.sort();
    assert_eq!(got, vec![(5, 5), (5, 6), (6, 5), (6, 6)]);
    let mut rng = CounterRng::new(1);
    for _ in 0..500 {
        let com = (rng.uniform(0.0, 95.0), rng.uniform(0.0, 95.0));
        let mut a = nearest_cells(com, 4);
        let mut b = nearest_oracle(com, 4);
        a.sort();
        b.sort();
        assert_eq!(a, b, "{com:?}");
    }
}

#[test]
fn proposal_and_decision_cells() {
    let (train, _, _) = splits();
    let mut rng = CounterRng::new(3);
    for s in samples(&train, 8, 20, 5) {
        let com = s.target().com.unwrap();
        let near = nearest_cells((com.0 as f64, com.1 as f64), 4);
        let cells = proposal_cells(&s, &mut rng).unwrap();
        assert_eq!(cells.len(), 8);
        let pos: Vec<_> = cells.iter().filter(|c| c.1).map(|c| c.0).collect();
        let neg: Vec<_> = cells.iter().filter(|c| !c.1).map(|c| c.0).collect();
        assert_eq!(pos, near);
        assert_eq!(neg.len(), 4);
        let mut uniq = neg.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
        assert!(neg.iter().all(|c| !near.contains(c) && c.0 < 12 && c.1 < 12));

        let d = decision_cells(&s, &mut rng).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d[0].1 && near.contains(&d[0].0));
        assert!(d[1..].iter().all(|c| !c.1 && c.0 != d[0].0));
    }
}

#[test]
fn oracle_crops_cover_level_four() {
    let (train, _, _) = splits();
    let mut rng = CounterRng::new(8);
    for s in samples(&train, 4, 20, 6) {
        let picks = oracle_crop_choice(&s, &mut rng);
        let visible = s.instances.iter().filter(|i| !i.visible_mask.is_empty()).count();
        assert_eq!(picks.len(), if visible > 1 { 4 } else { 1 });
        assert_eq!(picks[0], (s.target_index, true));
        assert!(picks[1..].iter().all(|&(i, l)| !l && i != s.target_index));
        if visible == 4 {
            let mut idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
            idx.sort();
            assert_eq!(idx, vec![0, 1, 2, 3]);
        }
    }
}

#[test]
fn masknet_stages() {
    let (train, _, _) = splits();
    let data = samples(&train, 4, 4, 7);
    let cfg = micro();
    let (base, _) = train_baseline(&cfg, &data, &tiny_schedule(1, 2, 1e-3), &TrainOptions::with_seed(1)).unwrap();
    let mut net = masknet_from_baseline(&base, &cfg, 2).unwrap();
    for (n, e) in base.iter() {
        assert_eq!(net.get(n).unwrap(), &e.value);
    }
    let before = net.clone();
    let run = finetune_proposal(&mut net, &cfg, &data, &tiny_schedule(1, 2, 1e-3), &TrainOptions::with_seed(3)).unwrap();
    assert_eq!(run.metrics.len(), 2);
    assert!(run.metrics.iter().all(|m| m.loss.is_finite()));
    assert_ne!(bits(&net, "dec."), bits(&before, "dec."));

    let mut at_zero = net.clone();
    copy_target_to_crop_encoder(&mut at_zero).unwrap();
    for (n, e) in at_zero.iter().filter(|(n, _)| n.starts_with("target_enc.")) {
        let crop = n.replacen("target_enc.", "crop_enc.", 1);
        assert_eq!(at_zero.get(&crop).unwrap(), &e.value);
    }

    let frozen_before: Vec<_> = ["target_enc.", "scene_enc.", "dec.", "match."]
        .iter()
        .flat_map(|p| bits(&net, p))
        .collect();
    let head_before = bits(&at_zero, "decision.");
    let crop_before = bits(&at_zero, "crop_enc.");
    train_decision(&mut net, &cfg, &data, &tiny_schedule(1, 2, 1e-3), &TrainOptions::with_seed(5)).unwrap();
    let frozen_after: Vec<_> = ["target_enc.", "scene_enc.", "dec.", "match."]
        .iter()
        .flat_map(|p| bits(&net, p))
        .collect();
    assert_eq!(frozen_before, frozen_after);
    assert_ne!(bits(&net, "decision."), head_before);
    assert_ne!(bits(&net, "crop_enc."), crop_before);
    assert!(net.iter().all(|(_, e)| !e.frozen));
}

#[test]
fn oracle_discriminators_train() {
    let (train, _, _) = splits();
    let data = samples(&train, 4, 4, 8);
    for v in [DiscriminatorVariant::PreSegmented, DiscriminatorVariant::Cluttered] {
        let (p, run) =
            train_oracle_discriminator(v, &micro(), &data, &tiny_schedule(1, 2, 1e-3), &TrainOptions::with_seed(1))
                .unwrap();
        assert_eq!(run.metrics.len(), 2);
        assert!(p.iter().all(|(n, _)| !n.starts_with("scene_enc.")));
        let init = init_params(run.kind, &micro(), 1).unwrap();
        assert_ne!(bits(&p, "crop_enc."), bits(&init, "crop_enc."));
    }
}
