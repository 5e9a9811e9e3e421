mod common;

use common::{micro, samples, splits};
use omniseg::eval::{
    aggregate_report, evaluate_model, iou, localization_hit, mask_iou, EvalOptions, EvalResult, CSV_HEADER,
    IOU_THRESHOLD, LOC_RADIUS,
};
use omniseg::model::{init_params, ModelKind};
use omniseg::raster::Mask;
use omniseg::rng::CounterRng;
use omniseg::scene::PUBLISHED_LEVELS;
use omniseg::Error;

fn block(x0: usize, y0: usize, w: usize, h: usize) -> Mask {
    Mask::from_fn(96, 96, |x, y| (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y))
}

fn hard(m: &Mask) -> Vec<f32> {
    m.iter().map(|b| if b { 1.0 } else { 0.0 }).collect()
}

#[test]
fn iou_examples() {
    let t = block(10, 10, 5, 7);
    assert_eq!(iou(&hard(&t), &t, IOU_THRESHOLD).unwrap(), 1.0);
    assert_eq!(iou(&hard(&block(50, 50, 4, 4)), &t, IOU_THRESHOLD).unwrap(), 0.0);
    let a = block(20, 20, 2, 2);
    let b = block(21, 20, 2, 2);
    assert!((iou(&hard(&a), &b, IOU_THRESHOLD).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&vec![0.0; 9216], &t, IOU_THRESHOLD).unwrap(), 0.0);
    assert!(matches!(iou(&hard(&t), &Mask::new(96, 96), 0.3), Err(Error::Argument(_))));
    assert!(matches!(iou(&[0.5; 10], &t, 0.3), Err(Error::Shape(_))));
    // Threshold is inclusive.
    let soft: Vec<f32> = hard(&t).iter().map(|&v| v * 0.3).collect();
    assert_eq!(iou(&soft, &t, 0.3).unwrap(), 1.0);
}

#[test]
fn iou_matches_pixel_counting_oracle() {
    let mut rng = CounterRng::new(10);
    for _ in 0..10_000 {
        let (dp, dt) = (rng.next_f64(), rng.next_f64());
        let pred: Vec<f32> = (0..256).map(|_| rng.next_f64() as f32 * (dp as f32 + 0.5)).collect();
        let mut truth = Mask::from_fn(16, 16, |_, _| rng.next_f64() < dt);
        if truth.is_empty() {
            truth.set(rng.index(16), rng.index(16), true);
        }
        let (mut inter, mut uni) = (0u32, 0u32);
        for y in 0..16 {
            for x in 0..16 {
                let p = pred[y * 16 + x] >= 0.3;
                let t = truth.get(x, y);
                inter += (p && t) as u32;
                uni += (p || t) as u32;
            }
        }
        assert_eq!(iou(&pred, &truth, 0.3).unwrap(), inter as f64 / uni as f64);
    }
}

#[test]
fn localization_radius_is_inclusive_and_symmetric() {
    assert!(localization_hit((10.0, 10.0), (10.0, 10.0), LOC_RADIUS));
    assert!(localization_hit((0.0, 0.0), (3.0, 4.0), LOC_RADIUS));
    assert!(!localization_hit((0.0, 0.0), (7.0, 0.0), LOC_RADIUS));
    let mut rng = CounterRng::new(2);
    for _ in 0..1000 {
        let a = (rng.uniform(0.0, 96.0), rng.uniform(0.0, 96.0));
        let b = (a.0 + rng.uniform(-8.0, 8.0), a.1 + rng.uniform(-8.0, 8.0));
        assert_eq!(localization_hit(a, b, 5.0), localization_hit(b, a, 5.0));
    }
}

#[test]
fn siamese_evaluation_aggregates_records() {
    let (train, _, _) = splits();
    let data = samples(&train, 4, 5, 3);
    let p = init_params(ModelKind::SiameseUnet, &micro(), 1).unwrap();
    let opts = EvalOptions {
        batch: 2,
        ..Default::default()
    };
    let r = evaluate_model(ModelKind::SiameseUnet, &p, &micro(), &data, "train", &opts).unwrap();
    assert_eq!((r.n_samples, r.level, r.model.as_str()), (5, 4, "siamese_unet"));
    assert_eq!(r.records.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    let mean: f64 = r.records.iter().map(|x| x.iou.unwrap()).sum::<f64>() / 5.0;
    assert!((r.mean_iou.unwrap() - mean).abs() < 1e-12);
    let acc = r.records.iter().filter(|x| x.loc_hit).count() as f64 / 5.0;
    assert_eq!(r.localization_accuracy, acc);
    let again = evaluate_model(ModelKind::SiameseUnet, &p, &micro(), &data, "train", &EvalOptions::default()).unwrap();
    assert_eq!(again.records, r.records);
}

#[test]
fn mismatched_model_is_rejected() {
    let (train, _, _) = splits();
    let data = samples(&train, 4, 2, 3);
    let p = init_params(ModelKind::PresegDiscriminator, &micro(), 1).unwrap();
    let err = evaluate_model(ModelKind::SiameseUnet, &p, &micro(), &data, "train", &EvalOptions::default());
    assert!(matches!(err, Err(Error::Argument(_))));
}

#[test]
fn presegmented_oracle_with_only_the_target_visible_scores_one() {
    let (train, _, _) = splits();
    let mut data = samples(&train, 4, 4, 9);
    for s in &mut data {
        let t = s.target_index;
        for (i, inst) in s.instances.iter_mut().enumerate() {
            if i != t {
                inst.visible_mask = Mask::new(96, 96);
                inst.com = None;
            }
        }
    }
    let p = init_params(ModelKind::PresegDiscriminator, &micro(), 1).unwrap();
    let r = evaluate_model(ModelKind::PresegDiscriminator, &p, &micro(), &data, "x", &EvalOptions::default()).unwrap();
    assert_eq!(r.mean_iou, Some(1.0));
    assert_eq!(r.localization_accuracy, 1.0);

    let p = init_params(ModelKind::ClutterDiscriminator, &micro(), 1).unwrap();
    let r = evaluate_model(ModelKind::ClutterDiscriminator, &p, &micro(), &data, "x", &EvalOptions::default()).unwrap();
    assert_eq!(r.mean_iou, None);
    assert!(r.records.iter().all(|x| x.iou.is_none()));
}

#[test]
fn presegmented_partial_credit() {
    let (train, _, _) = splits();
    let data = samples(&train, 8, 6, 4);
    let p = init_params(ModelKind::PresegDiscriminator, &micro(), 2).unwrap();
    let strict = evaluate_model(ModelKind::PresegDiscriminator, &p, &micro(), &data, "x", &EvalOptions::default()).unwrap();
    let partial = EvalOptions {
        partial_credit: true,
        ..Default::default()
    };
    let soft = evaluate_model(ModelKind::PresegDiscriminator, &p, &micro(), &data, "x", &partial).unwrap();
    for ((a, b), s) in strict.records.iter().zip(&soft.records).zip(&data) {
        let chosen = a.winner.unwrap();
        if chosen == s.target_index {
            assert_eq!((a.iou, b.iou), (Some(1.0), Some(1.0)));
        } else {
            assert_eq!(a.iou, Some(0.0));
            assert_eq!(b.iou.unwrap(), mask_iou(&s.instances[chosen].visible_mask, &s.seg_map).unwrap());
        }
    }
}

#[test]
fn best_proposal_dominates_decision() {
    let (train, _, _) = splits();
    let data = samples(&train, 4, 3, 5);
    let p = init_params(ModelKind::MaskNet, &micro(), 3).unwrap();
    let opts = EvalOptions {
        best_proposal: true,
        ..Default::default()
    };
    let r = evaluate_model(ModelKind::MaskNet, &p, &micro(), &data, "x", &opts).unwrap();
    assert_eq!(r.model, "masknet_best_proposal");
    for rec in &r.records {
        assert!(rec.best_proposal_iou.unwrap() >= rec.decided_iou.unwrap());
        assert_eq!(rec.iou, rec.best_proposal_iou);
    }
}

fn result(model: &str, level: usize, iou: f64) -> EvalResult {
    EvalResult {
        model: model.into(),
        split: "one_shot".into(),
        level,
        n_samples: 10,
        mean_iou: Some(iou),
        localization_accuracy: 0.5,
        records: vec![],
    }
}

#[test]
fn reports() {
    let r = aggregate_report(&[result("siamese_unet", 4, 0.9)]).unwrap();
    assert_eq!(r.csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(r.csv.lines().count(), 2);
    assert_eq!(r.csv.lines().nth(1).unwrap(), "siamese_unet,one_shot,4,10,0.900000,0.500000");

    let mut all = Vec::new();
    for m in ["siamese_unet", "masknet"] {
        for (k, &l) in PUBLISHED_LEVELS.iter().enumerate() {
            all.push(result(m, l, 1.0 - k as f64 / 10.0));
        }
    }
    let r = aggregate_report(&all).unwrap();
    assert_eq!(r.csv.lines().count(), 15);
    assert_eq!(r.series.len(), 4);
    for s in &r.series {
        assert_eq!(s.x, PUBLISHED_LEVELS.to_vec());
        assert_eq!(s.y.len(), 7);
    }

    assert!(matches!(aggregate_report(&[]), Err(Error::Argument(_))));
    all.push(result("masknet", 8, 0.1));
    assert!(matches!(aggregate_report(&all), Err(Error::Argument(_))));
}
