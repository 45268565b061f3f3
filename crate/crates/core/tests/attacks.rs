mod common;

use common::small_corpus;
use mmi_core::captioner::{build_model, train, ArchId, CaptionModel, LrSchedule, TrainConfig};
use mmi_core::evalkit::{attack_accuracy, Membership};
use mmi_core::fb_attack::{
    build_attack_dataset, build_attack_mlp, decide, default_attack_config, infer_fb, run_fb_attack, train_attack, FeatureRecord,
};
use mmi_core::mb_attack::{collect_scores, fit_margin_classifier, fit_threshold, infer_mb, MarginClassifier, MarginConfig, MbAttacker, ScoreRecord};
use mmi_core::mfe::{build_mfe, pretrain_mfe, MfeModel, MfeShape, MultiModalFeature};
use mmi_core::seed;
use mmi_core::synthdata::{Family, ImageTextPair};
use mmi_core::textsim::ScoreVector;
use mmi_core::vocab::Vocab;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn rouge_only(w: f64, b: f64) -> MbAttacker {
    MbAttacker::Margin(MarginClassifier {
        weights: [0.0, 0.0, 0.0, w],
        bias: b,
    })
}

fn with_rouge(r: f64) -> ScoreVector {
    ScoreVector {
        bleu1: 0.0,
        bleu2: 0.0,
        bleu3: 0.0,
        rouge_l: r,
    }
}

#[test]
fn infer_mb_sign_rule() {
    let a = rouge_only(1.0, -0.5);
    assert_eq!(infer_mb(&a, &with_rouge(0.7)), Membership::Member);
    assert_eq!(infer_mb(&a, &with_rouge(0.3)), Membership::Nonmember);
    assert_eq!(infer_mb(&a, &with_rouge(0.5)), Membership::Member);
}

#[test]
fn infer_mb_is_scale_invariant() {
    let mut rng = seed::rng(41, "rescale");
    for _ in 0..200 {
        let weights: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let bias = rng.random_range(-2.0..2.0);
        let k = rng.random_range(0.01..100.0);
        let s = ScoreVector::from_array(std::array::from_fn(|_| rng.random()));
        let a = MbAttacker::Margin(MarginClassifier { weights, bias });
        let b = MbAttacker::Margin(MarginClassifier {
            weights: weights.map(|w| w * k),
            bias: bias * k,
        });
        assert_eq!(infer_mb(&a, &s), infer_mb(&b, &s));
    }
}

fn balanced_accuracy(member: &[f64], nonmember: &[f64], t: f64) -> f64 {
    let tp = member.iter().filter(|&&v| v >= t).count() as f64 / member.len() as f64;
    let tn = nonmember.iter().filter(|&&v| v < t).count() as f64 / nonmember.len() as f64;
    (tp + tn) / 2.0
}

#[test]
fn threshold_beats_every_midpoint() {
    let mut rng = seed::rng(42, "resweep");
    for _ in 0..50 {
        let m: Vec<f64> = (0..rng.random_range(1..30)).map(|_| rng.random_range(0.2..1.0)).collect();
        let n: Vec<f64> = (0..rng.random_range(1..30)).map(|_| rng.random_range(0.0..0.8)).collect();
        let fit = fit_threshold(&m, &n).unwrap();
        assert!((balanced_accuracy(&m, &n, fit.threshold) - fit.accuracy).abs() < 1e-12);
        let mut all: Vec<f64> = m.iter().chain(&n).copied().collect();
        all.sort_by(f64::total_cmp);
        for w in all.windows(2) {
            let mid = (w[0] + w[1]) / 2.0;
            assert!(fit.accuracy + 1e-12 >= balanced_accuracy(&m, &n, mid));
        }
    }
}

#[test]
fn threshold_examples() {
    let fit = fit_threshold(&[0.8, 0.9], &[0.1, 0.2]).unwrap();
    assert_eq!((fit.threshold, fit.accuracy), (0.5, 1.0));
    assert_eq!(fit_threshold(&[0.4, 0.6], &[0.4, 0.6]).unwrap().accuracy, 0.5);
    assert_eq!(fit_threshold(&[0.3], &[0.7]).unwrap().accuracy, 0.5);
}

fn synthetic_scores(n: usize, rng: &mut seed::Rng) -> Vec<ScoreRecord> {
    (0..2 * n)
        .map(|i| {
            let member = i < n;
            let base = if member { 0.75 } else { 0.55 };
            let s = ScoreVector::from_array(std::array::from_fn(|_| (base + rng.random_range(-0.25..0.25f64)).clamp(0.0, 1.0)));
            ScoreRecord {
                sample_id: format!("s{i}"),
                scores: s,
                label: Some(Membership::from_bool(member)),
            }
        })
        .collect()
}

#[test]
fn shuffled_labels_give_chance_shadow_accuracy() {
    for s in 0..5 {
        let mut rng = seed::rng(s, "shuffled-margin");
        let mut records = synthetic_scores(300, &mut rng);
        let mut labels: Vec<Option<Membership>> = records.iter().map(|r| r.label).collect();
        labels.shuffle(&mut rng);
        for (r, l) in records.iter_mut().zip(labels) {
            r.label = l;
        }
        let clf = fit_margin_classifier(&records, &MarginConfig { seed: s, ..MarginConfig::default() }).unwrap();
        let attacker = MbAttacker::Margin(clf);
        let preds: Vec<Membership> = records.iter().map(|r| infer_mb(&attacker, &r.scores)).collect();
        let truths: Vec<Membership> = records.iter().map(|r| r.label.unwrap()).collect();
        let acc = attack_accuracy(&preds, &truths).unwrap();
        assert!((0.4..=0.6).contains(&acc), "seed {s}: {acc}");
    }
}

#[test]
fn fb_decision_rule() {
    assert_eq!(decide(0.7), Membership::Member);
    assert_eq!(decide(0.3), Membership::Nonmember);
    assert_eq!(decide(0.5), Membership::Nonmember);
    // Any monotone map that keeps 0.5 fixed leaves the label unchanged.
    let squash = |p: f64| {
        let logit = (p / (1.0 - p)).ln();
        1.0 / (1.0 + (-3.0 * logit).exp())
    };
    for i in 1..100 {
        let p = i as f64 / 100.0;
        assert_eq!(decide(p), decide(squash(p)));
    }
}

fn blobs(n: usize, sep: f64, seed_: u64) -> Vec<FeatureRecord> {
    let mut rng = seed::rng(seed_, "fb-blobs");
    (0..2 * n)
        .map(|i| {
            let member = i % 2 == 0;
            let shift = if member { sep } else { 0.0 };
            FeatureRecord {
                sample_id: format!("b{i}"),
                feature: MultiModalFeature((0..8).map(|_| shift + rng.random_range(-1.0..1.0)).collect()),
                label: Some(Membership::from_bool(member)),
            }
        })
        .collect()
}

fn mlp_accuracy(train_set: &[FeatureRecord], eval_set: &[FeatureRecord], seed_: u64) -> f64 {
    let cfg = TrainConfig {
        epochs: 60,
        seed: seed_,
        ..default_attack_config()
    };
    let (mlp, _) = train_attack(build_attack_mlp(8, seed_).unwrap(), train_set, &cfg).unwrap();
    let preds: Vec<Membership> = eval_set.iter().map(|r| infer_fb(&mlp, &r.feature).1).collect();
    let truths: Vec<Membership> = eval_set.iter().map(|r| r.label.unwrap()).collect();
    attack_accuracy(&preds, &truths).unwrap()
}

#[test]
fn attack_mlp_training_is_deterministic() {
    let data = blobs(100, 1.0, 1);
    let cfg = TrainConfig {
        epochs: 20,
        seed: 4,
        ..default_attack_config()
    };
    let (a, ha) = train_attack(build_attack_mlp(8, 4).unwrap(), &data, &cfg).unwrap();
    let (b, hb) = train_attack(build_attack_mlp(8, 4).unwrap(), &data, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert!(ha.last().unwrap() < &ha[0]);
}

#[test]
fn shuffled_label_attack_model_is_at_chance() {
    let eval_set = blobs(300, 0.5, 99);
    let mut accs = Vec::new();
    for s in 0..5 {
        let mut train_set = blobs(300, 0.5, s);
        let mut labels: Vec<Option<Membership>> = train_set.iter().map(|r| r.label).collect();
        labels.shuffle(&mut seed::rng(s, "shuffle"));
        for (r, l) in train_set.iter_mut().zip(labels) {
            r.label = l;
        }
        accs.push(mlp_accuracy(&train_set, &eval_set, s));
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "{accs:?}");
    // The same data with true labels is learnable.
    assert!(mlp_accuracy(&blobs(300, 0.5, 0), &eval_set, 0) > 0.6);
}

fn public_pairs() -> Vec<ImageTextPair> {
    small_corpus(Family::F, 100, 51)
}

fn mfe_for(pairs: &[ImageTextPair]) -> MfeModel {
    let vocab = Vocab::from_captions(pairs.iter().map(|p| p.caption()));
    build_mfe(vocab, MfeShape::default(), 8).unwrap()
}

fn mean_sq(mfe: &MfeModel, pairs: impl Iterator<Item = (usize, usize)>, data: &[ImageTextPair]) -> f64 {
    let v: Vec<f64> = pairs
        .map(|(i, j)| mfe.extract_feature(&data[i].image, data[j].caption()).squared_norm())
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn mfe_pretraining_aligns_true_pairs() {
    let pairs = public_pairs();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 16,
        learning_rate: 0.05,
        lr_schedule: LrSchedule::Cosine,
        seed: 2,
        ..TrainConfig::default()
    };
    let (mfe, history) = pretrain_mfe(mfe_for(&pairs), &pairs, &cfg).unwrap();
    assert!(history[99] < history[0], "{} -> {}", history[0], history[99]);
    let n = pairs.len();
    let matched = mean_sq(&mfe, (0..n).map(|i| (i, i)), &pairs);
    let mismatched = mean_sq(&mfe, (0..n).map(|i| (i, (i + 37) % n)), &pairs);
    assert!(matched < mismatched, "matched {matched} mismatched {mismatched}");

    let short = TrainConfig { epochs: 5, ..cfg };
    let (_, h1) = pretrain_mfe(mfe_for(&pairs), &pairs, &short).unwrap();
    let (_, h2) = pretrain_mfe(mfe_for(&pairs), &pairs, &short).unwrap();
    assert_eq!(h1, h2);
}

fn small_captioner(pairs: &[ImageTextPair]) -> CaptionModel {
    let vocab = Vocab::from_captions(pairs.iter().map(|p| p.caption()));
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 0.15,
        lr_schedule: LrSchedule::Cosine,
        seed: 1,
        ..TrainConfig::default()
    };
    train(build_model(ArchId::R, vocab, 1).unwrap(), pairs, &cfg).unwrap().0
}

#[test]
fn dataset_and_report_sizes() {
    let pairs = public_pairs();
    let (members, nonmembers) = (&pairs[..20], &pairs[20..35]);
    let shadow = small_captioner(members);
    let mfe = mfe_for(&pairs);

    assert!(collect_scores(&shadow, &[], Some(Membership::Member), 12).unwrap().is_empty());
    let s1 = collect_scores(&shadow, members, Some(Membership::Member), 12).unwrap();
    assert_eq!(s1, collect_scores(&shadow, members, Some(Membership::Member), 12).unwrap());

    let data = build_attack_dataset(&mfe, &shadow, members, nonmembers, 12);
    assert_eq!(data.len(), members.len() + nonmembers.len());
    assert_eq!(data, build_attack_dataset(&mfe, &shadow, members, nonmembers, 12));
    assert_eq!(data.iter().filter(|r| r.label == Some(Membership::Member)).count(), members.len());

    let mlp = build_attack_mlp(mfe.feature_dim(), 3).unwrap();
    let test: Vec<ImageTextPair> = pairs[40..52].to_vec();
    let truths: Vec<Membership> = (0..test.len()).map(|i| Membership::from_bool(i < 6)).collect();
    let (features, rows) = run_fb_attack(&mfe, &shadow, &mlp, &test, &truths, 12).unwrap();
    assert_eq!(rows.len(), test.len());
    assert_eq!(features.len(), test.len());
    assert!(run_fb_attack(&mfe, &shadow, &mlp, &test, &truths[1..], 12).is_err());
}
