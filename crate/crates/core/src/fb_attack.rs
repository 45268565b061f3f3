//! Feature-based attack: a small perceptron classifies the image/text
//! feature difference of a (query image, generated caption) pair as member
//! or non-member. Trained on a shadow model's outputs.

use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;

use crate::captioner::{CaptionModel, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evalkit::{Membership, ReportRow};
use crate::mfe::{MfeModel, MultiModalFeature};
use crate::nn::{log_sigmoid, relu_backward, relu_inplace, sigmoid, Init, Linear, Params, ParamsBuilder};
use crate::optim::check_divergence;
use crate::seed;
use crate::synthdata::ImageTextPair;
use crate::vocab::Vocab;

const KIND: &str = "attack-mlp";
pub const HIDDEN: [usize; 2] = [256, 20];
/// Probabilities are kept this far from 0 and 1.
pub const PROB_EPS: f64 = 1e-7;

/// `d -> 256 -> 20 -> 1` with ReLU and a logistic output. Inputs are
/// standardized with statistics fixed at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackMlp {
    pub input_dim: usize,
    pub params: Params,
    /// Per-feature shift and scale applied before the first layer.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    layers: [Linear; 3],
}

pub fn build_attack_mlp(input_dim: usize, seed: u64) -> Result<AttackMlp> {
    if input_dim == 0 {
        return Err(Error::InvalidArgument("attack input dimension must be >= 1".into()));
    }
    let mut rng = seed::rng(seed, "attack-mlp-init");
    let mut b = ParamsBuilder::new(&mut rng);
    let [h1, h2] = HIDDEN;
    let layers = [
        Linear::alloc(&mut b, "l1", input_dim, h1, Init::he(input_dim)),
        Linear::alloc(&mut b, "l2", h1, h2, Init::he(h1)),
        Linear::alloc(&mut b, "l3", h2, 1, Init::lecun(h2)),
    ];
    Ok(AttackMlp {
        input_dim,
        params: b.finish(),
        mean: vec![0.0; input_dim],
        scale: vec![1.0; input_dim],
        layers,
    })
}

struct Cache {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl AttackMlp {
    fn standardize(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.input_dim, "feature dimension");
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn forward(&self, p: &[f64], x: Vec<f64>) -> (f64, Cache) {
        let [l1, l2, l3] = &self.layers;
        let mut h1 = vec![0.0; l1.n_out];
        l1.forward(p, &x, &mut h1);
        relu_inplace(&mut h1);
        let mut h2 = vec![0.0; l2.n_out];
        l2.forward(p, &h1, &mut h2);
        relu_inplace(&mut h2);
        let mut out = [0.0];
        l3.forward(p, &h2, &mut out);
        (out[0], Cache { x, h1, h2 })
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, z: &[f64]) -> f64 {
        self.forward(&self.params.values, self.standardize(z)).0
    }

    /// Member probability, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn prob(&self, z: &[f64]) -> f64 {
        sigmoid(self.logit(z)).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Binary cross-entropy of one standardized sample at parameters `p`,
    /// adding its gradient into `grad` when given.
    pub fn sample_loss(&self, p: &[f64], x: &[f64], member: bool, grad: Option<&mut [f64]>) -> f64 {
        let (logit, cache) = self.forward(p, x.to_vec());
        let y = if member { 1.0 } else { 0.0 };
        let loss = -(y * log_sigmoid(logit) + (1.0 - y) * log_sigmoid(-logit));
        if let Some(g) = grad {
            let [l1, l2, l3] = &self.layers;
            let dout = [sigmoid(logit) - y];
            let mut dh2 = vec![0.0; l3.n_in];
            l3.backward(p, &cache.h2, &dout, g, Some(&mut dh2));
            relu_backward(&cache.h2, &mut dh2);
            let mut dh1 = vec![0.0; l2.n_in];
            l2.backward(p, &cache.h1, &dh2, g, Some(&mut dh1));
            relu_backward(&cache.h1, &mut dh1);
            l1.backward(p, &cache.x, &dh1, g, None);
        }
        loss
    }

    fn list(v: &[f64]) -> String {
        v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: KIND.into(),
            meta: [
                ("input_dim".to_owned(), self.input_dim.to_string()),
                ("mean".to_owned(), Self::list(&self.mean)),
                ("scale".to_owned(), Self::list(&self.scale)),
            ]
            .into(),
            vocab: Vocab::from_captions(std::iter::empty()),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let bad = |k: &str| Error::Checkpoint(format!("bad `{k}` entry"));
        let dim: usize = ckpt.meta("input_dim")?.parse().map_err(|_| bad("input_dim"))?;
        let parse = |k: &str| -> Result<Vec<f64>> {
            let v: Vec<f64> = ckpt.meta(k)?.split(',').map(|x| x.parse().map_err(|_| bad(k))).collect::<Result<_>>()?;
            if v.len() != dim {
                return Err(bad(k));
            }
            Ok(v)
        };
        let mean = parse("mean")?;
        let scale = parse("scale")?;
        let mut mlp = build_attack_mlp(dim, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.expect_layout(KIND, &mlp.params)?;
        mlp.params.values = ckpt.params.values;
        mlp.mean = mean;
        mlp.scale = scale;
        Ok(mlp)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub feature: MultiModalFeature,
    pub label: Option<Membership>,
}

/// Feature of `(image, caption generated by model)` for every pair.
pub fn query_features(mfe: &MfeModel, model: &CaptionModel, pairs: &[ImageTextPair], label: Option<Membership>, max_len: usize) -> Vec<FeatureRecord> {
    pairs
        .iter()
        .map(|pair| {
            let generated = model.caption(&pair.image, max_len);
            FeatureRecord {
                sample_id: pair.id.clone(),
                feature: mfe.extract_feature(&pair.image, &generated),
                label,
            }
        })
        .collect()
}

/// Labelled training set for the attack model, built from the shadow
/// model's captions of its own members and non-members.
pub fn build_attack_dataset(
    mfe: &MfeModel,
    shadow: &CaptionModel,
    members: &[ImageTextPair],
    nonmembers: &[ImageTextPair],
    max_len: usize,
) -> Vec<FeatureRecord> {
    let mut out = query_features(mfe, shadow, members, Some(Membership::Member), max_len);
    out.extend(query_features(mfe, shadow, nonmembers, Some(Membership::Nonmember), max_len));
    out
}

pub fn features_csv(records: &[FeatureRecord]) -> String {
    let dim = records.first().map_or(0, |r| r.feature.0.len());
    let mut s = String::from("sample_id");
    for k in 1..=dim {
        write!(s, ",z_{k}").unwrap();
    }
    s.push_str(",label\n");
    for r in records {
        s.push_str(&r.sample_id);
        for v in &r.feature.0 {
            write!(s, ",{v}").unwrap();
        }
        match r.label {
            Some(l) => writeln!(s, ",{}", u8::from(l.is_member())).unwrap(),
            None => s.push_str(",\n"),
        }
    }
    s
}

pub fn parse_features_csv(text: &str) -> Result<Vec<FeatureRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("features", "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let dim = cols.len().saturating_sub(2);
    let header_ok = cols.len() >= 2
        && cols[0] == "sample_id"
        && cols[cols.len() - 1] == "label"
        && (1..=dim).all(|k| cols[k] == format!("z_{k}"));
    if !header_ok {
        return Err(Error::format("features", format!("bad header `{header}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(format!("features line {}", i + 2), format!("`{line}`"));
        if f.len() != dim + 2 {
            return Err(bad());
        }
        let feature = f[1..=dim].iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let last = f[dim + 1];
        out.push(FeatureRecord {
            sample_id: f[0].to_owned(),
            feature: MultiModalFeature(feature),
            label: if last.is_empty() { None } else { Some(last.parse().map_err(|_| bad())?) },
        });
    }
    Ok(out)
}

/// Default optimizer settings for the attack model.
pub fn default_attack_config() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 32,
        learning_rate: 0.01,
        ..TrainConfig::default()
    }
}

/// Fits the attack model by minimizing binary cross-entropy. Returns the
/// model and per-epoch mean loss.
pub fn train_attack(mut mlp: AttackMlp, dataset: &[FeatureRecord], cfg: &TrainConfig) -> Result<(AttackMlp, Vec<f64>)> {
    cfg.validate()?;
    let mut labels = Vec::with_capacity(dataset.len());
    for r in dataset {
        if r.feature.0.len() != mlp.input_dim {
            return Err(Error::LengthMismatch {
                left: r.feature.0.len(),
                right: mlp.input_dim,
            });
        }
        let l = r.label.ok_or_else(|| Error::InvalidArgument(format!("record {} has no label", r.sample_id)))?;
        labels.push(l.is_member());
    }
    if !labels.contains(&true) || !labels.contains(&false) {
        return Err(Error::SingleClass);
    }
    let n = dataset.len() as f64;
    let d = mlp.input_dim;
    mlp.mean = (0..d).map(|k| dataset.iter().map(|r| r.feature.0[k]).sum::<f64>() / n).collect();
    mlp.scale = (0..d)
        .map(|k| {
            let var = dataset.iter().map(|r| (r.feature.0[k] - mlp.mean[k]).powi(2)).sum::<f64>() / n;
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let xs: Vec<Vec<f64>> = dataset.iter().map(|r| mlp.standardize(&r.feature.0)).collect();
    let initial_loss = (0..xs.len())
        .map(|i| mlp.sample_loss(&mlp.params.values, &xs[i], labels[i], None))
        .sum::<f64>()
        / n;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = seed::rng(cfg.seed, "attack-order");
    let mut opt = cfg.optimizer();
    let mut params = std::mem::take(&mut mlp.params.values);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        opt.lr = cfg.lr_at(epoch);
        let loss = opt.epoch(&mut params, &order, cfg.batch_size, |p, i, g| mlp.sample_loss(p, &xs[i], labels[i], Some(g)));
        check_divergence(epoch, loss, initial_loss, &params)?;
        debug!("attack epoch {epoch}: loss {loss:.5}");
        history.push(loss);
    }
    mlp.params.values = params;
    mlp.params.snap_to_f32();
    Ok((mlp, history))
}

/// Decision rule: member iff `prob > 0.5`.
pub fn decide(prob: f64) -> Membership {
    Membership::from_bool(prob > 0.5)
}

/// Member probability and decision.
pub fn infer_fb(mlp: &AttackMlp, feature: &MultiModalFeature) -> (f64, Membership) {
    let p = mlp.prob(&feature.0);
    (p, decide(p))
}

/// Queries `target` with each test image and classifies the resulting
/// features. `truths` gives the ground-truth label of each pair.
pub fn run_fb_attack(
    mfe: &MfeModel,
    target: &CaptionModel,
    mlp: &AttackMlp,
    test_pairs: &[ImageTextPair],
    truths: &[Membership],
    max_len: usize,
) -> Result<(Vec<FeatureRecord>, Vec<ReportRow>)> {
    if test_pairs.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: test_pairs.len(),
            right: truths.len(),
        });
    }
    let mut features = Vec::with_capacity(test_pairs.len());
    let mut rows = Vec::with_capacity(test_pairs.len());
    for (pair, &truth) in test_pairs.iter().zip(truths) {
        let mut rec = query_features(mfe, target, std::slice::from_ref(pair), Some(truth), max_len).remove(0);
        let (prob, pred) = infer_fb(mlp, &rec.feature);
        rows.push(ReportRow {
            sample_id: pair.id.clone(),
            value: prob,
            pred,
            truth,
        });
        rec.label = Some(truth);
        features.push(rec);
    }
    Ok((features, rows))
}
