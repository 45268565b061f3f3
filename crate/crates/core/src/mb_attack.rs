//! Metric-based attack: membership is decided from the similarity scores
//! between a model's generated caption and the ground-truth captions, either
//! by thresholding one score or by a linear soft-margin classifier over all
//! four.

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::captioner::CaptionModel;
use crate::error::{Error, Result};
use crate::evalkit::Membership;
use crate::seed;
use crate::synthdata::ImageTextPair;
use crate::textsim::{score_against_references, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub scores: ScoreVector,
    pub label: Option<Membership>,
}

/// Captions every image with `model` and scores the result against the
/// pair's reference captions. Samples whose generated caption is empty are
/// skipped with a warning.
pub fn collect_scores(model: &CaptionModel, pairs: &[ImageTextPair], label: Option<Membership>, max_len: usize) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let generated = model.caption(&pair.image, max_len);
        if generated.is_empty() {
            warn!("empty caption for {}, skipping", pair.id);
            continue;
        }
        out.push(ScoreRecord {
            sample_id: pair.id.clone(),
            scores: score_against_references(&generated, &pair.captions)?,
            label,
        });
    }
    Ok(out)
}

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut s = String::from("sample_id,bleu1,bleu2,bleu3,rougeL,label\n");
    for r in records {
        let v = r.scores;
        let label = r.label.map_or("unknown", Membership::as_str);
        writeln!(s, "{},{},{},{},{},{label}", r.sample_id, v.bleu1, v.bleu2, v.bleu3, v.rouge_l).unwrap();
    }
    s
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("sample_id,bleu1,bleu2,bleu3,rougeL,label") {
        return Err(Error::format("scores", "bad header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(format!("scores line {}", i + 2), format!("`{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        let mut v = [0.0; ScoreVector::DIM];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = f[k + 1].parse().map_err(|_| bad())?;
        }
        out.push(ScoreRecord {
            sample_id: f[0].to_owned(),
            scores: ScoreVector::from_array(v),
            label: if f[5] == "unknown" { None } else { Some(f[5].parse().map_err(|_| bad())?) },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub threshold: f64,
    /// Balanced accuracy on the fitting data.
    pub accuracy: f64,
}

fn balanced_accuracy(t: f64, member: &[f64], nonmember: &[f64]) -> f64 {
    let tpr = member.iter().filter(|&&s| s >= t).count() as f64 / member.len() as f64;
    let tnr = nonmember.iter().filter(|&&s| s < t).count() as f64 / nonmember.len() as f64;
    (tpr + tnr) / 2.0
}

/// Threshold `t` maximizing balanced accuracy of the rule `score >= t ⇒
/// member`. Candidates are the midpoints between adjacent distinct scores
/// plus one value below and one above all scores; ties go to the smallest
/// `t`.
pub fn fit_threshold(member: &[f64], nonmember: &[f64]) -> Result<ThresholdFit> {
    if member.is_empty() || nonmember.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut all: Vec<f64> = member.iter().chain(nonmember).copied().collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = vec![all[0] - 1.0];
    candidates.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(all[all.len() - 1] + 1.0);
    let mut best = ThresholdFit {
        threshold: candidates[0],
        accuracy: balanced_accuracy(candidates[0], member, nonmember),
    };
    for &t in &candidates[1..] {
        let acc = balanced_accuracy(t, member, nonmember);
        if acc > best.accuracy {
            best = ThresholdFit { threshold: t, accuracy: acc };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    /// Soft-margin strength; the penalty on the weights is `||w||^2 / c`.
    pub c: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            c: 10.0,
            epochs: 300,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginClassifier {
    pub weights: [f64; ScoreVector::DIM],
    pub bias: f64,
}

impl MarginClassifier {
    pub fn decision_value(&self, s: &ScoreVector) -> f64 {
        self.weights.iter().zip(s.as_array()).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }
}

fn margin_objective(w: &[f64; 4], b: f64, xs: &[[f64; 4]], ys: &[f64], c: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let f: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
            (1.0 - y * f).max(0.0)
        })
        .sum();
    hinge / xs.len() as f64 + w.iter().map(|v| v * v).sum::<f64>() / c
}

/// Linear classifier trained by stochastic subgradient descent on the mean
/// hinge loss plus `||w||^2 / c`. Returns the iterate with the lowest
/// objective; deterministic for a given seed.
pub fn fit_margin_classifier(records: &[ScoreRecord], cfg: &MarginConfig) -> Result<MarginClassifier> {
    if !(cfg.c > 0.0) || !(cfg.learning_rate > 0.0) || cfg.epochs == 0 {
        return Err(Error::InvalidArgument(format!("bad margin classifier config {cfg:?}")));
    }
    let mut xs = Vec::with_capacity(records.len());
    let mut ys = Vec::with_capacity(records.len());
    for r in records {
        let label = r.label.ok_or_else(|| Error::InvalidArgument(format!("record {} has no label", r.sample_id)))?;
        xs.push(r.scores.as_array());
        ys.push(if label.is_member() { 1.0 } else { -1.0 });
    }
    if !ys.contains(&1.0) || !ys.contains(&-1.0) {
        return Err(Error::SingleClass);
    }
    let n = xs.len();
    let mut rng = seed::rng(cfg.seed, "margin-order");
    let mut order: Vec<usize> = (0..n).collect();
    let (mut w, mut b) = ([0.0f64; 4], 0.0f64);
    let mut best = (margin_objective(&w, b, &xs, &ys, cfg.c), w, b);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            step += 1;
            let eta = cfg.learning_rate / (step as f64).sqrt();
            let f: f64 = w.iter().zip(&xs[i]).map(|(a, x)| a * x).sum::<f64>() + b;
            let active = ys[i] * f < 1.0;
            for k in 0..4 {
                let mut g = 2.0 * w[k] / cfg.c;
                if active {
                    g -= ys[i] * xs[i][k];
                }
                w[k] -= eta * g;
            }
            if active {
                b += eta * ys[i];
            }
        }
        let obj = margin_objective(&w, b, &xs, &ys, cfg.c);
        if obj < best.0 {
            best = (obj, w, b);
        }
    }
    Ok(MarginClassifier { weights: best.1, bias: best.2 })
}

/// A fitted metric-based attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MbAttacker {
    /// `scores[metric] >= threshold` means member.
    Threshold { metric: usize, threshold: f64 },
    /// `decision_value >= 0` means member.
    Margin(MarginClassifier),
}

impl MbAttacker {
    /// Score used for ranking, where larger means more likely a member: the
    /// chosen metric in threshold mode, the signed margin otherwise.
    pub fn decision_value(&self, s: &ScoreVector) -> f64 {
        match self {
            MbAttacker::Threshold { metric, .. } => s.as_array()[*metric],
            MbAttacker::Margin(m) => m.decision_value(s),
        }
    }

    /// Decision values at or above this are members.
    pub fn cutoff(&self) -> f64 {
        match self {
            MbAttacker::Threshold { threshold, .. } => *threshold,
            MbAttacker::Margin(_) => 0.0,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("attacker serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("mb attacker", e.to_string()))
    }
}

pub fn infer_mb(attacker: &MbAttacker, scores: &ScoreVector) -> Membership {
    Membership::from_bool(attacker.decision_value(scores) >= attacker.cutoff())
}

/// Index of a score by name (`bleu1`, `bleu2`, `bleu3`, `rougeL`).
pub fn metric_index(name: &str) -> Result<usize> {
    match name {
        "bleu1" => Ok(0),
        "bleu2" => Ok(1),
        "bleu3" => Ok(2),
        "rougeL" | "rouge_l" => Ok(3),
        _ => Err(Error::InvalidArgument(format!("unknown metric `{name}`"))),
    }
}

/// Fits a threshold attacker on one metric of labelled shadow records.
pub fn fit_threshold_attacker(records: &[ScoreRecord], metric: usize) -> Result<(MbAttacker, f64)> {
    let pick = |want: Membership| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.label == Some(want))
            .map(|r| r.scores.as_array()[metric])
            .collect()
    };
    let fit = fit_threshold(&pick(Membership::Member), &pick(Membership::Nonmember))?;
    Ok((
        MbAttacker::Threshold {
            metric,
            threshold: fit.threshold,
        },
        fit.accuracy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::Membership::{Member as M, Nonmember as N};

    fn rec(id: usize, v: [f64; 4], label: Membership) -> ScoreRecord {
        ScoreRecord {
            sample_id: format!("s{id}"),
            scores: ScoreVector::from_array(v),
            label: Some(label),
        }
    }

    #[test]
    fn threshold_separable() {
        let fit = fit_threshold(&[0.8, 0.9], &[0.1, 0.2]).unwrap();
        assert_eq!(fit.accuracy, 1.0);
        assert_eq!(fit.threshold, 0.5);
    }

    #[test]
    fn threshold_inverted_is_chance() {
        let fit = fit_threshold(&[0.3], &[0.7]).unwrap();
        assert_eq!(fit.accuracy, 0.5);
        assert!(fit.threshold < 0.3);
    }

    #[test]
    fn threshold_identical_lists() {
        let fit = fit_threshold(&[0.4, 0.4], &[0.4, 0.4]).unwrap();
        assert_eq!(fit.accuracy, 0.5);
    }

    #[test]
    fn threshold_needs_both_classes() {
        assert!(matches!(fit_threshold(&[], &[0.1]), Err(Error::SingleClass)));
    }

    #[test]
    fn margin_separable() {
        let mut records = Vec::new();
        for i in 0..20 {
            let d = i as f64 / 100.0;
            records.push(rec(i, [0.8 + d, 0.7 + d, 0.6, 0.9 - d], M));
            records.push(rec(100 + i, [0.3 - d, 0.2, 0.1 + d, 0.4], N));
        }
        let clf = fit_margin_classifier(&records, &MarginConfig::default()).unwrap();
        let attacker = MbAttacker::Margin(clf);
        for r in &records {
            assert_eq!(Some(infer_mb(&attacker, &r.scores)), r.label, "{}", r.sample_id);
        }
        assert_eq!(clf, fit_margin_classifier(&records, &MarginConfig::default()).unwrap());
    }

    #[test]
    fn margin_single_class() {
        let records = vec![rec(0, [0.1; 4], M), rec(1, [0.2; 4], M)];
        assert!(matches!(fit_margin_classifier(&records, &MarginConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn csv_and_toml_round_trip() {
        let records = vec![rec(0, [0.5, 0.25, 0.125, 1.0], M), rec(1, [0.0, 0.0, 0.0, 0.3], N)];
        assert_eq!(parse_scores_csv(&scores_csv(&records)).unwrap(), records);
        let a = MbAttacker::Margin(MarginClassifier { weights: [1.0, -2.0, 0.5, 3.0], bias: -1.25 });
        assert_eq!(MbAttacker::from_toml(&a.to_toml()).unwrap(), a);
        let t = MbAttacker::Threshold { metric: 3, threshold: 0.625 };
        assert_eq!(MbAttacker::from_toml(&t.to_toml()).unwrap(), t);
    }
}
