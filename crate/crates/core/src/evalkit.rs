//! Attack evaluation: accuracy, ROC curves, a 2-D t-SNE embedding for
//! feature plots, and report files (CSV + SVG).

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Member,
    Nonmember,
}

impl Membership {
    pub fn from_bool(member: bool) -> Self {
        if member {
            Membership::Member
        } else {
            Membership::Nonmember
        }
    }

    pub fn is_member(self) -> bool {
        self == Membership::Member
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Membership::Member => "member",
            Membership::Nonmember => "nonmember",
        }
    }
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Membership {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "member" | "1" => Ok(Membership::Member),
            "nonmember" | "0" => Ok(Membership::Nonmember),
            _ => Err(Error::InvalidArgument(format!("unknown membership label `{s}`"))),
        }
    }
}

/// Fraction of predictions equal to the truth.
pub fn attack_accuracy(preds: &[Membership], truths: &[Membership]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Values `>= threshold` are predicted member. The first point uses
    /// `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve of a score where larger means "member". Tied scores form a
/// single step, so the area equals the Mann-Whitney statistic with ties
/// counted as one half.
pub fn roc_curve(values: &[f64], truths: &[Membership]) -> Result<RocCurve> {
    if values.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: truths.len(),
        });
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN decision value".into()));
    }
    let pos = truths.iter().filter(|t| t.is_member()).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let v = values[idx[i]];
        while i < idx.len() && values[idx[i]] == v {
            if truths[idx[i]].is_member() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            threshold: v,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

pub const TSNE_MAX_POINTS: usize = 2000;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;

/// Conditional probabilities of row `i` for precision `beta`, returning the
/// Shannon entropy (nats).
fn row_affinities(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == i { 0.0 } else { (-d[j] * beta).exp() };
        sum += *o;
    }
    if sum <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        if j != i {
            h += beta * d[j] * *o;
        }
        *o /= sum;
    }
    sum.ln() + h / sum
}

/// Exact t-SNE into two dimensions.
pub fn tsne_2d(features: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if !(cfg.perplexity > 0.0) || n < 4 || (n as f64) < 4.0 * cfg.perplexity {
        return Err(Error::Perplexity {
            n,
            need: (4.0 * cfg.perplexity).ceil().max(4.0) as usize,
            perplexity: cfg.perplexity,
        });
    }
    if n > TSNE_MAX_POINTS {
        return Err(Error::InvalidArgument(format!("t-SNE supports at most {TSNE_MAX_POINTS} points, got {n}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument("features differ in dimension".into()));
    }

    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let target = cfg.perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut beta = 1.0;
        let out = &mut p[i * n..(i + 1) * n];
        for _ in 0..100 {
            let h = row_affinities(row, i, beta, out);
            let diff = h - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
    }
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = seed::rng(cfg.seed, "tsne-init");
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exaggeration * pj[i * n + j] - q / z) * q;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
    }
    Ok((0..n).map(|i| [y[2 * i], y[2 * i + 1]]).collect())
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sample_id: String,
    /// Attack output; larger means more likely a member.
    pub value: f64,
    pub pred: Membership,
    pub truth: Membership,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario: String,
    /// `mb` or `fb`.
    pub attack: String,
    /// Column name of [`ReportRow::value`] in the prediction CSV.
    pub value_name: String,
    pub rows: Vec<ReportRow>,
    pub accuracy: f64,
    pub roc: RocCurve,
    /// Extra key/value pairs written to the summary.
    pub extra: Vec<(String, String)>,
}

impl AttackReport {
    pub fn new(scenario: &str, attack: &str, value_name: &str, rows: Vec<ReportRow>) -> Result<Self> {
        let preds: Vec<Membership> = rows.iter().map(|r| r.pred).collect();
        let truths: Vec<Membership> = rows.iter().map(|r| r.truth).collect();
        let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
        Ok(AttackReport {
            scenario: scenario.to_owned(),
            attack: attack.to_owned(),
            value_name: value_name.to_owned(),
            accuracy: attack_accuracy(&preds, &truths)?,
            roc: roc_curve(&values, &truths)?,
            rows,
            extra: Vec::new(),
        })
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = format!("sample_id,{},pred,truth\n", self.value_name);
        for r in &self.rows {
            let pred = u8::from(r.pred.is_member());
            let truth = u8::from(r.truth.is_member());
            writeln!(s, "{},{},{pred},{truth}", r.sample_id, r.value).unwrap();
        }
        s
    }

    /// Parses a CSV produced by [`AttackReport::predictions_csv`].
    pub fn from_predictions_csv(scenario: &str, attack: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("predictions", "empty file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() != 4 || cols[0] != "sample_id" || cols[2] != "pred" || cols[3] != "truth" {
            return Err(Error::format("predictions", format!("bad header `{header}`")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(format!("predictions line {}", i + 2), format!("`{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            rows.push(ReportRow {
                sample_id: f[0].to_owned(),
                value: f[1].parse().map_err(|_| bad())?,
                pred: f[2].parse().map_err(|_| bad())?,
                truth: f[3].parse().map_err(|_| bad())?,
            });
        }
        Self::new(scenario, attack, cols[1], rows)
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.roc.points {
            writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
        }
        writeln!(s, "# auc={}", self.roc.auc).unwrap();
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "scenario={}", self.scenario).unwrap();
        writeln!(s, "attack={}", self.attack).unwrap();
        writeln!(s, "n={}", self.rows.len()).unwrap();
        writeln!(s, "accuracy={:.6}", self.accuracy).unwrap();
        writeln!(s, "auc={:.6}", self.roc.auc).unwrap();
        for (k, v) in &self.extra {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

/// Lower clip for the log-scale ROC plot.
pub const LOG_FPR_FLOOR: f64 = 1e-3;
const PLOT: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn svg_open(title: &str, xlabel: &str, ylabel: &str) -> String {
    let size = PLOT + 2.0 * MARGIN;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="25" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#, size / 2.0).unwrap();
    writeln!(s, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{xlabel}</text>"#, size / 2.0, size - 12.0).unwrap();
    writeln!(
        s,
        r#"<text x="15" y="{0}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 15 {0})">{ylabel}</text>"#,
        size / 2.0
    )
    .unwrap();
    s
}

fn tick(s: &mut String, x: Option<f64>, y: Option<f64>, label: &str) {
    if let Some(x) = x {
        let py = MARGIN + PLOT;
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{label}</text>"#, py + 14.0).unwrap();
    }
    if let Some(y) = y {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{label}</text>"#, MARGIN - 4.0, y + 3.0).unwrap();
    }
}

fn roc_svg(report: &AttackReport, log: bool) -> String {
    let map = |v: f64| -> f64 {
        if log {
            let v: f64 = v.max(LOG_FPR_FLOOR);
            (v.log10() - LOG_FPR_FLOOR.log10()) / -LOG_FPR_FLOOR.log10()
        } else {
            v
        }
    };
    let px = |v: f64| MARGIN + map(v) * PLOT;
    let py = |v: f64| MARGIN + (1.0 - map(v)) * PLOT;
    let scale = if log { "log" } else { "linear" };
    let title = format!("{} {} ROC ({scale}), AUC {:.3}", report.scenario, report.attack.to_uppercase(), report.roc.auc);
    let mut s = svg_open(&title, "false positive rate", "true positive rate");
    let ticks: &[(f64, &str)] = if log {
        &[(1e-3, "0.001"), (1e-2, "0.01"), (1e-1, "0.1"), (1.0, "1")]
    } else {
        &[(0.0, "0"), (0.25, "0.25"), (0.5, "0.5"), (0.75, "0.75"), (1.0, "1")]
    };
    for &(v, label) in ticks {
        tick(&mut s, Some(px(v)), None, label);
        tick(&mut s, None, Some(py(v)), label);
    }
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    )
    .unwrap();
    let pts: Vec<String> = report
        .roc
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr)))
        .collect();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
    s.push_str("</svg>\n");
    s
}

fn scatter_svg(title: &str, points: &[[f64; 2]], labels: &[Membership]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let span = |c: usize| if hi[c] > lo[c] { hi[c] - lo[c] } else { 1.0 };
    let mut s = svg_open(title, "t-SNE 1", "t-SNE 2");
    for (p, l) in points.iter().zip(labels) {
        let x = MARGIN + 5.0 + (p[0] - lo[0]) / span(0) * (PLOT - 10.0);
        let y = MARGIN + 5.0 + (1.0 - (p[1] - lo[1]) / span(1)) * (PLOT - 10.0);
        let color = if l.is_member() { "crimson" } else { "steelblue" };
        writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#).unwrap();
    }
    let legend_y = MARGIN + 15.0;
    for (i, (label, color)) in [("member", "crimson"), ("nonmember", "steelblue")].iter().enumerate() {
        let y = legend_y + 15.0 * i as f64;
        writeln!(s, r#"<circle cx="{:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#, MARGIN + PLOT - 90.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{label}</text>"#, MARGIN + PLOT - 80.0, y + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `predictions.csv`, `roc.csv`, `summary.txt`, `roc_linear.svg`,
/// `roc_log.svg` and, when an embedding is given, `features_2d.svg` into
/// `out_dir`. Output depends only on the inputs.
pub fn emit_report(report: &AttackReport, embedding: Option<(&[[f64; 2]], &[Membership])>, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("predictions.csv"), &report.predictions_csv())?;
    write(&out_dir.join("roc.csv"), &report.roc_csv())?;
    write(&out_dir.join("summary.txt"), &report.summary())?;
    write(&out_dir.join("roc_linear.svg"), &roc_svg(report, false))?;
    write(&out_dir.join("roc_log.svg"), &roc_svg(report, true))?;
    if let Some((points, labels)) = embedding {
        if points.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: labels.len(),
            });
        }
        let title = format!("{} {} features", report.scenario, report.attack.to_uppercase());
        write(&out_dir.join("features_2d.svg"), &scatter_svg(&title, points, labels))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use Membership::{Member as M, Nonmember as N};

    #[test]
    fn accuracy_examples() {
        assert_eq!(attack_accuracy(&[M, N, M, N], &[M, N, N, N]).unwrap(), 0.75);
        assert!(matches!(attack_accuracy(&[M], &[M, N]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn perfect_and_inverted_roc() {
        let truths = [M, M, N, N];
        assert_eq!(roc_curve(&[0.9, 0.8, 0.2, 0.1], &truths).unwrap().auc, 1.0);
        assert_eq!(roc_curve(&[0.1, 0.2, 0.8, 0.9], &truths).unwrap().auc, 0.0);
        assert_eq!(roc_curve(&[0.5; 4], &truths).unwrap().auc, 0.5);
        assert_eq!(roc_curve(&[0.9, 0.8, 0.2, 0.1], &[M, N, M, N]).unwrap().auc, 0.75);
        assert!(matches!(roc_curve(&[0.1, 0.2], &[M, M]), Err(Error::SingleClass)));
    }

    #[test]
    fn roc_endpoints_and_monotone() {
        let roc = roc_curve(&[0.3, 0.9, 0.3, 0.1, 0.7], &[M, M, N, N, N]).unwrap();
        let first = roc.points[0];
        let last = *roc.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn membership_parse() {
        assert_eq!("1".parse::<Membership>().unwrap(), M);
        assert_eq!("nonmember".parse::<Membership>().unwrap(), N);
        assert!("maybe".parse::<Membership>().is_err());
    }

    #[test]
    fn tsne_rejects_small_inputs() {
        let feats = vec![vec![0.0, 1.0]; 50];
        let cfg = TsneConfig::default();
        assert!(matches!(tsne_2d(&feats, &cfg), Err(Error::Perplexity { n: 50, .. })));
    }

    #[test]
    fn tsne_separates_clusters() {
        let mut rng = seed::rng(1, "test");
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut feats = Vec::new();
        for k in 0..2 {
            for _ in 0..30 {
                feats.push((0..5).map(|_| k as f64 * 5.0 + normal.sample(&mut rng)).collect::<Vec<f64>>());
            }
        }
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 400,
            ..Default::default()
        };
        let y = tsne_2d(&feats, &cfg).unwrap();
        assert_eq!(y, tsne_2d(&feats, &cfg).unwrap());
        let centroid = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            let (sx, sy) = r.fold((0.0, 0.0), |(a, b), i| (a + y[i][0], b + y[i][1]));
            [sx / n, sy / n]
        };
        let (a, b) = (centroid(0..30), centroid(30..60));
        let between = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let within = (0..30).map(|i| ((y[i][0] - a[0]).powi(2) + (y[i][1] - a[1]).powi(2)).sqrt()).sum::<f64>() / 30.0;
        assert!(between > 3.0 * within, "between {between} within {within}");
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ReportRow { sample_id: "a".into(), value: 0.75, pred: M, truth: M },
            ReportRow { sample_id: "b".into(), value: 0.25, pred: N, truth: M },
            ReportRow { sample_id: "c".into(), value: 0.1, pred: N, truth: N },
        ];
        let r = AttackReport::new("FR", "fb", "prob", rows).unwrap();
        let back = AttackReport::from_predictions_csv("FR", "fb", &r.predictions_csv()).unwrap();
        assert_eq!(back, r);
        assert!(r.predictions_csv().starts_with("sample_id,prob,pred,truth\n"));
    }
}
