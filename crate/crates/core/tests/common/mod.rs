//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here calls into the library's own metric or
//! gradient code.
#![allow(dead_code)]

use mmi_core::captioner::{build_model, ArchId};
use mmi_core::evalkit::Membership;
use mmi_core::fb_attack::build_attack_mlp;
use mmi_core::mfe::{build_mfe, MfeShape};
use mmi_core::seed;
use mmi_core::synthdata::{generate_corpus, CorpusSpec, Family, ImageTextPair};
use mmi_core::textsim::TokenSeq;
use mmi_core::vocab::Vocab;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Random token sequence of length `1..=max_len` over `w0..w{vocab-1}`.
pub fn random_seq(rng: &mut seed::Rng, max_len: usize, vocab: usize) -> TokenSeq {
    let len = rng.random_range(1..=max_len);
    let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect();
    TokenSeq::from_tokens(words).unwrap()
}

/// Clipped n-gram matches by explicit pairing: each candidate n-gram claims
/// the first unclaimed equal n-gram in the reference.
pub fn paired_matches(cand: &[String], refr: &[String], n: usize) -> usize {
    if cand.len() < n || refr.len() < n {
        return 0;
    }
    let mut used = vec![false; refr.len() - n + 1];
    let mut hits = 0;
    for i in 0..=cand.len() - n {
        for j in 0..used.len() {
            if !used[j] && (0..n).all(|k| cand[i + k] == refr[j + k]) {
                used[j] = true;
                hits += 1;
                break;
            }
        }
    }
    hits
}

pub fn bleu_oracle(cand: &TokenSeq, refr: &TokenSeq, n: usize, eps: f64) -> f64 {
    let (c, r) = (cand.len(), refr.len());
    if c < n {
        return 0.0;
    }
    let mut product = 1.0;
    for k in 1..=n {
        let hits = paired_matches(cand.tokens(), refr.tokens(), k);
        let p = if hits == 0 { eps } else { hits as f64 / (c + 1 - k) as f64 };
        product *= p;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / n as f64)
}

pub fn rouge_n_oracle(cand: &TokenSeq, refr: &TokenSeq, n: usize) -> f64 {
    if refr.len() < n {
        return 0.0;
    }
    paired_matches(cand.tokens(), refr.tokens(), n) as f64 / (refr.len() + 1 - n) as f64
}

/// LCS length by memoized top-down recursion on suffixes.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

pub fn rouge_l_oracle(cand: &TokenSeq, refr: &TokenSeq) -> f64 {
    let l = lcs_oracle(cand.tokens(), refr.tokens()) as f64;
    if l == 0.0 {
        return 0.0;
    }
    // F1 = 2PR/(P+R) with P=l/c, R=l/r simplifies to 2l/(c+r).
    2.0 * l / (cand.len() + refr.len()) as f64
}

/// Mann-Whitney statistic: fraction of (member, nonmember) pairs where the
/// member scores higher, ties counted one half.
pub fn mann_whitney(values: &[f64], truths: &[Membership]) -> f64 {
    let pos: Vec<f64> = values.iter().zip(truths).filter(|(_, t)| t.is_member()).map(|(v, _)| *v).collect();
    let neg: Vec<f64> = values.iter().zip(truths).filter(|(_, t)| !t.is_member()).map(|(v, _)| *v).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    /// Coordinates where either gradient estimate is non-negligible.
    pub nonzero: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

/// Compares `analytic[i]` with a central difference of `loss` (step `h`) at
/// each index in `indices`. A coordinate passes when the relative error
/// `|a - n| / max(|a|, |n|)` is at most `tol`, or when both are below 1e-10.
pub fn grad_check(loss: impl Fn(&[f64]) -> f64, p: &[f64], analytic: &[f64], indices: &[usize], h: f64, tol: f64) -> GradCheck {
    let mut q = p.to_vec();
    let mut passed = 0;
    let mut nonzero = 0;
    let mut worst: f64 = 0.0;
    for &i in indices {
        q[i] = p[i] + h;
        let up = loss(&q);
        q[i] = p[i] - h;
        let down = loss(&q);
        q[i] = p[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-10 {
            0.0
        } else {
            nonzero += 1;
            (a - numeric).abs() / scale
        };
        worst = worst.max(rel);
        if rel <= tol {
            passed += 1;
        }
    }
    GradCheck {
        checked: indices.len(),
        passed,
        nonzero,
        worst,
    }
}

/// `k` distinct parameter indices drawn uniformly from `0..n`.
pub fn sample_indices(n: usize, k: usize, seed_: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed_, "grad-check-indices");
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    all.truncate(k.min(n));
    all
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn small_corpus(family: Family, size: usize, seed_: u64) -> Vec<ImageTextPair> {
    generate_corpus(&CorpusSpec { family, size, seed: seed_ }).unwrap()
}

/// Captioner cross-entropy on a 2-sample batch, 100 uniformly sampled
/// parameters.
pub fn captioner_grad_check(arch: ArchId, seed_: u64) -> GradCheck {
    let pairs = small_corpus(Family::F, 20, seed_);
    let batch: Vec<&ImageTextPair> = pairs.iter().take(2).collect();
    let vocab = Vocab::from_captions(pairs.iter().map(|p| p.caption()));
    let model = build_model(arch, vocab, seed_).unwrap();
    let p = model.params.values.clone();
    let (_, g) = model.batch_loss_grad(&p, &batch);
    let idx = sample_indices(p.len(), 100, seed_);
    grad_check(|q| model.batch_loss_grad(q, &batch).0, &p, &g, &idx, FD_STEP, FD_TOL)
}

/// Joint `||z||^2` over both encoders on a 2-sample batch.
pub fn mfe_grad_check(seed_: u64) -> GradCheck {
    let pairs = small_corpus(Family::F, 20, seed_);
    let batch: Vec<&ImageTextPair> = pairs.iter().take(2).collect();
    let vocab = Vocab::from_captions(pairs.iter().map(|p| p.caption()));
    let mfe = build_mfe(vocab, MfeShape::default(), seed_).unwrap();
    let p = mfe.params.values.clone();
    let (_, g) = mfe.batch_loss_grad(&p, &batch);
    let idx = sample_indices(p.len(), 100, seed_);
    grad_check(|q| mfe.batch_loss_grad(q, &batch).0, &p, &g, &idx, FD_STEP, FD_TOL)
}

/// Attack MLP binary cross-entropy on one member and one non-member input.
pub fn mlp_grad_check(seed_: u64) -> GradCheck {
    let dim = 32;
    let mlp = build_attack_mlp(dim, seed_).unwrap();
    let mut rng = seed::rng(seed_, "mlp-grad-inputs");
    let xs: Vec<(Vec<f64>, bool)> = (0..2)
        .map(|i| ((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(), i == 0))
        .collect();
    let loss_grad = |q: &[f64], grad: Option<&mut [f64]>| -> f64 {
        match grad {
            Some(g) => xs.iter().map(|(x, m)| mlp.sample_loss(q, x, *m, Some(&mut *g))).sum(),
            None => xs.iter().map(|(x, m)| mlp.sample_loss(q, x, *m, None)).sum(),
        }
    };
    let p = mlp.params.values.clone();
    let mut g = vec![0.0; p.len()];
    loss_grad(&p, Some(&mut g));
    let idx = sample_indices(p.len(), 100, seed_);
    grad_check(|q| loss_grad(q, None), &p, &g, &idx, FD_STEP, FD_TOL)
}
