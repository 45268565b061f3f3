//! Plain mini-batch SGD shared by every trainable model.

use crate::defenses::{dp_sgd_step, l2_penalty, DpConfig};
use crate::error::{Error, Result};
use crate::seed::Rng;

pub(crate) struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
    pub dp: Option<(DpConfig, Rng)>,
}

impl Sgd {
    /// One pass over `order` in mini-batches. `loss_grad(params, sample, grad)`
    /// must add the sample's gradient into `grad` and return its loss.
    /// Returns the sample-weighted mean of the per-batch objective.
    pub fn epoch<F>(&mut self, params: &mut [f64], order: &[usize], batch_size: usize, mut loss_grad: F) -> f64
    where
        F: FnMut(&[f64], usize, &mut [f64]) -> f64,
    {
        let dim = params.len();
        let mut total = 0.0;
        let mut grad = vec![0.0; dim];
        for batch in order.chunks(batch_size.max(1)) {
            let n = batch.len() as f64;
            let mut data_loss = 0.0;
            if let Some((dp, rng)) = self.dp.as_mut() {
                let mut per_sample = Vec::with_capacity(batch.len());
                for &i in batch {
                    let mut g = vec![0.0; dim];
                    data_loss += loss_grad(params, i, &mut g);
                    per_sample.push(g);
                }
                grad = dp_sgd_step(&per_sample, dp, rng);
            } else {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in batch {
                    data_loss += loss_grad(params, i, &mut grad);
                }
                grad.iter_mut().for_each(|g| *g /= n);
            }
            let mut objective = data_loss / n;
            if self.weight_decay > 0.0 {
                objective += l2_penalty(params, self.weight_decay);
                for (g, p) in grad.iter_mut().zip(params.iter()) {
                    *g += 2.0 * self.weight_decay * p;
                }
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= self.lr * g;
            }
            total += objective * n;
        }
        total / order.len().max(1) as f64
    }
}

/// An epoch loss this many times the pre-training loss counts as divergence.
pub(crate) const BLOWUP_FACTOR: f64 = 50.0;

/// Fails with the 1-based epoch number if the loss or parameters are not
/// finite, or the loss exceeds `BLOWUP_FACTOR * initial_loss`.
pub(crate) fn check_divergence(epoch: usize, loss: f64, initial_loss: f64, params: &[f64]) -> Result<()> {
    let blown_up = initial_loss > 0.0 && loss > BLOWUP_FACTOR * initial_loss;
    if blown_up || !loss.is_finite() || !params.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence { epoch, loss });
    }
    Ok(())
}
