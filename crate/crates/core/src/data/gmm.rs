//! Univariate Gaussian mixtures fitted by expectation-maximization.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

pub const MAX_EM_ITERS: usize = 100;
pub const EM_TOL: f64 = 1e-6;
/// Columns longer than this are fitted on a seeded subsample.
pub const MAX_FIT_SAMPLES: usize = 20_000;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
}

/// Per-iteration mean log-likelihood of an EM run.
#[derive(Clone, Debug, Default)]
pub struct EmTrace {
    pub log_likelihood: Vec<f64>,
    pub requested_k: usize,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `ln(w_m) + ln N(v; mu_m, sigma_m)` for every component.
    pub fn log_joint(&self, v: f64) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let z = (v - c.mean) / c.std;
                c.weight.ln() - c.std.ln() - LN_SQRT_2PI - 0.5 * z * z
            })
            .collect()
    }

    /// Posterior component probabilities for `v`.
    pub fn responsibilities(&self, v: f64) -> Vec<f64> {
        let lj = self.log_joint(v);
        let max = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lj.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|x| x / total).collect()
    }

    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values.iter().map(|&v| log_sum_exp(&self.log_joint(v))).sum::<f64>() / values.len() as f64
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Fits a `k`-component mixture. `k` drops to the number of distinct values when
/// fewer exist. Means start at evenly spaced quantiles of the distinct values.
pub fn fit_gmm(values: &[f64], k: usize, seed: u64) -> Result<(GmmModel, EmTrace), DataError> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Gmm("need at least one finite value and no NaN/Inf".into()));
    }
    if k == 0 {
        return Err(DataError::Gmm("component count must be positive".into()));
    }
    let fit_values: Vec<f64> = if values.len() > MAX_FIT_SAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, values.len(), MAX_FIT_SAMPLES).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| values[i]).collect()
    } else {
        values.to_vec()
    };

    let mut distinct = fit_values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k_eff = k.min(distinct.len());
    if k_eff < k {
        log::info!("gmm: only {} distinct values, reducing k from {k} to {k_eff}", distinct.len());
    }

    let n = fit_values.len() as f64;
    let mean = fit_values.iter().sum::<f64>() / n;
    let var = fit_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let floor = (std * 1e-3).max(1e-6);

    let mut comps: Vec<GmmComponent> = (0..k_eff)
        .map(|m| {
            let pos = ((m as f64 + 0.5) / k_eff as f64 * distinct.len() as f64) as usize;
            GmmComponent {
                weight: 1.0 / k_eff as f64,
                mean: distinct[pos.min(distinct.len() - 1)],
                std: (std / k_eff as f64).max(floor),
            }
        })
        .collect();
    if k_eff == 1 {
        comps[0].mean = if distinct.len() == 1 { distinct[0] } else { mean };
        comps[0].std = std.max(floor);
    }

    let mut trace = EmTrace { log_likelihood: Vec::new(), requested_k: k };
    let mut model = GmmModel { components: comps };
    let mut prev = model.log_likelihood(&fit_values);
    trace.log_likelihood.push(prev);
    if k_eff == 1 {
        return Ok((model, trace));
    }

    let mut resp = vec![0.0; k_eff];
    for _ in 0..MAX_EM_ITERS {
        let mut nk = vec![0.0; k_eff];
        let mut sum_x = vec![0.0; k_eff];
        let mut sum_xx = vec![0.0; k_eff];
        for &v in &fit_values {
            let lj = model.log_joint(v);
            let lse = log_sum_exp(&lj);
            for m in 0..k_eff {
                resp[m] = (lj[m] - lse).exp();
                nk[m] += resp[m];
                sum_x[m] += resp[m] * v;
            }
        }
        let mut new = model.components.clone();
        for m in 0..k_eff {
            if nk[m] > 1e-12 {
                new[m].mean = sum_x[m] / nk[m];
            }
        }
        for &v in &fit_values {
            let lj = model.log_joint(v);
            let lse = log_sum_exp(&lj);
            for m in 0..k_eff {
                let r = (lj[m] - lse).exp();
                sum_xx[m] += r * (v - new[m].mean).powi(2);
            }
        }
        for m in 0..k_eff {
            new[m].weight = nk[m] / n;
            if nk[m] > 1e-12 {
                new[m].std = (sum_xx[m] / nk[m]).sqrt().max(floor);
            }
        }
        model.components = new;
        let ll = model.log_likelihood(&fit_values);
        trace.log_likelihood.push(ll);
        let improved = ll - prev;
        prev = ll;
        if improved.abs() < EM_TOL {
            break;
        }
    }
    Ok((model, trace))
}
