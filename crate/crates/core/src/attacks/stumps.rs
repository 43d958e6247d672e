//! Gradient-boosted depth-1 trees on logistic loss.
//!
//! Each round fits one stump to the Newton step of the current scores:
//! candidate splits are quantile borders per feature, leaf values are
//! `-G / (H + l2)` scaled by the learning rate. A step that would raise the
//! training loss is halved until it does not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StumpConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Maximum number of split borders per feature.
    pub borders: usize,
    /// L2 penalty on leaf values.
    pub l2: f64,
}

impl Default for StumpConfig {
    fn default() -> Self {
        StumpConfig {
            iterations: 10_000,
            learning_rate: 0.03,
            borders: 64,
            l2: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    /// Samples with `x[feature] <= threshold` take `left`.
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub bias: f64,
    pub stumps: Vec<Stump>,
    /// Mean training log-loss before the first stump and after each one.
    pub train_loss: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `log(1 + exp(-z))` for label 1, `log(1 + exp(z))` for label 0.
fn log_loss(score: f64, label: bool) -> f64 {
    let z = if label { -score } else { score };
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn mean_loss(scores: &[f64], labels: &[bool]) -> f64 {
    scores.iter().zip(labels).map(|(&s, &l)| log_loss(s, l)).sum::<f64>() / scores.len() as f64
}

/// Distinct quantile cut points of one feature column.
fn quantile_borders(column: &[f64], max: usize) -> Vec<f64> {
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut borders: Vec<f64> = (1..=max)
        .map(|q| sorted[((q * n).div_ceil(max + 1)).saturating_sub(1).min(n - 1)])
        .collect();
    borders.dedup();
    // a border at the maximum separates nothing
    if borders.last() == sorted.last() {
        borders.pop();
    }
    borders
}

impl StumpEnsemble {
    /// Fits on `features[i]` (all rows the same length) with binary labels.
    pub fn fit(features: &[Vec<f64>], labels: &[bool], cfg: &StumpConfig) -> Result<Self> {
        let n = features.len();
        if n == 0 || labels.len() != n {
            return Err(Error::DegenerateFit(format!("{n} feature rows for {} labels", labels.len())));
        }
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 || positives == n {
            return Err(Error::DegenerateFit("labels contain a single class".into()));
        }
        let dims = features[0].len();
        if features.iter().any(|r| r.len() != dims || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::DegenerateFit("feature rows must be finite and equally long".into()));
        }
        let borders: Vec<Vec<f64>> = (0..dims)
            .map(|f| quantile_borders(&features.iter().map(|r| r[f]).collect::<Vec<_>>(), cfg.borders.max(1)))
            .collect();
        // bins[f][i] = number of borders strictly below x_i, i.e. the split
        // index at which sample i starts going right
        let bins: Vec<Vec<u16>> = (0..dims)
            .map(|f| {
                features
                    .iter()
                    .map(|r| borders[f].partition_point(|&b| b < r[f]) as u16)
                    .collect()
            })
            .collect();

        let prior = positives as f64 / n as f64;
        let bias = (prior / (1.0 - prior)).ln();
        let mut scores = vec![bias; n];
        let mut loss = mean_loss(&scores, labels);
        let mut ensemble = StumpEnsemble {
            bias,
            stumps: Vec::new(),
            train_loss: vec![loss],
        };
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for _ in 0..cfg.iterations {
            for i in 0..n {
                let p = sigmoid(scores[i]);
                grad[i] = p - if labels[i] { 1.0 } else { 0.0 };
                hess[i] = p * (1.0 - p);
            }
            let (g_total, h_total): (f64, f64) = (grad.iter().sum(), hess.iter().sum());
            let mut best: Option<(f64, usize, usize, f64, f64)> = None;
            for f in 0..dims {
                let nb = borders[f].len();
                if nb == 0 {
                    continue;
                }
                let mut gh = vec![(0.0, 0.0); nb + 1];
                for i in 0..n {
                    let b = bins[f][i] as usize;
                    gh[b].0 += grad[i];
                    gh[b].1 += hess[i];
                }
                let (mut gl, mut hl) = (0.0, 0.0);
                for (split, &(g, h)) in gh.iter().enumerate().take(nb) {
                    gl += g;
                    hl += h;
                    let (gr, hr) = (g_total - gl, h_total - hl);
                    let gain = gl * gl / (hl + cfg.l2) + gr * gr / (hr + cfg.l2);
                    if best.is_none_or(|b| gain > b.0) {
                        best = Some((gain, f, split, gl, hl));
                    }
                }
            }
            let Some((_, feature, split, gl, hl)) = best else {
                break;
            };
            let (gr, hr) = (g_total - gl, h_total - hl);
            let mut left = -cfg.learning_rate * gl / (hl + cfg.l2);
            let mut right = -cfg.learning_rate * gr / (hr + cfg.l2);
            let threshold = borders[feature][split];
            let goes_left: Vec<bool> = bins[feature].iter().map(|&b| (b as usize) <= split).collect();
            let trial = |left: f64, right: f64| -> Vec<f64> {
                scores
                    .iter()
                    .zip(&goes_left)
                    .map(|(&s, &l)| s + if l { left } else { right })
                    .collect()
            };
            let mut next = trial(left, right);
            let mut next_loss = mean_loss(&next, labels);
            let mut halvings = 0;
            while next_loss > loss && halvings < 30 {
                left /= 2.0;
                right /= 2.0;
                next = trial(left, right);
                next_loss = mean_loss(&next, labels);
                halvings += 1;
            }
            if next_loss > loss {
                break;
            }
            scores = next;
            loss = next_loss;
            ensemble.train_loss.push(loss);
            ensemble.stumps.push(Stump {
                feature,
                threshold,
                left,
                right,
            });
        }
        Ok(ensemble)
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .stumps
                .iter()
                .map(|s| if x[s.feature] <= s.threshold { s.left } else { s.right })
                .sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.score(x))
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.predict_proba(x) > 0.5
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[bool]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &l)| self.predict(x) == l)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}
