//! Attention as Gaussian sensor fusion.
//!
//! A query carries a prior `N(μ_q, σ_q² I)` over the user's hidden interest,
//! and every historical click is a noisy measurement of that interest. The MAP
//! estimate is an inverse-variance weighted mean of the prior mean and the
//! measurements. Everything here works in precisions (`1/σ²`), so an
//! uninformative prior is simply precision zero.
//!
//! The frequency-capped variant groups clicks by deduplicated query. Clicks
//! within a group share a system error `σ_m` plus an independent random
//! error `σ'_m`, which caps the group's total weight at `1/σ_m²` however many
//! clicks it holds.

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

/// Bound applied to logits before exponentiation.
pub const LOGIT_CLAMP: f64 = 60.0;

/// A historical click `v_t` with precision `1/σ_t²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub value: Vec<f64>,
    pub precision: f64,
}

/// Prior over the hidden interest for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrior {
    pub mean: Vec<f64>,
    /// `1/σ_q²`; zero means no prior.
    pub precision: f64,
}

/// Clicks under one deduplicated query.
#[derive(Clone, Debug, PartialEq)]
pub struct DedupGroup {
    pub key: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub system_sigma: f64,
    pub random_sigma: f64,
}

impl DedupGroup {
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn mean_value(&self) -> Vec<f64> {
        let n = self.values.len() as f64;
        let d = self.values.first().map_or(0, |v| v.len());
        let mut mean = vec![0.0; d];
        for v in &self.values {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Capped weight `1 / (σ_m² + σ'_m² / n_m)`.
    pub fn weight(&self) -> f64 {
        freq_weight(self.system_sigma, self.random_sigma, self.count())
    }
}

/// Normalized fusion coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub prior_weight: f64,
    /// One entry per measurement, or per group for the frequency-capped kernel.
    pub behavior_weights: Vec<f64>,
}

impl AttentionWeights {
    pub fn total(&self) -> f64 {
        self.prior_weight + self.behavior_weights.iter().sum::<f64>()
    }
}

/// Output of every kernel: the estimate `v̂_q` and the weights that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestEstimate {
    pub value: Vec<f64>,
    pub weights: AttentionWeights,
}

/// `1 / (σ_m² + σ'_m² / n)`, non-decreasing in `n` and bounded by `1/σ_m²`.
pub fn freq_weight(system_sigma: f64, random_sigma: f64, n: usize) -> f64 {
    1.0 / (system_sigma * system_sigma + random_sigma * random_sigma / n as f64)
}

/// Softmax over `q·k_t`, then the weighted sum of values.
pub fn vanilla_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<InterestEstimate> {
    if keys.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if keys.len() != values.len() {
        return Err(Error::Shape(format!("{} keys, {} values", keys.len(), values.len())));
    }
    check_dims(q.len(), keys)?;
    let d = values[0].len();
    check_dims(d, values)?;
    let logits: Vec<f64> = keys.iter().map(|k| numerics::dot(q, k)).collect();
    let alpha = numerics::softmax_slice(&logits)?;
    let mut out = vec![0.0; d];
    for (a, v) in alpha.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    Ok(InterestEstimate {
        value: out,
        weights: AttentionWeights {
            prior_weight: 0.0,
            behavior_weights: alpha,
        },
    })
}

fn check_dims(d: usize, rows: &[Vec<f64>]) -> Result<()> {
    match rows.iter().find(|r| r.len() != d) {
        Some(r) => Err(Error::Shape(format!("expected dimension {d}, got {}", r.len()))),
        None => Ok(()),
    }
}

fn check_precision(p: f64, what: &str) -> Result<()> {
    if p >= 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidPrecision(format!("{what} precision {p}")))
    }
}

/// Inverse-variance fusion of a prior and measurements.
fn fuse(prior: &QueryPrior, items: &[(&[f64], f64)]) -> Result<InterestEstimate> {
    check_precision(prior.precision, "prior")?;
    let d = prior.mean.len();
    for (v, p) in items {
        check_precision(*p, "measurement")?;
        if v.len() != d {
            return Err(Error::Shape(format!("measurement dimension {} != prior {}", v.len(), d)));
        }
    }
    let total = prior.precision + items.iter().map(|(_, p)| p).sum::<f64>();
    if total <= 0.0 {
        return Err(Error::DegenerateFusion);
    }
    let mut out: Vec<f64> = prior.mean.iter().map(|m| prior.precision * m).collect();
    for (v, p) in items {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += p * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(InterestEstimate {
        value: out,
        weights: AttentionWeights {
            prior_weight: prior.precision / total,
            behavior_weights: items.iter().map(|(_, p)| p / total).collect(),
        },
    })
}

/// Closed-form MAP estimate with independent per-click measurements.
pub fn kfatt_base(prior: &QueryPrior, measurements: &[Measurement]) -> Result<InterestEstimate> {
    let items: Vec<(&[f64], f64)> = measurements.iter().map(|m| (m.value.as_slice(), m.precision)).collect();
    fuse(prior, &items)
}

/// Closed-form MAP estimate with clicks grouped per deduplicated query.
pub fn kfatt_freq(prior: &QueryPrior, groups: &[DedupGroup]) -> Result<InterestEstimate> {
    let mut means = Vec::with_capacity(groups.len());
    let mut weights = Vec::with_capacity(groups.len());
    for g in groups {
        if g.values.is_empty() {
            return Err(Error::EmptyGroup);
        }
        if !(g.system_sigma > 0.0) || !(g.random_sigma >= 0.0) {
            return Err(Error::NonPositiveSigma);
        }
        means.push(g.mean_value());
        weights.push(g.weight());
    }
    let items: Vec<(&[f64], f64)> = means.iter().map(|m| m.as_slice()).zip(weights).collect();
    fuse(prior, &items)
}

/// Kernel choice including the two simplified ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    Freq,
    /// Base with the prior precision pinned to 1.
    FixedPrior,
    /// Freq with the random error dropped, so `w_m = 1/σ_m²`.
    NoRandomError,
}

pub enum VariantInput<'a> {
    Measurements(&'a [Measurement]),
    Groups(&'a [DedupGroup]),
}

pub fn kfatt_variant(mode: Variant, prior: &QueryPrior, input: VariantInput<'_>) -> Result<InterestEstimate> {
    match (mode, input) {
        (Variant::Base, VariantInput::Measurements(m)) => kfatt_base(prior, m),
        (Variant::FixedPrior, VariantInput::Measurements(m)) => {
            let pinned = QueryPrior {
                mean: prior.mean.clone(),
                precision: 1.0,
            };
            kfatt_base(&pinned, m)
        }
        (Variant::Freq, VariantInput::Groups(g)) => kfatt_freq(prior, g),
        (Variant::NoRandomError, VariantInput::Groups(g)) => {
            let stripped: Vec<DedupGroup> = g
                .iter()
                .map(|g| DedupGroup {
                    random_sigma: 0.0,
                    ..g.clone()
                })
                .collect();
            kfatt_freq(prior, &stripped)
        }
        (mode, _) => Err(Error::Shape(format!("{mode:?} given the wrong kind of input"))),
    }
}

/// Precision `exp(clamp(logit))`.
pub fn precision_from_logit(logit: f64) -> f64 {
    logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp()
}

/// Two-layer MLP with a ReLU hidden layer. Weights are `in x hidden` and
/// `hidden x out`; biases are rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp2 {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp2 {
            w1: Tensor::zeros(&[d_in, hidden]),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::zeros(&[hidden, d_out]),
            b2: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::row_vector(x.to_vec());
        let h = x.matmul(&self.w1)?.add(&self.b1)?.map(|v| v.max(0.0));
        Ok(h.matmul(&self.w2)?.add(&self.b2)?.into_data())
    }
}

/// Mean and precision networks of the query prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorHead {
    pub mean: Mlp2,
    pub precision: Mlp2,
}

/// `μ_q = MLP_μ(q)`, precision `= softplus(MLP_σ(q))`.
pub fn prior_head(q: &[f64], head: &PriorHead) -> Result<QueryPrior> {
    let mean = head.mean.eval(q)?;
    let raw = head.precision.eval(q)?;
    if raw.len() != 1 {
        return Err(Error::Shape(format!("precision network emits {} values", raw.len())));
    }
    Ok(QueryPrior {
        mean,
        precision: numerics::softplus(raw[0]),
    })
}

/// Random-error scale `σ'_m = softplus(MLP(k_m))`.
pub fn noise_head(key: &[f64], mlp: &Mlp2) -> Result<f64> {
    let raw = mlp.eval(key)?;
    if raw.len() != 1 {
        return Err(Error::Shape(format!("noise network emits {} values", raw.len())));
    }
    Ok(numerics::softplus(raw[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn prior(mean: Vec<f64>, precision: f64) -> QueryPrior {
        QueryPrior { mean, precision }
    }

    fn meas(v: Vec<f64>, p: f64) -> Measurement {
        Measurement { value: v, precision: p }
    }

    #[test]
    fn vanilla_examples() {
        let out = vanilla_attention(&[0.2, 0.1], &[vec![1.0, 1.0]], &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(out.value, vec![3.0, 4.0]);
        assert_eq!(out.weights.behavior_weights, vec![1.0]);

        let keys = vec![vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 5.0]];
        let values = vec![vec![1.0], vec![2.0], vec![6.0]];
        let out = vanilla_attention(&[1.0, 0.0], &keys, &values).unwrap();
        assert!((out.value[0] - 3.0).abs() < 1e-12);

        let e = std::f64::consts::E;
        let out = vanilla_attention(
            &[1.0, 0.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let a = e / (e + 1.0);
        assert!((out.weights.behavior_weights[0] - a).abs() < 1e-12);
        assert!((out.value[0] - 0.7311).abs() < 1e-4 && (out.value[1] - 0.2689).abs() < 1e-4);
        assert!((out.value[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        assert_eq!(vanilla_attention(&[1.0], &[], &[]), Err(Error::EmptyHistory));
    }

    #[test]
    fn base_examples() {
        let out = kfatt_base(&prior(vec![1.5, -2.0], 0.3), &[]).unwrap();
        assert_eq!(out.value, vec![1.5, -2.0]);
        assert_eq!(out.weights.prior_weight, 1.0);

        let out = kfatt_base(&prior(vec![0.0], 0.0), &[meas(vec![1.0], 1.0), meas(vec![3.0], 1.0)]).unwrap();
        assert_eq!(out.value, vec![2.0]);

        let out = kfatt_base(&prior(vec![0.0], 1.0), &[meas(vec![4.0], 1.0)]).unwrap();
        assert_eq!(out.value, vec![2.0]);

        let err = kfatt_base(&prior(vec![0.0], 0.0), &[meas(vec![4.0], 0.0)]);
        assert_eq!(err, Err(Error::DegenerateFusion));
        assert!(kfatt_base(&prior(vec![0.0], -1.0), &[]).is_err());
    }

    #[test]
    fn freq_examples() {
        let g = DedupGroup {
            key: vec![0.0],
            values: vec![vec![2.0], vec![4.0]],
            system_sigma: 1.0,
            random_sigma: 0.0,
        };
        let out = kfatt_freq(&prior(vec![0.0], 1.0), &[g.clone()]).unwrap();
        assert_eq!(out.value, vec![1.5]);
        assert_eq!(out.weights.behavior_weights.len(), 1);

        let bad = DedupGroup { system_sigma: 0.0, ..g.clone() };
        assert_eq!(kfatt_freq(&prior(vec![0.0], 1.0), &[bad]), Err(Error::NonPositiveSigma));
        let empty = DedupGroup { values: vec![], ..g };
        assert_eq!(kfatt_freq(&prior(vec![0.0], 1.0), &[empty]), Err(Error::EmptyGroup));
    }

    #[test]
    fn freq_weight_is_capped() {
        assert!((freq_weight(1.0, 1.0, 1) - 0.5).abs() < 1e-15);
        let w10 = freq_weight(1.0, 1.0, 10);
        let w1000 = freq_weight(1.0, 1.0, 1000);
        assert!((w10 - 1.0 / 1.1).abs() < 1e-12);
        assert!((w1000 - 1.0 / 1.001).abs() < 1e-12 && w1000 > 0.999 && w1000 < 1.0);
    }

    #[test]
    fn freq_degenerates_to_base() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let d = 1 + rng.below(5);
            let t = 1 + rng.below(8);
            let p = prior(rng.normal_vec(d, 1.0), rng.log_uniform(0.01, 10.0));
            let sigmas: Vec<f64> = (0..t).map(|_| rng.log_uniform(0.1, 10.0)).collect();
            let values: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d, 2.0)).collect();
            let ms: Vec<Measurement> = values
                .iter()
                .zip(&sigmas)
                .map(|(v, s)| meas(v.clone(), 1.0 / (s * s)))
                .collect();
            let gs: Vec<DedupGroup> = values
                .iter()
                .zip(&sigmas)
                .map(|(v, s)| DedupGroup {
                    key: vec![],
                    values: vec![v.clone()],
                    system_sigma: *s,
                    random_sigma: 0.0,
                })
                .collect();
            let a = kfatt_base(&p, &ms).unwrap();
            let b = kfatt_freq(&p, &gs).unwrap();
            assert!(numerics::max_abs_diff(&a.value, &b.value) <= 1e-12);
        }
    }

    #[test]
    fn variants() {
        let p = prior(vec![1.0, -1.0], 1.0);
        let ms = vec![meas(vec![2.0, 0.5], 0.7), meas(vec![-1.0, 3.0], 2.0)];
        let base = kfatt_base(&p, &ms).unwrap();
        let bs = kfatt_variant(Variant::FixedPrior, &prior(vec![1.0, -1.0], 42.0), VariantInput::Measurements(&ms))
            .unwrap();
        assert_eq!(base, bs);

        let group = |n: usize, s: f64| DedupGroup {
            key: vec![0.0],
            values: vec![vec![1.0]; n],
            system_sigma: s,
            random_sigma: 3.0,
        };
        let gs = vec![group(1, 0.5), group(1, 2.0)];
        let fs = kfatt_variant(Variant::NoRandomError, &prior(vec![0.0], 1.0), VariantInput::Groups(&gs)).unwrap();
        let ms: Vec<Measurement> = gs.iter().map(|g| meas(vec![1.0], 1.0 / (g.system_sigma.powi(2)))).collect();
        let b = kfatt_base(&prior(vec![0.0], 1.0), &ms).unwrap();
        assert!(numerics::max_abs_diff(&fs.value, &b.value) < 1e-15);

        let gs = vec![group(1, 0.5), group(100, 0.5)];
        let fs = kfatt_variant(Variant::NoRandomError, &prior(vec![0.0], 1.0), VariantInput::Groups(&gs)).unwrap();
        assert_eq!(fs.weights.behavior_weights[0], fs.weights.behavior_weights[1]);

        assert!(kfatt_variant(Variant::Freq, &p, VariantInput::Measurements(&ms)).is_err());
    }

    #[test]
    fn heads_at_zero_params() {
        let head = PriorHead {
            mean: Mlp2::zeros(3, 4, 2),
            precision: Mlp2::zeros(3, 4, 1),
        };
        let p = prior_head(&[0.3, -1.0, 2.0], &head).unwrap();
        assert_eq!(p.mean, vec![0.0, 0.0]);
        assert!((p.precision - std::f64::consts::LN_2).abs() < 1e-15);
        let s = noise_head(&[1.0, 2.0, 3.0], &Mlp2::zeros(3, 4, 1)).unwrap();
        assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn heads_stay_in_range() {
        let mut rng = Rng::new(9);
        let mlp = Mlp2 {
            w1: rng.normal_tensor(&[4, 8], 2.0),
            b1: rng.normal_tensor(&[1, 8], 2.0),
            w2: rng.normal_tensor(&[8, 1], 2.0),
            b2: rng.normal_tensor(&[1, 1], 2.0),
        };
        let head = PriorHead {
            mean: Mlp2 {
                w2: rng.normal_tensor(&[8, 3], 1.0),
                b2: rng.normal_tensor(&[1, 3], 1.0),
                ..mlp.clone()
            },
            precision: mlp.clone(),
        };
        for _ in 0..1000 {
            let x = rng.normal_vec(4, 3.0);
            assert!(noise_head(&x, &mlp).unwrap() >= 0.0);
            assert!(prior_head(&x, &head).unwrap().precision > 0.0);
        }
    }

    #[test]
    fn heads_match_scalar_reevaluation() {
        let mut rng = Rng::new(21);
        let mean = Mlp2 {
            w1: rng.normal_tensor(&[3, 5], 1.0),
            b1: rng.normal_tensor(&[1, 5], 1.0),
            w2: rng.normal_tensor(&[5, 2], 1.0),
            b2: rng.normal_tensor(&[1, 2], 1.0),
        };
        let precision = Mlp2 {
            w1: rng.normal_tensor(&[3, 5], 1.0),
            b1: rng.normal_tensor(&[1, 5], 1.0),
            w2: rng.normal_tensor(&[5, 1], 1.0),
            b2: rng.normal_tensor(&[1, 1], 1.0),
        };
        let x = rng.normal_vec(3, 1.0);
        // Explicit loops over indices, no matrix helpers.
        let net = |m: &Mlp2, out: usize| -> Vec<f64> {
            let mut h = [0.0; 5];
            for j in 0..5 {
                let mut s = m.b1.data()[j];
                for i in 0..3 {
                    s += x[i] * m.w1.data()[i * 5 + j];
                }
                h[j] = if s > 0.0 { s } else { 0.0 };
            }
            (0..out)
                .map(|o| m.b2.data()[o] + (0..5).map(|j| h[j] * m.w2.data()[j * out + o]).sum::<f64>())
                .collect()
        };
        let head = PriorHead { mean: mean.clone(), precision: precision.clone() };
        let p = prior_head(&x, &head).unwrap();
        let want_mean = net(&mean, 2);
        let want_prec = (1.0 + net(&precision, 1)[0].exp()).ln();
        assert!(numerics::max_abs_diff(&p.mean, &want_mean) < 1e-12);
        assert!((p.precision - want_prec).abs() < 1e-12);
        assert!((noise_head(&x, &precision).unwrap() - want_prec).abs() < 1e-12);
    }
}
