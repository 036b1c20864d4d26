//! Numerical certification of the closed-form fusion rules.
//!
//! The log-posteriors are written out term by term from their Gaussian
//! factors, with v_q-independent normalizers dropped, and maximized by plain
//! gradient ascent. Nothing here calls into the closed-form kernels except the
//! certification report, which compares the two.
//!
//! For the grouped model the per-group latent values `v_m` are profiled out:
//! the outer ascent runs over `v_q`, and for each `v_q` an inner ascent finds
//! the best `v_m`. Every factor is isotropic, so both levels see a Hessian that
//! is a scalar multiple of the identity and converge in a handful of steps.

use crate::attention::{self, DedupGroup, Measurement, QueryPrior};
use crate::error::{Error, Result};
use crate::numerics::{self, Rng};

pub const MAX_ITERATIONS: usize = 10_000;
pub const GRAD_TOL: f64 = 1e-9;
/// Inner stopping rule, relative to group curvature times value scale.
const INNER_REL_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub enum Evidence {
    Measurements(Vec<Measurement>),
    Groups(Vec<DedupGroup>),
}

/// A proper posterior: every precision and sigma strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorInstance {
    pub prior: QueryPrior,
    pub evidence: Evidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Base,
    Freq,
}

fn sigma_of(precision: f64) -> Result<f64> {
    if precision > 0.0 && precision.is_finite() {
        Ok(1.0 / precision.sqrt())
    } else {
        Err(Error::NonPositiveSigma)
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    numerics::squared_distance(a, b)
}

impl PosteriorInstance {
    pub fn dim(&self) -> usize {
        self.prior.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        sigma_of(self.prior.precision)?;
        match &self.evidence {
            Evidence::Measurements(ms) => {
                for m in ms {
                    sigma_of(m.precision)?;
                }
            }
            Evidence::Groups(gs) => {
                for g in gs {
                    if !(g.system_sigma > 0.0) || !(g.random_sigma > 0.0) {
                        return Err(Error::NonPositiveSigma);
                    }
                    if g.values.is_empty() {
                        return Err(Error::EmptyGroup);
                    }
                }
            }
        }
        Ok(())
    }

    fn measurements(&self) -> Result<&[Measurement]> {
        match &self.evidence {
            Evidence::Measurements(ms) => Ok(ms),
            Evidence::Groups(_) => Err(Error::Shape("expected a per-click instance".into())),
        }
    }

    fn groups(&self) -> Result<&[DedupGroup]> {
        match &self.evidence {
            Evidence::Groups(gs) => Ok(gs),
            Evidence::Measurements(_) => Err(Error::Shape("expected a grouped instance".into())),
        }
    }
}

/// `log φ(v_q | μ_q, σ_q²) + Σ_t log φ(v_t | v_q, σ_t²)` up to constants.
pub fn log_posterior_base(inst: &PosteriorInstance, v_q: &[f64]) -> Result<f64> {
    inst.validate()?;
    let sq_prior = sigma_of(inst.prior.precision)?.powi(2);
    let mut f = -sq(v_q, &inst.prior.mean) / (2.0 * sq_prior);
    for m in inst.measurements()? {
        let s2 = sigma_of(m.precision)?.powi(2);
        f -= sq(&m.value, v_q) / (2.0 * s2);
    }
    Ok(f)
}

/// `-(v_q - μ_q)/σ_q² + Σ_t (v_t - v_q)/σ_t²`.
pub fn grad_log_posterior_base(inst: &PosteriorInstance, v_q: &[f64]) -> Result<Vec<f64>> {
    inst.validate()?;
    let s2 = sigma_of(inst.prior.precision)?.powi(2);
    let mut g: Vec<f64> = v_q.iter().zip(&inst.prior.mean).map(|(v, m)| -(v - m) / s2).collect();
    for m in inst.measurements()? {
        let s2 = sigma_of(m.precision)?.powi(2);
        for (gi, (x, v)) in g.iter_mut().zip(m.value.iter().zip(v_q)) {
            *gi += (x - v) / s2;
        }
    }
    Ok(g)
}

/// Joint log-density of `(v_q, v_1..M)` given every click, up to constants.
pub fn log_posterior_freq(inst: &PosteriorInstance, v_q: &[f64], v_m_all: &[Vec<f64>]) -> Result<f64> {
    inst.validate()?;
    let groups = inst.groups()?;
    if v_m_all.len() != groups.len() {
        return Err(Error::Shape(format!("{} group values for {} groups", v_m_all.len(), groups.len())));
    }
    let s2 = sigma_of(inst.prior.precision)?.powi(2);
    let mut f = -sq(v_q, &inst.prior.mean) / (2.0 * s2);
    for (g, v_m) in groups.iter().zip(v_m_all) {
        f += group_term(g, v_q, v_m);
    }
    Ok(f)
}

fn group_term(g: &DedupGroup, v_q: &[f64], v_m: &[f64]) -> f64 {
    let sys2 = g.system_sigma * g.system_sigma;
    let rnd2 = g.random_sigma * g.random_sigma;
    let mut f = -sq(v_m, v_q) / (2.0 * sys2);
    for v in &g.values {
        f -= sq(v, v_m) / (2.0 * rnd2);
    }
    f
}

fn group_grad_vm(g: &DedupGroup, v_q: &[f64], v_m: &[f64]) -> Vec<f64> {
    let sys2 = g.system_sigma * g.system_sigma;
    let rnd2 = g.random_sigma * g.random_sigma;
    let mut grad: Vec<f64> = v_m.iter().zip(v_q).map(|(m, q)| -(m - q) / sys2).collect();
    for v in &g.values {
        for (gi, (x, m)) in grad.iter_mut().zip(v.iter().zip(v_m)) {
            *gi += (x - m) / rnd2;
        }
    }
    grad
}

/// Partial gradients `(∂F/∂v_q, [∂F/∂v_m])` of the joint log-density.
pub fn grad_log_posterior_freq(
    inst: &PosteriorInstance,
    v_q: &[f64],
    v_m_all: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    inst.validate()?;
    let groups = inst.groups()?;
    let s2 = sigma_of(inst.prior.precision)?.powi(2);
    let mut gq: Vec<f64> = v_q.iter().zip(&inst.prior.mean).map(|(v, m)| -(v - m) / s2).collect();
    let mut gms = Vec::with_capacity(groups.len());
    for (g, v_m) in groups.iter().zip(v_m_all) {
        let sys2 = g.system_sigma * g.system_sigma;
        for (gi, (m, q)) in gq.iter_mut().zip(v_m.iter().zip(v_q)) {
            *gi += (m - q) / sys2;
        }
        gms.push(group_grad_vm(g, v_q, v_m));
    }
    Ok((gq, gms))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Result of one ascent run.
#[derive(Clone, Debug)]
pub struct Ascent {
    pub point: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Gradient ascent for a concave objective. The step is found by
/// backtracking on the directional derivative: starting from twice the last
/// accepted step, halve until the slope along the gradient at the trial point
/// is still non-negative, so the step never passes the line maximum.
fn ascend<G>(grad: G, x0: Vec<f64>, tol: f64) -> Result<(Vec<f64>, f64, usize)>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = x0;
    let mut g = grad(&x)?;
    let mut step = 1.0;
    for it in 0..MAX_ITERATIONS {
        let norm = inf_norm(&g);
        if norm <= tol {
            return Ok((x, norm, it));
        }
        let gg = numerics::dot(&g, &g);
        let mut alpha = step * 2.0;
        let mut accepted = None;
        for _ in 0..200 {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + alpha * gi).collect();
            let gt = grad(&trial)?;
            let slope = numerics::dot(&gt, &g);
            if slope >= 0.0 || slope.abs() <= 1e-14 * gg {
                accepted = Some((trial, gt));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, gt)) = accepted else {
            return Err(Error::NoConvergence { iterations: it, grad_norm: norm });
        };
        step = alpha;
        x = trial;
        g = gt;
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        grad_norm: inf_norm(&g),
    })
}

/// Best `v_m` for a fixed `v_q`, found by ascent on the group's terms.
pub fn profile_group(g: &DedupGroup, v_q: &[f64]) -> Result<Vec<f64>> {
    let start = g.values[0].clone();
    let curvature = 1.0 / g.system_sigma.powi(2) + g.count() as f64 / g.random_sigma.powi(2);
    let scale = g.values.iter().map(|v| inf_norm(v)).fold(inf_norm(v_q), f64::max);
    let tol = INNER_REL_TOL * curvature * (1.0 + scale);
    let (v_m, _, _) = ascend(|v| Ok(group_grad_vm(g, v_q, v)), start, tol)?;
    Ok(v_m)
}

fn profiled_value_and_grad(inst: &PosteriorInstance, v_q: &[f64]) -> Result<(f64, Vec<f64>)> {
    let groups = inst.groups()?;
    let v_ms: Vec<Vec<f64>> = groups.iter().map(|g| profile_group(g, v_q)).collect::<Result<_>>()?;
    let f = log_posterior_freq(inst, v_q, &v_ms)?;
    let (gq, _) = grad_log_posterior_freq(inst, v_q, &v_ms)?;
    Ok((f, gq))
}

/// MAP estimate of `v_q` by gradient ascent from the prior mean and five random
/// starts, keeping the best terminal point.
pub fn map_argmax(inst: &PosteriorInstance, mode: Mode, rng: &mut Rng) -> Result<Ascent> {
    inst.validate()?;
    let d = inst.dim();
    let spread = start_spread(inst);
    let mut starts = vec![inst.prior.mean.clone()];
    for _ in 0..5 {
        starts.push(inst.prior.mean.iter().map(|m| m + spread * rng.normal()).collect());
    }
    let mut best: Option<Ascent> = None;
    for x0 in starts {
        debug_assert_eq!(x0.len(), d);
        let (point, grad_norm, iterations) = match mode {
            Mode::Base => ascend(|v| grad_log_posterior_base(inst, v), x0, GRAD_TOL)?,
            Mode::Freq => ascend(|v| Ok(profiled_value_and_grad(inst, v)?.1), x0, GRAD_TOL)?,
        };
        let value = match mode {
            Mode::Base => log_posterior_base(inst, &point)?,
            Mode::Freq => profiled_value_and_grad(inst, &point)?.0,
        };
        if best.as_ref().map_or(true, |b| value > b.value) {
            best = Some(Ascent {
                point,
                value,
                grad_norm,
                iterations,
            });
        }
    }
    Ok(best.expect("at least one start"))
}

fn start_spread(inst: &PosteriorInstance) -> f64 {
    let values: Vec<&Vec<f64>> = match &inst.evidence {
        Evidence::Measurements(ms) => ms.iter().map(|m| &m.value).collect(),
        Evidence::Groups(gs) => gs.iter().flat_map(|g| g.values.iter()).collect(),
    };
    let far = values
        .iter()
        .map(|v| inf_norm(&v.iter().zip(&inst.prior.mean).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    far.max(1.0)
}

/// Stationary `v̂_m` given `v̂_q`:
/// `(v̂_q/σ_m² + n_m v̄_m/σ'_m²) / (1/σ_m² + n_m/σ'_m²)`.
pub fn stationary_group_value(g: &DedupGroup, v_q: &[f64]) -> Vec<f64> {
    let a = 1.0 / (g.system_sigma * g.system_sigma);
    let b = g.count() as f64 / (g.random_sigma * g.random_sigma);
    g.mean_value().iter().zip(v_q).map(|(vb, q)| (a * q + b * vb) / (a + b)).collect()
}

/// Second difference of the base log-posterior along unit direction `u`.
pub fn curvature_along(inst: &PosteriorInstance, at: &[f64], u: &[f64], h: f64) -> Result<f64> {
    let shift = |s: f64| at.iter().zip(u).map(|(x, d)| x + s * d).collect::<Vec<f64>>();
    let f0 = log_posterior_base(inst, at)?;
    let fp = log_posterior_base(inst, &shift(h))?;
    let fm = log_posterior_base(inst, &shift(-h))?;
    Ok((fp - 2.0 * f0 + fm) / (h * h))
}

pub fn random_base_instance(rng: &mut Rng, d: usize, t: usize) -> PosteriorInstance {
    let prior = QueryPrior {
        mean: rng.normal_vec(d, 2.0),
        precision: rng.log_uniform(0.1, 10.0).powi(-2),
    };
    let ms = (0..t)
        .map(|_| Measurement {
            value: rng.normal_vec(d, 2.0),
            precision: rng.log_uniform(0.1, 10.0).powi(-2),
        })
        .collect();
    PosteriorInstance {
        prior,
        evidence: Evidence::Measurements(ms),
    }
}

pub fn random_freq_instance(rng: &mut Rng, d: usize, m: usize, counts: &[usize]) -> PosteriorInstance {
    let prior = QueryPrior {
        mean: rng.normal_vec(d, 2.0),
        precision: rng.log_uniform(0.1, 10.0).powi(-2),
    };
    let groups = (0..m)
        .map(|_| {
            let n = counts[rng.below(counts.len())];
            let center = rng.normal_vec(d, 2.0);
            DedupGroup {
                key: rng.normal_vec(d, 1.0),
                values: (0..n)
                    .map(|_| center.iter().map(|c| c + 0.5 * rng.normal()).collect())
                    .collect(),
                system_sigma: rng.log_uniform(0.1, 10.0),
                random_sigma: rng.log_uniform(0.1, 10.0),
            }
        })
        .collect();
    PosteriorInstance {
        prior,
        evidence: Evidence::Groups(groups),
    }
}

/// One line of the certification table.
#[derive(Clone, Debug)]
pub struct CertRow {
    pub check: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CertRow {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug)]
pub struct CertReport {
    pub rows: Vec<CertRow>,
}

impl CertReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<34} {:>9} {:>9} {:>12} {:>10}  status\n",
            "check", "instances", "failures", "worst", "tolerance"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<34} {:>9} {:>9} {:>12.3e} {:>10.1e}  {}\n",
                r.check,
                r.instances,
                r.failures,
                r.worst,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

struct Tally {
    row: CertRow,
}

impl Tally {
    fn new(check: &'static str, tolerance: f64) -> Self {
        Tally {
            row: CertRow {
                check,
                instances: 0,
                failures: 0,
                worst: 0.0,
                tolerance,
            },
        }
    }

    fn record(&mut self, err: f64) {
        self.row.instances += 1;
        self.row.worst = self.row.worst.max(err);
        if !(err <= self.row.tolerance) {
            self.row.failures += 1;
        }
    }
}

const DIMS: [usize; 4] = [1, 2, 4, 8];

/// Runs the full certification: closed forms against numerical MAP, the
/// curvature witness, grouped stationarity and both degeneration identities.
pub fn certify(seed: u64, per_mode: usize) -> CertReport {
    let root = Rng::new(seed);
    let mut base = Tally::new("closed form vs MAP (per-click)", 1e-6);
    let mut freq = Tally::new("closed form vs MAP (grouped)", 1e-6);
    let mut curv = Tally::new("curvature witness (per-click)", 1e-4);
    let mut stat = Tally::new("stationarity (grouped)", 1e-8);
    let mut inner = Tally::new("profiled v_m vs stationary v_m", 1e-8);
    let mut degen_v = Tally::new("zero prior + exp precisions = softmax", 1e-12);
    let mut degen_f = Tally::new("singleton groups = per-click", 1e-12);

    for i in 0..per_mode {
        let mut rng = root.split(i as u64);
        let d = DIMS[i % DIMS.len()];

        let t = rng.below(11);
        let inst = random_base_instance(&mut rng, d, t);
        match (map_argmax(&inst, Mode::Base, &mut rng), closed_form(&inst)) {
            (Ok(a), Ok(c)) => base.record(numerics::max_abs_diff(&a.point, &c)),
            _ => base.record(f64::INFINITY),
        }
        let total = inst.prior.precision
            + inst.measurements().map_or(0.0, |ms| ms.iter().map(|m| m.precision).sum::<f64>());
        for _ in 0..10 {
            let mut u = rng.normal_vec(d, 1.0);
            let n = numerics::dot(&u, &u).sqrt();
            u.iter_mut().for_each(|x| *x /= n);
            let at = rng.normal_vec(d, 1.0);
            let err = curvature_along(&inst, &at, &u, 1e-3)
                .map(|c| numerics::relative_error(c, -total))
                .unwrap_or(f64::INFINITY);
            curv.record(err);
        }

        let m = 1 + rng.below(10);
        let inst = random_freq_instance(&mut rng, d, m, &[1, 2, 3, 5, 8]);
        let groups = inst.groups().expect("grouped").to_vec();
        match (map_argmax(&inst, Mode::Freq, &mut rng), closed_form(&inst)) {
            (Ok(a), Ok(c)) => {
                freq.record(numerics::max_abs_diff(&a.point, &c));
                let v_ms: Vec<Vec<f64>> = groups.iter().map(|g| stationary_group_value(g, &c)).collect();
                match grad_log_posterior_freq(&inst, &c, &v_ms) {
                    Ok((gq, gms)) => {
                        let worst = gms.iter().map(|g| inf_norm(g)).fold(inf_norm(&gq), f64::max);
                        stat.record(worst);
                    }
                    Err(_) => stat.record(f64::INFINITY),
                }
                for (g, want) in groups.iter().zip(&v_ms) {
                    let err = profile_group(g, &c)
                        .map(|got| numerics::max_abs_diff(&got, want))
                        .unwrap_or(f64::INFINITY);
                    inner.record(err);
                }
            }
            _ => freq.record(f64::INFINITY),
        }
    }

    for i in 0..100 {
        let mut rng = root.split(1_000_000 + i);
        let d = DIMS[i as usize % DIMS.len()];
        let t = 1 + rng.below(10);
        let q = rng.normal_vec(d, 1.0);
        let keys: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d, 1.0)).collect();
        let values: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d, 1.0)).collect();
        let van = attention::vanilla_attention(&q, &keys, &values);
        let ms: Vec<Measurement> = keys
            .iter()
            .zip(&values)
            .map(|(k, v)| Measurement {
                value: v.clone(),
                precision: numerics::dot(&q, k).exp(),
            })
            .collect();
        let prior = QueryPrior {
            mean: vec![0.0; d],
            precision: 0.0,
        };
        match (van, attention::kfatt_base(&prior, &ms)) {
            (Ok(a), Ok(b)) => degen_v.record(numerics::max_abs_diff(&a.value, &b.value)),
            _ => degen_v.record(f64::INFINITY),
        }

        let prior = QueryPrior {
            mean: rng.normal_vec(d, 1.0),
            precision: rng.log_uniform(0.01, 10.0),
        };
        let sigmas: Vec<f64> = (0..t).map(|_| rng.log_uniform(0.1, 10.0)).collect();
        let ms: Vec<Measurement> = values
            .iter()
            .zip(&sigmas)
            .map(|(v, s)| Measurement {
                value: v.clone(),
                precision: 1.0 / (s * s),
            })
            .collect();
        let gs: Vec<DedupGroup> = keys
            .iter()
            .zip(values.iter().zip(&sigmas))
            .map(|(k, (v, s))| DedupGroup {
                key: k.clone(),
                values: vec![v.clone()],
                system_sigma: *s,
                random_sigma: 0.0,
            })
            .collect();
        match (attention::kfatt_base(&prior, &ms), attention::kfatt_freq(&prior, &gs)) {
            (Ok(a), Ok(b)) => degen_f.record(numerics::max_abs_diff(&a.value, &b.value)),
            _ => degen_f.record(f64::INFINITY),
        }
    }

    CertReport {
        rows: vec![
            base.row, freq.row, curv.row, stat.row, inner.row, degen_v.row, degen_f.row,
        ],
    }
}

/// Closed-form estimate for an instance, from the attention kernels.
pub fn closed_form(inst: &PosteriorInstance) -> Result<Vec<f64>> {
    Ok(match &inst.evidence {
        Evidence::Measurements(ms) => attention::kfatt_base(&inst.prior, ms)?.value,
        Evidence::Groups(gs) => attention::kfatt_freq(&inst.prior, gs)?.value,
    })
}
