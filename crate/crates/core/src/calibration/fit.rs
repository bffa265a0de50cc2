//! Maximum-likelihood estimation of the per-class Gaussian coefficients.
//!
//! Each class is fitted independently by minimizing
//!
//! ```text
//! NLL(a, b, alpha, beta) = sum_i  s_i / 2 + (l_i - mu_i)^2 / (2 exp(s_i))
//!     mu_i = a q_i + b  (+ a2 q_i^2 for second-order models)
//!     s_i  = alpha q_i + beta
//! ```
//!
//! over the class's `(logit, normalized quality)` pairs. The optimizer is BFGS
//! with Armijo backtracking, started from closed-form least-squares estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ln_variance_floor, CalibrationModel, ClassCoefficients, ClassFitMeta, QuadraticTerms};
use crate::error::{Error, Result};
use crate::types::{Dataset, Label};

const LOG_RESIDUAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceModel {
    /// `ln sigma^2 = alpha q + beta`
    #[default]
    LogLinear,
    /// `alpha` pinned to zero.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// 1 for linear means, 2 adds a quadratic mean term.
    pub model_order: u8,
    pub variance: VarianceModel,
    pub max_iterations: usize,
    /// Stop when the max-norm of the per-sample gradient falls below this.
    pub gradient_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            model_order: 1,
            variance: VarianceModel::LogLinear,
            max_iterations: 500,
            gradient_tolerance: 1e-10,
        }
    }
}

/// Per-class negative log-likelihood over `(logit, normalized quality)` samples.
///
/// Parameter layout: `[a, b, alpha, beta]`, followed by `a2` for order 2.
#[derive(Debug, Clone, Copy)]
pub struct ClassObjective<'a> {
    samples: &'a [(f64, f64)],
    order: u8,
}

impl<'a> ClassObjective<'a> {
    pub fn new(samples: &'a [(f64, f64)], order: u8) -> Self {
        ClassObjective { samples, order }
    }

    pub fn n_params(&self) -> usize {
        if self.order == 2 {
            5
        } else {
            4
        }
    }

    fn mean(&self, p: &[f64], q: f64) -> f64 {
        let quad = if self.order == 2 { p[4] * q * q } else { 0.0 };
        p[0] * q + p[1] + quad
    }

    pub fn value(&self, p: &[f64]) -> f64 {
        let floor = ln_variance_floor();
        self.samples
            .iter()
            .map(|&(l, q)| {
                let s = (p[2] * q + p[3]).max(floor);
                let r = l - self.mean(p, q);
                0.5 * s + r * r / (2.0 * s.exp())
            })
            .sum()
    }

    pub fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let floor = ln_variance_floor();
        let mut g = vec![0.0; self.n_params()];
        for &(l, q) in self.samples {
            let raw = p[2] * q + p[3];
            let s = raw.max(floor);
            let inv_var = (-s).exp();
            let r = l - self.mean(p, q);
            let g_mean = -r * inv_var;
            g[0] += g_mean * q;
            g[1] += g_mean;
            if self.order == 2 {
                g[4] += g_mean * q * q;
            }
            if raw > floor {
                let g_s = 0.5 - 0.5 * r * r * inv_var;
                g[2] += g_s * q;
                g[3] += g_s;
            }
        }
        g
    }
}

/// Least squares of `y` on the polynomial features `[q, 1, q^2?]` in the
/// objective's parameter order.
fn polynomial_ols(q: &[f64], y: &[f64], order: u8) -> Result<Vec<f64>> {
    let cols = if order == 2 { 3 } else { 2 };
    let x = DMatrix::from_fn(q.len(), cols, |i, j| match j {
        0 => q[i],
        1 => 1.0,
        _ => q[i] * q[i],
    });
    let yv = DVector::from_column_slice(y);
    let sol = x
        .svd(true, true)
        .solve(&yv, 1e-14)
        .map_err(|e| Error::Numerical(format!("least-squares initialization failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

fn initial_point(samples: &[(f64, f64)], order: u8, variance: VarianceModel) -> Result<Vec<f64>> {
    let q: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let l: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let mean = polynomial_ols(&q, &l, order)?;
    let quad = |qi: f64| if order == 2 { mean[2] * qi * qi } else { 0.0 };
    let log_r2: Vec<f64> = samples
        .iter()
        .map(|&(li, qi)| {
            let r = li - mean[0] * qi - mean[1] - quad(qi);
            (r * r + LOG_RESIDUAL_EPS).ln()
        })
        .collect();
    let (alpha, beta) = match variance {
        VarianceModel::LogLinear => {
            let v = polynomial_ols(&q, &log_r2, 1)?;
            (v[0], v[1])
        }
        VarianceModel::Constant => (0.0, log_r2.iter().sum::<f64>() / log_r2.len() as f64),
    };
    let mut p = vec![mean[0], mean[1], alpha, beta];
    if order == 2 {
        p.push(mean[2]);
    }
    Ok(p)
}

struct Minimum {
    params: Vec<f64>,
    value: f64,
    initial_value: f64,
    iterations: usize,
    converged: bool,
}

/// BFGS with Armijo backtracking on the per-sample objective. Parameters with
/// `free[i] == false` keep their starting value.
fn minimize(
    obj: &ClassObjective<'_>,
    start: Vec<f64>,
    free: &[bool],
    cfg: &FitConfig,
) -> Result<Minimum> {
    let n = start.len();
    let scale = 1.0 / obj.samples.len() as f64;
    let eval = |p: &DVector<f64>| obj.value(p.as_slice()) * scale;
    let grad = |p: &DVector<f64>| {
        let g = obj.gradient(p.as_slice());
        DVector::from_iterator(
            n,
            g.iter()
                .zip(free)
                .map(|(gi, &f)| if f { gi * scale } else { 0.0 }),
        )
    };

    let mut x = DVector::from_vec(start);
    let mut f = eval(&x);
    if !f.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the initial point".into(),
        ));
    }
    let initial_value = f;
    let mut g = grad(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut converged = g.amax() < cfg.gradient_tolerance;

    while !converged && iterations < cfg.max_iterations {
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope.is_nan() || slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = -g.norm_squared();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + step * &dir;
            let fc = eval(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // No decrease along a descent direction: at the optimum to machine precision.
            converged = g.amax() < cfg.gradient_tolerance.sqrt();
            break;
        };

        let g_new = grad(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            h = &left * &h * &right + rho * &s * s.transpose();
        }
        let f_change = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        converged = g.amax() < cfg.gradient_tolerance
            || f_change.abs() <= f64::EPSILON * f.abs().max(1.0) * 1e-2;
    }

    Ok(Minimum {
        params: x.iter().copied().collect(),
        value: f / scale,
        initial_value: initial_value / scale,
        iterations,
        converged,
    })
}

struct ClassFit {
    coefficients: ClassCoefficients,
    quadratic: Option<f64>,
    meta: ClassFitMeta,
}

fn fit_class(samples: &[(f64, f64)], cfg: &FitConfig) -> Result<ClassFit> {
    let obj = ClassObjective::new(samples, cfg.model_order);
    let start = initial_point(samples, cfg.model_order, cfg.variance)?;
    let mut free = vec![true; obj.n_params()];
    if cfg.variance == VarianceModel::Constant {
        free[2] = false;
    }
    let m = minimize(&obj, start, &free, cfg)?;
    let p = &m.params;
    let coefficients = ClassCoefficients::new(p[0], p[1], p[2], p[3]);
    if !coefficients.is_valid() {
        return Err(Error::Numerical(format!(
            "fit produced invalid coefficients {coefficients:?}"
        )));
    }
    Ok(ClassFit {
        coefficients,
        quadratic: (cfg.model_order == 2).then(|| p[4]),
        meta: ClassFitMeta {
            n_samples: samples.len(),
            objective: m.value,
            initial_objective: m.initial_value,
            iterations: m.iterations,
            converged: m.converged,
        },
    })
}

fn distinct_count(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Fits both class models on a labeled development set.
pub fn fit(dev: &Dataset, config: &FitConfig) -> Result<CalibrationModel> {
    if !matches!(config.model_order, 1 | 2) {
        return Err(Error::invalid(format!(
            "model_order must be 1 or 2, got {}",
            config.model_order
        )));
    }
    let mut raw: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for set in &dev.sets {
        for rec in &set.instances {
            let label = rec.label.or(set.label).ok_or_else(|| {
                Error::LabelsRequired(format!(
                    "({}, {}) has no label",
                    rec.source_id, rec.instance_id
                ))
            })?;
            if !(rec.logit.is_finite() && rec.quality.is_finite()) {
                return Err(Error::invalid(format!(
                    "({}, {}) has non-finite logit or quality",
                    rec.source_id, rec.instance_id
                )));
            }
            raw[label.as_index()].push((rec.logit, rec.quality));
        }
    }
    for label in [Label::Real, Label::Fake] {
        let samples = &raw[label.as_index()];
        if samples.is_empty() {
            return Err(Error::invalid(format!(
                "development set has no {label} instances"
            )));
        }
        if distinct_count(samples.iter().map(|s| s.1)) < 2 {
            return Err(Error::invalid(format!(
                "{label} instances need at least two distinct quality values"
            )));
        }
    }

    let all_q = raw.iter().flatten().map(|s| s.1);
    let q_min = all_q.clone().fold(f64::INFINITY, f64::min);
    let q_max = all_q.fold(f64::NEG_INFINITY, f64::max);
    if q_min >= q_max {
        return Err(Error::invalid(
            "quality range of the development set is degenerate",
        ));
    }
    let span = q_max - q_min;
    let normalized: Vec<Vec<(f64, f64)>> = raw
        .iter()
        .map(|s| s.iter().map(|&(l, q)| (l, (q - q_min) / span)).collect())
        .collect();

    let (real, fake) = rayon::join(
        || fit_class(&normalized[0], config),
        || fit_class(&normalized[1], config),
    );
    let (real, fake) = (real?, fake?);

    let mut model = CalibrationModel::new(real.coefficients, fake.coefficients, q_min, q_max);
    if let (Some(r), Some(f)) = (real.quadratic, fake.quadratic) {
        model = model.with_quadratic(QuadraticTerms { real: r, fake: f });
    }
    model.fit_meta.real = real.meta;
    model.fit_meta.fake = fake.meta;
    Ok(model)
}

/// Fits on every query set except the one for `holdout_source`.
pub fn loo_fit(ds: &Dataset, holdout_source: &str, config: &FitConfig) -> Result<CalibrationModel> {
    if !ds.sets.iter().any(|s| s.source_id == holdout_source) {
        return Err(Error::invalid(format!(
            "holdout source {holdout_source:?} is not in the dataset"
        )));
    }
    fit(&ds.filter_sources(|s| s != holdout_source), config)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::types::testutil::rec;
    use crate::types::QuerySet;

    fn synthetic(rng: &mut ChaCha8Rng, c: ClassCoefficients, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let q: f64 = rng.random();
                let sd = ((c.alpha * q + c.beta) / 2.0).exp();
                let l = Normal::new(c.a * q + c.b, sd).unwrap().sample(rng);
                (l, q)
            })
            .collect()
    }

    fn dataset_from(real: &[(f64, f64)], fake: &[(f64, f64)], per_source: usize) -> Dataset {
        let mut recs = Vec::new();
        for (label, data) in [(Label::Real, real), (Label::Fake, fake)] {
            for (i, &(l, q)) in data.iter().enumerate() {
                let src = format!("{label}-{}", i / per_source);
                recs.push(rec(&src, &i.to_string(), l, q, Some(label)));
            }
        }
        Dataset::from_records(recs)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = synthetic(&mut rng, ClassCoefficients::new(2.0, -1.0, -1.0, 0.3), 200);
        for order in [1u8, 2] {
            let obj = ClassObjective::new(&data, order);
            for _ in 0..20 {
                let p: Vec<f64> = (0..obj.n_params())
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect();
                let g = obj.gradient(&p);
                for i in 0..p.len() {
                    let h = 1e-5;
                    let mut hi = p.clone();
                    let mut lo = p.clone();
                    hi[i] += h;
                    lo[i] -= h;
                    let fd = (obj.value(&hi) - obj.value(&lo)) / (2.0 * h);
                    let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", g[i]);
                }
            }
        }
    }

    #[test]
    fn recovers_generating_coefficients() {
        let real_true = ClassCoefficients::new(-3.0, 0.5, -1.0, 0.2);
        let fake_true = ClassCoefficients::new(4.0, -1.0, -2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let real = synthetic(&mut rng, real_true, 10_000);
        let fake = synthetic(&mut rng, fake_true, 10_000);
        let model = fit(&dataset_from(&real, &fake, 100), &FitConfig::default()).unwrap();
        // The standard error of alpha at n = 10k is about sqrt(24 / n) ~ 0.05.
        for (got, want) in [(model.real, real_true), (model.fake, fake_true)] {
            assert_abs_diff_eq!(got.a, want.a, epsilon = 0.1);
            assert_abs_diff_eq!(got.b, want.b, epsilon = 0.1);
            assert_abs_diff_eq!(got.alpha, want.alpha, epsilon = 0.2);
            assert_abs_diff_eq!(got.beta, want.beta, epsilon = 0.1);
        }
        assert!(model.fit_meta.real.converged && model.fit_meta.fake.converged);
        assert_eq!(model.fit_meta.real.n_samples, 10_000);
    }

    #[test]
    fn homoscedastic_fit_reduces_to_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Quality already spans exactly [0, 1] so normalization is the identity.
        let mut real = synthetic(&mut rng, ClassCoefficients::new(-1.5, 0.3, 0.0, -0.4), 500);
        let mut fake = synthetic(&mut rng, ClassCoefficients::new(2.5, 0.1, 0.0, 0.2), 500);
        real[0].1 = 0.0;
        fake[0].1 = 1.0;

        // Closed-form OLS oracle.
        let ols = |d: &[(f64, f64)]| {
            let n = d.len() as f64;
            let mq = d.iter().map(|p| p.1).sum::<f64>() / n;
            let ml = d.iter().map(|p| p.0).sum::<f64>() / n;
            let sxy: f64 = d.iter().map(|p| (p.1 - mq) * (p.0 - ml)).sum();
            let sxx: f64 = d.iter().map(|p| (p.1 - mq).powi(2)).sum();
            let a = sxy / sxx;
            (a, ml - a * mq)
        };

        let cfg = FitConfig {
            variance: VarianceModel::Constant,
            ..FitConfig::default()
        };
        let model = fit(&dataset_from(&real, &fake, 50), &cfg).unwrap();
        for (got, data) in [(model.real, &real), (model.fake, &fake)] {
            let (a, b) = ols(data);
            assert_abs_diff_eq!(got.a, a, epsilon = 1e-6);
            assert_abs_diff_eq!(got.b, b, epsilon = 1e-6);
            assert_eq!(got.alpha, 0.0);
        }
    }

    #[test]
    fn constant_logits_give_flat_mean() {
        let c = 1.75;
        let mut recs = Vec::new();
        for (label, src) in [(Label::Real, "r"), (Label::Fake, "f")] {
            for i in 0..20 {
                recs.push(rec(
                    src,
                    &i.to_string(),
                    if label == Label::Fake { c } else { -c },
                    i as f64,
                    Some(label),
                ));
            }
        }
        let model = fit(&Dataset::from_records(recs), &FitConfig::default()).unwrap();
        assert_abs_diff_eq!(model.fake.a, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(model.fake.b, c, epsilon = 1e-9);
        assert_abs_diff_eq!(model.real.b, -c, epsilon = 1e-9);
        assert!(model.real.is_valid() && model.fake.is_valid());
    }

    #[test]
    fn fit_is_deterministic_and_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = synthetic(
            &mut rng,
            ClassCoefficients::new(-2.0, 0.0, -0.5, 0.0),
            2_000,
        );
        let fake = synthetic(
            &mut rng,
            ClassCoefficients::new(3.0, -0.5, -1.5, 0.4),
            2_000,
        );
        let ds = dataset_from(&real, &fake, 40);
        for order in [1u8, 2] {
            let cfg = FitConfig {
                model_order: order,
                ..FitConfig::default()
            };
            let a = fit(&ds, &cfg).unwrap();
            let b = fit(&ds, &cfg).unwrap();
            assert_eq!(a, b);
            for meta in [&a.fit_meta.real, &a.fit_meta.fake] {
                assert!(meta.objective <= meta.initial_objective);
            }
            assert_eq!(a.model_order, order);
        }
    }

    #[test]
    fn fit_preconditions() {
        let one_class = Dataset::from_records(
            (0..5).map(|i| rec("s", &i.to_string(), 1.0, i as f64, Some(Label::Fake))),
        );
        assert!(fit(&one_class, &FitConfig::default()).is_err());

        let flat_q = Dataset::from_records((0..4).map(|i| {
            rec(
                if i % 2 == 0 { "a" } else { "b" },
                &i.to_string(),
                1.0,
                0.5,
                Label::from_index(i % 2),
            )
        }));
        assert!(fit(&flat_q, &FitConfig::default()).is_err());

        let unlabeled = Dataset::from_records([rec("s", "a", 1.0, 0.5, None)]);
        assert!(matches!(
            fit(&unlabeled, &FitConfig::default()),
            Err(Error::LabelsRequired(_))
        ));
    }

    fn three_sources() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sets = Vec::new();
        for (src, label) in [
            ("A", Label::Real),
            ("B", Label::Fake),
            ("C", Label::Fake),
            ("D", Label::Real),
        ] {
            let inst = (0..30)
                .map(|i| {
                    let q: f64 = rng.random();
                    let l = if label == Label::Fake {
                        2.0 * q
                    } else {
                        -2.0 * q
                    } + rng.random_range(-1.0..1.0);
                    rec(src, &i.to_string(), l, q, Some(label))
                })
                .collect();
            sets.push(QuerySet::new(src, Some(label), inst));
        }
        Dataset::new(sets)
    }

    #[test]
    fn loo_equals_fit_without_holdout() {
        let ds = three_sources();
        let cfg = FitConfig::default();
        let loo = loo_fit(&ds, "B", &cfg).unwrap();
        let direct = fit(&ds.filter_sources(|s| s != "B"), &cfg).unwrap();
        assert_eq!(loo, direct);
        for s in ["A", "B", "C", "D"] {
            loo_fit(&ds, s, &cfg).unwrap();
        }
        assert!(loo_fit(&ds, "Z", &cfg).is_err());
    }

    #[test]
    fn loo_on_single_source_fails() {
        let ds = three_sources().filter_sources(|s| s == "A");
        assert!(loo_fit(&ds, "A", &FitConfig::default()).is_err());
    }
}
