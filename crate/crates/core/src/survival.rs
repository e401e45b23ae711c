//! Product-limit estimation and Cox proportional-hazards fitting with a
//! Breslow baseline. Used to model the distribution of the censoring time:
//! callers flip the indicator so that censorings become the events.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-function evaluation side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    /// Right-continuous value `S(t)`.
    Right,
    /// Left limit `S(t-)`.
    LeftLimit,
}

/// Kaplan-Meier curve over the distinct event times.
///
/// `surv[k]` is the product of `(at_risk[j] - events[j]) / at_risk[j]` over
/// `j <= k`. Tied events are processed before tied censorings, so subjects
/// censored at `t` are still at risk for events at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub surv: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Step-function evaluation; `LeftLimit` gives `S(t-)`. Beyond the last
    /// event time the curve is constant.
    pub fn eval(&self, t: f64, side: Side) -> f64 {
        let idx = match side {
            Side::Right => self.times.partition_point(|&u| u <= t),
            Side::LeftLimit => self.times.partition_point(|&u| u < t),
        };
        if idx == 0 {
            1.0
        } else {
            self.surv[idx - 1]
        }
    }
}

/// Product-limit estimate from right-censored data. `event[i]` is true when
/// subject `i` experienced the event (as opposed to being censored).
pub fn km_fit(times: &[f64], event: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if times.len() != event.len() {
        return Err(Error::InvalidData(
            "times and event must have equal length".into(),
        ));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidData(
            "times must be finite and nonnegative".into(),
        ));
    }
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());

    let mut out = KmCurve {
        times: Vec::new(),
        surv: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0usize;
        while j < n && times[order[j]] == t {
            if event[order[j]] {
                d += 1;
            }
            j += 1;
        }
        let at_risk = n - i;
        if d > 0 {
            // Written as 1 - d/n so the factors are bit-identical to the
            // cox survival product evaluated at theta = 0.
            s *= 1.0 - d as f64 / at_risk as f64;
            out.times.push(t);
            out.surv.push(s);
            out.at_risk.push(at_risk);
            out.events.push(d);
        }
        i = j;
    }
    Ok(out)
}

/// Free-function form of [`KmCurve::eval`].
pub fn km_eval(curve: &KmCurve, t: f64, side: Side) -> f64 {
    curve.eval(t, side)
}

/// How conditional survival is assembled from the baseline increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurvivalForm {
    /// Discrete product over event times: `prod(1 - lambda0_j * exp(theta'h))`.
    DiscreteProduct,
    /// `exp(-Lambda(u))` with the same increments; offered for sensitivity
    /// analysis.
    ExpNegCumHaz,
}

#[derive(Debug, Clone)]
pub struct CoxOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Divergence guard on the standardized coefficients.
    pub theta_cap: f64,
    /// Skip estimation and evaluate everything at this coefficient vector
    /// (original covariate scale). Test hook.
    pub pin_theta: Option<Vec<f64>>,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            tolerance: 1e-9,
            max_iter: 100,
            max_halvings: 20,
            theta_cap: 50.0,
            pin_theta: None,
        }
    }
}

/// A fitted proportional-hazards model with Breslow baseline increments.
///
/// `baseline_increments[j]` is the hazard mass at `baseline_times[j]` for the
/// raw (uncentered) covariates, so
/// `increments[j] * sum_{k at risk} exp(theta' h_k) = events at t_j`.
#[derive(Debug, Clone)]
pub struct CoxFit {
    pub theta: Vec<f64>,
    pub baseline_times: Vec<f64>,
    pub baseline_increments: Vec<f64>,
    pub log_partial_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    /// Inverse observed information at `theta`, on the original scale.
    pub covariance: DMatrix<f64>,
    // Standardization used internally; survival evaluation goes through the
    // centered form for numerical range.
    means: Vec<f64>,
    sds: Vec<f64>,
    theta_scaled: Vec<f64>,
    centered_increments: Vec<f64>,
}

/// Survival probability along with a degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalValue {
    pub value: f64,
    /// A product factor was nonpositive and the value was floored.
    pub degenerate: bool,
}

impl CoxFit {
    pub fn r(&self) -> usize {
        self.theta.len()
    }

    /// Conditional probability of remaining event-free through `u` for a
    /// subject with covariates `h_row`.
    ///
    /// With `Side::LeftLimit` the product runs over event times strictly
    /// before `u`; `Side::Right` includes ties at `u`. Nonpositive factors
    /// floor the result at `floor` and set the degeneracy flag.
    pub fn survival_at(
        &self,
        h_row: &[f64],
        u: f64,
        side: Side,
        form: SurvivalForm,
        floor: f64,
    ) -> SurvivalValue {
        assert_eq!(h_row.len(), self.r(), "covariate row has wrong length");
        let mut lp = 0.0;
        for (j, h) in h_row.iter().enumerate() {
            lp += self.theta_scaled[j] * (h - self.means[j]) / self.sds[j];
        }
        let e = lp.clamp(-700.0, 700.0).exp();
        let end = match side {
            Side::Right => self.baseline_times.partition_point(|&t| t <= u),
            Side::LeftLimit => self.baseline_times.partition_point(|&t| t < u),
        };
        match form {
            SurvivalForm::DiscreteProduct => {
                let mut prod = 1.0;
                for j in 0..end {
                    let factor = 1.0 - self.centered_increments[j] * e;
                    if factor <= 0.0 {
                        return SurvivalValue {
                            value: floor,
                            degenerate: true,
                        };
                    }
                    prod *= factor;
                }
                SurvivalValue {
                    value: prod,
                    degenerate: false,
                }
            }
            SurvivalForm::ExpNegCumHaz => {
                let cum: f64 = self.centered_increments[..end]
                    .iter()
                    .map(|inc| inc * e)
                    .sum();
                SurvivalValue {
                    value: (-cum).exp(),
                    degenerate: false,
                }
            }
        }
    }
}

// One accumulation pass over the risk sets, descending in time.
// `covs` is n x r row-major and already centered/scaled; `order` is sorted by
// descending time. Returns (log partial likelihood, score, information).
fn breslow_pass(
    times: &[f64],
    event: &[bool],
    covs: &[f64],
    r: usize,
    order: &[usize],
    theta: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = times.len();
    let mut s0 = 0.0f64;
    let mut s1: DVector<f64> = DVector::zeros(r);
    let mut s2: DMatrix<f64> = DMatrix::zeros(r, r);
    let mut ll = 0.0f64;
    let mut score: DVector<f64> = DVector::zeros(r);
    let mut info: DMatrix<f64> = DMatrix::zeros(r, r);

    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        while j < n && times[order[j]] == t {
            let p = order[j];
            let row = &covs[p * r..(p + 1) * r];
            let mut lp = 0.0;
            for k in 0..r {
                lp += theta[k] * row[k];
            }
            let e = lp.clamp(-700.0, 700.0).exp();
            s0 += e;
            for k in 0..r {
                s1[k] += e * row[k];
                for l in 0..r {
                    s2[(k, l)] += e * row[k] * row[l];
                }
            }
            j += 1;
        }
        let mut d = 0usize;
        let mut ssum: DVector<f64> = DVector::zeros(r);
        for &p in &order[i..j] {
            if event[p] {
                d += 1;
                let row = &covs[p * r..(p + 1) * r];
                for k in 0..r {
                    ssum[k] += row[k];
                }
            }
        }
        if d > 0 {
            let df = d as f64;
            let mean = &s1 / s0;
            ll += ssum.dot(theta) - df * s0.ln();
            score += &ssum - &(df * &mean);
            for k in 0..r {
                for l in 0..r {
                    info[(k, l)] += df * (s2[(k, l)] / s0 - mean[k] * mean[l]);
                }
            }
        }
        i = j;
    }
    (ll, score, info)
}

fn sort_desc_canonical(times: &[f64], event: &[bool], covs: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    // Total order so that results do not depend on the input permutation.
    order.sort_by(|&a, &b| {
        times[b]
            .partial_cmp(&times[a])
            .unwrap()
            .then_with(|| event[b].cmp(&event[a]))
            .then_with(|| {
                let ra = &covs[a * r..(a + 1) * r];
                let rb = &covs[b * r..(b + 1) * r];
                ra.partial_cmp(rb).unwrap()
            })
    });
    order
}

/// Fit the Cox model by damped Newton iterations on the Breslow partial
/// likelihood. `covariates` holds one row per subject.
pub fn cox_fit(
    times: &[f64],
    event: &[bool],
    covariates: &[Vec<f64>],
    opts: &CoxOptions,
) -> Result<CoxFit> {
    let n = times.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if event.len() != n || covariates.len() != n {
        return Err(Error::InvalidData("input lengths differ".into()));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidData(
            "times must be finite and nonnegative".into(),
        ));
    }
    let r = covariates[0].len();
    if r == 0 {
        return Err(Error::InvalidData(
            "cox model needs at least one covariate".into(),
        ));
    }
    if covariates.iter().any(|row| row.len() != r) {
        return Err(Error::InvalidData("ragged covariate rows".into()));
    }
    let d_total = event.iter().filter(|e| **e).count();
    if d_total == 0 {
        return Err(Error::InvalidData("no events".into()));
    }

    // Standardize columns; a constant column has a flat likelihood. Sums run
    // over sorted values so the result does not depend on the row order.
    let mut means = vec![0.0; r];
    let mut sds = vec![0.0; r];
    for j in 0..r {
        let mean = sorted_mean(covariates.iter().map(|row| row[j]));
        let var = sorted_mean(covariates.iter().map(|row| (row[j] - mean).powi(2)));
        if var == 0.0 {
            return Err(Error::ConstantCovariate { column: j });
        }
        means[j] = mean;
        sds[j] = var.sqrt();
    }
    let mut covs = vec![0.0; n * r];
    for (i, row) in covariates.iter().enumerate() {
        for j in 0..r {
            covs[i * r + j] = (row[j] - means[j]) / sds[j];
        }
    }
    let order = sort_desc_canonical(times, event, &covs, r);

    let score_scale = (d_total as f64).max(1.0);
    let mut theta = DVector::zeros(r);
    if let Some(pin) = &opts.pin_theta {
        if pin.len() != r {
            return Err(Error::InvalidData("pinned theta has wrong length".into()));
        }
        for j in 0..r {
            theta[j] = pin[j] * sds[j];
        }
    }

    let (mut ll, mut score, mut info) = breslow_pass(times, event, &covs, r, &order, &theta);
    let mut iterations = 0;
    let mut converged = opts.pin_theta.is_some();
    let mut big_steps = 0usize;

    if opts.pin_theta.is_none() {
        loop {
            if iterations >= opts.max_iter {
                return Err(Error::NonConvergence {
                    iterations,
                    score_norm: score.amax(),
                    last_beta: unscale(&theta, &sds),
                    separation: false,
                });
            }
            let chol = info.clone().cholesky().ok_or(Error::SingularDesign)?;
            let step = chol.solve(&score);
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let cand = &theta + &(scale * &step);
                let (ll2, score2, info2) = breslow_pass(times, event, &covs, r, &order, &cand);
                if ll2.is_finite() && ll2 >= ll - 1e-12 {
                    accepted = Some((cand, ll2, score2, info2, scale));
                    break;
                }
                scale *= 0.5;
            }
            let Some((cand, ll2, score2, info2, used_scale)) = accepted else {
                return Err(Error::NonConvergence {
                    iterations,
                    score_norm: score.amax(),
                    last_beta: unscale(&theta, &sds),
                    separation: false,
                });
            };
            iterations += 1;
            let step_norm = (used_scale * &step).amax();
            let rel_step = step_norm / (1.0 + theta.amax());
            theta = cand;
            ll = ll2;
            score = score2;
            info = info2;

            if theta.amax() > opts.theta_cap {
                return Err(Error::Divergence {
                    norm: theta.amax(),
                    last_theta: unscale(&theta, &sds),
                });
            }
            if step_norm > 5.0 {
                big_steps += 1;
                if big_steps >= 5 {
                    return Err(Error::Divergence {
                        norm: theta.amax(),
                        last_theta: unscale(&theta, &sds),
                    });
                }
            } else {
                big_steps = 0;
            }
            if rel_step <= opts.tolerance && score.amax() <= opts.tolerance * score_scale {
                converged = true;
                break;
            }
        }
    }

    // Baseline increments at the solution, ascending in time.
    let mut baseline_times = Vec::new();
    let mut centered_increments = Vec::new();
    {
        let mut s0 = 0.0;
        let mut i = 0;
        while i < n {
            let t = times[order[i]];
            let mut j = i;
            while j < n && times[order[j]] == t {
                let p = order[j];
                let row = &covs[p * r..(p + 1) * r];
                let mut lp = 0.0;
                for k in 0..r {
                    lp += theta[k] * row[k];
                }
                s0 += lp.clamp(-700.0, 700.0).exp();
                j += 1;
            }
            let d = (i..j).filter(|&idx| event[order[idx]]).count();
            if d > 0 {
                baseline_times.push(t);
                centered_increments.push(d as f64 / s0);
            }
            i = j;
        }
        baseline_times.reverse();
        centered_increments.reverse();
    }
    // Convert to the raw-covariate form: divide by exp(theta' means).
    let shift: f64 = (0..r).map(|j| theta[j] * means[j] / sds[j]).sum();
    let baseline_increments: Vec<f64> = centered_increments
        .iter()
        .map(|inc| inc * (-shift).exp())
        .collect();

    let chol = info.clone().cholesky().ok_or(Error::SingularDesign)?;
    let cov_scaled = chol.inverse();
    let mut covariance = DMatrix::zeros(r, r);
    for a in 0..r {
        for b in 0..r {
            covariance[(a, b)] = cov_scaled[(a, b)] / (sds[a] * sds[b]);
        }
    }

    Ok(CoxFit {
        theta: unscale(&theta, &sds),
        baseline_times,
        baseline_increments,
        log_partial_likelihood: ll,
        converged,
        iterations,
        score_norm: score.amax(),
        covariance,
        means,
        sds,
        theta_scaled: theta.iter().cloned().collect(),
        centered_increments,
    })
}

fn unscale(theta: &DVector<f64>, sds: &[f64]) -> Vec<f64> {
    theta.iter().zip(sds).map(|(t, s)| t / s).collect()
}

fn sorted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.iter().sum::<f64>() / v.len() as f64
}

/// Log partial likelihood at an arbitrary coefficient vector on the original
/// covariate scale. Used by finite-difference checks.
pub fn cox_log_partial_likelihood(
    times: &[f64],
    event: &[bool],
    covariates: &[Vec<f64>],
    theta: &[f64],
) -> Result<f64> {
    let (ll, _, _) = score_info_raw(times, event, covariates, theta)?;
    Ok(ll)
}

/// Score and observed information of the partial likelihood at `theta`
/// (original covariate scale).
pub fn cox_score_information(
    times: &[f64],
    event: &[bool],
    covariates: &[Vec<f64>],
    theta: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (_, score, info) = score_info_raw(times, event, covariates, theta)?;
    Ok((score.iter().cloned().collect(), info))
}

fn score_info_raw(
    times: &[f64],
    event: &[bool],
    covariates: &[Vec<f64>],
    theta: &[f64],
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let n = times.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let r = theta.len();
    if covariates.iter().any(|row| row.len() != r) {
        return Err(Error::InvalidData(
            "covariate row length != theta length".into(),
        ));
    }
    // Center only: the value, score, and information are shift-invariant.
    let mut means = vec![0.0; r];
    for j in 0..r {
        means[j] = sorted_mean(covariates.iter().map(|row| row[j]));
    }
    let mut covs = vec![0.0; n * r];
    for (i, row) in covariates.iter().enumerate() {
        for j in 0..r {
            covs[i * r + j] = row[j] - means[j];
        }
    }
    let order = sort_desc_canonical(times, event, &covs, r);
    let th = DVector::from_column_slice(theta);
    Ok(breslow_pass(times, event, &covs, r, &order, &th))
}
