//! Weighted estimating-equation solver for identity, log, and logit links,
//! with sandwich and classical model-based covariance estimates.
//!
//! The score is `sum_i w_i h_i (y_i - mu_i) X_i` with `X_i = (1, x_i, z_i')'`.
//! For these three canonical link/variance pairs the scalar `h` is constant
//! (equal to one with unit dispersion), so the Newton updates below use the
//! exact Jacobian `A = sum_i w_i (dmu/deta)_i X_i X_i'`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WeightVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkKind {
    Identity,
    Log,
    Logit,
}

impl LinkKind {
    pub fn link(self, mu: f64) -> f64 {
        match self {
            LinkKind::Identity => mu,
            LinkKind::Log => mu.ln(),
            LinkKind::Logit => (mu / (1.0 - mu)).ln(),
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            LinkKind::Identity => eta,
            LinkKind::Log => eta.exp(),
            LinkKind::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative of the inverse link at `eta`.
    pub fn dmu_deta(self, eta: f64) -> f64 {
        match self {
            LinkKind::Identity => 1.0,
            LinkKind::Log => eta.exp(),
            LinkKind::Logit => {
                let mu = self.inverse(eta);
                mu * (1.0 - mu)
            }
        }
    }

    /// Variance function v(mu).
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            LinkKind::Identity => 1.0,
            LinkKind::Log => mu,
            LinkKind::Logit => mu * (1.0 - mu),
        }
    }

    fn mu_in_domain(self, mu: f64) -> bool {
        match self {
            LinkKind::Identity => mu.is_finite(),
            LinkKind::Log => mu.is_finite() && mu > 0.0,
            LinkKind::Logit => mu > 0.0 && mu < 1.0,
        }
    }

    /// Dispersion is fixed at one for the logit link.
    pub fn fixed_dispersion(self) -> bool {
        matches!(self, LinkKind::Logit)
    }
}

impl std::fmt::Display for LinkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LinkKind::Identity => "identity",
            LinkKind::Log => "log",
            LinkKind::Logit => "logit",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tolerance: 1e-8,
            max_iter: 100,
            max_halvings: 20,
        }
    }
}

/// A dense regression design: rows of covariates, outcomes, and weights.
///
/// [`fit_glm`] builds the standard `(1, x, z)` design from the complete
/// cases of a dataset; selection models and interaction designs construct
/// theirs directly.
#[derive(Debug, Clone)]
pub struct Design {
    k: usize,
    rows: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Design {
    pub fn new(rows: Vec<Vec<f64>>, y: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = rows[0].len();
        if k == 0 {
            return Err(Error::InvalidData("design has no columns".into()));
        }
        if rows.len() != y.len() || rows.len() != w.len() {
            return Err(Error::InvalidData(
                "design row/outcome/weight lengths differ".into(),
            ));
        }
        if w.iter().any(|wi| !wi.is_finite() || *wi < 0.0) {
            return Err(Error::InvalidData(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let mut flat = Vec::with_capacity(rows.len() * k);
        for row in &rows {
            if row.len() != k {
                return Err(Error::InvalidData("ragged design rows".into()));
            }
            flat.extend_from_slice(row);
        }
        Ok(Design {
            k,
            rows: flat,
            y,
            w,
        })
    }

    /// Design over the complete cases: `(1, v, z)` plus an optional trailing
    /// interaction column `v * z[j]`.
    pub fn from_complete_cases(
        d: &Dataset,
        wv: &WeightVector,
        interaction_z: Option<usize>,
    ) -> Result<Self> {
        d.require_fit_size()?;
        if wv.w.len() != d.n() {
            return Err(Error::InvalidData("weight vector length mismatch".into()));
        }
        if let Some(j) = interaction_z {
            if j >= d.p() {
                return Err(Error::InvalidData(format!(
                    "interaction column {} out of range (p = {})",
                    j,
                    d.p()
                )));
            }
        }
        let k = d.p() + 2 + interaction_z.map_or(0, |_| 1);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        for (i, r) in d.records().iter().enumerate() {
            if !r.delta {
                continue;
            }
            let mut row = Vec::with_capacity(k);
            row.push(1.0);
            row.push(r.v);
            row.extend_from_slice(&r.z);
            if let Some(j) = interaction_z {
                row.push(r.v * r.z[j]);
            }
            rows.push(row);
            y.push(r.y);
            w.push(wv.w[i]);
        }
        if rows.is_empty() {
            return Err(Error::NoCompleteCases);
        }
        Design::new(rows, y, w)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }
}

/// Result of a weighted GLM fit.
#[derive(Debug, Clone)]
pub struct GlmFit {
    /// Coefficients, ordered (intercept, x, z..., interaction).
    pub beta: Vec<f64>,
    /// Sandwich covariance `A^-1 B A^-T` with weights treated as fixed.
    pub covariance: DMatrix<f64>,
    /// Classical model-based covariance `dispersion * A^-1`.
    pub model_covariance: DMatrix<f64>,
    pub dispersion: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
}

impl GlmFit {
    pub fn se(&self, j: usize) -> f64 {
        self.covariance[(j, j)].max(0.0).sqrt()
    }

    pub fn model_se(&self, j: usize) -> f64 {
        self.model_covariance[(j, j)].max(0.0).sqrt()
    }
}

/// Estimating-function value `sum_i w_i h (y_i - mu_i) X_i` at `beta`.
/// `h` is one for these canonical links with unit dispersion.
pub fn glm_score(beta: &[f64], design: &Design, link: LinkKind) -> Result<Vec<f64>> {
    if beta.len() != design.k() {
        return Err(Error::InvalidData("beta length != design columns".into()));
    }
    let k = design.k();
    let mut score = vec![0.0; k];
    for i in 0..design.n() {
        let row = design.row(i);
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let mu = link.inverse(eta);
        if !link.mu_in_domain(mu) {
            return Err(Error::Domain(format!(
                "mean {} outside the {} mean space at row {}",
                mu, link, i
            )));
        }
        let c = design.w()[i] * (design.y()[i] - mu);
        for j in 0..k {
            score[j] += c * row[j];
        }
    }
    Ok(score)
}

/// Negative Jacobian of the score: `A = sum_i w_i (dmu/deta)_i X_i X_i'`.
pub fn score_negative_jacobian(
    beta: &[f64],
    design: &Design,
    link: LinkKind,
) -> Result<DMatrix<f64>> {
    if beta.len() != design.k() {
        return Err(Error::InvalidData("beta length != design columns".into()));
    }
    let k = design.k();
    let mut a = DMatrix::zeros(k, k);
    for i in 0..design.n() {
        let row = design.row(i);
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let c = design.w()[i] * link.dmu_deta(eta);
        for p in 0..k {
            for q in 0..k {
                a[(p, q)] += c * row[p] * row[q];
            }
        }
    }
    Ok(a)
}

fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(a.clone()).ok_or(Error::SingularDesign)?;
    Ok(chol.solve(b))
}

fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(a.clone()).ok_or(Error::SingularDesign)?;
    Ok(chol.inverse())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn starting_beta(design: &Design, link: LinkKind) -> Result<DVector<f64>> {
    let k = design.k();
    match link {
        LinkKind::Identity | LinkKind::Logit => Ok(DVector::zeros(k)),
        LinkKind::Log => {
            // Identity regression of log(y + ebar), ebar half the smallest
            // positive outcome. Deterministic start.
            if design.y().iter().any(|y| *y < 0.0) {
                return Err(Error::Domain(
                    "log link requires nonnegative outcomes".into(),
                ));
            }
            let min_pos = design
                .y()
                .iter()
                .cloned()
                .filter(|y| *y > 0.0)
                .fold(f64::INFINITY, f64::min);
            if !min_pos.is_finite() {
                return Err(Error::Domain("log link requires a positive outcome".into()));
            }
            let ebar = 0.5 * min_pos;
            let mut a = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for i in 0..design.n() {
                let row = design.row(i);
                let target = (design.y()[i] + ebar).ln();
                let w = design.w()[i];
                for p in 0..k {
                    b[p] += w * target * row[p];
                    for q in 0..k {
                        a[(p, q)] += w * row[p] * row[q];
                    }
                }
            }
            spd_solve(&a, &b)
        }
    }
}

/// Solve the weighted estimating equation on an explicit design.
pub fn fit_design(design: &Design, link: LinkKind, opts: &FitOptions) -> Result<GlmFit> {
    let k = design.k();
    if design.n() < k {
        return Err(Error::InvalidData(format!(
            "{} rows cannot identify {} coefficients",
            design.n(),
            k
        )));
    }
    match link {
        LinkKind::Logit => {
            if design.y().iter().any(|y| *y < 0.0 || *y > 1.0) {
                return Err(Error::Domain(
                    "logit link requires outcomes in [0, 1]".into(),
                ));
            }
        }
        LinkKind::Log => {
            if design.y().iter().any(|y| *y < 0.0) {
                return Err(Error::Domain(
                    "log link requires nonnegative outcomes".into(),
                ));
            }
        }
        LinkKind::Identity => {}
    }

    // Tolerance scale for the score: proportional to the weights so that
    // rescaling all weights by a constant does not change convergence.
    let score_scale = design
        .w()
        .iter()
        .zip(design.y())
        .map(|(w, y)| w * (1.0 + y.abs()))
        .sum::<f64>()
        .max(1.0);

    // Solve in column-equilibrated coordinates: x_ij -> x_ij / s_j with
    // s_j the column max-abs. The fit is equivariant (beta_j -> beta_j / s_j
    // on the way back) and the Newton steps stay well conditioned when
    // covariates live on very different scales.
    let scales = column_scales(design);
    let work = scale_columns(design, &scales);
    let unscale =
        |b: &DVector<f64>| -> Vec<f64> { b.iter().zip(&scales).map(|(bj, s)| bj / s).collect() };

    let mut beta = starting_beta(&work, link)?;
    let mut iterations = 0;
    let converged;

    if link == LinkKind::Identity {
        // Closed form: one weighted least-squares solve.
        let a = score_negative_jacobian(beta.as_slice(), &work, link)?;
        let u = DVector::from_column_slice(&glm_score(beta.as_slice(), &work, link)?);
        beta += spd_solve(&a, &u)?;
        iterations = 1;
        converged = true;
    } else {
        let mut score = glm_score(beta.as_slice(), &work, link)?;
        let mut score_norm = max_abs(&score);
        let mut loglik = quasi_loglik(beta.as_slice(), &work, link);
        loop {
            if iterations >= opts.max_iter {
                return Err(Error::NonConvergence {
                    iterations,
                    score_norm,
                    last_beta: unscale(&beta),
                    separation: link == LinkKind::Logit
                        && looks_separated(beta.as_slice(), &work, link),
                });
            }
            let a = score_negative_jacobian(beta.as_slice(), &work, link)?;
            let mut step = spd_solve(&a, &DVector::from_column_slice(&score))?;
            // In equilibrated coordinates a sane update moves each coefficient
            // by O(1); cap the step so a near-singular Hessian cannot fling
            // the iterate out of the likelihood's quadratic region.
            let cap = 10.0 * (1.0 + beta.amax());
            if step.amax() > cap {
                step *= cap / step.amax();
            }
            // Step-halving on quasi-likelihood decrease keeps heavy weights
            // from derailing the iteration.
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let cand = &beta + &(scale * &step);
                let cand_ll = quasi_loglik(cand.as_slice(), &work, link);
                if cand_ll.is_finite() && cand_ll >= loglik - 1e-12 * (1.0 + loglik.abs()) {
                    match glm_score(cand.as_slice(), &work, link) {
                        Ok(s) => {
                            accepted = Some((cand, s, cand_ll, scale));
                            break;
                        }
                        Err(Error::Domain(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                scale *= 0.5;
            }
            let Some((cand, s, cand_ll, used_scale)) = accepted else {
                // No step improves the quasi-likelihood: the iterate is a
                // numerical stationary point. The coefficients of a
                // quasi-separated fit drift while the fitted means stay put,
                // so this counts as converged; outright separation is
                // rejected after the loop.
                converged = true;
                break;
            };
            iterations += 1;
            let rel_step = (used_scale * &step).amax() / (1.0 + beta.amax());
            // Numerical stall of the objective, deliberately far below the
            // solver tolerance so well-posed fits keep polishing.
            let ll_stalled = (cand_ll - loglik).abs() <= 1e-14 * (1.0 + cand_ll.abs());
            beta = cand;
            score = s;
            score_norm = max_abs(&score);
            loglik = cand_ll;
            if (rel_step <= opts.tolerance && score_norm <= opts.tolerance * score_scale)
                || ll_stalled
            {
                converged = true;
                break;
            }
        }
        if looks_separated(beta.as_slice(), &work, link) {
            return Err(Error::NonConvergence {
                iterations,
                score_norm,
                last_beta: unscale(&beta),
                separation: true,
            });
        }
    }

    let beta = DVector::from_vec(unscale(&beta));
    let score = glm_score(beta.as_slice(), design, link)?;
    let score_norm = max_abs(&score);
    let a = score_negative_jacobian(beta.as_slice(), design, link)?;
    let dispersion = estimate_dispersion(beta.as_slice(), design, link)?;
    let covariance = sandwich_covariance(beta.as_slice(), design, link)?;
    let model_covariance = spd_inverse(&a)? * dispersion;

    Ok(GlmFit {
        beta: beta.as_slice().to_vec(),
        covariance,
        model_covariance,
        dispersion,
        iterations,
        converged,
        score_norm,
    })
}

// Weighted quasi-log-likelihood up to a beta-free constant; minus infinity on
// overflow so a line search simply rejects the step.
fn quasi_loglik(beta: &[f64], design: &Design, link: LinkKind) -> f64 {
    let mut ll = 0.0;
    for i in 0..design.n() {
        let row = design.row(i);
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let y = design.y()[i];
        let w = design.w()[i];
        let term = match link {
            LinkKind::Identity => -0.5 * (y - eta) * (y - eta),
            LinkKind::Log => y * eta - eta.exp(),
            // log(1 + e^eta) via the stable softplus form.
            LinkKind::Logit => y * eta - (eta.max(0.0) + (-eta.abs()).exp().ln_1p()),
        };
        ll += w * term;
    }
    ll
}

fn column_scales(design: &Design) -> Vec<f64> {
    let k = design.k();
    let mut s = vec![0.0f64; k];
    for i in 0..design.n() {
        for (j, x) in design.row(i).iter().enumerate() {
            s[j] = s[j].max(x.abs());
        }
    }
    for v in s.iter_mut() {
        if *v == 0.0 {
            *v = 1.0;
        }
    }
    s
}

fn scale_columns(design: &Design, scales: &[f64]) -> Design {
    let rows: Vec<Vec<f64>> = (0..design.n())
        .map(|i| {
            design
                .row(i)
                .iter()
                .zip(scales)
                .map(|(x, s)| x / s)
                .collect()
        })
        .collect();
    Design::new(rows, design.y().to_vec(), design.w().to_vec()).expect("scaled design is valid")
}

// Perfect classification with a large linear predictor is the usual fingerprint
// of complete separation.
fn looks_separated(beta: &[f64], design: &Design, link: LinkKind) -> bool {
    let mut max_eta: f64 = 0.0;
    for i in 0..design.n() {
        let row = design.row(i);
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let mu = link.inverse(eta);
        if (design.y()[i] - mu).abs() >= 0.5 {
            return false;
        }
        max_eta = max_eta.max(eta.abs());
    }
    max_eta > 10.0
}

/// Fit the regression of `y` on `(1, x, z)` over the complete cases with the
/// supplied weights. The identity link is solved in closed form, the log and
/// logit links by damped Newton iterations.
pub fn fit_glm(
    d: &Dataset,
    wv: &WeightVector,
    link: LinkKind,
    opts: &FitOptions,
) -> Result<GlmFit> {
    let design = Design::from_complete_cases(d, wv, None)?;
    fit_design(&design, link, opts)
}

/// Sandwich covariance `A^-1 B A^-T` at `beta`, with
/// `B = sum_i w_i^2 (y_i - mu_i)^2 X_i X_i'` (weights enter the estimating
/// function linearly, hence squared in the outer product).
pub fn sandwich_covariance(beta: &[f64], design: &Design, link: LinkKind) -> Result<DMatrix<f64>> {
    let k = design.k();
    let a = score_negative_jacobian(beta, design, link)?;
    let a_inv = spd_inverse(&a)?;
    let mut b = DMatrix::zeros(k, k);
    for i in 0..design.n() {
        let row = design.row(i);
        let eta: f64 = row.iter().zip(beta).map(|(x, bj)| x * bj).sum();
        let mu = link.inverse(eta);
        let c = (design.w()[i] * (design.y()[i] - mu)).powi(2);
        for p in 0..k {
            for q in 0..k {
                b[(p, q)] += c * row[p] * row[q];
            }
        }
    }
    let cov = &a_inv * b * a_inv.transpose();
    // Symmetrize away rounding asymmetry.
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Pearson-type dispersion over the design rows:
/// `sum w (y - mu)^2 / v(mu)` divided by (rows - columns). Identically one
/// for the logit link.
pub fn estimate_dispersion(beta: &[f64], design: &Design, link: LinkKind) -> Result<f64> {
    if link.fixed_dispersion() {
        return Ok(1.0);
    }
    let n = design.n();
    let k = design.k();
    if n <= k {
        return Err(Error::NonpositiveDof {
            complete: n,
            params: k,
        });
    }
    let mut pearson = 0.0;
    for i in 0..n {
        let row = design.row(i);
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let mu = link.inverse(eta);
        if !link.mu_in_domain(mu) {
            return Err(Error::Domain(format!(
                "mean {} outside the {} mean space",
                mu, link
            )));
        }
        let r = design.y()[i] - mu;
        pearson += design.w()[i] * r * r / link.variance(mu);
    }
    Ok(pearson / (n - k) as f64)
}
