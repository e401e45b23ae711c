//! Construction of the selection-probability weight vectors: complete-case,
//! logistic, reverse-role Kaplan-Meier, and Cox proportional hazards, plus
//! weight stabilization.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WeightScheme, WeightVector};
use crate::error::{Error, Result};
use crate::glm::{fit_design, Design, FitOptions, LinkKind};
use crate::survival::{cox_fit, km_fit, CoxOptions, KmCurve, Side, SurvivalForm};

/// How to build a weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub scheme: WeightScheme,
    /// Whether the outcome enters the selection model.
    #[serde(default = "default_true")]
    pub include_outcome: bool,
    #[serde(default)]
    pub stabilize: bool,
    /// Minimum selection probability; probabilities below it are raised and
    /// counted.
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Optional symmetric percentile truncation of the positive weights,
    /// in (0.5, 1].
    #[serde(default)]
    pub truncate_percentile: Option<f64>,
    /// Sidedness for survival-based probabilities. The left limit evaluates
    /// the probability of remaining uncensored up to just before the observed
    /// value.
    #[serde(default = "default_side")]
    pub side: Side,
    /// How the Cox scheme assembles conditional survival; the exponential
    /// form is offered for sensitivity analysis.
    #[serde(default = "default_form")]
    pub survival_form: SurvivalForm,
}

fn default_true() -> bool {
    true
}

fn default_floor() -> f64 {
    1e-6
}

fn default_side() -> Side {
    Side::LeftLimit
}

fn default_form() -> SurvivalForm {
    SurvivalForm::DiscreteProduct
}

impl WeightSpec {
    pub fn new(scheme: WeightScheme) -> Self {
        WeightSpec {
            scheme,
            include_outcome: true,
            stabilize: false,
            floor: 1e-6,
            truncate_percentile: None,
            side: Side::LeftLimit,
            survival_form: SurvivalForm::DiscreteProduct,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.floor.is_nan() || self.floor <= 0.0 {
            return Err(Error::Config("weight floor must be positive".into()));
        }
        if let Some(p) = self.truncate_percentile {
            if !(p > 0.5 && p <= 1.0) {
                return Err(Error::Config(format!(
                    "truncate percentile must lie in (0.5, 1], got {}",
                    p
                )));
            }
        }
        Ok(())
    }
}

/// Dispatch on the scheme in `spec`.
pub fn build_weights(d: &Dataset, spec: &WeightSpec) -> Result<WeightVector> {
    match spec.scheme {
        WeightScheme::Cc => weights_cc(d),
        WeightScheme::IpcwLogistic => weights_ipcw_logistic(d, spec),
        WeightScheme::IpcwKm => weights_ipcw_km(d, spec),
        WeightScheme::IpcwCox => weights_ipcw_cox(d, spec),
    }
}

/// Complete-case weights: `w_i = delta_i`.
pub fn weights_cc(d: &Dataset) -> Result<WeightVector> {
    if d.n_complete() == 0 {
        return Err(Error::NoCompleteCases);
    }
    let w: Vec<f64> = d
        .records()
        .iter()
        .map(|r| if r.delta { 1.0 } else { 0.0 })
        .collect();
    Ok(WeightVector {
        pi: vec![1.0; d.n()],
        w,
        scheme: WeightScheme::Cc,
        stabilized: false,
        side: Side::LeftLimit,
        n_floored: 0,
        degenerate: false,
        truncated: false,
    })
}

// Shared tail: floor the probabilities, invert on complete cases, then apply
// optional truncation and stabilization.
fn assemble(
    d: &Dataset,
    spec: &WeightSpec,
    scheme: WeightScheme,
    mut pi: Vec<f64>,
    degenerate: bool,
) -> Result<WeightVector> {
    // Clamp every probability into [floor, 1], but count only complete
    // cases: a floored pi on a censored record never touches a weight.
    let mut n_floored = 0;
    for (p, r) in pi.iter_mut().zip(d.records()) {
        if *p < spec.floor {
            *p = spec.floor;
            if r.delta {
                n_floored += 1;
            }
        }
        if *p > 1.0 {
            *p = 1.0;
        }
    }
    let w: Vec<f64> = d
        .records()
        .iter()
        .zip(&pi)
        .map(|(r, p)| if r.delta { 1.0 / p } else { 0.0 })
        .collect();
    let mut wv = WeightVector {
        pi,
        w,
        scheme,
        stabilized: false,
        side: spec.side,
        n_floored,
        degenerate,
        truncated: false,
    };
    if let Some(pct) = spec.truncate_percentile {
        truncate_weights(&mut wv, pct);
    }
    if spec.stabilize {
        wv = stabilize(&wv, d)?;
    }
    Ok(wv)
}

// Symmetric percentile truncation of the positive weights: clamp into the
// [1-p, p] nearest-rank quantile band.
fn truncate_weights(wv: &mut WeightVector, pct: f64) {
    let mut pos: Vec<f64> = wv.w.iter().cloned().filter(|w| *w > 0.0).collect();
    if pos.len() < 2 {
        return;
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = pos.len();
    let upper_idx = ((pct * m as f64).ceil() as usize).clamp(1, m) - 1;
    let lower_idx = (((1.0 - pct) * m as f64).ceil() as usize).clamp(1, m) - 1;
    let lower = pos[lower_idx];
    let upper = pos[upper_idx];
    let mut changed = false;
    for w in wv.w.iter_mut() {
        if *w > 0.0 {
            let clamped = w.clamp(lower, upper);
            if clamped != *w {
                changed = true;
            }
            *w = clamped;
        }
    }
    wv.truncated = changed;
}

/// Weights from a logistic model of the observation indicator on
/// `(1, y if included, h)` over all records.
pub fn weights_ipcw_logistic(d: &Dataset, spec: &WeightSpec) -> Result<WeightVector> {
    spec.validate()?;
    if d.n_complete() == 0 {
        return Err(Error::NoCompleteCases);
    }
    if d.n_complete() == d.n() {
        // No censoring: the intercept diverges, so short-circuit to unit
        // weights.
        return Ok(WeightVector::unit(
            d.n(),
            WeightScheme::IpcwLogistic,
            spec.side,
            spec.stabilize,
        ));
    }

    let n_cov = if spec.include_outcome { 1 } else { 0 } + d.p() + d.q();
    let pi = if n_cov == 0 {
        // Intercept-only model: the fitted probability is the complete-case
        // fraction, exactly.
        let p = d.n_complete() as f64 / d.n() as f64;
        vec![p; d.n()]
    } else {
        let mut rows = Vec::with_capacity(d.n());
        let mut outcome = Vec::with_capacity(d.n());
        for r in d.records() {
            let mut row = Vec::with_capacity(1 + n_cov);
            row.push(1.0);
            if spec.include_outcome {
                row.push(r.y);
            }
            row.extend_from_slice(&r.z);
            row.extend_from_slice(&r.h_extra);
            rows.push(row);
            outcome.push(if r.delta { 1.0 } else { 0.0 });
        }
        let design = Design::new(rows, outcome, vec![1.0; d.n()])?;
        let fit = fit_design(&design, LinkKind::Logit, &FitOptions::default())?;
        (0..d.n())
            .map(|i| {
                let eta: f64 = design
                    .row(i)
                    .iter()
                    .zip(&fit.beta)
                    .map(|(x, b)| x * b)
                    .sum();
                LinkKind::Logit.inverse(eta)
            })
            .collect()
    };
    assemble(d, spec, WeightScheme::IpcwLogistic, pi, false)
}

// Kaplan-Meier of the censoring distribution: censorings are the events.
fn reversed_km(d: &Dataset) -> Result<KmCurve> {
    let times: Vec<f64> = d.records().iter().map(|r| r.v).collect();
    let events: Vec<bool> = d.records().iter().map(|r| r.delta_star()).collect();
    km_fit(&times, &events)
}

/// Weights from the product-limit estimate of the censoring survival
/// function, fit with the roles of event and censoring reversed.
pub fn weights_ipcw_km(d: &Dataset, spec: &WeightSpec) -> Result<WeightVector> {
    spec.validate()?;
    if d.n_complete() == 0 {
        return Err(Error::NoCompleteCases);
    }
    if d.n_complete() == d.n() {
        return Ok(WeightVector::unit(
            d.n(),
            WeightScheme::IpcwKm,
            spec.side,
            spec.stabilize,
        ));
    }
    let curve = reversed_km(d)?;
    let pi: Vec<f64> = d
        .records()
        .iter()
        .map(|r| curve.eval(r.v, spec.side))
        .collect();
    assemble(d, spec, WeightScheme::IpcwKm, pi, false)
}

/// Weights from a proportional-hazards model of the censoring times on
/// `(y if included, h)`.
pub fn weights_ipcw_cox(d: &Dataset, spec: &WeightSpec) -> Result<WeightVector> {
    weights_ipcw_cox_impl(d, spec, None)
}

/// Same as [`weights_ipcw_cox`] with the coefficient vector pinned instead of
/// estimated. Test hook: at zero the probabilities reduce to the reverse-role
/// Kaplan-Meier ones.
pub fn weights_ipcw_cox_pinned(
    d: &Dataset,
    spec: &WeightSpec,
    theta: &[f64],
) -> Result<WeightVector> {
    weights_ipcw_cox_impl(d, spec, Some(theta.to_vec()))
}

fn weights_ipcw_cox_impl(
    d: &Dataset,
    spec: &WeightSpec,
    pin_theta: Option<Vec<f64>>,
) -> Result<WeightVector> {
    spec.validate()?;
    if d.n_complete() == 0 {
        return Err(Error::NoCompleteCases);
    }
    if d.n_complete() == d.n() {
        return Ok(WeightVector::unit(
            d.n(),
            WeightScheme::IpcwCox,
            spec.side,
            spec.stabilize,
        ));
    }
    let n_cov = if spec.include_outcome { 1 } else { 0 } + d.p() + d.q();
    if n_cov == 0 {
        return Err(Error::InvalidData(
            "ipcw-cox needs the outcome or at least one covariate in the censoring model".into(),
        ));
    }
    let times: Vec<f64> = d.records().iter().map(|r| r.v).collect();
    let events: Vec<bool> = d.records().iter().map(|r| r.delta_star()).collect();
    let covariates: Vec<Vec<f64>> = d
        .records()
        .iter()
        .map(|r| {
            let mut row = Vec::with_capacity(n_cov);
            if spec.include_outcome {
                row.push(r.y);
            }
            row.extend_from_slice(&r.z);
            row.extend_from_slice(&r.h_extra);
            row
        })
        .collect();
    let opts = CoxOptions {
        pin_theta,
        ..Default::default()
    };
    let fit = cox_fit(&times, &events, &covariates, &opts)?;

    let mut degenerate = false;
    let pi: Vec<f64> = d
        .records()
        .iter()
        .zip(&covariates)
        .map(|(r, row)| {
            let sv = fit.survival_at(
                row,
                r.v,
                spec.side,
                SurvivalForm::DiscreteProduct,
                spec.floor,
            );
            degenerate |= sv.degenerate;
            sv.value
        })
        .collect();
    assemble(d, spec, WeightScheme::IpcwCox, pi, degenerate)
}

/// Multiply weights by the marginal probability of remaining uncensored:
/// the complete-case fraction for the logistic scheme, the marginal
/// reverse-role Kaplan-Meier value at each subject's time for the survival
/// schemes. Complete-case weights pass through unchanged.
pub fn stabilize(wv: &WeightVector, d: &Dataset) -> Result<WeightVector> {
    if wv.stabilized {
        return Err(Error::InvalidData("weights are already stabilized".into()));
    }
    if wv.w.len() != d.n() {
        return Err(Error::InvalidData("weight vector length mismatch".into()));
    }
    let mut out = wv.clone();
    match wv.scheme {
        WeightScheme::Cc => {}
        WeightScheme::IpcwLogistic => {
            let f = d.n_complete() as f64 / d.n() as f64;
            for w in out.w.iter_mut() {
                *w *= f;
            }
            out.stabilized = true;
        }
        WeightScheme::IpcwKm | WeightScheme::IpcwCox => {
            if d.n_complete() == d.n() {
                // Marginal curve has no events; the factor is one everywhere.
                out.stabilized = true;
            } else {
                let curve = reversed_km(d)?;
                for (w, r) in out.w.iter_mut().zip(d.records()) {
                    *w *= curve.eval(r.v, wv.side);
                }
                out.stabilized = true;
            }
        }
    }
    Ok(out)
}
