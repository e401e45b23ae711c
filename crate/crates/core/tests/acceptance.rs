//! Acceptance suite. Each test prints one pass/fail line; run with
//! `cargo test --test acceptance -- --nocapture` to see them all.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cenreg::data::{Dataset, ObservedRecord, WeightScheme};
use cenreg::glm::{fit_design, fit_glm, Design, FitOptions, LinkKind};
use cenreg::sim::{
    generate_scenario_a, metrics_csv, run_monte_carlo, CensorLevel, CoefTarget, Method,
    NamedCensorLevel, ScenarioConfig, ScenarioFamily,
};
use cenreg::survival::{
    cox_fit, cox_log_partial_likelihood, cox_score_information, km_fit, CoxOptions, Side,
};
use cenreg::weights::{
    build_weights, stabilize, weights_cc, weights_ipcw_cox_pinned, weights_ipcw_km,
    weights_ipcw_logistic, WeightSpec,
};

fn report(n: usize, name: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("criterion {n} ({name}): PASS");
    } else {
        println!("criterion {n} ({name}): FAIL");
        for f in &failures {
            println!("  - {f}");
        }
        panic!(
            "criterion {n} ({name}) failed with {} issue(s)",
            failures.len()
        );
    }
}

fn light_censor_params() -> cenreg::TwoComponentWeibull {
    cenreg::scenario_a_censor_params(CensorLevel::Named(NamedCensorLevel::Light), false)
}

// ---------------------------------------------------------------------------
// Criterion 1: with no censoring, every scheme reproduces the Full fit.
// ---------------------------------------------------------------------------
#[test]
fn criterion_1_no_censoring_equivalence() {
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, _) = generate_scenario_a(200, None, &mut rng);
        let full = fit_glm(
            &d,
            &weights_cc(&d).unwrap(),
            LinkKind::Identity,
            &FitOptions::default(),
        )
        .unwrap();
        for scheme in [
            WeightScheme::Cc,
            WeightScheme::IpcwLogistic,
            WeightScheme::IpcwKm,
            WeightScheme::IpcwCox,
        ] {
            let wv = build_weights(&d, &WeightSpec::new(scheme)).unwrap();
            let fit = fit_glm(&d, &wv, LinkKind::Identity, &FitOptions::default()).unwrap();
            for j in 0..full.beta.len() {
                if (fit.beta[j] - full.beta[j]).abs() > 1e-10 {
                    failures.push(format!(
                        "seed {seed}, scheme {scheme}: beta[{j}] = {} vs full {}",
                        fit.beta[j], full.beta[j]
                    ));
                }
            }
        }
    }
    report(1, "no-censoring equivalence", failures);
}

// ---------------------------------------------------------------------------
// Criterion 2: oracle suites.
// ---------------------------------------------------------------------------

// Gauss-Jordan solve of the weighted normal equations, independent of the
// library solver.
fn wls_oracle(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Option<Vec<f64>> {
    let k = rows[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (i, row) in rows.iter().enumerate() {
        for p in 0..k {
            for q in 0..k {
                a[p][q] += w[i] * row[p] * row[q];
            }
            a[p][k] += w[i] * row[p] * y[i];
        }
    }
    for col in 0..k {
        let pivot =
            (col..k).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-9 {
            return None;
        }
        a.swap(col, pivot);
        let s = a[col][col];
        for q in col..=k {
            a[col][q] /= s;
        }
        for row in 0..k {
            if row != col {
                let f = a[row][col];
                for q in col..=k {
                    a[row][q] -= f * a[col][q];
                }
            }
        }
    }
    Some((0..k).map(|p| a[p][k]).collect())
}

// Golden-section maximizer of a one-dimensional partial likelihood.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    for _ in 0..300 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn criterion_2_oracle_suites() {
    let mut failures = Vec::new();

    // (a) Identity fits vs the dense WLS oracle on random small designs.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..200 {
        use rand::Rng;
        let p = rng.random_range(0..=2usize);
        let k = p + 2;
        let n = rng.random_range(k + 1..=20usize);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut row = vec![1.0];
                for _ in 0..(k - 1) {
                    row.push(rng.random_range(-3.0..3.0));
                }
                row
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..4.0)).collect();
        let Some(oracle) = wls_oracle(&rows, &y, &w) else {
            continue;
        };
        let design = Design::new(rows, y, w).unwrap();
        match fit_design(&design, LinkKind::Identity, &FitOptions::default()) {
            Ok(fit) => {
                for j in 0..k {
                    if (fit.beta[j] - oracle[j]).abs() > 1e-10 * (1.0 + oracle[j].abs()) {
                        failures.push(format!(
                            "wls case {case}: beta[{j}] = {} vs oracle {}",
                            fit.beta[j], oracle[j]
                        ));
                    }
                }
            }
            Err(e) => failures.push(format!("wls case {case}: solver error {e}")),
        }
    }

    // (b) Cox coefficient vs brute-force partial-likelihood maximization on
    // 4-8 subject designs, plus the closed-form four-subject case.
    {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        let covs: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let fit = cox_fit(&times, &events, &covs, &CoxOptions::default()).unwrap();
        let expected = ((17.0f64.sqrt() - 1.0) / 8.0).ln();
        if (fit.theta[0] - expected).abs() > 1e-6 {
            failures.push(format!(
                "4-subject cox: {} vs closed form {}",
                fit.theta[0], expected
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checked = 0;
    while checked < 40 {
        use rand::Rng;
        let n = rng.random_range(4..=8usize);
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        if events.iter().filter(|e| **e).count() < 2 {
            continue;
        }
        let covs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let fit = match cox_fit(&times, &events, &covs, &CoxOptions::default()) {
            Ok(f) => f,
            // Monotone likelihoods happen on tiny designs; the oracle would
            // ride the boundary too, so skip them.
            Err(_) => continue,
        };
        if fit.theta[0].abs() > 15.0 {
            continue;
        }
        let ll = |t: f64| cox_log_partial_likelihood(&times, &events, &covs, &[t]).unwrap();
        let oracle = golden_max(ll, -20.0, 20.0);
        if (fit.theta[0] - oracle).abs() > 1e-6 * (1.0 + oracle.abs()) {
            failures.push(format!(
                "cox case {checked}: theta {} vs oracle {}",
                fit.theta[0], oracle
            ));
        }
        checked += 1;
    }

    // (c) Kaplan-Meier hand product-limit values, exactly.
    {
        let curve = km_fit(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]).unwrap();
        let checks = [
            (curve.eval(1.0, Side::Right), 0.75),
            (curve.eval(3.0, Side::Right), 0.375),
            (curve.eval(3.0, Side::LeftLimit), 0.75),
            (curve.eval(4.0, Side::Right), 0.0),
        ];
        for (i, (got, want)) in checks.iter().enumerate() {
            if got != want {
                failures.push(format!("km hand value {i}: {got} != {want}"));
            }
        }
    }

    // (d) Analytic derivative matrices vs central finite differences.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        use rand::Rng;
        for case in 0..20 {
            let n = rng.random_range(8..=16usize);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    vec![
                        1.0,
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
            for link in [LinkKind::Identity, LinkKind::Logit] {
                let y: Vec<f64> = (0..n)
                    .map(|_| {
                        if link == LinkKind::Logit {
                            if rng.random_bool(0.5) {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            rng.random_range(-3.0..3.0)
                        }
                    })
                    .collect();
                let design = Design::new(rows.clone(), y, w.clone()).unwrap();
                let beta = [0.1, -0.2, 0.3];
                let a = cenreg::glm::score_negative_jacobian(&beta, &design, link).unwrap();
                let h = 1e-5;
                for j in 0..3 {
                    let mut bp = beta.to_vec();
                    let mut bm = beta.to_vec();
                    bp[j] += h;
                    bm[j] -= h;
                    let sp = cenreg::glm::glm_score(&bp, &design, link).unwrap();
                    let sm = cenreg::glm::glm_score(&bm, &design, link).unwrap();
                    for i in 0..3 {
                        let fd = -(sp[i] - sm[i]) / (2.0 * h);
                        if (a[(i, j)] - fd).abs() > 1e-5 * (1.0 + fd.abs()) {
                            failures.push(format!(
                                "glm jacobian case {case} {link}: A[{i}{j}] {} vs fd {}",
                                a[(i, j)],
                                fd
                            ));
                        }
                    }
                }
            }

            // Cox information against the finite-difference Hessian.
            let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
            let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            if events.iter().filter(|e| **e).count() < 2 {
                continue;
            }
            let covs: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[1], r[2]]).collect();
            let theta = [0.2, -0.1];
            let (score, info) = cox_score_information(&times, &events, &covs, &theta).unwrap();
            let h = 1e-5;
            for j in 0..2 {
                let mut tp = theta.to_vec();
                let mut tm = theta.to_vec();
                tp[j] += h;
                tm[j] -= h;
                let lp = cox_log_partial_likelihood(&times, &events, &covs, &tp).unwrap();
                let lm = cox_log_partial_likelihood(&times, &events, &covs, &tm).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                if (score[j] - fd).abs() > 1e-5 * (1.0 + fd.abs()) {
                    failures.push(format!("cox score case {case}: {} vs fd {}", score[j], fd));
                }
                let (sp, _) = cox_score_information(&times, &events, &covs, &tp).unwrap();
                let (sm, _) = cox_score_information(&times, &events, &covs, &tm).unwrap();
                for i in 0..2 {
                    let fd2 = -(sp[i] - sm[i]) / (2.0 * h);
                    if (info[(i, j)] - fd2).abs() > 1e-5 * (1.0 + fd2.abs()) {
                        failures.push(format!(
                            "cox info case {case}: I[{i}{j}] {} vs fd {}",
                            info[(i, j)],
                            fd2
                        ));
                    }
                }
            }
        }
    }

    report(2, "oracle suites", failures);
}

// ---------------------------------------------------------------------------
// Criteria 3-5: Monte Carlo structure at desk scale.
// ---------------------------------------------------------------------------

fn mc_config(
    family: ScenarioFamily,
    level: NamedCensorLevel,
    n: usize,
    seed: u64,
) -> ScenarioConfig {
    ScenarioConfig {
        family,
        n,
        censoring: CensorLevel::Named(level),
        n_reps: 1000,
        seed,
        methods: cenreg::ALL_METHODS.to_vec(),
        stabilize: false,
        calibrate: true,
        floor: 1e-6,
        calibration_tol: 0.01,
    }
}

fn row<'a>(rows: &'a [cenreg::MetricsRow], m: Method) -> &'a cenreg::MetricsRow {
    rows.iter()
        .find(|r| r.method == m && r.coefficient == CoefTarget::X)
        .expect("method row present")
}

const SEEDS: u64 = 20;
const SEEDS_REQUIRED: usize = 19; // 95% of 20

#[test]
fn criterion_3_independent_censoring_structure() {
    let mut failures = Vec::new();
    let mut full_bias_ok = 0usize;
    let mut ordering_ok = 0usize;
    let mut se_ratio_ok = 0usize;
    let mut ratios = Vec::new();

    for i in 0..SEEDS {
        let seed = 9_000 + i;
        let light = run_monte_carlo(&mc_config(
            ScenarioFamily::Independent,
            NamedCensorLevel::Light,
            400,
            seed,
        ))
        .unwrap();
        let heavy = run_monte_carlo(&mc_config(
            ScenarioFamily::Independent,
            NamedCensorLevel::Heavy,
            400,
            seed,
        ))
        .unwrap();

        if row(&light.rows, Method::Full).bias.abs() <= 0.005 {
            full_bias_ok += 1;
        }
        let hb = |m| row(&heavy.rows, m).bias.abs();
        if hb(Method::Full) <= hb(Method::IpcwCox)
            && hb(Method::IpcwCox) <= hb(Method::IpcwLogistic).min(hb(Method::IpcwKm))
        {
            ordering_ok += 1;
        }
        let ratio = row(&heavy.rows, Method::Cc).se_model / row(&light.rows, Method::Cc).se_model;
        ratios.push(ratio);
        if ratio >= 2.0 {
            se_ratio_ok += 1;
        }
    }

    if full_bias_ok < SEEDS_REQUIRED {
        failures.push(format!(
            "Full bias within +/-0.005 in only {full_bias_ok}/{SEEDS} seeds"
        ));
    }
    if ordering_ok < SEEDS_REQUIRED {
        failures.push(format!(
            "|bias| ordering Full <= IPCW-Cox <= min(IPCW, IPCW-KM) at heavy censoring held in only \
             {ordering_ok}/{SEEDS} seeds"
        ));
    }
    if se_ratio_ok < SEEDS_REQUIRED {
        failures.push(format!(
            "CC SE heavy/light >= 2 in only {se_ratio_ok}/{SEEDS} seeds (ratios {:.2?})",
            ratios
        ));
    }
    report(3, "independent-censoring table structure", failures);
}

#[test]
fn criterion_4_outcome_dependent_censoring_structure() {
    let mut failures = Vec::new();
    let mut cox_ok = 0usize;
    let mut others_ok = 0usize;
    let mut cox_pcts = Vec::new();

    for i in 0..SEEDS {
        let seed = 17_000 + i;
        let heavy = run_monte_carlo(&mc_config(
            ScenarioFamily::OutcomeDependent,
            NamedCensorLevel::Heavy,
            400,
            seed,
        ))
        .unwrap();
        let pct = |m| row(&heavy.rows, m).pct_bias.unwrap();
        cox_pcts.push(pct(Method::IpcwCox));
        if pct(Method::IpcwCox) < 25.0 {
            cox_ok += 1;
        }
        if pct(Method::Cc) > 35.0 && pct(Method::IpcwLogistic) > 35.0 && pct(Method::IpcwKm) > 35.0
        {
            others_ok += 1;
        }
    }

    if cox_ok < SEEDS_REQUIRED {
        failures.push(format!(
            "IPCW-Cox %bias < 25 at heavy censoring in only {cox_ok}/{SEEDS} seeds \
             (observed {:.0?})",
            cox_pcts
        ));
    }
    if others_ok < SEEDS_REQUIRED {
        failures.push(format!(
            "CC/IPCW/IPCW-KM %bias > 35 at heavy censoring in only {others_ok}/{SEEDS} seeds"
        ));
    }
    report(4, "outcome-dependent-censoring table structure", failures);
}

#[test]
fn criterion_5_covariate_dependent_reproduction() {
    let mut failures = Vec::new();
    let levels = [
        (NamedCensorLevel::C20, 0.20),
        (NamedCensorLevel::C40, 0.40),
        (NamedCensorLevel::C65, 0.65),
    ];
    let mut results = Vec::new();
    for (level, target) in levels {
        let res = run_monte_carlo(&mc_config(
            ScenarioFamily::CovariateDependent,
            level,
            850,
            31_000,
        ))
        .unwrap();
        if (res.achieved_censoring - target).abs() > 0.05 {
            failures.push(format!(
                "achieved censoring {:.3} not within 0.05 of {target}",
                res.achieved_censoring
            ));
        }
        results.push(res);
    }

    // All methods essentially unbiased at 20% censoring.
    for r in &results[0].rows {
        if r.bias.abs() > 0.01 {
            failures.push(format!(
                "{} bias {} at 20% censoring exceeds 0.01",
                r.method, r.bias
            ));
        }
    }
    // Survival-based weighting beats the complete-case MSE at 65%.
    let at65 = &results[2].rows;
    let mse = |m| row(at65, m).mse;
    if mse(Method::IpcwKm) >= mse(Method::Cc) {
        failures.push(format!(
            "MSE(IPCW-KM) {} not below MSE(CC) {} at 65%",
            mse(Method::IpcwKm),
            mse(Method::Cc)
        ));
    }
    if mse(Method::IpcwCox) >= mse(Method::Cc) {
        failures.push(format!(
            "MSE(IPCW-Cox) {} not below MSE(CC) {} at 65%",
            mse(Method::IpcwCox),
            mse(Method::Cc)
        ));
    }
    report(5, "covariate-dependent reproduction", failures);
}

// ---------------------------------------------------------------------------
// Criterion 6: metric identities hold exactly on emitted rows.
// ---------------------------------------------------------------------------
#[test]
fn criterion_6_metrics_self_consistency() {
    let mut failures = Vec::new();
    let cfg = ScenarioConfig {
        family: ScenarioFamily::CovariateDependentInteraction,
        n: 200,
        censoring: CensorLevel::Named(NamedCensorLevel::C40),
        n_reps: 50,
        seed: 5,
        methods: cenreg::ALL_METHODS.to_vec(),
        stabilize: false,
        calibrate: false,
        floor: 1e-6,
        calibration_tol: 0.01,
    };
    let res = run_monte_carlo(&cfg).unwrap();
    let truth = |c: CoefTarget| match c {
        CoefTarget::X => 0.045,
        CoefTarget::Interaction => 0.05,
    };
    for r in &res.rows {
        if r.mse != r.bias * r.bias + r.se_model * r.se_model {
            failures.push(format!(
                "{} {}: mse identity violated",
                r.method, r.coefficient
            ));
        }
        match r.pct_bias {
            Some(p) => {
                if p != 100.0 * (r.bias / truth(r.coefficient)).abs() {
                    failures.push(format!(
                        "{} {}: pct_bias identity violated",
                        r.method, r.coefficient
                    ));
                }
            }
            None => failures.push(format!("{} {}: pct_bias missing", r.method, r.coefficient)),
        }
    }
    report(6, "metrics self-consistency", failures);
}

// ---------------------------------------------------------------------------
// Criterion 7: byte-identical output under serial and parallel execution.
// ---------------------------------------------------------------------------
#[test]
fn criterion_7_determinism() {
    let mut failures = Vec::new();
    let cfg = ScenarioConfig {
        family: ScenarioFamily::OutcomeDependent,
        n: 200,
        censoring: CensorLevel::Named(NamedCensorLevel::Light),
        n_reps: 60,
        seed: 99,
        methods: cenreg::ALL_METHODS.to_vec(),
        stabilize: false,
        calibrate: true,
        floor: 1e-6,
        calibration_tol: 0.01,
    };
    let serial_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let parallel_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let serial = serial_pool.install(|| run_monte_carlo(&cfg)).unwrap();
    let parallel = parallel_pool.install(|| run_monte_carlo(&cfg)).unwrap();
    let a = metrics_csv(&serial.rows);
    let b = metrics_csv(&parallel.rows);
    if a != b {
        failures.push("serial and parallel CSV outputs differ".to_string());
    }
    if serial.censor_scale != parallel.censor_scale
        || serial.achieved_censoring != parallel.achieved_censoring
    {
        failures.push("serial and parallel calibration results differ".to_string());
    }
    // Repeating the same config yields the same bytes.
    let again = parallel_pool.install(|| run_monte_carlo(&cfg)).unwrap();
    if metrics_csv(&again.rows) != a {
        failures.push("repeated run differs".to_string());
    }
    report(7, "determinism", failures);
}

// ---------------------------------------------------------------------------
// Criterion 8: weight-scheme identities.
// ---------------------------------------------------------------------------
#[test]
fn criterion_8_weight_scheme_identities() {
    let mut failures = Vec::new();

    // Theta pinned to zero makes the Cox probabilities exactly the
    // reverse-role Kaplan-Meier ones.
    let censor = light_censor_params();
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 50 {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + seed);
        seed += 1;
        let (d, _) = generate_scenario_a(120, Some(&censor), &mut rng);
        if d.n_complete() == d.n() || d.n_complete() == 0 {
            continue;
        }
        let spec_cox = WeightSpec::new(WeightScheme::IpcwCox);
        let cox = weights_ipcw_cox_pinned(&d, &spec_cox, &[0.0, 0.0, 0.0]).unwrap();
        let km = weights_ipcw_km(&d, &WeightSpec::new(WeightScheme::IpcwKm)).unwrap();
        if cox.pi != km.pi {
            failures.push(format!("dataset {seed}: pinned-cox pi differs from km pi"));
        }
        if cox.w != km.w {
            failures.push(format!(
                "dataset {seed}: pinned-cox weights differ from km weights"
            ));
        }
        checked += 1;
    }

    // Constant selection probability: stabilized logistic weights are one.
    let mut rng = ChaCha8Rng::seed_from_u64(70_007);
    for case in 0..50 {
        use rand::Rng;
        let n = 40;
        let records: Vec<ObservedRecord> = (0..n)
            .map(|_| ObservedRecord {
                v: rng.random_range(0.1..5.0),
                delta: rng.random_bool(0.7),
                z: vec![],
                y: rng.random_range(-1.0..1.0),
                h_extra: vec![],
            })
            .collect();
        let d = match Dataset::new(records) {
            Ok(d) => d,
            Err(_) => continue,
        };
        if d.n_complete() == 0 || d.n_complete() == d.n() {
            continue;
        }
        let spec = WeightSpec {
            include_outcome: false,
            ..WeightSpec::new(WeightScheme::IpcwLogistic)
        };
        let wv = weights_ipcw_logistic(&d, &spec).unwrap();
        let sw = stabilize(&wv, &d).unwrap();
        for (i, r) in d.records().iter().enumerate() {
            let expected = if r.delta { 1.0 } else { 0.0 };
            if sw.w[i] != expected {
                failures.push(format!(
                    "case {case}, record {i}: stabilized weight {}",
                    sw.w[i]
                ));
            }
        }
    }

    report(8, "weight-scheme identities", failures);
}
