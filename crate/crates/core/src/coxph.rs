//! Cox proportional-hazards estimation.
//!
//! Risk sets follow the "still at risk" convention: patient `j` is in the risk
//! set of an event at time `t` iff `time_j >= t`. All sums are evaluated on
//! linear predictors shifted by their maximum, which leaves the partial
//! likelihood and its derivatives unchanged.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{count_events, FeatureTable, SurvivalOutcome};
use crate::error::{Error, Result};

/// Norm above which the coefficients are treated as diverging.
pub const DIVERGENCE_NORM: f64 = 50.0;
/// Ridge penalty applied when the unpenalized fit diverges or is singular.
pub const FALLBACK_RIDGE: f64 = 1e-6;
/// A converged unpenalized fit whose last Newton step is still this long is
/// sitting on a flat (monotone) likelihood ridge.
const MONOTONE_STEP_NORM: f64 = 0.1;
const MAX_HALVINGS: usize = 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    Breslow,
    #[default]
    Efron,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoxFitOptions {
    pub ties: Ties,
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for CoxFitOptions {
    fn default() -> Self {
        Self {
            ties: Ties::Efron,
            tol: 1e-7,
            max_iter: 100,
            ridge: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Breslow cumulative baseline hazard as `(event time, value)` steps.
    pub baseline_cumhaz: Vec<(f64, f64)>,
    pub converged: bool,
    /// Set when the ridge fallback was needed to obtain a finite fit.
    pub penalized: bool,
    pub ridge: f64,
    pub final_loglik: f64,
    pub n_iter: usize,
}

impl CoxModel {
    /// Log-partial hazard `x·β` for every row of `table`, matching columns by name.
    pub fn predict_risk(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let idx = self
            .feature_names
            .iter()
            .map(|n| {
                table.column_index(n).ok_or_else(|| {
                    Error::InvalidArgument(format!("feature {n:?} missing from input table"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let v = table.values();
        Ok((0..table.n_rows())
            .map(|i| idx.iter().zip(&self.beta).map(|(&j, b)| v[[i, j]] * b).sum())
            .collect())
    }

    /// Same as [`CoxModel::predict_risk`] on a raw matrix whose columns are in model order.
    pub fn predict_matrix(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.beta.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} features, got {}",
                self.beta.len(),
                x.ncols()
            )));
        }
        Ok(x.dot(&ArrayView1::from(&self.beta)).to_vec())
    }

    /// Cumulative baseline hazard at `t` (right-continuous step function).
    pub fn cumhaz_at(&self, t: f64) -> f64 {
        match self
            .baseline_cumhaz
            .partition_point(|&(time, _)| time <= t)
        {
            0 => 0.0,
            k => self.baseline_cumhaz[k - 1].1,
        }
    }
}

/// Partial likelihood value with optional gradient and Hessian (w.r.t. β).
pub(crate) struct Derivatives {
    pub loglik: f64,
    pub grad: Array1<f64>,
    pub hess: Array2<f64>,
}

/// Patients grouped by distinct time, in descending time order.
fn time_groups_desc(outcomes: &[SurvivalOutcome]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[b].time.total_cmp(&outcomes[a].time));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if outcomes[g[0]].time == outcomes[i].time => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn check_inputs(n: usize, outcomes: &[SurvivalOutcome]) -> Result<()> {
    if n != outcomes.len() {
        return Err(Error::InvalidArgument(format!(
            "{n} rows but {} outcomes",
            outcomes.len()
        )));
    }
    if count_events(outcomes) == 0 {
        return Err(Error::NoEvents);
    }
    Ok(())
}

pub(crate) fn derivatives(
    x: ArrayView2<f64>,
    outcomes: &[SurvivalOutcome],
    beta: ArrayView1<f64>,
    ties: Ties,
    second_order: bool,
) -> Derivatives {
    let (n, p) = x.dim();
    let eta = x.dot(&beta);
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let mut loglik = 0.0;
    let mut grad = Array1::zeros(p);
    let mut hess = Array2::zeros((p, p));

    let mut s0 = 0.0;
    let mut s1 = Array1::<f64>::zeros(p);
    let mut s2 = Array2::<f64>::zeros((p, p));
    let mut a1 = Array1::<f64>::zeros(p);
    let mut a2 = Array2::<f64>::zeros((p, p));

    for group in time_groups_desc(&outcomes[..n]) {
        for &i in &group {
            let xi = x.row(i);
            s0 += w[i];
            s1.scaled_add(w[i], &xi);
            if second_order {
                outer_add(&mut s2, w[i], xi);
            }
        }
        let events: Vec<usize> = group.iter().copied().filter(|&i| outcomes[i].event).collect();
        let d = events.len();
        if d == 0 {
            continue;
        }
        let mut d0 = 0.0;
        let mut d1 = Array1::<f64>::zeros(p);
        let mut d2 = Array2::<f64>::zeros((p, p));
        for &i in &events {
            let xi = x.row(i);
            loglik += eta[i] - shift;
            grad += &xi;
            d0 += w[i];
            d1.scaled_add(w[i], &xi);
            if second_order {
                outer_add(&mut d2, w[i], xi);
            }
        }
        for l in 0..d {
            let f = match ties {
                Ties::Breslow => 0.0,
                Ties::Efron => l as f64 / d as f64,
            };
            let den = s0 - f * d0;
            loglik -= den.ln();
            a1.assign(&s1);
            a1.scaled_add(-f, &d1);
            grad.scaled_add(-1.0 / den, &a1);
            if second_order {
                a2.assign(&s2);
                a2.scaled_add(-f, &d2);
                hess.scaled_add(-1.0 / den, &a2);
                outer_add(&mut hess, 1.0 / (den * den), a1.view());
            }
        }
    }
    Derivatives {
        loglik,
        grad,
        hess,
    }
}

fn outer_add(m: &mut Array2<f64>, a: f64, v: ArrayView1<f64>) {
    let p = v.len();
    for r in 0..p {
        let vr = a * v[r];
        if vr == 0.0 {
            continue;
        }
        for c in 0..p {
            m[[r, c]] += vr * v[c];
        }
    }
}

/// ℓ(β) = Σ_events [η_i − log Σ_{j ∈ R(t_i)} e^{η_j}] with η = Xβ.
pub fn log_partial_likelihood(
    beta: &[f64],
    x: ArrayView2<f64>,
    outcomes: &[SurvivalOutcome],
    ties: Ties,
) -> Result<f64> {
    check_inputs(x.nrows(), outcomes)?;
    if beta.len() != x.ncols() {
        return Err(Error::InvalidArgument("beta length differs from column count".into()));
    }
    if x.iter().chain(beta).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("partial likelihood input".into()));
    }
    Ok(derivatives(x, outcomes, ArrayView1::from(beta), ties, false).loglik)
}

/// Gradient of ℓ with respect to β.
pub fn log_partial_likelihood_gradient(
    beta: &[f64],
    x: ArrayView2<f64>,
    outcomes: &[SurvivalOutcome],
    ties: Ties,
) -> Result<Vec<f64>> {
    check_inputs(x.nrows(), outcomes)?;
    Ok(derivatives(x, outcomes, ArrayView1::from(beta), ties, false)
        .grad
        .to_vec())
}

/// Breslow ℓ evaluated with `scores` used directly as the linear predictor,
/// together with ∂ℓ/∂score.
pub fn breslow_loglik_scores(
    scores: &[f64],
    outcomes: &[SurvivalOutcome],
) -> Result<(f64, Vec<f64>)> {
    check_inputs(scores.len(), outcomes)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("risk scores".into()));
    }
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - shift).exp()).collect();
    let groups = time_groups_desc(outcomes);

    // Each event contributes w_j / S0 to the gradient of every risk-set member j.
    let mut loglik = 0.0;
    let mut s0 = 0.0;
    let mut inv_s0_by_group = Vec::with_capacity(groups.len());
    for g in &groups {
        for &i in g {
            s0 += w[i];
        }
        let d = g.iter().filter(|&&i| outcomes[i].event).count();
        for &i in g {
            if outcomes[i].event {
                loglik += scores[i] - shift - s0.ln();
            }
        }
        inv_s0_by_group.push(d as f64 / s0);
    }
    let mut grad = vec![0.0; scores.len()];
    // Groups run from the latest time down, so a patient in group k is at risk
    // for the events of groups k.. (times <= its own).
    let mut cum = vec![0.0; groups.len()];
    let mut acc = 0.0;
    for k in (0..groups.len()).rev() {
        acc += inv_s0_by_group[k];
        cum[k] = acc;
    }
    for (k, g) in groups.iter().enumerate() {
        for &i in g {
            grad[i] = outcomes[i].event as u8 as f64 - w[i] * cum[k];
        }
    }
    Ok((loglik, grad))
}

pub fn fit_cox(
    x: ArrayView2<f64>,
    feature_names: &[String],
    outcomes: &[SurvivalOutcome],
    opts: &CoxFitOptions,
) -> Result<CoxModel> {
    check_inputs(x.nrows(), outcomes)?;
    if feature_names.len() != x.ncols() {
        return Err(Error::InvalidArgument("feature name count differs from columns".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix".into()));
    }

    let first = newton_raphson(x, outcomes, opts);
    let (fit, penalized) = match first {
        Ok(fit) if !fit.diverged => (fit, opts.ridge > 0.0),
        first => {
            if opts.ridge >= FALLBACK_RIDGE {
                return Err(Error::NonConvergence(match first {
                    Ok(f) => format!("diverged with ridge {} (|beta| = {:.3e})", opts.ridge, norm(&f.beta)),
                    Err(e) => e.to_string(),
                }));
            }
            let retry = CoxFitOptions {
                ridge: FALLBACK_RIDGE,
                ..*opts
            };
            let fit = newton_raphson(x, outcomes, &retry)?;
            if fit.diverged || !fit.converged {
                return Err(Error::NonConvergence(format!(
                    "ridge fallback did not converge after {} iterations (|beta| = {:.3e}, loglik = {})",
                    fit.n_iter,
                    norm(&fit.beta),
                    fit.loglik
                )));
            }
            log::debug!("cox fit needed ridge fallback after {} iterations", fit.n_iter);
            (fit, true)
        }
    };
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "no convergence after {} iterations (loglik = {})",
            fit.n_iter, fit.loglik
        )));
    }
    let ridge = if penalized {
        opts.ridge.max(FALLBACK_RIDGE)
    } else {
        opts.ridge
    };
    let baseline_cumhaz = breslow_baseline(&fit.beta, x, outcomes)?;
    Ok(CoxModel {
        feature_names: feature_names.to_vec(),
        beta: fit.beta,
        baseline_cumhaz,
        converged: true,
        penalized,
        ridge,
        final_loglik: fit.loglik,
        n_iter: fit.n_iter,
    })
}

/// Fits on all columns of a fully numeric, fully observed table.
pub fn fit_cox_table(
    table: &FeatureTable,
    outcomes: &[SurvivalOutcome],
    opts: &CoxFitOptions,
) -> Result<CoxModel> {
    if table.missing().iter().any(|m| *m) {
        return Err(Error::InvalidArgument("table has missing cells; impute first".into()));
    }
    if let Some(c) = table.columns().iter().find(|c| c.is_categorical()) {
        return Err(Error::InvalidArgument(format!(
            "column {:?} is categorical; encode first",
            c.name
        )));
    }
    fit_cox(table.values().view(), &table.column_names(), outcomes, opts)
}

struct NewtonFit {
    beta: Vec<f64>,
    loglik: f64,
    n_iter: usize,
    converged: bool,
    diverged: bool,
}

fn penalized(d: &mut Derivatives, beta: &Array1<f64>, ridge: f64, second_order: bool) {
    if ridge == 0.0 {
        return;
    }
    d.loglik -= 0.5 * ridge * beta.dot(beta);
    d.grad.scaled_add(-ridge, beta);
    if second_order {
        for k in 0..beta.len() {
            d.hess[[k, k]] -= ridge;
        }
    }
}

fn newton_raphson(
    x: ArrayView2<f64>,
    outcomes: &[SurvivalOutcome],
    opts: &CoxFitOptions,
) -> Result<NewtonFit> {
    let p = x.ncols();
    let eval = |b: &Array1<f64>, second: bool| {
        let mut d = derivatives(x, outcomes, b.view(), opts.ties, second);
        penalized(&mut d, b, opts.ridge, second);
        d
    };

    let mut beta = Array1::<f64>::zeros(p);
    let mut cur = eval(&beta, true);
    if p == 0 {
        return Ok(NewtonFit {
            beta: vec![],
            loglik: cur.loglik,
            n_iter: 0,
            converged: true,
            diverged: false,
        });
    }
    for iter in 1..=opts.max_iter {
        let info = DMatrix::from_fn(p, p, |r, c| -cur.hess[[r, c]]);
        let g = DVector::from_iterator(p, cur.grad.iter().copied());
        let delta = match info.cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                return Err(Error::NonConvergence(
                    "information matrix is not positive definite (collinear or constant columns)"
                        .into(),
                ))
            }
        };
        let delta = Array1::from_iter(delta.iter().copied());

        let mut step = 1.0;
        let mut next = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + &(&delta * step);
            let ll = eval(&cand, false).loglik;
            if ll.is_finite() && ll >= cur.loglik {
                next = Some((cand, ll));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, ll)) = next else {
            // No ascent direction left at working precision.
            return Ok(NewtonFit {
                beta: beta.to_vec(),
                loglik: cur.loglik,
                n_iter: iter,
                converged: true,
                diverged: false,
            });
        };
        let change = ll - cur.loglik;
        let step_norm = step * delta.dot(&delta).sqrt();
        beta = cand;
        if norm(beta.as_slice().unwrap()) > DIVERGENCE_NORM {
            return Ok(NewtonFit {
                beta: beta.to_vec(),
                loglik: ll,
                n_iter: iter,
                converged: false,
                diverged: true,
            });
        }
        cur = eval(&beta, true);
        if change.abs() < opts.tol {
            let monotone = opts.ridge == 0.0 && step_norm > MONOTONE_STEP_NORM;
            return Ok(NewtonFit {
                beta: beta.to_vec(),
                loglik: cur.loglik,
                n_iter: iter,
                converged: true,
                diverged: monotone,
            });
        }
    }
    Ok(NewtonFit {
        beta: beta.to_vec(),
        loglik: cur.loglik,
        n_iter: opts.max_iter,
        converged: false,
        diverged: true,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|b| b * b).sum::<f64>().sqrt()
}

/// Breslow estimator Ĥ₀(t) = Σ_{t_i ≤ t} d_i / Σ_{j ∈ R(t_i)} e^{η_j}, one step per
/// distinct event time. Empty when there are no events.
pub fn breslow_baseline(
    beta: &[f64],
    x: ArrayView2<f64>,
    outcomes: &[SurvivalOutcome],
) -> Result<Vec<(f64, f64)>> {
    if x.nrows() != outcomes.len() || beta.len() != x.ncols() {
        return Err(Error::InvalidArgument("shape mismatch in baseline hazard".into()));
    }
    let eta = x.dot(&ArrayView1::from(beta));
    let groups = time_groups_desc(outcomes);
    let mut s0 = 0.0;
    let mut increments = Vec::new();
    for g in &groups {
        s0 += g.iter().map(|&i| eta[i].exp()).sum::<f64>();
        let d = g.iter().filter(|&&i| outcomes[i].event).count();
        if d > 0 {
            increments.push((outcomes[g[0]].time, d as f64 / s0));
        }
    }
    increments.reverse();
    let mut acc = 0.0;
    Ok(increments
        .into_iter()
        .map(|(t, h)| {
            acc += h;
            (t, acc)
        })
        .collect())
}
