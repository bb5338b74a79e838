//! Rate vector fields, scaled jump rates, fixed-point location, and the
//! numeric audit of the standing hypotheses on the vector-field pair.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::Polynomial;
use crate::sim::State;

/// One polynomial vector field (births or deaths): component `j` maps
/// `x ∈ R^d_+` to a nonnegative rate density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateField {
    components: Vec<Polynomial>,
}

impl RateField {
    pub fn new(components: Vec<Polynomial>) -> Self {
        RateField { components }
    }

    pub fn d(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, j: usize) -> &Polynomial {
        &self.components[j]
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, p) in self.components.iter().enumerate() {
            out[j] = p.eval(x);
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|p| p.eval(x)).collect()
    }

    /// Exact Jacobian at `x` from the monomial tables.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.d();
        let mut jac = DMatrix::zeros(d, d);
        for (j, p) in self.components.iter().enumerate() {
            for i in 0..d {
                jac[(j, i)] = p.partial(i).eval(x);
            }
        }
        jac
    }
}

/// A birth-and-death model: dimension, a name, and the two polynomial
/// vector fields. The scale `K` is applied externally by each operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub name: String,
    pub d: usize,
    pub birth: RateField,
    pub death: RateField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
}

/// Escape hatch for non-polynomial dynamics. Only `Model` supports the
/// algebraic operations (Jacobians, hypothesis gradients, reversibility);
/// callable rates can still be simulated and integrated.
pub trait RateEval: Sync {
    fn dimension(&self) -> usize;
    fn birth_into(&self, x: &[f64], out: &mut [f64]);
    fn death_into(&self, x: &[f64], out: &mut [f64]);
}

impl RateEval for Model {
    fn dimension(&self) -> usize {
        self.d
    }
    fn birth_into(&self, x: &[f64], out: &mut [f64]) {
        self.birth.eval_into(x, out);
    }
    fn death_into(&self, x: &[f64], out: &mut [f64]) {
        self.death.eval_into(x, out);
    }
}

/// Callable-backed rate pair (not serializable, excluded from config files
/// and from reversibility checking).
pub struct CallableRates<B, D>
where
    B: Fn(&[f64], &mut [f64]) + Sync,
    D: Fn(&[f64], &mut [f64]) + Sync,
{
    pub d: usize,
    pub birth: B,
    pub death: D,
}

impl<B, D> RateEval for CallableRates<B, D>
where
    B: Fn(&[f64], &mut [f64]) + Sync,
    D: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dimension(&self) -> usize {
        self.d
    }
    fn birth_into(&self, x: &[f64], out: &mut [f64]) {
        (self.birth)(x, out)
    }
    fn death_into(&self, x: &[f64], out: &mut [f64]) {
        (self.death)(x, out)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("component {j} of {kind} evaluates to negative rate {value} at state {state:?}")]
    NegativeRate {
        kind: &'static str,
        j: usize,
        state: Vec<u32>,
        value: f64,
    },
    #[error("death component {j} is {value} at state {state:?} with n_{j} = 0; deaths must vanish on the boundary")]
    BoundaryDeath { j: usize, state: Vec<u32>, value: f64 },
    #[error("non-finite rate in component {j} of {kind} at state {state:?}")]
    NonFiniteRate {
        kind: &'static str,
        j: usize,
        state: Vec<u32>,
    },
    #[error("parameter domain violation: {0}")]
    InvalidParameter(String),
    #[error("rate field dimension mismatch: expected {expected} components of {expected} variables")]
    Dimension { expected: usize },
}

/// Scaled jump rates of the process at lattice state `n`:
/// `birth[j] = K B_j(n/K)`, `death[j] = K D_j(n/K)`.
pub fn eval_rates(model: &Model, n: &State, k: f64) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let x: Vec<f64> = n.coords().iter().map(|&c| f64::from(c) / k).collect();
    let mut birth = model.birth.eval(&x);
    let mut death = model.death.eval(&x);
    for j in 0..model.d {
        birth[j] *= k;
        death[j] *= k;
        for (kind, v) in [("birth", birth[j]), ("death", death[j])] {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteRate {
                    kind,
                    j,
                    state: n.coords().to_vec(),
                });
            }
            if v < 0.0 {
                return Err(ModelError::NegativeRate {
                    kind,
                    j,
                    state: n.coords().to_vec(),
                    value: v,
                });
            }
        }
        // Boundary normality: a death move below zero must carry zero rate.
        if n.coords()[j] == 0 && death[j] != 0.0 {
            return Err(ModelError::BoundaryDeath {
                j,
                state: n.coords().to_vec(),
                value: death[j],
            });
        }
    }
    Ok((birth, death))
}

/// The competition model: `B_j = λS`, `D_j = x_j(μ + κS)` with
/// `S = Σ x_i`. Valid for `λ > μ/d > 0` and `κ > 0`; the nontrivial fixed
/// point is `x*_j = S*/d` with `S* = (λd − μ)/κ`.
pub fn builtin_competition_model(
    lambda: f64,
    mu: f64,
    kappa: f64,
    d: usize,
) -> Result<Model, ModelError> {
    if d == 0 {
        return Err(ModelError::InvalidParameter("d >= 1 fails".into()));
    }
    if !(mu > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "mu/d > 0 fails (mu = {mu})"
        )));
    }
    if !(lambda > mu / d as f64) {
        return Err(ModelError::InvalidParameter(format!(
            "lambda > mu/d fails ({lambda} > {} is false)",
            mu / d as f64
        )));
    }
    if !(kappa > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "kappa > 0 fails (kappa = {kappa})"
        )));
    }
    let mut birth = Vec::with_capacity(d);
    let mut death = Vec::with_capacity(d);
    for j in 0..d {
        let mut b = Polynomial::zero();
        for i in 0..d {
            let mut exps = vec![0u32; d];
            exps[i] = 1;
            b.push(lambda, exps);
        }
        birth.push(b);

        let mut dd = Polynomial::linear(d, j, mu);
        for i in 0..d {
            let mut exps = vec![0u32; d];
            exps[j] += 1;
            exps[i] += 1;
            dd.push(kappa, exps);
        }
        death.push(dd);
    }
    Ok(Model {
        name: format!("competition(lambda={lambda},mu={mu},kappa={kappa},d={d})"),
        d,
        birth: RateField::new(birth),
        death: RateField::new(death),
        builtin: Some("competition".into()),
    })
}

/// The `d = 1` logistic model `B = bx`, `D = x(m + cx)`; this is the
/// competition model restricted to one type.
pub fn builtin_logistic_model(b: f64, m: f64, c: f64) -> Result<Model, ModelError> {
    builtin_competition_model(b, m, c, 1)
}

/// Result of the interior fixed-point search for `B - D`.
#[derive(Debug, Clone, Serialize)]
pub struct FixedPointResult {
    pub x_star: Vec<f64>,
    pub jacobian_eigs_at_zero: Vec<(f64, f64)>,
    pub jacobian_eigs_at_xstar: Vec<(f64, f64)>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

fn drift(model: &Model, x: &[f64]) -> Vec<f64> {
    let b = model.birth.eval(x);
    let d = model.death.eval(x);
    b.iter().zip(&d).map(|(bi, di)| bi - di).collect()
}

fn drift_jacobian(model: &Model, x: &[f64]) -> DMatrix<f64> {
    model.birth.jacobian(x) - model.death.jacobian(x)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &e| acc.max(e.abs()))
}

fn complex_pairs(eigs: &[Complex<f64>]) -> Vec<(f64, f64)> {
    eigs.iter().map(|z| (z.re, z.im)).collect()
}

/// Damped Newton on `B - D` with the analytic Jacobian, falling back to
/// forward relaxation of `dx/dt = B(x) - D(x)` when Newton stalls.
pub fn find_fixed_point(model: &Model, x0: &[f64]) -> Result<FixedPointResult, ModelError> {
    if x0.len() != model.d {
        return Err(ModelError::Dimension { expected: model.d });
    }
    if x0.iter().any(|&v| v <= 0.0) {
        return Err(ModelError::InvalidParameter(
            "fixed-point search requires strictly positive x0".into(),
        ));
    }
    const TOL: f64 = 1e-12;
    const MAX_NEWTON: usize = 200;
    let mut x = x0.to_vec();
    let mut iterations = 0;

    let newton_pass = |x: &mut Vec<f64>, iterations: &mut usize| -> f64 {
        let mut fx = drift(model, x);
        let mut norm = inf_norm(&fx);
        for _ in 0..MAX_NEWTON {
            if norm <= TOL {
                break;
            }
            *iterations += 1;
            let jac = drift_jacobian(model, x);
            let rhs = nalgebra::DVector::from_iterator(x.len(), fx.iter().map(|v| -v));
            let Some(step) = jac.lu().solve(&rhs) else {
                break;
            };
            // backtracking with positivity clamp
            let mut damp = 1.0;
            let mut improved = false;
            while damp >= 1.0 / 1024.0 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(step.iter())
                    .map(|(xi, si)| (xi + damp * si).max(1e-12))
                    .collect();
                let ft = drift(model, &trial);
                let nt = inf_norm(&ft);
                if nt < norm {
                    *x = trial;
                    fx = ft;
                    norm = nt;
                    improved = true;
                    break;
                }
                damp *= 0.5;
            }
            if !improved {
                break;
            }
        }
        norm
    };

    let mut norm = newton_pass(&mut x, &mut iterations);

    if norm > TOL {
        // relaxation fallback: fixed-step RK4 on the flow, then re-polish
        let mut y = x0.to_vec();
        let dt = 0.05;
        for _ in 0..200_000 {
            let k1 = drift(model, &y);
            let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k2 = drift(model, &y2);
            let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k3 = drift(model, &y3);
            let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
            let k4 = drift(model, &y4);
            for i in 0..y.len() {
                y[i] = (y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).max(1e-12);
            }
            if inf_norm(&drift(model, &y)) < 1e-6 {
                break;
            }
        }
        let n2 = newton_pass(&mut y, &mut iterations);
        if n2 < norm {
            x = y;
            norm = n2;
        }
    }

    let converged = norm <= 1e-10 && x.iter().all(|&v| v > 0.0);
    let zero = vec![0.0; model.d];
    Ok(FixedPointResult {
        jacobian_eigs_at_zero: complex_pairs(
            drift_jacobian(model, &zero).complex_eigenvalues().as_slice(),
        ),
        jacobian_eigs_at_xstar: complex_pairs(
            drift_jacobian(model, &x).complex_eigenvalues().as_slice(),
        ),
        x_star: x,
        converged,
        residual: norm,
        iterations,
    })
}

/// Grid for the hypothesis audit: the box `[0, r]^d` sampled with
/// `points_per_axis` per axis, plus the simplex level `l` used by the
/// descent hypotheses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditGrid {
    pub r: f64,
    pub l: f64,
    pub points_per_axis: usize,
}

impl AuditGrid {
    /// Heuristic defaults around the model's fixed point; users supply their
    /// own candidates when these fail.
    pub fn for_model(model: &Model) -> Result<AuditGrid, ModelError> {
        let fp = find_fixed_point(model, &vec![1.0; model.d])?;
        let s_star: f64 = fp.x_star.iter().sum();
        let l = 2.0 * s_star + 2.0;
        Ok(AuditGrid {
            r: 1.5 * l,
            l,
            points_per_axis: if model.d <= 2 { 64 } else { 16 },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisCheck {
    pub id: String,
    pub verdict: Verdict,
    /// Slack of the audited inequality; estimated constants (β, ξ, ...)
    /// are reported here.
    pub margin: f64,
    pub witness: Option<Vec<f64>>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub grid: AuditGrid,
    pub horizon: f64,
    pub checks: Vec<HypothesisCheck>,
    pub fixed_point: FixedPointResult,
    /// Numeric `∫_l^∞ ds / D_min(s)` including the extrapolated tail,
    /// when H6 could be certified.
    pub integral_inv_dmin: Option<f64>,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict == Verdict::Pass)
    }

    pub fn check(&self, id: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// Estimated H3 constant (margin of the H3 check).
    pub fn beta(&self) -> Option<f64> {
        self.check("H3").and_then(|c| {
            if c.verdict == Verdict::Pass {
                Some(c.margin)
            } else {
                None
            }
        })
    }
}

struct GridIter {
    idx: Vec<usize>,
    n: usize,
    done: bool,
}

impl GridIter {
    fn new(d: usize, n: usize) -> Self {
        GridIter {
            idx: vec![0; d],
            n,
            done: n == 0,
        }
    }
}

impl Iterator for GridIter {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        for i in 0..self.idx.len() {
            self.idx[i] += 1;
            if self.idx[i] < self.n {
                return Some(out);
            }
            self.idx[i] = 0;
        }
        self.done = true;
        Some(out)
    }
}

/// Enumerate points of the simplex `{x >= 0 : Σ x_i = s}` as compositions
/// with `resolution` increments per axis.
fn for_each_simplex_point(d: usize, s: f64, resolution: usize, f: &mut impl FnMut(&[f64])) {
    fn rec(
        d: usize,
        rem: usize,
        res: usize,
        s: f64,
        current: &mut Vec<f64>,
        f: &mut impl FnMut(&[f64]),
    ) {
        if current.len() == d - 1 {
            let used: f64 = current.iter().sum();
            current.push((s - used).max(0.0));
            f(current);
            current.pop();
            return;
        }
        for k in 0..=rem {
            current.push(s * k as f64 / res as f64);
            rec(d, rem - k, res, s, current, f);
            current.pop();
        }
    }
    if d == 1 {
        f(&[s]);
        return;
    }
    rec(d, resolution, resolution, s, &mut Vec::new(), f);
}

/// `B_max(s) = sup_{|x|_1 = s} Σ B_j` and `D_min(s) = inf_{|x|_1 = s} Σ D_j`,
/// estimated by sampling the simplex.
pub fn envelope_at(model: &Model, s: f64, resolution: usize) -> (f64, f64) {
    let mut bmax = f64::NEG_INFINITY;
    let mut dmin = f64::INFINITY;
    for_each_simplex_point(model.d, s, resolution, &mut |x| {
        let b: f64 = model.birth.eval(x).iter().sum();
        let d: f64 = model.death.eval(x).iter().sum();
        bmax = bmax.max(b);
        dmin = dmin.min(d);
    });
    (bmax, dmin)
}

/// Numeric audit of hypotheses H0–H8 on the grid. Fail verdicts always
/// carry a witness; margins below tolerance yield `Inconclusive`, never a
/// silent pass.
pub fn check_hypotheses(
    model: &Model,
    grid: &AuditGrid,
    horizon: f64,
) -> Result<HypothesisReport, ModelError> {
    const MARGIN_TOL: f64 = 1e-9;
    let d = model.d;
    let n = grid.points_per_axis.max(2);
    let step = grid.r / (n - 1) as f64;
    let mut checks = Vec::new();

    let fixed_point = find_fixed_point(model, &vec![1.0; d])?;
    let x_star = fixed_point.x_star.clone();

    // H0: nonnegativity on the grid; H1: fields vanish only at the origin.
    let mut h0_margin = f64::INFINITY;
    let mut h0_witness = None;
    let mut h1_margin = f64::INFINITY;
    let mut h1_witness = None;
    // H3: largest feasible β; H7: jump-rate floor ξ.
    let mut h3_margin = f64::INFINITY;
    let mut h3_witness = None;
    let mut h7_margin = f64::INFINITY;
    let mut h7_witness = None;

    for idx in GridIter::new(d, n) {
        let x: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
        let b = model.birth.eval(&x);
        let dv = model.death.eval(&x);
        for v in b.iter().chain(dv.iter()) {
            if *v < h0_margin {
                h0_margin = *v;
                h0_witness = Some(x.clone());
            }
        }
        let origin = x.iter().all(|&v| v == 0.0);
        if !origin {
            let bmax = b.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let dmax = dv.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let vanish = bmax.min(dmax);
            if vanish < h1_margin {
                h1_margin = vanish;
                h1_witness = Some(x.clone());
            }

            let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dist2: f64 = x
                .iter()
                .zip(&x_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if norm_x < grid.r && dist2.sqrt() > 0.5 * step {
                let dot: f64 = (0..d).map(|j| (b[j] - dv[j]) * (x[j] - x_star[j])).sum();
                let beta_here = -dot / (norm_x * dist2);
                if beta_here < h3_margin {
                    h3_margin = beta_here;
                    h3_witness = Some(x.clone());
                }
            }

            // total death rate against the largest coordinate
            let xmax = x.iter().fold(0.0f64, |a, &v| a.max(v));
            let dsum: f64 = dv.iter().sum();
            let xi_here = dsum / xmax;
            if xi_here < h7_margin {
                h7_margin = xi_here;
                h7_witness = Some(x.clone());
            }
        }
    }

    let verdict_of = |margin: f64| {
        if margin > MARGIN_TOL {
            Verdict::Pass
        } else if margin < -MARGIN_TOL {
            Verdict::Fail
        } else {
            Verdict::Inconclusive
        }
    };

    checks.push(HypothesisCheck {
        id: "H0".into(),
        verdict: if h0_margin >= 0.0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        margin: h0_margin,
        witness: h0_witness,
        note: "min rate over grid".into(),
    });

    // Linear instability of the origin is part of H1.
    let origin_spectrum = &fixed_point.jacobian_eigs_at_zero;
    let max_re_zero = origin_spectrum
        .iter()
        .map(|(re, _)| *re)
        .fold(f64::NEG_INFINITY, f64::max);
    let h1_verdict = if h1_margin > MARGIN_TOL && max_re_zero > MARGIN_TOL {
        Verdict::Pass
    } else if h1_margin < -MARGIN_TOL || max_re_zero < -MARGIN_TOL {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    };
    checks.push(HypothesisCheck {
        id: "H1".into(),
        verdict: h1_verdict,
        margin: h1_margin.min(max_re_zero),
        witness: h1_witness,
        note: format!("vanish-only-at-origin margin {h1_margin:.3e}; origin instability Re {max_re_zero:.3e}"),
    });

    let h2_ok = fixed_point.converged && x_star.iter().all(|&v| v > 0.0);
    checks.push(HypothesisCheck {
        id: "H2".into(),
        verdict: if h2_ok { Verdict::Pass } else { Verdict::Fail },
        margin: x_star.iter().cloned().fold(f64::INFINITY, f64::min),
        witness: Some(x_star.clone()),
        note: format!("residual {:.3e}", fixed_point.residual),
    });

    checks.push(HypothesisCheck {
        id: "H3".into(),
        verdict: verdict_of(h3_margin),
        margin: h3_margin,
        witness: h3_witness,
        note: "largest feasible beta on the grid".into(),
    });

    // H4: exact geometric containment of ball / simplex slab / ball.
    let s_star: f64 = x_star.iter().sum();
    let min_xstar = x_star.iter().cloned().fold(f64::INFINITY, f64::min);
    let norm_xstar = x_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ball_slack = grid.l - (s_star + 0.5 * min_xstar * (d as f64).sqrt());
    let slab_slack = grid.r - grid.l;
    let h4_margin = ball_slack.min(slab_slack).min(grid.r - norm_xstar);
    checks.push(HypothesisCheck {
        id: "H4".into(),
        verdict: verdict_of(h4_margin),
        margin: h4_margin,
        witness: None,
        note: format!("ball slack {ball_slack:.3e}, slab slack {slab_slack:.3e}"),
    });

    // H5: sup over s in (L, horizon] of B_max / D_min against 1/2.
    let s_max = horizon.max(grid.l * 1.01);
    let s_points = 256;
    let mut h5_sup = f64::NEG_INFINITY;
    let mut h5_witness = None;
    let simplex_res = if d == 1 { 1 } else { 48 };
    let mut dmin_curve = Vec::with_capacity(s_points);
    for i in 1..=s_points {
        let s = grid.l + (s_max - grid.l) * i as f64 / s_points as f64;
        let (bmax, dmin) = envelope_at(model, s, simplex_res);
        dmin_curve.push((s, dmin));
        let ratio = if dmin > 0.0 { bmax / dmin } else { f64::INFINITY };
        if ratio > h5_sup {
            h5_sup = ratio;
            h5_witness = Some(vec![s]);
        }
    }
    checks.push(HypothesisCheck {
        id: "H5".into(),
        verdict: verdict_of(0.5 - h5_sup),
        margin: 0.5 - h5_sup,
        witness: h5_witness,
        note: format!("sup B_max/D_min = {h5_sup:.6} over ({}, {s_max}]", grid.l),
    });

    // H6: eventual monotonicity of D_min plus integrability of 1/D_min,
    // with a power-law extrapolated tail beyond the horizon.
    let monotone = dmin_curve.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12);
    let mut integral = 0.0;
    for w in dmin_curve.windows(2) {
        let (s0, d0) = w[0];
        let (s1, d1) = w[1];
        if d0 > 0.0 && d1 > 0.0 {
            integral += (s1 - s0) * 0.5 * (1.0 / d0 + 1.0 / d1);
        }
    }
    // fit D_min ~ c s^p on the upper half of the sampled range
    let half = dmin_curve.len() / 2;
    let fit = crate::stats::linear_fit(
        &dmin_curve[half..]
            .iter()
            .filter(|(_, v)| *v > 0.0)
            .map(|(s, v)| (s.ln(), v.ln()))
            .collect::<Vec<_>>(),
    );
    let (h6_verdict, h6_note, integral_total) = match fit {
        Some(f) if f.slope > 1.0 && monotone => {
            let (sh, dh) = *dmin_curve.last().unwrap();
            let tail = sh / (dh * (f.slope - 1.0));
            (
                Verdict::Pass,
                format!(
                    "monotone on ({}, {s_max}], fitted exponent {:.3}, tail {:.3e}",
                    grid.l, f.slope, tail
                ),
                Some(integral + tail),
            )
        }
        Some(f) => (
            Verdict::Inconclusive,
            format!("monotone = {monotone}, fitted exponent {:.3} <= 1 or not monotone", f.slope),
            None,
        ),
        None => (Verdict::Inconclusive, "envelope fit failed".into(), None),
    };
    checks.push(HypothesisCheck {
        id: "H6".into(),
        verdict: h6_verdict,
        margin: fit.map(|f| f.slope - 1.0).unwrap_or(f64::NEG_INFINITY),
        witness: None,
        note: h6_note,
    });

    checks.push(HypothesisCheck {
        id: "H7".into(),
        verdict: verdict_of(h7_margin),
        margin: h7_margin,
        witness: h7_witness,
        note: "estimated xi: min total death rate over largest coordinate".into(),
    });

    // H8: exact gradient of the birth field at the origin.
    let mut h8_margin = f64::INFINITY;
    let mut h8_j = 0;
    for j in 0..d {
        let g = model.birth.component(j).gradient_entry_at_zero(j);
        if g < h8_margin {
            h8_margin = g;
            h8_j = j;
        }
    }
    checks.push(HypothesisCheck {
        id: "H8".into(),
        verdict: verdict_of(h8_margin),
        margin: h8_margin,
        witness: None,
        note: format!("min_j dB_j/dx_j(0) attained at j = {h8_j} (exact)"),
    });

    Ok(HypothesisReport {
        grid: grid.clone(),
        horizon,
        checks,
        fixed_point,
        integral_inv_dmin: integral_total,
    })
}

/// Parse a model document (JSON-compatible structured text).
pub fn model_from_json(text: &str) -> Result<Model, String> {
    let model: Model = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if model.birth.d() != model.d || model.death.d() != model.d {
        return Err(format!(
            "model declares d = {} but has {} birth and {} death components",
            model.d,
            model.birth.d(),
            model.death.d()
        ));
    }
    for j in 0..model.d {
        if !model.birth.component(j).dimension_ok(model.d)
            || !model.death.component(j).dimension_ok(model.d)
        {
            return Err(format!("component {j} has terms with wrong exponent count"));
        }
    }
    Ok(model)
}

pub fn model_to_json(model: &Model) -> String {
    serde_json::to_string_pretty(model).expect("model serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn competition() -> Model {
        builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap()
    }

    #[test]
    fn competition_rates_at_grid_point() {
        // d=2, lambda=2, mu=1, kappa=1, K=10, n=(5,5): S=1, birth=(20,20), death=(10,10)
        let m = competition();
        let (b, d) = eval_rates(&m, &State::new(vec![5, 5]), 10.0).unwrap();
        assert_eq!(b, vec![20.0, 20.0]);
        assert_eq!(d, vec![10.0, 10.0]);
    }

    #[test]
    fn rates_vanish_at_origin() {
        let m = competition();
        let (b, d) = eval_rates(&m, &State::new(vec![0, 0]), 10.0).unwrap();
        assert_eq!(b, vec![0.0, 0.0]);
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn logistic_rates_hand_evaluated() {
        // d=1, B=2x, D=x(1+x), K=4, n=2: birth=4, death=3
        let m = builtin_logistic_model(2.0, 1.0, 1.0).unwrap();
        let (b, d) = eval_rates(&m, &State::new(vec![2]), 4.0).unwrap();
        assert_eq!(b, vec![4.0]);
        assert_eq!(d, vec![3.0]);
    }

    #[test]
    fn birth_total_is_homogeneous_closed_form() {
        // for the competition model, total birth = K * d * lambda * S exactly
        let m = competition();
        let k = 7.0;
        for n in [[1u32, 2u32], [10, 3], [40, 40], [0, 9]] {
            let (b, _) = eval_rates(&m, &State::new(n.to_vec()), k).unwrap();
            let s = (f64::from(n[0]) + f64::from(n[1])) / k;
            assert_relative_eq!(b.iter().sum::<f64>(), k * 2.0 * 2.0 * s, max_relative = 1e-12);
        }
    }

    #[test]
    fn negative_rate_is_reported_with_witness() {
        // B = x - x^2 goes negative past x = 1
        let mut b = Polynomial::linear(1, 0, 1.0);
        b.push(-1.0, vec![2]);
        let m = Model {
            name: "bad".into(),
            d: 1,
            birth: RateField::new(vec![b]),
            death: RateField::new(vec![Polynomial::linear(1, 0, 1.0)]),
            builtin: None,
        };
        let err = eval_rates(&m, &State::new(vec![9]), 4.0).unwrap_err();
        match err {
            ModelError::NegativeRate { kind, state, .. } => {
                assert_eq!(kind, "birth");
                assert_eq!(state, vec![9]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn competition_fixed_point_closed_form() {
        // x*_j = S*/d with S* = (lambda d - mu)/kappa = 3
        let m = competition();
        let fp = find_fixed_point(&m, &[0.3, 2.9]).unwrap();
        assert!(fp.converged);
        assert_relative_eq!(fp.x_star[0], 1.5, epsilon = 1e-9);
        assert_relative_eq!(fp.x_star[1], 1.5, epsilon = 1e-9);
        assert!(fp.residual <= 1e-10);
    }

    #[test]
    fn logistic_fixed_point() {
        let m = builtin_logistic_model(2.0, 1.0, 1.0).unwrap();
        let fp = find_fixed_point(&m, &[3.0]).unwrap();
        assert!(fp.converged);
        assert_relative_eq!(fp.x_star[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn starting_at_the_fixed_point_converges_immediately() {
        let m = competition();
        let fp = find_fixed_point(&m, &[1.5, 1.5]).unwrap();
        assert!(fp.converged);
        assert!(fp.iterations <= 1, "took {} iterations", fp.iterations);
        assert!(fp.residual <= 1e-12);
    }

    #[test]
    fn origin_is_linearly_unstable_for_competition() {
        let m = competition();
        let fp = find_fixed_point(&m, &[1.0, 1.0]).unwrap();
        let max_re = fp
            .jacobian_eigs_at_zero
            .iter()
            .map(|(re, _)| *re)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_re > 0.0, "origin spectrum {:?}", fp.jacobian_eigs_at_zero);
    }

    #[test]
    fn builtin_rejects_boundary_parameters() {
        // lambda > mu/d fails at (1,1,1,1)
        let err = builtin_competition_model(1.0, 1.0, 1.0, 1).unwrap_err();
        assert!(err.to_string().contains("lambda > mu/d"));
    }

    #[test]
    fn builtin_example_value() {
        // (1, 0.5, 2, 3): B_1(1,1,1) = lambda * S = 3
        let m = builtin_competition_model(1.0, 0.5, 2.0, 3).unwrap();
        assert_relative_eq!(m.birth.component(0).eval(&[1.0, 1.0, 1.0]), 3.0);
    }

    #[test]
    fn hypotheses_pass_for_competition_with_l8() {
        let m = competition();
        let grid = AuditGrid {
            r: 12.0,
            l: 8.0,
            points_per_axis: 64,
        };
        let report = check_hypotheses(&m, &grid, 200.0).unwrap();
        for c in &report.checks {
            assert_eq!(c.verdict, Verdict::Pass, "{}: {:?} ({})", c.id, c.verdict, c.note);
        }
        // H5 ratio for this model is 4/(1+s), below 1/2 past s = 7
        let h5 = report.check("H5").unwrap();
        assert!(h5.margin > 0.0 && h5.margin < 0.5);
        // H8 margin is lambda
        assert_relative_eq!(report.check("H8").unwrap().margin, 2.0);
        // H3 estimate must be positive on every grid
        assert!(report.beta().unwrap() > 0.0);
    }

    #[test]
    fn h5_fails_without_quadratic_death() {
        // d=1, B=2x, D=x: the ratio is 2 for every s
        let m = Model {
            name: "no-quadratic-death".into(),
            d: 1,
            birth: RateField::new(vec![Polynomial::linear(1, 0, 2.0)]),
            death: RateField::new(vec![Polynomial::linear(1, 0, 1.0)]),
            builtin: None,
        };
        let grid = AuditGrid {
            r: 10.0,
            l: 5.0,
            points_per_axis: 32,
        };
        let report = check_hypotheses(&m, &grid, 100.0).unwrap();
        let h5 = report.check("H5").unwrap();
        assert_eq!(h5.verdict, Verdict::Fail);
        assert!(h5.witness.is_some());
    }

    #[test]
    fn model_json_round_trip_bit_exact() {
        let m = builtin_competition_model(2.0, 1.0 / 3.0, 0.1 + 0.2, 2).unwrap();
        let text = model_to_json(&m);
        let back = model_from_json(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(text, model_to_json(&back));
    }
}
