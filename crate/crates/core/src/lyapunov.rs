//! The exponential Lyapunov function `φ(n) = exp(α ||n - n*||² / K)`, exact
//! generator drift evaluation, drift-bound certification scans, the
//! nested-domains descent constants, and the dominating-chain hitting-time
//! series.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{eval_rates, find_fixed_point, Model, ModelError};
use crate::sim::{norm_u32, replica_rng, scaled_point, State};

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("alpha must lie strictly inside (0, 1/2), got {0}")]
    InvalidAlpha(f64),
    #[error("the drift ratio is undefined at the origin")]
    OriginState,
    #[error("domination fails at level {q}: birth/death ratio {ratio} exceeds 1/2")]
    DominationViolated { q: u64, ratio: f64 },
    #[error("{0}")]
    Inapplicable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_alpha(alpha: f64) -> Result<(), LyapunovError> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(())
    } else {
        Err(LyapunovError::InvalidAlpha(alpha))
    }
}

fn dist2(n: &[u32], n_star: &[u32]) -> f64 {
    n.iter()
        .zip(n_star)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum()
}

/// `φ(n) = exp((α/K) ||n - n*||²)`.
pub fn phi(n: &[u32], n_star: &[u32], k: f64, alpha: f64) -> Result<f64, LyapunovError> {
    check_alpha(alpha)?;
    Ok((alpha / k * dist2(n, n_star)).exp())
}

/// Exact `Lφ(n)/φ(n)`: the per-jump exponent `(α/K)(±2(n_j - n*_j) + 1)`
/// is formed directly, so φ itself is never evaluated and the ratio stays
/// finite far from n*.
pub fn drift_ratio(
    model: &Model,
    k: f64,
    alpha: f64,
    n: &[u32],
    n_star: &[u32],
) -> Result<f64, LyapunovError> {
    check_alpha(alpha)?;
    if n.iter().all(|&c| c == 0) {
        return Err(LyapunovError::OriginState);
    }
    let (birth, death) = eval_rates(model, &State::new(n.to_vec()), k)?;
    let mut acc = 0.0;
    for j in 0..model.d {
        let delta = f64::from(n[j]) - f64::from(n_star[j]);
        if birth[j] != 0.0 {
            acc += birth[j] * (alpha / k * (2.0 * delta + 1.0)).exp_m1();
        }
        if death[j] != 0.0 {
            acc += death[j] * (alpha / k * (-2.0 * delta + 1.0)).exp_m1();
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub region: String,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub c_floor: f64,
    /// `Lφ/φ` at the worst state of the negative-drift region.
    pub worst_ratio: f64,
    pub worst_state: Vec<u32>,
    /// Required bound at the worst state: `-(αβ/2)(||n||/K)(||n-n*||²/K)`.
    pub worst_required: f64,
    /// Minimal C with `Lφ/φ <= -αβ(||n||/K)(||n-n*||²/K) + C` on the ball.
    pub fitted_c: f64,
    pub pass: bool,
    pub exhaustive: bool,
    pub states_scanned: usize,
}

/// Scans the lattice ball `B(0, r_ball K)` and certifies both drift
/// statements: the global inequality with its minimal constant, and the
/// negativity of the drift on `{||n|| >= c_floor, ||n - n*|| >= rho sqrt(K)}`.
/// Beyond the enumeration budget the scan switches to stratified shell
/// sampling and is flagged non-exhaustive.
pub fn verify_drift_bound(
    model: &Model,
    k: f64,
    alpha: f64,
    beta: f64,
    r_ball: f64,
    rho: f64,
    c_floor: f64,
) -> Result<DriftReport, LyapunovError> {
    check_alpha(alpha)?;
    const BUDGET: usize = 5_000_000;
    let fp = find_fixed_point(model, &vec![1.0; model.d])?;
    let n_star = scaled_point(&fp.x_star, k);
    let radius = r_ball * k;
    let hi: Vec<u32> = (0..model.d).map(|_| radius.floor() as u32).collect();
    let mut total: usize = 1;
    for &h in &hi {
        total = total.saturating_mul(h as usize + 1);
    }

    let mut fitted_c = f64::NEG_INFINITY;
    let mut pass = true;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_state: Vec<u32> = Vec::new();
    let mut states_scanned = 0usize;
    let sqrt_k_rho = rho * k.sqrt();

    let exhaustive = total <= BUDGET;
    {
        let mut visit = |n: &[u32]| -> Result<(), LyapunovError> {
            let norm = norm_u32(n);
            if norm > radius || n.iter().all(|&c| c == 0) {
                return Ok(());
            }
            states_scanned += 1;
            let ratio = drift_ratio(model, k, alpha, n, n_star.coords())?;
            let d2 = dist2(n, n_star.coords());
            let term = alpha * beta * (norm / k) * (d2 / k);
            fitted_c = fitted_c.max(ratio + term);
            if norm >= c_floor && d2.sqrt() >= sqrt_k_rho {
                let required = -0.5 * term;
                let margin = ratio - required;
                if margin > worst_margin {
                    worst_margin = margin;
                    worst_state = n.to_vec();
                }
                if ratio > required {
                    pass = false;
                }
            }
            Ok(())
        };

        if exhaustive {
            let mut n = vec![0u32; model.d];
            'outer: loop {
                visit(&n)?;
                for j in 0..model.d {
                    n[j] += 1;
                    if n[j] <= hi[j] {
                        continue 'outer;
                    }
                    n[j] = 0;
                }
                break;
            }
        } else {
            // stratified sampling by radius shells, 10^4 draws per shell
            let shells = 64usize;
            let mut rng = replica_rng(0xD15C, 0);
            for shell in 0..shells {
                let r_lo = radius * shell as f64 / shells as f64;
                let r_hi = radius * (shell + 1) as f64 / shells as f64;
                let mut found = 0usize;
                let mut attempts = 0usize;
                while found < 10_000 && attempts < 200_000 {
                    attempts += 1;
                    let n: Vec<u32> = (0..model.d)
                        .map(|_| rng.gen_range(0..=radius.floor() as u32))
                        .collect();
                    let norm = norm_u32(&n);
                    if norm >= r_lo && norm < r_hi {
                        visit(&n)?;
                        found += 1;
                    }
                }
            }
        }
    }

    let (worst_ratio, worst_required) = if worst_state.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        // recompute independently at the reported state
        let r = drift_ratio(model, k, alpha, &worst_state, n_star.coords())?;
        let term = alpha
            * beta
            * (norm_u32(&worst_state) / k)
            * (dist2(&worst_state, n_star.coords()) / k);
        (r, -0.5 * term)
    };

    Ok(DriftReport {
        region: format!(
            "ball ||n|| <= {radius}, negative-drift region ||n|| >= {c_floor}, ||n-n*|| >= {sqrt_k_rho}"
        ),
        alpha,
        beta,
        rho,
        c_floor,
        worst_ratio,
        worst_state,
        worst_required,
        fitted_c,
        pass,
        exhaustive,
        states_scanned,
    })
}

/// Per-state drift ratios over the lattice ball, for scan dumps. `stride`
/// subsamples each axis to keep files reviewable.
pub fn drift_scan_rows(
    model: &Model,
    k: f64,
    alpha: f64,
    r_ball: f64,
    stride: u32,
) -> Result<Vec<(Vec<u32>, f64)>, LyapunovError> {
    check_alpha(alpha)?;
    let fp = find_fixed_point(model, &vec![1.0; model.d])?;
    let n_star = scaled_point(&fp.x_star, k);
    let radius = r_ball * k;
    let hi = radius.floor() as u32;
    let stride = stride.max(1);
    let mut rows = Vec::new();
    let mut n = vec![0u32; model.d];
    'outer: loop {
        if n.iter().any(|&c| c > 0) && norm_u32(&n) <= radius {
            rows.push((n.clone(), drift_ratio(model, k, alpha, &n, n_star.coords())?));
        }
        for j in 0..model.d {
            n[j] += stride;
            if n[j] <= hi {
                continue 'outer;
            }
            n[j] = 0;
        }
        break;
    }
    Ok(rows)
}

/// Line search over decreasing α inside the admissible interval (0, 1/2),
/// returning the largest value whose negative-drift scan passes.
pub fn select_alpha(
    model: &Model,
    k: f64,
    beta: f64,
    r_ball: f64,
    rho: f64,
    c_floor: f64,
) -> Result<(f64, DriftReport), LyapunovError> {
    let mut last_err = None;
    for &alpha in &[0.25, 0.1, 0.05, 0.02, 0.01] {
        match verify_drift_bound(model, k, alpha, beta, r_ball, rho, c_floor) {
            Ok(rep) if rep.pass => return Ok((alpha, rep)),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        LyapunovError::Inapplicable(
            "no alpha in the search set passes the negative-drift scan".into(),
        )
    }))
}

/// Full calibration: the smallest radius multiplier and norm floor from the
/// default grids whose scan passes, with the largest admissible α. Nothing
/// is hard-coded; the chosen values are in the report.
pub fn calibrate_drift(
    model: &Model,
    k: f64,
    beta: f64,
    r_ball: f64,
) -> Result<(f64, DriftReport), LyapunovError> {
    let mut last_err = None;
    for &rho in &[1.0, 1.5, 2.0, 2.5, 3.0, 4.0] {
        for &c_floor in &[5.0, 10.0, 20.0] {
            match select_alpha(model, k, beta, r_ball, rho, c_floor) {
                Ok(found) => return Ok(found),
                Err(e) => last_err = Some(e),
            }
        }
    }
    Err(last_err.unwrap_or_else(|| {
        LyapunovError::Inapplicable("no calibration in the default grids passes".into())
    }))
}

/// The two time/failure-probability clauses of the nested-domains descent bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DescentClause {
    pub t: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FourDomainsConstants {
    pub a0: f64,
    pub a1_prime: f64,
    pub a2_dprime: f64,
    pub lambda: f64,
    /// `t = (1/Λ) log(a''/a')`, `η = 2 a0 / a''`.
    pub clause1: DescentClause,
    /// `η = 1/2 + a0/(2a'')`, `t = -(1/Λ) log((a'/(2a0))(1 - a0/a''))`.
    pub clause2: DescentClause,
    /// The applicable clause with the smaller failure probability.
    pub best: DescentClause,
}

/// Pure arithmetic of the descent bound from the annuli extremes and the drift
/// level `Λ = -sup Lψ/ψ`.
pub fn four_domains_constants(
    a0: f64,
    a1_prime: f64,
    a2_dprime: f64,
    lambda: f64,
) -> Result<FourDomainsConstants, LyapunovError> {
    if !(a0 > 0.0 && a1_prime > 0.0 && a2_dprime > 0.0) {
        return Err(LyapunovError::Inapplicable(
            "annuli extremes of psi must be positive".into(),
        ));
    }
    if a0 / a2_dprime >= 1.0 {
        return Err(LyapunovError::Inapplicable(format!(
            "a0/a''_{{-2}} = {} >= 1; the descent bound requires a0/a''_{{-2}} < 1",
            a0 / a2_dprime
        )));
    }
    if lambda <= 0.0 {
        return Err(LyapunovError::Inapplicable(format!(
            "drift level Λ = {lambda} <= 0"
        )));
    }
    let clause1 = DescentClause {
        t: (a2_dprime / a1_prime).ln() / lambda,
        eta: 2.0 * a0 / a2_dprime,
    };
    let clause2 = DescentClause {
        t: -((a1_prime / (2.0 * a0)) * (1.0 - a0 / a2_dprime)).ln() / lambda,
        eta: 0.5 + a0 / (2.0 * a2_dprime),
    };
    let applicable = |c: &DescentClause| c.eta < 1.0 && c.t.is_finite() && c.t >= 0.0;
    let best = match (applicable(&clause1), applicable(&clause2)) {
        (true, false) => clause1,
        (false, true) => clause2,
        _ => {
            if clause1.eta <= clause2.eta {
                clause1
            } else {
                clause2
            }
        }
    };
    Ok(FourDomainsConstants {
        a0,
        a1_prime,
        a2_dprime,
        lambda,
        clause1,
        clause2,
        best,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DominatingChainResult {
    /// Expected hitting time of `p_target` from `p_start`.
    pub expected_time: f64,
    /// The uniform-in-start bound: the full series from `p_target + 1` up,
    /// with a power-law-extrapolated tail. `None` when the per-level times
    /// decay too slowly for the series to converge numerically.
    pub a_k: Option<f64>,
    pub outer_terms: usize,
    pub truncated_at: u64,
}

/// Expected first-passage time of the one-dimensional dominating chain with
/// birth rate `Λ(m) = K B_max(m/K)` and death rate `M(m) = K D_min(m/K)`,
/// by the nested descent series. Requires the domination ratio
/// `Λ(q)/M(q) <= 1/2` above the target level; inner tails stop once the
/// geometric envelope pushes increments below `tail_eps`.
pub fn dominating_chain_hitting_time(
    bmax: &dyn Fn(f64) -> f64,
    dmin: &dyn Fn(f64) -> f64,
    k: f64,
    p_target: u64,
    p_start: u64,
    tail_eps: f64,
) -> Result<DominatingChainResult, LyapunovError> {
    if p_start < p_target {
        return Err(LyapunovError::Inapplicable(format!(
            "start level {p_start} below target {p_target}"
        )));
    }
    let lam = |m: u64| k * bmax(m as f64 / k);
    let mu = |m: u64| k * dmin(m as f64 / k);

    let level_time = |m: u64| -> Result<f64, LyapunovError> {
        let mm = mu(m);
        if !(mm > 0.0) {
            return Err(LyapunovError::Inapplicable(format!(
                "death envelope vanishes at level {m}"
            )));
        }
        let mut acc = 1.0 / mm;
        // term_i = Λ(m)...Λ(i-1) / (M(m)...M(i))
        let mut term = 1.0 / mm;
        let mut i = m;
        loop {
            let ratio = lam(i) / mu(i);
            if ratio > 0.5 + 1e-12 {
                return Err(LyapunovError::DominationViolated { q: i, ratio });
            }
            let next = i + 1;
            term *= lam(i) / mu(next);
            if term <= 0.0 {
                break;
            }
            acc += term;
            // remaining tail is below 2 * term under the 1/2 ratio bound
            if 2.0 * term < tail_eps {
                break;
            }
            i = next;
            if i > m + 10_000_000 {
                return Err(LyapunovError::Inapplicable(format!(
                    "inner series at level {m} did not truncate"
                )));
            }
        }
        Ok(acc)
    };

    let mut expected_time = 0.0;
    for m in (p_target + 1)..=p_start {
        expected_time += level_time(m)?;
    }

    // A_K: sum levels until the power-law tail estimate
    // h(m) * m / (p - 1) drops below 0.1% of the accumulated value
    let mut partial = 0.0;
    let mut m = p_target + 1;
    let mut outer_terms = 0usize;
    let mut a_k = None;
    let mut window_start_h = f64::NAN;
    let mut window_start_m = m;
    const WINDOW: u64 = 64;
    loop {
        let h = level_time(m)?;
        partial += h;
        outer_terms += 1;
        if outer_terms == 1 || (m - window_start_m) >= WINDOW {
            if outer_terms > 1 && h > 0.0 && window_start_h > 0.0 {
                let p = (window_start_h / h).ln() / (m as f64 / window_start_m as f64).ln();
                if p > 1.05 {
                    let tail = h * m as f64 / (p - 1.0);
                    if tail < (1e-3 * partial).max(tail_eps) {
                        a_k = Some(partial + tail);
                        break;
                    }
                }
            }
            window_start_h = h;
            window_start_m = m;
        }
        if h == 0.0 {
            a_k = Some(partial);
            break;
        }
        m += 1;
        if outer_terms > 2_000_000 {
            break; // diverging or too slow: A_K reported as unavailable
        }
    }
    Ok(DominatingChainResult {
        expected_time,
        a_k,
        outer_terms,
        truncated_at: m,
    })
}
