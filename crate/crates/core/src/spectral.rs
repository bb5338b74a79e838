//! Truncated killed generator on a box and its leading spectral objects:
//! the quasi-stationary distribution ν, the extinction rate λ0, and the
//! eigenfunction u normalized by ν(u) = 1.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::model::{eval_rates, find_fixed_point, Model, ModelError};
use crate::sim::State;
use crate::stats::{self, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundaryPolicy {
    /// Jumps that would leave the box are suppressed.
    Reflect,
    /// Jumps that would leave the box kill the path.
    Kill,
}

/// Sub-Markovian rate matrix on the box minus the origin, in CSR form.
/// Transitions into the origin are pure killing (row defect).
///
/// States are indexed lexicographically: `(n_1, ..., n_d)` sorted with the
/// last coordinate varying fastest, origin removed. CSV dumps follow this
/// order.
pub struct KilledGenerator {
    pub d: usize,
    pub box_hi: Vec<u32>,
    pub policy: BoundaryPolicy,
    n_states: usize,
    strides: Vec<usize>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    diag: Vec<f64>,
    /// Per-state killing rate into the origin.
    pub kill_to_zero: Vec<f64>,
    /// Per-state killing rate through the box boundary (kill policy only).
    pub kill_at_boundary: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("box must contain at least 2 states per axis, got {0:?}")]
    BoxTooSmall(Vec<u32>),
    #[error("power iteration did not converge in {max_iter} iterations (residuals left {left:.3e}, right {right:.3e})")]
    NotConverged {
        max_iter: usize,
        left: f64,
        right: f64,
    },
    #[error("eigenvector has zero or sign-changing entries; the boxed chain is likely reducible")]
    Structural,
    #[error("left/right eigenvalue estimates disagree: {left} vs {right}")]
    LeftRightMismatch { left: f64, right: f64 },
    #[error("state {0:?} is outside the solver box")]
    OutsideBox(Vec<u32>),
    #[error("{0}")]
    Invalid(String),
}

impl KilledGenerator {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Lexicographic index of a state, `None` outside the box or at the
    /// origin.
    pub fn index_of(&self, n: &[u32]) -> Option<usize> {
        let mut idx = 0usize;
        for (j, &c) in n.iter().enumerate() {
            if c > self.box_hi[j] {
                return None;
            }
            idx += c as usize * self.strides[j];
        }
        if idx == 0 {
            None
        } else {
            Some(idx - 1)
        }
    }

    pub fn state_of(&self, idx: usize) -> State {
        let mut rem = idx + 1;
        let mut n = vec![0u32; self.d];
        for j in 0..self.d {
            n[j] = (rem / self.strides[j]) as u32;
            rem %= self.strides[j];
        }
        State::new(n)
    }

    /// `out = Q x` (right action on column vectors).
    pub fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n_states {
            let mut acc = self.diag[i] * x[i];
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[e] * x[self.col_idx[e]];
            }
            out[i] = acc;
        }
    }

    /// `out = Qᵀ x` (left action: row vectors evolve measures).
    pub fn mul_transpose_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n_states {
            out[i] = self.diag[i] * x[i];
        }
        for i in 0..self.n_states {
            let xi = x[i];
            if xi != 0.0 {
                for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                    out[self.col_idx[e]] += self.values[e] * xi;
                }
            }
        }
    }

    /// Row defect `-(diagonal + off-diagonal row sum)`.
    pub fn row_defect(&self, i: usize) -> f64 {
        let off: f64 = (self.row_ptr[i]..self.row_ptr[i + 1])
            .map(|e| self.values[e])
            .sum();
        -(self.diag[i] + off)
    }

    /// Strong connectivity of the off-diagonal pattern (forward and
    /// backward reachability sweeps from state 0).
    pub fn is_irreducible(&self) -> bool {
        self.reachable_from(0, false) == self.n_states
            && self.reachable_from(0, true) == self.n_states
    }

    fn reachable_from(&self, start: usize, transpose: bool) -> usize {
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); self.n_states];
        for i in 0..self.n_states {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                if transpose {
                    adjacency[self.col_idx[e]].push(i);
                } else {
                    adjacency[i].push(self.col_idx[e]);
                }
            }
        }
        let mut seen = vec![false; self.n_states];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(i) = stack.pop() {
            count += 1;
            for &j in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        count
    }

    /// Dense copy for oracle eigen-solves and matrix exponentials.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_states;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[e])] += self.values[e];
            }
        }
        m
    }
}

/// Default truncation box: per-axis bound `ceil(4 K x*_j)` with floor 20.
pub fn default_box(model: &Model, k: f64) -> Result<Vec<u32>, ModelError> {
    let fp = find_fixed_point(model, &vec![1.0; model.d])?;
    Ok(fp
        .x_star
        .iter()
        .map(|&v| ((4.0 * k * v).ceil() as u32).max(20))
        .collect())
}

/// Assembles the killed generator: `Q[n, n±e_j] = K B_j(n/K) / K D_j(n/K)`,
/// jumps into the origin become killing, jumps out of the box follow the
/// boundary policy.
pub fn build_killed_generator(
    model: &Model,
    k: f64,
    box_hi: &[u32],
    policy: BoundaryPolicy,
) -> Result<KilledGenerator, SpectralError> {
    let d = model.d;
    if box_hi.len() != d {
        return Err(SpectralError::Invalid(format!(
            "box has {} axes for a {d}-dimensional model",
            box_hi.len()
        )));
    }
    if box_hi.iter().any(|&h| h < 1) {
        return Err(SpectralError::BoxTooSmall(box_hi.to_vec()));
    }
    let mut strides = vec![0usize; d];
    let mut acc = 1usize;
    for j in (0..d).rev() {
        strides[j] = acc;
        acc *= box_hi[j] as usize + 1;
    }
    let n_states = acc - 1;
    if n_states < 1 {
        return Err(SpectralError::BoxTooSmall(box_hi.to_vec()));
    }

    let mut row_ptr = Vec::with_capacity(n_states + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut diag = vec![0.0; n_states];
    let mut kill_to_zero = vec![0.0; n_states];
    let mut kill_at_boundary = vec![0.0; n_states];

    row_ptr.push(0);
    let mut n = vec![0u32; d];
    for idx in 0..n_states {
        let mut rem = idx + 1;
        for j in 0..d {
            n[j] = (rem / strides[j]) as u32;
            rem %= strides[j];
        }
        let (birth, death) = eval_rates(model, &State::new(n.clone()), k)?;
        let mut out_rate = 0.0;
        for j in 0..d {
            if birth[j] > 0.0 {
                if n[j] < box_hi[j] {
                    col_idx.push(idx + strides[j]);
                    values.push(birth[j]);
                    out_rate += birth[j];
                } else {
                    match policy {
                        BoundaryPolicy::Reflect => {}
                        BoundaryPolicy::Kill => {
                            kill_at_boundary[idx] += birth[j];
                            out_rate += birth[j];
                        }
                    }
                }
            }
            if death[j] > 0.0 {
                // n_j >= 1 here: eval_rates rejects positive deaths on the
                // boundary
                let target = idx + 1 - strides[j];
                if target == 0 {
                    kill_to_zero[idx] += death[j];
                } else {
                    col_idx.push(target - 1);
                    values.push(death[j]);
                }
                out_rate += death[j];
            }
        }
        diag[idx] = -out_rate;
        row_ptr.push(col_idx.len());
    }

    Ok(KilledGenerator {
        d,
        box_hi: box_hi.to_vec(),
        policy,
        n_states,
        strides,
        row_ptr,
        col_idx,
        values,
        diag,
        kill_to_zero,
        kill_at_boundary,
    })
}

/// The QSD triple: left eigen-distribution, extinction rate, and right
/// eigenfunction with `ν(u) = 1`.
#[derive(Debug, Clone, Serialize)]
pub struct QsdSolution {
    pub nu: Vec<f64>,
    pub lambda0: f64,
    pub u: Vec<f64>,
    pub residual_left: f64,
    pub residual_right: f64,
    pub iterations: usize,
}

impl QsdSolution {
    /// `p_K(n) = u(n) ∧ 1`, the mixture weight of the QSD against the
    /// extinct mass.
    pub fn survival_weight(&self, idx: usize) -> f64 {
        self.u[idx].min(1.0)
    }
}

fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// Shifted power iteration on `Q + σI` (and its transpose) with
/// `σ = max_i |Q_ii| + 1`; λ0 comes from the right-vector Rayleigh
/// quotient, cross-checked against the left one.
pub fn solve_qsd(
    q: &KilledGenerator,
    tol: f64,
    max_iter: usize,
) -> Result<QsdSolution, SpectralError> {
    let n = q.n_states;
    let sigma = q.diag.iter().fold(0.0f64, |a, &d| a.max(d.abs())) + 1.0;

    let mut u = vec![1.0 / n as f64; n];
    let mut nu = vec![1.0 / n as f64; n];
    let mut buf = vec![0.0; n];
    let mut res_right = f64::INFINITY;
    let mut res_left = f64::INFINITY;
    let mut lam_right = f64::NAN;
    let mut lam_left = f64::NAN;
    let mut iterations = 0;

    while iterations < max_iter {
        // a block of iterations, then a residual check
        for _ in 0..16 {
            iterations += 1;
            q.mul_into(&u, &mut buf);
            let mut norm = 0.0;
            for i in 0..n {
                buf[i] += sigma * u[i];
                norm += buf[i].abs();
            }
            if norm == 0.0 {
                return Err(SpectralError::Structural);
            }
            for i in 0..n {
                u[i] = buf[i] / norm;
            }

            q.mul_transpose_into(&nu, &mut buf);
            let mut norm = 0.0;
            for i in 0..n {
                buf[i] += sigma * nu[i];
                norm += buf[i].abs();
            }
            if norm == 0.0 {
                return Err(SpectralError::Structural);
            }
            for i in 0..n {
                nu[i] = buf[i] / norm;
            }
        }

        // Rayleigh quotients on Q itself (avoids σ cancellation)
        q.mul_into(&u, &mut buf);
        let uu: f64 = u.iter().map(|x| x * x).sum();
        lam_right = -u.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>() / uu;
        res_right = {
            let mut worst = 0.0f64;
            for i in 0..n {
                worst = worst.max((buf[i] + lam_right * u[i]).abs());
            }
            worst / inf_norm(&u)
        };
        q.mul_transpose_into(&nu, &mut buf);
        let vv: f64 = nu.iter().map(|x| x * x).sum();
        lam_left = -nu.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>() / vv;
        res_left = {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (buf[i] + lam_left * nu[i]).abs();
            }
            acc / l1_norm(&nu)
        };
        if res_right <= tol && res_left <= tol {
            break;
        }
    }

    if res_right > tol || res_left > tol {
        return Err(SpectralError::NotConverged {
            max_iter,
            left: res_left,
            right: res_right,
        });
    }

    // orientation and positivity
    let flip = |v: &mut Vec<f64>| {
        if v.iter().sum::<f64>() < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    };
    flip(&mut u);
    flip(&mut nu);
    if u.iter().any(|&x| x <= 0.0) || nu.iter().any(|&x| x <= 0.0) {
        return Err(SpectralError::Structural);
    }

    // 1e-8 relative whenever the achieved residuals can resolve it; the
    // Rayleigh quotients only locate the eigenvalue to about the residual
    // in absolute terms, which dominates for tiny λ0
    let gate = (1e-8 * lam_right.abs()).max(20.0 * (res_left + res_right));
    if (lam_left - lam_right).abs() > gate {
        return Err(SpectralError::LeftRightMismatch {
            left: lam_left,
            right: lam_right,
        });
    }

    // normalize: ν a probability, u by ν(u) = 1
    let mass = l1_norm(&nu);
    for x in nu.iter_mut() {
        *x /= mass;
    }
    let weight: f64 = nu.iter().zip(&u).map(|(a, b)| a * b).sum();
    for x in u.iter_mut() {
        *x /= weight;
    }

    Ok(QsdSolution {
        nu,
        lambda0: lam_right,
        u,
        residual_left: res_left,
        residual_right: res_right,
        iterations,
    })
}

/// Mean time to extinction under the QSD.
pub fn mean_extinction_from_qsd(sol: &QsdSolution) -> f64 {
    1.0 / sol.lambda0
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumEstimate {
    /// Leading eigenvalues of Q sorted by descending real part, as
    /// (re, im) pairs. The first is `-λ0`.
    pub eigenvalues: Vec<(f64, f64)>,
    /// `λ1 - λ0` when at least two eigenvalues are available.
    pub gap: Option<f64>,
    pub dense: bool,
}

/// Number of states up to which the gap estimate goes through a dense
/// eigen-decomposition.
pub const DENSE_BUDGET: usize = 2600;

/// Leading `k` eigenvalue estimates of the killed generator. Small boxes
/// use a dense solve; larger ones fall back to one deflated power
/// iteration (k = 2 only).
pub fn spectral_gap_estimate(
    q: &KilledGenerator,
    k: usize,
) -> Result<SpectrumEstimate, SpectralError> {
    if q.n_states == 1 {
        return Ok(SpectrumEstimate {
            eigenvalues: vec![(q.diag[0] - q.row_defect(0), 0.0)],
            gap: None,
            dense: true,
        });
    }
    if q.n_states <= DENSE_BUDGET {
        let eigs = crate::dense::eigenvalues_sorted(&q.to_dense());
        let take: Vec<(f64, f64)> = eigs.into_iter().take(k.max(2)).collect();
        let gap = if take.len() >= 2 {
            Some(take[0].0 - take[1].0)
        } else {
            None
        };
        return Ok(SpectrumEstimate {
            eigenvalues: take,
            gap,
            dense: true,
        });
    }
    if k != 2 {
        return Err(SpectralError::Invalid(format!(
            "{} states exceed the dense budget; only k = 2 via deflation is supported",
            q.n_states
        )));
    }
    let sol = solve_qsd(q, 1e-10, 400_000)?;
    let n = q.n_states;
    let sigma = q.diag.iter().fold(0.0f64, |a, &d| a.max(d.abs())) + 1.0;
    let nu_u: f64 = sol.nu.iter().zip(&sol.u).map(|(a, b)| a * b).sum();
    // deflate the leading pair out of M = Q + σI and iterate
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
    let mut buf = vec![0.0; n];
    let mut lam1 = f64::NAN;
    let mut converged = false;
    for _ in 0..200_000 {
        q.mul_into(&v, &mut buf);
        let proj: f64 = sol.nu.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / nu_u;
        let theta0 = sigma - sol.lambda0;
        let mut norm = 0.0;
        for i in 0..n {
            buf[i] += sigma * v[i] - theta0 * proj * sol.u[i];
            norm += buf[i] * buf[i];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            break;
        }
        for i in 0..n {
            v[i] = buf[i] / norm;
        }
        q.mul_into(&v, &mut buf);
        let proj: f64 = sol.nu.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / nu_u;
        for i in 0..n {
            buf[i] += sigma * v[i] - (sigma - sol.lambda0) * proj * sol.u[i];
        }
        let theta: f64 = v.iter().zip(&buf).map(|(a, b)| a * b).sum();
        let mut res = 0.0f64;
        for i in 0..n {
            res = res.max((buf[i] - theta * v[i]).abs());
        }
        lam1 = sigma - theta;
        if res <= 1e-8 * theta.abs() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SpectralError::Invalid(
            "deflated power iteration did not settle; second eigenvalue may be complex".into(),
        ));
    }
    Ok(SpectrumEstimate {
        eigenvalues: vec![(-sol.lambda0, 0.0), (-lam1, 0.0)],
        gap: Some(lam1 - sol.lambda0),
        dense: false,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub k: f64,
    pub lambda0: f64,
    pub log_lambda0: f64,
    pub box_hi: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub dropped: Vec<(f64, String)>,
    /// Least-squares fit of `log λ0` against `K`.
    pub fit: Option<LinearFit>,
    pub slope_negative: bool,
}

/// Exact eigen-solves of λ0 across scales with the default box rule scaled
/// by `box_factor`, plus a linear fit of `log λ0` vs `K`.
pub fn lambda0_scaling(
    model: &Model,
    ks: &[f64],
    box_factor: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ScalingTable, SpectralError> {
    let fp = find_fixed_point(model, &vec![1.0; model.d])?;
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for &k in ks {
        let box_hi: Vec<u32> = fp
            .x_star
            .iter()
            .map(|&v| ((box_factor * k * v).ceil() as u32).max(20))
            .collect();
        let q = build_killed_generator(model, k, &box_hi, BoundaryPolicy::Reflect)?;
        let sol = solve_qsd(&q, tol, max_iter)?;
        if sol.lambda0 < 1e-300 {
            dropped.push((k, format!("lambda0 = {} below the floating floor", sol.lambda0)));
            continue;
        }
        rows.push(ScalingRow {
            k,
            lambda0: sol.lambda0,
            log_lambda0: sol.lambda0.ln(),
            box_hi,
        });
    }
    let fit = stats::linear_fit(
        &rows
            .iter()
            .map(|r| (r.k, r.log_lambda0))
            .collect::<Vec<_>>(),
    );
    let slope_negative = fit.map(|f| f.slope < 0.0).unwrap_or(false);
    Ok(ScalingTable {
        rows,
        dropped,
        fit,
        slope_negative,
    })
}

/// The 2-state reference chain: states {1, 2} with birth(1) = 1,
/// death(1) = 1 (killing), death(2) = 2. Its generator is
/// `[[-2, 1], [2, -2]]` with λ0 = 2 - √2.
pub fn two_state_fixture_model() -> Model {
    use crate::model::RateField;
    use crate::poly::Polynomial;
    // B(x) = x(2 - x), D(x) = x on the box {0, 1, 2} with K = 1
    let mut b = Polynomial::linear(1, 0, 2.0);
    b.push(-1.0, vec![2]);
    Model {
        name: "two-state".into(),
        d: 1,
        birth: RateField::new(vec![b]),
        death: RateField::new(vec![Polynomial::linear(1, 0, 1.0)]),
        builtin: None,
    }
}

pub fn two_state_fixture() -> KilledGenerator {
    build_killed_generator(&two_state_fixture_model(), 1.0, &[2], BoundaryPolicy::Reflect)
        .expect("fixture box is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_competition_model;
    use approx::assert_relative_eq;

    #[test]
    fn two_state_generator_matches_hand_assembly() {
        let q = two_state_fixture();
        assert_eq!(q.n_states(), 2);
        let m = q.to_dense();
        assert_eq!(m[(0, 0)], -2.0);
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(1, 0)], 2.0);
        assert_eq!(m[(1, 1)], -2.0);
        // death(1) is pure killing
        assert_eq!(q.kill_to_zero[0], 1.0);
        assert_eq!(q.row_defect(0), 1.0);
        assert_eq!(q.row_defect(1), 0.0);
    }

    #[test]
    fn two_state_qsd_closed_form() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let s2 = 2f64.sqrt();
        assert_relative_eq!(sol.lambda0, 2.0 - s2, epsilon = 1e-10);
        assert_relative_eq!(sol.nu[0], s2 / (s2 + 1.0), epsilon = 1e-10);
        assert_relative_eq!(sol.nu[1], 1.0 / (s2 + 1.0), epsilon = 1e-10);
        // u ∝ (1, √2) normalized by ν(u) = 1
        assert_relative_eq!(sol.u[1] / sol.u[0], s2, epsilon = 1e-9);
        let weight: f64 = sol.nu.iter().zip(&sol.u).map(|(a, b)| a * b).sum();
        assert_relative_eq!(weight, 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            mean_extinction_from_qsd(&sol),
            (2.0 + s2) / 2.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn single_state_chain_is_scalar() {
        // all rates zero except death at state 1: Q = [-d]
        use crate::model::RateField;
        use crate::poly::Polynomial;
        let m = crate::model::Model {
            name: "scalar".into(),
            d: 1,
            birth: RateField::new(vec![Polynomial::zero()]),
            death: RateField::new(vec![Polynomial::linear(1, 0, 10.0)]),
            builtin: None,
        };
        let q = build_killed_generator(&m, 1.0, &[1], BoundaryPolicy::Reflect).unwrap();
        assert_eq!(q.n_states(), 1);
        let sol = solve_qsd(&q, 1e-12, 10_000).unwrap();
        assert_relative_eq!(sol.lambda0, 10.0, epsilon = 1e-12);
        assert_eq!(sol.nu, vec![1.0]);
        assert_eq!(sol.u, vec![1.0]);
        let gap = spectral_gap_estimate(&q, 2).unwrap();
        assert!(gap.gap.is_none());
    }

    #[test]
    fn two_state_spectrum_and_gap() {
        let q = two_state_fixture();
        let est = spectral_gap_estimate(&q, 2).unwrap();
        let s2 = 2f64.sqrt();
        assert_relative_eq!(est.eigenvalues[0].0, -2.0 + s2, epsilon = 1e-9);
        assert_relative_eq!(est.eigenvalues[1].0, -2.0 - s2, epsilon = 1e-9);
        assert_relative_eq!(est.gap.unwrap(), 2.0 * s2, epsilon = 1e-9);
    }

    #[test]
    fn boundary_policies_agree_on_a_roomy_box() {
        // K = 4 with a factor-10 box: λ0 ~ 8e-3 is far above the Rayleigh
        // floor and the QSD mass at the boundary is ~e^{-73}, so the two
        // policies must agree to full 1e-8 relative precision
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let box_hi = [60u32, 60];
        let qr = build_killed_generator(&m, 4.0, &box_hi, BoundaryPolicy::Reflect).unwrap();
        let qk = build_killed_generator(&m, 4.0, &box_hi, BoundaryPolicy::Kill).unwrap();
        let sr = solve_qsd(&qr, 1e-11, 400_000).unwrap();
        let sk = solve_qsd(&qk, 1e-11, 400_000).unwrap();
        assert!(
            ((sr.lambda0 - sk.lambda0) / sr.lambda0).abs() < 1e-8,
            "reflect {} vs kill {}",
            sr.lambda0,
            sk.lambda0
        );
    }

    #[test]
    fn boundary_policies_agree_at_k10_within_solver_resolution() {
        // λ0(K = 10) ~ 1e-6 sits near the f64 Rayleigh floor of roughly
        // eps * max rate, so the cross-policy check runs at 1e-6 relative
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let k = 10.0;
        let box_hi = default_box(&m, k).unwrap(); // 4 K x* = 60 per axis
        let qr = build_killed_generator(&m, k, &box_hi, BoundaryPolicy::Reflect).unwrap();
        let qk = build_killed_generator(&m, k, &box_hi, BoundaryPolicy::Kill).unwrap();
        let sr = solve_qsd(&qr, 1e-11, 400_000).unwrap();
        let sk = solve_qsd(&qk, 1e-11, 400_000).unwrap();
        assert!(
            ((sr.lambda0 - sk.lambda0) / sr.lambda0).abs() < 1e-6,
            "reflect {} vs kill {}",
            sr.lambda0,
            sk.lambda0
        );
    }

    #[test]
    fn reflect_row_defect_equals_kill_rate_to_origin() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let q = build_killed_generator(&m, 4.0, &[24, 24], BoundaryPolicy::Reflect).unwrap();
        for i in 0..q.n_states() {
            assert_relative_eq!(q.row_defect(i), q.kill_to_zero[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn competition_chain_is_irreducible_on_the_box() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let q = build_killed_generator(&m, 4.0, &[20, 20], BoundaryPolicy::Reflect).unwrap();
        assert!(q.is_irreducible());
        let sol = solve_qsd(&q, 1e-10, 400_000).unwrap();
        assert!(sol.nu.iter().all(|&x| x > 0.0));
        assert!(sol.u.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn more_iterations_never_worsen_the_residual() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let q = build_killed_generator(&m, 6.0, &[36, 36], BoundaryPolicy::Reflect).unwrap();
        let a = solve_qsd(&q, 1e-8, 200_000).unwrap();
        let b = solve_qsd(&q, 1e-8, 400_000).unwrap();
        assert!(b.residual_right <= a.residual_right * (1.0 + 1e-9));
    }

    #[test]
    fn index_map_is_lexicographic_round_trip() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let q = build_killed_generator(&m, 2.0, &[3, 5], BoundaryPolicy::Reflect).unwrap();
        assert_eq!(q.n_states(), 4 * 6 - 1);
        let mut prev: Option<Vec<u32>> = None;
        for i in 0..q.n_states() {
            let s = q.state_of(i);
            assert_eq!(q.index_of(s.coords()), Some(i));
            if let Some(p) = prev {
                assert!(p < s.coords().to_vec(), "order break at {i}");
            }
            prev = Some(s.coords().to_vec());
        }
        assert_eq!(q.index_of(&[0, 0]), None);
        assert_eq!(q.index_of(&[4, 0]), None);
    }

    #[test]
    fn lambda0_scaling_is_exponentially_decreasing_for_logistic() {
        let m = crate::model::builtin_logistic_model(2.0, 1.0, 1.0).unwrap();
        let ks: Vec<f64> = (1..=6).map(|i| 4.0 * i as f64).collect();
        let table = lambda0_scaling(&m, &ks, 4.0, 1e-10, 400_000).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert!(table.slope_negative);
        let fit = table.fit.unwrap();
        assert!(fit.r_squared >= 0.98, "R^2 = {}", fit.r_squared);
        for w in table.rows.windows(2) {
            assert!(w[1].lambda0 < w[0].lambda0);
        }
    }

    #[test]
    fn scaling_with_single_k_has_no_fit() {
        let m = crate::model::builtin_logistic_model(2.0, 1.0, 1.0).unwrap();
        let table = lambda0_scaling(&m, &[6.0], 4.0, 1e-10, 200_000).unwrap();
        assert!(table.fit.is_none());
    }
}
