//! Dense reference linear algebra for small boxes: full eigen-solves used
//! to cross-check the sparse iteration, and a scaled-and-squared matrix
//! exponential for exact finite-time laws. Validation tooling; the
//! production path is `spectral`.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues sorted by descending real part (ties by descending
/// imaginary part), as (re, im) pairs.
pub fn eigenvalues_sorted(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let eigs = m.complex_eigenvalues();
    let mut out: Vec<(f64, f64)> = eigs.iter().map(|z| (z.re, z.im)).collect();
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.partial_cmp(&a.1).unwrap()));
    out
}

/// Unit-norm null vector of `m` via SVD (right-singular vector of the
/// smallest singular value).
fn null_vector(m: &DMatrix<f64>) -> Option<DVector<f64>> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t?;
    let mut best = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[best] {
            best = i;
        }
    }
    Some(v_t.row(best).transpose())
}

/// Dense QSD triple `(ν, λ0, u)` of a sub-Markovian generator:
/// the leading eigenvalue from the full spectrum and the corresponding
/// left/right null vectors, normalized like the sparse solver
/// (`Σν = 1`, `ν(u) = 1`).
pub fn dense_qsd(q: &DMatrix<f64>) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let n = q.nrows();
    let eigs = eigenvalues_sorted(q);
    let (re, im) = *eigs.first()?;
    if im.abs() > 1e-9 * (1.0 + re.abs()) {
        return None;
    }
    let lambda0 = -re;
    let shifted = q - DMatrix::identity(n, n) * re;
    let mut u = null_vector(&shifted)?;
    let mut nu = null_vector(&shifted.transpose())?;
    if u.sum() < 0.0 {
        u.neg_mut();
    }
    if nu.sum() < 0.0 {
        nu.neg_mut();
    }
    let mass = nu.iter().map(|x| x.abs()).sum::<f64>();
    nu /= mass;
    let weight: f64 = nu.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    u /= weight;
    Some((nu.iter().cloned().collect(), lambda0, u.iter().cloned().collect()))
}

/// `exp(t M)` by scaling and squaring with a norm-controlled Taylor series.
pub fn matrix_exponential(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let a = m * t;
    let norm = a
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let b = &a / 2f64.powi(s as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=40 {
        term = &term * &b / k as f64;
        result += &term;
        let tn = term
            .iter()
            .map(|x| x.abs())
            .fold(0.0f64, f64::max);
        if tn < 1e-18 {
            break;
        }
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_state() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 2.0, -2.0])
    }

    #[test]
    fn two_state_spectrum_closed_form() {
        let eigs = eigenvalues_sorted(&two_state());
        let s2 = 2f64.sqrt();
        assert_relative_eq!(eigs[0].0, -2.0 + s2, epsilon = 1e-12);
        assert_relative_eq!(eigs[1].0, -2.0 - s2, epsilon = 1e-12);
    }

    #[test]
    fn dense_qsd_closed_form() {
        let (nu, lambda0, u) = dense_qsd(&two_state()).unwrap();
        let s2 = 2f64.sqrt();
        assert_relative_eq!(lambda0, 2.0 - s2, epsilon = 1e-12);
        assert_relative_eq!(nu[0], s2 / (s2 + 1.0), epsilon = 1e-12);
        assert_relative_eq!(nu[1], 1.0 / (s2 + 1.0), epsilon = 1e-12);
        assert_relative_eq!(u[1] / u[0], s2, epsilon = 1e-10);
    }

    #[test]
    fn exponential_of_two_state_matches_eigen_expansion() {
        // e^{tQ} = e^{λ+ t} P+ + e^{λ- t} P- with spectral projectors
        let q = two_state();
        let t = 0.7;
        let e = matrix_exponential(&q, t);
        let s2 = 2f64.sqrt();
        let (lp, lm) = (-2.0 + s2, -2.0 - s2);
        // eigenvectors: right (1, ±√2), left (√2, ±1)/norm
        for i in 0..2 {
            for j in 0..2 {
                let rp = [1.0, s2];
                let lpv = [s2 / (2.0 * s2), 1.0 / (2.0 * s2)];
                let rm = [1.0, -s2];
                let lmv = [-s2 / (2.0 * s2), 1.0 / (2.0 * s2)];
                let expect = (lp * t).exp() * rp[i] * lpv[j] - (lm * t).exp() * rm[i] * lmv[j];
                assert_relative_eq!(e[(i, j)], expect, epsilon = 1e-12, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn exponential_row_sums_stay_below_one_for_submarkovian() {
        let q = two_state();
        let e = matrix_exponential(&q, 3.0);
        for i in 0..2 {
            let s: f64 = e.row(i).iter().sum();
            assert!(s > 0.0 && s < 1.0);
        }
    }
}
