//! Deterministic limit flow `dx/dt = B(x) - D(x)` via an adaptive embedded
//! Runge–Kutta 5(4) pair with dense output, and the finite-K deviation
//! experiment between the scaled jump process and the flow.

use serde::Serialize;
use thiserror::Error;

use crate::model::RateEval;
use crate::sim::{self, replica_rng, scaled_point, RateTable, SimError};
use crate::stats;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (x = {x:?})")]
    StepUnderflow { t: f64, x: Vec<f64> },
    #[error("initial point must lie in the closed positive orthant, got {0:?}")]
    NegativeStart(Vec<f64>),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Negative undershoots clipped to zero (flagged, never silent).
    pub clips: usize,
    pub max_undershoot: f64,
}

/// Integrated path sampled at `times`, kept inside `R^d_+` by clipping
/// sub-tolerance undershoot.
#[derive(Debug, Clone, Serialize)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub stats: StepStats,
}

impl FlowPath {
    pub fn final_point(&self) -> &[f64] {
        self.points.last().expect("paths are never empty")
    }
}

// Dormand–Prince 5(4) coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];
// dense-output quintic coefficients
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

struct DenseSegment {
    t0: f64,
    h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseSegment {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let theta = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let th1 = 1.0 - theta;
        for i in 0..out.len() {
            out[i] = self.rcont[0][i]
                + theta
                    * (self.rcont[1][i]
                        + th1
                            * (self.rcont[2][i]
                                + theta * (self.rcont[3][i] + th1 * self.rcont[4][i])));
        }
    }
}

struct Dopri5<'a, R: RateEval + ?Sized> {
    model: &'a R,
    b_buf: Vec<f64>,
    d_buf: Vec<f64>,
}

impl<'a, R: RateEval + ?Sized> Dopri5<'a, R> {
    fn f(&mut self, x: &[f64], out: &mut [f64]) {
        // drift is evaluated on the clipped point so the fields never see
        // negative coordinates
        self.model.birth_into(x, &mut self.b_buf);
        self.model.death_into(x, &mut self.d_buf);
        for i in 0..out.len() {
            out[i] = self.b_buf[i] - self.d_buf[i];
        }
    }
}

fn integrate_core<R: RateEval + ?Sized>(
    model: &R,
    x0: &[f64],
    t_max: f64,
    rel_tol: f64,
    abs_tol: f64,
    mut on_segment: impl FnMut(&DenseSegment),
) -> Result<(Vec<f64>, StepStats), OdeError> {
    if x0.iter().any(|&v| v < 0.0) {
        return Err(OdeError::NegativeStart(x0.to_vec()));
    }
    let d = model.dimension();
    let mut solver = Dopri5 {
        model,
        b_buf: vec![0.0; d],
        d_buf: vec![0.0; d],
    };
    let mut stats = StepStats::default();
    let mut t = 0.0;
    let mut y = x0.to_vec();
    let mut k: [Vec<f64>; 7] = Default::default();
    for ki in k.iter_mut() {
        *ki = vec![0.0; d];
    }
    solver.f(&y, &mut k[0]);

    // modest initial step; the controller finds the scale within a few steps
    let fnorm = k[0].iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let ynorm = y.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut h = (0.01 * (ynorm + abs_tol) / (fnorm + 1e-30)).min(t_max / 10.0).max(1e-8);

    let mut y_new = vec![0.0; d];
    let mut y_stage = vec![0.0; d];
    while t < t_max {
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t, x: y });
        }
        h = h.min(t_max - t);
        for s in 0..6 {
            for i in 0..d {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s + 1) {
                    acc += A[s][j] * kj[i];
                }
                y_stage[i] = y[i] + h * acc;
            }
            let _ = C;
            solver.f(&y_stage, &mut k[s + 1]);
        }
        // 5th-order solution is stage 6 (FSAL)
        y_new.copy_from_slice(&y_stage);

        let mut err = 0.0;
        for i in 0..d {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            e *= h;
            let scale = abs_tol + rel_tol * y[i].abs().max(y_new[i].abs());
            err += (e / scale) * (e / scale);
        }
        err = (err / d as f64).sqrt();

        if err <= 1.0 {
            // dense coefficients on the accepted step
            let mut rcont: [Vec<f64>; 5] = Default::default();
            for rc in rcont.iter_mut() {
                *rc = vec![0.0; d];
            }
            for i in 0..d {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k[0][i] - ydiff;
                rcont[0][i] = y[i];
                rcont[1][i] = ydiff;
                rcont[2][i] = bspl;
                rcont[3][i] = ydiff - h * k[6][i] - bspl;
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += D[j] * kj[i];
                }
                rcont[4][i] = h * acc;
            }
            on_segment(&DenseSegment { t0: t, h, rcont });

            t += h;
            for i in 0..d {
                if y_new[i] < 0.0 {
                    stats.clips += 1;
                    stats.max_undershoot = stats.max_undershoot.max(-y_new[i]);
                    y_new[i] = 0.0;
                }
            }
            y.copy_from_slice(&y_new);
            let k_last = k[6].clone();
            k[0].copy_from_slice(&k_last);
            stats.accepted += 1;
        } else {
            stats.rejected += 1;
        }
        let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
        h *= factor;
    }
    Ok((y, stats))
}

/// Integrates the flow and reports it at the accepted step endpoints.
pub fn integrate<R: RateEval + ?Sized>(
    model: &R,
    x0: &[f64],
    t_max: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<FlowPath, OdeError> {
    let mut times = vec![0.0];
    let mut points = vec![x0.to_vec()];
    let (end, stats) = integrate_core(model, x0, t_max, rel_tol, abs_tol, |seg| {
        let mut p = vec![0.0; x0.len()];
        seg.eval(seg.t0 + seg.h, &mut p);
        times.push(seg.t0 + seg.h);
        points.push(p);
    })?;
    if let Some(last) = points.last_mut() {
        *last = end;
    }
    Ok(FlowPath {
        times,
        points,
        stats,
    })
}

/// Integrates the flow and reports it on a caller-supplied ascending grid
/// via dense output.
pub fn integrate_at<R: RateEval + ?Sized>(
    model: &R,
    x0: &[f64],
    grid: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> Result<FlowPath, OdeError> {
    debug_assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    let t_max = grid.last().copied().unwrap_or(0.0);
    let d = x0.len();
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    let mut next = 0usize;
    while next < grid.len() && grid[next] <= 0.0 {
        points.push(x0.to_vec());
        next += 1;
    }
    let (end, stats) = integrate_core(model, x0, t_max, rel_tol, abs_tol, |seg| {
        while next < grid.len() && grid[next] <= seg.t0 + seg.h {
            let mut p = vec![0.0; d];
            seg.eval(grid[next], &mut p);
            for v in p.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            points.push(p);
            next += 1;
        }
    })?;
    while points.len() < grid.len() {
        points.push(end.clone());
    }
    Ok(FlowPath {
        times: grid.to_vec(),
        points,
        stats,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct KurtzReport {
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "eps")]
    pub epsilon: f64,
    pub t_bar: f64,
    pub replicas: usize,
    pub exceedances: u64,
    /// Empirical `P(sup_{t<=t_bar} |N(t)/K - x(t)|_1 > ε)`, absent when no
    /// replicas were run.
    pub freq: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Measures how often the scaled process deviates from the flow by more
/// than `epsilon` in l1 distance, with the sup evaluated at jump instants
/// and on a grid of 2048 flow samples.
pub fn kurtz_deviation(
    model: &crate::model::Model,
    k: f64,
    x0: &[f64],
    t_bar: f64,
    epsilon: f64,
    replicas: usize,
    seed: u64,
) -> Result<KurtzReport, OdeError> {
    const GRID: usize = 2048;
    let grid: Vec<f64> = (0..=GRID).map(|i| t_bar * i as f64 / GRID as f64).collect();
    let flow = integrate_at(model, x0, &grid, 1e-10, 1e-12)?;
    if replicas == 0 {
        return Ok(KurtzReport {
            k,
            epsilon,
            t_bar,
            replicas: 0,
            exceedances: 0,
            freq: None,
            ci_low: 0.0,
            ci_high: 1.0,
        });
    }
    let n0 = scaled_point(x0, k);
    let fp = crate::model::find_fixed_point(model, &vec![1.0; model.d])
        .map_err(SimError::from)?;
    let table = RateTable::for_run(model, k, &fp.x_star, n0.coords(), 2.5, 4_000_000)
        .map_err(SimError::from)?;

    let flow_at = |t: f64, out: &mut [f64]| {
        // linear interpolation between dense grid nodes
        let pos = (t / t_bar * GRID as f64).clamp(0.0, GRID as f64);
        let i = (pos.floor() as usize).min(GRID - 1);
        let w = pos - i as f64;
        for (jj, o) in out.iter_mut().enumerate() {
            *o = flow.points[i][jj] * (1.0 - w) + flow.points[i + 1][jj] * w;
        }
    };

    let exceeded = sim::run_replicas(replicas, |r| {
        let mut rng = replica_rng(seed, r);
        let mut dev_sup = 0.0f64;
        let mut xbuf = vec![0.0; model.d];
        let mut gi = 0usize;
        let check = |t: f64, n: &[u32], gi: &mut usize, dev_sup: &mut f64| {
            while *gi < grid.len() && grid[*gi] < t {
                let l1: f64 = n
                    .iter()
                    .zip(&flow.points[*gi])
                    .map(|(&c, xf)| (f64::from(c) / k - xf).abs())
                    .sum();
                *dev_sup = dev_sup.max(l1);
                *gi += 1;
            }
        };
        let traj = sim::simulate_with(model, k, table.as_ref(), &n0, t_bar, &mut rng)?;
        for (i, s) in traj.states.iter().enumerate() {
            let t_next = traj
                .times
                .get(i + 1)
                .copied()
                .unwrap_or(t_bar + f64::EPSILON);
            check(t_next.min(t_bar + f64::EPSILON), s.coords(), &mut gi, &mut dev_sup);
            // jump instant against the interpolated flow
            if i + 1 < traj.times.len() {
                flow_at(traj.times[i + 1], &mut xbuf);
                let l1: f64 = s
                    .coords()
                    .iter()
                    .zip(&xbuf)
                    .map(|(&c, xf)| (f64::from(c) / k - xf).abs())
                    .sum();
                dev_sup = dev_sup.max(l1);
            }
        }
        Ok(dev_sup > epsilon)
    })?;
    let exceedances = exceeded.iter().filter(|&&e| e).count() as u64;
    let freq = exceedances as f64 / replicas as f64;
    let (ci_low, ci_high) = stats::wilson_interval(exceedances, replicas as u64);
    Ok(KurtzReport {
        k,
        epsilon,
        t_bar,
        replicas,
        exceedances,
        freq: Some(freq),
        ci_low,
        ci_high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_competition_model, builtin_logistic_model};

    #[test]
    fn fixed_point_start_stays_constant() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let path = integrate(&m, &[1.5, 1.5], 10.0, 1e-9, 1e-12).unwrap();
        for p in &path.points {
            assert!((p[0] - 1.5).abs() < 1e-9 && (p[1] - 1.5).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn competition_flow_converges_to_fixed_point() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let path = integrate(&m, &[0.1, 0.1], 50.0, 1e-10, 1e-12).unwrap();
        let last = path.final_point();
        let dist = ((last[0] - 1.5).powi(2) + (last[1] - 1.5).powi(2)).sqrt();
        assert!(dist <= 1e-6, "final point {last:?}");
    }

    #[test]
    fn logistic_flow_matches_closed_form() {
        // dx/dt = x(1-x), x0 = 2: x(t) = 2e^t / (2e^t - 1)
        let m = builtin_logistic_model(2.0, 1.0, 1.0).unwrap();
        let grid: Vec<f64> = (0..=100).map(|i| 8.0 * i as f64 / 100.0).collect();
        let path = integrate_at(&m, &[2.0], &grid, 1e-9, 1e-12).unwrap();
        let mut worst = 0.0f64;
        for (t, p) in grid.iter().zip(&path.points) {
            let et = t.exp();
            let exact = 2.0 * et / (2.0 * et - 1.0);
            worst = worst.max((p[0] - exact).abs());
        }
        assert!(worst <= 1e-7, "max abs error {worst}");
    }

    #[test]
    fn distance_to_fixed_point_is_monotone_inside_the_drift_ball() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let grid: Vec<f64> = (0..=2000).map(|i| 20.0 * i as f64 / 2000.0).collect();
        let path = integrate_at(&m, &[0.4, 2.6], &grid, 1e-10, 1e-12).unwrap();
        let mut prev = f64::INFINITY;
        for p in &path.points {
            let d = ((p[0] - 1.5).powi(2) + (p[1] - 1.5).powi(2)).sqrt();
            assert!(d <= prev + 1e-9, "distance grew from {prev} to {d}");
            prev = d;
        }
    }

    #[test]
    fn halving_tolerances_moves_endpoints_less_than_ten_tolerances() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let loose = integrate(&m, &[0.3, 0.2], 5.0, 2e-8, 2e-10).unwrap();
        let tight = integrate(&m, &[0.3, 0.2], 5.0, 1e-8, 1e-10).unwrap();
        let dist: f64 = loose
            .final_point()
            .iter()
            .zip(tight.final_point())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(dist <= 10.0 * 1e-8, "endpoint moved by {dist}");
    }

    #[test]
    fn kurtz_frequency_with_huge_epsilon_is_zero() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let rep = kurtz_deviation(&m, 20.0, &[1.5, 1.5], 2.0, 10.0, 50, 7).unwrap();
        assert_eq!(rep.freq, Some(0.0));
    }

    #[test]
    fn kurtz_with_no_replicas_reports_nothing() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        let rep = kurtz_deviation(&m, 20.0, &[1.5, 1.5], 1.0, 0.2, 0, 7).unwrap();
        assert!(rep.freq.is_none());
    }
}
