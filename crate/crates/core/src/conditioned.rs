//! Conditioned-on-survival laws by rejection Monte Carlo, total-variation
//! metrics, extinction-law statistics, the QSD-vs-Dirac mixture residual,
//! and a Fleming–Viot particle estimator.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{find_fixed_point, Model, RateEval};
use crate::sim::{
    self, hitting_time_with, probe_at_times, replica_rng, scaled_point, RateTable, SimError, State,
};
use crate::spectral::{KilledGenerator, QsdSolution};
use crate::stats::{self, LinearFit};

#[derive(Debug, Error)]
pub enum ConditionedError {
    #[error("law is invalid: {0}")]
    InvalidLaw(String),
    #[error("no replica survived to t = {t}; use a smaller t or more than {replicas} replicas")]
    ZeroSurvivors { t: f64, replicas: usize },
    #[error("state {0:?} lies outside the solver box")]
    OutsideBox(Vec<u32>),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A probability law on lattice states with sorted support.
/// `sample_size = 0` marks an exact law.
#[derive(Debug, Clone, Serialize)]
pub struct Law {
    pub support: Vec<State>,
    pub mass: Vec<f64>,
    pub sample_size: u64,
}

impl Law {
    pub fn new(mut pairs: Vec<(State, f64)>, sample_size: u64) -> Result<Law, ConditionedError> {
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ConditionedError::InvalidLaw(format!(
                "mass sums to {total}, not 1"
            )));
        }
        if pairs.iter().any(|p| p.1 < 0.0) {
            return Err(ConditionedError::InvalidLaw("negative mass".into()));
        }
        Ok(Law {
            support: pairs.iter().map(|p| p.0.clone()).collect(),
            mass: pairs.iter().map(|p| p.1).collect(),
            sample_size,
        })
    }

    pub fn dirac(state: State) -> Law {
        Law {
            support: vec![state],
            mass: vec![1.0],
            sample_size: 0,
        }
    }

    pub fn uniform(states: Vec<State>) -> Result<Law, ConditionedError> {
        if states.is_empty() {
            return Err(ConditionedError::InvalidLaw("empty support".into()));
        }
        let w = 1.0 / states.len() as f64;
        Law::new(states.into_iter().map(|s| (s, w)).collect(), 0)
    }

    /// The QSD ν as a law on the generator's box.
    pub fn from_qsd(gen: &KilledGenerator, sol: &QsdSolution) -> Law {
        let pairs: Vec<(State, f64)> = sol
            .nu
            .iter()
            .enumerate()
            .map(|(i, &m)| (gen.state_of(i), m))
            .collect();
        Law::new(pairs, 0).expect("eigen-solutions are normalized")
    }

    fn from_counts(counts: HashMap<Vec<u32>, u64>, total: u64) -> Law {
        let mut pairs: Vec<(State, f64)> = counts
            .into_iter()
            .map(|(s, c)| (State::new(s), c as f64 / total as f64))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        Law {
            support: pairs.iter().map(|p| p.0.clone()).collect(),
            mass: pairs.iter().map(|p| p.1).collect(),
            sample_size: total,
        }
    }

    pub fn sample<'a>(&'a self, rng: &mut ChaCha8Rng) -> &'a State {
        let mut target = rng.gen::<f64>();
        for (s, &m) in self.support.iter().zip(&self.mass) {
            if target < m {
                return s;
            }
            target -= m;
        }
        self.support.last().expect("laws are non-empty")
    }

    pub fn mass_of(&self, state: &[u32]) -> f64 {
        match self.support.binary_search_by(|s| s.coords().cmp(state)) {
            Ok(i) => self.mass[i],
            Err(_) => 0.0,
        }
    }
}

/// Total-variation report. For empirical inputs the standard error is a
/// delta-method estimate and `bias_bound` is the support-size bound
/// `m / (2 * samples)` on the upward bias of plug-in TV.
#[derive(Debug, Clone, Serialize)]
pub struct TvReport {
    pub tv: f64,
    pub stderr: Option<f64>,
    pub bias_bound: Option<f64>,
}

/// Half the l1 distance over the union support.
pub fn tv_distance(p: &Law, q: &Law) -> TvReport {
    let mut union: HashMap<&[u32], (f64, f64)> = HashMap::new();
    for (s, &m) in p.support.iter().zip(&p.mass) {
        union.entry(s.coords()).or_default().0 = m;
    }
    for (s, &m) in q.support.iter().zip(&q.mass) {
        union.entry(s.coords()).or_default().1 = m;
    }
    let mut l1 = 0.0;
    let mut var = 0.0;
    for (pm, qm) in union.values() {
        l1 += (pm - qm).abs();
        if p.sample_size > 0 {
            var += 0.25 * pm * (1.0 - pm) / p.sample_size as f64;
        }
        if q.sample_size > 0 {
            var += 0.25 * qm * (1.0 - qm) / q.sample_size as f64;
        }
    }
    let empirical = p.sample_size > 0 || q.sample_size > 0;
    let min_samples = [p.sample_size, q.sample_size]
        .into_iter()
        .filter(|&n| n > 0)
        .min();
    TvReport {
        tv: 0.5 * l1,
        stderr: if empirical { Some(var.sqrt()) } else { None },
        bias_bound: min_samples.map(|n| union.len() as f64 / (2.0 * n as f64)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionedLaw {
    pub law: Law,
    pub survivors: u64,
    pub replicas: usize,
    /// Estimate of `P(t < T_0)` from the initial law.
    pub survivor_fraction: f64,
    pub t: f64,
}

fn default_table(model: &Model, k: f64) -> Result<Option<RateTable>, SimError> {
    let fp = find_fixed_point(model, &vec![1.0; model.d])?;
    let n0 = scaled_point(&fp.x_star, k);
    Ok(RateTable::for_run(
        model,
        k,
        &fp.x_star,
        n0.coords(),
        5.0,
        4_000_000,
    )?)
}

/// Law of `N(t)` among replicas surviving to `t` (rejection sampling:
/// extinct paths are discarded, never reweighted).
pub fn conditioned_law_mc(
    model: &Model,
    k: f64,
    init: &Law,
    t: f64,
    replicas: usize,
    seed: u64,
) -> Result<ConditionedLaw, ConditionedError> {
    if t == 0.0 {
        return Ok(ConditionedLaw {
            law: init.clone(),
            survivors: replicas as u64,
            replicas,
            survivor_fraction: 1.0,
            t,
        });
    }
    let curve = survivor_laws_at(model, k, init, &[t], replicas, seed)?;
    let (survivors, law) = curve.into_iter().next().expect("one probe time");
    if survivors == 0 {
        return Err(ConditionedError::ZeroSurvivors { t, replicas });
    }
    Ok(ConditionedLaw {
        law,
        survivors,
        replicas,
        survivor_fraction: survivors as f64 / replicas as f64,
        t,
    })
}

/// One simulation pass recording the survivor law at every probe time.
/// Replicas run in chunks so only count maps persist.
fn survivor_laws_at(
    model: &Model,
    k: f64,
    init: &Law,
    t_grid: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<Vec<(u64, Law)>, ConditionedError> {
    const CHUNK: usize = 65_536;
    let table = default_table(model, k)?;
    let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); t_grid.len()];
    let mut survivors = vec![0u64; t_grid.len()];
    let mut done = 0usize;
    while done < replicas {
        let batch = CHUNK.min(replicas - done);
        let offset = done as u64;
        let per_replica = sim::run_replicas(batch, |r| {
            let mut rng = replica_rng(seed, offset + r);
            let n0 = init.sample(&mut rng).clone();
            let probe = probe_at_times(model, k, table.as_ref(), &n0, t_grid, &mut rng)?;
            Ok(probe.states_at)
        })?;
        for states in &per_replica {
            for (ti, s) in states.iter().enumerate() {
                if !s.is_origin() {
                    survivors[ti] += 1;
                    *counts[ti].entry(s.coords().to_vec()).or_default() += 1;
                }
            }
        }
        done += batch;
    }
    let mut out = Vec::with_capacity(t_grid.len());
    for (ti, map) in counts.into_iter().enumerate() {
        let law = if survivors[ti] > 0 {
            Law::from_counts(map, survivors[ti])
        } else {
            Law {
                support: Vec::new(),
                mass: Vec::new(),
                sample_size: 0,
            }
        };
        out.push((survivors[ti], law));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TvCurvePoint {
    pub t: f64,
    pub tv: f64,
    pub stderr: f64,
    pub survivors: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TvCurve {
    pub points: Vec<TvCurvePoint>,
    /// Fit of `log TV` against `t` over points above the noise floor.
    pub fit: Option<LinearFit>,
    /// TV decreases along the grid, allowing 2 standard errors of slack.
    pub decreasing: bool,
}

/// TV(conditioned law at t, reference) along a time grid, one simulation
/// pass per replica.
pub fn tv_convergence_curve(
    model: &Model,
    k: f64,
    init: &Law,
    t_grid: &[f64],
    replicas: usize,
    seed: u64,
    reference: &Law,
) -> Result<TvCurve, ConditionedError> {
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConditionedError::Invalid(
            "t grid must be strictly increasing".into(),
        ));
    }
    let laws = survivor_laws_at(model, k, init, t_grid, replicas, seed)?;
    let mut points = Vec::with_capacity(t_grid.len());
    for (&t, (survivors, law)) in t_grid.iter().zip(&laws) {
        if *survivors == 0 {
            return Err(ConditionedError::ZeroSurvivors { t, replicas });
        }
        let rep = tv_distance(law, reference);
        points.push(TvCurvePoint {
            t,
            tv: rep.tv,
            stderr: rep.stderr.unwrap_or(0.0),
            survivors: *survivors,
        });
    }
    let floor = points.iter().map(|p| 2.0 * p.stderr).fold(0.0f64, f64::max);
    let fit = stats::linear_fit(
        &points
            .iter()
            .filter(|p| p.tv > floor)
            .map(|p| (p.t, p.tv.ln()))
            .collect::<Vec<_>>(),
    );
    let decreasing = points
        .windows(2)
        .all(|w| w[1].tv <= w[0].tv + 2.0 * (w[0].stderr + w[1].stderr));
    Ok(TvCurve {
        points,
        fit,
        decreasing,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MixtureReport {
    /// TV between the unconditioned empirical law at t and
    /// `e^{-λ0 t} p ν + (1 - e^{-λ0 t} p) δ_0` with `p = u(n0) ∧ 1`.
    pub residual_tv: f64,
    pub stderr: f64,
    pub p_weight: f64,
    pub qsd_weight: f64,
    pub survivor_fraction: f64,
    pub t: f64,
}

pub fn mixture_residual(
    model: &Model,
    k: f64,
    n0: &State,
    t: f64,
    gen: &KilledGenerator,
    sol: &QsdSolution,
    replicas: usize,
    seed: u64,
) -> Result<MixtureReport, ConditionedError> {
    let idx = gen
        .index_of(n0.coords())
        .ok_or_else(|| ConditionedError::OutsideBox(n0.coords().to_vec()))?;
    let p = sol.survival_weight(idx);
    let w = (-sol.lambda0 * t).exp() * p;

    let mut pairs: Vec<(State, f64)> = sol
        .nu
        .iter()
        .enumerate()
        .map(|(i, &m)| (gen.state_of(i), w * m))
        .collect();
    pairs.push((State::origin(gen.d), 1.0 - w));
    let mixture = Law::new(pairs, 0)?;

    // unconditioned law: survivors plus the absorbed mass at the origin
    const CHUNK: usize = 65_536;
    let table = default_table(model, k)?;
    let mut counts: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut survivors = 0u64;
    let mut done = 0usize;
    while done < replicas {
        let batch = CHUNK.min(replicas - done);
        let offset = done as u64;
        let states = sim::run_replicas(batch, |r| {
            let mut rng = replica_rng(seed, offset + r);
            let probe = probe_at_times(model, k, table.as_ref(), n0, &[t], &mut rng)?;
            Ok(probe.states_at.into_iter().next().expect("one probe"))
        })?;
        for s in &states {
            if !s.is_origin() {
                survivors += 1;
            }
            *counts.entry(s.coords().to_vec()).or_default() += 1;
        }
        done += batch;
    }
    let empirical = Law::from_counts(counts, replicas as u64);
    let rep = tv_distance(&empirical, &mixture);
    Ok(MixtureReport {
        residual_tv: rep.tv,
        stderr: rep.stderr.unwrap_or(0.0),
        p_weight: p,
        qsd_weight: w,
        survivor_fraction: survivors as f64 / replicas as f64,
        t,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtinctionLawReport {
    pub mean_t0: f64,
    pub expected_mean: f64,
    pub mean_stderr: f64,
    /// |mean - 1/λ0| in units of the standard error.
    pub mean_z: f64,
    pub ks_statistic: f64,
    pub ks_critical_1pct: f64,
    pub censored: usize,
    pub replicas: usize,
    /// Censoring above 0.1% suggests enlarging t_max.
    pub censoring_notice: bool,
}

/// Samples `T_0` from initial states drawn from ν and compares against
/// Exponential(λ0): mean and KS statistic.
pub fn extinction_law_test(
    model: &Model,
    k: f64,
    gen: &KilledGenerator,
    sol: &QsdSolution,
    replicas: usize,
    t_max: f64,
    seed: u64,
) -> Result<ExtinctionLawReport, ConditionedError> {
    let nu = Law::from_qsd(gen, sol);
    let table = default_table(model, k)?;
    let origin = |n: &[u32]| n.iter().all(|&c| c == 0);
    let outcomes = sim::run_replicas(replicas, |r| {
        let mut rng = replica_rng(seed, r);
        let n0 = nu.sample(&mut rng).clone();
        hitting_time_with(model, k, table.as_ref(), &n0, &origin, t_max, &mut rng)
    })?;
    let mut times = Vec::with_capacity(replicas);
    let mut censored = 0usize;
    for o in &outcomes {
        match o {
            sim::HittingOutcome::Hit(t) => times.push(*t),
            sim::HittingOutcome::Censored(_) => censored += 1,
        }
    }
    if times.is_empty() {
        return Err(ConditionedError::ZeroSurvivors { t: t_max, replicas });
    }
    let mean = stats::mean(&times);
    let sd = stats::std_dev(&times);
    let stderr = sd / (times.len() as f64).sqrt();
    let expected = 1.0 / sol.lambda0;
    let mut ts = times.clone();
    let ks = stats::ks_statistic_exponential(&mut ts, sol.lambda0);
    Ok(ExtinctionLawReport {
        mean_t0: mean,
        expected_mean: expected,
        mean_stderr: stderr,
        mean_z: (mean - expected).abs() / stderr,
        ks_statistic: ks,
        ks_critical_1pct: stats::ks_critical_value(0.01, ts.len()),
        censored,
        replicas,
        censoring_notice: censored as f64 > 0.001 * replicas as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeEstimate {
    pub probe: Vec<u32>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub survivors_at_t0: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct A1A2Report {
    pub t0: f64,
    pub delta_radius: f64,
    pub delta_size: usize,
    pub probes: Vec<ProbeEstimate>,
    /// Largest constants consistent with every probe (minimum over probes).
    pub c1_hat: Option<f64>,
    pub c2_hat: Option<f64>,
    pub dropped: Vec<Vec<u32>>,
}

/// Estimates the minorization constant c1 (conditioned law at t0 dominates
/// c1 times the uniform law on Δ) and the survival-comparison constant c2
/// from a finite probe set of initial states.
#[allow(clippy::too_many_arguments)]
pub fn check_a1_a2(
    model: &Model,
    k: f64,
    gen: &KilledGenerator,
    sol: &QsdSolution,
    t0: f64,
    rho: f64,
    replicas: usize,
    t_max: f64,
    seed: u64,
) -> Result<A1A2Report, ConditionedError> {
    let fp = find_fixed_point(model, &vec![1.0; model.d]).map_err(SimError::from)?;
    let n_star = scaled_point(&fp.x_star, k);
    let radius = 2.0 * rho * k.sqrt();

    // Δ: lattice ball around n*, restricted to the solver box
    let mut delta: Vec<State> = Vec::new();
    for i in 0..gen.n_states() {
        let s = gen.state_of(i);
        if s.distance(n_star.coords()) <= radius {
            delta.push(s);
        }
    }
    if delta.is_empty() {
        return Err(ConditionedError::Invalid(
            "Δ contains no state inside the box".into(),
        ));
    }
    let delta_mass = 1.0 / delta.len() as f64;

    // probe set: near the origin, the center, a mid-range point, the far
    // corner of the box
    let mut e1 = vec![0u32; model.d];
    e1[0] = 1;
    let mid = State::new(
        n_star
            .coords()
            .iter()
            .zip(&gen.box_hi)
            .map(|(&c, &h)| ((f64::from(c) * 1.5) as u32).min(h))
            .collect(),
    );
    let corner = State::new(gen.box_hi.clone());
    let probes = vec![State::new(e1), n_star.clone(), mid, corner];

    // survival curve from ν for the c2 numerator
    let nu_surv = survival_curve(model, k, &Law::from_qsd(gen, sol), replicas, t_max, seed)?;

    let mut report_probes = Vec::new();
    let mut dropped = Vec::new();
    let mut c1_hat: Option<f64> = None;
    let mut c2_hat: Option<f64> = None;
    for (pi, probe) in probes.iter().enumerate() {
        let probe_seed = seed.wrapping_add(1000 + pi as u64);
        let cond = match conditioned_law_mc(
            model,
            k,
            &Law::dirac(probe.clone()),
            t0,
            replicas,
            probe_seed,
        ) {
            Ok(c) => c,
            Err(ConditionedError::ZeroSurvivors { .. }) => {
                dropped.push(probe.coords().to_vec());
                continue;
            }
            Err(e) => return Err(e),
        };
        let c1 = delta
            .iter()
            .map(|s| cond.law.mass_of(s.coords()) / delta_mass)
            .fold(f64::INFINITY, f64::min);

        let probe_surv = survival_curve(
            model,
            k,
            &Law::dirac(probe.clone()),
            replicas,
            t_max,
            probe_seed.wrapping_add(7),
        )?;
        // compare survival functions where the denominator is resolvable
        let mut c2 = f64::INFINITY;
        for (&sn, &sv) in probe_surv.iter().zip(&nu_surv) {
            if sn * replicas as f64 >= 10.0 {
                c2 = c2.min(sv / sn);
            }
        }
        let c2 = if c2.is_finite() { Some(c2) } else { None };
        c1_hat = Some(c1_hat.map_or(c1, |v| v.min(c1)));
        if let Some(c2v) = c2 {
            c2_hat = Some(c2_hat.map_or(c2v, |v| v.min(c2v)));
        }
        report_probes.push(ProbeEstimate {
            probe: probe.coords().to_vec(),
            c1: Some(c1),
            c2,
            survivors_at_t0: cond.survivors,
        });
    }
    Ok(A1A2Report {
        t0,
        delta_radius: radius,
        delta_size: delta.len(),
        probes: report_probes,
        c1_hat,
        c2_hat,
        dropped,
    })
}

/// Empirical survival function on a fixed 64-point grid over (0, t_max].
fn survival_curve(
    model: &Model,
    k: f64,
    init: &Law,
    replicas: usize,
    t_max: f64,
    seed: u64,
) -> Result<Vec<f64>, ConditionedError> {
    let grid: Vec<f64> = (1..=64).map(|i| t_max * i as f64 / 64.0).collect();
    let table = default_table(model, k)?;
    let origin = |n: &[u32]| n.iter().all(|&c| c == 0);
    let outcomes = sim::run_replicas(replicas, |r| {
        let mut rng = replica_rng(seed, r);
        let n0 = init.sample(&mut rng).clone();
        hitting_time_with(model, k, table.as_ref(), &n0, &origin, t_max, &mut rng)
    })?;
    let mut surv = vec![0.0; grid.len()];
    for o in &outcomes {
        let t_dead = match o {
            sim::HittingOutcome::Hit(t) => *t,
            sim::HittingOutcome::Censored(_) => f64::INFINITY,
        };
        for (i, &g) in grid.iter().enumerate() {
            if t_dead > g {
                surv[i] += 1.0;
            }
        }
    }
    for s in surv.iter_mut() {
        *s /= replicas as f64;
    }
    Ok(surv)
}

/// Fenwick tree over particle rates for O(log N) categorical sampling.
struct RateIndex {
    tree: Vec<f64>,
}

impl RateIndex {
    fn new(n: usize) -> Self {
        RateIndex {
            tree: vec![0.0; n + 1],
        }
    }
    fn add(&mut self, mut i: usize, delta: f64) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }
    fn total(&self) -> f64 {
        let mut i = self.tree.len() - 1;
        let mut acc = 0.0;
        while i > 0 {
            acc += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        acc
    }
    /// Largest index with prefix sum <= target.
    fn find(&self, mut target: f64) -> usize {
        let mut pos = 0usize;
        let mut step = 1usize;
        while step * 2 < self.tree.len() {
            step *= 2;
        }
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] <= target {
                target -= self.tree[next];
                pos = next;
            }
            step /= 2;
        }
        pos
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlemingViotResult {
    pub law: Law,
    pub particles: usize,
    pub t_max: f64,
    pub respawns: u64,
    pub restarts: u64,
}

/// Interacting-particle QSD estimator: an absorbed particle respawns at
/// the position of a uniformly chosen survivor; the returned law is the
/// occupancy average over the second half of `[0, t_max]`.
pub fn fleming_viot_qsd<R: RateEval + ?Sized>(
    model: &R,
    k: f64,
    particles: usize,
    t_max: f64,
    seed: u64,
    init: &State,
) -> Result<FlemingViotResult, ConditionedError> {
    if particles < 2 {
        return Err(ConditionedError::Invalid(
            "Fleming-Viot needs at least 2 particles".into(),
        ));
    }
    let d = model.dimension();
    let mut rng = replica_rng(seed, 0);
    let mut positions: Vec<Vec<u32>> = vec![init.coords().to_vec(); particles];
    let mut last_change = vec![0.0f64; particles];
    let mut occupancy: HashMap<Vec<u32>, f64> = HashMap::new();
    let window_start = 0.5 * t_max;
    let mut respawns = 0u64;
    let mut restarts = 0u64;

    let mut x_buf = vec![0.0; d];
    let mut b_buf = vec![0.0; d];
    let mut d_buf = vec![0.0; d];
    let mut rates_of = |n: &[u32], b_buf: &mut [f64], d_buf: &mut [f64]| -> Result<f64, ConditionedError> {
        for j in 0..d {
            x_buf[j] = f64::from(n[j]) / k;
        }
        model.birth_into(&x_buf, b_buf);
        model.death_into(&x_buf, d_buf);
        let mut total = 0.0;
        for j in 0..d {
            b_buf[j] *= k;
            d_buf[j] *= k;
            if b_buf[j] < 0.0 || d_buf[j] < 0.0 {
                return Err(SimError::Model(crate::model::ModelError::NegativeRate {
                    kind: if b_buf[j] < 0.0 { "birth" } else { "death" },
                    j,
                    state: n.to_vec(),
                    value: b_buf[j].min(d_buf[j]),
                })
                .into());
            }
            total += b_buf[j] + d_buf[j];
        }
        Ok(total)
    };

    let mut index = RateIndex::new(particles);
    let mut rates = vec![0.0f64; particles];
    for (i, n) in positions.iter().enumerate() {
        let r = rates_of(n, &mut b_buf, &mut d_buf)?;
        rates[i] = r;
        index.add(i, r);
    }

    let settle = |occ: &mut HashMap<Vec<u32>, f64>, pos: &[u32], from: f64, to: f64| {
        let overlap = to.min(t_max) - from.max(window_start);
        if overlap > 0.0 {
            *occ.entry(pos.to_vec()).or_default() += overlap;
        }
    };

    let mut t = 0.0;
    loop {
        let total = index.total();
        if !(total > 0.0) {
            break;
        }
        t += sim::sample_exponential(&mut rng, total);
        if t >= t_max {
            break;
        }
        let pick = index.find(rng.gen::<f64>() * total).min(particles - 1);
        let r = rates_of(&positions[pick], &mut b_buf, &mut d_buf)?;
        let mut target = rng.gen::<f64>() * r;
        let mut j = d - 1;
        let mut birth = false;
        'select: {
            for (jj, &b) in b_buf.iter().enumerate() {
                if target < b {
                    j = jj;
                    birth = true;
                    break 'select;
                }
                target -= b;
            }
            for (jj, &dd) in d_buf.iter().enumerate() {
                if target < dd {
                    j = jj;
                    birth = false;
                    break 'select;
                }
                target -= dd;
            }
        }
        settle(&mut occupancy, &positions[pick], last_change[pick], t);
        last_change[pick] = t;
        if birth {
            positions[pick][j] += 1;
        } else if positions[pick][j] > 0 {
            positions[pick][j] -= 1;
        }
        if positions[pick].iter().all(|&c| c == 0) {
            // respawn at a uniformly chosen surviving particle
            let others: Vec<usize> = (0..particles)
                .filter(|&i| i != pick && positions[i].iter().any(|&c| c > 0))
                .collect();
            if others.is_empty() {
                // the whole swarm died: restart from the occupancy law
                // accumulated so far, counted in the report
                restarts += 1;
                let fallback = init.coords().to_vec();
                let law: Vec<(Vec<u32>, f64)> =
                    occupancy.iter().map(|(s, w)| (s.clone(), *w)).collect();
                for (i, p) in positions.iter_mut().enumerate() {
                    *p = draw_weighted(&law, &mut rng).unwrap_or_else(|| fallback.clone());
                    last_change[i] = t;
                }
                let mut new_index = RateIndex::new(particles);
                for (i, n) in positions.iter().enumerate() {
                    let nr = rates_of(n, &mut b_buf, &mut d_buf)?;
                    rates[i] = nr;
                    new_index.add(i, nr);
                }
                index = new_index;
                continue;
            }
            let src = others[rng.gen_range(0..others.len())];
            positions[pick] = positions[src].clone();
            respawns += 1;
        }
        let new_rate = rates_of(&positions[pick], &mut b_buf, &mut d_buf)?;
        index.add(pick, new_rate - rates[pick]);
        rates[pick] = new_rate;
    }
    for i in 0..particles {
        settle(&mut occupancy, &positions[i], last_change[i], t_max);
    }

    let total_weight: f64 = occupancy.values().sum();
    if total_weight <= 0.0 {
        return Err(ConditionedError::Invalid(
            "no occupancy mass accumulated; enlarge t_max".into(),
        ));
    }
    let mut pairs: Vec<(State, f64)> = occupancy
        .into_iter()
        .map(|(s, w)| (State::new(s), w / total_weight))
        .collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let law = Law {
        support: pairs.iter().map(|p| p.0.clone()).collect(),
        mass: pairs.iter().map(|p| p.1).collect(),
        sample_size: particles as u64,
    };
    Ok(FlemingViotResult {
        law,
        particles,
        t_max,
        respawns,
        restarts,
    })
}

fn draw_weighted(law: &[(Vec<u32>, f64)], rng: &mut ChaCha8Rng) -> Option<Vec<u32>> {
    let total: f64 = law.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return None;
    }
    let mut target = rng.gen::<f64>() * total;
    for (s, w) in law {
        if target < *w {
            return Some(s.clone());
        }
        target -= *w;
    }
    law.last().map(|p| p.0.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_competition_model;
    use crate::spectral::{solve_qsd, two_state_fixture, two_state_fixture_model};
    use approx::assert_relative_eq;

    fn law2(p: f64) -> Law {
        Law::new(
            vec![(State::new(vec![1]), p), (State::new(vec![2]), 1.0 - p)],
            0,
        )
        .unwrap()
    }

    #[test]
    fn tv_hand_values() {
        let p = law2(0.5);
        assert_eq!(tv_distance(&p, &p).tv, 0.0);
        let q = law2(0.25);
        assert_relative_eq!(tv_distance(&p, &q).tv, 0.25);
        assert_relative_eq!(tv_distance(&q, &p).tv, 0.25);
        let a = Law::dirac(State::new(vec![3]));
        let b = Law::dirac(State::new(vec![8]));
        assert_eq!(tv_distance(&a, &b).tv, 1.0);
    }

    #[test]
    fn conditioned_law_at_time_zero_is_the_initial_law() {
        let m = two_state_fixture_model();
        let init = law2(0.7);
        let out = conditioned_law_mc(&m, 1.0, &init, 0.0, 100, 3).unwrap();
        assert_eq!(out.survivor_fraction, 1.0);
        assert_eq!(out.law.mass, init.mass);
    }

    #[test]
    fn two_state_conditioned_law_converges_to_nu() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let out =
            conditioned_law_mc(&m, 1.0, &Law::dirac(State::new(vec![1])), 8.0, 200_000, 42)
                .unwrap();
        let nu = Law::from_qsd(&q, &sol);
        let rep = tv_distance(&out.law, &nu);
        assert!(rep.tv <= 0.02, "tv {} (stderr {:?})", rep.tv, rep.stderr);
    }

    #[test]
    fn qsd_invariance_under_conditioning() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let nu = Law::from_qsd(&q, &sol);
        for (i, t) in [1.0, 5.0, 10.0].into_iter().enumerate() {
            let out = conditioned_law_mc(&m, 1.0, &nu, t, 100_000, 77 + i as u64).unwrap();
            let rep = tv_distance(&out.law, &nu);
            let three_sigma = 3.0 * rep.stderr.unwrap();
            assert!(
                rep.tv <= three_sigma.max(0.006),
                "t = {t}: tv {} vs 3σ {three_sigma}",
                rep.tv
            );
        }
    }

    #[test]
    fn survivor_fraction_estimates_the_extinction_exponential() {
        // from ν the survival probability is exactly e^{-λ0 t}
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let nu = Law::from_qsd(&q, &sol);
        let t = 2.0;
        let replicas = 200_000;
        let out = conditioned_law_mc(&m, 1.0, &nu, t, replicas, 11).unwrap();
        let expect = (-sol.lambda0 * t).exp();
        let sigma = (expect * (1.0 - expect) / replicas as f64).sqrt();
        assert!(
            (out.survivor_fraction - expect).abs() <= 3.0 * sigma,
            "fraction {} vs e^-λ0t {expect} (σ {sigma})",
            out.survivor_fraction
        );
    }

    #[test]
    fn extinction_law_matches_the_two_state_oracle() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let rep = extinction_law_test(&m, 1.0, &q, &sol, 100_000, 200.0, 5).unwrap();
        assert!(rep.mean_z <= 3.0, "z = {}", rep.mean_z);
        assert_relative_eq!(rep.expected_mean, (2.0 + 2f64.sqrt()) / 2.0, epsilon = 1e-9);
        assert!(rep.ks_statistic < rep.ks_critical_1pct);
        assert!(!rep.censoring_notice);
    }

    #[test]
    fn fleming_viot_recovers_the_two_state_qsd() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let fv = fleming_viot_qsd(&m, 1.0, 1024, 200.0, 9, &State::new(vec![1])).unwrap();
        let nu = Law::from_qsd(&q, &sol);
        let rep = tv_distance(&fv.law, &nu);
        assert!(rep.tv <= 0.03, "tv {}", rep.tv);
        assert!(fv.respawns > 0);
        assert_eq!(fv.restarts, 0);
    }

    #[test]
    fn fleming_viot_on_a_single_state_chain_is_a_point_mass() {
        use crate::model::RateField;
        use crate::poly::Polynomial;
        let m = crate::model::Model {
            name: "scalar".into(),
            d: 1,
            birth: RateField::new(vec![Polynomial::zero()]),
            death: RateField::new(vec![Polynomial::linear(1, 0, 10.0)]),
            builtin: None,
        };
        let fv = fleming_viot_qsd(&m, 1.0, 2, 50.0, 4, &State::new(vec![1])).unwrap();
        assert_eq!(fv.law.support.len(), 1);
        assert_eq!(fv.law.support[0].coords(), &[1]);
        assert_relative_eq!(fv.law.mass[0], 1.0);
    }

    #[test]
    fn mixture_residual_is_small_on_the_two_state_fixture() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let rep =
            mixture_residual(&m, 1.0, &State::new(vec![1]), 4.0, &q, &sol, 400_000, 13).unwrap();
        // second-eigenvalue remainder at t = 4 is ~e^{-(2+√2)·4} ~ 1e-6
        assert!(rep.residual_tv <= 0.01, "residual {}", rep.residual_tv);
        assert!(rep.p_weight <= 1.0 && rep.p_weight > 0.0);
    }

    #[test]
    fn mixture_at_time_zero_is_pure_arithmetic() {
        // n0 = 2 has u >= 1, so p = 1 and the t = 0 mixture equals nu:
        // the residual is exactly TV(delta_2, nu) = 1 - nu(2)
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        assert!(sol.u[1] >= 1.0);
        let rep =
            mixture_residual(&m, 1.0, &State::new(vec![2]), 0.0, &q, &sol, 5_000, 2).unwrap();
        assert_relative_eq!(rep.p_weight, 1.0);
        assert_relative_eq!(rep.residual_tv, 1.0 - sol.nu[1], epsilon = 1e-12);
    }

    #[test]
    fn mixture_far_beyond_the_extinction_time_collapses_to_the_origin() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let t = 20.0 / sol.lambda0;
        let rep =
            mixture_residual(&m, 1.0, &State::new(vec![1]), t, &q, &sol, 20_000, 6).unwrap();
        assert!(rep.qsd_weight < 1e-8);
        assert!(rep.residual_tv < 1e-3, "residual {}", rep.residual_tv);
        assert_eq!(rep.survivor_fraction, 0.0);
    }

    #[test]
    fn mixture_rejects_states_outside_the_box() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        let err =
            mixture_residual(&m, 1.0, &State::new(vec![9]), 1.0, &q, &sol, 10, 1).unwrap_err();
        assert!(matches!(err, ConditionedError::OutsideBox(_)));
    }

    #[test]
    fn a1_a2_estimates_are_positive_on_the_two_state_chain() {
        let q = two_state_fixture();
        let sol = solve_qsd(&q, 1e-12, 100_000).unwrap();
        let m = two_state_fixture_model();
        // rho chosen so Δ covers both states
        let rep = check_a1_a2(&m, 1.0, &q, &sol, 2.0, 2.0, 40_000, 60.0, 21).unwrap();
        assert_eq!(rep.delta_size, 2);
        assert!(rep.c1_hat.unwrap() > 0.0, "{rep:?}");
        assert!(rep.c2_hat.unwrap() > 0.0, "{rep:?}");
    }

    mod tv_metric_axioms {
        use super::*;
        use proptest::prelude::*;

        fn law_on_shared_support(weights: Vec<f64>) -> Law {
            let total: f64 = weights.iter().sum();
            let pairs: Vec<(State, f64)> = weights
                .iter()
                .enumerate()
                .map(|(i, w)| (State::new(vec![i as u32 + 1]), w / total))
                .collect();
            // renormalize exactly against accumulated rounding
            let mass: f64 = pairs.iter().map(|p| p.1).sum();
            Law::new(
                pairs.into_iter().map(|(s, m)| (s, m / mass)).collect(),
                0,
            )
            .unwrap()
        }

        proptest! {
            #[test]
            fn symmetry_identity_and_triangle(
                a in proptest::collection::vec(0.01f64..10.0, 4),
                b in proptest::collection::vec(0.01f64..10.0, 4),
                c in proptest::collection::vec(0.01f64..10.0, 4),
            ) {
                let (p, q, r) = (
                    law_on_shared_support(a),
                    law_on_shared_support(b),
                    law_on_shared_support(c),
                );
                let pq = tv_distance(&p, &q).tv;
                let qp = tv_distance(&q, &p).tv;
                let pr = tv_distance(&p, &r).tv;
                let rq = tv_distance(&r, &q).tv;
                prop_assert!((pq - qp).abs() <= 1e-15);
                prop_assert!(tv_distance(&p, &p).tv == 0.0);
                prop_assert!((0.0..=1.0).contains(&pq));
                prop_assert!(pq <= pr + rq + 1e-12);
            }
        }
    }

    #[test]
    fn zero_survivors_is_an_error() {
        let m = builtin_competition_model(2.0, 1.0, 1.0, 2).unwrap();
        // K tiny and t huge: every replica dies
        let err = conditioned_law_mc(&m, 0.5, &Law::dirac(State::new(vec![1, 1])), 500.0, 50, 3)
            .unwrap_err();
        assert!(matches!(err, ConditionedError::ZeroSurvivors { .. }));
    }
}
