//! Small statistics toolbox shared by the experiment modules: least-squares
//! fits, binomial intervals, Kolmogorov–Smirnov tests, and censored means.

use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Ordinary least squares for `y = slope * x + intercept`.
/// Returns `None` with fewer than two distinct abscissae.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| {
            let r = p.1 - (slope * p.0 + intercept);
            r * r
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
        n,
    })
}

/// Wilson score interval for a binomial proportion at ~95% (z = 1.96).
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.96;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (ddof = 1).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One-sample Kolmogorov–Smirnov statistic against the Exponential(rate) cdf.
pub fn ks_statistic_exponential(samples: &mut [f64], rate: f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &t) in samples.iter().enumerate() {
        let cdf = 1.0 - (-rate * t).exp();
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    d
}

/// Asymptotic critical value `c(alpha)/sqrt(n)` of the two-sided KS test.
/// Supported levels: 0.05, 0.01, 0.001.
pub fn ks_critical_value(alpha: f64, n: usize) -> f64 {
    let c = if alpha <= 0.001 {
        1.94947
    } else if alpha <= 0.01 {
        1.62762
    } else {
        1.35810
    };
    c / (n as f64).sqrt()
}

/// Mean survival time from possibly right-censored observations via the
/// Kaplan–Meier estimator (area under the survival curve, restricted to the
/// largest observed time). With no censoring this is the sample mean.
pub fn kaplan_meier_mean(times: &[f64], censored: &[bool]) -> f64 {
    assert_eq!(times.len(), censored.len());
    let mut obs: Vec<(f64, bool)> = times.iter().cloned().zip(censored.iter().cloned()).collect();
    obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = obs.len();
    let mut survival = 1.0;
    let mut prev_t = 0.0;
    let mut area = 0.0;
    let mut at_risk = n as f64;
    let mut i = 0;
    while i < n {
        let t = obs[i].0;
        area += survival * (t - prev_t);
        prev_t = t;
        let mut deaths = 0.0;
        let mut leaving = 0.0;
        while i < n && obs[i].0 == t {
            if !obs[i].1 {
                deaths += 1.0;
            }
            leaving += 1.0;
            i += 1;
        }
        if at_risk > 0.0 {
            survival *= 1.0 - deaths / at_risk;
        }
        at_risk -= leaving;
    }
    area
}
