//! Experiment persistence: deterministic CSV/JSON artifact writing with a
//! config hash embedded in every file, and the run report envelope.
//!
//! Reruns with an identical config and seed must reproduce artifacts
//! byte-for-byte; wall time lives only in the report metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::conditioned::Law;
use crate::ode::FlowPath;
use crate::reversibility::ReversibleMeasure;
use crate::sim::Trajectory;
use crate::spectral::{KilledGenerator, QsdSolution, ScalingTable};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// All floating-point output carries 17 significant digits, enough to
/// round-trip f64 exactly.
pub fn format_float(x: f64) -> String {
    format!("{:.16e}", x)
}

/// FNV-1a over the canonical config text; embedded in every artifact.
pub fn config_hash(canonical: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in canonical.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn open(path: &Path) -> Result<fs::File, ArtifactError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    fs::File::create(path).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a CSV artifact: `# config_hash=...`, the header, then rows.
pub fn write_csv(
    path: &Path,
    hash: u64,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<(), ArtifactError> {
    let mut f = std::io::BufWriter::new(open(path)?);
    writeln!(f, "# config_hash={hash:016x}").map_err(io_err(path))?;
    writeln!(f, "{header}").map_err(io_err(path))?;
    for row in rows {
        writeln!(f, "{row}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// JSON artifact with the hash injected as a top-level field.
pub fn write_json<T: Serialize>(path: &Path, hash: u64, value: &T) -> Result<(), ArtifactError> {
    let mut doc = serde_json::to_value(value)?;
    if let serde_json::Value::Object(map) = &mut doc {
        map.insert(
            "config_hash".to_string(),
            serde_json::Value::String(format!("{hash:016x}")),
        );
    }
    let mut f = open(path)?;
    let text = serde_json::to_string_pretty(&doc)?;
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    f.write_all(b"\n").map_err(io_err(path))
}

fn coords_csv(coords: &[u32]) -> String {
    coords
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn axis_header(prefix: &str, d: usize) -> String {
    (1..=d)
        .map(|j| format!("{prefix}_{j}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// `t,n_1,...,n_d` rows of a trajectory.
pub fn write_trajectory(path: &Path, hash: u64, traj: &Trajectory) -> Result<(), ArtifactError> {
    let d = traj.states[0].d();
    write_csv(
        path,
        hash,
        &format!("t,{}", axis_header("n", d)),
        traj.times
            .iter()
            .zip(&traj.states)
            .map(|(t, s)| format!("{},{}", format_float(*t), coords_csv(s.coords()))),
    )
}

/// `t,x_1,...,x_d` rows of an integrated flow.
pub fn write_flow(path: &Path, hash: u64, flow: &FlowPath) -> Result<(), ArtifactError> {
    let d = flow.points[0].len();
    write_csv(
        path,
        hash,
        &format!("t,{}", axis_header("x", d)),
        flow.times.iter().zip(&flow.points).map(|(t, x)| {
            let xs = x.iter().map(|v| format_float(*v)).collect::<Vec<_>>().join(",");
            format!("{},{xs}", format_float(*t))
        }),
    )
}

/// `n_1,...,n_d,nu,u` in lexicographic state order.
pub fn write_qsd(
    path: &Path,
    hash: u64,
    gen: &KilledGenerator,
    sol: &QsdSolution,
) -> Result<(), ArtifactError> {
    write_csv(
        path,
        hash,
        &format!("{},nu,u", axis_header("n", gen.d)),
        (0..gen.n_states()).map(|i| {
            format!(
                "{},{},{}",
                coords_csv(gen.state_of(i).coords()),
                format_float(sol.nu[i]),
                format_float(sol.u[i])
            )
        }),
    )
}

/// `K,lambda0,log_lambda0` rows.
pub fn write_scaling(path: &Path, hash: u64, table: &ScalingTable) -> Result<(), ArtifactError> {
    write_csv(
        path,
        hash,
        "K,lambda0,log_lambda0",
        table.rows.iter().map(|r| {
            format!(
                "{},{},{}",
                format_float(r.k),
                format_float(r.lambda0),
                format_float(r.log_lambda0)
            )
        }),
    )
}

/// `n_1,...,n_d,mass` rows of a law.
pub fn write_law(path: &Path, hash: u64, law: &Law) -> Result<(), ArtifactError> {
    let d = law.support.first().map(|s| s.d()).unwrap_or(1);
    write_csv(
        path,
        hash,
        &format!("{},mass", axis_header("n", d)),
        law.support
            .iter()
            .zip(&law.mass)
            .map(|(s, m)| format!("{},{}", coords_csv(s.coords()), format_float(*m))),
    )
}

/// `t,tv,stderr` rows of a convergence curve.
pub fn write_curve(
    path: &Path,
    hash: u64,
    points: impl Iterator<Item = (f64, f64, f64)>,
) -> Result<(), ArtifactError> {
    write_csv(
        path,
        hash,
        "t,tv,stderr",
        points.map(|(t, tv, se)| {
            format!(
                "{},{},{}",
                format_float(t),
                format_float(tv),
                format_float(se)
            )
        }),
    )
}

/// `replica,seed,K,event,time,censored` batch summary rows.
pub fn write_batch(
    path: &Path,
    hash: u64,
    seed: u64,
    k: f64,
    rows: impl Iterator<Item = (u64, String, f64, bool)>,
) -> Result<(), ArtifactError> {
    write_csv(
        path,
        hash,
        "replica,seed,K,event,time,censored",
        rows.map(|(replica, event, time, censored)| {
            format!(
                "{replica},{seed},{},{event},{},{}",
                format_float(k),
                format_float(time),
                u8::from(censored)
            )
        }),
    )
}

/// `n_1,...,n_d,log_pi` dump of a reversible measure.
pub fn write_log_weights(
    path: &Path,
    hash: u64,
    measure: &ReversibleMeasure,
) -> Result<(), ArtifactError> {
    let d = measure.lo.len();
    write_csv(
        path,
        hash,
        &format!("{},log_pi", axis_header("n", d)),
        (0..measure.log_pi.len()).map(|i| {
            format!(
                "{},{}",
                coords_csv(&measure.state_of(i)),
                format_float(measure.log_pi[i])
            )
        }),
    )
}

/// Envelope for a finished run. Wall time is metadata; everything else is
/// reproducible from config + seed.
#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub wall_time_s: f64,
    /// Per-metric results, each tagged with the operation that produced it.
    pub results: serde_json::Value,
    pub artifacts: Vec<String>,
    /// Provenance notes for fitted constants.
    pub provenance: Vec<String>,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn write(&self, path: &Path) -> Result<(), ArtifactError> {
        let mut f = open(path)?;
        let text = serde_json::to_string_pretty(self)?;
        f.write_all(text.as_bytes()).map_err(io_err(path))?;
        f.write_all(b"\n").map_err(io_err(path))
    }
}
