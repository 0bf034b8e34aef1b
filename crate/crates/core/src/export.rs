//! Machine-readable artifacts: CSV for vector time-series, JSON for scalar
//! reports. Every artifact embeds the replay metadata (seed, grid, paths,
//! regression settings, tool version) and is written atomically
//! (temp + rename). Output is byte-stable across reruns: no timestamps, and
//! floats use Rust's shortest round-trip formatting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adjoint::AdjointPath;
use crate::error::Result;
use crate::regression::{RegressionConfig, Ridge};
use crate::solver::{CostEstimate, Trajectory};

/// Replay metadata embedded in every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub seed: u64,
    pub grid_steps: usize,
    pub paths: usize,
    pub degree: usize,
    pub ridge: String,
    pub version: &'static str,
}

impl Meta {
    pub fn new(seed: u64, grid_steps: usize, paths: usize, config: &RegressionConfig) -> Meta {
        Meta {
            seed,
            grid_steps,
            paths,
            degree: config.degree,
            ridge: match config.ridge {
                Ridge::Auto => "auto".to_string(),
                Ridge::Fixed(l) => l.to_string(),
            },
            version: crate::TOOL_VERSION,
        }
    }

    fn comment_line(&self) -> String {
        format!(
            "# seed={} grid={} paths={} degree={} ridge={} version={}\n",
            self.seed, self.grid_steps, self.paths, self.degree, self.ridge, self.version
        )
    }
}

/// Write bytes to `path` atomically.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// JSON artifact with a `meta` envelope.
pub fn write_json<T: Serialize>(path: &Path, meta: &Meta, payload: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        meta: &'a Meta,
        #[serde(flatten)]
        payload: &'a T,
    }
    let body = serde_json::to_string_pretty(&Envelope { meta, payload })
        .expect("serializable artifact");
    atomic_write(path, body.as_bytes())
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, meta: &Meta) -> Result<()> {
    let mut out = String::new();
    out.push_str(&meta.comment_line());
    out.push_str("path,time_index,t");
    for j in 0..traj.n {
        out.push_str(&format!(",y_{}", j + 1));
    }
    for j in 0..traj.n {
        for l in 0..traj.d {
            out.push_str(&format!(",z_{}{}", j + 1, l + 1));
        }
    }
    out.push('\n');
    for m in 0..traj.paths() {
        for i in 0..=traj.grid.steps {
            out.push_str(&format!("{m},{i},{}", traj.grid.nodes[i]));
            for j in 0..traj.n {
                out.push_str(&format!(",{}", traj.y[(m, i, j)]));
            }
            for jl in 0..traj.n * traj.d {
                out.push_str(&format!(",{}", traj.z[(m, i, jl)]));
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_adjoint_csv(path: &Path, adj: &AdjointPath, meta: &Meta) -> Result<()> {
    let mut out = String::new();
    out.push_str(&meta.comment_line());
    out.push_str("path,time_index,t");
    for j in 0..adj.n {
        out.push_str(&format!(",p_{}", j + 1));
    }
    out.push('\n');
    let m_paths = adj.p.dim().0;
    for m in 0..m_paths {
        for i in 0..=adj.grid.steps {
            out.push_str(&format!("{m},{i},{}", adj.grid.nodes[i]));
            for j in 0..adj.n {
                out.push_str(&format!(",{}", adj.p[(m, i, j)]));
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

#[derive(Serialize)]
struct CostArtifact<'a> {
    #[serde(flatten)]
    cost: &'a CostEstimate,
}

pub fn write_cost_json(path: &Path, cost: &CostEstimate, meta: &Meta) -> Result<()> {
    write_json(path, meta, &CostArtifact { cost })
}

/// Generic small CSV: header + rows of display-formatted cells.
pub fn write_csv(path: &Path, meta: &Meta, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&meta.comment_line());
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}
