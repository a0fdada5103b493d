//! Brute-force safety value on a node grid over `X`, used as ground truth for
//! the learned safety critic.
//!
//! Semi-Lagrangian value iteration: each node steps the dynamics under every
//! discrete action, reads the current grid by bilinear interpolation at the
//! landing point (clamped to `X`) and applies the same backup the critics use.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critics::SafetyBackup;
use crate::env::{safety_margin, step_unchecked, BoatAction, BoatState, X1_BOUNDS, X2_BOUNDS};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"SFQG";
pub const GRID_VERSION: u16 = 1;
/// Values within this distance of zero are excluded from sign comparisons.
pub const DEFAULT_DEAD_BAND: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n1: usize,
    pub n2: usize,
    /// Boundary directions of the unit disk; the zero action is always added.
    pub directions: usize,
    pub gamma: f64,
    pub dt: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub backup: SafetyBackup,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n1: 100,
            n2: 100,
            directions: 16,
            gamma: 0.99,
            dt: crate::env::DEFAULT_DT,
            tol: 1e-6,
            max_iterations: 20_000,
            backup: SafetyBackup::DiscountedReach,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 2 || self.n2 < 2 {
            return Err(Error::Config(format!("oracle grid {}x{} too small", self.n1, self.n2)));
        }
        if self.directions < 1 {
            return Err(Error::Config("oracle needs at least one action direction".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("oracle gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.tol > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config("oracle tol and max_iterations must be positive".into()));
        }
        Ok(())
    }

    /// `directions` evenly spaced unit vectors followed by the zero action.
    pub fn actions(&self) -> Vec<BoatAction> {
        let mut a: Vec<BoatAction> = (0..self.directions)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / self.directions as f64;
                BoatAction::new(th.cos(), th.sin())
            })
            .collect();
        a.push(BoatAction::ZERO);
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSign {
    Feasible,
    Infeasible,
    /// Inside the dead band.
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub n1: usize,
    pub n2: usize,
    pub gamma: f64,
    pub dt: f64,
    pub n_actions: usize,
    pub backup: SafetyBackup,
    pub iterations: usize,
    /// Sup-norm change of every sweep.
    pub residuals: Vec<f64>,
    /// Row-major over `x2`, i.e. index `j·n1 + i` holds node `(x1_i, x2_j)`.
    pub values: Vec<f64>,
}

fn axis(bounds: (f64, f64), n: usize, i: usize) -> f64 {
    bounds.0 + (bounds.1 - bounds.0) * i as f64 / (n - 1) as f64
}

/// Bilinear stencil for a point clamped to `X`.
#[derive(Clone, Copy)]
struct Stencil {
    idx: [u32; 4],
    w: [f64; 4],
}

fn stencil(n1: usize, n2: usize, x: BoatState) -> Stencil {
    let locate = |v: f64, b: (f64, f64), n: usize| {
        let u = ((v.clamp(b.0, b.1) - b.0) / (b.1 - b.0)) * (n - 1) as f64;
        let i = (u.floor() as usize).min(n - 2);
        (i, u - i as f64)
    };
    let (i, fx) = locate(x.x1, X1_BOUNDS, n1);
    let (j, fy) = locate(x.x2, X2_BOUNDS, n2);
    let base = (j * n1 + i) as u32;
    let n1 = n1 as u32;
    Stencil {
        idx: [base, base + 1, base + n1, base + n1 + 1],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}

impl GridValue {
    pub fn node(&self, i: usize, j: usize) -> BoatState {
        BoatState::new(axis(X1_BOUNDS, self.n1, i), axis(X2_BOUNDS, self.n2, j))
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n1 + i]
    }

    /// Bilinear interpolation, clamping `x` to `X`.
    pub fn interpolate(&self, x: BoatState) -> f64 {
        let s = stencil(self.n1, self.n2, x);
        (0..4).map(|k| s.w[k] * self.values[s.idx[k] as usize]).sum()
    }

    pub fn sign(&self, x: BoatState, band: f64) -> OracleSign {
        oracle_sign(self.interpolate(x), band)
    }

    /// Share of nodes with negative value.
    pub fn feasible_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v < 0.0).count() as f64 / self.values.len() as f64
    }

    /// `"SFQG" | u16 version | u32 n1 | u32 n2 | f64 x1_lo, x1_hi, x2_lo, x2_hi,
    /// gamma, dt | f32 values` (row-major over `x2`).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + 8 + 48 + self.values.len() * 4);
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n1 as u32).to_le_bytes());
        out.extend_from_slice(&(self.n2 as u32).to_le_bytes());
        for v in [X1_BOUNDS.0, X1_BOUNDS.1, X2_BOUNDS.0, X2_BOUNDS.1, self.gamma, self.dt] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// `x1,x2,value,margin` per node.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "x1,x2,value,margin")?;
            for j in 0..self.n2 {
                for i in 0..self.n1 {
                    let x = self.node(i, j);
                    writeln!(w, "{},{},{},{}", x.x1, x.x2, self.value_at(i, j), safety_margin(x))?;
                }
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Sign with a dead band: `|v| ≤ band` is `Boundary`.
pub fn oracle_sign(value: f64, band: f64) -> OracleSign {
    if value.abs() <= band {
        OracleSign::Boundary
    } else if value < 0.0 {
        OracleSign::Feasible
    } else {
        OracleSign::Infeasible
    }
}

pub fn value_iteration(cfg: &OracleConfig) -> Result<GridValue> {
    cfg.validate()?;
    let (n1, n2) = (cfg.n1, cfg.n2);
    let actions = cfg.actions();
    let na = actions.len();
    let mut margins = Vec::with_capacity(n1 * n2);
    let mut stencils = Vec::with_capacity(n1 * n2 * na);
    for j in 0..n2 {
        for i in 0..n1 {
            let x = BoatState::new(axis(X1_BOUNDS, n1, i), axis(X2_BOUNDS, n2, j));
            margins.push(safety_margin(x));
            for &a in &actions {
                stencils.push(stencil(n1, n2, step_unchecked(x, a, cfg.dt)));
            }
        }
    }
    let mut values = margins.clone();
    let mut next = vec![0.0f64; values.len()];
    let mut residuals = Vec::new();
    for it in 1..=cfg.max_iterations {
        next.par_chunks_mut(n1)
            .enumerate()
            .for_each(|(j, row)| {
                for (i, out) in row.iter_mut().enumerate() {
                    let node = j * n1 + i;
                    let best = stencils[node * na..(node + 1) * na]
                        .iter()
                        .map(|s| (0..4).map(|k| s.w[k] * values[s.idx[k] as usize]).sum::<f64>())
                        .fold(f64::INFINITY, f64::min);
                    *out = cfg.backup.target(margins[node], best, cfg.gamma);
                }
            });
        let res = values
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut values, &mut next);
        residuals.push(res);
        if res < cfg.tol {
            return Ok(GridValue {
                n1,
                n2,
                gamma: cfg.gamma,
                dt: cfg.dt,
                n_actions: na,
                backup: cfg.backup,
                iterations: it,
                residuals,
                values,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iterations,
        residual: *residuals.last().unwrap_or(&f64::NAN),
    })
}

/// Sign agreement between a learned value and the grid, ignoring probes the
/// grid places inside the dead band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignAgreement {
    pub probes: usize,
    pub compared: usize,
    pub agree: usize,
}

impl SignAgreement {
    pub fn rate(&self) -> f64 {
        if self.compared == 0 {
            0.0
        } else {
            self.agree as f64 / self.compared as f64
        }
    }
}

pub fn sign_agreement<F>(grid: &GridValue, probes: &[BoatState], band: f64, mut learned: F) -> SignAgreement
where
    F: FnMut(BoatState) -> f64,
{
    let mut out = SignAgreement {
        probes: probes.len(),
        compared: 0,
        agree: 0,
    };
    for &x in probes {
        let truth = grid.sign(x, band);
        if truth == OracleSign::Boundary {
            continue;
        }
        out.compared += 1;
        let feasible = learned(x) < 0.0;
        if feasible == (truth == OracleSign::Feasible) {
            out.agree += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn grid(n: usize) -> GridValue {
        value_iteration(&OracleConfig {
            n1: n,
            n2: n,
            ..Default::default()
        })
        .unwrap()
    }

    fn grid50() -> &'static GridValue {
        static G: OnceLock<GridValue> = OnceLock::new();
        G.get_or_init(|| grid(50))
    }

    #[test]
    fn obstacle_nodes_are_unsafe() {
        let g = grid50();
        for j in 0..g.n2 {
            for i in 0..g.n1 {
                let m = safety_margin(g.node(i, j));
                assert!(g.value_at(i, j) >= m - 1e-9);
                if m > 0.0 {
                    assert!(g.value_at(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn myopic_limit_is_margin() {
        let g = value_iteration(&OracleConfig {
            n1: 50,
            n2: 50,
            gamma: 0.0,
            ..Default::default()
        })
        .unwrap();
        for j in 0..50 {
            for i in 0..50 {
                assert_eq!(g.value_at(i, j), safety_margin(g.node(i, j)));
            }
        }
    }

    #[test]
    fn open_water_is_feasible() {
        let g = grid50();
        assert!(g.interpolate(BoatState::new(1.5, 0.0)) < 0.0);
        assert_eq!(g.sign(BoatState::new(1.9, 0.0), DEFAULT_DEAD_BAND), OracleSign::Feasible);
        assert_eq!(g.sign(BoatState::new(-0.5, 0.5), DEFAULT_DEAD_BAND), OracleSign::Infeasible);
    }

    #[test]
    fn dead_band_rule() {
        assert_eq!(oracle_sign(0.05, 0.1), OracleSign::Boundary);
        assert_eq!(oracle_sign(-0.1, 0.1), OracleSign::Boundary);
        assert_eq!(oracle_sign(-0.2, 0.1), OracleSign::Feasible);
        assert_eq!(oracle_sign(0.3, 0.1), OracleSign::Infeasible);
    }

    #[test]
    fn residuals_never_increase() {
        let r = &grid50().residuals;
        assert!(r.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15));
    }

    #[test]
    fn refinement_is_stable() {
        let coarse = grid50().feasible_fraction();
        let fine = grid(100).feasible_fraction();
        assert!((coarse - fine).abs() < 0.02, "{coarse} vs {fine}");
    }

    #[test]
    fn literal_max_backup_collapses_to_zero() {
        // the fixed point of max{ℓ, γ·V'} is 0 on every safe node
        let g = value_iteration(&OracleConfig {
            n1: 20,
            n2: 20,
            backup: SafetyBackup::Max,
            ..Default::default()
        })
        .unwrap();
        assert!(g.values.iter().all(|&v| v > -1e-4));
        assert_eq!(g.feasible_fraction(), g.values.iter().filter(|&&v| v < 0.0).count() as f64 / 400.0);
    }

    #[test]
    fn too_few_iterations_is_reported() {
        let r = value_iteration(&OracleConfig {
            n1: 10,
            n2: 10,
            max_iterations: 3,
            ..Default::default()
        });
        assert!(matches!(r, Err(Error::NoConvergence { iterations: 3, .. })));
    }

    #[test]
    fn dump_layout() {
        let g = grid50();
        let b = g.encode();
        assert_eq!(&b[0..4], GRID_MAGIC);
        assert_eq!(b.len(), 4 + 2 + 8 + 48 + 2500 * 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.save_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2501);
    }

    #[test]
    fn agreement_counts() {
        let g = grid50();
        let probes = [BoatState::new(-0.5, 0.5), BoatState::new(1.5, 0.0), BoatState::new(-1.0, -1.2)];
        let a = sign_agreement(g, &probes, DEFAULT_DEAD_BAND, |x| safety_margin(x));
        assert_eq!(a.compared, 3);
        assert_eq!(a.agree, 3);
        let b = sign_agreement(g, &probes, DEFAULT_DEAD_BAND, |_| 1.0);
        assert_eq!(b.agree, 2);
    }
}
