use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    reward, safety_margin, sample_disk_action, step_unchecked, BoatAction, BoatState, ACTION_DIM,
    STATE_DIM,
};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SFQD";
pub const DATASET_VERSION: u16 = 1;
/// `[x1, x2, a1, a2, r, ℓ, x1', x2']`
pub const RECORD_LEN: usize = 8;

const HEADER_LEN: usize = 4 + 2 + 8 + 8 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: BoatState,
    pub action: BoatAction,
    pub reward: f64,
    pub safety: f64,
    pub next_state: BoatState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_traj: u64,
    pub horizon: u64,
    pub dt: f64,
    pub seed: u64,
}

/// Offline transitions stored as flat `f32` records in trajectory-major order.
/// Trajectory `i` occupies records `i·horizon .. (i+1)·horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    records: Vec<f32>,
}

/// Random-policy dataset: initial states uniform over `X`, actions uniform
/// over the unit disk. Trajectory `i` draws from ChaCha8 stream `i` of `seed`,
/// so the output does not depend on the thread count.
pub fn generate_dataset(n_traj: usize, horizon: usize, dt: f64, seed: u64) -> Result<TrajectoryDataset> {
    if n_traj == 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "dataset needs n_traj >= 1 and horizon >= 1 (got {n_traj}, {horizon})"
        )));
    }
    let mut records = vec![0.0f32; n_traj * horizon * RECORD_LEN];
    records
        .par_chunks_mut(horizon * RECORD_LEN)
        .enumerate()
        .for_each(|(i, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut x = BoatState::sample_uniform(&mut rng);
            for rec in chunk.chunks_exact_mut(RECORD_LEN) {
                let a = sample_disk_action(&mut rng);
                let next = step_unchecked(x, a, dt);
                rec.copy_from_slice(&[
                    x.x1 as f32,
                    x.x2 as f32,
                    a.a1 as f32,
                    a.a2 as f32,
                    reward(x) as f32,
                    safety_margin(x) as f32,
                    next.x1 as f32,
                    next.x2 as f32,
                ]);
                x = next;
            }
        });
    Ok(TrajectoryDataset {
        meta: DatasetMeta {
            n_traj: n_traj as u64,
            horizon: horizon as u64,
            dt,
            seed,
        },
        records,
    })
}

impl TrajectoryDataset {
    pub fn from_records(meta: DatasetMeta, records: Vec<f32>) -> Result<Self> {
        let expected = (meta.n_traj * meta.horizon) as usize * RECORD_LEN;
        if records.len() != expected || meta.horizon == 0 {
            return Err(Error::Shape {
                expected,
                got: records.len(),
                context: "dataset records",
            });
        }
        Ok(Self { meta, records })
    }

    pub fn len(&self) -> usize {
        self.records.len() / RECORD_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.meta.horizon as usize
    }

    pub fn n_traj(&self) -> usize {
        self.meta.n_traj as usize
    }

    pub fn records(&self) -> &[f32] {
        &self.records
    }

    #[inline]
    pub fn record(&self, i: usize) -> &[f32] {
        &self.records[i * RECORD_LEN..(i + 1) * RECORD_LEN]
    }

    #[inline]
    pub fn state(&self, i: usize) -> &[f32] {
        &self.record(i)[0..STATE_DIM]
    }

    #[inline]
    pub fn action(&self, i: usize) -> &[f32] {
        &self.record(i)[STATE_DIM..STATE_DIM + ACTION_DIM]
    }

    #[inline]
    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.record(i)[6..8]
    }

    pub fn transition(&self, i: usize) -> Transition {
        let r = self.record(i);
        Transition {
            state: BoatState::from_f32(&r[0..2]),
            action: BoatAction::from_f32(&r[2..4]),
            reward: r[4] as f64,
            safety: r[5] as f64,
            next_state: BoatState::from_f32(&r[6..8]),
        }
    }

    /// Start offset of every trajectory plus the total length.
    pub fn trajectory_offsets(&self) -> Vec<usize> {
        (0..=self.n_traj()).map(|i| i * self.horizon()).collect()
    }

    /// Index of the transition that follows `i` in its trajectory.
    #[inline]
    pub fn next_index(&self, i: usize) -> Option<usize> {
        let h = self.horizon();
        ((i + 1) % h != 0).then_some(i + 1)
    }

    /// First `n_traj` trajectories.
    pub fn take_trajectories(&self, n_traj: usize) -> TrajectoryDataset {
        let n = n_traj.min(self.n_traj());
        TrajectoryDataset {
            meta: DatasetMeta {
                n_traj: n as u64,
                ..self.meta
            },
            records: self.records[..n * self.horizon() * RECORD_LEN].to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&self.meta.n_traj.to_le_bytes());
        out.extend_from_slice(&self.meta.horizon.to_le_bytes());
        out.extend_from_slice(&self.meta.dt.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        for v in &self.records {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[0..4] != DATASET_MAGIC {
            return Err(Error::format(origin, "missing SFQD header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DATASET_VERSION {
            return Err(Error::format(origin, format!("unsupported dataset version {version}")));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let meta = DatasetMeta {
            n_traj: u64_at(6),
            horizon: u64_at(14),
            dt: f64::from_le_bytes(bytes[22..30].try_into().unwrap()),
            seed: u64_at(30),
        };
        let body = &bytes[HEADER_LEN..];
        let expected = meta
            .n_traj
            .checked_mul(meta.horizon)
            .and_then(|n| n.checked_mul((RECORD_LEN * 4) as u64));
        if expected != Some(body.len() as u64) {
            return Err(Error::format(origin, "record section length does not match header"));
        }
        let records = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_records(meta, records)
    }

    /// Writes the binary file and a `<path>.json` metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let meta = serde_json::json!({
            "magic": "SFQD",
            "version": DATASET_VERSION,
            "n_traj": self.meta.n_traj,
            "horizon": self.meta.horizon,
            "dt": self.meta.dt,
            "seed": self.meta.seed,
            "transitions": self.len(),
            "record_fields": ["x1", "x2", "a1", "a2", "r", "l", "x1_next", "x2_next"],
        });
        std::fs::write(&sidecar, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
