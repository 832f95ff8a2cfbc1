use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::planner::plan_path;
use super::{dynamics, Cell, EnvConfig, MazeSpec, State, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::{par, rng};

const MAGIC: &[u8; 4] = b"DCMD";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataGenConfig {
    pub n_traj: usize,
    pub controller_gain: f64,
    pub waypoint_radius: f64,
    pub action_noise: f64,
    /// Shorter trajectories are discarded and resampled.
    pub min_len: usize,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig { n_traj: 400, controller_gain: 5.0, waypoint_radius: 0.3, action_noise: 0.1, min_len: 10 }
    }
}

/// Reward-free `(s, a)` sequence. Values are stored at `f32` precision so
/// that a file round trip is exact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetTrajectory {
    pub states: Vec<State>,
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl DatasetTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn round_to_f32(&mut self) {
        for s in &mut self.states {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for a in &mut self.actions {
            a.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OfflineDataset {
    pub trajectories: Vec<DatasetTrajectory>,
}

impl OfflineDataset {
    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(DatasetTrajectory::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_dcmd(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_dcmd(&mut BufReader::new(File::open(path)?))
    }
}

/// Follows planner waypoints from `start` to `goal` with a noisy
/// proportional controller. Returns the trajectory and whether the goal
/// radius was reached within the step cap.
pub fn run_controller<R: Rng + ?Sized>(
    maze: &MazeSpec,
    env: &EnvConfig,
    gen: &DataGenConfig,
    start: Cell,
    goal: Cell,
    rng: &mut R,
) -> Result<(DatasetTrajectory, bool)> {
    let waypoints = plan_path(maze, start, goal)?;
    let goal_xy = maze.cell_center(goal);
    let [x0, y0] = maze.cell_center(start);
    let noise = Normal::new(0.0, gen.action_noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut traj = DatasetTrajectory::default();
    let mut s: State = [x0, y0, 0.0, 0.0];
    let mut wp = 0;
    for _ in 0..env.max_steps {
        while wp + 1 < waypoints.len() {
            let [wx, wy] = waypoints[wp];
            if ((wx - s[0]).powi(2) + (wy - s[1]).powi(2)).sqrt() > gen.waypoint_radius {
                break;
            }
            wp += 1;
        }
        let [wx, wy] = waypoints.get(wp).copied().unwrap_or(goal_xy);
        let mut a = [
            (gen.controller_gain * (wx - s[0])).clamp(-1.0, 1.0),
            (gen.controller_gain * (wy - s[1])).clamp(-1.0, 1.0),
        ];
        if gen.action_noise > 0.0 {
            a[0] += noise.sample(rng);
            a[1] += noise.sample(rng);
        }
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let (next, reached) = dynamics(maze, env, &s, a, goal_xy);
        traj.states.push(s);
        traj.actions.push(a);
        s = next;
        if reached {
            return Ok((traj, true));
        }
    }
    Ok((traj, false))
}

/// Trajectory `index` of the dataset for `seed`.
pub fn sample_trajectory(maze: &MazeSpec, env: &EnvConfig, gen: &DataGenConfig, seed: u64, index: usize) -> DatasetTrajectory {
    let open = maze.open_cells();
    let mut rng = rng::stream(seed, "dataset", index as u64);
    loop {
        let start = open[rng.random_range(0..open.len())];
        let goal = open[rng.random_range(0..open.len())];
        if start == goal {
            continue;
        }
        let (mut traj, _) = run_controller(maze, env, gen, start, goal, &mut rng).expect("validated maze is connected");
        if traj.len() >= gen.min_len.max(1) {
            traj.round_to_f32();
            return traj;
        }
    }
}

/// Task-agnostic offline data between random start/goal cell pairs. The
/// output depends only on the arguments, not on thread count.
pub fn generate_dataset(maze: &MazeSpec, env: &EnvConfig, gen: &DataGenConfig, n_traj: usize, seed: u64) -> Result<OfflineDataset> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
    }
    if maze.open_cells().len() < 2 {
        return Err(Error::Maze("need at least two open cells".into()));
    }
    let trajectories = par::map_indexed(n_traj, |i| sample_trajectory(maze, env, gen, seed, i));
    Ok(OfflineDataset { trajectories })
}

pub fn write_dcmd<W: Write>(data: &OfflineDataset, w: &mut W) -> Result<()> {
    let n = u32::try_from(data.trajectories.len()).map_err(|_| Error::Format("too many trajectories".into()))?;
    w.write_all(MAGIC)?;
    for v in [VERSION, STATE_DIM as u32, ACTION_DIM as u32, n] {
        w.write_all(&v.to_le_bytes())?;
    }
    for t in &data.trajectories {
        if t.states.len() != t.actions.len() {
            return Err(Error::Format("trajectory has unequal state and action counts".into()));
        }
        let len = u32::try_from(t.len()).map_err(|_| Error::Format("trajectory too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        for (s, a) in t.states.iter().zip(&t.actions) {
            for &v in s.iter().chain(a) {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dcmd<R: Read>(r: &mut R) -> Result<OfflineDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let sd = read_u32(r, "state_dim")? as usize;
    let ad = read_u32(r, "action_dim")? as usize;
    if (sd, ad) != (STATE_DIM, ACTION_DIM) {
        return Err(Error::Format(format!("expected dims ({STATE_DIM}, {ACTION_DIM}), file has ({sd}, {ad})")));
    }
    let n = read_u32(r, "n_traj")? as usize;
    let mut trajectories = Vec::with_capacity(n.min(1 << 16));
    let mut buf = [0u8; 4 * (STATE_DIM + ACTION_DIM)];
    for i in 0..n {
        let len = read_u32(r, "trajectory length")? as usize;
        let mut t = DatasetTrajectory::default();
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated in trajectory {i}")))?;
            let v: Vec<f64> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            t.states.push([v[0], v[1], v[2], v[3]]);
            t.actions.push([v[4], v[5]]);
        }
        trajectories.push(t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last trajectory".into()));
    }
    Ok(OfflineDataset { trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> OfflineDataset {
        let m = MazeSpec::desk();
        generate_dataset(&m, &EnvConfig::default(), &DataGenConfig::default(), 12, 5).unwrap()
    }

    #[test]
    fn deterministic_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dcmd(&small(), &mut a).unwrap();
        write_dcmd(&small(), &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..4], b"DCMD");
    }

    #[test]
    fn round_trip_is_exact() {
        let d = small();
        let mut bytes = Vec::new();
        write_dcmd(&d, &mut bytes).unwrap();
        assert_eq!(read_dcmd(&mut bytes.as_slice()).unwrap(), d);
        assert!(read_dcmd(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_dcmd(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn lengths_and_chaining() {
        let m = MazeSpec::desk();
        let env = EnvConfig::default();
        let d = small();
        for t in &d.trajectories {
            assert!(t.len() >= 10);
            for s in &t.states {
                assert!(m.is_free(s[0], s[1]));
            }
            for w in 0..t.len() - 1 {
                let (next, _) = dynamics(&m, &env, &t.states[w], t.actions[w], [0.0, 0.0]);
                for k in 0..STATE_DIM {
                    assert!((next[k] - t.states[w + 1][k]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_trajectories_rejected() {
        let m = MazeSpec::desk();
        assert!(generate_dataset(&m, &EnvConfig::default(), &DataGenConfig::default(), 0, 0).is_err());
    }
}
