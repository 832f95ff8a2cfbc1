use serde::{Deserialize, Serialize};

use super::MazeSpec;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// `(x, y, vx, vy)`.
pub type State = [f64; STATE_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub goal_radius: f64,
    pub max_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { dt: 0.1, goal_radius: 0.5, max_steps: 300 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub goal: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: State,
    pub a: [f64; ACTION_DIM],
    pub r: f64,
    pub done: bool,
    pub s_next: State,
}

/// Result of one environment step. `success` marks the goal being reached;
/// `done` also covers the step cap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: State,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Velocity-command dynamics with per-axis collision. Returns the next state
/// and whether it lies within the goal radius.
pub fn dynamics(maze: &MazeSpec, cfg: &EnvConfig, s: &State, action: [f64; 2], goal: [f64; 2]) -> (State, bool) {
    let vx = clamp_unit(action[0]);
    let vy = clamp_unit(action[1]);
    let mut next = [s[0], s[1], vx, vy];
    let x = s[0] + cfg.dt * vx;
    if maze.is_free(x, next[1]) {
        next[0] = x;
    } else {
        next[2] = 0.0;
    }
    let y = s[1] + cfg.dt * vy;
    if maze.is_free(next[0], y) {
        next[1] = y;
    } else {
        next[3] = 0.0;
    }
    let dx = next[0] - goal[0];
    let dy = next[1] - goal[1];
    let reached = (dx * dx + dy * dy).sqrt() <= cfg.goal_radius;
    (next, reached)
}

/// One episode of one task.
#[derive(Clone, Debug)]
pub struct MazeEnv<'a> {
    maze: &'a MazeSpec,
    cfg: EnvConfig,
    task: Task,
    state: State,
    t: usize,
    done: bool,
}

impl<'a> MazeEnv<'a> {
    pub fn new(maze: &'a MazeSpec, cfg: EnvConfig, task: Task) -> Self {
        let mut env = MazeEnv { maze, cfg, task, state: [0.0; STATE_DIM], t: 0, done: false };
        env.reset();
        env
    }

    /// Back to the start cell centre at rest.
    pub fn reset(&mut self) -> State {
        let [x, y] = self.maze.cell_center(self.maze.start());
        self.state = [x, y, 0.0, 0.0];
        self.t = 0;
        self.done = false;
        self.state
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let (next, success) = dynamics(self.maze, &self.cfg, &self.state, action, self.task.goal);
        self.state = next;
        self.t += 1;
        self.done = success || self.t >= self.cfg.max_steps;
        Ok(Step { state: next, reward: if success { 1.0 } else { 0.0 }, done: self.done, success })
    }
}
