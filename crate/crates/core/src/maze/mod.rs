//! Multi-task 2-D point maze: layout, dynamics, planner, offline data and
//! task sampling.

mod dataset;
mod env;
mod planner;
mod tasks;

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;

pub use dataset::{
    generate_dataset, read_dcmd, run_controller, sample_trajectory, write_dcmd, DataGenConfig, DatasetTrajectory, OfflineDataset,
};
pub use env::{dynamics, EnvConfig, MazeEnv, State, Step, Task, Transition, ACTION_DIM, STATE_DIM};
pub use planner::plan_path;
pub use tasks::{make_task_sets, Region, TaskSets};

use crate::error::{Error, Result};

pub type Cell = (usize, usize);

/// The default 6x6 navigable maze, walled in on all sides.
pub const DESK_MAZE: &str = "\
########
#......#
#.#..#.#
#.#....#
#...S#.#
#.##...#
#......#
########
";

/// Maps raw states to network inputs: position centred and scaled to about
/// `[-1, 1]`, velocity unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateNorm {
    pub center: [f64; 2],
    pub scale: [f64; 2],
}

impl StateNorm {
    pub fn apply(&self, s: &State) -> State {
        [(s[0] - self.center[0]) / self.scale[0], (s[1] - self.center[1]) / self.scale[1], s[2], s[3]]
    }
}

/// Wall grid with a start cell. Cell `(row, col)` covers
/// `x in [col, col+1)`, `y in [row, row+1)`; row 0 is the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeSpec {
    height: usize,
    width: usize,
    walls: Vec<bool>,
    start: Cell,
}

impl MazeSpec {
    pub fn new(height: usize, width: usize, walls: Vec<bool>, start: Cell) -> Result<Self> {
        if walls.len() != height * width {
            return Err(Error::Maze(format!("{}x{} grid needs {} cells, got {}", height, width, height * width, walls.len())));
        }
        let maze = MazeSpec { height, width, walls, start };
        maze.validate()?;
        Ok(maze)
    }

    pub fn desk() -> Self {
        MazeSpec::parse(DESK_MAZE).expect("built-in maze is valid")
    }

    /// Text grid: `#` wall, `.` open, `S` start (open).
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        if height == 0 {
            return Err(Error::Maze("empty maze file".into()));
        }
        let width = rows[0].chars().count();
        let mut walls = Vec::with_capacity(height * width);
        let mut start = None;
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Maze(format!("row {r} has width {}, expected {width}", line.chars().count())));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(Error::Maze("more than one start cell".into()));
                        }
                        walls.push(false);
                    }
                    other => return Err(Error::Maze(format!("unexpected character {other:?} at row {r}, col {c}"))),
                }
            }
        }
        let start = start.ok_or_else(|| Error::Maze("no start cell".into()))?;
        MazeSpec::new(height, width, walls, start)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let ch = if (r, c) == self.start {
                    'S'
                } else if self.is_wall((r, c)) {
                    '#'
                } else {
                    '.'
                };
                s.push(ch);
            }
            let _ = writeln!(s);
        }
        s
    }

    /// Start open, border walled, every open cell reachable from the start.
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::Maze(format!("{}x{} is too small", self.height, self.width)));
        }
        let (sr, sc) = self.start;
        if sr >= self.height || sc >= self.width || self.is_wall(self.start) {
            return Err(Error::Maze(format!("start {:?} is not an open cell", self.start)));
        }
        for r in 0..self.height {
            for c in 0..self.width {
                let border = r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width;
                if border && !self.is_wall((r, c)) {
                    return Err(Error::Maze(format!("border cell ({r}, {c}) is open")));
                }
            }
        }
        let reached = self.flood_fill(self.start);
        let open = self.open_cells();
        if reached.len() != open.len() {
            let lost = open.iter().find(|c| !reached.contains(c)).copied().unwrap_or_default();
            return Err(Error::Maze(format!("open cell {lost:?} unreachable from start")));
        }
        Ok(())
    }

    fn flood_fill(&self, from: Cell) -> Vec<Cell> {
        let mut seen = vec![false; self.walls.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::from([from]);
        seen[self.index(from)] = true;
        while let Some(cell) = queue.pop_front() {
            out.push(cell);
            for n in self.neighbors(cell) {
                let i = self.index(n);
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(n);
                }
            }
        }
        out
    }

    pub(crate) fn index(&self, (r, c): Cell) -> usize {
        r * self.width + c
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn is_wall(&self, (r, c): Cell) -> bool {
        r >= self.height || c >= self.width || self.walls[r * self.width + c]
    }

    /// Open 4-neighbours in up, down, left, right order.
    pub fn neighbors(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        let cand = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        cand.into_iter().filter(move |&n| !self.is_wall(n))
    }

    /// Open cells in row-major order.
    pub fn open_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&cell| !self.is_wall(cell))
            .collect()
    }

    /// `[x, y]` of the cell centre.
    pub fn cell_center(&self, (r, c): Cell) -> [f64; 2] {
        [c as f64 + 0.5, r as f64 + 0.5]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (c, r) = (x.floor() as usize, y.floor() as usize);
        (r < self.height && c < self.width).then_some((r, c))
    }

    /// Whether a point lies inside an open cell.
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|cell| !self.is_wall(cell))
    }

    pub fn state_norm(&self) -> StateNorm {
        let hw = self.width as f64 / 2.0;
        let hh = self.height as f64 / 2.0;
        StateNorm { center: [hw, hh], scale: [hw, hh] }
    }

    /// Random connected maze with walled border and centred start.
    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, wall_prob: f64, rng: &mut R) -> Self {
        let start = (height / 2, width / 2);
        loop {
            let walls: Vec<bool> = (0..height * width)
                .map(|i| {
                    let (r, c) = (i / width, i % width);
                    let border = r == 0 || c == 0 || r + 1 == height || c + 1 == width;
                    border || ((r, c) != start && rng.random_bool(wall_prob))
                })
                .collect();
            if let Ok(m) = MazeSpec::new(height, width, walls, start) {
                return m;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_maze_round_trips() {
        let m = MazeSpec::desk();
        assert_eq!((m.height(), m.width()), (8, 8));
        assert_eq!(m.start(), (4, 4));
        assert_eq!(m.to_text(), DESK_MAZE);
        assert_eq!(MazeSpec::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn validation_failures() {
        assert!(MazeSpec::parse("###\n#S.\n###\n").is_err(), "open border");
        assert!(MazeSpec::parse("#####\n#S#.#\n#####\n").is_err(), "disconnected");
        assert!(MazeSpec::parse("###\n#.#\n###\n").is_err(), "no start");
        assert!(MazeSpec::parse("###\n#x#\n###\n").is_err(), "bad char");
        assert!(MazeSpec::parse("###\n#S#\n###\n").is_ok());
    }

    #[test]
    fn geometry() {
        let m = MazeSpec::desk();
        assert_eq!(m.cell_center((1, 2)), [2.5, 1.5]);
        assert_eq!(m.cell_of(2.0, 1.99), Some((1, 2)));
        assert!(!m.is_free(0.5, 0.5));
        assert!(m.is_free(1.5, 1.5));
        assert_eq!(m.cell_of(-0.1, 1.0), None);
    }

    #[test]
    fn random_mazes_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = MazeSpec::random(6, 6, 0.3, &mut rng);
            assert!(m.validate().is_ok());
        }
    }
}
