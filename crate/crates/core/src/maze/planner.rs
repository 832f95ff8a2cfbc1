use std::collections::VecDeque;

use super::{Cell, MazeSpec};
use crate::error::{Error, Result};

/// Shortest 4-connected path as cells, start and goal included.
/// Empty when `start == goal`.
pub fn plan_cells(maze: &MazeSpec, start: Cell, goal: Cell) -> Result<Vec<Cell>> {
    for c in [start, goal] {
        if maze.is_wall(c) {
            return Err(Error::Maze(format!("cell {c:?} is not open")));
        }
    }
    if start == goal {
        return Ok(Vec::new());
    }
    let mut prev = vec![usize::MAX; maze.height() * maze.width()];
    let mut queue = VecDeque::from([start]);
    prev[maze.index(start)] = maze.index(start);
    while let Some(cell) = queue.pop_front() {
        if cell == goal {
            let mut path = vec![goal];
            let mut i = maze.index(goal);
            while i != maze.index(start) {
                i = prev[i];
                path.push((i / maze.width(), i % maze.width()));
            }
            path.reverse();
            return Ok(path);
        }
        for n in maze.neighbors(cell) {
            let j = maze.index(n);
            if prev[j] == usize::MAX {
                prev[j] = maze.index(cell);
                queue.push_back(n);
            }
        }
    }
    Err(Error::Unreachable { start, goal })
}

/// Cell-centre waypoints of a shortest path.
pub fn plan_path(maze: &MazeSpec, start: Cell, goal: Cell) -> Result<Vec<[f64; 2]>> {
    Ok(plan_cells(maze, start, goal)?.into_iter().map(|c| maze.cell_center(c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive simple-path enumeration; exponential, small mazes only.
    fn brute_min(maze: &MazeSpec, at: Cell, goal: Cell, seen: &mut Vec<Cell>) -> Option<usize> {
        if at == goal {
            return Some(0);
        }
        seen.push(at);
        let mut best: Option<usize> = None;
        let next: Vec<Cell> = maze.neighbors(at).collect();
        for n in next {
            if !seen.contains(&n) {
                if let Some(d) = brute_min(maze, n, goal, seen) {
                    best = Some(best.map_or(d + 1, |b| b.min(d + 1)));
                }
            }
        }
        seen.pop();
        best
    }

    #[test]
    fn degenerate_and_tiny() {
        let m = MazeSpec::parse("####\n#S.#\n#..#\n####\n").unwrap();
        assert!(plan_path(&m, (1, 1), (1, 1)).unwrap().is_empty());
        let p = plan_cells(&m, (1, 1), (2, 2)).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], (1, 1));
        assert_eq!(p[2], (2, 2));
        assert_eq!(plan_path(&m, (1, 1), (2, 2)).unwrap()[2], [2.5, 2.5]);
    }

    #[test]
    fn wall_endpoint_rejected() {
        let m = MazeSpec::desk();
        assert!(plan_path(&m, (0, 0), (1, 1)).is_err());
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..8 {
            let m = MazeSpec::random(6, 6, 0.25, &mut rng);
            let open = m.open_cells();
            for &a in &open {
                for &b in &open {
                    let path = plan_cells(&m, a, b).unwrap();
                    let expect = brute_min(&m, a, b, &mut Vec::new()).unwrap();
                    assert_eq!(path.len().saturating_sub(1), expect, "{a:?} -> {b:?}");
                    for w in path.windows(2) {
                        let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                        assert_eq!(d, 1);
                    }
                }
            }
        }
    }
}
