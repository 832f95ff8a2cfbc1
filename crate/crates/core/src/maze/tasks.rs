use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Cell, MazeSpec, Task};
use crate::error::{Error, Result};
use crate::rng;

/// Row filter on goal cells, measured over the interior (non-border) rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    #[default]
    Any,
    Top,
    Bottom,
}

impl Region {
    pub fn contains(self, maze: &MazeSpec, (r, _): Cell) -> bool {
        let interior = maze.height().saturating_sub(2).max(1);
        let quarter = interior.div_ceil(4);
        let k = r.saturating_sub(1);
        match self {
            Region::Any => true,
            Region::Top => k < quarter,
            Region::Bottom => k + quarter >= interior,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSets {
    pub train: Vec<Task>,
    pub target: Vec<Task>,
}

/// Disjoint train/target goal sets drawn without replacement from open
/// non-start cells. Train ids are `0..n_train`, target ids follow.
pub fn make_task_sets(
    maze: &MazeSpec,
    n_train: usize,
    n_target: usize,
    train_region: Region,
    target_region: Region,
    seed: u64,
) -> Result<TaskSets> {
    let mut cells: Vec<Cell> = maze.open_cells().into_iter().filter(|&c| c != maze.start()).collect();
    if n_train + n_target > cells.len() {
        return Err(Error::InsufficientCells { needed: n_train + n_target, available: cells.len() });
    }
    cells.shuffle(&mut rng::stream(seed, "tasks", 0));
    let mut taken = vec![false; cells.len()];
    let mut pick = |n: usize, region: Region, first_id: usize| -> Result<Vec<Task>> {
        let mut out = Vec::with_capacity(n);
        for (i, &c) in cells.iter().enumerate() {
            if out.len() == n {
                break;
            }
            if !taken[i] && region.contains(maze, c) {
                taken[i] = true;
                out.push(Task { id: first_id + out.len(), goal: maze.cell_center(c) });
            }
        }
        if out.len() < n {
            let available = out.len();
            return Err(Error::InsufficientCells { needed: n, available });
        }
        Ok(out)
    };
    let train = pick(n_train, train_region, 0)?;
    let target = pick(n_target, target_region, n_train)?;
    Ok(TaskSets { train, target })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_and_deterministic() {
        let m = MazeSpec::desk();
        let a = make_task_sets(&m, 8, 2, Region::Any, Region::Any, 3).unwrap();
        let b = make_task_sets(&m, 8, 2, Region::Any, Region::Any, 3).unwrap();
        assert_eq!(a, b);
        let mut goals: Vec<_> = a.train.iter().chain(&a.target).map(|t| (t.goal[0].to_bits(), t.goal[1].to_bits())).collect();
        goals.sort();
        goals.dedup();
        assert_eq!(goals.len(), 10);
        let start = m.cell_center(m.start());
        assert!(a.train.iter().chain(&a.target).all(|t| t.goal != start));
        assert_eq!(a.target[0].id, 8);
        let c = make_task_sets(&m, 8, 2, Region::Any, Region::Any, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn region_filters() {
        let m = MazeSpec::desk();
        let s = make_task_sets(&m, 6, 2, Region::Top, Region::Bottom, 0).unwrap();
        assert!(s.train.iter().all(|t| t.goal[1] < 3.0));
        assert!(s.target.iter().all(|t| t.goal[1] > 5.0));
        assert!(make_task_sets(&m, 11, 0, Region::Top, Region::Any, 0).is_err());
    }

    #[test]
    fn too_many_tasks_rejected() {
        let m = MazeSpec::desk();
        let open = m.open_cells().len() - 1;
        assert!(make_task_sets(&m, open, 0, Region::Any, Region::Any, 0).is_ok());
        assert!(matches!(
            make_task_sets(&m, open, 1, Region::Any, Region::Any, 0),
            Err(Error::InsufficientCells { .. })
        ));
    }
}
