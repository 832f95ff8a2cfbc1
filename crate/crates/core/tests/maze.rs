use dcmrl::maze::{dynamics, generate_dataset, run_controller, DataGenConfig, EnvConfig, MazeEnv, MazeSpec, Task};
use dcmrl::rng;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn noiseless_controller_reaches_goals() {
    let m = MazeSpec::desk();
    let env = EnvConfig::default();
    let gen = DataGenConfig { action_noise: 0.0, ..DataGenConfig::default() };
    let open = m.open_cells();
    let mut rng = rng::stream(0, "oracle", 0);
    let mut reached = 0;
    let mut runs = 0;
    while runs < 500 {
        let a = open[rng.random_range(0..open.len())];
        let b = open[rng.random_range(0..open.len())];
        if a == b {
            continue;
        }
        runs += 1;
        let (traj, ok) = run_controller(&m, &env, &gen, a, b, &mut rng).unwrap();
        assert!(traj.len() <= env.max_steps);
        reached += ok as usize;
    }
    assert!(reached as f64 / 500.0 >= 0.95, "{reached}/500");
}

#[test]
fn random_walk_never_enters_walls() {
    let m = MazeSpec::desk();
    let cfg = EnvConfig::default();
    let mut rng = rng::stream(1, "walk", 0);
    let task = Task { id: 0, goal: [100.0, 100.0] };
    let mut env = MazeEnv::new(&m, cfg, task);
    for _ in 0..100_000 {
        if env.is_done() {
            env.reset();
        }
        let a = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let s = env.step(a).unwrap();
        assert!(m.is_free(s.state[0], s.state[1]), "{:?}", s.state);
        assert_eq!(s.reward, 0.0);
    }
}

#[test]
fn dataset_is_independent_of_parallelism() {
    let m = MazeSpec::desk();
    let a = generate_dataset(&m, &EnvConfig::default(), &DataGenConfig::default(), 16, 9).unwrap();
    let b = generate_dataset(&m, &EnvConfig::default(), &DataGenConfig::default(), 16, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.trajectories.iter().all(|t| t.len() >= 10));
}

proptest! {
    #[test]
    fn step_is_pure_and_replayable(seed in any::<u64>(), n in 1usize..200) {
        let m = MazeSpec::desk();
        let cfg = EnvConfig::default();
        let goal = m.cell_center((1, 1));
        let mut rng = rng::stream(seed, "replay", 0);
        let actions: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let mut env = MazeEnv::new(&m, cfg, Task { id: 0, goal });
        let mut logged = vec![env.state()];
        for a in &actions {
            if env.is_done() { break; }
            let s = env.step(*a).unwrap();
            prop_assert!(s.reward == 0.0 || s.done);
            logged.push(s.state);
        }
        let mut s = logged[0];
        for (t, a) in actions.iter().take(logged.len() - 1).enumerate() {
            s = dynamics(&m, &cfg, &s, *a, goal).0;
            prop_assert_eq!(s, logged[t + 1]);
        }
    }

    #[test]
    fn positions_stay_free_on_random_mazes(seed in any::<u64>()) {
        let mut rng = rng::stream(seed, "maze", 0);
        let m = MazeSpec::random(7, 7, 0.3, &mut rng);
        let cfg = EnvConfig::default();
        let [x, y] = m.cell_center(m.start());
        let mut s = [x, y, 0.0, 0.0];
        for _ in 0..500 {
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            s = dynamics(&m, &cfg, &s, a, [0.0, 0.0]).0;
            prop_assert!(m.is_free(s[0], s[1]));
        }
    }
}
