//! Scripted benchmark comparisons: the two-step matrix game with its
//! enumeration oracle, and the hidden-treasure grid across state sources.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::commands::CommandError;
use crate::config::{Algorithm, TrainConfig};
use crate::envs::{
    oracle_optimal_return, Environment, HiddenTreasureGridSpec, TwoStepGame, TwoStepGameSpec,
    DEFAULT_ORACLE_BUDGET,
};
use crate::training::{percentile, EvalStats, Trainer};

pub const BENCH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const TWO_STEP_TIMESTEPS: u64 = 20_000;
pub const GRID_TIMESTEPS: u64 = 200_000;

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub final_eval_median: f64,
    pub best_eval_median: f64,
    pub reached_optimum: bool,
}

#[derive(Debug, Clone)]
pub struct TwoStepBench {
    pub oracle_optimum: f64,
    pub runs: Vec<BenchRun>,
    /// Per algorithm: seeds whose greedy policy reached the oracle optimum.
    pub reach_counts: BTreeMap<String, usize>,
}

impl TwoStepBench {
    pub fn reached(&self, algorithm: Algorithm) -> usize {
        self.reach_counts
            .get(algorithm.name())
            .copied()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct GridBench {
    pub runs: Vec<BenchRun>,
    /// Median over seeds of each algorithm's final greedy-eval median.
    pub algo_medians: BTreeMap<String, f64>,
    pub random_median: f64,
    pub side_at_least_ho: bool,
    pub side_at_least_09_true: bool,
    pub hard_floor: bool,
}

fn bench_cfg(
    algorithm: Algorithm,
    env: &str,
    seed: u64,
    timesteps: u64,
    eval_interval: u64,
    out: &Path,
) -> TrainConfig {
    TrainConfig {
        algorithm,
        env: env.to_string(),
        seed,
        total_timesteps: timesteps,
        eval_interval,
        out: out.join(format!("{}_seed{}", algorithm.name(), seed)),
        ..TrainConfig::default()
    }
}

/// Run a batch of training configs, at most `jobs` at a time; results come
/// back in input order.
pub fn run_many(
    configs: Vec<TrainConfig>,
    jobs: usize,
) -> Result<Vec<(TrainConfig, Vec<(u64, EvalStats)>)>, CommandError> {
    let jobs = jobs.max(1);
    let mut results: Vec<Option<(TrainConfig, Vec<(u64, EvalStats)>)>> =
        (0..configs.len()).map(|_| None).collect();
    let mut queue: Vec<(usize, TrainConfig)> = configs.into_iter().enumerate().collect();
    while !queue.is_empty() {
        let wave: Vec<(usize, TrainConfig)> =
            queue.drain(..queue.len().min(jobs)).collect();
        let outcomes = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .into_iter()
                .map(|(idx, cfg)| {
                    scope.spawn(move || {
                        let mut trainer = Trainer::new(cfg.clone())?;
                        let summary = trainer.run()?;
                        Ok::<_, crate::training::TrainerError>((idx, cfg, summary.evals))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bench worker panicked"))
                .collect::<Vec<_>>()
        });
        for outcome in outcomes {
            let (idx, cfg, evals) = outcome?;
            results[idx] = Some((cfg, evals));
        }
    }
    Ok(results.into_iter().map(|r| r.expect("all runs finished")).collect())
}

fn summarize(
    algorithm: Algorithm,
    seed: u64,
    evals: &[(u64, EvalStats)],
    optimum: Option<f64>,
) -> BenchRun {
    let final_eval_median = evals.last().map(|(_, s)| s.median).unwrap_or(f64::NAN);
    let best_eval_median = evals
        .iter()
        .map(|(_, s)| s.median)
        .fold(f64::NEG_INFINITY, f64::max);
    // the timestep-0 evaluation measures the untrained policy; reaching the
    // optimum only counts once training has started
    let best_trained = evals
        .iter()
        .filter(|(t, _)| *t > 0)
        .map(|(_, s)| s.median)
        .fold(f64::NEG_INFINITY, f64::max);
    let reached_optimum = optimum.map(|o| best_trained >= o - 1e-9).unwrap_or(false);
    BenchRun {
        algorithm,
        seed,
        final_eval_median,
        best_eval_median,
        reached_optimum,
    }
}

/// Two-step matrix game: VDN, QMIX-PO and the latent-state algorithm, five
/// seeds each, against the enumeration-oracle optimum.
pub fn bench_two_step(out: &Path, jobs: usize, timesteps: u64) -> Result<TwoStepBench, CommandError> {
    let oracle_env = TwoStepGame::new(TwoStepGameSpec::default());
    let oracle_optimum = oracle_optimal_return(&oracle_env, 0, DEFAULT_ORACLE_BUDGET)
        .expect("two-step game is enumerable");
    let algos = [Algorithm::QmixPo, Algorithm::Side, Algorithm::Vdn];
    let mut configs = Vec::new();
    for &algo in &algos {
        for &seed in &BENCH_SEEDS {
            configs.push(bench_cfg(algo, "two_step", seed, timesteps, 2_000, out));
        }
    }
    let results = run_many(configs, jobs)?;
    let mut runs = Vec::new();
    let mut reach_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (cfg, evals) in &results {
        let run = summarize(cfg.algorithm, cfg.seed, evals, Some(oracle_optimum));
        if run.reached_optimum {
            *reach_counts.entry(cfg.algorithm.name().to_string()).or_insert(0) += 1;
        }
        runs.push(run);
    }
    Ok(TwoStepBench {
        oracle_optimum,
        runs,
        reach_counts,
    })
}

/// Median return of a uniform-random policy on the grid.
pub fn random_policy_median(grid: &HiddenTreasureGridSpec, episodes: usize, seed: u64) -> f64 {
    let mut env = crate::envs::HiddenTreasureGrid::new(grid.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut result = env.reset(seed.wrapping_add(ep as u64));
        let mut ret = 0.0;
        while !result.terminated {
            let joint: Vec<usize> = result
                .avail_actions
                .iter()
                .map(|av| {
                    let choices: Vec<usize> = av
                        .iter()
                        .enumerate()
                        .filter(|(_, &ok)| ok)
                        .map(|(i, _)| i)
                        .collect();
                    choices[rng.random_range(0..choices.len())]
                })
                .collect();
            result = env.step(&joint).expect("available action");
            ret += result.reward;
        }
        returns.push(ret);
    }
    returns.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    percentile(&returns, 0.5)
}

/// Hidden-treasure grid: the latent-state algorithm against QMIX-HO and
/// QMIX with the true state, plus the uniform-random floor.
pub fn bench_grid(out: &Path, jobs: usize, timesteps: u64) -> Result<GridBench, CommandError> {
    let algos = [Algorithm::Side, Algorithm::QmixHo, Algorithm::Qmix];
    let mut configs = Vec::new();
    for &algo in &algos {
        for &seed in &BENCH_SEEDS {
            configs.push(bench_cfg(algo, "treasure_grid", seed, timesteps, 10_000, out));
        }
    }
    let results = run_many(configs, jobs)?;
    let mut runs = Vec::new();
    let mut by_algo: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (cfg, evals) in &results {
        let run = summarize(cfg.algorithm, cfg.seed, evals, None);
        by_algo
            .entry(cfg.algorithm.name().to_string())
            .or_default()
            .push(run.final_eval_median);
        runs.push(run);
    }
    let algo_medians: BTreeMap<String, f64> = by_algo
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let m = percentile(&v, 0.5);
            (k, m)
        })
        .collect();
    let random_median = random_policy_median(&HiddenTreasureGridSpec::default(), 400, 777);
    let side = algo_medians[Algorithm::Side.name()];
    let ho = algo_medians[Algorithm::QmixHo.name()];
    let qmix_true = algo_medians[Algorithm::Qmix.name()];
    Ok(GridBench {
        runs,
        side_at_least_ho: side >= ho,
        side_at_least_09_true: side >= 0.9 * qmix_true,
        hard_floor: side >= 5.0 * random_median,
        algo_medians,
        random_median,
    })
}

/// Write the bench summary table (CSV plus a readable text block).
pub fn write_summary(
    out: &Path,
    two_step: Option<&TwoStepBench>,
    grid: Option<&GridBench>,
) -> Result<PathBuf, CommandError> {
    std::fs::create_dir_all(out)?;
    let path = out.join("bench_summary.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(
        w,
        "suite,algorithm,seed,final_eval_median,best_eval_median,reached_optimum"
    )?;
    if let Some(ts) = two_step {
        for r in &ts.runs {
            writeln!(
                w,
                "two_step,{},{},{},{},{}",
                r.algorithm.name(),
                r.seed,
                r.final_eval_median,
                r.best_eval_median,
                r.reached_optimum
            )?;
        }
    }
    if let Some(g) = grid {
        for r in &g.runs {
            writeln!(
                w,
                "treasure_grid,{},{},{},{},",
                r.algorithm.name(),
                r.seed,
                r.final_eval_median,
                r.best_eval_median
            )?;
        }
    }
    w.flush()?;

    let mut text = String::new();
    if let Some(ts) = two_step {
        text.push_str(&format!(
            "two_step: oracle optimum {}\n",
            ts.oracle_optimum
        ));
        for (algo, count) in &ts.reach_counts {
            text.push_str(&format!("  {algo}: reached optimum in {count}/5 seeds\n"));
        }
    }
    if let Some(g) = grid {
        text.push_str("treasure_grid: median final greedy return per algorithm\n");
        for (algo, med) in &g.algo_medians {
            text.push_str(&format!("  {algo}: {med}\n"));
        }
        text.push_str(&format!("  random policy: {}\n", g.random_median));
        text.push_str(&format!(
            "  side >= qmix_ho: {}; side >= 0.9*qmix(true): {}; side >= 5*random: {}\n",
            g.side_at_least_ho, g.side_at_least_09_true, g.hard_floor
        ));
    }
    std::fs::write(out.join("bench_summary.txt"), &text)?;
    print!("{text}");
    Ok(path)
}
