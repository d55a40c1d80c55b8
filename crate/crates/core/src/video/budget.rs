//! Importance-proportional encode budgets and worker assignment.

use super::{TileUnit, VideoError};

/// Mode-search cap: the full mode set.
pub const MAX_TRIALS: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TileBudget {
    pub tile_index: usize,
    /// Cost of one trial (tile pixel count).
    pub trial_cost: u64,
    pub trials: u64,
    /// Trial budget in cost units, `trials * trial_cost`.
    pub budget: u64,
    pub byte_budget: usize,
    pub worker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub tiles: Vec<TileBudget>,
    pub n_workers: usize,
    pub per_worker_budget: u64,
}

impl BudgetPlan {
    pub fn worker_loads(&self) -> Vec<u64> {
        let mut loads = vec![0u64; self.n_workers];
        for t in &self.tiles {
            loads[t.worker] += t.budget;
        }
        loads
    }

    pub fn makespan(&self) -> u64 {
        self.worker_loads().into_iter().max().unwrap_or(0)
    }

    pub fn is_feasible(&self) -> bool {
        self.worker_loads()
            .iter()
            .all(|&l| l <= self.per_worker_budget)
    }

    pub fn for_tile(&self, tile_index: usize) -> Option<&TileBudget> {
        self.tiles.iter().find(|t| t.tile_index == tile_index)
    }
}

/// Longest-processing-time-first assignment. Jobs are taken by descending size
/// (ties by ascending key) and each goes to the least-loaded worker (ties by
/// lowest worker id). Returns the worker per job, in input order.
pub fn lpt_assign(sizes: &[(usize, u64)], n_workers: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        sizes[b]
            .1
            .cmp(&sizes[a].1)
            .then(sizes[a].0.cmp(&sizes[b].0))
    });
    let mut loads = vec![0u64; n_workers];
    let mut out = vec![0usize; sizes.len()];
    for i in order {
        let w = (0..n_workers).min_by_key(|&w| (loads[w], w)).unwrap();
        loads[w] += sizes[i].1;
        out[i] = w;
    }
    out
}

/// Splits `n_workers * per_worker_budget` cost units and `byte_total` bytes
/// across tiles in proportion to importance.
///
/// Each tile gets `floor(n * T * imp / sum_imp)` units, floored to whole trials,
/// capped at [`MAX_TRIALS`] and raised to at least one trial. Workers are then
/// assigned by LPT; while a worker exceeds `T`, the least important multi-trial
/// tile on it (or anywhere, once that worker is all single trials) gives up one
/// trial and the assignment is recomputed.
pub fn allocate_budgets(
    tiles: &[TileUnit],
    n_workers: usize,
    per_worker_budget: u64,
    byte_total: usize,
) -> Result<BudgetPlan, VideoError> {
    if n_workers == 0 {
        return Err(VideoError::Config("n_workers must be at least 1".into()));
    }
    let largest = tiles
        .iter()
        .map(|t| t.pixel_count() as u64)
        .max()
        .unwrap_or(0);
    if per_worker_budget < largest {
        return Err(VideoError::Infeasible(format!(
            "per-worker budget {per_worker_budget} is below one trial of the largest tile ({largest})"
        )));
    }
    if let Some(t) = tiles
        .iter()
        .find(|t| !(t.importance > 0.0 && t.importance.is_finite()))
    {
        return Err(VideoError::Config(format!(
            "tile {} has non-positive importance {}",
            t.tile_index, t.importance
        )));
    }
    let total_imp: f64 = tiles.iter().map(|t| t.importance).sum();
    let pool = (n_workers as u64 * per_worker_budget) as f64;

    let mut out: Vec<TileBudget> = tiles
        .iter()
        .map(|t| {
            let share = t.importance / total_imp;
            let cost = (t.pixel_count() as u64).max(1);
            let raw = (pool * share).floor() as u64;
            let trials = (raw / cost).clamp(1, MAX_TRIALS);
            TileBudget {
                tile_index: t.tile_index,
                trial_cost: cost,
                trials,
                budget: trials * cost,
                byte_budget: (byte_total as f64 * share).floor() as usize,
                worker: 0,
            }
        })
        .collect();

    loop {
        let sizes: Vec<(usize, u64)> = out.iter().map(|t| (t.tile_index, t.budget)).collect();
        let assign = lpt_assign(&sizes, n_workers);
        let mut loads = vec![0u64; n_workers];
        for (t, &w) in out.iter_mut().zip(&assign) {
            t.worker = w;
            loads[w] += t.budget;
        }
        let (worst, &load) = loads
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if load <= per_worker_budget {
            break;
        }
        let least_important = |on_worst: bool| {
            (0..out.len())
                .filter(|&i| out[i].trials > 1 && (!on_worst || out[i].worker == worst))
                .min_by(|&a, &b| {
                    tiles[a]
                        .importance
                        .partial_cmp(&tiles[b].importance)
                        .unwrap()
                        .then(out[b].trials.cmp(&out[a].trials))
                        .then(out[b].tile_index.cmp(&out[a].tile_index))
                })
        };
        // Shrinking another worker's tile can still let LPT rebalance.
        let victim = least_important(true).or_else(|| least_important(false));
        match victim {
            Some(i) => {
                out[i].trials -= 1;
                out[i].budget = out[i].trials * out[i].trial_cost;
            }
            None => return Err(VideoError::Infeasible(format!(
                "{} single-trial tiles do not fit {n_workers} workers of {per_worker_budget} units",
                tiles.len()
            ))),
        }
    }

    Ok(BudgetPlan {
        tiles: out,
        n_workers,
        per_worker_budget,
    })
}
