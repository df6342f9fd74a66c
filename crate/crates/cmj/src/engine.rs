//! Event-driven growth of one branching tree per replica.
//!
//! The loop pops individuals in birth-time order from a min-priority queue,
//! draws their offspring ages, and folds every parent-child edge into fixed
//! time-grid accumulators via difference arrays (O(1) per edge), so memory
//! stays linear in the grid while the frontier itself grows exponentially.
//! A child born at s' to a parent born at s contributes its discounted
//! weight to every grid point in [s, s'). Children beyond the horizon are
//! kept in the frontier bookkeeping but never expanded; children beyond the
//! age cap are dropped, with the lost weight bounded in closed form by
//! [`truncation_bias_bound`].
//!
//! Discount weights propagate multiplicatively along lineages,
//! w(child) = w(parent) * e^{-alpha * age}. For lattice laws whose root is
//! exactly representable this keeps every weight an exact power of the
//! per-step factor (the degenerate two-children-at-age-one law yields
//! weights that are exact powers of two, and unit frontier sums).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::RngCore;
use thiserror::Error;

use crate::malthusian::ModelConstants;
use crate::reproduction::{unit_open, AgeDist, ReproductionLaw};
use crate::rng::replica_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("walk horizon alpha*t = {alpha_t} too large for stable exponentials (limit 600)")]
    HorizonTooLarge { alpha_t: f64 },
    #[error("simulation grid is empty or not sorted inside [0, horizon]")]
    BadGrid,
}

/// Per-replica simulation parameters. The grid is the fixed set of sample
/// times; all accumulators live on it.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig<'a> {
    pub law: &'a ReproductionLaw,
    pub horizon: f64,
    pub grid: &'a [f64],
    pub age_cap: f64,
    pub max_births: u64,
    pub master_seed: u64,
    pub replica_index: u64,
}

impl SimConfig<'_> {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.grid.is_empty()
            || self.grid.windows(2).any(|w| w[0] > w[1])
            || self.grid[0] < 0.0
            || *self.grid.last().unwrap() > self.horizon
            || !(self.age_cap > 0.0)
        {
            return Err(EngineError::BadGrid);
        }
        Ok(())
    }
}

/// Piecewise-linear weight function for frontier characteristics. Evaluates
/// to `left` before the first knot and to `right` after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub left: f64,
    pub right: f64,
}

impl WeightTable {
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 0 || x < self.xs[0] {
            return self.left;
        }
        if x >= self.xs[n - 1] {
            return self.right;
        }
        let i = self.xs.partition_point(|&k| k <= x);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let (y0, y1) = (self.ys[i - 1], self.ys[i]);
        y0 + (y1 - y0) * ((x - x0) / (x1 - x0))
    }
}

/// Catalog of per-individual scores accumulated alongside the main loop.
#[derive(Debug, Clone, PartialEq)]
pub enum CharacteristicSpec {
    /// Score 1 from birth onwards: the track equals the birth count N_t.
    BornIndicator,
    /// Frontier score: each coming-generation member v contributes
    /// e^{-2 alpha S(v)} f(t - S(v)) at grid time t. The track stores this
    /// discounted sum directly (scale by e^{2 alpha t} for the raw counted
    /// process). With f = 1 the track coincides with Q_t bit for bit.
    DiscountedFrontier(FrontierWeight),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrontierWeight {
    ConstOne,
    Table(WeightTable),
}

/// Grid record of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaPath {
    pub replica_index: u64,
    pub master_seed: u64,
    /// Frontier martingale W_t per grid point.
    pub w: Vec<f64>,
    /// Squared-weight frontier sum Q_t per grid point.
    pub q: Vec<f64>,
    /// Births in [0, t] per grid point.
    pub births: Vec<u64>,
    /// Coming-generation size among retained individuals per grid point.
    pub frontier: Vec<u64>,
    /// Generation sums Z_n; complete for every generation whose parents were
    /// all expanded, absent (zero) past the last generation reached.
    pub z: Vec<f64>,
    /// One track per requested characteristic, aligned with the grid.
    pub char_tracks: Vec<Vec<f64>>,
    /// Queue drained with an empty frontier before the horizon.
    pub extinct: bool,
    /// Birth guard hit; the replica must be excluded from ensembles.
    pub guard_tripped: bool,
}

impl ReplicaPath {
    pub fn z_at(&self, generation: usize) -> f64 {
        self.z.get(generation).copied().unwrap_or(0.0)
    }
}

struct QueueItem {
    time: f64,
    seq: u64,
    generation: u32,
    weight: f64,
    node: u32,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for QueueItem {}
impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueItem {
    // reversed: BinaryHeap is a max-heap, we pop the earliest birth, ties by
    // insertion sequence for lattice determinism
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// A node of the retained genealogy in debug (tree-keeping) mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub parent: Option<u32>,
    pub birth: f64,
    pub generation: u32,
}

/// Runs one replica.
pub fn run_replica(config: &SimConfig, constants: &ModelConstants) -> ReplicaPath {
    simulate(config, constants, &[], false).0
}

/// Runs one replica, accumulating the given characteristics during the same
/// event loop (they consume no randomness, so the tree is unchanged).
pub fn run_replica_with(
    config: &SimConfig,
    constants: &ModelConstants,
    characteristics: &[CharacteristicSpec],
) -> ReplicaPath {
    simulate(config, constants, characteristics, false).0
}

/// Debug mode for small trees: also returns the full retained genealogy
/// (every known individual, including children beyond the horizon). Memory
/// is linear in the number of births, so keep `max_births` small.
pub fn run_replica_tree(
    config: &SimConfig,
    constants: &ModelConstants,
    characteristics: &[CharacteristicSpec],
) -> (ReplicaPath, Vec<TreeNode>) {
    let (path, tree) = simulate(config, constants, characteristics, true);
    (path, tree.unwrap())
}

fn simulate(
    config: &SimConfig,
    constants: &ModelConstants,
    characteristics: &[CharacteristicSpec],
    keep_tree: bool,
) -> (ReplicaPath, Option<Vec<TreeNode>>) {
    config.validate().expect("invalid simulation config");
    let alpha = constants.alpha;
    let grid = config.grid;
    let g = grid.len();

    let mut w_diff = vec![0.0f64; g + 1];
    let mut q_diff = vec![0.0f64; g + 1];
    let mut frontier_diff = vec![0i64; g + 1];
    let mut birth_hist = vec![0u64; g];
    let mut z: Vec<f64> = Vec::new();

    enum CharAccum {
        Counts(Vec<u64>),
        Diff(Vec<f64>),
        Dense(Vec<f64>, WeightTable),
    }
    let mut accums: Vec<CharAccum> = characteristics
        .iter()
        .map(|c| match c {
            CharacteristicSpec::BornIndicator => CharAccum::Counts(vec![0u64; g]),
            CharacteristicSpec::DiscountedFrontier(FrontierWeight::ConstOne) => {
                CharAccum::Diff(vec![0.0f64; g + 1])
            }
            CharacteristicSpec::DiscountedFrontier(FrontierWeight::Table(t)) => {
                CharAccum::Dense(vec![0.0f64; g], t.clone())
            }
        })
        .collect();

    let mut rng = replica_rng(config.master_seed, config.replica_index);
    let mut heap: BinaryHeap<QueueItem> = BinaryHeap::new();
    let mut tree: Vec<TreeNode> = Vec::new();
    if keep_tree {
        tree.push(TreeNode { parent: None, birth: 0.0, generation: 0 });
    }
    heap.push(QueueItem { time: 0.0, seq: 0, generation: 0, weight: 1.0, node: 0 });

    let mut next_seq = 1u64;
    let mut births = 0u64;
    let mut beyond_horizon = 0u64;
    let mut guard_tripped = false;

    while let Some(item) = heap.pop() {
        births += 1;
        if births > config.max_births {
            guard_tripped = true;
            break;
        }
        let idx_birth = grid.partition_point(|&t| t < item.time);
        if idx_birth < g {
            birth_hist[idx_birth] += 1;
            for acc in &mut accums {
                if let CharAccum::Counts(h) = acc {
                    h[idx_birth] += 1;
                }
            }
        }
        let gen = item.generation as usize;
        if z.len() <= gen {
            z.resize(gen + 1, 0.0);
        }
        z[gen] += item.weight;

        let sample = config.law.sample_offspring(config.age_cap, &mut rng);
        for &age in &sample.ages {
            let child_time = item.time + age;
            let child_weight = item.weight * (-alpha * age).exp();
            let lo = idx_birth; // first grid point >= parent birth
            let hi = grid.partition_point(|&t| t < child_time);
            w_diff[lo] += child_weight;
            w_diff[hi] -= child_weight;
            let qw = child_weight * child_weight;
            q_diff[lo] += qw;
            q_diff[hi] -= qw;
            frontier_diff[lo] += 1;
            frontier_diff[hi] -= 1;
            for acc in &mut accums {
                match acc {
                    CharAccum::Counts(_) => {}
                    CharAccum::Diff(d) => {
                        d[lo] += qw;
                        d[hi] -= qw;
                    }
                    CharAccum::Dense(dense, table) => {
                        for (i, cell) in dense.iter_mut().enumerate().take(hi).skip(lo) {
                            *cell += qw * table.eval(grid[i] - child_time);
                        }
                    }
                }
            }
            let child_node = if keep_tree {
                tree.push(TreeNode {
                    parent: Some(item.node),
                    birth: child_time,
                    generation: item.generation + 1,
                });
                (tree.len() - 1) as u32
            } else {
                0
            };
            if child_time <= config.horizon {
                heap.push(QueueItem {
                    time: child_time,
                    seq: next_seq,
                    generation: item.generation + 1,
                    weight: child_weight,
                    node: child_node,
                });
                next_seq += 1;
            } else {
                beyond_horizon += 1;
            }
        }
    }

    let prefix = |diff: &[f64]| {
        let mut out = Vec::with_capacity(g);
        let mut acc = 0.0;
        for &d in diff.iter().take(g) {
            acc += d;
            out.push(acc);
        }
        out
    };
    let w = prefix(&w_diff);
    let q = prefix(&q_diff);
    let mut frontier = Vec::with_capacity(g);
    let mut facc = 0i64;
    for &d in frontier_diff.iter().take(g) {
        facc += d;
        frontier.push(facc.max(0) as u64);
    }
    let mut births_cum = Vec::with_capacity(g);
    let mut bacc = 0u64;
    for &h in &birth_hist {
        bacc += h;
        births_cum.push(bacc);
    }
    let char_tracks = accums
        .into_iter()
        .map(|acc| match acc {
            CharAccum::Counts(h) => {
                let mut out = Vec::with_capacity(g);
                let mut c = 0u64;
                for v in h {
                    c += v;
                    out.push(c as f64);
                }
                out
            }
            CharAccum::Diff(d) => prefix(&d),
            CharAccum::Dense(dense, _) => dense,
        })
        .collect();

    let extinct = !guard_tripped && beyond_horizon == 0;
    let path = ReplicaPath {
        replica_index: config.replica_index,
        master_seed: config.master_seed,
        w,
        q,
        births: births_cum,
        frontier,
        z,
        char_tracks,
        extinct,
        guard_tripped,
    };
    (path, keep_tree.then_some(tree))
}

/// Closed-form bound on the frontier weight an individual loses to the age
/// cap: the tail of the discounted intensity measure beyond the cap.
pub fn truncation_bias_bound(law: &ReproductionLaw, alpha: f64, age_cap: f64) -> f64 {
    law.laplace_tail(alpha, age_cap)
}

/// Ensemble parameters. `jobs = 0` means one worker per available core.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub horizon: f64,
    pub grid: Vec<f64>,
    pub age_cap: f64,
    pub replicas: usize,
    pub master_seed: u64,
    pub max_births: u64,
    pub jobs: usize,
    pub characteristics: Vec<CharacteristicSpec>,
}

/// A collection of replica paths over a shared grid, in replica-index order.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: Vec<f64>,
    pub horizon: f64,
    pub age_cap: f64,
    pub master_seed: u64,
    pub paths: Vec<ReplicaPath>,
}

impl Ensemble {
    /// Index of the grid point equal to t (within 1e-9).
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        let i = self.grid.partition_point(|&x| x < t - 1e-9);
        (i < self.grid.len() && (self.grid[i] - t).abs() <= 1e-9).then_some(i)
    }

    pub fn guard_tripped_count(&self) -> usize {
        self.paths.iter().filter(|p| p.guard_tripped).count()
    }

    pub fn extinct_count(&self) -> usize {
        self.paths.iter().filter(|p| p.extinct).count()
    }
}

/// Runs `replicas` independent replicas across a worker pool. Workers share
/// only the immutable law and constants; results are merged in replica-index
/// order, so the output is identical for every `jobs` value.
pub fn run_ensemble(
    law: &ReproductionLaw,
    constants: &ModelConstants,
    cfg: &EnsembleConfig,
) -> Ensemble {
    let jobs = if cfg.jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.jobs
    };
    let jobs = jobs.max(1).min(cfg.replicas.max(1));

    let run_one = |index: usize| {
        let sim = SimConfig {
            law,
            horizon: cfg.horizon,
            grid: &cfg.grid,
            age_cap: cfg.age_cap,
            max_births: cfg.max_births,
            master_seed: cfg.master_seed,
            replica_index: index as u64,
        };
        run_replica_with(&sim, constants, &cfg.characteristics)
    };

    let mut slots: Vec<Option<ReplicaPath>> = (0..cfg.replicas).map(|_| None).collect();
    if jobs == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_one(i));
        }
    } else {
        let chunks: Vec<Vec<(usize, ReplicaPath)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|worker| {
                    let run_one = &run_one;
                    scope.spawn(move || {
                        (worker..cfg.replicas)
                            .step_by(jobs)
                            .map(|i| (i, run_one(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for chunk in chunks {
            for (i, path) in chunk {
                slots[i] = Some(path);
            }
        }
    }
    Ensemble {
        grid: cfg.grid.clone(),
        horizon: cfg.horizon,
        age_cap: cfg.age_cap,
        master_seed: cfg.master_seed,
        paths: slots.into_iter().map(Option::unwrap).collect(),
    }
}

/// One increment of the size-biased spine walk: law e^{-alpha x} mu(dx),
/// a probability measure at the Malthusian point. Exact samplers per
/// variant:
///
/// * Poisson ages, rate lambda = alpha: exponential with rate alpha.
/// * Fixed atoms: discrete with mass mult * e^{-alpha age} per atom.
/// * Exponential ages, rate b: exponential with rate b + alpha (the litter
///   mean cancels against the normalization).
/// * Fixed age a: point mass at a.
/// * Uniform ages on [lo, hi]: density proportional to e^{-alpha x} there,
///   inverted in closed form.
pub fn tilted_increment<R: RngCore>(law: &ReproductionLaw, alpha: f64, rng: &mut R) -> f64 {
    let from_age_dist = |dist: &AgeDist, rng: &mut R| match *dist {
        AgeDist::Exponential { mean } => {
            let rate = 1.0 / mean + alpha;
            -unit_open(rng).ln() / rate
        }
        AgeDist::FixedAge { age } => age,
        AgeDist::Uniform { lo, hi } => {
            let elo = (-alpha * lo).exp();
            let ehi = (-alpha * hi).exp();
            let u = unit_open(rng);
            -((elo - u * (elo - ehi)).ln()) / alpha
        }
    };
    match law {
        ReproductionLaw::PoissonAges { .. } => -unit_open(rng).ln() / alpha,
        ReproductionLaw::DeterministicAges { atoms } => {
            let total = law.laplace_m(alpha);
            let mut u = unit_open(rng) * total;
            for &(age, mult) in atoms {
                let mass = mult as f64 * (-alpha * age).exp();
                if u <= mass {
                    return age;
                }
                u -= mass;
            }
            atoms.last().unwrap().0
        }
        ReproductionLaw::BernoulliSplit { lifetime, .. } => from_age_dist(lifetime, rng),
        ReproductionLaw::IidLitter { age, .. } => from_age_dist(age, rng),
    }
}

/// Estimates the expected birth count E[N_t] through the spine walk.
///
/// The exact identity is E[N_t] = sum_{n >= 0} E[e^{alpha S_n} 1{S_n <= t}]
/// over the tilted walk (S_0 = 0 contributes the ancestor term 1). Each walk
/// contributes 1 + sum of e^{alpha S_n} over its points in (0, t]; the
/// estimate is the mean over `n_walks` independent walks with its standard
/// error. (The discrete two-atom law makes the per-walk value deterministic,
/// which pins this reading against direct tree enumeration.)
pub fn many_to_one_mean_nt<R: RngCore>(
    law: &ReproductionLaw,
    constants: &ModelConstants,
    t: f64,
    n_walks: usize,
    rng: &mut R,
) -> Result<(f64, f64), EngineError> {
    let alpha = constants.alpha;
    if alpha * t > 600.0 {
        return Err(EngineError::HorizonTooLarge { alpha_t: alpha * t });
    }
    assert!(n_walks >= 2);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_walks {
        let mut s = 0.0;
        let mut y = 1.0;
        loop {
            s += tilted_increment(law, alpha, rng);
            if s > t {
                break;
            }
            y += (alpha * s).exp();
        }
        sum += y;
        sum_sq += y * y;
    }
    let n = n_walks as f64;
    let mean = sum / n;
    let var = (sum_sq - sum * sum / n) / (n - 1.0);
    Ok((mean, (var.max(0.0) / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::malthusian::{derive_constants, derive_constants_degenerate, DEFAULT_TOL};
    use crate::reproduction::CountDist;
    use crate::rng::aux_rng;
    use crate::stats::mean_se;
    use proptest::prelude::*;

    fn bernoulli_ref() -> ReproductionLaw {
        ReproductionLaw::bernoulli_split(0.75, AgeDist::Exponential { mean: 1.0 }).unwrap()
    }

    fn det_law() -> (ReproductionLaw, ModelConstants) {
        let law = ReproductionLaw::deterministic_ages(&[1.0, 1.0]).unwrap();
        let constants = derive_constants_degenerate(&law, DEFAULT_TOL).unwrap();
        (law, constants)
    }

    #[test]
    fn degenerate_law_is_exact() {
        let (law, constants) = det_law();
        let grid = [0.5, 1.5, 2.5];
        let cfg = SimConfig {
            law: &law,
            horizon: 4.0,
            grid: &grid,
            age_cap: 10.0,
            max_births: 1 << 20,
            master_seed: 1,
            replica_index: 0,
        };
        let path = run_replica(&cfg, &constants);
        assert_eq!(path.w, vec![1.0, 1.0, 1.0]);
        assert_eq!(path.births, vec![1, 3, 7]);
        assert_eq!(path.frontier, vec![2, 4, 8]);
        assert_eq!(path.q, vec![0.5, 0.25, 0.125]);
        // whole generations: exactly 1 through the last complete one
        for n in 0..=5 {
            assert_eq!(path.z_at(n), 1.0, "generation {n}");
        }
        assert_eq!(path.z_at(6), 0.0);
        assert!(!path.extinct && !path.guard_tripped);
        // frontier and generation records coincide when the frontier is a
        // whole generation
        assert_eq!(path.w[0], path.z_at(1));
        assert_eq!(path.w[1], path.z_at(2));
    }

    #[test]
    fn immediate_extinction_path() {
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let grid = [0.0, 1.0, 2.0];
        // find a replica whose first coin comes up childless
        let mut found = None;
        for index in 0..64 {
            let cfg = SimConfig {
                law: &law,
                horizon: 2.0,
                grid: &grid,
                age_cap: 30.0,
                max_births: 1 << 20,
                master_seed: 7,
                replica_index: index,
            };
            let path = run_replica(&cfg, &constants);
            if path.births.last() == Some(&1) {
                found = Some(path);
                break;
            }
        }
        let path = found.expect("no immediately extinct replica among 64");
        assert!(path.extinct);
        assert!(path.w.iter().all(|&w| w == 0.0));
        assert!(path.q.iter().all(|&q| q == 0.0));
        assert_eq!(path.z, vec![1.0]);
        assert_eq!(path.z_at(1), 0.0);
    }

    #[test]
    fn guard_trips_and_flags() {
        let (law, constants) = det_law();
        let grid = [0.5, 6.0];
        let cfg = SimConfig {
            law: &law,
            horizon: 6.0,
            grid: &grid,
            age_cap: 10.0,
            max_births: 10,
            master_seed: 1,
            replica_index: 0,
        };
        let path = run_replica(&cfg, &constants);
        assert!(path.guard_tripped);
        assert!(!path.extinct);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn replica_is_deterministic(seed in any::<u64>(), index in 0u64..32) {
            let law = bernoulli_ref();
            let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
            let grid = [0.0, 1.0, 3.0, 5.0];
            let cfg = SimConfig {
                law: &law,
                horizon: 5.0,
                grid: &grid,
                age_cap: 30.0,
                max_births: 1 << 20,
                master_seed: seed,
                replica_index: index,
            };
            let a = run_replica(&cfg, &constants);
            let b = run_replica(&cfg, &constants);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn frontier_weight_dominates_squared_sum(seed in 0u64..24) {
            let law = bernoulli_ref();
            let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
            let grid = [0.0, 0.7, 1.9, 3.2, 5.0];
            let cfg = SimConfig {
                law: &law,
                horizon: 5.0,
                grid: &grid,
                age_cap: 30.0,
                max_births: 1 << 20,
                master_seed: seed,
                replica_index: 0,
            };
            let path = run_replica(&cfg, &constants);
            for (i, &t) in grid.iter().enumerate() {
                let bound = path.w[i] * (-constants.alpha * t).exp();
                prop_assert!(
                    path.q[i] <= bound * (1.0 + 1e-12) + 1e-300,
                    "Q={} > W e^(-at)={} at t={}", path.q[i], bound, t
                );
            }
        }
    }

    #[test]
    fn ensemble_mean_is_martingale() {
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let cfg = EnsembleConfig {
            horizon: 8.0,
            grid: vec![0.0, 2.0, 4.0, 6.0, 8.0],
            age_cap: law.cap_for_tail(constants.alpha, 1e-9),
            replicas: 4000,
            master_seed: 99,
            max_births: 10_000_000,
            jobs: 0,
            characteristics: vec![],
        };
        let ens = run_ensemble(&law, &constants, &cfg);
        let w_end: Vec<f64> = ens.paths.iter().map(|p| *p.w.last().unwrap()).collect();
        let (mean, se) = mean_se(&w_end);
        assert!((mean - 1.0).abs() <= 4.0 * se, "mean {mean} se {se}");
        // increments centered at zero as well
        let incr: Vec<f64> = ens.paths.iter().map(|p| p.w[3] - p.w[1]).collect();
        let (mi, sei) = mean_se(&incr);
        assert!(mi.abs() <= 4.0 * sei, "increment mean {mi} se {sei}");
    }

    #[test]
    fn ensemble_identical_across_job_counts() {
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let mk = |jobs| EnsembleConfig {
            horizon: 5.0,
            grid: vec![0.0, 2.5, 5.0],
            age_cap: 30.0,
            replicas: 50,
            master_seed: 5,
            max_births: 1 << 20,
            jobs,
            characteristics: vec![],
        };
        let a = run_ensemble(&law, &constants, &mk(1));
        let b = run_ensemble(&law, &constants, &mk(4));
        assert_eq!(a.paths, b.paths);
    }

    #[test]
    fn characteristics_match_their_twins() {
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let grid = [0.0, 1.0, 2.0, 4.0, 6.0];
        let cfg = SimConfig {
            law: &law,
            horizon: 6.0,
            grid: &grid,
            age_cap: 30.0,
            max_births: 1 << 20,
            master_seed: 21,
            replica_index: 3,
        };
        let chars = [
            CharacteristicSpec::BornIndicator,
            CharacteristicSpec::DiscountedFrontier(FrontierWeight::ConstOne),
        ];
        let path = run_replica_with(&cfg, &constants, &chars);
        let counts: Vec<f64> = path.births.iter().map(|&n| n as f64).collect();
        assert_eq!(path.char_tracks[0], counts);
        assert_eq!(path.char_tracks[1], path.q);
    }

    #[test]
    fn tabled_characteristic_interpolates() {
        let table = WeightTable {
            xs: vec![0.0, 1.0, 2.0],
            ys: vec![0.0, 2.0, 2.0],
            left: 0.0,
            right: 2.0,
        };
        assert_eq!(table.eval(-5.0), 0.0);
        assert_eq!(table.eval(0.5), 1.0);
        assert_eq!(table.eval(1.5), 2.0);
        assert_eq!(table.eval(9.0), 2.0);

        // against the const-one track: a table that is identically one must
        // reproduce Q up to interpolation roundoff (it is evaluated per grid
        // cell rather than via the difference array)
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let grid = [0.0, 1.5, 3.0];
        let cfg = SimConfig {
            law: &law,
            horizon: 3.0,
            grid: &grid,
            age_cap: 30.0,
            max_births: 1 << 20,
            master_seed: 8,
            replica_index: 1,
        };
        let ones = WeightTable { xs: vec![], ys: vec![], left: 1.0, right: 1.0 };
        let chars = [CharacteristicSpec::DiscountedFrontier(FrontierWeight::Table(ones))];
        let path = run_replica_with(&cfg, &constants, &chars);
        for (a, b) in path.char_tracks[0].iter().zip(&path.q) {
            assert!((a - b).abs() <= 1e-12 * b.abs() + 1e-300);
        }
    }

    // slow reference: frontier sum over an explicit tree
    fn tree_w_at(tree: &[TreeNode], alpha: f64, s: f64) -> f64 {
        tree.iter()
            .filter_map(|n| n.parent.map(|p| (n, p)))
            .filter(|(n, p)| tree[*p as usize].birth <= s && s < n.birth)
            .map(|(n, _)| (-alpha * n.birth).exp())
            .sum()
    }

    #[test]
    fn event_loop_matches_slow_tree_reference() {
        let law = ReproductionLaw::iid_litter(
            CountDist::Poisson { mean: 2.0 },
            AgeDist::Exponential { mean: 1.0 },
        )
        .unwrap();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let grid: Vec<f64> = (0..=12).map(|i| i as f64 * 0.5).collect();
        for index in 0..8 {
            let cfg = SimConfig {
                law: &law,
                horizon: 6.0,
                grid: &grid,
                age_cap: 40.0,
                max_births: 1 << 20,
                master_seed: 4242,
                replica_index: index,
            };
            let (path, tree) = run_replica_tree(&cfg, &constants, &[]);
            for (i, &t) in grid.iter().enumerate() {
                let slow = tree_w_at(&tree, constants.alpha, t);
                assert!(
                    (slow - path.w[i]).abs() <= 1e-9 * (1.0 + slow.abs()),
                    "replica {index}, t={t}: slow {slow} vs loop {}",
                    path.w[i]
                );
            }
        }
    }

    #[test]
    fn recursive_decomposition_reconstructs_later_values() {
        // W_{t+r} must equal the weighted sum over the coming generation at
        // time t of each member's shifted subtree martingale at the matching
        // lag, up to accumulated rounding.
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let alpha = constants.alpha;
        let grid: Vec<f64> = (0..=14).map(|i| i as f64 * 0.5).collect();
        let mut checked = 0;
        for index in 0..12 {
            let cfg = SimConfig {
                law: &law,
                horizon: 7.0,
                grid: &grid,
                age_cap: 40.0,
                max_births: 1 << 20,
                master_seed: 987,
                replica_index: index,
            };
            let (path, tree) = run_replica_tree(&cfg, &constants, &[]);
            let (t, r) = (2.0, 3.0);
            // descendants per node for the shifted subtree walk
            let subtree_w = |root: u32, s: f64| -> f64 {
                let mut total = 0.0;
                let mut stack = vec![root];
                let root_birth = tree[root as usize].birth;
                while let Some(u) = stack.pop() {
                    for (vi, v) in tree.iter().enumerate() {
                        if v.parent == Some(u) {
                            let parent_rel = tree[u as usize].birth - root_birth;
                            let child_rel = v.birth - root_birth;
                            if parent_rel <= s && s < child_rel {
                                total += (-alpha * child_rel).exp();
                            }
                            if child_rel <= s {
                                stack.push(vi as u32);
                            }
                        }
                    }
                }
                total
            };
            let mut recomposed = 0.0;
            for (vi, v) in tree.iter().enumerate() {
                let Some(p) = v.parent else { continue };
                if tree[p as usize].birth <= t && t < v.birth {
                    recomposed +=
                        (-alpha * v.birth).exp() * subtree_w(vi as u32, r + t - v.birth);
                }
            }
            let direct = path.w[grid.iter().position(|&x| x == t + r).unwrap()];
            assert!(
                (recomposed - direct).abs() <= 1e-9 * (1.0 + direct.abs()),
                "replica {index}: recomposed {recomposed} vs direct {direct}"
            );
            if direct > 0.0 {
                checked += 1;
            }
        }
        assert!(checked >= 3, "too few surviving replicas exercised the check");
    }

    #[test]
    fn truncation_bound_closed_forms() {
        let poisson = ReproductionLaw::poisson_ages(2.0).unwrap();
        let expect = (2.0 / 2.0) * (-2.0 * 5.0f64).exp();
        assert!((truncation_bias_bound(&poisson, 2.0, 5.0) - expect).abs() < 1e-15);

        let det = ReproductionLaw::deterministic_ages(&[1.0, 1.0]).unwrap();
        assert_eq!(truncation_bias_bound(&det, 0.7, 2.0), 0.0);

        let bern = bernoulli_ref();
        let expect = 1.5 * (-(1.5) * 4.0f64).exp() / 1.5;
        assert!((truncation_bias_bound(&bern, 0.5, 4.0) - expect).abs() < 1e-15);
    }

    #[test]
    fn spine_walk_exact_on_lattice_law() {
        let (law, constants) = det_law();
        let mut rng = aux_rng(3, 50);
        let (mean, se) = many_to_one_mean_nt(&law, &constants, 2.5, 100, &mut rng).unwrap();
        assert_eq!(mean, 7.0);
        assert_eq!(se, 0.0);
        let (mean0, _) = many_to_one_mean_nt(&law, &constants, 1e-9, 100, &mut rng).unwrap();
        assert_eq!(mean0, 1.0);
    }

    #[test]
    fn spine_walk_agrees_with_tree_ensemble() {
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let t = 4.0;
        let cfg = EnsembleConfig {
            horizon: t,
            grid: vec![0.0, t],
            age_cap: law.cap_for_tail(constants.alpha, 1e-9),
            replicas: 4000,
            master_seed: 31,
            max_births: 10_000_000,
            jobs: 0,
            characteristics: vec![],
        };
        let ens = run_ensemble(&law, &constants, &cfg);
        let counts: Vec<f64> = ens.paths.iter().map(|p| *p.births.last().unwrap() as f64).collect();
        let (tree_mean, tree_se) = mean_se(&counts);
        let mut rng = aux_rng(32, 51);
        let (walk_mean, walk_se) =
            many_to_one_mean_nt(&law, &constants, t, 40_000, &mut rng).unwrap();
        let combined = (tree_se * tree_se + walk_se * walk_se).sqrt();
        assert!(
            (tree_mean - walk_mean).abs() <= 4.0 * combined,
            "tree {tree_mean}({tree_se}) vs walk {walk_mean}({walk_se})"
        );
    }

    #[test]
    fn discounted_counts_approach_renewal_constant() {
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let t = 10.0;
        let cfg = EnsembleConfig {
            horizon: t,
            grid: vec![0.0, t],
            age_cap: law.cap_for_tail(constants.alpha, 1e-9),
            replicas: 3000,
            master_seed: 77,
            max_births: 10_000_000,
            jobs: 0,
            characteristics: vec![CharacteristicSpec::BornIndicator],
        };
        let ens = run_ensemble(&law, &constants, &cfg);
        let vals: Vec<f64> = ens
            .paths
            .iter()
            .map(|p| (-constants.alpha * t).exp() * p.char_tracks[0][1])
            .collect();
        let (mean, se) = mean_se(&vals);
        let target = 1.0 / (-constants.alpha * constants.m_prime_alpha);
        assert!(
            (mean - target).abs() <= 4.0 * se,
            "mean {mean} se {se} target {target}"
        );
    }

    #[test]
    fn walk_horizon_guard() {
        let law = bernoulli_ref();
        let constants = derive_constants(&law, DEFAULT_TOL).unwrap();
        let mut rng = aux_rng(1, 52);
        assert!(matches!(
            many_to_one_mean_nt(&law, &constants, 2000.0, 10, &mut rng),
            Err(EngineError::HorizonTooLarge { .. })
        ));
    }
}
