//! Adaptive alternative training: the annealed case schedule, pair pools and
//! the per-step case sampler.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpnError};

#[derive(Clone, Debug, PartialEq)]
pub struct AatConfig {
    /// Lower bound of the supervised-case probability.
    pub p1_floor: f64,
    /// Annealing exponent.
    pub t: f64,
    /// Step at which the floor is reached.
    pub i_max: u64,
    pub seed: u64,
}

impl Default for AatConfig {
    fn default() -> Self {
        AatConfig { p1_floor: 1.0 / 3.0, t: 0.4, i_max: 1, seed: 0 }
    }
}

impl AatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p1_floor > 0.0 && self.p1_floor <= 1.0) {
            return Err(SpnError::InvalidArgument(format!("p1 floor {} outside (0, 1]", self.p1_floor)));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(SpnError::InvalidArgument(format!("t = {} must be positive", self.t)));
        }
        if self.i_max == 0 {
            return Err(SpnError::InvalidArgument("i_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// `max(1 - (1 - P1) (i / i_max)^t, P1)`.
pub fn p1(i: u64, cfg: &AatConfig) -> f64 {
    if i >= cfg.i_max {
        return cfg.p1_floor;
    }
    let frac = i as f64 / cfg.i_max as f64;
    (1.0 - (1.0 - cfg.p1_floor) * frac.powf(cfg.t)).max(cfg.p1_floor)
}

/// `(p1, p2, p3)` with `p2 = p3 = (1 - p1) / 2`.
pub fn case_probabilities(i: u64, cfg: &AatConfig) -> [f64; 3] {
    let p = p1(i, cfg);
    let rest = (1.0 - p) / 2.0;
    [p, rest, rest]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Case {
    /// Both frames labeled.
    Supervised,
    /// Neither frame labeled.
    Unsupervised,
    /// Frame `m` labeled, frame `n` not.
    SemiSupervised,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::Supervised, Case::Unsupervised, Case::SemiSupervised];

    pub fn index(self) -> usize {
        match self {
            Case::Supervised => 0,
            Case::Unsupervised => 1,
            Case::SemiSupervised => 2,
        }
    }

    /// 1-based number used in logs.
    pub fn number(self) -> usize {
        self.index() + 1
    }
}

/// Two frames `m`, `n` of one video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub video: usize,
    pub m: usize,
    pub n: usize,
}

/// Frame indices of one video available for pairing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameSets {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairPools {
    pub pools: [Vec<Pair>; 3],
}

impl PairPools {
    pub fn get(&self, case: Case) -> &[Pair] {
        &self.pools[case.index()]
    }
}

fn unordered_pairs(v: usize, frames: &[usize], out: &mut Vec<Pair>) {
    for (a, &m) in frames.iter().enumerate() {
        for &n in &frames[a + 1..] {
            out.push(Pair { video: v, m, n });
        }
    }
}

/// Eligible pair space per case across all videos.
pub fn pair_space(videos: &[FrameSets]) -> [Vec<Pair>; 3] {
    let mut space: [Vec<Pair>; 3] = Default::default();
    for (v, f) in videos.iter().enumerate() {
        unordered_pairs(v, &f.labeled, &mut space[0]);
        unordered_pairs(v, &f.unlabeled, &mut space[1]);
        for &m in &f.labeled {
            for &n in &f.unlabeled {
                space[2].push(Pair { video: v, m, n });
            }
        }
    }
    space
}

/// Samples `count` same-video pairs per required case, uniformly with
/// replacement from the eligible pair space. The frame order of supervised and
/// unsupervised pairs is randomised; semi-supervised pairs always present the
/// labeled frame as `m`. Cases not required get an empty pool.
pub fn build_pools(videos: &[FrameSets], count: usize, required: [bool; 3], rng: &mut ChaCha8Rng) -> Result<PairPools> {
    let space = pair_space(videos);
    let mut pools = PairPools::default();
    for case in Case::ALL {
        let c = case.index();
        if !required[c] {
            continue;
        }
        if space[c].is_empty() {
            let need = match case {
                Case::Supervised => "two labeled frames in one video",
                Case::Unsupervised => "two unlabeled frames in one video",
                Case::SemiSupervised => "a labeled and an unlabeled frame in one video",
            };
            return Err(SpnError::Data(format!("case {} needs {need}", case.number())));
        }
        pools.pools[c] = (0..count)
            .map(|_| {
                let mut p = space[c][rng.gen_range(0..space[c].len())];
                if case != Case::SemiSupervised && rng.gen_bool(0.5) {
                    std::mem::swap(&mut p.m, &mut p.n);
                }
                p
            })
            .collect();
    }
    Ok(pools)
}

/// Draws a case per step and walks each pool in a per-pass shuffled order.
#[derive(Clone, Debug)]
pub struct CaseSampler {
    pools: PairPools,
    case_rng: ChaCha8Rng,
    pool_rngs: [ChaCha8Rng; 3],
    orders: [Vec<usize>; 3],
    cursors: [usize; 3],
}

impl CaseSampler {
    pub fn new(pools: PairPools, seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let mut sampler = CaseSampler {
            orders: Default::default(),
            cursors: [0; 3],
            case_rng: stream(0),
            pool_rngs: [stream(1), stream(2), stream(3)],
            pools,
        };
        for c in 0..3 {
            sampler.reshuffle(c);
        }
        sampler
    }

    fn reshuffle(&mut self, c: usize) {
        let mut order: Vec<usize> = (0..self.pools.pools[c].len()).collect();
        order.shuffle(&mut self.pool_rngs[c]);
        self.orders[c] = order;
        self.cursors[c] = 0;
    }

    pub fn pools(&self) -> &PairPools {
        &self.pools
    }

    /// Draws the case for step `i`.
    pub fn sample_case(&mut self, i: u64, cfg: &AatConfig) -> Result<Case> {
        let [p1, p2, _] = case_probabilities(i, cfg);
        let u: f64 = self.case_rng.gen();
        let case = if u < p1 {
            Case::Supervised
        } else if u < p1 + p2 {
            Case::Unsupervised
        } else {
            Case::SemiSupervised
        };
        if self.pools.get(case).is_empty() {
            return Err(SpnError::Data(format!("case {} drawn but its pair pool is empty", case.number())));
        }
        Ok(case)
    }

    /// Next pair of `case`, without replacement within a pass over the pool.
    pub fn next_pair(&mut self, case: Case) -> Result<Pair> {
        let c = case.index();
        if self.pools.pools[c].is_empty() {
            return Err(SpnError::Data(format!("case {} pair pool is empty", case.number())));
        }
        if self.cursors[c] == self.orders[c].len() {
            self.reshuffle(c);
        }
        let p = self.pools.pools[c][self.orders[c][self.cursors[c]]];
        self.cursors[c] += 1;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg(i_max: u64) -> AatConfig {
        AatConfig { i_max, ..Default::default() }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(1000);
        assert_eq!(p1(0, &c), 1.0);
        assert_eq!(p1(1000, &c), 1.0 / 3.0);
        assert_eq!(p1(5000, &c), 1.0 / 3.0);
        assert!((p1(500, &c) - (1.0 - (2.0 / 3.0) * 0.5f64.powf(0.4))).abs() < 1e-15);
        assert!((p1(500, &c) - 0.494_761_144_496_534).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_and_normalised() {
        let c = cfg(10_000);
        let mut prev = f64::INFINITY;
        for i in 0..=10_000 {
            let p = case_probabilities(i, &c);
            assert!(p[0] <= prev && p[0] >= c.p1_floor && p[0] <= 1.0);
            assert_eq!(p[1], p[2]);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= f64::EPSILON);
            prev = p[0];
        }
        let slow = AatConfig { t: 0.8, ..c.clone() };
        for i in [1, 100, 5000, 9999] {
            assert!(p1(i, &slow) > p1(i, &c));
        }
    }

    fn videos() -> Vec<FrameSets> {
        vec![
            FrameSets { labeled: vec![0, 3, 7], unlabeled: vec![1, 2, 4] },
            FrameSets { labeled: vec![2], unlabeled: vec![0, 1] },
            FrameSets { labeled: vec![], unlabeled: vec![5] },
        ]
    }

    #[test]
    fn pools_have_exact_size_and_respect_labels() {
        let vs = videos();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pools = build_pools(&vs, 10, [true; 3], &mut rng).unwrap();
        for case in Case::ALL {
            assert_eq!(pools.get(case).len(), 10);
            for p in pools.get(case) {
                let f = &vs[p.video];
                let (lm, ln) = (f.labeled.contains(&p.m), f.labeled.contains(&p.n));
                assert!(f.labeled.contains(&p.m) || f.unlabeled.contains(&p.m));
                assert!(f.labeled.contains(&p.n) || f.unlabeled.contains(&p.n));
                assert_ne!(p.m, p.n);
                match case {
                    Case::Supervised => assert!(lm && ln),
                    Case::Unsupervised => assert!(!lm && !ln),
                    Case::SemiSupervised => assert!(lm && !ln),
                }
            }
        }
        let mut again = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(build_pools(&vs, 10, [true; 3], &mut again).unwrap(), pools);
    }

    #[test]
    fn labels_only_dataset() {
        let vs = vec![FrameSets { labeled: vec![0, 1, 2], unlabeled: vec![] }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_pools(&vs, 5, [true; 3], &mut rng).is_err());
        let pools = build_pools(&vs, 5, [true, false, false], &mut rng).unwrap();
        assert!(pools.get(Case::Unsupervised).is_empty() && pools.get(Case::SemiSupervised).is_empty());
        let mut s = CaseSampler::new(pools, 1);
        let c = AatConfig { p1_floor: 1.0, ..cfg(10) };
        for i in 0..100 {
            assert_eq!(s.sample_case(i, &c).unwrap(), Case::Supervised);
        }
    }

    #[test]
    fn step_zero_is_always_supervised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pools = build_pools(&videos(), 20, [true; 3], &mut rng).unwrap();
        let mut s = CaseSampler::new(pools, 3);
        for _ in 0..1000 {
            assert_eq!(s.sample_case(0, &cfg(100)).unwrap(), Case::Supervised);
        }
    }

    #[test]
    fn empirical_case_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pools = build_pools(&videos(), 20, [true; 3], &mut rng).unwrap();
        let mut s = CaseSampler::new(pools, 4);
        let c = AatConfig { p1_floor: 0.5, ..cfg(10) };
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[s.sample_case(50, &c).unwrap().index()] += 1;
        }
        for (k, want) in [0.5, 0.25, 0.25].iter().enumerate() {
            assert!((counts[k] as f64 / n as f64 - want).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn pairs_without_replacement_within_a_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pools = build_pools(&videos(), 12, [true; 3], &mut rng).unwrap();
        let mut s = CaseSampler::new(pools.clone(), 5);
        for _ in 0..3 {
            let mut seen = HashSet::new();
            for _ in 0..12 {
                s.next_pair(Case::Supervised).unwrap();
                seen.insert(s.orders[0][s.cursors[0] - 1]);
            }
            assert_eq!(seen.len(), 12);
        }
    }
}
