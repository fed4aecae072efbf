//! Seeded, portable random number generation.
//!
//! The generator is xoshiro256++ seeded through SplitMix64, both fixed
//! published algorithms implemented with pure integer arithmetic, so a seed
//! reproduces the identical stream on every platform. Independent substreams
//! (per resample, per tree, per permutation replicate) come from
//! [`derive_seed`], the one splitting rule used everywhere in this crate.

/// Tags namespacing every [`derive_seed`] call site in the crate. Public so
/// external code can re-derive any substream from a run's master seed.
pub mod tags {
    pub const MODEL_INIT: u64 = 1;
    pub const EPOCH_SHUFFLE: u64 = 2;
    pub const KMEANS_RESTART: u64 = 3;
    pub const CONSENSUS_RESAMPLE: u64 = 4;
    pub const CONSENSUS_KMEANS: u64 = 5;
    pub const SELECT_K: u64 = 6;
    pub const LOGRANK_PERMUTATION: u64 = 7;
    pub const FOREST_TREE: u64 = 8;
    pub const SIMULATE_MEANS: u64 = 9;
    pub const SIMULATE_NOISE: u64 = 10;
    pub const SIMULATE_SURVIVAL: u64 = 11;
    pub const SIMULATE_COVARIATES: u64 = 12;
    pub const PIPELINE_MODEL: u64 = 13;
    pub const PIPELINE_CLUSTER: u64 = 14;
    pub const PIPELINE_EVALUATE: u64 = 15;
    pub const PIPELINE_FOREST: u64 = 16;
    pub const PIPELINE_SIMULATE: u64 = 17;
}

/// SplitMix64 finalizer; also used as the mixing step of [`derive_seed`].
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a master seed.
///
/// Rule: run SplitMix64 over the sequence `master, tag, index`, feeding each
/// output back as state. `tag` namespaces the consumer (one constant per call
/// site), `index` numbers replicates within it. Documented so external code
/// (tests, reproductions) can derive the same substreams.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut state = master;
    let a = splitmix64(&mut state);
    state = a ^ tag;
    let b = splitmix64(&mut state);
    state = b ^ index;
    splitmix64(&mut state)
}

/// xoshiro256++ generator with explicit 64-bit seeding.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    seed: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            state,
            seed,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via the Marsaglia polar method (pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    /// Uniform integer in [0, n) via rejection sampling (unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from [0, n), returned in ascending order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}
