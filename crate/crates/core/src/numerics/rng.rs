//! Deterministic counter-based random stream with labeled sub-streams.
//!
//! Every pipeline stage draws from its own sub-stream, so changing how many
//! values one stage consumes never perturbs the draws of another.

/// SplitMix64 stream. Equal seeds yield bit-identical sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, state: seed }
    }

    /// Derive an independent stream from this stream's seed and a label.
    ///
    /// Derivation uses the originating seed, not the current counter, so the
    /// sub-stream does not depend on how much the parent has been consumed.
    pub fn substream(&self, label: &str) -> RngStream {
        let derived = mix64(self.seed ^ fnv1a(label.as_bytes()).wrapping_mul(GOLDEN));
        RngStream::new(derived)
    }

    /// Indexed variant of [`substream`](Self::substream), for per-run seeding.
    pub fn substream_indexed(&self, label: &str, index: u64) -> RngStream {
        let derived = mix64(
            self.seed
                ^ fnv1a(label.as_bytes()).wrapping_mul(GOLDEN)
                ^ mix64(index.wrapping_add(1)),
        );
        RngStream::new(derived)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n), bias-free via rejection.
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

    /// Standard normal via Box-Muller. Draws exactly two uniforms per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Ordered sample of `k` distinct indices from [0, n) without replacement.
    pub fn choose_k(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "choose_k: k > n");
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
            out.push(pool[i]);
        }
        out
    }
}
