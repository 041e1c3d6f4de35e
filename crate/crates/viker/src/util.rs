//! Small numeric and hashing helpers shared across modules.

/// Compensated (Kahan) summation. Dataset-level loss aggregation uses this so
/// the finite-difference oracle is not drowned in accumulation noise.
#[derive(Debug, Clone, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Numerically stable log(sigmoid(x)).
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// FNV-1a over bytes; used to address runs by config hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for &x in &[-5.0f64, -0.5, 0.0, 0.5, 5.0] {
            let naive = (1.0 / (1.0 + (-x).exp())).ln();
            assert!((log_sigmoid(x) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_is_stable_for_extreme_inputs() {
        assert!(log_sigmoid(1000.0).abs() < 1e-300);
        let v = log_sigmoid(-1000.0);
        assert!((v - (-1000.0)).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-3.0, -1.0, 0.0, 2.0, 7.5] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
