//! Counter-based random numbers: a value is a pure function of its coordinates,
//! so any element of any dropout mask can be regenerated without state.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Uniform in `[0, 1)` for element `index` of the stream identified by `key`.
#[inline]
pub fn uniform(key: u64, index: u64) -> f64 {
    let bits = splitmix64(key ^ splitmix64(index));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Identifies one dropout application: reproducible from `(seed, step, layer)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub layer: u64,
}

impl DropoutKey {
    pub fn stream(&self) -> u64 {
        mix(&[self.seed, self.step, self.layer])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_pure_and_in_range() {
        let key = mix(&[1, 2, 3]);
        for i in 0..1000 {
            let u = uniform(key, i);
            assert!((0.0..1.0).contains(&u));
            assert_eq!(u, uniform(key, i));
        }
        assert_ne!(uniform(key, 0), uniform(mix(&[1, 2, 4]), 0));
    }

    #[test]
    fn uniform_mean_is_about_half() {
        let key = mix(&[7]);
        let mean = (0..20_000).map(|i| uniform(key, i)).sum::<f64>() / 20_000.0;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }
}
