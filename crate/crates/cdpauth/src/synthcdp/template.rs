use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::img::Pixels;
use crate::rng;

/// Minimum template side length.
pub const MIN_SIDE: usize = 8;

/// A digital CDP design: a square grid of bits, 1 = ink, 0 = paper.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryTemplate {
    pub bits: Array2<u8>,
    pub template_id: u64,
}

impl BinaryTemplate {
    pub fn new(bits: Array2<u8>, template_id: u64) -> Result<Self> {
        let (h, w) = bits.dim();
        if h != w || h < MIN_SIDE {
            return Err(Error::invalid_argument(format!(
                "template must be square with side >= {MIN_SIDE}, got {h}x{w}"
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid_argument("template pixels must be 0 or 1"));
        }
        Ok(Self { bits, template_id })
    }

    pub fn side(&self) -> usize {
        self.bits.nrows()
    }

    /// Renders the template as an ideal print: ink bit 1 maps to dark 0.0,
    /// paper bit 0 to light 1.0. This is the reference image similarity
    /// metrics compare probes against.
    pub fn to_ideal_print(&self) -> Pixels {
        self.bits.mapv(|b| 1.0 - b as f64)
    }

    /// Fraction of ink bits.
    pub fn ink_fraction(&self) -> f64 {
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / (self.side() * self.side()) as f64
    }
}

/// Generates a maximum-entropy binary template: each bit i.i.d. Bernoulli(0.5)
/// under the seeded stream. Deterministic for fixed `(seed, side)`.
pub fn gen_template(seed: u64, side: usize) -> Result<BinaryTemplate> {
    if side < MIN_SIDE {
        return Err(Error::invalid_argument(format!(
            "template side must be >= {MIN_SIDE}, got {side}"
        )));
    }
    let mut rng = rng::stream(seed);
    let mut bits = Array2::zeros((side, side));
    for b in bits.iter_mut() {
        *b = rng.gen_range(0..2u8);
    }
    BinaryTemplate::new(bits, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_template(0, 32).unwrap();
        let b = gen_template(0, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ink_fraction_near_half() {
        // Binomial bound: 4096 trials, 3 sigma ~= 0.023, so 0.05 is safe.
        let t = gen_template(0, 64).unwrap();
        assert!((t.ink_fraction() - 0.5).abs() < 0.05);
    }

    #[test]
    fn side_below_minimum_is_rejected() {
        assert!(matches!(
            gen_template(0, 4),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ideal_print_inverts_bits() {
        let t = gen_template(3, 8).unwrap();
        let p = t.to_ideal_print();
        for ((r, c), &bit) in t.bits.indexed_iter() {
            assert_eq!(p[[r, c]], 1.0 - bit as f64);
        }
    }
}
