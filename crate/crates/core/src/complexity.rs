//! Multiplication accounting for the quantization stage.
//!
//! Counting convention: every scalar multiplication or division performed
//! while mapping a sub-vector to its indices counts once. Square roots,
//! logarithms and table lookups are not multiplications. Reconstruction
//! (`gain · codeword`) happens at the receiver and is not counted, matching
//! flat VQ where the codeword is read from the table.
//!
//! The counters are incremented inside the quantizers themselves; the
//! closed-form expressions here are checked against them in tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flat_vq::FlatCodebook;
use crate::gain_quant::{GainQuantizer, GainQuantizerConfig};
use crate::shape_quant::{SelectionRule, ShapeCodebook};
use crate::Result;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MulCounter {
    count: u64,
}

impl MulCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, n: u64) {
        self.count += n;
    }

    pub fn get(&self) -> u64 {
        self.count
    }

    pub fn reset(&mut self) {
        self.count = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    /// One flat codebook of `2^bits` codewords.
    Flat { bits: u32 },
    ShapeGain { mag_bits: u32, dir_bits: u32 },
}

/// Gain path: `D` squares for the norm, two scalings in the μ-law transform
/// and one scaling to the uniform cell index.
pub fn gain_path_mults(d: usize) -> u64 {
    d as u64 + 3
}

/// Closed-form multiplications per sub-vector.
pub fn count_multiplications(kind: QuantizerKind, d: usize) -> u64 {
    match kind {
        QuantizerKind::Flat { bits } => d as u64 * (1u64 << bits),
        QuantizerKind::ShapeGain { dir_bits, .. } => {
            d as u64 * (1u64 << dir_bits) + gain_path_mults(d)
        }
    }
}

/// Breakdown of an instrumented shape-gain quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeGainCount {
    pub gain: u64,
    pub direction: u64,
}

impl ShapeGainCount {
    pub fn total(&self) -> u64 {
        self.gain + self.direction
    }
}

/// Runs the real quantizers on one random sub-vector and reports the
/// counters they recorded.
pub fn measure_shape_gain(d: usize, mag_bits: u32, dir_bits: u32, seed: u64) -> Result<ShapeGainCount> {
    let gain = GainQuantizer::new(GainQuantizerConfig {
        b_mag: mag_bits,
        d,
        ..GainQuantizerConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = ShapeCodebook::random(d, dir_bits, &mut rng)?;
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut gain_ctr = MulCounter::new();
    let norm = crate::shape_quant::norm_counted(&v, &mut gain_ctr);
    gain.quantize_counted(norm, &mut gain_ctr)?;

    let mut dir_ctr = MulCounter::new();
    cb.select(&v, None, SelectionRule::Chordal, &mut dir_ctr);
    Ok(ShapeGainCount {
        gain: gain_ctr.get(),
        direction: dir_ctr.get(),
    })
}

pub fn measure_flat(d: usize, bits: u32, seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cb = FlatCodebook::init_normal(d, bits, &mut rng)?;
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut ctr = MulCounter::new();
    cb.nearest_codeword(&v, &mut ctr)?;
    Ok(ctr.get())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub bits: u32,
    pub mag_bits: u32,
    pub dir_bits: u32,
    pub flat: u64,
    pub shape_gain: u64,
}

impl ComplexityRow {
    pub fn ratio(&self) -> f64 {
        self.flat as f64 / self.shape_gain as f64
    }
}

/// Instrumented counts for every total budget in `bits`, splitting each as
/// `mag_bits + (bits − mag_bits)`.
pub fn sweep(d: usize, mag_bits: u32, bits: impl IntoIterator<Item = u32>) -> Result<Vec<ComplexityRow>> {
    bits.into_iter()
        .filter(|&b| b > mag_bits)
        .map(|b| {
            let dir_bits = b - mag_bits;
            Ok(ComplexityRow {
                bits: b,
                mag_bits,
                dir_bits,
                flat: measure_flat(d, b, 0)?,
                shape_gain: measure_shape_gain(d, mag_bits, dir_bits, 0)?.total(),
            })
        })
        .collect()
}
