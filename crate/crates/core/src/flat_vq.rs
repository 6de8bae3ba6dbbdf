//! Flat VQ-VAE baseline: one Euclidean codebook of `2^B` codewords shared
//! by all sub-vectors.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::complexity::MulCounter;
use crate::{Error, Result};

pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatCodebook {
    d: usize,
    bits: u32,
    codewords: Vec<f64>,
    usage: Vec<u64>,
}

impl FlatCodebook {
    pub fn from_rows(d: usize, bits: u32, codewords: Vec<f64>) -> Result<Self> {
        if d == 0 || bits > 20 {
            return Err(Error::config("flat_bits", "invalid flat codebook size"));
        }
        let k = 1usize << bits;
        if codewords.len() != k * d {
            return Err(Error::Shape(format!(
                "{} values for {k} codewords of dimension {d}",
                codewords.len()
            )));
        }
        if codewords.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite codeword entry".into()));
        }
        Ok(Self {
            d,
            bits,
            codewords,
            usage: vec![0; k],
        })
    }

    /// Entries drawn from `N(0, 1)` scaled by [`INIT_SCALE`].
    pub fn init_normal<R: RngCore>(d: usize, bits: u32, rng: &mut R) -> Result<Self> {
        let k = 1usize << bits.min(20);
        let rows = (0..k * d)
            .map(|_| INIT_SCALE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_rows(d, bits, rows)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.usage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.usage.is_empty()
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        &self.codewords[k * self.d..(k + 1) * self.d]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.codewords
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.codewords
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Index of the codeword closest in Euclidean distance, ties to the
    /// lowest index. Does not touch usage counters.
    pub fn select(&self, z: &[f64], mults: &mut MulCounter) -> usize {
        mults.add((self.len() * self.d) as u64);
        let mut best = (0, f64::INFINITY);
        for (k, row) in self.codewords.chunks(self.d).enumerate() {
            let dist: f64 = z.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }

    pub fn nearest_codeword(&mut self, z: &[f64], mults: &mut MulCounter) -> Result<(Vec<f64>, usize)> {
        if z.len() != self.d {
            return Err(Error::Shape(format!("expected dimension {}, got {}", self.d, z.len())));
        }
        let k = self.select(z, mults);
        self.usage[k] += 1;
        Ok((self.codeword(k).to_vec(), k))
    }

    pub(crate) fn record_use(&mut self, k: usize) {
        self.usage[k] += 1;
    }
}

/// The three terms of the VQ-VAE objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VqLoss {
    pub total: f64,
    pub recon: f64,
    /// `‖sg(z) − z_q‖²`, drives the codebook.
    pub codebook: f64,
    /// `β‖z − sg(z_q)‖²`, drives the encoder.
    pub commit: f64,
}

/// `recon + ‖sg(z) − z_q‖² + β‖z − sg(z_q)‖²`, evaluated on values.
pub fn vq_loss(recon_err: f64, z: &[f64], z_q: &[f64], beta: f64) -> Result<VqLoss> {
    if z.len() != z_q.len() {
        return Err(Error::Shape(format!("{} vs {}", z.len(), z_q.len())));
    }
    let sq: f64 = z.iter().zip(z_q).map(|(a, b)| (a - b) * (a - b)).sum();
    let commit = beta * sq;
    Ok(VqLoss {
        total: recon_err + sq + commit,
        recon: recon_err,
        codebook: sq,
        commit,
    })
}

/// Forward value of the straight-through estimator `z + sg(z_q − z)`, which
/// is `z_q` itself. See [`crate::nnet::Tape::straight_through`] for the
/// differentiable form.
pub fn straight_through(z: &[f64], z_q: &[f64]) -> Result<Vec<f64>> {
    if z.len() != z_q.len() {
        return Err(Error::Shape(format!("{} vs {}", z.len(), z_q.len())));
    }
    Ok(z_q.to_vec())
}
