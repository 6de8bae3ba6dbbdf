//! Nested multi-rate shape codebooks.
//!
//! All levels share the parent codebook's storage; level `j` is a membership
//! list of parent indices, so a gradient step on a shared codeword moves it at
//! every level that contains it. Level 0 is the full parent codebook and each
//! later level keeps the most-used codewords of the level before it.

use crate::complexity::MulCounter;
use crate::flat_vq::VqLoss;
use crate::shape_quant::{SelectionRule, ShapeCodebook};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NestedCodebookSet {
    parent: ShapeCodebook,
    levels: Vec<Vec<usize>>,
}

impl NestedCodebookSet {
    pub fn new(parent: ShapeCodebook) -> Self {
        let all = (0..parent.len()).collect();
        Self {
            parent,
            levels: vec![all],
        }
    }

    /// Restores a set from stored membership lists, validating the chain.
    pub fn from_levels(parent: ShapeCodebook, levels: Vec<Vec<usize>>) -> Result<Self> {
        let set = Self { parent, levels };
        if set.levels.first().map(|l| l.len()) != Some(set.parent.len()) {
            return Err(Error::State("level 0 must contain the full codebook".into()));
        }
        if !set.chain_holds() {
            return Err(Error::State("stored levels do not form a nested chain".into()));
        }
        Ok(set)
    }

    pub fn parent(&self) -> &ShapeCodebook {
        &self.parent
    }

    pub fn parent_mut(&mut self) -> &mut ShapeCodebook {
        &mut self.parent
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn members(&self, level: usize) -> &[usize] {
        &self.levels[level]
    }

    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    pub fn level_bits(&self, level: usize) -> u32 {
        self.levels[level].len().trailing_zeros()
    }

    /// Standalone copy of one level.
    pub fn level_codebook(&self, level: usize) -> Result<ShapeCodebook> {
        self.parent.subset(&self.levels[level])
    }

    /// Nearest line within `level`. Returns `(position in level, parent index)`.
    pub fn select(&self, v: &[f64], level: usize, rule: SelectionRule, mults: &mut MulCounter) -> (usize, usize) {
        let members = &self.levels[level];
        let k = self.parent.select(v, Some(members), rule, mults);
        let pos = members.iter().position(|&m| m == k).expect("selected index is a member");
        (pos, k)
    }

    /// Every level is a power-of-two-sized, strictly smaller subset of the
    /// level before it.
    pub fn chain_holds(&self) -> bool {
        let k = self.parent.len();
        self.levels.iter().all(|l| l.len().is_power_of_two() && l.iter().all(|&i| i < k))
            && self.levels.windows(2).all(|w| {
                w[1].len() < w[0].len() && w[1].iter().all(|i| w[0].contains(i))
            })
    }

    /// Appends a level of `2^target_bits` codewords chosen from the current
    /// last level by the parent usage counters.
    pub fn push_level(&mut self, target_bits: u32) -> Result<&[usize]> {
        let last = self.levels.last().expect("level 0 always exists");
        let picked = select_among(self.parent.usage(), last, target_bits)?;
        self.levels.push(picked);
        Ok(self.levels.last().unwrap())
    }
}

/// The `2^target_bits` codewords of `cb` with the highest usage counts, ties
/// to the lower index, returned in ascending index order.
pub fn select_nested(cb: &ShapeCodebook, target_bits: u32) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..cb.len()).collect();
    select_among(cb.usage(), &all, target_bits)
}

fn select_among(usage: &[u64], members: &[usize], target_bits: u32) -> Result<Vec<usize>> {
    let want = 1usize << target_bits;
    if want >= members.len() {
        return Err(Error::config(
            "quant.shape_bits",
            format!("target of {want} codewords is not smaller than {}", members.len()),
        ));
    }
    if members.iter().all(|&k| usage[k] == 0) {
        return Err(Error::State("usage counters are empty; run a quantization pass first".into()));
    }
    let mut ranked = members.to_vec();
    ranked.sort_by(|&a, &b| usage[b].cmp(&usage[a]).then(a.cmp(&b)));
    ranked.truncate(want);
    ranked.sort_unstable();
    Ok(ranked)
}

/// Per-level weights `γ^j / Σ_{k=1}^{l} γ^k` for `j = 1..=l`.
pub fn level_weights(gamma: f64, l: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config("train.gamma", format!("{gamma} not in (0, 1]")));
    }
    if l == 0 {
        return Err(Error::Domain("level count must be at least 1".into()));
    }
    let raw: Vec<f64> = (1..=l as i32).map(|j| gamma.powi(j)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Weighted multi-level objective over the first `l` entries of `per_level`.
pub fn nested_loss(per_level: &[VqLoss], gamma: f64, l: usize) -> Result<f64> {
    if l == 0 || l > per_level.len() {
        return Err(Error::Domain(format!(
            "level {l} out of range 1..={}",
            per_level.len()
        )));
    }
    let w = level_weights(gamma, l)?;
    Ok(w.iter().zip(per_level).map(|(w, v)| w * v.total).sum())
}
