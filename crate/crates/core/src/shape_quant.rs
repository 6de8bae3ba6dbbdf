//! Shape (direction) quantizer over a codebook of unit-norm lines.
//!
//! Selection minimizes the chordal distance `sqrt(1 − (u·b)²)`, so `b` and
//! `−b` are the same line. Because the distance is a decreasing function of
//! `|u·b|` and that ratio is scale invariant, selection can run on the raw
//! sub-vector without normalizing it first.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::complexity::MulCounter;
use crate::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Codewords whose norm falls below this after an update are redrawn.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Minimum chordal distance (sign-blind).
    #[default]
    Chordal,
    /// Maximum signed inner product.
    Signed,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn norm_counted(v: &[f64], mults: &mut MulCounter) -> f64 {
    mults.add(v.len() as u64);
    norm(v)
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(Error::Domain(format!("expected unit vector, norm is {n}")));
    }
    Ok(())
}

/// Sine of the angle between two unit vectors, in `[0, 1]`.
pub fn chordal_dist(c1: &[f64], c2: &[f64]) -> Result<f64> {
    if c1.len() != c2.len() {
        return Err(Error::Shape(format!("{} vs {}", c1.len(), c2.len())));
    }
    check_unit(c1)?;
    check_unit(c2)?;
    Ok(chordal_unchecked(c1, c2))
}

fn chordal_unchecked(c1: &[f64], c2: &[f64]) -> f64 {
    let ip = dot(c1, c2);
    (1.0 - ip * ip).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCodebook {
    d: usize,
    b_dir: u32,
    codewords: Vec<f64>,
    usage: Vec<u64>,
}

impl ShapeCodebook {
    /// Builds a codebook from row-major codewords, normalizing each row.
    pub fn from_rows(d: usize, b_dir: u32, mut codewords: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("d", "must be positive"));
        }
        if b_dir > 20 {
            return Err(Error::config("b_dir", "too many bits"));
        }
        let k = 1usize << b_dir;
        if codewords.len() != k * d {
            return Err(Error::Shape(format!(
                "{} values for {k} codewords of dimension {d}",
                codewords.len()
            )));
        }
        for (i, row) in codewords.chunks_mut(d).enumerate() {
            let n = norm(row);
            if n.is_nan() || n <= DEGENERATE_NORM || !n.is_finite() {
                return Err(Error::Degenerate(format!("codeword {i} has norm {n}")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            d,
            b_dir,
            codewords,
            usage: vec![0; k],
        })
    }

    /// Like [`Self::from_rows`] but keeps the values bit-for-bit; every row
    /// must already have unit norm.
    pub fn from_unit_rows(d: usize, b_dir: u32, codewords: Vec<f64>) -> Result<Self> {
        let mut cb = Self::from_rows(d, b_dir, codewords.clone())?;
        for (i, row) in codewords.chunks(d).enumerate() {
            if (norm(row) - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!("codeword {i} is not unit norm")));
            }
        }
        cb.codewords = codewords;
        Ok(cb)
    }

    /// `2^b_dir` independent uniformly random unit vectors.
    pub fn random<R: RngCore>(d: usize, b_dir: u32, rng: &mut R) -> Result<Self> {
        let k = 1usize << b_dir.min(20);
        let mut rows = Vec::with_capacity(k * d);
        for _ in 0..k {
            rows.extend(random_unit(d, rng));
        }
        Self::from_rows(d, b_dir, rows)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> u32 {
        self.b_dir
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

    /// Raw storage for gradient updates. Call [`Self::renormalize`] or
    /// [`Self::renormalize_or_reset`] afterwards.
    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.codewords
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub(crate) fn record_use(&mut self, k: usize) {
        self.usage[k] += 1;
    }

    /// Best codeword for the direction of `v` among `candidates` (all
    /// codewords when `None`). Returns the codebook index; ties go to the
    /// earliest candidate. Does not touch usage counters.
    pub fn select(
        &self,
        v: &[f64],
        candidates: Option<&[usize]>,
        rule: SelectionRule,
        mults: &mut MulCounter,
    ) -> usize {
        let score = |k: usize| {
            let ip = dot(v, self.codeword(k));
            match rule {
                SelectionRule::Chordal => ip.abs(),
                SelectionRule::Signed => ip,
            }
        };
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        let mut consider = |k: usize| {
            let s = score(k);
            if s > best.1 || best.0 == usize::MAX {
                best = (k, s);
            }
        };
        match candidates {
            Some(c) => {
                mults.add((c.len() * self.d) as u64);
                c.iter().for_each(|&k| consider(k));
            }
            None => {
                mults.add((self.len() * self.d) as u64);
                (0..self.len()).for_each(&mut consider);
            }
        }
        best.0
    }

    /// Nearest line to the unit vector `u`; increments its usage counter.
    pub fn quantize_dir(&mut self, u: &[f64], mults: &mut MulCounter) -> Result<(Vec<f64>, usize)> {
        self.quantize_dir_with(u, SelectionRule::Chordal, mults)
    }

    pub fn quantize_dir_with(
        &mut self,
        u: &[f64],
        rule: SelectionRule,
        mults: &mut MulCounter,
    ) -> Result<(Vec<f64>, usize)> {
        if self.is_empty() {
            return Err(Error::State("empty shape codebook".into()));
        }
        if u.len() != self.d {
            return Err(Error::Shape(format!("expected dimension {}, got {}", self.d, u.len())));
        }
        check_unit(u)?;
        let k = self.select(u, None, rule, mults);
        self.record_use(k);
        Ok((self.codeword(k).to_vec(), k))
    }

    /// Rescales every codeword to unit norm.
    pub fn renormalize(&mut self) -> Result<()> {
        for (i, row) in self.codewords.chunks(self.d).enumerate() {
            let n = norm(row);
            if n.is_nan() || n <= DEGENERATE_NORM || !n.is_finite() {
                return Err(Error::Degenerate(format!("codeword {i} has norm {n}")));
            }
        }
        for row in self.codewords.chunks_mut(self.d) {
            let n = norm(row);
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(())
    }

    /// Like [`Self::renormalize`], but codewords that collapsed below
    /// [`DEGENERATE_NORM`] are replaced by fresh random unit vectors.
    /// Returns the number of replaced codewords.
    pub fn renormalize_or_reset<R: RngCore>(&mut self, rng: &mut R) -> usize {
        let d = self.d;
        let mut resets = 0;
        for row in self.codewords.chunks_mut(d) {
            let n = norm(row);
            if n > DEGENERATE_NORM && n.is_finite() {
                row.iter_mut().for_each(|x| *x /= n);
            } else {
                row.copy_from_slice(&random_unit(d, rng));
                resets += 1;
            }
        }
        resets
    }

    pub fn min_pairwise_distance(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(Error::State("need at least two codewords".into()));
        }
        Ok(min_pairwise(&self.codewords, self.d))
    }

    /// Codebook restricted to `indices`, in that order. `indices.len()` must
    /// be a power of two.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if !indices.len().is_power_of_two() {
            return Err(Error::Shape(format!("{} codewords is not a power of two", indices.len())));
        }
        let mut rows = Vec::with_capacity(indices.len() * self.d);
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Shape(format!("index {k} out of range")));
            }
            rows.extend_from_slice(self.codeword(k));
        }
        let mut cb = Self::from_rows(self.d, indices.len().trailing_zeros(), rows)?;
        for (i, &k) in indices.iter().enumerate() {
            cb.usage[i] = self.usage[k];
        }
        Ok(cb)
    }
}

fn min_pairwise(rows: &[f64], d: usize) -> f64 {
    let k = rows.len() / d;
    let mut max_ip = 0.0f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let ip = dot(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]).abs();
            max_ip = max_ip.max(ip);
        }
    }
    (1.0 - max_ip * max_ip).max(0.0).sqrt()
}

pub(crate) fn random_unit<R: RngCore>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PackingSchedule {
    pub iterations: usize,
    pub step: f64,
    /// Log-sum-exp temperature on squared inner products, annealed
    /// geometrically from `t_start` to `t_end`.
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for PackingSchedule {
    fn default() -> Self {
        Self {
            iterations: 3000,
            step: 0.05,
            t_start: 10.0,
            t_end: 2000.0,
        }
    }
}

/// Approximate Grassmannian line packing of `2^b_dir` lines in `R^d`.
pub fn grassmannian_init(d: usize, b_dir: u32, seed: u64) -> Result<ShapeCodebook> {
    grassmannian_init_with(d, b_dir, seed, PackingSchedule::default())
}

/// When the lines fit (`2^b_dir ≤ d`) the result is an orthonormal set.
/// Otherwise random unit vectors are refined by projected gradient descent
/// on a smoothed maximum of the squared pairwise inner products, keeping the
/// best iterate seen.
pub fn grassmannian_init_with(
    d: usize,
    b_dir: u32,
    seed: u64,
    sched: PackingSchedule,
) -> Result<ShapeCodebook> {
    if d < 2 {
        return Err(Error::config("d", "line packing needs d >= 2"));
    }
    if b_dir == 0 || b_dir > 16 {
        return Err(Error::config("b_dir", format!("{b_dir} not in [1, 16]")));
    }
    ShapeCodebook::from_rows(d, b_dir, pack_lines(d, 1 << b_dir, seed, sched)?)
}

/// Packs `k` lines in `R^d`, returned as `k` unit rows.
pub fn pack_lines(d: usize, k: usize, seed: u64, sched: PackingSchedule) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::config("d", "line packing needs d >= 2"));
    }
    if k < 2 {
        return Err(Error::config("k", "need at least two lines"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<f64> = (0..k).flat_map(|_| random_unit(d, &mut rng)).collect();

    if k <= d {
        gram_schmidt(&mut rows, d);
        return Ok(rows);
    }

    let mut best = rows.clone();
    let mut best_dist = min_pairwise(&rows, d);
    let mut grad = vec![0.0; k * d];
    let mut ips = vec![0.0; k * k];
    let ratio = (sched.t_end / sched.t_start).powf(1.0 / sched.iterations.max(1) as f64);
    let mut t = sched.t_start;
    for it in 0..sched.iterations {
        let mut top = 0.0f64;
        for i in 0..k {
            for j in (i + 1)..k {
                let ip = dot(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]);
                ips[i * k + j] = ip;
                top = top.max(ip * ip);
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut z = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                let ip = ips[i * k + j];
                let w = (t * (ip * ip - top)).exp();
                z += w;
                let c = 2.0 * w * ip;
                for m in 0..d {
                    grad[i * d + m] += c * rows[j * d + m];
                    grad[j * d + m] += c * rows[i * d + m];
                }
            }
        }
        let step = sched.step * (1.0 - it as f64 / sched.iterations as f64).max(0.05) / z;
        for i in 0..k {
            let row = &mut rows[i * d..(i + 1) * d];
            let g = &mut grad[i * d..(i + 1) * d];
            let radial = dot(g, row);
            for m in 0..d {
                row[m] -= step * (g[m] - radial * row[m]);
            }
            let n = norm(row);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let dist = min_pairwise(&rows, d);
        if dist > best_dist {
            best_dist = dist;
            best.copy_from_slice(&rows);
        }
        t *= ratio;
    }
    Ok(best)
}

fn gram_schmidt(rows: &mut [f64], d: usize) {
    let k = rows.len() / d;
    for i in 0..k {
        for j in 0..i {
            let (head, tail) = rows.split_at_mut(i * d);
            let prev = &head[j * d..(j + 1) * d];
            let cur = &mut tail[..d];
            let ip = dot(cur, prev);
            cur.iter_mut().zip(prev).for_each(|(c, p)| *c -= ip * p);
        }
        let row = &mut rows[i * d..(i + 1) * d];
        let n = norm(row);
        row.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn chordal_distance_cases() {
        let c = vec![0.6, 0.8];
        assert_relative_eq!(chordal_dist(&c, &c).unwrap(), 0.0, epsilon = 1e-7);
        assert_eq!(chordal_dist(&basis(3, 0), &basis(3, 1)).unwrap(), 1.0);
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        assert_relative_eq!(chordal_dist(&c, &neg).unwrap(), 0.0, epsilon = 1e-7);
        assert!(matches!(chordal_dist(&[1.0, 1.0], &c), Err(Error::Domain(_))));
    }

    #[test]
    fn quantize_exact_and_antipodal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cb = ShapeCodebook::random(4, 3, &mut rng).unwrap();
        let b3 = cb.codeword(3).to_vec();
        let mut ctr = MulCounter::new();
        let (w, k) = cb.quantize_dir(&b3, &mut ctr).unwrap();
        assert_eq!(k, 3);
        assert_eq!(w, b3);
        let neg: Vec<f64> = b3.iter().map(|x| -x).collect();
        let (w, k) = cb.quantize_dir(&neg, &mut ctr).unwrap();
        assert_eq!((k, w), (3, b3));
        assert_eq!(cb.usage()[3], 2);
        assert_eq!(cb.usage().iter().sum::<u64>(), 2);
        assert_eq!(ctr.get(), 2 * 8 * 4);
    }

    #[test]
    fn quantize_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cb = ShapeCodebook::random(4, 3, &mut rng).unwrap();
        for _ in 0..500 {
            let u = random_unit(4, &mut rng);
            let mut best = (0, f64::INFINITY);
            for k in 0..8 {
                let d = chordal_dist(&u, cb.codeword(k)).unwrap();
                if d < best.1 {
                    best = (k, d);
                }
            }
            let (_, k) = cb.quantize_dir(&u, &mut MulCounter::new()).unwrap();
            assert_eq!(k, best.0);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let rows = vec![1.0, 0.0, 0.0, 1.0];
        let mut cb = ShapeCodebook::from_rows(2, 1, rows).unwrap();
        let u = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
        assert_eq!(cb.quantize_dir(&u, &mut MulCounter::new()).unwrap().1, 0);
    }

    #[test]
    fn signed_rule_distinguishes_antipodes() {
        let rows = vec![1.0, 0.0, -1.0, 0.0];
        let cb = ShapeCodebook::from_rows(2, 1, rows).unwrap();
        let mut ctr = MulCounter::new();
        assert_eq!(cb.select(&[-1.0, 0.0], None, SelectionRule::Signed, &mut ctr), 1);
        assert_eq!(cb.select(&[-1.0, 0.0], None, SelectionRule::Chordal, &mut ctr), 0);
    }

    #[test]
    fn non_unit_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb = ShapeCodebook::random(3, 2, &mut rng).unwrap();
        let r = cb.quantize_dir(&[1.0, 1.0, 0.0], &mut MulCounter::new());
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn renormalize_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cb = ShapeCodebook::random(5, 3, &mut rng).unwrap();
        let before = cb.clone();
        cb.renormalize().unwrap();
        for (a, b) in cb.as_flat().iter().zip(before.as_flat()) {
            assert!((a - b).abs() < 1e-12);
        }

        let orig = cb.codeword(2).to_vec();
        cb.as_flat_mut()[10..15].iter_mut().for_each(|x| *x *= 5.0);
        cb.renormalize().unwrap();
        for (a, b) in cb.codeword(2).iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }

        for x in cb.as_flat_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        cb.renormalize().unwrap();
        for k in 0..cb.len() {
            let n = norm(cb.codeword(k));
            assert!((n - 1.0).abs() <= 1e-12);
        }

        cb.as_flat_mut()[0..5].iter_mut().for_each(|x| *x = 0.0);
        assert!(matches!(cb.renormalize(), Err(Error::Degenerate(_))));
        assert_eq!(cb.renormalize_or_reset(&mut rng), 1);
        assert!((norm(cb.codeword(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_pairwise_cases() {
        let ortho = ShapeCodebook::from_rows(2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ortho.min_pairwise_distance().unwrap(), 1.0);
        let dup = ShapeCodebook::from_rows(2, 1, vec![0.6, 0.8, -0.6, -0.8]).unwrap();
        assert!(dup.min_pairwise_distance().unwrap() < 1e-7);
        let single = ShapeCodebook::from_rows(2, 0, vec![1.0, 0.0]).unwrap();
        assert!(matches!(single.min_pairwise_distance(), Err(Error::State(_))));
    }

    #[test]
    fn two_lines_in_plane_are_orthogonal() {
        let cb = grassmannian_init(2, 1, 5).unwrap();
        assert!(cb.min_pairwise_distance().unwrap() >= 0.999);
    }

    #[test]
    fn orthonormal_when_lines_fit() {
        for (d, b) in [(4, 2), (8, 3), (16, 4), (5, 2)] {
            let cb = grassmannian_init(d, b, 3).unwrap();
            assert!((cb.min_pairwise_distance().unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn packing_is_deterministic() {
        let a = grassmannian_init(4, 3, 9).unwrap();
        let b = grassmannian_init(4, 3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn packing_rejects_bad_sizes() {
        assert!(matches!(grassmannian_init(1, 2, 0), Err(Error::Config { .. })));
        assert!(matches!(grassmannian_init(4, 0, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn subset_keeps_rows_and_usage() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cb = ShapeCodebook::random(3, 3, &mut rng).unwrap();
        cb.record_use(5);
        let sub = cb.subset(&[5, 1]).unwrap();
        assert_eq!(sub.codeword(0), cb.codeword(5));
        assert_eq!(sub.usage(), &[1, 0]);
        assert!(cb.subset(&[0, 1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn selection_is_optimal_and_sign_blind(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cb = ShapeCodebook::random(6, 4, &mut rng).unwrap();
            let u = random_unit(6, &mut rng);
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            let (w, k) = cb.quantize_dir(&u, &mut MulCounter::new()).unwrap();
            let (_, k2) = cb.quantize_dir(&neg, &mut MulCounter::new()).unwrap();
            prop_assert_eq!(k, k2);
            let best = chordal_dist(&u, &w).unwrap();
            for j in 0..cb.len() {
                prop_assert!(best <= chordal_dist(&u, cb.codeword(j)).unwrap());
            }
        }
    }
}
