//! Brute-force and Monte-Carlo references shared by the integration tests
//! and the acceptance report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sgvq_core::complexity::MulCounter;
use sgvq_core::gain_quant::{GainQuantizer, GainQuantizerConfig};
use sgvq_core::nested::NestedCodebookSet;
use sgvq_core::scalar::scalar_ablation_quantize;
use sgvq_core::shape_quant::{SelectionRule, ShapeCodebook};
use sgvq_core::trainer::quantize_latent;

/// Best min chordal distance of three lines in the plane, found by scanning
/// the two free angles on a grid of `steps` points over `[0, π)`.
pub fn best_three_lines_2d(steps: usize) -> f64 {
    let h = std::f64::consts::PI / steps as f64;
    let mut best: f64 = 0.0;
    for i in 0..steps {
        for j in i..steps {
            let (a, b) = (i as f64 * h, j as f64 * h);
            let m = a.sin().abs().min(b.sin().abs()).min((b - a).sin().abs());
            best = best.max(m);
        }
    }
    best
}

/// Median min pairwise chordal distance over `n` random unit codebooks.
pub fn median_random_min_dist(d: usize, b_dir: u32, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dists: Vec<f64> = (0..n)
        .map(|_| {
            ShapeCodebook::random(d, b_dir, &mut rng)
                .unwrap()
                .min_pairwise_distance()
                .unwrap()
        })
        .collect();
    dists.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

/// Mean squared error of 1-bit scalar and 3 + 5 bit shape-gain quantization
/// of `draws` latents in `R^8` that lie in a random plane. The shape
/// codebook is 32 directions spread evenly around that plane.
pub fn scalar_vs_shape_gain(draws: usize, seed: u64) -> (f64, f64) {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormal_pair(d, &mut rng);
    let (p, q) = (&basis.0, &basis.1);
    let rows: Vec<f64> = (0..32)
        .flat_map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / 32.0;
            (0..d).map(move |t| phi.cos() * p[t] + phi.sin() * q[t]).collect::<Vec<_>>()
        })
        .collect();
    let set = NestedCodebookSet::new(ShapeCodebook::from_rows(d, 5, rows).unwrap());
    let gain = GainQuantizer::new(GainQuantizerConfig {
        d,
        b_mag: 3,
        ..GainQuantizerConfig::default()
    })
    .unwrap();
    let clip = gain.clip_threshold();

    let (mut e_scalar, mut e_sg) = (0.0, 0.0);
    for _ in 0..draws {
        let g = rng.random_range(0.02..clip);
        let phi = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let z: Vec<f64> = (0..d).map(|t| g * (phi.cos() * basis.0[t] + phi.sin() * basis.1[t])).collect();
        let zs = scalar_ablation_quantize(&z, 1, 255.0).unwrap();
        let (zg, _) = quantize_latent(&z, &gain, &set, 0, SelectionRule::Signed, &mut MulCounter::new()).unwrap();
        e_scalar += sq_dist(&z, &zs);
        e_sg += sq_dist(&z, &zg);
    }
    (e_scalar / draws as f64, e_sg / draws as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn orthonormal_pair(d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let p: Vec<f64> = unit((0..d).map(|_| rng.sample(StandardNormal)).collect());
    let q: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let ip: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    let q = unit(q.iter().zip(&p).map(|(b, a)| b - ip * a).collect());
    (p, q)
}
