//! One check per acceptance criterion. Each returns whether it holds and a
//! short summary of the measured values.

use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgvq_core::complexity::{count_multiplications, measure_flat, measure_shape_gain, QuantizerKind};
use sgvq_core::config::{CodebookInit, ExperimentConfig, Mode};
use sgvq_core::csi_data::{gen_channels, to_angular_delay, to_spatial_frequency, ChannelSample};
use sgvq_core::formats::{decode_dataset, encode_dataset, round_to_f32, Checkpoint};
use sgvq_core::gain_quant::{GainQuantizer, GainQuantizerConfig};
use sgvq_core::nested::level_weights;
use sgvq_core::shape_quant::{grassmannian_init, pack_lines, PackingSchedule};
use sgvq_core::trainer::Trainer;

use super::gradref::max_rel_error;
use super::oracles::{best_three_lines_2d, median_random_min_dist};

pub const SEEDS: [u64; 3] = [1, 2, 3];

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub fn complexity() -> Outcome {
    let mut exact = true;
    for d in [2, 4, 8, 16] {
        for b in 1..=8u32 {
            exact &= measure_flat(d, b, 3).unwrap() == count_multiplications(QuantizerKind::Flat { bits: b }, d);
            exact &= measure_flat(d, b, 3).unwrap() == (d as u64) << b;
            for b_mag in 1..b {
                let m = measure_shape_gain(d, b_mag, b - b_mag, 3).unwrap();
                exact &= m.direction == (d as u64) << (b - b_mag);
                exact &= m.total()
                    == count_multiplications(QuantizerKind::ShapeGain { mag_bits: b_mag, dir_bits: b - b_mag }, d);
            }
        }
    }
    let flat = measure_flat(16, 8, 0).unwrap();
    let sg = measure_shape_gain(16, 4, 4, 0).unwrap().total();
    let ratio = flat as f64 / sg as f64;
    Outcome::new(
        exact && ratio >= 12.0,
        format!("counts exact: {exact}; D=16 B=8: flat {flat}, shape-gain {sg}, ratio {ratio:.2}"),
    )
}

pub fn packing() -> Outcome {
    let oracle = best_three_lines_2d(3600);
    let rows = pack_lines(2, 3, 1, PackingSchedule::default()).unwrap();
    let three = min_chordal(&rows, 2);
    let mut pass = (three - 0.8660).abs() < 1e-2 && (oracle - 0.8660).abs() < 1e-2;
    let mut detail = format!("D=2 K=3: {three:.4} (grid oracle {oracle:.4})");

    let mut ortho = true;
    for (d, b) in [(2, 1), (4, 2), (8, 3), (8, 2), (16, 4)] {
        let dist = grassmannian_init(d, b, 5).unwrap().min_pairwise_distance().unwrap();
        ortho &= (dist - 1.0).abs() < 1e-6;
    }
    pass &= ortho;
    detail.push_str(&format!("; 2^b<=D orthogonal: {ortho}"));

    for (d, b) in [(8, 4), (16, 4)] {
        let ours = grassmannian_init(d, b, 1).unwrap().min_pairwise_distance().unwrap();
        let median = median_random_min_dist(d, b, 100, 11);
        pass &= ours > median;
        detail.push_str(&format!("; ({d},{b}): {ours:.4} vs random median {median:.4}"));
    }
    Outcome::new(pass, detail)
}

fn min_chordal(rows: &[f64], d: usize) -> f64 {
    let k = rows.len() / d;
    let mut m: f64 = 1.0;
    for i in 0..k {
        for j in i + 1..k {
            let ip: f64 = (0..d).map(|t| rows[i * d + t] * rows[j * d + t]).sum();
            m = m.min((1.0 - ip * ip).max(0.0).sqrt());
        }
    }
    m
}

pub fn gain_suite() -> Outcome {
    let mut failures = Vec::new();
    let a = 0.6;
    for b_mag in 1..=5 {
        let q = GainQuantizer::new(GainQuantizerConfig { b_mag, ..Default::default() }).unwrap();
        let clip = q.clip_threshold();
        let mut prev = 0;
        for i in 0..=4000 {
            let g = 1.2 * clip * i as f64 / 4000.0;
            let c = q.quantize(g).unwrap();
            if c.index < prev {
                failures.push(format!("b={b_mag}: index decreases at {g}"));
            }
            prev = c.index;
            if q.values()[c.index] != c.value {
                failures.push(format!("b={b_mag}: value outside codomain at {g}"));
            }
            if q.quantize(c.value).unwrap() != c {
                failures.push(format!("b={b_mag}: not idempotent at {g}"));
            }
        }
        let top = (1usize << b_mag) - 1;
        if q.uniform_q(a).unwrap().1 != top || q.uniform_q(a - 1e-12).unwrap().1 != top {
            failures.push(format!("b={b_mag}: index at A is not clamped to {top}"));
        }
    }

    // surrogate vs hard at τ = 64, away from the cell edges
    let mut sup_gap: f64 = 0.0;
    for b_mag in 1..=4 {
        let q = GainQuantizer::new(GainQuantizerConfig { b_mag, tau: 64.0, ..Default::default() }).unwrap();
        let cells = (1usize << b_mag) as f64;
        for i in 0..20000 {
            let x = a * (i as f64 + 0.5) / 20000.0;
            let frac = (x * cells / a).fract();
            if frac < 0.05 || frac > 0.95 {
                continue;
            }
            sup_gap = sup_gap.max((q.soft_uniform_q(x).unwrap() - q.uniform_q(x).unwrap().0).abs());
        }
    }
    if sup_gap >= 1e-3 * a {
        failures.push(format!("sup gap {sup_gap:.2e}"));
    }

    // analytic surrogate slope vs central differences
    let q = GainQuantizer::new(GainQuantizerConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = rng.random_range(0.01..a - 0.01);
        let h = 1e-6;
        let fd = (q.soft_uniform_q(x + h).unwrap() - q.soft_uniform_q(x - h).unwrap()) / (2.0 * h);
        let an = q.soft_uniform_q_deriv(x).unwrap();
        worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
    }
    if worst >= 1e-5 {
        failures.push(format!("derivative error {worst:.2e}"));
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("sup gap {sup_gap:.2e} (limit {:.1e}), worst derivative error {worst:.2e}", 1e-3 * a)
        } else {
            failures.join("; ")
        },
    )
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let errs: Vec<f64> = (0..20).filter_map(max_rel_error).collect();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    Outcome::new(
        errs.len() >= 5 && worst < 1e-4,
        format!(
            "{} of 20 seeds away from boundaries, worst relative error {worst:.2e}, {:.1}s",
            errs.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Desk-scale dataset, identical for every run.
pub fn desk_data(cfg: &ExperimentConfig) -> Vec<ChannelSample> {
    let mut s = gen_channels(&cfg.channel, cfg.data.train_count + cfg.data.val_count).unwrap();
    round_to_f32(&mut s);
    s
}

/// Trains one configuration; `chain_ok` is cleared if the nested chain ever
/// breaks after an epoch.
pub fn train(cfg: ExperimentConfig, data: &[ChannelSample], chain_ok: &mut bool) -> Trainer {
    let nt = cfg.data.train_count;
    let (train, val) = data.split_at(nt);
    let mut t = Trainer::new(cfg).unwrap();
    t.fit(train, &val[..t.config().data.val_count], &mut |t, _| {
        if let Some(set) = t.nested() {
            *chain_ok &= set.chain_holds();
        }
    })
    .unwrap();
    t
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

/// Returns one outcome per sub-claim: untrained, frozen random, scalar.
pub fn relative_ordering() -> (Vec<Outcome>, f64) {
    let start = Instant::now();
    let base = ExperimentConfig::load(None, &["quant.shape_bits=[5]".into()]).unwrap();
    let data = desk_data(&base);
    let mut ok = true;
    let (mut sg, mut untrained, mut frozen, mut scalar) = (vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let t = train(cfg.clone(), &data, &mut ok);
        sg.push(t.final_nmse_db()[0]);
        untrained.push(t.history()[0].eval.nmse.db);

        let mut f = cfg.clone();
        f.quant.init = CodebookInit::Random;
        f.quant.frozen = true;
        frozen.push(train(f, &data, &mut ok).final_nmse_db()[0]);

        // same 32 feedback bits: one per latent entry
        let mut s = cfg.clone();
        s.mode = Mode::ScalarAblation;
        s.quant.scalar_bits = 1;
        assert_eq!(s.feedback_bits(0), cfg.feedback_bits(0));
        scalar.push(train(s, &data, &mut ok).final_nmse_db()[0]);
    }
    let m = mean(&sg);
    let arm = |name: &str, other: &[f64]| {
        let margin = mean(other) - m;
        Outcome::new(
            margin >= 1.0,
            format!(
                "shape-gain {m:.2} dB vs {name} {:.2} dB (margin {margin:.2} dB; seeds {} vs {})",
                mean(other),
                fmt(&sg),
                fmt(other)
            ),
        )
    };
    (
        vec![arm("untrained", &untrained), arm("frozen random codebook", &frozen), arm("1-bit scalar", &scalar)],
        start.elapsed().as_secs_f64(),
    )
}

pub fn multirate() -> Outcome {
    let start = Instant::now();
    let w = level_weights(0.8, 2).unwrap();
    let weights_ok = (w[0] - 0.5556).abs() < 1e-4 && (w[1] - 0.4444).abs() < 1e-4;

    let base = ExperimentConfig::default();
    let data = desk_data(&base);
    let mut chain_ok = true;
    let (mut multi, mut single) = (vec![], vec![]);
    for seed in SEEDS {
        let mut cfg = base.clone();
        cfg.seed = seed;
        multi.push(train(cfg.clone(), &data, &mut chain_ok).final_nmse_db()[1]);
        cfg.quant.shape_bits = vec![4];
        single.push(train(cfg, &data, &mut chain_ok).final_nmse_db()[0]);
    }
    let gap = mean(&multi) - mean(&single);
    Outcome::new(
        weights_ok && chain_ok && gap <= 1.0,
        format!(
            "weights ({:.4}, {:.4}); chain held every epoch: {chain_ok}; level 2 {:.2} dB vs single-rate {:.2} dB \
             (gap {gap:.2} dB; seeds {} vs {}); {:.0}s",
            w[0],
            w[1],
            mean(&multi),
            mean(&single),
            fmt(&multi),
            fmt(&single),
            start.elapsed().as_secs_f64()
        ),
    )
}

pub fn data_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = Array2::from_shape_fn((64, 8), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let back = to_spatial_frequency(&to_angular_delay(&h).unwrap()).unwrap();
    let err = (&back - &h).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
        / h.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();

    let mut cfg = ExperimentConfig::default();
    cfg.data.train_count = 48;
    cfg.data.val_count = 16;
    cfg.model.enc_hidden = vec![32];
    cfg.model.dec_hidden = vec![32];
    cfg.train.epochs_per_level = 2;
    let data = desk_data(&cfg);
    let bytes = encode_dataset(&data).unwrap();
    let decoded = decode_dataset(&bytes).unwrap();
    let dataset_ok = encode_dataset(&decoded).unwrap() == bytes
        && decoded.iter().zip(&data).all(|(a, b)| a.h_ad_trunc == b.h_ad_trunc);

    let mut ok = true;
    let run = || rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = run().install(|| Checkpoint::from_trainer(&train(cfg.clone(), &data, &mut true)));
    let b = run().install(|| Checkpoint::from_trainer(&train(cfg.clone(), &data, &mut ok)));
    let (ea, eb) = (a.encode().unwrap(), b.encode().unwrap());
    let reproducible = ea == eb;
    let restored = Checkpoint::decode(&ea).unwrap();
    let checkpoint_ok = restored.encode().unwrap() == ea && restored == a;

    Outcome::new(
        err < 1e-10 && dataset_ok && checkpoint_ok && reproducible,
        format!(
            "DFT round trip {err:.1e}; dataset bitwise: {dataset_ok}; checkpoint bitwise: {checkpoint_ok}; \
             single-threaded training reproducible: {reproducible}"
        ),
    )
}
