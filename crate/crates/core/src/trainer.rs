//! End-to-end training of the quantized autoencoder, including the nested
//! multi-rate schedule.
//!
//! Forward passes always use hard quantization. In shape-gain mode the
//! decoder input `Q_mag(‖z_i‖)·b_k` is differentiated with the tanh surrogate
//! slope along the gain and straight through along the direction. The
//! codebook term of the loss reaches only the codebook and the commitment
//! term reaches only the encoder.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::complexity::MulCounter;
use crate::config::{CodebookInit, ExperimentConfig, Mode};
use crate::csi_data::{ChannelSample, Nmse};
use crate::flat_vq::FlatCodebook;
use crate::gain_quant::GainQuantizer;
use crate::nested::{level_weights, NestedCodebookSet};
use crate::nnet::{Adam, Autoencoder, Tape, Var};
use crate::scalar::ScalarQuantizer;
use crate::shape_quant::{grassmannian_init, norm_counted, SelectionRule, ShapeCodebook};
use crate::{Error, Result};

/// Sub-vectors with a smaller norm get gain index 0 and shape index 0.
pub const ZERO_NORM: f64 = 1e-12;

/// Samples per evaluation chunk. Fixed so results do not depend on the
/// thread count.
pub const EVAL_CHUNK: usize = 256;

/// Indices emitted for one sub-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubCode {
    pub gain: usize,
    /// Position within the level's codebook (what is fed back).
    pub shape: usize,
    /// Index into the parent codebook.
    pub parent: usize,
}

struct SubQuant {
    code: SubCode,
    norm: f64,
    gain_value: f64,
}

fn quantize_sub(
    v: &[f64],
    gain: &GainQuantizer,
    set: &NestedCodebookSet,
    level: usize,
    rule: SelectionRule,
    mults: &mut MulCounter,
) -> Result<SubQuant> {
    let n = norm_counted(v, mults);
    let g = gain.quantize_counted(n, mults)?;
    let (shape, parent) = set.select(v, level, rule, mults);
    if n < ZERO_NORM {
        let parent = set.members(level)[0];
        return Ok(SubQuant {
            code: SubCode { gain: 0, shape: 0, parent },
            norm: n,
            gain_value: gain.values()[0],
        });
    }
    Ok(SubQuant {
        code: SubCode { gain: g.index, shape, parent },
        norm: n,
        gain_value: g.value,
    })
}

/// Shape-gain quantization of one latent vector at `level` (0-based).
pub fn quantize_latent(
    z: &[f64],
    gain: &GainQuantizer,
    set: &NestedCodebookSet,
    level: usize,
    rule: SelectionRule,
    mults: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<SubCode>)> {
    let d = gain.config().d;
    if d != set.parent().dim() || z.is_empty() || !z.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "latent of length {} does not split into sub-vectors of dimension {d}",
            z.len()
        )));
    }
    if level >= set.num_levels() {
        return Err(Error::Domain(format!("level {level} not built yet")));
    }
    let mut zq = Vec::with_capacity(z.len());
    let mut codes = Vec::with_capacity(z.len() / d);
    for v in z.chunks(d) {
        let q = quantize_sub(v, gain, set, level, rule, mults)?;
        zq.extend(set.parent().codeword(q.code.parent).iter().map(|b| q.gain_value * b));
        codes.push(q.code);
    }
    Ok((zq, codes))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentQuantizer {
    ShapeGain {
        gain: GainQuantizer,
        set: NestedCodebookSet,
        rule: SelectionRule,
    },
    Flat(FlatCodebook),
    Scalar(ScalarQuantizer),
}

/// Quantized batch plus what the backward rules need.
struct BatchCodes {
    zq: Array2<f64>,
    /// Codebook row per sub-vector, row-major over (sample, sub-vector).
    picks: Vec<usize>,
    /// Scale applied to the picked codeword (the gain level, or 1).
    scales: Vec<f64>,
    norms: Vec<f64>,
}

impl LatentQuantizer {
    fn has_codebook(&self) -> bool {
        !matches!(self, LatentQuantizer::Scalar(_))
    }

    fn codebook_matrix(&self) -> Option<Array2<f64>> {
        let (d, flat) = match self {
            LatentQuantizer::ShapeGain { set, .. } => (set.parent().dim(), set.parent().as_flat()),
            LatentQuantizer::Flat(cb) => (cb.dim(), cb.as_flat()),
            LatentQuantizer::Scalar(_) => return None,
        };
        Some(Array2::from_shape_vec((flat.len() / d, d), flat.to_vec()).expect("rows of d"))
    }

    fn codebook_flat_mut(&mut self) -> Option<&mut [f64]> {
        match self {
            LatentQuantizer::ShapeGain { set, .. } => Some(set.parent_mut().as_flat_mut()),
            LatentQuantizer::Flat(cb) => Some(cb.as_flat_mut()),
            LatentQuantizer::Scalar(_) => None,
        }
    }

    fn quantize_batch(&self, z: &Array2<f64>, d: usize, level: usize, mults: &mut MulCounter) -> Result<BatchCodes> {
        let (rows, m) = z.dim();
        let n_sub = m / d;
        let mut zq = Array2::zeros((rows, m));
        let mut picks = Vec::with_capacity(rows * n_sub);
        let mut scales = Vec::with_capacity(rows * n_sub);
        let mut norms = Vec::with_capacity(rows * n_sub);
        for r in 0..rows {
            let zr = z.row(r);
            let zr = zr.as_slice().expect("standard layout");
            let mut out = zq.row_mut(r);
            let out = out.as_slice_mut().expect("standard layout");
            match self {
                LatentQuantizer::ShapeGain { gain, set, rule } => {
                    for (i, v) in zr.chunks(d).enumerate() {
                        let q = quantize_sub(v, gain, set, level, *rule, mults)?;
                        let b = set.parent().codeword(q.code.parent);
                        for (o, bv) in out[i * d..(i + 1) * d].iter_mut().zip(b) {
                            *o = q.gain_value * bv;
                        }
                        picks.push(q.code.parent);
                        scales.push(q.gain_value);
                        norms.push(q.norm);
                    }
                }
                LatentQuantizer::Flat(cb) => {
                    for (i, v) in zr.chunks(d).enumerate() {
                        let k = cb.select(v, mults);
                        out[i * d..(i + 1) * d].copy_from_slice(cb.codeword(k));
                        picks.push(k);
                        scales.push(1.0);
                    }
                }
                LatentQuantizer::Scalar(q) => {
                    for (o, &x) in out.iter_mut().zip(zr) {
                        *o = q.quantize(x, mults)?.0;
                    }
                }
            }
        }
        Ok(BatchCodes { zq, picks, scales, norms })
    }

    fn record_usage(&mut self, picks: &[usize]) {
        match self {
            LatentQuantizer::ShapeGain { set, .. } => {
                picks.iter().for_each(|&k| set.parent_mut().record_use(k));
            }
            LatentQuantizer::Flat(cb) => picks.iter().for_each(|&k| cb.record_use(k)),
            LatentQuantizer::Scalar(_) => {}
        }
    }

    fn reset_usage(&mut self) {
        match self {
            LatentQuantizer::ShapeGain { set, .. } => set.parent_mut().reset_usage(),
            LatentQuantizer::Flat(cb) => cb.reset_usage(),
            LatentQuantizer::Scalar(_) => {}
        }
    }

    pub fn usage(&self) -> &[u64] {
        match self {
            LatentQuantizer::ShapeGain { set, .. } => set.parent().usage(),
            LatentQuantizer::Flat(cb) => cb.usage(),
            LatentQuantizer::Scalar(_) => &[],
        }
    }
}

/// Validation metrics of one level after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelEval {
    /// Mean over samples of each loss term.
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_codebook: f64,
    pub loss_commit: f64,
    pub nmse: Nmse,
    /// Instrumented multiplications per sub-vector.
    pub mult_count: u64,
}

/// One CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// Global epoch counter; 0 is the untrained model.
    pub epoch: usize,
    /// 1-based level.
    pub level: usize,
    pub eval: LevelEval,
    /// Minimum chordal distance of the level's shape codebook.
    pub min_pairwise_dist: Option<f64>,
    pub feedback_bits: u64,
}

pub const METRICS_HEADER: &str =
    "epoch,level,loss_total,loss_recon,loss_codebook,loss_commit,nmse_db,min_pairwise_dist,mult_count,feedback_bits";

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        let e = &self.eval;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.level,
            e.loss_total,
            e.loss_recon,
            e.loss_codebook,
            e.loss_commit,
            e.nmse.db,
            self.min_pairwise_dist.map(|v| v.to_string()).unwrap_or_default(),
            e.mult_count,
            self.feedback_bits
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Stacks samples into a `count × input_dim` matrix.
pub fn batch_matrix(samples: &[&ChannelSample]) -> Array2<f64> {
    let cols = samples.first().map(|s| 2 * s.h_ad_trunc.len()).unwrap_or(0);
    let mut x = Array2::zeros((samples.len(), cols));
    for (r, s) in samples.iter().enumerate() {
        x.row_mut(r)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&s.to_real_vector());
    }
    x
}

/// Owns every piece of mutable training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: ExperimentConfig,
    model: Autoencoder,
    quant: LatentQuantizer,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Autoencoder::new(cfg.autoencoder_config(), &mut rng)?;
        let q = &cfg.quant;
        let quant = match cfg.mode {
            Mode::ShapeGain => {
                let parent = match q.init {
                    CodebookInit::Grassmannian => grassmannian_init(q.d, q.shape_bits[0], rng.next_u64())?,
                    CodebookInit::Random => ShapeCodebook::random(q.d, q.shape_bits[0], &mut rng)?,
                };
                LatentQuantizer::ShapeGain {
                    gain: GainQuantizer::new(cfg.gain_config())?,
                    set: NestedCodebookSet::new(parent),
                    rule: q.selection,
                }
            }
            Mode::FlatVq => LatentQuantizer::Flat(FlatCodebook::init_normal(q.d, q.flat_bits, &mut rng)?),
            Mode::ScalarAblation => LatentQuantizer::Scalar(ScalarQuantizer::new(q.scalar_bits, q.mu)?),
        };
        Ok(Self::assemble(cfg, model, quant, rng))
    }

    fn assemble(cfg: ExperimentConfig, model: Autoencoder, quant: LatentQuantizer, rng: ChaCha8Rng) -> Self {
        let mut slots: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        slots.push(quant.codebook_matrix().map(|c| c.len()).unwrap_or(0));
        let adam = Adam::new(cfg.adam_config(), &slots);
        Self {
            cfg,
            model,
            quant,
            adam,
            rng,
            epoch: 0,
            history: Vec::new(),
        }
    }

    /// Rebuilds an evaluation-ready trainer from stored parts. Optimizer
    /// state starts fresh.
    pub fn from_parts(
        cfg: ExperimentConfig,
        params: Vec<Array2<f64>>,
        codebook: Option<Array2<f64>>,
        levels: Vec<Vec<usize>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = Autoencoder::from_params(cfg.autoencoder_config(), params)?;
        let q = &cfg.quant;
        let rows = |want_bits: u32| -> Result<Vec<f64>> {
            let cb = codebook.as_ref().ok_or_else(|| Error::Shape("checkpoint has no codebook".into()))?;
            if cb.dim() != (1usize << want_bits, q.d) {
                return Err(Error::Shape(format!("codebook shape {:?}", cb.dim())));
            }
            Ok(cb.iter().copied().collect())
        };
        let quant = match cfg.mode {
            Mode::ShapeGain => {
                let parent = ShapeCodebook::from_unit_rows(q.d, q.shape_bits[0], rows(q.shape_bits[0])?)?;
                let set = NestedCodebookSet::from_levels(parent, levels)?;
                if set.num_levels() > q.shape_bits.len()
                    || (0..set.num_levels()).any(|j| set.level_bits(j) != q.shape_bits[j])
                {
                    return Err(Error::State("stored levels do not match quant.shape_bits".into()));
                }
                LatentQuantizer::ShapeGain {
                    gain: GainQuantizer::new(cfg.gain_config())?,
                    set,
                    rule: q.selection,
                }
            }
            Mode::FlatVq => LatentQuantizer::Flat(FlatCodebook::from_rows(q.d, q.flat_bits, rows(q.flat_bits)?)?),
            Mode::ScalarAblation => {
                if codebook.is_some() {
                    return Err(Error::Shape("scalar mode has no codebook".into()));
                }
                LatentQuantizer::Scalar(ScalarQuantizer::new(q.scalar_bits, q.mu)?)
            }
        };
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self::assemble(cfg, model, quant, rng))
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Autoencoder {
        &self.model
    }

    pub fn quantizer(&self) -> &LatentQuantizer {
        &self.quant
    }

    pub fn nested(&self) -> Option<&NestedCodebookSet> {
        match &self.quant {
            LatentQuantizer::ShapeGain { set, .. } => Some(set),
            _ => None,
        }
    }

    /// Codebook as a `K × D` matrix, if the mode has one.
    pub fn codebook(&self) -> Option<Array2<f64>> {
        self.quant.codebook_matrix()
    }

    /// Nested membership lists (one full level for non-nested modes).
    pub fn levels(&self) -> Vec<Vec<usize>> {
        match &self.quant {
            LatentQuantizer::ShapeGain { set, .. } => set.levels().to_vec(),
            _ => Vec::new(),
        }
    }

    /// Levels that can currently be evaluated.
    pub fn available_levels(&self) -> usize {
        self.nested().map(|s| s.num_levels()).unwrap_or(1)
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    fn d(&self) -> usize {
        self.cfg.quant.d
    }

    fn min_pairwise(&self, level: usize) -> Result<Option<f64>> {
        match self.nested() {
            Some(set) if set.members(level).len() > 1 => Ok(Some(set.level_codebook(level)?.min_pairwise_distance()?)),
            _ => Ok(None),
        }
    }

    /// Loss for one batch over the first `n_levels` levels, recorded on
    /// `tape`. Returns the loss node and the codes of the last level.
    fn batch_loss(&self, tape: &mut Tape, x: &Array2<f64>, n_levels: usize) -> Result<(Var, BatchCodes)> {
        let d = self.d();
        let inv_b = 1.0 / x.nrows() as f64;
        let beta = self.cfg.train.beta;
        let weights = level_weights(self.cfg.train.gamma, n_levels)?;
        let xv = tape.constant(x.clone());
        let z = self.model.encode(tape, xv)?;
        let z_val = tape.value(z).clone();
        let cb_id = self.model.num_params();
        let cb_var = self.quant.codebook_matrix().map(|c| tape.param(cb_id, &c));

        let mut mults = MulCounter::new();
        let mut loss: Option<Var> = None;
        let mut last = None;
        for (j, &w) in weights.iter().enumerate() {
            let codes = self.quant.quantize_batch(&z_val, d, j, &mut mults)?;
            let dec_in = match &self.quant {
                LatentQuantizer::ShapeGain { gain, .. } => {
                    let slopes = codes
                        .norms
                        .iter()
                        .map(|&n| if n < ZERO_NORM { Ok(0.0) } else { gain.surrogate_grad(n) })
                        .collect::<Result<Vec<f64>>>()?;
                    let bw = shape_gain_backward(z_val.clone(), codes.zq.clone(), codes.norms.clone(), codes.scales.clone(), slopes, d);
                    tape.custom(vec![z], codes.zq.clone(), bw)
                }
                _ => tape.straight_through(z, codes.zq.clone())?,
            };
            let x_hat = self.model.decode(tape, dec_in)?;
            let diff = tape.sub(x_hat, xv);
            let sq = tape.sum_sq(diff);
            let mut level_loss = tape.scale(sq, inv_b);
            if let Some(cbv) = cb_var {
                let k_rows = tape.value(cbv).nrows();
                let gathered = tape.custom(
                    vec![cbv],
                    codes.zq.clone(),
                    gather_backward(codes.picks.clone(), codes.scales.clone(), k_rows, d),
                );
                let z_const = tape.constant(z_val.clone());
                let cd = tape.sub(z_const, gathered);
                let cs = tape.sum_sq(cd);
                let cb_term = tape.scale(cs, inv_b);
                let zq_const = tape.constant(codes.zq.clone());
                let md = tape.sub(z, zq_const);
                let ms = tape.sum_sq(md);
                let commit = tape.scale(ms, beta * inv_b);
                level_loss = tape.add(level_loss, cb_term);
                level_loss = tape.add(level_loss, commit);
            }
            let weighted = tape.scale(level_loss, w);
            loss = Some(match loss {
                Some(acc) => tape.add(acc, weighted),
                None => weighted,
            });
            last = Some(codes);
        }
        Ok((loss.expect("at least one level"), last.expect("at least one level")))
    }

    /// One optimizer step on `x`. Returns the batch loss.
    fn step(&mut self, x: &Array2<f64>, n_levels: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, codes) = self.batch_loss(&mut tape, x, n_levels)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training {
                epoch: self.epoch,
                level: n_levels,
                msg: format!("loss is {value}"),
            });
        }
        tape.backward(loss)?;
        let n = self.model.num_params();
        let grads = tape.param_grads(n + 1);
        self.adam.begin_step();
        for (i, p) in self.model.params_mut().iter_mut().enumerate() {
            let g = grads[i].clone().unwrap_or_else(|| Array2::zeros(p.dim()));
            self.adam.update(i, p.as_slice_mut().expect("standard layout"), g.as_slice().expect("standard layout"))?;
        }
        if !self.cfg.quant.frozen {
            if let (Some(g), Some(cb)) = (&grads[n], self.quant.codebook_flat_mut()) {
                self.adam.update(n, cb, g.as_slice().expect("standard layout"))?;
            }
            if let LatentQuantizer::ShapeGain { set, .. } = &mut self.quant {
                set.parent_mut().renormalize_or_reset(&mut self.rng);
            }
        }
        self.quant.record_usage(&codes.picks);
        Ok(value)
    }

    /// Plain gradients of the batch loss, for checking the backward rules.
    pub fn loss_and_grads(&self, x: &Array2<f64>, n_levels: usize) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
        let mut tape = Tape::new();
        let (loss, _) = self.batch_loss(&mut tape, x, n_levels)?;
        let value = tape.scalar(loss);
        tape.backward(loss)?;
        Ok((value, tape.param_grads(self.model.num_params() + 1)))
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        self.model.params_mut()
    }

    /// One pass over `train` in shuffled mini-batches.
    pub fn train_epoch(&mut self, train: &[ChannelSample], n_levels: usize) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Degenerate("empty training set".into()));
        }
        self.quant.reset_usage();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let refs: Vec<&ChannelSample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch_matrix(&refs), n_levels)? * chunk.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    /// Validation metrics for levels `0..n_levels` (0-based). Samples are
    /// processed in fixed chunks and reduced in index order.
    pub fn evaluate(&self, data: &[ChannelSample], n_levels: usize) -> Result<Vec<LevelEval>> {
        if data.is_empty() {
            return Err(Error::Degenerate("empty evaluation set".into()));
        }
        if n_levels == 0 || n_levels > self.available_levels() {
            return Err(Error::Domain(format!(
                "{n_levels} levels requested, {} available",
                self.available_levels()
            )));
        }
        let per_chunk: Vec<Vec<(Vec<[f64; 4]>, u64)>> = data
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| self.eval_chunk(chunk, n_levels))
            .collect::<Result<_>>()?;
        let beta = self.cfg.train.beta;
        let n_sub = self.cfg.sub_vectors() as u64;
        (0..n_levels)
            .map(|j| {
                let mut sums = [0.0; 4];
                let mut mults = 0u64;
                for chunk in &per_chunk {
                    let (rows, m) = &chunk[j];
                    for r in rows {
                        for t in 0..4 {
                            sums[t] += r[t];
                        }
                    }
                    mults += m;
                }
                let n = data.len() as f64;
                let (recon, qerr, nmse) = (sums[0] / n, sums[1] / n, sums[2] / n);
                let (cb, commit) = if self.quant.has_codebook() { (qerr, beta * qerr) } else { (0.0, 0.0) };
                Ok(LevelEval {
                    loss_total: recon + cb + commit,
                    loss_recon: recon,
                    loss_codebook: cb,
                    loss_commit: commit,
                    nmse: Nmse::from_linear(nmse),
                    mult_count: mults / (data.len() as u64 * n_sub),
                })
            })
            .collect()
    }

    /// Per-sample `[recon, ‖z − z_q‖², nmse, 0]` for each level, plus the
    /// chunk's multiplication count.
    fn eval_chunk(&self, chunk: &[ChannelSample], n_levels: usize) -> Result<Vec<(Vec<[f64; 4]>, u64)>> {
        let refs: Vec<&ChannelSample> = chunk.iter().collect();
        let x = batch_matrix(&refs);
        let z = self.model.encode_values(&x)?;
        (0..n_levels)
            .map(|j| {
                let mut mults = MulCounter::new();
                let codes = self.quant.quantize_batch(&z, self.d(), j, &mut mults)?;
                let x_hat = self.model.decode_values(&codes.zq)?;
                let rows = (0..x.nrows())
                    .map(|r| {
                        let err: f64 = x.row(r).iter().zip(x_hat.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
                        let energy: f64 = x.row(r).iter().map(|a| a * a).sum();
                        if energy == 0.0 {
                            return Err(Error::Degenerate("zero-norm NMSE target".into()));
                        }
                        let qerr: f64 = z.row(r).iter().zip(codes.zq.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
                        Ok([err, qerr, err / energy, 0.0])
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((rows, mults.get()))
            })
            .collect()
    }

    /// Counts codeword selections at `level` over `data` into fresh usage
    /// counters.
    pub fn usage_pass(&mut self, data: &[ChannelSample], level: usize) -> Result<()> {
        self.quant.reset_usage();
        let d = self.d();
        for chunk in data.chunks(EVAL_CHUNK) {
            let refs: Vec<&ChannelSample> = chunk.iter().collect();
            let z = self.model.encode_values(&batch_matrix(&refs))?;
            let codes = self.quant.quantize_batch(&z, d, level, &mut MulCounter::new())?;
            self.quant.record_usage(&codes.picks);
        }
        Ok(())
    }

    fn log_epoch(&mut self, val: &[ChannelSample], n_levels: usize) -> Result<Vec<EpochMetrics>> {
        let evals = self.evaluate(val, n_levels)?;
        let rows = evals
            .into_iter()
            .enumerate()
            .map(|(j, eval)| {
                Ok(EpochMetrics {
                    epoch: self.epoch,
                    level: j + 1,
                    eval,
                    min_pairwise_dist: self.min_pairwise(j)?,
                    feedback_bits: self.cfg.feedback_bits(j),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.history.extend(&rows);
        Ok(rows)
    }

    /// Runs the full schedule: every level trains for up to
    /// `epochs_per_level` epochs on the weighted loss over all levels built
    /// so far, stopping early after `patience` epochs without a new best
    /// validation NMSE on the newest level (`patience = 0` disables this).
    /// The next level is then cut from the current one by usage.
    ///
    /// `observer` sees the trainer and the new rows after every epoch.
    pub fn fit(
        &mut self,
        train: &[ChannelSample],
        val: &[ChannelSample],
        observer: &mut dyn FnMut(&Trainer, &[EpochMetrics]),
    ) -> Result<()> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Degenerate("training and validation sets must be non-empty".into()));
        }
        let n_total = self.cfg.num_levels();
        let rows = self.log_epoch(val, 1)?;
        observer(self, &rows);
        for l in 0..n_total {
            let active = l + 1;
            let mut best = f64::INFINITY;
            let mut stale = 0;
            for _ in 0..self.cfg.train.epochs_per_level {
                self.epoch += 1;
                self.train_epoch(train, active)?;
                if let Some(set) = self.nested() {
                    if !set.chain_holds() {
                        return Err(Error::State(format!("nested chain broken at epoch {}", self.epoch)));
                    }
                }
                let rows = self.log_epoch(val, active)?;
                observer(self, &rows);
                let newest = rows[l].eval.nmse.db;
                if newest < best {
                    best = newest;
                    stale = 0;
                } else {
                    stale += 1;
                    if self.cfg.train.patience > 0 && stale >= self.cfg.train.patience {
                        break;
                    }
                }
            }
            if active < n_total {
                self.usage_pass(train, l)?;
                let bits = self.cfg.quant.shape_bits[active];
                if let LatentQuantizer::ShapeGain { set, .. } = &mut self.quant {
                    set.push_level(bits)?;
                }
            }
        }
        Ok(())
    }

    /// Final validation NMSE (dB) of every level, from the last logged epoch.
    pub fn final_nmse_db(&self) -> Vec<f64> {
        let Some(last) = self.history.last() else { return Vec::new() };
        self.history
            .iter()
            .filter(|r| r.epoch == last.epoch)
            .map(|r| r.eval.nmse.db)
            .collect()
    }
}

/// Backward rule for the shape-gain decoder input. Per sub-vector with
/// `u = z/‖z‖`, picked codeword `b` and gain level `Q`:
/// `∂L/∂z = G'·(b·g)·u + (Q/‖z‖)·(g − (u·g)·u)`.
fn shape_gain_backward(
    z: Array2<f64>,
    zq: Array2<f64>,
    norms: Vec<f64>,
    scales: Vec<f64>,
    slopes: Vec<f64>,
    d: usize,
) -> crate::nnet::BackwardFn {
    Box::new(move |g: &Array2<f64>| {
        let (rows, m) = g.dim();
        let n_sub = m / d;
        let mut out = Array2::zeros((rows, m));
        for r in 0..rows {
            for i in 0..n_sub {
                let idx = r * n_sub + i;
                let n = norms[idx];
                if n < ZERO_NORM {
                    continue;
                }
                let cols = s![r, i * d..(i + 1) * d];
                let (gv, zv, qv) = (g.slice(cols), z.slice(cols), zq.slice(cols));
                let q = scales[idx];
                let mut b_dot_g = 0.0;
                let mut u_dot_g = 0.0;
                for t in 0..d {
                    b_dot_g += qv[t] / q * gv[t];
                    u_dot_g += zv[t] / n * gv[t];
                }
                let mut o = out.slice_mut(cols);
                for t in 0..d {
                    let u = zv[t] / n;
                    o[t] = slopes[idx] * b_dot_g * u + q / n * (gv[t] - u_dot_g * u);
                }
            }
        }
        vec![out]
    })
}

/// Backward rule for `value[r, sub i] = scale · codebook[pick]`.
fn gather_backward(picks: Vec<usize>, scales: Vec<f64>, k_rows: usize, d: usize) -> crate::nnet::BackwardFn {
    Box::new(move |g: &Array2<f64>| {
        let n_sub = g.ncols() / d;
        let mut out = Array2::zeros((k_rows, d));
        for (idx, (&k, &sc)) in picks.iter().zip(&scales).enumerate() {
            let (r, i) = (idx / n_sub, idx % n_sub);
            let src = g.slice(s![r, i * d..(i + 1) * d]);
            let mut dst = out.row_mut(k);
            dst.scaled_add(sc, &src);
        }
        vec![out]
    })
}
