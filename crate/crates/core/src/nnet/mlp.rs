use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// `2 · Ñ_c · N_t` (real and imaginary parts stacked).
    pub input_dim: usize,
    pub enc_hidden: Vec<usize>,
    /// `M`.
    pub latent_dim: usize,
    pub dec_hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Multiplies the init range of the encoder output layer.
    pub latent_init_scale: f64,
}

impl AutoencoderConfig {
    pub fn desk(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            enc_hidden: vec![512, 256],
            latent_dim,
            dec_hidden: vec![256, 512],
            leaky_slope: 0.01,
            latent_init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be positive"));
        }
        if !(self.latent_init_scale > 0.0 && self.latent_init_scale.is_finite()) {
            return Err(Error::config("model.latent_init_scale", "must be positive"));
        }
        if self.enc_hidden.iter().chain(&self.dec_hidden).any(|&w| w == 0) {
            return Err(Error::config("model.enc_hidden", "hidden widths must be positive"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("model.leaky_slope", "must be in [0, 1)"));
        }
        Ok(())
    }

    fn enc_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.enc_hidden);
        d.push(self.latent_dim);
        d
    }

    fn dec_dims(&self) -> Vec<usize> {
        let mut d = vec![self.latent_dim];
        d.extend(&self.dec_hidden);
        d.push(self.input_dim);
        d
    }
}

/// MLP encoder ending in `tanh` (so every latent entry lies in `[−1, 1]`)
/// and an MLP decoder with a linear output layer. Hidden layers use a leaky
/// rectifier.
///
/// Parameters are stored as `[W, b]` pairs, encoder layers first, with `W`
/// of shape `in × out` and `b` of shape `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    cfg: AutoencoderConfig,
    params: Vec<Array2<f64>>,
    n_enc_layers: usize,
}

impl Autoencoder {
    /// He-uniform hidden weights, Glorot-uniform output weights, zero biases.
    pub fn new<R: RngCore>(cfg: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        for (part, dims) in [cfg.enc_dims(), cfg.dec_dims()].into_iter().enumerate() {
            let n = dims.len() - 1;
            for (l, w) in dims.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = if l + 1 == n {
                    let scale = if part == 0 { cfg.latent_init_scale } else { 1.0 };
                    scale * (6.0 / (fan_in + fan_out) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                params.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                    rng.random_range(-limit..limit)
                }));
                params.push(Array2::zeros((1, fan_out)));
            }
        }
        Ok(Self {
            n_enc_layers: cfg.enc_dims().len() - 1,
            cfg,
            params,
        })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(cfg: AutoencoderConfig, params: Vec<Array2<f64>>) -> Result<Self> {
        cfg.validate()?;
        let mut expected = Vec::new();
        for dims in [cfg.enc_dims(), cfg.dec_dims()] {
            for w in dims.windows(2) {
                expected.push((w[0], w[1]));
                expected.push((1, w[1]));
            }
        }
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|(e, p)| *e != p.dim())
        {
            return Err(Error::Shape("parameter shapes do not match the model config".into()));
        }
        Ok(Self {
            n_enc_layers: cfg.enc_dims().len() - 1,
            cfg,
            params,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn run(&self, tape: &mut Tape, x: Var, first_layer: usize, n_layers: usize, bounded: bool) -> Var {
        let mut h = x;
        for l in 0..n_layers {
            let id = 2 * (first_layer + l);
            let w = tape.param(id, &self.params[id]);
            let b = tape.param(id + 1, &self.params[id + 1]);
            let xw = tape.matmul(h, w);
            h = tape.add_row(xw, b);
            if l + 1 < n_layers {
                h = tape.leaky_relu(h, self.cfg.leaky_slope);
            } else if bounded {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// `batch × input_dim` → `batch × M`, entries in `[−1, 1]`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_cols(tape.value(x), self.cfg.input_dim, "encoder input")?;
        Ok(self.run(tape, x, 0, self.n_enc_layers, true))
    }

    /// `batch × M` → `batch × input_dim`.
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        check_cols(tape.value(z), self.cfg.latent_dim, "decoder input")?;
        let n_dec = self.params.len() / 2 - self.n_enc_layers;
        Ok(self.run(tape, z, self.n_enc_layers, n_dec, false))
    }

    pub fn encode_values(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let z = self.encode(&mut t, xv)?;
        Ok(t.value(z).clone())
    }

    pub fn decode_values(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let y = self.decode(&mut t, zv)?;
        Ok(t.value(y).clone())
    }
}

fn check_cols(x: &Array2<f64>, want: usize, what: &str) -> Result<()> {
    if x.ncols() != want {
        return Err(Error::Shape(format!("{what}: expected {want} columns, got {}", x.ncols())));
    }
    Ok(())
}
