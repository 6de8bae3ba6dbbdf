//! Binary file formats. All integers and floats are little-endian.
//!
//! * Dataset (`CSID`): magic, `u16` version, `u32` count, `u16` rows
//!   (`Ñ_c`), `u16` cols (`N_t`), then per sample `rows·cols` pairs of `f32`
//!   `(re, im)` in row-major order.
//! * Codebook (`SGCB` shape, `FVCB` flat): magic, `u16` version, `u16` `D`,
//!   `u16` bits, then `2^bits · D` `f32` values row-major.
//! * Checkpoint (`SGCK`): magic, `u16` version, `u32` header length, a JSON
//!   header, `u32` array count, then per array `u32` rows, `u32` cols and
//!   `f64` values row-major. Model parameters come first and the codebook,
//!   if any, last.

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::csi_data::{CMatrix, ChannelSample};
use crate::flat_vq::FlatCodebook;
use crate::shape_quant::ShapeCodebook;
use crate::trainer::Trainer;
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CSID";
pub const SHAPE_CODEBOOK_MAGIC: &[u8; 4] = b"SGCB";
pub const FLAT_CODEBOOK_MAGIC: &[u8; 4] = b"FVCB";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::format(0, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(want).unwrap())));
        }
        let at = self.pos;
        let v = self.u16("version")?;
        if v != VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite value in {what}")));
        }
        Ok(v)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite value in {what}")));
        }
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend(VERSION.to_le_bytes());
    out
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Domain(format!("{what} = {v} does not fit in u16")))
}

pub fn encode_dataset(samples: &[ChannelSample]) -> Result<Vec<u8>> {
    let (rows, cols) = samples.first().map(|s| s.h_ad_trunc.dim()).unwrap_or((0, 0));
    if samples.iter().any(|s| s.h_ad_trunc.dim() != (rows, cols)) {
        return Err(Error::Shape("samples have different dimensions".into()));
    }
    let count = u32::try_from(samples.len()).map_err(|_| Error::Domain("too many samples".into()))?;
    let mut out = header(DATASET_MAGIC);
    out.extend(count.to_le_bytes());
    out.extend(dim_u16(rows, "rows")?.to_le_bytes());
    out.extend(dim_u16(cols, "cols")?.to_le_bytes());
    out.reserve(samples.len() * rows * cols * 8);
    for s in samples {
        for c in s.h_ad_trunc.iter() {
            out.extend((c.re as f32).to_le_bytes());
            out.extend((c.im as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<ChannelSample>> {
    let mut r = Reader::new(buf);
    r.magic(DATASET_MAGIC)?;
    let count = r.u32("count")? as usize;
    let rows = r.u16("rows")? as usize;
    let cols = r.u16("cols")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("record {i}");
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let re = r.f32(&what)? as f64;
            let im = r.f32(&what)? as f64;
            vals.push(Complex64::new(re, im));
        }
        let m = CMatrix::from_shape_vec((rows, cols), vals).expect("rows·cols values");
        out.push(ChannelSample::from_truncated(m));
    }
    r.finish()?;
    Ok(out)
}

/// Rounds every coefficient to `f32` precision, matching what a dataset
/// file stores.
pub fn round_to_f32(samples: &mut [ChannelSample]) {
    for s in samples {
        s.h_ad_trunc
            .mapv_inplace(|c| Complex64::new(c.re as f32 as f64, c.im as f32 as f64));
        if let Some(h) = &mut s.h_sf {
            h.mapv_inplace(|c| Complex64::new(c.re as f32 as f64, c.im as f32 as f64));
        }
    }
}

pub fn write_dataset(path: &Path, samples: &[ChannelSample]) -> Result<()> {
    Ok(std::fs::write(path, encode_dataset(samples)?)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<ChannelSample>> {
    decode_dataset(&std::fs::read(path)?)
}

fn encode_codebook(magic: &[u8; 4], d: usize, bits: u32, rows: &[f64]) -> Result<Vec<u8>> {
    let mut out = header(magic);
    out.extend(dim_u16(d, "d")?.to_le_bytes());
    out.extend(dim_u16(bits as usize, "bits")?.to_le_bytes());
    for &v in rows {
        out.extend((v as f32).to_le_bytes());
    }
    Ok(out)
}

fn decode_codebook(magic: &[u8; 4], buf: &[u8]) -> Result<(usize, u32, Vec<f64>)> {
    let mut r = Reader::new(buf);
    r.magic(magic)?;
    let d = r.u16("d")? as usize;
    let at = r.pos;
    let bits = r.u16("bits")? as u32;
    if bits > 20 {
        return Err(Error::format(at, format!("{bits} codebook bits is too many")));
    }
    let n = (1usize << bits) * d;
    let vals = (0..n)
        .map(|i| r.f32(&format!("codeword {}", i / d.max(1))).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((d, bits, vals))
}

pub fn encode_shape_codebook(cb: &ShapeCodebook) -> Result<Vec<u8>> {
    encode_codebook(SHAPE_CODEBOOK_MAGIC, cb.dim(), cb.bits(), cb.as_flat())
}

/// Reads an `SGCB` file; codewords are renormalized after the `f32` round
/// trip.
pub fn decode_shape_codebook(buf: &[u8]) -> Result<ShapeCodebook> {
    let (d, bits, vals) = decode_codebook(SHAPE_CODEBOOK_MAGIC, buf)?;
    ShapeCodebook::from_rows(d, bits, vals)
}

pub fn encode_flat_codebook(cb: &FlatCodebook) -> Result<Vec<u8>> {
    encode_codebook(FLAT_CODEBOOK_MAGIC, cb.dim(), cb.bits(), cb.as_flat())
}

pub fn decode_flat_codebook(buf: &[u8]) -> Result<FlatCodebook> {
    let (d, bits, vals) = decode_codebook(FLAT_CODEBOOK_MAGIC, buf)?;
    FlatCodebook::from_rows(d, bits, vals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ExperimentConfig,
    /// Nested membership lists; empty outside shape-gain mode.
    levels: Vec<Vec<usize>>,
    epochs: usize,
    has_codebook: bool,
}

/// Everything needed to rebuild a trained model for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub levels: Vec<Vec<usize>>,
    pub epochs: usize,
    pub params: Vec<Array2<f64>>,
    pub codebook: Option<Array2<f64>>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config().clone(),
            levels: t.levels(),
            epochs: t.history().last().map(|r| r.epoch).unwrap_or(0),
            params: t.model().params().to_vec(),
            codebook: t.codebook(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::from_parts(self.config, self.params, self.codebook, self.levels)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let head = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            levels: self.levels.clone(),
            epochs: self.epochs,
            has_codebook: self.codebook.is_some(),
        })?;
        let mut out = header(CHECKPOINT_MAGIC);
        out.extend((head.len() as u32).to_le_bytes());
        out.extend(head);
        let arrays: Vec<&Array2<f64>> = self.params.iter().chain(self.codebook.as_ref()).collect();
        out.extend((arrays.len() as u32).to_le_bytes());
        for a in arrays {
            out.extend((a.nrows() as u32).to_le_bytes());
            out.extend((a.ncols() as u32).to_le_bytes());
            for v in a.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let len = r.u32("header length")? as usize;
        let at = r.pos;
        let head: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::format(at, format!("header: {e}")))?;
        let n = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(n);
        for i in 0..n {
            let what = format!("array {i}");
            let rows = r.u32(&what)? as usize;
            let cols = r.u32(&what)? as usize;
            let at = r.pos;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= buf.len() - at))
                .ok_or_else(|| Error::format(at, format!("{what}: {rows}x{cols} exceeds the file")))?;
            let vals = (0..count).map(|_| r.f64(&what)).collect::<Result<Vec<_>>>()?;
            arrays.push(Array2::from_shape_vec((rows, cols), vals).expect("rows·cols values"));
        }
        r.finish()?;
        let codebook = if head.has_codebook {
            Some(arrays.pop().ok_or_else(|| Error::format(r.pos, "missing codebook array"))?)
        } else {
            None
        };
        Ok(Self {
            config: head.config,
            levels: head.levels,
            epochs: head.epochs,
            params: arrays,
            codebook,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode()?)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
