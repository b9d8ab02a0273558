//! Versioned little-endian binary encoding for networks and training state.
//!
//! Floats are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::path::Path;

use nalgebra::DMatrix;

use super::{Activation, AdamState, BatchNorm, DenseLayer, MlpModel, Mode};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 8] = b"GPMLP\0\0\0";

#[derive(Default, Debug)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for x in v {
            self.f64(*x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for x in m.iter() {
            self.f64(*x);
        }
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated data at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Length or count field, sanity-bounded by the remaining input.
    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > self.buf.len() as u64 * 8 + 1024 {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }

    pub fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let r = self.usize()?;
        let c = self.usize()?;
        let n = r
            .checked_mul(c)
            .ok_or_else(|| Error::Checkpoint("matrix size overflow".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(r, c, data))
    }
}

pub fn write_header(w: &mut ByteWriter, magic: &[u8; 8]) {
    w.bytes(magic);
    w.u32(FORMAT_VERSION);
}

pub fn read_header(r: &mut ByteReader<'_>, magic: &[u8; 8]) -> Result<()> {
    if r.take(8)? != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic).trim_end_matches('\0')
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn encode_model(w: &mut ByteWriter, model: &MlpModel) {
    w.usize(model.input_dim());
    w.u8(match model.mode {
        Mode::Train => 0,
        Mode::Eval => 1,
    });
    w.usize(model.layers.len());
    for layer in &model.layers {
        w.u8(layer.activation.code());
        w.f64(layer.dropout_rate);
        w.matrix(&layer.weights);
        w.matrix(&layer.biases);
        match &layer.batch_norm {
            None => w.u8(0),
            Some(bn) => {
                w.u8(1);
                w.matrix(&bn.gamma);
                w.matrix(&bn.beta);
                w.matrix(&bn.running_mean);
                w.matrix(&bn.running_var);
                w.f64(bn.momentum);
                w.f64(bn.eps);
            }
        }
    }
}

pub fn decode_model(r: &mut ByteReader<'_>) -> Result<MlpModel> {
    let input_dim = r.usize()?;
    let mode = match r.u8()? {
        0 => Mode::Train,
        1 => Mode::Eval,
        m => return Err(Error::Checkpoint(format!("unknown mode tag {m}"))),
    };
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    let mut fan_in = input_dim;
    for i in 0..n_layers {
        let code = r.u8()?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("layer {i}: unknown activation {code}")))?;
        let dropout_rate = r.f64()?;
        let weights = r.matrix()?;
        let biases = r.matrix()?;
        let units = weights.ncols();
        if weights.nrows() != fan_in || biases.shape() != (1, units) {
            return Err(Error::Checkpoint(format!("layer {i}: dimensions do not chain")));
        }
        let batch_norm = match r.u8()? {
            0 => None,
            1 => {
                let bn = BatchNorm {
                    gamma: r.matrix()?,
                    beta: r.matrix()?,
                    running_mean: r.matrix()?,
                    running_var: r.matrix()?,
                    momentum: r.f64()?,
                    eps: r.f64()?,
                };
                if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                    .iter()
                    .any(|m| m.shape() != (1, units))
                {
                    return Err(Error::Checkpoint(format!("layer {i}: batch-norm shape")));
                }
                Some(bn)
            }
            t => return Err(Error::Checkpoint(format!("layer {i}: bad batch-norm tag {t}"))),
        };
        layers.push(DenseLayer {
            weights,
            biases,
            activation,
            dropout_rate,
            batch_norm,
        });
        fan_in = units;
    }
    if layers.is_empty() {
        return Err(Error::Checkpoint("network has no layers".into()));
    }
    Ok(MlpModel::from_layers(input_dim, layers, mode))
}

pub fn encode_adam(w: &mut ByteWriter, adam: &AdamState) {
    w.u64(adam.step);
    w.f64(adam.learning_rate);
    w.f64(adam.beta1);
    w.f64(adam.beta2);
    w.f64(adam.epsilon);
    w.usize(adam.first_moment.len());
    for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
        w.matrix(m);
        w.matrix(v);
    }
}

pub fn decode_adam(r: &mut ByteReader<'_>) -> Result<AdamState> {
    let step = r.u64()?;
    let learning_rate = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let n = r.usize()?;
    let mut first_moment = Vec::with_capacity(n.min(64));
    let mut second_moment = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        first_moment.push(r.matrix()?);
        second_moment.push(r.matrix()?);
    }
    Ok(AdamState {
        first_moment,
        second_moment,
        step,
        learning_rate,
        beta1,
        beta2,
        epsilon,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn model_to_bytes(model: &MlpModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_header(&mut w, MODEL_MAGIC);
    encode_model(&mut w, model);
    w.into_bytes()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = ByteReader::new(bytes);
    read_header(&mut r, MODEL_MAGIC)?;
    let model = decode_model(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after network".into()));
    }
    Ok(model)
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &model_to_bytes(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    model_from_bytes(&read_file(path.as_ref())?)
}
