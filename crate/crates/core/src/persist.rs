//! Little-endian binary snapshots of models and datasets.
//!
//! Layout: a 4-byte magic, a `u32` format version, then fixed-order fields.
//! Matrices are written as `rows: u64, cols: u64` followed by column-major
//! `f64` entries, so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::data_synth::{NoiseKind, NoiseModel, SampleSet, TeacherSpec, TokenMatrix};
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelConfig, ModelState};

pub const MODEL_MAGIC: &[u8; 4] = b"NTKM";
pub const DATASET_MAGIC: &[u8; 4] = b"NTKD";
pub const FORMAT_VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        self.u64(m.nrows() as u64)?;
        self.u64(m.ncols() as u64)?;
        for v in m.iter() {
            self.f64(*v)?;
        }
        Ok(())
    }
    fn config(&mut self, c: &ModelConfig) -> Result<()> {
        for v in [c.n_layers, c.width, c.dim, c.seq_len] {
            self.u64(v as u64)?;
        }
        for v in [c.epsilon, c.omega, c.kappa] {
            self.f64(v)?;
        }
        self.u64(c.seed)
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.0.write_all(magic)?;
        Ok(self.0.write_all(&FORMAT_VERSION.to_le_bytes())?)
    }
}

struct Reader<R: Read>(R);

/// Upper bound on any stored dimension, guarding allocation from corrupt input.
const MAX_DIM: u64 = 1 << 28;

impl<R: Read> Reader<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut b = [0u8; K];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated snapshot".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn size(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_DIM {
            return Err(Error::Format(format!("dimension {v} is implausible")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let (r, c) = (self.size()?, self.size()?);
        if (r, c) != (rows, cols) {
            return Err(Error::Format(format!("expected a {rows}x{cols} matrix, found {r}x{c}")));
        }
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(r, c, data))
    }
    fn config(&mut self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            n_layers: self.size()?,
            width: self.size()?,
            dim: self.size()?,
            seq_len: self.size()?,
            epsilon: self.f64()?,
            omega: self.f64()?,
            kappa: self.f64()?,
            seed: self.u64()?,
        })
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.bytes()?;
        if &got != magic {
            return Err(Error::Format(format!("bad magic {got:?}, expected {magic:?}")));
        }
        let v = u32::from_le_bytes(self.bytes()?);
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }
    fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.0.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after snapshot".into())),
        }
    }
}

pub fn write_model(state: &ModelState, out: impl Write) -> Result<()> {
    let mut w = Writer(out);
    w.header(MODEL_MAGIC)?;
    w.config(&state.config)?;
    w.f64(state.t)?;
    for layer in &state.layers {
        w.matrix(&layer.u)?;
        w.matrix(&layer.w)?;
        w.matrix(&layer.a)?;
    }
    Ok(())
}

pub fn read_model(input: impl Read) -> Result<ModelState> {
    let mut r = Reader(input);
    r.header(MODEL_MAGIC)?;
    let config = r.config()?;
    let t = r.f64()?;
    let (d, m) = (config.dim, config.width);
    let layers = (0..config.n_layers)
        .map(|_| Ok(LayerParams { u: r.matrix(d, d)?, w: r.matrix(d, m)?, a: r.matrix(m, d)? }))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(ModelState { config, layers, t })
}

pub fn write_dataset(ds: &SampleSet, out: impl Write) -> Result<()> {
    let mut w = Writer(out);
    w.header(DATASET_MAGIC)?;
    w.config(&ds.teacher.architecture)?;
    w.u64(ds.teacher.seed)?;
    w.f64(ds.teacher.c_lower)?;
    w.f64(ds.teacher.c_upper)?;
    w.f64(ds.noise.xi)?;
    w.u64(match ds.noise.kind {
        NoiseKind::TruncatedGaussian => 0,
        NoiseKind::Uniform => 1,
    })?;
    w.f64(ds.noise.bound)?;
    w.u64(ds.seed)?;
    w.u64(ds.n() as u64)?;
    w.u64(ds.seq_len() as u64)?;
    w.u64(ds.dim() as u64)?;
    for (x, y) in ds.inputs().iter().zip(ds.targets()) {
        w.matrix(x.as_matrix())?;
        w.matrix(y)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl Read) -> Result<SampleSet> {
    let mut r = Reader(input);
    r.header(DATASET_MAGIC)?;
    let architecture = r.config()?;
    let teacher = TeacherSpec { architecture, seed: r.u64()?, c_lower: r.f64()?, c_upper: r.f64()? };
    let xi = r.f64()?;
    let kind = match r.u64()? {
        0 => NoiseKind::TruncatedGaussian,
        1 => NoiseKind::Uniform,
        k => return Err(Error::Format(format!("unknown noise kind {k}"))),
    };
    let noise = NoiseModel { xi, kind, bound: r.f64()? };
    let seed = r.u64()?;
    let (n, l, d) = (r.size()?, r.size()?, r.size()?);
    let mut inputs = Vec::with_capacity(n.min(1 << 16));
    let mut targets = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        inputs.push(TokenMatrix::from_matrix_unchecked(r.matrix(l, d)?));
        targets.push(r.matrix(l, d)?);
    }
    r.finish()?;
    SampleSet::from_parts(inputs, targets, teacher, noise, seed).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_model(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(state, &mut buf)?;
    Ok(std::fs::write(path, buf)?)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    read_model(std::fs::read(path)?.as_slice())
}

pub fn save_dataset(ds: &SampleSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    Ok(std::fs::write(path, buf)?)
}

pub fn load_dataset(path: &Path) -> Result<SampleSet> {
    read_dataset(std::fs::read(path)?.as_slice())
}
