//! Bit-exact binary serialization of models and amortizers.
//!
//! Layout (version 1, little-endian):
//!
//! ```text
//! magic "LPCK" | u32 version
//! u32 n_edges
//! per edge: u32 in_dim | u32 out_dim | u8 activation (0=leaky,1=tanh)
//!           | f64 slope | u8 skip
//! u8 variance_mode (0=fixed,1=learned) | f64 value-or-min | f64 max
//! per edge: f64[out*in] weights | f64[out] biases | f64[out] log variances
//! u8 has_amortizer
//! if set: u32 n_layers; per layer: u32 in | u32 out | u8 activation
//!         | f64 slope | f64[out*in] weights | f64[out] biases
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so round-trips are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::inference::{AmortLayer, Amortizer};
use crate::model::{ActivationKind, GenerativeModel, LayerSpec, VarianceMode};
use crate::numerics::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LPCK";
const VERSION: u32 = 1;

struct Reader<R: Read> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::Format(format!("checkpoint truncated reading {what} at byte offset {}", self.offset))
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

fn write_activation(w: &mut impl Write, kind: ActivationKind) -> Result<()> {
    match kind {
        ActivationKind::LeakyRelu { slope } => {
            w.write_all(&[0u8])?;
            w.write_all(&slope.to_le_bytes())?;
        }
        ActivationKind::Tanh => {
            w.write_all(&[1u8])?;
            w.write_all(&0f64.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_activation<R: Read>(r: &mut Reader<R>) -> Result<ActivationKind> {
    let tag = r.u8("activation tag")?;
    let slope = r.f64("activation slope")?;
    match tag {
        0 => Ok(ActivationKind::LeakyRelu { slope }),
        1 => Ok(ActivationKind::Tanh),
        other => Err(Error::Format(format!("unknown activation tag {other}"))),
    }
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Save a model (and optionally its amortizer) to `path`.
pub fn save_checkpoint(path: &Path, model: &GenerativeModel, amortizer: Option<&Amortizer>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let layers = model.layers();
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        w.write_all(&(l.in_dim as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim as u32).to_le_bytes())?;
        write_activation(&mut w, l.activation)?;
        w.write_all(&[u8::from(l.skip)])?;
    }
    match model.variance_mode() {
        VarianceMode::Fixed { value } => {
            w.write_all(&[0u8])?;
            w.write_all(&value.to_le_bytes())?;
            w.write_all(&0f64.to_le_bytes())?;
        }
        VarianceMode::Learned { min, max } => {
            w.write_all(&[1u8])?;
            w.write_all(&min.to_le_bytes())?;
            w.write_all(&max.to_le_bytes())?;
        }
    }
    for (e, l) in layers.iter().enumerate() {
        debug_assert_eq!(model.weight(e).rows(), l.out_dim);
        write_f64s(&mut w, model.weight(e).data())?;
        write_f64s(&mut w, model.bias(e))?;
        write_f64s(&mut w, model.log_variance(e))?;
    }
    match amortizer {
        None => w.write_all(&[0u8])?,
        Some(am) => {
            w.write_all(&[1u8])?;
            w.write_all(&(am.layers().len() as u32).to_le_bytes())?;
            for l in am.layers() {
                w.write_all(&(l.weights.cols() as u32).to_le_bytes())?;
                w.write_all(&(l.weights.rows() as u32).to_le_bytes())?;
                write_activation(&mut w, l.activation)?;
                write_f64s(&mut w, l.weights.data())?;
                write_f64s(&mut w, &l.biases)?;
            }
        }
    }
    Ok(())
}

/// Load a checkpoint; the amortizer is present only if it was saved.
pub fn load_checkpoint(path: &Path) -> Result<(GenerativeModel, Option<Amortizer>)> {
    let mut r = Reader { inner: BufReader::new(File::open(path)?), offset: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?} at byte offset 0")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n_edges = r.u32("edge count")? as usize;
    if n_edges == 0 || n_edges > 1024 {
        return Err(Error::Format(format!("implausible edge count {n_edges}")));
    }
    let mut specs = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let in_dim = r.u32("in_dim")? as usize;
        let out_dim = r.u32("out_dim")? as usize;
        let activation = read_activation(&mut r)?;
        let skip = r.u8("skip flag")? != 0;
        specs.push(LayerSpec::new(in_dim, out_dim, activation, skip)?);
    }
    let mode_tag = r.u8("variance mode")?;
    let a = r.f64("variance value/min")?;
    let b = r.f64("variance max")?;
    let variance_mode = match mode_tag {
        0 => VarianceMode::Fixed { value: a },
        1 => VarianceMode::Learned { min: a, max: b },
        other => return Err(Error::Format(format!("unknown variance mode tag {other}"))),
    };
    let mut weights = Vec::with_capacity(n_edges);
    let mut biases = Vec::with_capacity(n_edges);
    let mut log_vars = Vec::with_capacity(n_edges);
    for spec in &specs {
        let w = r.f64_vec(spec.out_dim * spec.in_dim, "weights")?;
        let mut m = Matrix::zeros(spec.out_dim, spec.in_dim);
        m.data_mut().copy_from_slice(&w);
        weights.push(m);
        biases.push(r.f64_vec(spec.out_dim, "biases")?);
        log_vars.push(r.f64_vec(spec.out_dim, "log variances")?);
    }
    let model = GenerativeModel::from_parts(specs, weights, biases, log_vars, variance_mode)?;
    let amortizer = if r.u8("amortizer flag")? != 0 {
        let n_layers = r.u32("amortizer layer count")? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.u32("amortizer in_dim")? as usize;
            let out_dim = r.u32("amortizer out_dim")? as usize;
            let activation = read_activation(&mut r)?;
            let w = r.f64_vec(out_dim * in_dim, "amortizer weights")?;
            let mut weights = Matrix::zeros(out_dim, in_dim);
            weights.data_mut().copy_from_slice(&w);
            let biases = r.f64_vec(out_dim, "amortizer biases")?;
            layers.push(AmortLayer { weights, biases, activation });
        }
        Some(Amortizer::from_layers(layers))
    } else {
        None
    };
    Ok((model, amortizer))
}
