//! SPHD checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SPHD"  u32 version
//! encoder: u32 input_dim, u32 n_hidden, n_hidden × u32, u32 output_dim
//! head:    u32 kind (0 identity, 1 linear, 2 nonlinear), u32 input_dim,
//!          u32 output_dim, u32 hidden, u32 standardize
//! u32 blob count, then per blob: u64 length, length × f64
//! ```
//!
//! Blobs are the parameters in canonical order, followed by the running mean
//! and variance when the nonlinear head standardizes.

use std::io::{Read, Write};

use super::{init_model, Activation, EncoderSpec, HeadKind, HeadSpec, ModelState, Standardizer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPHD";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &ModelState, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let enc = &model.encoder_spec;
    put_u32(&mut buf, enc.input_dim)?;
    put_u32(&mut buf, enc.hidden.len())?;
    for &h in &enc.hidden {
        put_u32(&mut buf, h)?;
    }
    put_u32(&mut buf, enc.output_dim)?;

    let head = &model.head_spec;
    let kind = match head.kind {
        HeadKind::Identity => 0,
        HeadKind::Linear => 1,
        HeadKind::Nonlinear => 2,
    };
    put_u32(&mut buf, kind)?;
    put_u32(&mut buf, head.input_dim)?;
    put_u32(&mut buf, head.output_dim)?;
    put_u32(&mut buf, head.hidden_width())?;
    put_u32(&mut buf, usize::from(head.standardize))?;

    let mut blobs: Vec<&[f64]> = model.params().into_iter().map(|t| t.data()).collect();
    if let Some(st) = model.head.standardizer() {
        blobs.push(&st.mean);
        blobs.push(&st.var);
    }
    put_u32(&mut buf, blobs.len())?;
    for blob in blobs {
        buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        for v in blob {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("blob too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelState> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let input_dim = c.u32()?;
    let n_hidden = c.u32()?;
    if n_hidden > 1024 {
        return Err(Error::Format(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden = (0..n_hidden).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let output_dim = c.u32()?;
    let encoder_spec = EncoderSpec { input_dim, hidden, output_dim, activation: Activation::Relu };

    let kind = match c.u32()? {
        0 => HeadKind::Identity,
        1 => HeadKind::Linear,
        2 => HeadKind::Nonlinear,
        k => return Err(Error::Format(format!("unknown head kind {k}"))),
    };
    let head_input = c.u32()?;
    let head_output = c.u32()?;
    let head_hidden = c.u32()?;
    let standardize = match c.u32()? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad standardize flag {v}"))),
    };
    let head_spec = HeadSpec {
        kind,
        input_dim: head_input,
        output_dim: head_output,
        hidden: (kind == HeadKind::Nonlinear).then_some(head_hidden),
        standardize: standardize && kind != HeadKind::Identity,
    };

    let mut model = init_model(encoder_spec, head_spec, 0).map_err(|e| match e {
        Error::Spec(msg) => Error::Format(format!("checkpoint spec invalid: {msg}")),
        other => other,
    })?;
    let n_blobs = c.u32()?;
    let n_params = model.params().len();
    let has_stats = model.head.standardizer().is_some();
    let expected = n_params + if has_stats { 2 } else { 0 };
    if n_blobs != expected {
        return Err(Error::Format(format!(
            "checkpoint has {n_blobs} blobs, spec needs {expected}"
        )));
    }
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let len = usize::try_from(c.u64()?).map_err(|_| Error::Format("blob length overflow".into()))?;
        blobs.push(c.f64s(len)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let mut blobs = blobs.into_iter();
    for p in model.params_mut() {
        let blob = blobs.next().expect("count checked");
        if blob.len() != p.len() {
            return Err(Error::Format(format!(
                "blob of length {} for parameter of shape {:?}",
                blob.len(),
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(&blob);
    }
    if let Some(st) = model.head.standardizer_mut() {
        let (mean, var) = (blobs.next().expect("count checked"), blobs.next().expect("count checked"));
        if mean.len() != st.mean.len() || var.len() != st.var.len() {
            return Err(Error::Format("standardizer blob length mismatch".into()));
        }
        *st = Standardizer { mean, var };
    }
    Ok(model)
}
