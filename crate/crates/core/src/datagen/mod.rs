//! Synthetic worlds, task supports, augmentation and dataset files.

mod augment;
mod tasks;
mod world;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{make_views, AugmentationKind, AugmentationRule, ViewSource, Views};
pub use tasks::{
    check_assumptions, nontrivial_coverage, sample_task_supports, sample_tasks, AssumptionReport,
    SupportVariance, TaskSpec, MAX_SUPPORT_RESAMPLES, MIN_SINGULAR_VALUE,
};
pub use world::{sample_world, Mixing, SyntheticWorld, WorldConfig, MAX_CONDITION};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const TDS_MAGIC: &[u8; 4] = b"TDS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageLayout {
    pub const RGB32: Self = Self { channels: 3, height: 32, width: 32 };

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature rows with optional labels and, for synthetic data, the latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Option<Vec<u16>>,
    /// 0 when unlabeled.
    pub n_classes: usize,
    pub latents: Option<Tensor>,
    pub layout: Option<ImageLayout>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_tds<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let (n, dim) = ds.features.dims2()?;
    if let Some(labels) = &ds.labels {
        if labels.len() != n {
            return Err(Error::Format(format!("{} labels for {n} rows", labels.len())));
        }
        if ds.n_classes == 0 || labels.iter().any(|&l| l as usize >= ds.n_classes) {
            return Err(Error::Format("label out of range".into()));
        }
    } else if ds.n_classes != 0 {
        return Err(Error::Format("n_classes set but no labels".into()));
    }
    if ds.n_classes > u16::MAX as usize + 1 {
        return Err(Error::Format("too many classes for u16 labels".into()));
    }
    w.write_all(TDS_MAGIC)?;
    w.write_all(&u32_field(n, "count")?)?;
    w.write_all(&u32_field(dim, "dim")?)?;
    w.write_all(&u32_field(ds.n_classes, "n_classes")?)?;
    for v in ds.features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &ds.labels {
        for l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_tds<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    read_exact_or_format(&mut r, &mut magic, "magic")?;
    if &magic != TDS_MAGIC {
        return Err(Error::Format("bad magic, expected TDS1".into()));
    }
    let n = read_u32(&mut r, "count")?;
    let dim = read_u32(&mut r, "dim")?;
    let n_classes = read_u32(&mut r, "n_classes")?;
    let total = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("count × dim overflows".into()))?;
    let mut bytes = vec![0u8; total.checked_mul(8).ok_or_else(|| Error::Format("file too large".into()))?];
    read_exact_or_format(&mut r, &mut bytes, "features")?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = if n_classes > 0 {
        let mut lb = vec![0u8; n * 2];
        read_exact_or_format(&mut r, &mut lb, "labels")?;
        let labels: Vec<u16> = lb.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {n_classes} classes")));
        }
        Some(labels)
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after TDS payload".into()));
    }
    Ok(Dataset { features: Tensor::from_rows(n, dim, data)?, labels, n_classes, latents: None, layout: None })
}

pub fn load_tds(path: &Path) -> Result<Dataset> {
    read_tds(BufReader::new(File::open(path)?))
}

pub fn save_tds(ds: &Dataset, path: &Path) -> Result<()> {
    write_tds(ds, BufWriter::new(File::create(path)?))
}

/// Raw image-batch layout: each record is one label byte followed by the
/// channel-major pixel bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawLayout {
    pub image: ImageLayout,
    pub n_classes: usize,
}

impl Default for RawLayout {
    fn default() -> Self {
        Self { image: ImageLayout::RGB32, n_classes: 10 }
    }
}

pub fn parse_raw_images(bytes: &[u8], layout: RawLayout) -> Result<Dataset> {
    let pixels = layout.image.len();
    let record = pixels + 1;
    if pixels == 0 || layout.n_classes == 0 {
        return Err(Error::Format("empty raw layout".into()));
    }
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Format(format!(
            "truncated raw image file: {} bytes is not a multiple of {record}",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pixels);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= layout.n_classes {
            return Err(Error::Format(format!("record {i}: label {label} out of range")));
        }
        labels.push(label as u16);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        features: Tensor::from_rows(n, pixels, data)?,
        labels: Some(labels),
        n_classes: layout.n_classes,
        latents: None,
        layout: Some(layout.image),
    })
}

pub fn import_raw_images(path: &Path, layout: RawLayout) -> Result<Dataset> {
    parse_raw_images(&std::fs::read(path)?, layout)
}
