//! In-memory datasets and their on-disk binary format.
//!
//! Layout of a `.mhal` file (all integers little-endian):
//!
//! ```text
//! magic  b"MHAL" | version u16 | precision u8 (4|8) | domain u8
//! n u32 | h u32 | w u32 | has_labels u8
//! subject ids   n x u32
//! image payload n*h*w elements (f32 or f64, LE)
//! label payload n*h*w u8 (iff has_labels)
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"MHAL";
pub const DATASET_VERSION: u16 = 1;

/// Number of label classes: background plus four structures.
pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
    SourceLike,
}

impl Domain {
    fn flag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
            Domain::SourceLike => 2,
        }
    }

    fn from_flag(v: u8) -> Option<Self> {
        match v {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            2 => Some(Domain::SourceLike),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::SourceLike => "source_like",
        }
    }
}

/// Images with optional per-pixel labels, a domain tag and per-item subject
/// ids. One image per subject at this scale.
#[derive(Debug, Clone)]
pub struct DomainDataset<F: Real> {
    pub domain: Domain,
    pub h: usize,
    pub w: usize,
    /// `n` images, each `h*w` row-major.
    pub images: Vec<Vec<F>>,
    /// `n` label maps, each `h*w`, values in `[0, NUM_CLASSES)`.
    pub labels: Option<Vec<Vec<u8>>>,
    pub subject_ids: Vec<u32>,
}

impl<F: Real> DomainDataset<F> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let plane = self.h * self.w;
        if self.subject_ids.len() != self.images.len() {
            return Err(Error::Data("subject id count mismatch".into()));
        }
        if self.images.iter().any(|im| im.len() != plane) {
            return Err(Error::Data("image extent mismatch".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::Data("label count mismatch".into()));
            }
            for lm in labels {
                if lm.len() != plane {
                    return Err(Error::Data("label extent mismatch".into()));
                }
                if lm.iter().any(|&v| v as usize >= NUM_CLASSES) {
                    return Err(Error::Data(format!(
                        "label value out of range [0, {NUM_CLASSES})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Batch tensor `[n,1,H,W]` for the given item indices.
    pub fn batch(&self, idxs: &[usize]) -> Tensor<F> {
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(idxs.len() * plane);
        for &i in idxs {
            data.extend_from_slice(&self.images[i]);
        }
        Tensor::from_vec(vec![idxs.len(), 1, self.h, self.w], data).expect("batch shape")
    }

    /// Concatenated label maps for the given item indices.
    pub fn label_batch(&self, idxs: &[usize]) -> Option<Vec<u8>> {
        let labels = self.labels.as_ref()?;
        let mut out = Vec::with_capacity(idxs.len() * self.h * self.w);
        for &i in idxs {
            out.extend_from_slice(&labels[i]);
        }
        Some(out)
    }

    /// Copy with labels removed.
    pub fn without_labels(&self) -> Self {
        DomainDataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.push(F::PRECISION.flag());
        buf.push(self.domain.flag());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.h as u32).to_le_bytes());
        buf.extend_from_slice(&(self.w as u32).to_le_bytes());
        buf.push(self.labels.is_some() as u8);
        for id in &self.subject_ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for im in &self.images {
            for &v in im {
                v.write_le(&mut buf);
            }
        }
        if let Some(labels) = &self.labels {
            for lm in labels {
                buf.extend_from_slice(lm);
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let fmt = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 21 {
            return Err(fmt("truncated header"));
        }
        if &bytes[0..4] != DATASET_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DATASET_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let precision = Precision::from_flag(bytes[6]).ok_or_else(|| fmt("bad precision flag"))?;
        if precision != F::PRECISION {
            return Err(fmt(&format!(
                "precision mismatch: file has {:?}, expected {:?}",
                precision,
                F::PRECISION
            )));
        }
        let domain = Domain::from_flag(bytes[7]).ok_or_else(|| fmt("bad domain flag"))?;
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let has_labels = match bytes[20] {
            0 => false,
            1 => true,
            _ => return Err(fmt("bad label flag")),
        };
        let plane = h * w;
        let eb = precision.bytes();
        let expected = 21 + 4 * n + n * plane * eb + if has_labels { n * plane } else { 0 };
        if bytes.len() != expected {
            return Err(fmt(&format!(
                "size mismatch: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut pos = 21;
        let mut subject_ids = Vec::with_capacity(n);
        for _ in 0..n {
            subject_ids.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()));
            pos += 4;
        }
        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            let mut im = Vec::with_capacity(plane);
            for _ in 0..plane {
                im.push(F::read_le(&bytes[pos..pos + eb]));
                pos += eb;
            }
            images.push(im);
        }
        let labels = if has_labels {
            let mut all = Vec::with_capacity(n);
            for _ in 0..n {
                all.push(bytes[pos..pos + plane].to_vec());
                pos += plane;
            }
            Some(all)
        } else {
            None
        };
        let ds = DomainDataset {
            domain,
            h,
            w,
            images,
            labels,
            subject_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Exact on-disk size of this dataset in bytes.
    pub fn file_size(&self) -> usize {
        let plane = self.h * self.w;
        21 + 4 * self.len()
            + self.len() * plane * F::PRECISION.bytes()
            + if self.labels.is_some() {
                self.len() * plane
            } else {
                0
            }
    }
}
