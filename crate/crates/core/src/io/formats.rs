//! Little-endian binary containers: QEX1 (exposure maps), QBF1 (binary frames),
//! QBB1 (bursts), QTN1 (tensors) and QVF1 (atom vector fields).

use std::path::Path;

use thiserror::Error;

use crate::atom_ode::AtomVectorField;
use crate::bracketing::ExposureBurst;
use crate::filter_atoms::{Coefficients, FeatureMap, FilterAtoms};
use crate::sensor_model::{BinaryFrame, ExposureMap};

pub const QEX_MAGIC: &[u8; 4] = b"QEX1";
pub const QBF_MAGIC: &[u8; 4] = b"QBF1";
pub const QBB_MAGIC: &[u8; 4] = b"QBB1";
pub const QTN_MAGIC: &[u8; 4] = b"QTN1";
pub const QVF_MAGIC: &[u8; 4] = b"QVF1";

/// Largest pixel (or element) count a header may declare.
pub const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("truncated {what} at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("truncated burst: frame {frame} missing at offset {offset}")]
    MissingFrame { frame: usize, offset: usize },

    #[error("declared size overflows at offset {offset}: {detail}")]
    DimOverflow { offset: usize, detail: String },

    #[error("{count} unexpected trailing bytes at offset {offset}")]
    Trailing { offset: usize, count: usize },

    #[error("invariant violated at offset {offset}: {detail}")]
    Invariant { offset: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                what: what.to_string(),
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let offset = self.pos;
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| overflow(self.pos, what))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Trailing {
                offset: self.pos,
                count: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

fn overflow(offset: usize, detail: &str) -> FormatError {
    FormatError::DimOverflow {
        offset,
        detail: detail.to_string(),
    }
}

/// Product of declared dimensions, bounded by [`MAX_ELEMENTS`].
fn element_count(dims: &[u32], offset: usize) -> Result<usize> {
    let mut total: u64 = 1;
    for &d in dims {
        total = total.saturating_mul(d as u64);
    }
    if total > MAX_ELEMENTS {
        return Err(overflow(offset, &format!("{dims:?} declares {total} elements")));
    }
    Ok(total as usize)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Row-major real grid as stored in QEX1 (no sign constraint).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn into_exposure(self) -> crate::error::Result<ExposureMap> {
        ExposureMap::new(self.width, self.height, self.data)
    }
}

impl From<&ExposureMap> for Grid {
    fn from(m: &ExposureMap) -> Self {
        Self {
            width: m.width(),
            height: m.height(),
            data: m.theta().to_vec(),
        }
    }
}

pub fn encode_qex(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * grid.data.len());
    out.extend_from_slice(QEX_MAGIC);
    put_u32(&mut out, grid.width);
    put_u32(&mut out, grid.height);
    put_f32s(&mut out, &grid.data);
    out
}

pub fn decode_qex(buf: &[u8]) -> Result<Grid> {
    let mut r = Reader::new(buf);
    r.magic(QEX_MAGIC)?;
    let (w, h) = (r.u32("width")?, r.u32("height")?);
    let n = element_count(&[w, h], 4)?;
    let data = r.f32s(n, "exposure payload")?;
    r.finish()?;
    Ok(Grid {
        width: w as usize,
        height: h as usize,
        data,
    })
}

fn put_frame_payload(out: &mut Vec<u8>, frame: &BinaryFrame) {
    out.extend_from_slice(frame.packed());
}

fn frame_from_payload(w: usize, h: usize, bytes: Vec<u8>, offset: usize) -> Result<BinaryFrame> {
    BinaryFrame::from_packed(w, h, bytes).map_err(|e| FormatError::Invariant {
        offset,
        detail: e.to_string(),
    })
}

pub fn encode_qbf(frame: &BinaryFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + frame.packed().len());
    out.extend_from_slice(QBF_MAGIC);
    put_u32(&mut out, frame.width());
    put_u32(&mut out, frame.height());
    put_frame_payload(&mut out, frame);
    out
}

pub fn decode_qbf(buf: &[u8]) -> Result<BinaryFrame> {
    let mut r = Reader::new(buf);
    r.magic(QBF_MAGIC)?;
    let (w, h) = (r.u32("width")?, r.u32("height")?);
    element_count(&[w, h], 4)?;
    let offset = r.pos;
    let bytes = r
        .take(BinaryFrame::row_bytes(w as usize) * h as usize, "frame payload")?
        .to_vec();
    r.finish()?;
    frame_from_payload(w as usize, h as usize, bytes, offset)
}

pub fn encode_qbb(burst: &ExposureBurst) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(QBB_MAGIC);
    put_u32(&mut out, burst.width());
    put_u32(&mut out, burst.height());
    put_u32(&mut out, burst.len());
    put_f32s(&mut out, burst.alphas());
    put_f32s(&mut out, burst.theta_tilde());
    for f in burst.frames() {
        put_frame_payload(&mut out, f);
    }
    out
}

pub fn decode_qbb(buf: &[u8]) -> Result<ExposureBurst> {
    let mut r = Reader::new(buf);
    r.magic(QBB_MAGIC)?;
    let (w, h, k) = (r.u32("width")?, r.u32("height")?, r.u32("frame count")?);
    element_count(&[w, h, k], 4)?;
    let (w, h, k) = (w as usize, h as usize, k as usize);
    let alphas = r.f32s(k, "alpha table")?;
    let labels = r.f32s(k, "label table")?;
    let frame_bytes = BinaryFrame::row_bytes(w) * h;
    let mut frames = Vec::with_capacity(k);
    for frame in 0..k {
        let offset = r.pos;
        let bytes = r
            .take(frame_bytes, "frame")
            .map_err(|_| FormatError::MissingFrame { frame, offset })?
            .to_vec();
        frames.push(frame_from_payload(w, h, bytes, offset)?);
    }
    r.finish()?;
    ExposureBurst::new(frames, alphas, labels).map_err(|e| FormatError::Invariant {
        offset: 16,
        detail: e.to_string(),
    })
}

/// Dense row-major tensor as stored in QTN1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    fn dims3(&self, what: &str) -> crate::error::Result<(usize, usize, usize)> {
        match self.dims[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(crate::error::Error::Shape(format!(
                "{what} needs a rank-3 tensor, got rank {}",
                self.dims.len()
            ))),
        }
    }

    pub fn into_atoms(self) -> crate::error::Result<FilterAtoms> {
        let (m, k, k2) = self.dims3("atoms")?;
        if k != k2 {
            return Err(crate::error::Error::Shape(format!(
                "atoms must be square, got {k}x{k2}"
            )));
        }
        FilterAtoms::new(m, k, self.data)
    }

    pub fn into_coefficients(self) -> crate::error::Result<Coefficients> {
        let (o, i, m) = self.dims3("coefficients")?;
        Coefficients::new(o, i, m, self.data)
    }

    /// Feature maps are stored as channels x height x width.
    pub fn into_feature_map(self) -> crate::error::Result<FeatureMap> {
        let (c, h, w) = self.dims3("feature map")?;
        FeatureMap::new(c, w, h, self.data)
    }
}

impl From<&FilterAtoms> for Tensor {
    fn from(a: &FilterAtoms) -> Self {
        Tensor::new(vec![a.m(), a.k(), a.k()], a.data().to_vec())
    }
}

impl From<&Coefficients> for Tensor {
    fn from(c: &Coefficients) -> Self {
        Tensor::new(vec![c.c_out(), c.c_in(), c.m()], c.data().to_vec())
    }
}

impl From<&FeatureMap> for Tensor {
    fn from(f: &FeatureMap) -> Self {
        Tensor::new(vec![f.channels(), f.height(), f.width()], f.data().to_vec())
    }
}

fn put_qtn(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(QTN_MAGIC);
    put_u32(out, t.dims.len());
    for &d in &t.dims {
        put_u32(out, d);
    }
    put_f32s(out, &t.data);
}

fn read_qtn(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(QTN_MAGIC)?;
    let rank_offset = r.pos;
    let rank = r.u32("rank")?;
    if rank > 32 {
        return Err(overflow(rank_offset, &format!("rank {rank}")));
    }
    let dims_offset = r.pos;
    let dims = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<u32>>>()?;
    let n = element_count(&dims, dims_offset)?;
    let data = r.f32s(n, "tensor payload")?;
    Ok(Tensor {
        dims: dims.into_iter().map(|d| d as usize).collect(),
        data,
    })
}

pub fn encode_qtn(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    put_qtn(&mut out, t);
    out
}

pub fn decode_qtn(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf);
    let t = read_qtn(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn encode_qvf(field: &AtomVectorField) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(QVF_MAGIC);
    put_u32(&mut out, field.m());
    put_u32(&mut out, field.k());
    put_u32(&mut out, field.stages().len());
    for stage in field.stages() {
        put_f32s(&mut out, stage);
    }
    put_qtn(&mut out, &Tensor::from(field.lambda_init()));
    out
}

pub fn decode_qvf(buf: &[u8]) -> Result<AtomVectorField> {
    let mut r = Reader::new(buf);
    r.magic(QVF_MAGIC)?;
    let (m, k, stages) = (r.u32("atom count")?, r.u32("atom size")?, r.u32("stage count")?);
    let n = element_count(&[m, k, k], 4)?;
    let block = (n as u64) * (n as u64 + 1);
    if block * stages as u64 > MAX_ELEMENTS {
        return Err(overflow(4, "stage weights exceed the element limit"));
    }
    let stage_weights = (0..stages)
        .map(|_| r.f32s(block as usize, "stage weights"))
        .collect::<Result<Vec<_>>>()?;
    let init_offset = r.pos;
    let init = read_qtn(&mut r)?;
    r.finish()?;
    let invariant = |e: crate::error::Error| FormatError::Invariant {
        offset: init_offset,
        detail: e.to_string(),
    };
    let atoms = init.into_atoms().map_err(invariant)?;
    if atoms.m() != m as usize || atoms.k() != k as usize {
        return Err(FormatError::Invariant {
            offset: init_offset,
            detail: format!("initial atoms are {}x{}, header says {m}x{k}", atoms.m(), atoms.k()),
        });
    }
    AtomVectorField::new(stage_weights, atoms).map_err(|e| FormatError::Invariant {
        offset: 16,
        detail: e.to_string(),
    })
}

/// Writes `bytes` to `path`.
pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}
