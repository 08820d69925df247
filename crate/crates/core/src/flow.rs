//! Dense optical flow with per-pixel validity.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::segmentation::SegMask;

/// Magic tag of Middlebury `.flo` files ("PIEH" == 202021.25f32).
pub const FLO_MAGIC: [u8; 4] = *b"PIEH";
/// Value written for both components of an invalid pixel.
pub const FLO_UNKNOWN: f32 = 1e9;

/// Flow field whose vectors are expressed in pixels of its own grid.
///
/// Invalid pixels hold `(0, 0)` and a cleared validity bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    uv: Grid<[f64; 2]>,
    valid: Grid<bool>,
}

impl FlowField {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            uv: Grid::filled(width, height, [0.0; 2]),
            valid: Grid::filled(width, height, false),
        }
    }

    /// Field where every pixel is valid.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 2],
    ) -> Self {
        Self {
            uv: Grid::from_fn(width, height, &mut f),
            valid: Grid::filled(width, height, true),
        }
    }

    pub fn from_parts(uv: Grid<[f64; 2]>, valid: Grid<bool>) -> Result<Self> {
        valid.ensure_dims(uv.dims())?;
        let mut flow = Self { uv, valid };
        for i in 0..flow.uv.len() {
            if !flow.valid.as_slice()[i] {
                flow.uv.as_mut_slice()[i] = [0.0; 2];
            }
        }
        Ok(flow)
    }

    pub fn width(&self) -> usize {
        self.uv.width()
    }

    pub fn height(&self) -> usize {
        self.uv.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.uv.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<Vector2<f64>> {
        if *self.valid.get(x, y) {
            let [u, v] = *self.uv.get(x, y);
            Some(Vector2::new(u, v))
        } else {
            None
        }
    }

    pub fn raw(&self, x: usize, y: usize) -> [f64; 2] {
        *self.uv.get(x, y)
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        *self.valid.get(x, y)
    }

    pub fn set(&mut self, x: usize, y: usize, uv: [f64; 2]) {
        *self.uv.get_mut(x, y) = uv;
        *self.valid.get_mut(x, y) = true;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        *self.uv.get_mut(x, y) = [0.0; 2];
        *self.valid.get_mut(x, y) = false;
    }

    pub fn vectors(&self) -> &Grid<[f64; 2]> {
        &self.uv
    }

    pub fn validity(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }
}

/// Zeroes the flow wherever `mask` is set; validity is left unchanged.
pub fn mask_flow(flow: &FlowField, mask: &SegMask) -> Result<FlowField> {
    mask.grid().ensure_dims(flow.dims())?;
    let mut out = flow.clone();
    for (uv, &m) in out.uv.as_mut_slice().iter_mut().zip(mask.grid().as_slice()) {
        if m {
            *uv = [0.0; 2];
        }
    }
    Ok(out)
}

/// Block-averages valid vectors and rescales them to output-grid pixels.
pub fn downsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    let (w, h) = flow.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::NotDivisible {
            width: w,
            height: h,
            factor,
        });
    }
    let (ow, oh) = (w / factor, h / factor);
    let mut out = FlowField::new(ow, oh);
    let scale = factor as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut sum = [0.0; 2];
            let mut n = 0usize;
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    if flow.is_valid(x, y) {
                        let [u, v] = flow.raw(x, y);
                        sum[0] += u;
                        sum[1] += v;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                let d = n as f64 * scale;
                out.set(ox, oy, [sum[0] / d, sum[1] / d]);
            }
        }
    }
    Ok(out)
}

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    let (w, h) = flow.dims();
    let mut buf = Vec::with_capacity(12 + 8 * w * h);
    buf.extend_from_slice(&FLO_MAGIC);
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (u, v) = match flow.get(x, y) {
                Some(f) => {
                    if !(f.x.is_finite() && f.y.is_finite()) {
                        return Err(Error::InvalidConfig(format!(
                            "non-finite flow at ({x}, {y})"
                        )));
                    }
                    (f.x as f32, f.y as f32)
                }
                None => (FLO_UNKNOWN, FLO_UNKNOWN),
            };
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 4 || bytes[..4] != FLO_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile("missing .flo header".into()));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w < 1 || h < 1 {
        return Err(Error::TruncatedFile(format!("invalid dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(Error::TruncatedFile(format!(
            "expected {need} bytes, found {}",
            bytes.len()
        )));
    }
    let mut flow = FlowField::new(w, h);
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            let u = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let v = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            off += 8;
            let unknown = !u.is_finite()
                || !v.is_finite()
                || u.abs() >= FLO_UNKNOWN
                || v.abs() >= FLO_UNKNOWN;
            if !unknown {
                flow.set(x, y, [u as f64, v as f64]);
            }
        }
    }
    Ok(flow)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let bytes = encode_flo(flow)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_flo(&bytes)
}
