//! Model checkpoint format.
//!
//! Header: `{magic "BAE1", version u32, variant u8, d_in u32, d_lat u32,
//! d_mix u32 (0 if absent)}` followed by `L`, `R`, `D` row-major 32-bit
//! IEEE-754 little-endian.
//!
//! The TopK baseline extends the same container with variant tag 4; the
//! d_mix field carries `k`, and the payload is `W_enc`, `b_enc`, `W_dec`,
//! `b_dec` in that order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{BilinearModel, Variant};
use crate::topk::TopKModel;

pub const CKPT_MAGIC: &[u8; 4] = b"BAE1";
pub const CKPT_VERSION: u32 = 1;

const TAG_VANILLA: u8 = 0;
const TAG_ORDERED: u8 = 1;
const TAG_MIXED: u8 = 2;
const TAG_COMBINED: u8 = 3;
const TAG_TOPK: u8 = 4;

#[derive(Debug, Clone)]
pub enum Checkpoint {
    Bilinear(BilinearModel),
    TopK(TopKModel),
}

impl Checkpoint {
    pub fn bilinear(self) -> Result<BilinearModel> {
        match self {
            Checkpoint::Bilinear(m) => Ok(m),
            Checkpoint::TopK(_) => Err(Error::Variant(
                "checkpoint holds a TopK baseline, expected a bilinear model".into(),
            )),
        }
    }
}

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::Vanilla => TAG_VANILLA,
        Variant::Ordered => TAG_ORDERED,
        Variant::Mixed => TAG_MIXED,
        Variant::Combined => TAG_COMBINED,
    }
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    for x in m.iter() {
        w.write_f32::<LittleEndian>(*x as f32)?;
    }
    Ok(())
}

fn write_vector<W: Write>(w: &mut W, v: &Array1<f64>) -> Result<()> {
    for x in v.iter() {
        w.write_f32::<LittleEndian>(*x as f32)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut buf = vec![0.0f64; rows * cols];
    for x in buf.iter_mut() {
        *x = r
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::Format("truncated checkpoint payload".into()))? as f64;
    }
    Array2::from_shape_vec((rows, cols), buf).map_err(|e| Error::Format(e.to_string()))
}

fn read_vector<R: Read>(r: &mut R, len: usize) -> Result<Array1<f64>> {
    let m = read_matrix(r, 1, len)?;
    Ok(m.into_shape(len).expect("1 x len reshapes to len"))
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    match ckpt {
        Checkpoint::Bilinear(m) => {
            w.write_u8(variant_tag(m.variant))?;
            w.write_u32::<LittleEndian>(m.dims.d_in as u32)?;
            w.write_u32::<LittleEndian>(m.dims.d_lat as u32)?;
            w.write_u32::<LittleEndian>(m.dims.d_mix.unwrap_or(0) as u32)?;
            write_matrix(&mut w, &m.l)?;
            write_matrix(&mut w, &m.r)?;
            if let Some(d) = &m.d {
                write_matrix(&mut w, d)?;
            }
        }
        Checkpoint::TopK(m) => {
            w.write_u8(TAG_TOPK)?;
            w.write_u32::<LittleEndian>(m.d_in() as u32)?;
            w.write_u32::<LittleEndian>(m.d_lat() as u32)?;
            w.write_u32::<LittleEndian>(m.k as u32)?;
            write_matrix(&mut w, &m.w_enc)?;
            write_vector(&mut w, &m.b_enc)?;
            write_matrix(&mut w, &m.w_dec)?;
            write_vector(&mut w, &m.b_dec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tag = r.read_u8()?;
    let d_in = r.read_u32::<LittleEndian>()? as usize;
    let d_lat = r.read_u32::<LittleEndian>()? as usize;
    let aux = r.read_u32::<LittleEndian>()? as usize;

    if tag == TAG_TOPK {
        let w_enc = read_matrix(&mut r, d_lat, d_in)?;
        let b_enc = read_vector(&mut r, d_lat)?;
        let w_dec = read_matrix(&mut r, d_in, d_lat)?;
        let b_dec = read_vector(&mut r, d_in)?;
        return Ok(Checkpoint::TopK(TopKModel::from_parts(w_enc, b_enc, w_dec, b_dec, aux)?));
    }

    let variant = match tag {
        TAG_VANILLA => Variant::Vanilla,
        TAG_ORDERED => Variant::Ordered,
        TAG_MIXED => Variant::Mixed,
        TAG_COMBINED => Variant::Combined,
        other => return Err(Error::Format(format!("unknown variant tag {other}"))),
    };
    let l = read_matrix(&mut r, d_lat, d_in)?;
    let rmat = read_matrix(&mut r, d_lat, d_in)?;
    let d = if aux > 0 { Some(read_matrix(&mut r, aux, d_lat)?) } else { None };
    Ok(Checkpoint::Bilinear(BilinearModel::from_parts(variant, l, rmat, d)?))
}

/// Round a model's parameters through f32, exactly as a save/load cycle
/// would. Used to make determinism claims about checkpoints testable
/// without touching the filesystem.
pub fn quantize_f32(m: &BilinearModel) -> BilinearModel {
    let q = |a: &Array2<f64>| a.mapv(|x| x as f32 as f64);
    BilinearModel {
        dims: m.dims,
        variant: m.variant,
        l: q(&m.l),
        r: q(&m.r),
        d: m.d.as_ref().map(|d| q(d)),
    }
}
