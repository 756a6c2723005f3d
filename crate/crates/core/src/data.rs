//! Input normalisation, the activation-dump file format, streaming loading,
//! and synthetic generators with planted structure.
//!
//! Dump layout: header `{magic "BACT", version u32 = 1, d_in u32, n_rows u64,
//! dtype u8 = 1 (f32)}` followed by row-major 32-bit IEEE-754 little-endian
//! values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"BACT";
pub const DUMP_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// A block of unit-normalised input vectors with optional per-row tags.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub rows: Array2<f64>,
    pub meta: Option<Vec<String>>,
    /// rows discarded during normalisation because their norm was < 1e-12
    pub dropped: usize,
}

impl ActivationBatch {
    pub fn n_samples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.rows.ncols()
    }
}

/// Divide every row by its L2 norm; rows with norm < 1e-12 are dropped and
/// counted.
pub fn normalize(rows: &Array2<f64>) -> Result<ActivationBatch> {
    if rows.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("normalize input".into()));
    }
    let mut kept: Vec<f64> = Vec::with_capacity(rows.len());
    let mut dropped = 0;
    let d_in = rows.ncols();
    for row in rows.axis_iter(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            dropped += 1;
            continue;
        }
        kept.extend(row.iter().map(|x| x / norm));
    }
    let n = kept.len() / d_in.max(1);
    let rows = Array2::from_shape_vec((n, d_in), kept)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(ActivationBatch { rows, meta: None, dropped })
}

// ---------------------------------------------------------------------------
// Dump file format
// ---------------------------------------------------------------------------

pub fn write_dump(path: &Path, rows: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DUMP_MAGIC)?;
    w.write_u32::<LittleEndian>(DUMP_VERSION)?;
    w.write_u32::<LittleEndian>(rows.ncols() as u32)?;
    w.write_u64::<LittleEndian>(rows.nrows() as u64)?;
    w.write_u8(DTYPE_F32)?;
    for x in rows.iter() {
        w.write_f32::<LittleEndian>(*x as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Streaming reader over a "BACT" dump. Memory use is one batch at a time.
pub struct DumpReader {
    reader: BufReader<File>,
    pub d_in: usize,
    pub n_rows: u64,
    rows_read: u64,
}

impl DumpReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                magic, DUMP_MAGIC
            )));
        }
        let version = reader.read_u32::<LittleEndian>()?;
        if version != DUMP_VERSION {
            return Err(Error::Format(format!(
                "unsupported dump version {version}, expected {DUMP_VERSION}"
            )));
        }
        let d_in = reader.read_u32::<LittleEndian>()? as usize;
        let n_rows = reader.read_u64::<LittleEndian>()?;
        let dtype = reader.read_u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        Ok(DumpReader { reader, d_in, n_rows, rows_read: 0 })
    }

    /// Next raw (un-normalised) batch of at most `batch_size` rows, in file
    /// order. Returns `None` when the file is exhausted.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Option<Array2<f64>>> {
        if self.rows_read >= self.n_rows {
            return Ok(None);
        }
        let take = batch_size.min((self.n_rows - self.rows_read) as usize);
        let mut buf = vec![0.0f64; take * self.d_in];
        for v in buf.iter_mut() {
            *v = self
                .reader
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::Format("truncated payload".into()))? as f64;
        }
        self.rows_read += take as u64;
        let arr = Array2::from_shape_vec((take, self.d_in), buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Some(arr))
    }
}

/// Load an entire dump as one raw (un-normalised) matrix.
pub fn load_dump_all(path: &Path) -> Result<Array2<f64>> {
    let mut reader = DumpReader::open(path)?;
    let d_in = reader.d_in;
    match reader.next_batch(usize::MAX)? {
        Some(rows) => Ok(rows),
        None => Ok(Array2::zeros((0, d_in))),
    }
}

/// Load a dump into a stream of normalised batches.
pub fn load_dump(path: &Path, batch_size: usize) -> Result<Vec<ActivationBatch>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be >= 1".into()));
    }
    let mut reader = DumpReader::open(path)?;
    let mut out = Vec::new();
    while let Some(raw) = reader.next_batch(batch_size)? {
        out.push(normalize(&raw)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    SuperposedSparse,
    CircleManifold,
    SphereManifold,
    ClusteredDirections,
    GaussianNoise,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "superposed_sparse" | "superposed-sparse" => Ok(Self::SuperposedSparse),
            "circle_manifold" | "circle-manifold" | "circle" => Ok(Self::CircleManifold),
            "sphere_manifold" | "sphere-manifold" | "sphere" => Ok(Self::SphereManifold),
            "clustered_directions" | "clustered-directions" | "clusters" => {
                Ok(Self::ClusteredDirections)
            }
            "gaussian_noise" | "gaussian-noise" | "noise" => Ok(Self::GaussianNoise),
            other => Err(Error::Invalid(format!("unknown synthetic kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub d_in: usize,
    /// planted feature count (superposed/clusters) — ignored by manifolds
    pub n_features: usize,
    /// coordinate indices spanning the planted manifold subspace
    pub subspace: Vec<usize>,
    /// expected active fraction of features per sample, in (0, 1]
    pub sparsity: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::Invalid("d_in must be >= 1".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Invalid("sparsity must lie in (0, 1]".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &self.subspace {
            if i >= self.d_in || !seen.insert(i) {
                return Err(Error::Invalid("subspace indices must be distinct and < d_in".into()));
            }
        }
        let need = match self.kind {
            SyntheticKind::CircleManifold => 2,
            SyntheticKind::SphereManifold => 3,
            _ => 0,
        };
        if self.subspace.len() < need {
            return Err(Error::Invalid(format!(
                "{:?} needs at least {need} subspace indices",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Planted structure attached to a generated batch, used for recovery scoring.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Directions(Vec<Array1<f64>>),
    Subspace(Vec<usize>),
    None,
}

pub fn generate(spec: &SyntheticSpec, n_samples: usize) -> Result<(ActivationBatch, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_in;
    let mut rows = Array2::<f64>::zeros((n_samples, d));

    let truth = match spec.kind {
        SyntheticKind::SuperposedSparse | SyntheticKind::ClusteredDirections => {
            let n_feat = spec.n_features.max(1);
            let dirs: Vec<Array1<f64>> = match spec.kind {
                SyntheticKind::SuperposedSparse => (0..n_feat)
                    .map(|_| random_unit(d, &mut rng))
                    .collect(),
                _ => {
                    // clusters: features grouped around a few anchor directions
                    let n_anchors = (n_feat / 4).max(1);
                    let anchors: Vec<Array1<f64>> =
                        (0..n_anchors).map(|_| random_unit(d, &mut rng)).collect();
                    (0..n_feat)
                        .map(|i| {
                            let mut v = anchors[i % n_anchors].clone();
                            for x in v.iter_mut() {
                                let e: f64 = rng.sample(StandardNormal);
                                *x += 0.15 * e;
                            }
                            let n = v.dot(&v).sqrt();
                            v / n
                        })
                        .collect()
                }
            };
            let k_active = ((spec.sparsity * n_feat as f64).round() as usize).max(1);
            for mut row in rows.axis_iter_mut(Axis(0)) {
                for _ in 0..k_active {
                    let idx = rng.gen_range(0..n_feat);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let mag = 0.5 + rng.gen::<f64>();
                    row.scaled_add(sign * mag, &dirs[idx]);
                }
            }
            add_noise(&mut rows, spec.noise, &mut rng);
            GroundTruth::Directions(dirs)
        }
        SyntheticKind::CircleManifold => {
            let (i, j) = (spec.subspace[0], spec.subspace[1]);
            for mut row in rows.axis_iter_mut(Axis(0)) {
                let theta = rng.gen::<f64>() * std::f64::consts::TAU;
                row[i] = theta.cos();
                row[j] = theta.sin();
            }
            add_noise(&mut rows, spec.noise, &mut rng);
            GroundTruth::Subspace(spec.subspace[..2].to_vec())
        }
        SyntheticKind::SphereManifold => {
            let idx = &spec.subspace[..3];
            for mut row in rows.axis_iter_mut(Axis(0)) {
                let mut p = [0.0f64; 3];
                let mut n = 0.0;
                while n < 1e-9 {
                    for v in p.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                }
                for (k, &c) in idx.iter().enumerate() {
                    row[c] = p[k] / n;
                }
            }
            add_noise(&mut rows, spec.noise, &mut rng);
            GroundTruth::Subspace(idx.to_vec())
        }
        SyntheticKind::GaussianNoise => {
            for x in rows.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            GroundTruth::None
        }
    };

    Ok((normalize(&rows)?, truth))
}

fn random_unit<R: Rng>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.sample(StandardNormal)));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn add_noise<R: Rng>(rows: &mut Array2<f64>, scale: f64, rng: &mut R) {
    if scale == 0.0 {
        return;
    }
    for x in rows.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *x += scale * e;
    }
}
