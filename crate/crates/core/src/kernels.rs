//! Kernel matrices and blocked quadratic forms.
//!
//! The kernel of a bilinear autoencoder is `BB^T = (LL^T) ⊙ (RR^T)`, which
//! never requires the In²-sized encoder `B`. The quadratic term `f^T K f` of
//! every loss is evaluated over tiles of the latent grid so the full kernel
//! is not materialised in the training path.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::model::BilinearModel;

pub const DEFAULT_BLOCK_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Plain,
    Ordered,
    Mixed,
    Combined,
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub k: Array2<f64>,
    pub kind: KernelKind,
}

/// `K[i][j] = (l_i . l_j)(r_i . r_j)`, symmetrised after assembly.
pub fn plain_kernel(model: &BilinearModel) -> KernelMatrix {
    let k = (model.l.dot(&model.l.t())) * (model.r.dot(&model.r.t()));
    KernelMatrix { k: symmetrize(&k), kind: KernelKind::Plain }
}

/// `K_mix = D K D^T`, shape (d_mix × d_mix).
pub fn mixed_kernel(model: &BilinearModel) -> Result<KernelMatrix> {
    let d = model
        .d
        .as_ref()
        .ok_or_else(|| Error::Variant("mixed_kernel requires the mixer D".into()))?;
    let plain = plain_kernel(model).k;
    let k = d.dot(&plain).dot(&d.t());
    Ok(KernelMatrix { k: symmetrize(&k), kind: KernelKind::Mixed })
}

fn symmetrize(k: &Array2<f64>) -> Array2<f64> {
    (k + &k.t()) * 0.5
}

/// Prefix-weight structure of the ordered loss.
///
/// `c[i] = Σ_{k >= i} w_k` and the mask value at `(i, j)` is `c[max(i, j)]`,
/// i.e. the total weight of all prefixes containing both latents.
#[derive(Debug, Clone)]
pub struct OrderedMask {
    pub c: Array1<f64>,
    pub total: f64,
}

impl OrderedMask {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.c[i.max(j)]
    }

    pub fn dense(&self) -> Array2<f64> {
        let n = self.c.len();
        Array2::from_shape_fn((n, n), |(i, j)| self.value(i, j))
    }
}

/// Build the prefix mask from per-prefix weights `w` (w[k] weights the
/// prefix of latents 0..=k). Negative weights are rejected.
pub fn ordered_mask(d_lat: usize, w: &[f64]) -> Result<OrderedMask> {
    if w.len() != d_lat {
        return Err(Error::shape("ordered_mask weights", d_lat, w.len()));
    }
    if w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::Invalid("prefix weights must be finite and >= 0".into()));
    }
    let mut c = Array1::<f64>::zeros(d_lat);
    let mut acc = 0.0f64;
    for i in (0..d_lat).rev() {
        acc += w[i];
        c[i] = acc;
    }
    Ok(OrderedMask { c, total: acc })
}

pub fn uniform_prefix_weights(d_lat: usize) -> Vec<f64> {
    vec![1.0 / d_lat.max(1) as f64; d_lat]
}

/// Ordered list of upper-triangle block pairs covering the latent grid.
#[derive(Debug, Clone)]
pub struct TileSchedule {
    pub d_lat: usize,
    pub block_size: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl TileSchedule {
    pub fn new(d_lat: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Invalid("block_size must be >= 1".into()));
        }
        let n_blocks = d_lat.div_ceil(block_size);
        let mut pairs = Vec::with_capacity(n_blocks * (n_blocks + 1) / 2);
        for i in 0..n_blocks {
            for j in i..n_blocks {
                pairs.push((i, j));
            }
        }
        Ok(TileSchedule { d_lat, block_size, pairs })
    }

    pub fn default_for(d_lat: usize) -> Self {
        TileSchedule::new(d_lat, DEFAULT_BLOCK_SIZE).expect("nonzero block size")
    }

    fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let lo = b * self.block_size;
        lo..((lo + self.block_size).min(self.d_lat))
    }
}

/// Factors of the effective kernel. With a mixer the effective kernel is
/// `(D^T D) K (D^T D)`; tiles are produced through the small
/// (d_mix × d_mix) core `D K D^T` so no Lat² object is built.
pub struct KernelFactors<'a> {
    pub l: &'a Array2<f64>,
    pub r: &'a Array2<f64>,
    pub mixer: Option<&'a Array2<f64>>,
}

impl<'a> KernelFactors<'a> {
    pub fn plain(model: &'a BilinearModel) -> Self {
        KernelFactors { l: &model.l, r: &model.r, mixer: None }
    }

    pub fn mixed(model: &'a BilinearModel) -> Result<Self> {
        let d = model
            .d
            .as_ref()
            .ok_or_else(|| Error::Variant("mixed kernel factors require D".into()))?;
        Ok(KernelFactors { l: &model.l, r: &model.r, mixer: Some(d) })
    }
}

/// Per-sample `f^T (K_eff ⊙ mask) f`, evaluated tile by tile.
///
/// Off-diagonal block contributions are doubled (symmetry factor 2).
/// Accumulation is sequential over the fixed schedule in f64, so results
/// are run-to-run identical.
pub fn blocked_quadratic_form(
    f: &Array2<f64>,
    factors: &KernelFactors,
    schedule: &TileSchedule,
    mask: Option<&OrderedMask>,
) -> Result<Vec<f64>> {
    let d_lat = factors.l.nrows();
    if f.ncols() != d_lat {
        return Err(Error::shape("blocked_quadratic_form f", d_lat, f.ncols()));
    }
    if schedule.d_lat != d_lat {
        return Err(Error::shape("blocked_quadratic_form schedule", d_lat, schedule.d_lat));
    }
    if let Some(m) = mask {
        if m.c.len() != d_lat {
            return Err(Error::shape("blocked_quadratic_form mask", d_lat, m.c.len()));
        }
    }
    let n = f.nrows();
    let mut acc = vec![0.0f64; n];

    // Small core D K D^T assembled once from the same tiles.
    let core = match factors.mixer {
        Some(d) => Some(mixer_core(factors, schedule, d)),
        None => None,
    };

    for &(bi, bj) in &schedule.pairs {
        let ri = schedule.block_range(bi);
        let rj = schedule.block_range(bj);
        let tile = kernel_tile(factors, core.as_ref(), mask, ri.clone(), rj.clone());
        let fi = f.slice(s![.., ri.clone()]);
        let fj = f.slice(s![.., rj.clone()]);
        let prod = fi.dot(&tile); // n × |rj|
        let factor = if bi == bj { 1.0 } else { 2.0 };
        for sidx in 0..n {
            let mut v = 0.0f64;
            for (jj, pj) in prod.row(sidx).iter().enumerate() {
                v += pj * fj[[sidx, jj]];
            }
            acc[sidx] += factor * v;
        }
    }
    Ok(acc)
}

fn mixer_core(factors: &KernelFactors, schedule: &TileSchedule, d: &Array2<f64>) -> Array2<f64> {
    let d_mix = d.nrows();
    let mut core = Array2::<f64>::zeros((d_mix, d_mix));
    for &(bi, bj) in &schedule.pairs {
        let ri = schedule.block_range(bi);
        let rj = schedule.block_range(bj);
        let kt = plain_tile(factors, ri.clone(), rj.clone());
        let di = d.slice(s![.., ri.clone()]);
        let dj = d.slice(s![.., rj.clone()]);
        let t = di.dot(&kt).dot(&dj.t());
        core += &t;
        if bi != bj {
            core += &t.t();
        }
    }
    core
}

fn plain_tile(
    factors: &KernelFactors,
    ri: std::ops::Range<usize>,
    rj: std::ops::Range<usize>,
) -> Array2<f64> {
    let li = factors.l.slice(s![ri.clone(), ..]);
    let lj = factors.l.slice(s![rj.clone(), ..]);
    let ritile = factors.r.slice(s![ri, ..]);
    let rjtile = factors.r.slice(s![rj, ..]);
    li.dot(&lj.t()) * &ritile.dot(&rjtile.t())
}

fn kernel_tile(
    factors: &KernelFactors,
    core: Option<&Array2<f64>>,
    mask: Option<&OrderedMask>,
    ri: std::ops::Range<usize>,
    rj: std::ops::Range<usize>,
) -> Array2<f64> {
    let mut tile = match core {
        // ((D^T D) K (D^T D)) tile via the precomputed small core
        Some(c) => {
            let d = factors.mixer.expect("core implies mixer");
            let di = d.slice(s![.., ri.clone()]);
            let dj = d.slice(s![.., rj.clone()]);
            di.t().dot(c).dot(&dj)
        }
        None => plain_tile(factors, ri.clone(), rj.clone()),
    };
    if let Some(m) = mask {
        for (ii, gi) in ri.clone().enumerate() {
            for (jj, gj) in rj.clone().enumerate() {
                tile[[ii, jj]] *= m.value(gi, gj);
            }
        }
    }
    tile
}
