//! TopK sparse-autoencoder baseline, plus the conversion of its squared
//! reconstruction error into the product-space error used by bilinear
//! models, so the two families can be compared on one axis.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::optim::{lr_at, step_matrix, OptimConfig};

/// Linear encoder/decoder with a hard top-k activation: the k largest
/// pre-activations (by value, ties broken toward the lower index) pass
/// through, the rest are zeroed.
#[derive(Debug, Clone)]
pub struct TopKModel {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub k: usize,
}

impl TopKModel {
    pub fn d_in(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn d_lat(&self) -> usize {
        self.w_enc.nrows()
    }

    /// Tied init: random encoder, decoder is its transpose with unit
    /// columns, zero biases.
    pub fn init(d_in: usize, d_lat: usize, k: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_lat == 0 {
            return Err(Error::Config("d_in and d_lat must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_in as f64).sqrt();
        let w_enc =
            Array2::from_shape_fn((d_lat, d_in), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            });
        let mut w_dec = w_enc.t().to_owned();
        normalize_columns(&mut w_dec);
        Self::from_parts(w_enc, Array1::zeros(d_lat), w_dec, Array1::zeros(d_in), k)
    }

    pub fn from_parts(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        k: usize,
    ) -> Result<Self> {
        let (d_lat, d_in) = w_enc.dim();
        if w_dec.dim() != (d_in, d_lat) {
            return Err(Error::shape(
                "topk decoder",
                format!("({d_in}, {d_lat})"),
                format!("{:?}", w_dec.dim()),
            ));
        }
        if b_enc.len() != d_lat || b_dec.len() != d_in {
            return Err(Error::shape(
                "topk biases",
                format!("({d_lat}, {d_in})"),
                format!("({}, {})", b_enc.len(), b_dec.len()),
            ));
        }
        if k == 0 || k > d_lat {
            return Err(Error::Config(format!("k = {k} must lie in [1, d_lat = {d_lat}]")));
        }
        Ok(TopKModel { w_enc, b_enc, w_dec, b_dec, k })
    }
}

fn normalize_columns(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|x| x / norm);
        }
    }
}

/// Indices of the k largest values; ties keep the lower index.
fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone)]
pub struct TopKForward {
    /// sparse latents, n x d_lat (only k nonzeros per row)
    pub latents: Array2<f64>,
    /// reconstructions, n x d_in
    pub recon: Array2<f64>,
    /// per-sample squared reconstruction error s = |x - x̂|²
    pub sse: Array1<f64>,
}

pub fn topk_forward(model: &TopKModel, batch: &ActivationBatch) -> Result<TopKForward> {
    if batch.rows.ncols() != model.d_in() {
        return Err(Error::shape(
            "topk forward",
            format!("d_in {}", model.d_in()),
            format!("{}", batch.rows.ncols()),
        ));
    }
    let n = batch.rows.nrows();
    let pre = batch.rows.dot(&model.w_enc.t()) + &model.b_enc;
    let mut latents = Array2::zeros((n, model.d_lat()));
    for (s, row) in pre.rows().into_iter().enumerate() {
        let vals: Vec<f64> = row.to_vec();
        for j in topk_indices(&vals, model.k) {
            latents[[s, j]] = vals[j];
        }
    }
    let recon = latents.dot(&model.w_dec.t()) + &model.b_dec;
    let sse = (&batch.rows - &recon).mapv(|d| d * d).sum_axis(ndarray::Axis(1));
    Ok(TopKForward { latents, recon, sse })
}

/// Exact product-space error of a reconstruction with squared residual `s`
/// and norm `recon_norm`, assuming a unit-norm input:
/// `S = ½(1 − p)² + s(1 + p) − ½s²` with `p = recon_norm²`.
pub fn quadratic_error(s: f64, recon_norm: f64) -> f64 {
    let p = recon_norm * recon_norm;
    0.5 * (1.0 - p) * (1.0 - p) + s * (1.0 + p) - 0.5 * s * s
}

/// Small-residual approximation of [`quadratic_error`], valid when the
/// reconstruction is close to unit norm.
pub fn quadratic_error_approx(s: f64) -> f64 {
    2.0 * s - 0.5 * s * s
}

/// One straight-through training step: gradients flow only through the
/// active latents; matrices get the orthogonalised update, biases plain
/// gradient descent; decoder columns are renormalised afterwards.
pub fn train_step(
    model: &mut TopKModel,
    batch: &ActivationBatch,
    step_index: usize,
    config: &OptimConfig,
) -> Result<f64> {
    let fwd = topk_forward(model, batch)?;
    let n = batch.rows.nrows() as f64;
    let resid = &fwd.recon - &batch.rows; // d(mean s)/d recon = 2 resid / n
    let g_recon = resid.mapv(|v| 2.0 * v / n);

    let grad_w_dec = g_recon.t().dot(&fwd.latents);
    let grad_b_dec = g_recon.sum_axis(ndarray::Axis(0));
    // back through the decoder, masked to the active set
    let mut g_lat = g_recon.dot(&model.w_dec);
    g_lat.zip_mut_with(&fwd.latents, |g, &f| {
        if f == 0.0 {
            *g = 0.0;
        }
    });
    let grad_w_enc = g_lat.t().dot(&batch.rows);
    let grad_b_enc = g_lat.sum_axis(ndarray::Axis(0));

    let mean_s = fwd.sse.mean().unwrap_or(0.0);
    if !mean_s.is_finite() {
        return Err(Error::NonFinite(format!("topk loss at step {step_index}")));
    }

    step_matrix(&mut model.w_enc, &grad_w_enc, step_index, config)?;
    step_matrix(&mut model.w_dec, &grad_w_dec, step_index, config)?;
    let lr = lr_at(step_index, config)?;
    model.b_enc.scaled_add(-lr, &grad_b_enc);
    model.b_dec.scaled_add(-lr, &grad_b_dec);
    normalize_columns(&mut model.w_dec);
    Ok(mean_s)
}
