//! Hand-derived reverse-mode gradients of the kernel-trick losses.
//!
//! Every objective is polynomial in `L`, `R`, `D`, so the gradients have a
//! closed form. With `a = X L^T`, `b = X R^T`, `F = a ⊙ b`,
//! `S = F^T F / n`, `E = D^T D` (identity when absent), prefix mask `W` and
//! prefix weights `c`, the error term is
//!
//! ```text
//!   err = mean_s [ f^T ((EKE) ⊙ W) f − 2 f^T Diag(c) E f ] + Σ_k w_k
//! ```
//!
//! and differentiating through both the latent path (`f`) and the kernel
//! path (`K`, `E`) gives
//!
//! ```text
//!   ∂err/∂L = (G_f ⊙ b)^T X + 2 (T ⊙ RR^T) L,   T = E (S ⊙ W) E
//!   ∂err/∂R = (G_f ⊙ a)^T X + 2 (T ⊙ LL^T) R
//!   ∂err/∂D = D [ 2 (P E K + K E P) − 2 (C S + S C) ],   P = S ⊙ W
//! ```
//!
//! The density penalty differentiates only through `f`. Gradient assembly
//! materialises (Lat × Lat) temporaries; the per-sample loss values reported
//! to the caller go through the same closed forms.

use ndarray::{Array1, Array2, Axis};

use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::kernels::uniform_prefix_weights;
use crate::losses::{ordered_penalty_weights, LossBreakdown};
use crate::model::BilinearModel;

#[derive(Debug, Clone)]
pub struct Gradients {
    pub l: Array2<f64>,
    pub r: Array2<f64>,
    pub d: Option<Array2<f64>>,
}

/// Loss value and gradients w.r.t. all parameter matrices for the model's
/// variant, at sparsity coefficient `alpha` and the default uniform prefix
/// weights.
pub fn loss_gradients(
    model: &BilinearModel,
    batch: &ActivationBatch,
    alpha: f64,
) -> Result<(LossBreakdown, Gradients)> {
    if alpha < 0.0 {
        return Err(Error::Invalid("alpha must be >= 0".into()));
    }
    if batch.d_in() != model.dims.d_in {
        return Err(Error::shape("loss_gradients", model.dims.d_in, batch.d_in()));
    }
    let n = batch.n_samples();
    if n < 2 {
        return Err(Error::Invalid("loss_gradients needs at least 2 samples".into()));
    }
    let d_lat = model.dims.d_lat;
    let x = &batch.rows;
    let a = x.dot(&model.l.t());
    let b = x.dot(&model.r.t());
    let f = &a * &b;

    // ordering structure (all-ones mask and unit prefix weights otherwise)
    let (c, total_w) = if model.variant.has_ordering() {
        let w = uniform_prefix_weights(d_lat);
        let mask = crate::kernels::ordered_mask(d_lat, &w)?;
        (Some(mask.c), mask.total)
    } else {
        (None, 1.0)
    };

    let k = (model.l.dot(&model.l.t())) * (model.r.dot(&model.r.t()));
    let e = model.mixer_gram(); // D^T D, None means identity

    // effective kernel A = (E K E) ⊙ W
    let eke = match &e {
        Some(e) => e.dot(&k).dot(e),
        None => k.clone(),
    };
    let a_eff = hadamard_mask(&eke, c.as_deref_array());

    // B_eff f_s in the linear term: Diag(c) E f (plus transpose inside G_f)
    let ef = match &e {
        Some(e) => f.dot(e), // E symmetric, rows are (E f_s)^T
        None => f.clone(),
    };

    // error value
    let mut error = 0.0f64;
    for s in 0..n {
        let frow = f.row(s);
        let quad: f64 = frow.dot(&a_eff.dot(&frow));
        let cross: f64 = match &c {
            Some(c) => frow
                .iter()
                .zip(ef.row(s).iter())
                .zip(c.iter())
                .map(|((fi, fei), ci)| ci * fi * fei)
                .sum(),
            None => frow.iter().zip(ef.row(s).iter()).map(|(fi, fei)| fi * fei).sum(),
        };
        error += quad - 2.0 * cross + total_w;
    }
    error /= n as f64;
    if !error.is_finite() {
        return Err(Error::NonFinite("reconstruction error".into()));
    }

    // dError/df: (2 F A − 2 F (C E + E C)) / n
    let fa = f.dot(&a_eff);
    let cef = {
        // rows are (C E + E C) f_s
        match &c {
            Some(c) => {
                let cf = scale_cols(&f, c); // Diag(c) f per row
                let ecf = match &e {
                    Some(e) => cf.dot(e),
                    None => cf,
                };
                let cef = scale_cols(&ef, c); // Diag(c) E f
                ecf + cef
            }
            None => &ef + &ef,
        }
    };
    let mut g_f = (fa * 2.0 - cef * 2.0) / n as f64;

    // density penalty and its gradient through f
    let penalty_weights: Option<Vec<f64>> = if model.variant.has_ordering() {
        Some(ordered_penalty_weights(d_lat))
    } else {
        None
    };
    let density = crate::losses::batch_density_penalty(&f)?;
    let mut penalty = 0.0f64;
    if d_lat > 0 {
        let sqrt_n = (n as f64).sqrt();
        for (j, col) in f.axis_iter(Axis(1)).enumerate() {
            let l1: f64 = col.iter().map(|v| v.abs()).sum();
            let l2sq: f64 = col.iter().map(|v| v * v).sum();
            let l2 = l2sq.sqrt();
            let u = penalty_weights
                .as_ref()
                .map_or(1.0 / d_lat as f64, |w| w[j]);
            if l2 == 0.0 {
                continue; // dead latent: density 0, gradient 0
            }
            penalty += u * (l1 / l2 - 1.0) / (sqrt_n - 1.0);
            let scale = alpha * u / (sqrt_n - 1.0);
            for (s, v) in col.iter().enumerate() {
                let d_h = v.signum() / l2 - l1 * v / (l2sq * l2);
                g_f[[s, j]] += scale * d_h;
            }
        }
    }

    // latent path
    let mut grad_l = (&g_f * &b).t().dot(x);
    let mut grad_r = (&g_f * &a).t().dot(x);

    // kernel path: T = E (S ⊙ W) E
    let s_mat = f.t().dot(&f) / n as f64;
    let p = hadamard_mask(&s_mat, c.as_deref_array());
    let t = match &e {
        Some(e) => e.dot(&p).dot(e),
        None => p.clone(),
    };
    grad_l = grad_l + (&t * &model.r.dot(&model.r.t())).dot(&model.l) * 2.0;
    grad_r = grad_r + (&t * &model.l.dot(&model.l.t())).dot(&model.r) * 2.0;

    // mixer path
    let grad_d = match (&model.d, &e) {
        (Some(d), Some(e)) => {
            let pek = p.dot(e).dot(&k);
            let cs = match &c {
                Some(c) => scale_rows(&s_mat, c), // C S
                None => s_mat.clone(),
            };
            let inner = (&pek + &pek.t()) * 2.0 - (&cs + &cs.t()) * 2.0;
            Some(d.dot(&inner))
        }
        _ => None,
    };

    let breakdown = LossBreakdown { error, density, total: error + alpha * penalty };
    let grads = Gradients { l: grad_l, r: grad_r, d: grad_d };
    Ok((breakdown, grads))
}

trait AsDerefArray {
    fn as_deref_array(&self) -> Option<&Array1<f64>>;
}

impl AsDerefArray for Option<Array1<f64>> {
    fn as_deref_array(&self) -> Option<&Array1<f64>> {
        self.as_ref()
    }
}

fn hadamard_mask(m: &Array2<f64>, c: Option<&Array1<f64>>) -> Array2<f64> {
    match c {
        Some(c) => Array2::from_shape_fn(m.dim(), |(i, j)| m[[i, j]] * c[i.max(j)]),
        None => m.clone(),
    }
}

fn scale_cols(m: &Array2<f64>, c: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for (v, ci) in row.iter_mut().zip(c.iter()) {
            *v *= ci;
        }
    }
    out
}

fn scale_rows(m: &Array2<f64>, c: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (mut row, ci) in out.axis_iter_mut(Axis(0)).zip(c.iter()) {
        for v in row.iter_mut() {
            *v *= ci;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize;
    use crate::model::{ModelDims, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(n: usize, d_in: usize, seed: u64) -> ActivationBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((n, d_in), |_| StandardNormal.sample(&mut rng));
        normalize(&raw).unwrap()
    }

    fn model_for(variant: Variant, seed: u64) -> BilinearModel {
        let d_mix = if variant.has_mixer() { Some(3) } else { None };
        BilinearModel::init(ModelDims::new(4, 6, d_mix).unwrap(), variant, seed).unwrap()
    }

    fn total_of(model: &BilinearModel, batch: &ActivationBatch, alpha: f64) -> f64 {
        crate::losses::total_loss(model, batch, alpha).unwrap().total
    }

    /// Central finite differences on every entry of every parameter matrix.
    fn check_fd(variant: Variant, alpha: f64, seed: u64) {
        let model = model_for(variant, seed);
        let batch = random_batch(8, 4, seed.wrapping_add(99));
        let (_, grads) = loss_gradients(&model, &batch, alpha).unwrap();
        let h = 1e-5;

        let check = |get: &dyn Fn(&BilinearModel) -> &Array2<f64>,
                         set: &dyn Fn(&mut BilinearModel, (usize, usize), f64),
                         grad: &Array2<f64>,
                         name: &str| {
            for ((i, j), g) in grad.indexed_iter() {
                let orig = get(&model)[[i, j]];
                let mut plus = model.clone();
                set(&mut plus, (i, j), orig + h);
                let mut minus = model.clone();
                set(&mut minus, (i, j), orig - h);
                let fd = (total_of(&plus, &batch, alpha) - total_of(&minus, &batch, alpha))
                    / (2.0 * h);
                let denom = 1e-6 + fd.abs().max(g.abs());
                assert!(
                    (fd - g).abs() / denom <= 1e-4,
                    "{name}[{i},{j}]: analytic {g} vs fd {fd} ({variant:?}, alpha {alpha})"
                );
            }
        };

        check(&|m| &m.l, &|m, ij, v| m.l[ij] = v, &grads.l, "L");
        check(&|m| &m.r, &|m, ij, v| m.r[ij] = v, &grads.r, "R");
        if let Some(gd) = &grads.d {
            check(
                &|m| m.d.as_ref().unwrap(),
                &|m, ij, v| m.d.as_mut().unwrap()[ij] = v,
                gd,
                "D",
            );
        }
    }

    #[test]
    fn fd_vanilla() {
        check_fd(Variant::Vanilla, 0.0, 1);
        check_fd(Variant::Vanilla, 0.3, 2);
    }

    #[test]
    fn fd_ordered() {
        check_fd(Variant::Ordered, 0.0, 3);
        check_fd(Variant::Ordered, 0.2, 4);
    }

    #[test]
    fn fd_mixed() {
        check_fd(Variant::Mixed, 0.0, 5);
        check_fd(Variant::Mixed, 0.25, 6);
    }

    #[test]
    fn fd_combined() {
        check_fd(Variant::Combined, 0.0, 7);
        check_fd(Variant::Combined, 0.15, 8);
    }

    #[test]
    fn loss_value_matches_losses_module() {
        for (variant, seed) in [
            (Variant::Vanilla, 10u64),
            (Variant::Ordered, 11),
            (Variant::Mixed, 12),
            (Variant::Combined, 13),
        ] {
            let model = model_for(variant, seed);
            let batch = random_batch(6, 4, seed);
            let (lb, _) = loss_gradients(&model, &batch, 0.1).unwrap();
            let reference = crate::losses::total_loss(&model, &batch, 0.1).unwrap();
            assert!((lb.error - reference.error).abs() <= 1e-10 * (1.0 + reference.error.abs()));
            assert!((lb.total - reference.total).abs() <= 1e-10 * (1.0 + reference.total.abs()));
        }
    }
}
