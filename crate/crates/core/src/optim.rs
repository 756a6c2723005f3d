//! Orthogonalised-gradient optimizer (Muon-style, no momentum) with a
//! trapezoid learning-rate schedule and linear alpha warm-up.
//!
//! Each parameter matrix is updated with an approximately semi-orthogonal
//! version of its raw gradient, produced by a quintic Newton–Schulz sign
//! iteration, scaled by sqrt(max(rows, cols)/min(rows, cols)).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grad::Gradients;
use crate::model::BilinearModel;

/// Quintic iteration coefficients; singular values land in roughly
/// [0.7, 1.3] after five iterations.
const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Cubic polishing iterations after the quintic phase. The quintic map has
/// no fixed point at 1 (it oscillates between ~0.70 and ~1.13); the cubic
/// map 1.5x − 0.5x³ converges quadratically to 1 from inside that band.
const NS_POLISH_ITERS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    /// fraction of steps at peak lr before the linear cooldown
    pub warmup_frac: f64,
    /// steps of linear ramp from 0 to the target alpha
    pub alpha_warmup_steps: usize,
    pub ns_iters: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            steps: 1024,
            warmup_frac: 0.5,
            alpha_warmup_steps: 256,
            ns_iters: 5,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac <= 1.0) {
            return Err(Error::Config("warmup_frac must lie in (0, 1]".into()));
        }
        if self.ns_iters == 0 {
            return Err(Error::Config("ns_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Map the singular values of `g` toward 1 with Newton–Schulz iterations.
/// The zero matrix maps to zero; non-finite entries are rejected.
pub fn orthogonalize(g: &Array2<f64>, iters: usize) -> Result<Array2<f64>> {
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("orthogonalize input".into()));
    }
    let (rows, cols) = g.dim();
    if rows == 0 || cols == 0 {
        return Ok(g.clone());
    }
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(g.clone());
    }
    // work on the wide orientation so X X^T is the smaller gram
    let transposed = rows > cols;
    let mut x = if transposed { g.t().to_owned() / norm } else { g.clone() / norm };
    let (a, b, c) = NS_COEFFS;
    for _ in 0..iters {
        let gram = x.dot(&x.t());
        let gram2 = gram.dot(&gram);
        let poly = &gram * b + &gram2 * c;
        x = &x * a + &poly.dot(&x);
    }
    for _ in 0..NS_POLISH_ITERS {
        let gram = x.dot(&x.t());
        x = &x * 1.5 - &(gram.dot(&x) * 0.5);
    }
    Ok(if transposed { x.t().to_owned() } else { x })
}

/// Trapezoid schedule: peak until `warmup_frac`, then linear decay to 0 at
/// `steps`.
pub fn lr_at(step: usize, config: &OptimConfig) -> Result<f64> {
    if step >= config.steps {
        return Err(Error::Invalid(format!(
            "step {step} out of range (steps {})",
            config.steps
        )));
    }
    let plateau = config.steps as f64 * config.warmup_frac;
    let s = step as f64;
    if s < plateau {
        Ok(config.lr)
    } else {
        Ok(config.lr * (config.steps as f64 - s) / (config.steps as f64 - plateau))
    }
}

/// Linear alpha warm-up: `alpha_target * min(1, step / alpha_warmup_steps)`.
pub fn alpha_at(step: usize, alpha_target: f64, config: &OptimConfig) -> f64 {
    if config.alpha_warmup_steps == 0 {
        return alpha_target;
    }
    alpha_target * (step as f64 / config.alpha_warmup_steps as f64).min(1.0)
}

fn shape_scale(rows: usize, cols: usize) -> f64 {
    let (hi, lo) = (rows.max(cols) as f64, rows.min(cols).max(1) as f64);
    (hi / lo).sqrt()
}

fn apply_update(p: &mut Array2<f64>, g: &Array2<f64>, lr: f64, ns_iters: usize) -> Result<()> {
    if p.dim() != g.dim() {
        return Err(Error::shape(
            "optimizer step",
            format!("{:?}", p.dim()),
            format!("{:?}", g.dim()),
        ));
    }
    let ortho = orthogonalize(g, ns_iters)?;
    let scale = shape_scale(p.nrows(), p.ncols());
    p.scaled_add(-lr * scale, &ortho);
    Ok(())
}

/// One optimizer step over all parameter matrices of a bilinear model.
pub fn step(
    model: &mut BilinearModel,
    grads: &Gradients,
    step_index: usize,
    config: &OptimConfig,
) -> Result<()> {
    let lr = lr_at(step_index, config)?;
    apply_update(&mut model.l, &grads.l, lr, config.ns_iters)?;
    apply_update(&mut model.r, &grads.r, lr, config.ns_iters)?;
    match (&mut model.d, &grads.d) {
        (Some(p), Some(g)) => apply_update(p, g, lr, config.ns_iters)?,
        (None, None) => {}
        _ => return Err(Error::Variant("mixer gradient/parameter mismatch".into())),
    }
    Ok(())
}

/// Update an arbitrary matrix parameter (used by the TopK baseline).
pub fn step_matrix(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    step_index: usize,
    config: &OptimConfig,
) -> Result<()> {
    let lr = lr_at(step_index, config)?;
    apply_update(p, g, lr, config.ns_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn singular_values(m: &Array2<f64>) -> Vec<f64> {
        let (r, c) = m.dim();
        let dm = DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
        dm.svd(false, false).singular_values.iter().cloned().collect()
    }

    #[test]
    fn orthogonalize_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = crate::linalg::random_semi_orthogonal(4, 8, &mut rng);
        let o = orthogonalize(&g, 5).unwrap();
        for (a, b) in o.iter().zip(g.iter()) {
            assert!((a - b).abs() <= 0.05);
        }
    }

    #[test]
    fn orthogonalize_diagonal_case() {
        let g = array![[2.0, 0.0], [0.0, 0.5]];
        let o = orthogonalize(&g, 5).unwrap();
        let eye = Array2::<f64>::eye(2);
        for (a, b) in o.iter().zip(eye.iter()) {
            assert!((a - b).abs() <= 0.05, "got {o:?}");
        }
    }

    #[test]
    fn orthogonalize_singular_value_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = Array2::from_shape_fn((8, 4), |_| StandardNormal.sample(&mut rng));
            let o = orthogonalize(&g, 5).unwrap();
            for sv in singular_values(&o) {
                assert!((0.7..=1.3).contains(&sv), "sv {sv}");
            }
        }
    }

    #[test]
    fn orthogonalize_zero_is_zero() {
        let g = Array2::<f64>::zeros((3, 5));
        let o = orthogonalize(&g, 5).unwrap();
        assert!(o.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn orthogonalize_rejects_non_finite() {
        let g = array![[f64::NAN, 0.0]];
        assert!(orthogonalize(&g, 5).is_err());
    }

    #[test]
    fn orthogonalize_transpose_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Array2::from_shape_fn((6, 3), |_| StandardNormal.sample(&mut rng));
        let a = orthogonalize(&g, 5).unwrap();
        let b = orthogonalize(&g.t().to_owned(), 5).unwrap();
        for (x, y) in a.iter().zip(b.t().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = OptimConfig { lr: 0.01, steps: 1000, ..Default::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.01);
        assert_eq!(lr_at(499, &cfg).unwrap(), 0.01);
        assert!((lr_at(750, &cfg).unwrap() - 0.005).abs() < 1e-12);
        let last = lr_at(999, &cfg).unwrap();
        assert!((last - 0.01 / 500.0).abs() < 1e-12);
        assert!(lr_at(1000, &cfg).is_err());
        // piecewise linear, max equals lr
        let max = (0..1000).map(|s| lr_at(s, &cfg).unwrap()).fold(0.0f64, f64::max);
        assert_eq!(max, 0.01);
    }

    #[test]
    fn alpha_warmup_shape() {
        let cfg = OptimConfig { alpha_warmup_steps: 256, ..Default::default() };
        assert_eq!(alpha_at(0, 0.1, &cfg), 0.0);
        assert!((alpha_at(128, 0.1, &cfg) - 0.05).abs() < 1e-12);
        assert_eq!(alpha_at(256, 0.1, &cfg), 0.1);
        assert_eq!(alpha_at(9999, 0.1, &cfg), 0.1);
    }

    #[test]
    fn zero_gradient_leaves_model_unchanged() {
        use crate::model::{BilinearModel, ModelDims, Variant};
        let mut m = BilinearModel::init(ModelDims::new(4, 6, None).unwrap(), Variant::Vanilla, 3)
            .unwrap();
        let before = m.clone();
        let grads = crate::grad::Gradients {
            l: Array2::zeros((6, 4)),
            r: Array2::zeros((6, 4)),
            d: None,
        };
        step(&mut m, &grads, 0, &OptimConfig::default()).unwrap();
        assert_eq!(m.l, before.l);
        assert_eq!(m.r, before.r);
    }

    #[test]
    fn single_step_reduces_loss() {
        use crate::data::normalize;
        use crate::model::{BilinearModel, ModelDims, Variant};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Array2::from_shape_fn((16, 4), |_| StandardNormal.sample(&mut rng));
        let batch = normalize(&raw).unwrap();
        let mut m = BilinearModel::init(ModelDims::new(4, 8, None).unwrap(), Variant::Vanilla, 7)
            .unwrap();
        let cfg = OptimConfig { lr: 0.02, steps: 10, ..Default::default() };
        let (before, grads) = crate::grad::loss_gradients(&m, &batch, 0.0).unwrap();
        step(&mut m, &grads, 0, &cfg).unwrap();
        let after = crate::losses::total_loss(&m, &batch, 0.0).unwrap();
        assert!(after.error < before.error, "{} !< {}", after.error, before.error);
    }
}
