//! Training objectives evaluated through the kernel trick.
//!
//! All reconstruction errors are of unit-normalised inputs, so the constant
//! `X^T X` term equals 1 (or the total prefix weight for cumulative losses).

use ndarray::{Array2, ArrayView1, Axis};

use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::kernels::{
    blocked_quadratic_form, ordered_mask, uniform_prefix_weights, KernelFactors, TileSchedule,
};
use crate::model::{BilinearModel, Variant};

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    /// mean reconstruction SSE over samples
    pub error: f64,
    /// mean Hoyer density over latents
    pub density: f64,
    /// error + alpha * density term
    pub total: f64,
}

/// Scale-invariant density `(|v|_1/|v|_2 − 1)/(√n − 1)` in [0, 1].
/// Zero vectors score 0 by convention.
pub fn hoyer_density(v: ArrayView1<f64>) -> Result<f64> {
    let n = v.len();
    if n < 2 {
        return Err(Error::Invalid("hoyer_density needs a vector of length >= 2".into()));
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    let l2: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return Ok(0.0);
    }
    Ok((l1 / l2 - 1.0) / ((n as f64).sqrt() - 1.0))
}

/// Mean over latents of the per-column Hoyer density (columns taken across
/// all samples).
pub fn batch_density_penalty(f: &Array2<f64>) -> Result<f64> {
    weighted_density_penalty(f, None)
}

/// Penalty weights for ordered variants: latent `j` gets weight
/// `(d_lat − j)`, normalised to sum to 1 across latents.
pub fn ordered_penalty_weights(d_lat: usize) -> Vec<f64> {
    let total: f64 = (1..=d_lat).map(|k| k as f64).sum();
    (0..d_lat).map(|j| (d_lat - j) as f64 / total).collect()
}

/// Weighted mean over latents of the per-column Hoyer density. `None`
/// weights mean the plain average.
pub fn weighted_density_penalty(f: &Array2<f64>, weights: Option<&[f64]>) -> Result<f64> {
    let (n, d_lat) = f.dim();
    if n < 2 {
        return Err(Error::Invalid("density penalty needs at least 2 samples".into()));
    }
    if d_lat == 0 {
        return Ok(0.0);
    }
    if let Some(w) = weights {
        if w.len() != d_lat {
            return Err(Error::shape("density weights", d_lat, w.len()));
        }
    }
    let mut acc = 0.0f64;
    for (j, col) in f.axis_iter(Axis(1)).enumerate() {
        let h = hoyer_density(col)?;
        let w = weights.map_or(1.0 / d_lat as f64, |w| w[j]);
        acc += w * h;
    }
    Ok(acc)
}

fn check_f(model: &BilinearModel, f: &Array2<f64>) -> Result<()> {
    if f.ncols() != model.dims.d_lat {
        return Err(Error::shape("latent batch", model.dims.d_lat, f.ncols()));
    }
    Ok(())
}

/// Per-sample `f^T K f − 2 |f|² + 1`.
pub fn sse_vanilla(model: &BilinearModel, f: &Array2<f64>) -> Result<Vec<f64>> {
    check_f(model, f)?;
    let sched = TileSchedule::default_for(model.dims.d_lat);
    let quad = blocked_quadratic_form(f, &KernelFactors::plain(model), &sched, None)?;
    Ok(quad
        .iter()
        .zip(f.axis_iter(Axis(0)))
        .map(|(q, row)| {
            let norm2: f64 = row.iter().map(|x| x * x).sum();
            q - 2.0 * norm2 + 1.0
        })
        .collect())
}

/// Per-sample cumulative SSE: `f^T (K ⊙ W) f − 2 Σ_i c_i f_i² + Σ_k w_k`.
pub fn sse_ordered(model: &BilinearModel, f: &Array2<f64>, w: &[f64]) -> Result<Vec<f64>> {
    check_f(model, f)?;
    let d_lat = model.dims.d_lat;
    let mask = ordered_mask(d_lat, w)?;
    let sched = TileSchedule::default_for(d_lat);
    let quad = blocked_quadratic_form(f, &KernelFactors::plain(model), &sched, Some(&mask))?;
    Ok(quad
        .iter()
        .zip(f.axis_iter(Axis(0)))
        .map(|(q, row)| {
            let weighted: f64 = row.iter().zip(mask.c.iter()).map(|(x, c)| c * x * x).sum();
            q - 2.0 * weighted + mask.total
        })
        .collect())
}

/// Per-sample mixed SSE: with `g = D f`, `g^T K_mix g − 2 |g|² + 1`.
pub fn sse_mixed(model: &BilinearModel, f: &Array2<f64>) -> Result<Vec<f64>> {
    check_f(model, f)?;
    let d = model
        .d
        .as_ref()
        .ok_or_else(|| Error::Variant("sse_mixed requires the mixer D".into()))?;
    let sched = TileSchedule::default_for(model.dims.d_lat);
    let quad = blocked_quadratic_form(f, &KernelFactors::mixed(model)?, &sched, None)?;
    let g = f.dot(&d.t());
    Ok(quad
        .iter()
        .zip(g.axis_iter(Axis(0)))
        .map(|(q, grow)| {
            let norm2: f64 = grow.iter().map(|x| x * x).sum();
            q - 2.0 * norm2 + 1.0
        })
        .collect())
}

/// Per-sample combined SSE:
/// `f^T ((EKE) ⊙ W) f − 2 f^T Diag(c) E f + Σ_k w_k` with `E = D^T D`.
pub fn sse_combined(model: &BilinearModel, f: &Array2<f64>, w: &[f64]) -> Result<Vec<f64>> {
    check_f(model, f)?;
    let d = model
        .d
        .as_ref()
        .ok_or_else(|| Error::Variant("sse_combined requires the mixer D".into()))?;
    let d_lat = model.dims.d_lat;
    let mask = ordered_mask(d_lat, w)?;
    let sched = TileSchedule::default_for(d_lat);
    let quad = blocked_quadratic_form(f, &KernelFactors::mixed(model)?, &sched, Some(&mask))?;
    let fe = f.dot(&d.t()).dot(d); // rows are E f_s
    Ok(quad
        .iter()
        .zip(f.axis_iter(Axis(0)).zip(fe.axis_iter(Axis(0))))
        .map(|(q, (frow, ferow))| {
            let cross: f64 = frow
                .iter()
                .zip(ferow.iter())
                .zip(mask.c.iter())
                .map(|((fi, fei), c)| c * fi * fei)
                .sum();
            q - 2.0 * cross + mask.total
        })
        .collect())
}

/// Variant-dispatched per-sample SSE with the default uniform prefix weights.
pub fn sse_for_variant(model: &BilinearModel, f: &Array2<f64>) -> Result<Vec<f64>> {
    let w = uniform_prefix_weights(model.dims.d_lat);
    match model.variant {
        Variant::Vanilla => sse_vanilla(model, f),
        Variant::Ordered => sse_ordered(model, f, &w),
        Variant::Mixed => sse_mixed(model, f),
        Variant::Combined => sse_combined(model, f, &w),
    }
}

/// Full objective: mean SSE plus `alpha` times the density penalty.
/// Ordered variants weight the per-latent penalty by `(d_lat − j)`.
pub fn total_loss(model: &BilinearModel, batch: &ActivationBatch, alpha: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 {
        return Err(Error::Invalid("alpha must be >= 0".into()));
    }
    let lat = model.encode(batch)?;
    let per_sample = sse_for_variant(model, &lat.f)?;
    let n = per_sample.len().max(1);
    let error = per_sample.iter().sum::<f64>() / n as f64;
    let density = batch_density_penalty(&lat.f)?;
    let penalty = if model.variant.has_ordering() {
        weighted_density_penalty(&lat.f, Some(&ordered_penalty_weights(model.dims.d_lat)))?
    } else {
        density
    };
    Ok(LossBreakdown { error, density, total: error + alpha * penalty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize;
    use crate::model::{ModelDims, Variant};
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(n: usize, d_in: usize, seed: u64) -> ActivationBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((n, d_in), |_| StandardNormal.sample(&mut rng));
        normalize(&raw).unwrap()
    }

    #[test]
    fn hoyer_one_hot_is_zero() {
        let v = Array1::from(vec![0.0, 0.0, 5.0, 0.0]);
        assert_eq!(hoyer_density(v.view()).unwrap(), 0.0);
    }

    #[test]
    fn hoyer_uniform_is_one() {
        let v = Array1::from(vec![2.0; 9]);
        assert!((hoyer_density(v.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hoyer_worked_example() {
        // (7/5 − 1)/(√4 − 1) = 0.4
        let v = Array1::from(vec![3.0, 4.0, 0.0, 0.0]);
        assert!((hoyer_density(v.view()).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn hoyer_gaussian_expectation_near_point_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let v = Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
        let h = hoyer_density(v.view()).unwrap();
        assert!((h - 0.8).abs() < 0.01, "got {h}");
    }

    #[test]
    fn hoyer_rejects_short_vectors() {
        assert!(hoyer_density(Array1::from(vec![1.0]).view()).is_err());
    }

    #[test]
    fn hoyer_zero_vector_is_zero() {
        assert_eq!(hoyer_density(Array1::from(vec![0.0, 0.0]).view()).unwrap(), 0.0);
    }

    #[test]
    fn penalty_identity_like_batch_is_zero() {
        let f = Array2::<f64>::eye(4);
        assert!(batch_density_penalty(&f).unwrap().abs() < 1e-12);
    }

    #[test]
    fn penalty_constant_batch_is_one() {
        let f = Array2::<f64>::from_elem((5, 3), 0.7);
        assert!((batch_density_penalty(&f).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_needs_two_samples() {
        let f = Array2::<f64>::from_elem((1, 3), 0.7);
        assert!(batch_density_penalty(&f).is_err());
    }

    #[test]
    fn ordered_penalty_weight_ratio() {
        let w = ordered_penalty_weights(8);
        assert!((w[0] / w[7] - 8.0).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sse_perfect_rank_one() {
        // d_in=1, L=R=(1), x=(1): f=1, K=1 -> 1 - 2 + 1 = 0
        let m = BilinearModel::from_parts(Variant::Vanilla, array![[1.0]], array![[1.0]], None)
            .unwrap();
        let b = normalize(&array![[1.0]]).unwrap();
        let f = m.encode(&b).unwrap().f;
        let sse = sse_vanilla(&m, &f).unwrap();
        assert!(sse[0].abs() < 1e-12);
    }

    #[test]
    fn sse_empty_model_is_one() {
        let m = BilinearModel::from_parts(
            Variant::Vanilla,
            Array2::<f64>::zeros((0, 3)),
            Array2::<f64>::zeros((0, 3)),
            None,
        )
        .unwrap();
        let b = random_batch(4, 3, 1);
        let f = m.encode(&b).unwrap().f;
        let sse = sse_vanilla(&m, &f).unwrap();
        assert!(sse.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sse_vanilla_matches_materialisation_oracle() {
        let m = BilinearModel::init(ModelDims::new(4, 8, None).unwrap(), Variant::Vanilla, 7)
            .unwrap();
        let b = random_batch(6, 4, 2);
        let f = m.encode(&b).unwrap().f;
        let fast = sse_vanilla(&m, &f).unwrap();
        let slow = crate::oracle::sse_vanilla(&m, &b);
        for (a, o) in fast.iter().zip(slow.iter()) {
            assert!((a - o).abs() <= 1e-9 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn sse_ordered_single_latent_reduces_to_vanilla() {
        let m = BilinearModel::init(ModelDims::new(3, 1, None).unwrap(), Variant::Ordered, 3)
            .unwrap();
        let b = random_batch(4, 3, 5);
        let f = m.encode(&b).unwrap().f;
        let o = sse_ordered(&m, &f, &[1.0]).unwrap();
        let v = sse_vanilla(&m, &f).unwrap();
        for (a, bb) in o.iter().zip(v.iter()) {
            assert!((a - bb).abs() < 1e-12);
        }
    }

    #[test]
    fn sse_ordered_full_prefix_only_reduces_to_vanilla() {
        let m = BilinearModel::init(ModelDims::new(4, 6, None).unwrap(), Variant::Ordered, 9)
            .unwrap();
        let b = random_batch(4, 4, 6);
        let f = m.encode(&b).unwrap().f;
        let mut w = vec![0.0; 6];
        w[5] = 1.0;
        let o = sse_ordered(&m, &f, &w).unwrap();
        let v = sse_vanilla(&m, &f).unwrap();
        for (a, bb) in o.iter().zip(v.iter()) {
            assert!((a - bb).abs() < 1e-10);
        }
    }

    #[test]
    fn sse_ordered_matches_cumulative_oracle() {
        let m = BilinearModel::init(ModelDims::new(4, 6, None).unwrap(), Variant::Ordered, 13)
            .unwrap();
        let b = random_batch(5, 4, 8);
        let f = m.encode(&b).unwrap().f;
        let w = uniform_prefix_weights(6);
        let fast = sse_ordered(&m, &f, &w).unwrap();
        let slow = crate::oracle::sse_ordered(&m, &b, &w);
        for (a, o) in fast.iter().zip(slow.iter()) {
            assert!((a - o).abs() <= 1e-9 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn sse_mixed_identity_mixer_reduces_to_vanilla() {
        let mut m = BilinearModel::init(ModelDims::new(4, 5, Some(5)).unwrap(), Variant::Mixed, 4)
            .unwrap();
        m.d = Some(Array2::<f64>::eye(5));
        let b = random_batch(4, 4, 9);
        let f = m.encode(&b).unwrap().f;
        let mixed = sse_mixed(&m, &f).unwrap();
        let vanilla = sse_vanilla(&m, &f).unwrap();
        for (a, bb) in mixed.iter().zip(vanilla.iter()) {
            assert!((a - bb).abs() < 1e-10);
        }
    }

    #[test]
    fn sse_mixed_zero_mixer_is_one() {
        let mut m = BilinearModel::init(ModelDims::new(4, 5, Some(2)).unwrap(), Variant::Mixed, 4)
            .unwrap();
        m.d = Some(Array2::<f64>::zeros((2, 5)));
        let b = random_batch(4, 4, 10);
        let f = m.encode(&b).unwrap().f;
        let mixed = sse_mixed(&m, &f).unwrap();
        assert!(mixed.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sse_mixed_matches_materialisation_oracle() {
        let m = BilinearModel::init(ModelDims::new(4, 7, Some(3)).unwrap(), Variant::Mixed, 21)
            .unwrap();
        let b = random_batch(5, 4, 11);
        let f = m.encode(&b).unwrap().f;
        let fast = sse_mixed(&m, &f).unwrap();
        let slow = crate::oracle::sse_mixed(&m, &b);
        for (a, o) in fast.iter().zip(slow.iter()) {
            assert!((a - o).abs() <= 1e-9 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn sse_combined_identity_mixer_equals_ordered() {
        let mut m =
            BilinearModel::init(ModelDims::new(4, 5, Some(5)).unwrap(), Variant::Combined, 6)
                .unwrap();
        m.d = Some(Array2::<f64>::eye(5));
        let b = random_batch(4, 4, 12);
        let f = m.encode(&b).unwrap().f;
        let w = uniform_prefix_weights(5);
        let comb = sse_combined(&m, &f, &w).unwrap();
        let ord = sse_ordered(&m, &f, &w).unwrap();
        for (a, bb) in comb.iter().zip(ord.iter()) {
            assert!((a - bb).abs() < 1e-10);
        }
    }

    #[test]
    fn sse_combined_matches_cumulative_mixed_oracle() {
        let m = BilinearModel::init(ModelDims::new(4, 6, Some(3)).unwrap(), Variant::Combined, 17)
            .unwrap();
        let b = random_batch(5, 4, 13);
        let f = m.encode(&b).unwrap().f;
        let w = uniform_prefix_weights(6);
        let fast = sse_combined(&m, &f, &w).unwrap();
        let slow = crate::oracle::sse_combined(&m, &b, &w);
        for (a, o) in fast.iter().zip(slow.iter()) {
            assert!((a - o).abs() <= 1e-9 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn total_loss_alpha_zero_is_error_only() {
        let m = BilinearModel::init(ModelDims::new(4, 6, None).unwrap(), Variant::Vanilla, 1)
            .unwrap();
        let b = random_batch(8, 4, 14);
        let lb = total_loss(&m, &b, 0.0).unwrap();
        assert_eq!(lb.total, lb.error);
        assert!(lb.density >= 0.0 && lb.density <= 1.0);
    }

    #[test]
    fn k_sparse_density_bound() {
        // The tight bound for a k-sparse vector is (sqrt(k)-1)/(sqrt(n)-1),
        // attained by equal entries; it is always <= sqrt(k/n). The often
        // quoted k/n figure is exceeded for k >= 2 (e.g. k=2, n=16 gives
        // 0.138 > 0.125), so we assert the provable bound here.
        let n = 16;
        for k in [1usize, 2, 4, 8] {
            let mut v = vec![0.0f64; n];
            for x in v.iter_mut().take(k) {
                *x = 1.3;
            }
            let h = hoyer_density(Array1::from(v).view()).unwrap();
            let tight = ((k as f64).sqrt() - 1.0) / ((n as f64).sqrt() - 1.0);
            assert!((h - tight).abs() <= 1e-12, "k={k} h={h} tight={tight}");
            assert!(h <= (k as f64 / n as f64).sqrt() + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn penalty_is_scale_invariant(scale in prop::sample::select(vec![1e-3f64, 1.0, 1e3]),
                                      seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Array2::from_shape_fn((6, 4), |_| StandardNormal.sample(&mut rng));
            let a = batch_density_penalty(&f).unwrap();
            let b = batch_density_penalty(&(f * scale)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn hoyer_in_unit_interval(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array1::from_shape_fn(10, |_| StandardNormal.sample(&mut rng));
            let h = hoyer_density(v.view()).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&h));
        }
    }
}
