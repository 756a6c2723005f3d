//! Brute-force reference implementations that materialise the product-space
//! encoder `B` (rows `vec(l_j ⊗ r_j)`, size Lat × In²).
//!
//! These are deliberately naive and independent of the kernel-trick path;
//! they back the test suites and the `verify` CLI subcommand. Dimensions are
//! kept tiny so everything finishes in seconds.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{normalize, ActivationBatch};
use crate::kernels::{blocked_quadratic_form, ordered_mask, KernelFactors, TileSchedule};
use crate::losses;
use crate::model::{BilinearModel, ModelDims, Variant};

/// The flattened encoder: row `j` is `vec(l_j r_j^T)` in row-major order.
pub fn materialized_b(model: &BilinearModel) -> Array2<f64> {
    let d_in = model.dims.d_in;
    let mut b = Array2::<f64>::zeros((model.dims.d_lat, d_in * d_in));
    for j in 0..model.dims.d_lat {
        let form = model.latent_form(j).expect("index in range");
        for (col, v) in form.iter().enumerate() {
            b[[j, col]] = *v;
        }
    }
    b
}

/// `vec(x ⊗ x)` in row-major order.
pub fn product_vector(x: &Array1<f64>) -> Array1<f64> {
    let d = x.len();
    Array1::from_shape_fn(d * d, |idx| x[idx / d] * x[idx % d])
}

/// Encoding through the materialised encoder: `f = B vec(x ⊗ x)`.
pub fn encode(model: &BilinearModel, batch: &ActivationBatch) -> Array2<f64> {
    let b = materialized_b(model);
    let n = batch.n_samples();
    let mut out = Array2::<f64>::zeros((n, model.dims.d_lat));
    for (s, row) in batch.rows.axis_iter(Axis(0)).enumerate() {
        let xv = product_vector(&row.to_owned());
        out.row_mut(s).assign(&b.dot(&xv));
    }
    out
}

pub fn kernel(model: &BilinearModel) -> Array2<f64> {
    let b = materialized_b(model);
    b.dot(&b.t())
}

fn prefix_mask(d_lat: usize, k: usize) -> Array1<f64> {
    Array1::from_shape_fn(d_lat, |i| if i <= k { 1.0 } else { 0.0 })
}

/// `|B^T E (f ⊙ m) − X|²` for a single sample, with optional mixer gram `E`
/// and latent mask `m`. Setting `m` to the full mask and `E` to None gives
/// the vanilla reconstruction error.
fn masked_sse(
    b: &Array2<f64>,
    e: Option<&Array2<f64>>,
    f: &Array1<f64>,
    mask: Option<&Array1<f64>>,
    xv: &Array1<f64>,
) -> f64 {
    let fm = match mask {
        Some(m) => f * m,
        None => f.clone(),
    };
    let latent = match e {
        Some(e) => e.dot(&fm),
        None => fm,
    };
    let recon = b.t().dot(&latent);
    let diff = &recon - xv;
    diff.dot(&diff)
}

pub fn sse_vanilla(model: &BilinearModel, batch: &ActivationBatch) -> Vec<f64> {
    let b = materialized_b(model);
    per_sample(model, batch, |f, xv| masked_sse(&b, None, f, None, xv))
}

pub fn sse_ordered(model: &BilinearModel, batch: &ActivationBatch, w: &[f64]) -> Vec<f64> {
    let b = materialized_b(model);
    let d_lat = model.dims.d_lat;
    per_sample(model, batch, |f, xv| {
        (0..d_lat)
            .map(|k| w[k] * masked_sse(&b, None, f, Some(&prefix_mask(d_lat, k)), xv))
            .sum()
    })
}

pub fn sse_mixed(model: &BilinearModel, batch: &ActivationBatch) -> Vec<f64> {
    let b = materialized_b(model);
    let e = model.mixer_gram().expect("mixed oracle requires D");
    per_sample(model, batch, |f, xv| masked_sse(&b, Some(&e), f, None, xv))
}

pub fn sse_combined(model: &BilinearModel, batch: &ActivationBatch, w: &[f64]) -> Vec<f64> {
    let b = materialized_b(model);
    let e = model.mixer_gram().expect("combined oracle requires D");
    let d_lat = model.dims.d_lat;
    per_sample(model, batch, |f, xv| {
        (0..d_lat)
            .map(|k| w[k] * masked_sse(&b, Some(&e), f, Some(&prefix_mask(d_lat, k)), xv))
            .sum()
    })
}

fn per_sample<F: Fn(&Array1<f64>, &Array1<f64>) -> f64>(
    model: &BilinearModel,
    batch: &ActivationBatch,
    eval: F,
) -> Vec<f64> {
    let f = encode(model, batch);
    batch
        .rows
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(s, row)| {
            let xv = product_vector(&row.to_owned());
            eval(&f.row(s).to_owned(), &xv)
        })
        .collect()
}

/// `|x ⊗ x − x̂ ⊗ x̂|²_F`, materialised.
pub fn product_space_error(x: &Array1<f64>, xhat: &Array1<f64>) -> f64 {
    let a = product_vector(x);
    let b = product_vector(xhat);
    let diff = &a - &b;
    diff.dot(&diff)
}

// ---------------------------------------------------------------------------
// User-runnable verification suite (the `verify` subcommand)
// ---------------------------------------------------------------------------

pub struct Verification {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn random_model<R: Rng>(rng: &mut R, mixer: bool) -> BilinearModel {
    let d_in = rng.gen_range(2..=8);
    let d_lat = rng.gen_range(1..=16);
    let d_mix = if mixer { Some(rng.gen_range(1..=d_lat.min(8))) } else { None };
    let variant = if mixer { Variant::Mixed } else { Variant::Vanilla };
    let seed = rng.gen::<u64>();
    BilinearModel::init(ModelDims::new(d_in, d_lat, d_mix).unwrap(), variant, seed).unwrap()
}

fn random_batch<R: Rng>(rng: &mut R, n: usize, d_in: usize) -> ActivationBatch {
    let raw = Array2::from_shape_fn((n, d_in), |_| rng.sample::<f64, _>(StandardNormal));
    normalize(&raw).unwrap()
}

/// Run the oracle-equivalence properties and return one record per check.
pub fn run_verification(seed: u64, trials: usize) -> Vec<Verification> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // kernel identity
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let m = random_model(&mut rng, false);
        let kt = crate::kernels::plain_kernel(&m).k;
        let ko = kernel(&m);
        for (a, b) in kt.iter().zip(ko.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(Verification {
        name: "kernel identity (LL^T ⊙ RR^T = BB^T)".into(),
        passed: worst <= 1e-6,
        detail: format!("max abs deviation {worst:.3e}"),
    });

    // loss equivalence per variant
    for variant in ["vanilla", "ordered", "mixed", "combined"] {
        let mixer = matches!(variant, "mixed" | "combined");
        let mut worst_rel = 0.0f64;
        for _ in 0..trials {
            let m = random_model(&mut rng, mixer);
            let batch = random_batch(&mut rng, 4, m.dims.d_in);
            let lat = m.encode(&batch).unwrap();
            let w = crate::kernels::uniform_prefix_weights(m.dims.d_lat);
            let (fast, slow) = match variant {
                "vanilla" => (losses::sse_vanilla(&m, &lat.f).unwrap(), sse_vanilla(&m, &batch)),
                "ordered" => (
                    losses::sse_ordered(&m, &lat.f, &w).unwrap(),
                    sse_ordered(&m, &batch, &w),
                ),
                "mixed" => (losses::sse_mixed(&m, &lat.f).unwrap(), sse_mixed(&m, &batch)),
                _ => (
                    losses::sse_combined(&m, &lat.f, &w).unwrap(),
                    sse_combined(&m, &batch, &w),
                ),
            };
            for (a, b) in fast.iter().zip(slow.iter()) {
                worst_rel = worst_rel.max((a - b).abs() / (1.0 + b.abs()));
            }
        }
        out.push(Verification {
            name: format!("{variant} SSE kernel trick vs materialised oracle"),
            passed: worst_rel <= 1e-5,
            detail: format!("max rel deviation {worst_rel:.3e}"),
        });
    }

    // blocked evaluation self-consistency
    let mut worst_rel = 0.0f64;
    for _ in 0..trials.min(20) {
        let m = random_model(&mut rng, false);
        let d_lat = m.dims.d_lat;
        let f = Array2::from_shape_fn((3, d_lat), |_| rng.sample::<f64, _>(StandardNormal));
        let mask = ordered_mask(d_lat, &crate::kernels::uniform_prefix_weights(d_lat)).unwrap();
        let reference = blocked_quadratic_form(
            &f,
            &KernelFactors::plain(&m),
            &TileSchedule::new(d_lat, d_lat.max(1)).unwrap(),
            Some(&mask),
        )
        .unwrap();
        for bs in [1usize, 2, (d_lat / 2).max(1)] {
            let got = blocked_quadratic_form(
                &f,
                &KernelFactors::plain(&m),
                &TileSchedule::new(d_lat, bs).unwrap(),
                Some(&mask),
            )
            .unwrap();
            for (a, b) in got.iter().zip(reference.iter()) {
                worst_rel = worst_rel.max((a - b).abs() / (1.0 + b.abs()));
            }
        }
    }
    out.push(Verification {
        name: "blocked quadratic form consistent across tile sizes".into(),
        passed: worst_rel <= 1e-5,
        detail: format!("max rel deviation {worst_rel:.3e}"),
    });

    // encode vs Kronecker oracle
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let m = random_model(&mut rng, false);
        let batch = random_batch(&mut rng, 3, m.dims.d_in);
        let fast = m.encode(&batch).unwrap().f;
        let slow = encode(&m, &batch);
        for (a, b) in fast.iter().zip(slow.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(Verification {
        name: "encode vs Kronecker oracle".into(),
        passed: worst <= 1e-9,
        detail: format!("max abs deviation {worst:.3e}"),
    });

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_vector_small() {
        let x = Array1::from(vec![1.0, 2.0]);
        let v = product_vector(&x);
        assert_eq!(v.to_vec(), vec![1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn verification_suite_passes() {
        let results = run_verification(123, 25);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
