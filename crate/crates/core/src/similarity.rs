//! Exact weight-based comparison of two autoencoders through their latent
//! cross kernel, without ever building an input-squared-sized object.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernels::plain_kernel;
use crate::model::BilinearModel;

const ASSIGNMENT_MAX_LATENTS: usize = 8192;

/// C[i][j] = (l_i · l'_j)(r_i · r'_j). For a model against itself this is
/// the plain kernel.
pub fn cross_kernel(m1: &BilinearModel, m2: &BilinearModel) -> Result<Array2<f64>> {
    if m1.dims.d_in != m2.dims.d_in {
        return Err(Error::shape("cross kernel", m1.dims.d_in, m2.dims.d_in));
    }
    Ok((m1.l.dot(&m2.l.t())) * (m1.r.dot(&m2.r.t())))
}

fn sq_frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Similarity of the two full reconstruction maps:
/// `2 tr(A^T A') / (|A|² + |A'|²)` with `A = B^T B`, evaluated entirely in
/// latent space via `tr(A^T A') = |C|²_F`.
pub fn frobenius_similarity(m1: &BilinearModel, m2: &BilinearModel) -> Result<f64> {
    let c = cross_kernel(m1, m2)?;
    let trace = sq_frobenius(&c);
    let n1 = sq_frobenius(&plain_kernel(m1).k);
    let n2 = sq_frobenius(&plain_kernel(m2).k);
    let denom = n1 + n2;
    if denom == 0.0 {
        return Err(Error::Invalid("both models have zero reconstruction norm".into()));
    }
    Ok(2.0 * trace / denom)
}

/// Exact solver for the rectangular-free linear assignment problem:
/// maximise `sum_i cost[i][perm[i]]`. O(n³) shortest augmenting paths.
pub fn max_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::shape("assignment", n, cost.ncols()));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    // standard Hungarian on the negated (minimisation) matrix, with
    // potentials; indices are 1-based internally
    let a = cost.mapv(|v| -v);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row matched to col (0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// How much of the cross kernel's norm the best latent permutation can
/// recover: `sqrt(sum_i C[i][π(i)]²) / |C|_F` with π the exact assignment
/// maximising `sum_i C[i][π(i)]`.
pub fn permutation_similarity(
    m1: &BilinearModel,
    m2: &BilinearModel,
) -> Result<(f64, Vec<usize>)> {
    if m1.dims.d_lat != m2.dims.d_lat {
        return Err(Error::shape("permutation similarity", m1.dims.d_lat, m2.dims.d_lat));
    }
    if m1.dims.d_lat > ASSIGNMENT_MAX_LATENTS {
        return Err(Error::Guard(format!(
            "assignment capped at {ASSIGNMENT_MAX_LATENTS} latents, model has {}",
            m1.dims.d_lat
        )));
    }
    let c = cross_kernel(m1, m2)?;
    let total = sq_frobenius(&c);
    if total == 0.0 {
        return Err(Error::Invalid("cross kernel is identically zero".into()));
    }
    let perm = max_assignment(&c)?;
    let selected: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]] * c[[i, j]]).sum();
    Ok(((selected / total).sqrt(), perm))
}

/// Per-latent round-trip self-similarity: the fraction of row i of the
/// model's kernel that sits on the diagonal, `K[i][i] / |K row i|₂`. A
/// latent that interferes with nothing scores 1. Zero-norm latents have no
/// defined value and come back as `None`.
pub fn self_similarity_diagonal(model: &BilinearModel) -> Vec<Option<f64>> {
    let k = plain_kernel(model).k;
    (0..k.nrows())
        .map(|i| {
            let row = k.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                None
            } else {
                Some(k[[i, i]] / norm)
            }
        })
        .collect()
}

/// Mean of the defined entries of [`self_similarity_diagonal`].
pub fn mean_self_similarity(model: &BilinearModel) -> Option<f64> {
    let diag = self_similarity_diagonal(model);
    let defined: Vec<f64> = diag.into_iter().flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Variant};
    use crate::oracle;
    use ndarray::array;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_model(d_in: usize, d_lat: usize, seed: u64) -> BilinearModel {
        BilinearModel::init(ModelDims::new(d_in, d_lat, None).unwrap(), Variant::Vanilla, seed)
            .unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let m = random_model(6, 10, 1);
        let s = frobenius_similarity(&m, &m).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt2_scaling_gives_point_eight() {
        // scaling L by sqrt(2) scales B by sqrt(2), so A' = 2A and the
        // similarity is 2*2/(1+4)
        let m = random_model(5, 8, 2);
        let mut scaled = m.clone();
        scaled.l *= std::f64::consts::SQRT_2;
        let s = frobenius_similarity(&m, &scaled).unwrap();
        assert!((s - 0.8).abs() < 1e-12, "got {s}");
    }

    #[test]
    fn matches_materialized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let seed_a: u64 = rng.next_u64();
            let seed_b: u64 = rng.next_u64();
            let m1 = random_model(4, 6, seed_a);
            let m2 = random_model(4, 6, seed_b);
            let fast = frobenius_similarity(&m1, &m2).unwrap();
            // dense route: A = B^T B materialised
            let b1 = oracle::materialized_b(&m1);
            let b2 = oracle::materialized_b(&m2);
            let a1 = b1.t().dot(&b1);
            let a2 = b2.t().dot(&b2);
            let trace = (&a1 * &a2).sum();
            let brute = 2.0 * trace / (a1.mapv(|x| x * x).sum() + a2.mapv(|x| x * x).sum());
            assert!((fast - brute).abs() <= 1e-5 * brute.abs().max(1.0), "{fast} vs {brute}");
        }
    }

    #[test]
    fn symmetry_and_rotation_invariance() {
        let m1 = random_model(5, 8, 7);
        let m2 = random_model(5, 8, 8);
        let ab = frobenius_similarity(&m1, &m2).unwrap();
        let ba = frobenius_similarity(&m2, &m1).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // jointly rotating (a, b) = (X L^T, X R^T) by a latent permutation
        // leaves A = B^T B unchanged; permuting rows of L and R together is
        // one such orthogonal Q
        let mut rot = m1.clone();
        let perm = [3usize, 1, 7, 0, 5, 2, 6, 4];
        let mut l = Array2::zeros(m1.l.dim());
        let mut r = Array2::zeros(m1.r.dim());
        for (dst, &src) in perm.iter().enumerate() {
            l.row_mut(dst).assign(&m1.l.row(src));
            r.row_mut(dst).assign(&m1.r.row(src));
        }
        rot.l = l;
        rot.r = r;
        let rotated = frobenius_similarity(&rot, &m2).unwrap();
        assert!((ab - rotated).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_exact() {
        let cost = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [3.0, 6.0, 9.0]];
        let perm = max_assignment(&cost).unwrap();
        // brute force over all 6 permutations
        let perms: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let score = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum() };
        let best = perms.iter().map(|p| score(p)).fold(f64::NEG_INFINITY, f64::max);
        assert!((score(&perm) - best).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 5;
            let cost = Array2::from_shape_fn((n, n), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            });
            let perm = max_assignment(&cost).unwrap();
            let got: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            let best = brute_force_best(&cost);
            assert!((got - best).abs() < 1e-9, "{got} vs {best}");
        }
    }

    fn brute_force_best(cost: &Array2<f64>) -> f64 {
        fn rec(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    let v = cost[[row, j]] + rec(cost, row + 1, used);
                    used[j] = false;
                    best = best.max(v);
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.ncols()])
    }

    #[test]
    fn permutation_recovers_planted_row_shuffle() {
        let m1 = random_model(6, 8, 11);
        let sigma = [5usize, 2, 7, 1, 0, 6, 3, 4];
        let mut l = Array2::zeros(m1.l.dim());
        let mut r = Array2::zeros(m1.r.dim());
        for (dst, &src) in sigma.iter().enumerate() {
            l.row_mut(dst).assign(&m1.l.row(src));
            r.row_mut(dst).assign(&m1.r.row(src));
        }
        let m2 = BilinearModel::from_parts(Variant::Vanilla, l, r, None).unwrap();
        let (sim, perm) = permutation_similarity(&m1, &m2).unwrap();
        // m2's row dst holds m1's latent sigma[dst]; the assignment maps
        // m1 row i to m2 row with sigma[dst] = i
        let mut expected = vec![0usize; 8];
        for (dst, &src) in sigma.iter().enumerate() {
            expected[src] = dst;
        }
        assert_eq!(perm, expected);
        assert!(sim > 0.9);
    }

    #[test]
    fn permutation_value_symmetric_under_swap() {
        let m1 = random_model(5, 7, 21);
        let m2 = random_model(5, 7, 22);
        let (ab, _) = permutation_similarity(&m1, &m2).unwrap();
        let (ba, _) = permutation_similarity(&m2, &m1).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn permutation_similarity_in_unit_interval() {
        let m1 = random_model(4, 6, 31);
        let m2 = random_model(4, 6, 32);
        let (s, _) = permutation_similarity(&m1, &m2).unwrap();
        assert!(s > 0.0 && s <= 1.0 + 1e-12);
    }

    #[test]
    fn self_similarity_orthonormal_is_one() {
        let l = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let m = BilinearModel::from_parts(Variant::Vanilla, l.clone(), l, None).unwrap();
        let diag = self_similarity_diagonal(&m);
        for v in diag {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((mean_self_similarity(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_latent_interferes() {
        let l = array![[1.0, 0.0], [1.0, 0.0]];
        let m = BilinearModel::from_parts(Variant::Vanilla, l.clone(), l, None).unwrap();
        let diag = self_similarity_diagonal(&m);
        for v in diag {
            let v = v.unwrap();
            assert!(v < 1.0);
            assert!((v - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_latent_row_undefined() {
        let l = array![[1.0, 0.0], [0.0, 0.0]];
        let m = BilinearModel::from_parts(Variant::Vanilla, l.clone(), l, None).unwrap();
        let diag = self_similarity_diagonal(&m);
        assert!(diag[0].is_some());
        assert!(diag[1].is_none());
    }

    #[test]
    fn cross_kernel_identity_against_trace_oracle() {
        let m1 = random_model(4, 5, 41);
        let m2 = random_model(4, 5, 42);
        let c = cross_kernel(&m1, &m2).unwrap();
        let b1 = oracle::materialized_b(&m1);
        let b2 = oracle::materialized_b(&m2);
        let a1 = b1.t().dot(&b1);
        let a2 = b2.t().dot(&b2);
        let trace = (&a1 * &a2).sum();
        let c_norm = c.mapv(|x| x * x).sum();
        assert!((trace - c_norm).abs() <= 1e-5 * trace.abs().max(1.0));
    }
}
