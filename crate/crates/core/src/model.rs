//! Bilinear autoencoder parameterisation and encoding.
//!
//! A latent is a rank-1 bilinear form: `f_j(x) = (l_j . x)(r_j . x)`. The
//! implied product-space encoder row `B_j = vec(l_j ⊗ r_j)` is never
//! materialised outside test oracles.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::linalg::random_semi_orthogonal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    Ordered,
    Mixed,
    Combined,
}

impl Variant {
    pub fn has_mixer(self) -> bool {
        matches!(self, Variant::Mixed | Variant::Combined)
    }

    pub fn has_ordering(self) -> bool {
        matches!(self, Variant::Ordered | Variant::Combined)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "ordered" => Ok(Variant::Ordered),
            "mixed" => Ok(Variant::Mixed),
            "combined" => Ok(Variant::Combined),
            other => Err(Error::Variant(format!("unknown variant '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Ordered => "ordered",
            Variant::Mixed => "mixed",
            Variant::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_lat: usize,
    pub d_mix: Option<usize>,
}

impl ModelDims {
    pub fn new(d_in: usize, d_lat: usize, d_mix: Option<usize>) -> Result<Self> {
        if d_in == 0 {
            return Err(Error::Invalid("d_in must be >= 1".into()));
        }
        if let Some(m) = d_mix {
            if m == 0 || m > d_lat {
                return Err(Error::Invalid(format!(
                    "d_mix must satisfy 1 <= d_mix <= d_lat, got {m} vs d_lat {d_lat}"
                )));
            }
        }
        Ok(ModelDims { d_in, d_lat, d_mix })
    }
}

/// Encoder factors `L`, `R` and the optional mixing bottleneck `D`.
/// Parameters are an immutable snapshot during a forward/loss evaluation;
/// the trainer swaps in a new snapshot after each step.
#[derive(Debug, Clone)]
pub struct BilinearModel {
    pub dims: ModelDims,
    pub variant: Variant,
    pub l: Array2<f64>,
    pub r: Array2<f64>,
    pub d: Option<Array2<f64>>,
}

/// Latent values per sample: `f` on the latent basis, `g` after mixing.
#[derive(Debug, Clone)]
pub struct LatentActivations {
    pub f: Array2<f64>,
    pub g: Option<Array2<f64>>,
}

impl BilinearModel {
    /// Orthogonal initialisation: `L` and `R` are independent semi-orthogonal
    /// matrices (orthonormalised per d_in-sized row block), scale 1. `D` is
    /// present iff the variant mixes.
    pub fn init(dims: ModelDims, variant: Variant, seed: u64) -> Result<Self> {
        if variant.has_mixer() != dims.d_mix.is_some() {
            return Err(Error::Variant(format!(
                "variant {} requires d_mix {}",
                variant.name(),
                if variant.has_mixer() { "present" } else { "absent" }
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_semi_orthogonal(dims.d_lat, dims.d_in, &mut rng);
        let r = random_semi_orthogonal(dims.d_lat, dims.d_in, &mut rng);
        let d = dims
            .d_mix
            .map(|m| random_semi_orthogonal(m, dims.d_lat, &mut rng));
        Ok(BilinearModel { dims, variant, l, r, d })
    }

    pub fn from_parts(
        variant: Variant,
        l: Array2<f64>,
        r: Array2<f64>,
        d: Option<Array2<f64>>,
    ) -> Result<Self> {
        if l.dim() != r.dim() {
            return Err(Error::shape(
                "model L/R",
                format!("{:?}", l.dim()),
                format!("{:?}", r.dim()),
            ));
        }
        if variant.has_mixer() != d.is_some() {
            return Err(Error::Variant(format!(
                "variant {} requires D {}",
                variant.name(),
                if variant.has_mixer() { "present" } else { "absent" }
            )));
        }
        if let Some(dm) = &d {
            if dm.ncols() != l.nrows() {
                return Err(Error::shape("mixer D", l.nrows(), dm.ncols()));
            }
        }
        let dims = ModelDims {
            d_in: l.ncols(),
            d_lat: l.nrows(),
            d_mix: d.as_ref().map(|m| m.nrows()),
        };
        Ok(BilinearModel { dims, variant, l, r, d })
    }

    /// Latent values `f[s][j] = (l_j . x_s)(r_j . x_s)` and, when a mixer is
    /// present, `g = f D^T`.
    pub fn encode(&self, batch: &ActivationBatch) -> Result<LatentActivations> {
        if batch.d_in() != self.dims.d_in {
            return Err(Error::shape("encode", self.dims.d_in, batch.d_in()));
        }
        let a = batch.rows.dot(&self.l.t());
        let b = batch.rows.dot(&self.r.t());
        let f = &a * &b;
        let g = self.d.as_ref().map(|d| f.dot(&d.t()));
        Ok(LatentActivations { f, g })
    }

    /// The rank-1 bilinear form of latent `j`: `l_j r_j^T`. Analysis and
    /// oracle use only.
    pub fn latent_form(&self, j: usize) -> Result<Array2<f64>> {
        if j >= self.dims.d_lat {
            return Err(Error::Index { index: j, len: self.dims.d_lat });
        }
        let l = self.l.index_axis(Axis(0), j);
        let r = self.r.index_axis(Axis(0), j);
        let mut out = Array2::<f64>::zeros((self.dims.d_in, self.dims.d_in));
        for (i, li) in l.iter().enumerate() {
            for (k, rk) in r.iter().enumerate() {
                out[[i, k]] = li * rk;
            }
        }
        Ok(out)
    }

    /// `D^T D` on the latent basis; identity semantics when no mixer exists.
    pub fn mixer_gram(&self) -> Option<Array2<f64>> {
        self.d.as_ref().map(|d| d.t().dot(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize;
    use ndarray::array;

    fn batch(rows: Array2<f64>) -> ActivationBatch {
        normalize(&rows).unwrap()
    }

    #[test]
    fn encode_matches_direct_substitution() {
        // l=(1,0), r=(0,1), x=(a,b) unit -> f = a*b
        let m = BilinearModel::from_parts(
            Variant::Vanilla,
            array![[1.0, 0.0]],
            array![[0.0, 1.0]],
            None,
        )
        .unwrap();
        let b = batch(array![[0.6, 0.8]]);
        let lat = m.encode(&b).unwrap();
        assert!((lat.f[[0, 0]] - 0.48).abs() < 1e-12);
    }

    #[test]
    fn encode_tied_factors_is_nonnegative() {
        let m = BilinearModel::init(ModelDims::new(3, 4, None).unwrap(), Variant::Vanilla, 0)
            .unwrap();
        let tied = BilinearModel::from_parts(Variant::Vanilla, m.l.clone(), m.l.clone(), None)
            .unwrap();
        let b = batch(array![[0.3, -0.2, 0.9], [1.0, 1.0, -1.0]]);
        let lat = tied.encode(&b).unwrap();
        assert!(lat.f.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn encode_is_point_symmetric() {
        let m = BilinearModel::init(ModelDims::new(4, 6, None).unwrap(), Variant::Vanilla, 1)
            .unwrap();
        let x = batch(array![[0.1, -0.5, 0.7, 0.2]]);
        let neg = ActivationBatch {
            rows: x.rows.mapv(|v| -v),
            meta: None,
            dropped: 0,
        };
        let fa = m.encode(&x).unwrap().f;
        let fb = m.encode(&neg).unwrap().f;
        for (a, b) in fa.iter().zip(fb.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_dimension_mismatch() {
        let m = BilinearModel::init(ModelDims::new(4, 6, None).unwrap(), Variant::Vanilla, 1)
            .unwrap();
        let b = batch(array![[1.0, 0.0, 0.0]]);
        assert!(matches!(m.encode(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn latent_form_simple_cases() {
        let m = BilinearModel::from_parts(
            Variant::Vanilla,
            array![[1.0, 0.0], [1.0, 0.0]],
            array![[0.0, 1.0], [1.0, 0.0]],
            None,
        )
        .unwrap();
        assert_eq!(m.latent_form(0).unwrap(), array![[0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(m.latent_form(1).unwrap(), array![[1.0, 0.0], [0.0, 0.0]]);
        assert!(m.latent_form(2).is_err());
    }

    #[test]
    fn init_rows_are_orthonormal() {
        let m = BilinearModel::init(ModelDims::new(6, 4, None).unwrap(), Variant::Vanilla, 5)
            .unwrap();
        let g = m.l.dot(&m.l.t());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn init_variant_mixer_consistency() {
        assert!(BilinearModel::init(
            ModelDims::new(4, 8, Some(2)).unwrap(),
            Variant::Vanilla,
            0
        )
        .is_err());
        assert!(BilinearModel::init(ModelDims::new(4, 8, None).unwrap(), Variant::Mixed, 0)
            .is_err());
        let m = BilinearModel::init(ModelDims::new(4, 8, Some(2)).unwrap(), Variant::Mixed, 0)
            .unwrap();
        assert_eq!(m.d.as_ref().unwrap().dim(), (2, 8));
    }
}
