//! Weight-only and activation-based analyses: latent density histograms,
//! manifold discovery through composite latents, prefix-reconstruction
//! curves with a greedy reordering baseline, and activation histograms.

use ndarray::{Array2, Axis};

use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::kernels::plain_kernel;
use crate::linalg::symmetric_eigen;
use crate::losses::hoyer_density;
use crate::model::BilinearModel;

const GREEDY_MAX_LATENTS: usize = 4096;
/// members whose composites overlap by more than this many indices are
/// treated as duplicates during candidate selection
const DEDUP_SHARED_LIMIT: usize = 5;
pub const COMPOSITE_TOP_K: usize = 10;
pub const DEFAULT_TOP_FRACTION: f64 = 0.25;
pub const DENSE_THRESHOLD: f64 = 0.5;

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Histogram {
    /// bin edges, length bins + 1
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

fn build_histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let bins = bins.max(1);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut b = ((v - lo) / span * bins as f64) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    let edges = (0..=bins).map(|i| lo + span * i as f64 / bins as f64).collect();
    Histogram { edges, counts }
}

#[derive(Debug, Clone)]
pub struct DensityReport {
    pub densities: Vec<f64>,
    pub histogram: Histogram,
    /// fraction of latents with density above [`DENSE_THRESHOLD`]
    pub dense_fraction: f64,
}

/// Hoyer density of every latent across the batch, binned on [0, 1].
pub fn density_histogram(
    model: &BilinearModel,
    batch: &ActivationBatch,
    bins: usize,
) -> Result<DensityReport> {
    if batch.n_samples() < 2 {
        return Err(Error::Invalid("density histogram needs at least 2 samples".into()));
    }
    let acts = model.encode(batch)?;
    let mut densities = Vec::with_capacity(model.dims.d_lat);
    for col in acts.f.columns() {
        densities.push(hoyer_density(col)?);
    }
    let dense = densities.iter().filter(|d| **d > DENSE_THRESHOLD).count();
    let dense_fraction = if densities.is_empty() {
        0.0
    } else {
        dense as f64 / densities.len() as f64
    };
    let histogram = build_histogram(&densities, bins, 0.0, 1.0);
    Ok(DensityReport { densities, histogram, dense_fraction })
}

#[derive(Debug, Clone)]
pub struct ActivationReport {
    pub histogram: Histogram,
    /// (quantile, value) pairs for 0.5, 0.9, 0.99
    pub quantiles: Vec<(f64, f64)>,
    pub max: f64,
}

/// Histogram of one latent's activation magnitudes over the batch.
pub fn activation_histogram(
    model: &BilinearModel,
    batch: &ActivationBatch,
    latent_index: usize,
    bins: usize,
    log_scale: bool,
) -> Result<ActivationReport> {
    if latent_index >= model.dims.d_lat {
        return Err(Error::Index { index: latent_index, len: model.dims.d_lat });
    }
    let acts = model.encode(batch)?;
    let mags: Vec<f64> = acts
        .f
        .column(latent_index)
        .iter()
        .map(|v| v.abs())
        .collect();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let quantile = |q: f64| {
        let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
        sorted[idx]
    };
    let quantiles = vec![(0.5, quantile(0.5)), (0.9, quantile(0.9)), (0.99, quantile(0.99))];
    let histogram = if log_scale {
        let logs: Vec<f64> = mags.iter().map(|v| (v + 1e-12).log10()).collect();
        let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        build_histogram(&logs, bins, lo, hi)
    } else {
        build_histogram(&mags, bins, 0.0, max.max(f64::MIN_POSITIVE))
    };
    Ok(ActivationReport { histogram, quantiles, max })
}

// ---------------------------------------------------------------------------
// Manifold discovery
// ---------------------------------------------------------------------------

/// Latent-interaction matrix used for cluster detection: `D^T D` when the
/// model has a mixer, otherwise the plain kernel rows.
fn interaction_matrix(model: &BilinearModel) -> Array2<f64> {
    match model.mixer_gram() {
        Some(g) => g,
        None => plain_kernel(model).k,
    }
}

/// Cluster-likeness score per latent: the Hoyer density of the element-wise
/// 4th power of the latent's interaction row. A single outlier scores near
/// 0; mostly similar-sized entries score near 1.
pub fn cluster_scores(model: &BilinearModel) -> Result<Vec<f64>> {
    let m = interaction_matrix(model);
    let mut scores = Vec::with_capacity(m.nrows());
    for row in m.rows() {
        let p4 = row.mapv(|v| v.powi(4));
        scores.push(hoyer_density(p4.view())?);
    }
    Ok(scores)
}

#[derive(Debug, Clone)]
pub struct CompositeLatent {
    pub seed_row: usize,
    pub members: Vec<usize>,
    /// signed interaction-row entries of the members
    pub weights: Vec<f64>,
    pub q_sym: Array2<f64>,
    /// sorted by |eigenvalue|, descending
    pub eigenvalues: Vec<f64>,
    /// columns are eigenvectors, same order as `eigenvalues`
    pub eigenvectors: Array2<f64>,
}

impl CompositeLatent {
    /// Top-`k` eigenvectors as rows (k × d_in), padded with an orthogonal
    /// complement if the model has fewer dimensions.
    pub fn basis(&self, k: usize) -> Array2<f64> {
        let d = self.eigenvectors.nrows();
        let mut basis = Array2::zeros((k, d));
        for i in 0..k.min(self.eigenvectors.ncols()) {
            basis.row_mut(i).assign(&self.eigenvectors.column(i));
        }
        basis
    }
}

/// Build a weighted composite latent from the `top_k` strongest entries of
/// one interaction row, and eigendecompose its symmetrised bilinear form.
pub fn build_composite(
    model: &BilinearModel,
    seed_row: usize,
    top_k: usize,
) -> Result<CompositeLatent> {
    let m = interaction_matrix(model);
    if seed_row >= m.nrows() {
        return Err(Error::Index { index: seed_row, len: m.nrows() });
    }
    if top_k == 0 {
        return Err(Error::Invalid("composite needs at least one member".into()));
    }
    let row = m.row(seed_row);
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .abs()
            .partial_cmp(&row[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(top_k.min(row.len()));
    let members = idx;
    let weights: Vec<f64> = members.iter().map(|&j| row[j]).collect();

    let d_in = model.dims.d_in;
    let mut q = Array2::<f64>::zeros((d_in, d_in));
    for (&j, &w) in members.iter().zip(weights.iter()) {
        q.scaled_add(w, &model.latent_form(j)?);
    }
    let q_sym = (&q + &q.t()) * 0.5;
    let (vals, vecs) = symmetric_eigen(&q_sym)?;
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| {
        vals[b].abs().partial_cmp(&vals[a].abs()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let mut eigenvectors = Array2::zeros((d_in, d_in));
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.column_mut(dst).assign(&vecs.column(src));
    }
    Ok(CompositeLatent { seed_row, members, weights, q_sym, eigenvalues, eigenvectors })
}

/// Candidate composites ranked by cluster score, skipping candidates that
/// share more than [`DEDUP_SHARED_LIMIT`] members with an already-selected
/// one.
pub fn candidate_composites(
    model: &BilinearModel,
    max_candidates: usize,
) -> Result<Vec<CompositeLatent>> {
    let scores = cluster_scores(model)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut picked: Vec<CompositeLatent> = Vec::new();
    for seed in order {
        if picked.len() >= max_candidates {
            break;
        }
        let cand = build_composite(model, seed, COMPOSITE_TOP_K)?;
        let duplicate = picked.iter().any(|p| {
            cand.members.iter().filter(|m| p.members.contains(m)).count() > DEDUP_SHARED_LIMIT
        });
        if !duplicate {
            picked.push(cand);
        }
    }
    Ok(picked)
}

/// Fraction of total eigenvalue magnitude carried by the top two
/// eigenvalues of a composite. A value near 1 means the composite is
/// essentially planar (rank-2), which is what a latent circle looks like.
pub fn planarity(composite: &CompositeLatent) -> f64 {
    let total: f64 = composite.eigenvalues.iter().map(|v| v.abs()).sum();
    if composite.eigenvalues.len() < 2 || total <= 0.0 {
        return 0.0;
    }
    (composite.eigenvalues[0].abs() + composite.eigenvalues[1].abs()) / total
}

/// Builds a composite around every latent and returns the most planar one.
///
/// Candidate dedup in [`candidate_composites`] can collapse everything into a
/// single candidate when the member lists overlap heavily (small `d_lat`), so
/// for automatic manifold discovery we score every row instead of only the
/// top cluster seeds.
pub fn most_planar_composite(model: &BilinearModel) -> Result<CompositeLatent> {
    let d_lat = model.dims.d_lat;
    let mut best: Option<(f64, CompositeLatent)> = None;
    for row in 0..d_lat {
        let cand = build_composite(model, row, COMPOSITE_TOP_K)?;
        let score = planarity(&cand);
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.map(|(_, c)| c).ok_or(Error::Index { index: 0, len: 0 })
}

#[derive(Debug, Clone)]
pub struct ManifoldExport {
    /// 3 × d_in projection basis (rows orthonormal)
    pub basis: Array2<f64>,
    /// n × 3 projected coordinates of the selected samples
    pub points: Array2<f64>,
    /// activation strength (L2 over member latents) of each selected sample
    pub strength: Vec<f64>,
    pub tags: Vec<String>,
}

impl ManifoldExport {
    pub fn to_json(&self) -> String {
        let basis: Vec<Vec<f64>> = self.basis.rows().into_iter().map(|r| r.to_vec()).collect();
        let points: Vec<Vec<f64>> = self.points.rows().into_iter().map(|r| r.to_vec()).collect();
        serde_json::json!({
            "basis": basis,
            "points": points,
            "strength": self.strength,
            "tags": self.tags,
        })
        .to_string()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,strength,tag\n");
        for (i, row) in self.points.rows().into_iter().enumerate() {
            let tag = self.tags.get(i).map(String::as_str).unwrap_or("");
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row[0], row[1], row[2], self.strength[i], tag
            ));
        }
        out
    }
}

/// Project the `top_fraction` strongest-activating samples onto the
/// composite's top-3 eigenbasis.
pub fn export_manifold(
    composite: &CompositeLatent,
    model: &BilinearModel,
    batch: &ActivationBatch,
    top_fraction: f64,
) -> Result<ManifoldExport> {
    if batch.n_samples() == 0 {
        return Err(Error::Invalid("manifold export needs data".into()));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Invalid("top_fraction must lie in (0, 1]".into()));
    }
    let acts = model.encode(batch)?;
    let n = batch.n_samples();
    let mut strength = vec![0.0f64; n];
    for &j in &composite.members {
        for (s, v) in acts.f.column(j).iter().enumerate() {
            strength[s] += v * v;
        }
    }
    for s in strength.iter_mut() {
        *s = s.sqrt();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        strength[b].partial_cmp(&strength[a]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let keep = ((n as f64 * top_fraction).round() as usize).clamp(1, n);
    order.truncate(keep);
    order.sort_unstable(); // stable export order

    let basis = orthonormal_top3(composite)?;
    let mut points = Array2::zeros((keep, 3));
    let mut kept_strength = Vec::with_capacity(keep);
    let mut tags = Vec::with_capacity(keep);
    for (out_i, &s) in order.iter().enumerate() {
        let x = batch.rows.index_axis(Axis(0), s);
        for c in 0..3 {
            points[[out_i, c]] = basis.row(c).dot(&x);
        }
        kept_strength.push(strength[s]);
        if let Some(meta) = &batch.meta {
            tags.push(meta.get(s).cloned().unwrap_or_default());
        }
    }
    Ok(ManifoldExport { basis, points, strength: kept_strength, tags })
}

/// Top-3 eigenvectors as rows; when d_in < 3 the basis is padded with an
/// orthogonal complement so the export always has 3 coordinates.
fn orthonormal_top3(composite: &CompositeLatent) -> Result<Array2<f64>> {
    let d = composite.eigenvectors.nrows();
    let have = d.min(3);
    let mut basis = Array2::zeros((3, d.max(3)));
    if d >= 3 {
        let mut b = Array2::zeros((3, d));
        for i in 0..3 {
            b.row_mut(i).assign(&composite.eigenvectors.column(i));
        }
        return Ok(b);
    }
    // pad: embed the d-dim eigenvectors and fill remaining rows with unused
    // canonical axes (d < 3 only happens in toy settings)
    for i in 0..have {
        for r in 0..d {
            basis[[i, r]] = composite.eigenvectors[[r, i]];
        }
    }
    let last_col = basis.ncols() - 1;
    for i in have..3 {
        basis[[i, (d + i - have).min(last_col)]] = 1.0;
    }
    Ok(basis)
}

// ---------------------------------------------------------------------------
// Prefix curves
// ---------------------------------------------------------------------------

/// Effective latent-space kernel `E K E` (plain `K` when no mixer) used by
/// the prefix machinery; d_lat × d_lat, never anything input-squared sized.
fn effective_kernel(model: &BilinearModel) -> Array2<f64> {
    let k = plain_kernel(model).k;
    match model.mixer_gram() {
        Some(e) => e.dot(&k).dot(&e),
        None => k,
    }
}

/// Per-sample linear response `h = E f` (or `f` itself without a mixer).
fn linear_response(model: &BilinearModel, f: &Array2<f64>) -> Array2<f64> {
    match model.mixer_gram() {
        Some(e) => f.dot(&e), // E symmetric
        None => f.clone(),
    }
}

/// Mean reconstruction error using only the latent subset `order[..=k]`,
/// for every k. With unit-norm inputs the error of the empty prefix is 1.
fn prefix_curve_ordered(
    model: &BilinearModel,
    batch: &ActivationBatch,
    order: &[usize],
) -> Result<Vec<f64>> {
    let acts = model.encode(batch)?;
    let f = acts.f;
    let a = effective_kernel(model);
    let h = linear_response(model, &f);
    let n = batch.n_samples();
    if n == 0 {
        return Err(Error::Invalid("prefix curve needs data".into()));
    }
    let d_lat = model.dims.d_lat;
    let mut curve = vec![0.0f64; order.len()];
    for s in 0..n {
        let fs = f.row(s);
        let hs = h.row(s);
        // u[j] = sum over the current prefix P of A[i][j] f_i
        let mut u = vec![0.0f64; d_lat];
        let mut err = 1.0f64; // empty prefix on unit-norm input
        for (pos, &j) in order.iter().enumerate() {
            let fj = fs[j];
            err += 2.0 * fj * u[j] + a[[j, j]] * fj * fj - 2.0 * fj * hs[j];
            for t in 0..d_lat {
                u[t] += a[[j, t]] * fj;
            }
            curve[pos] += err;
        }
    }
    for e in curve.iter_mut() {
        *e /= n as f64;
    }
    Ok(curve)
}

/// Prefix-reconstruction curve in natural latent order: entry k is the mean
/// error reconstructing with latents 0..=k only.
pub fn prefix_curve(model: &BilinearModel, batch: &ActivationBatch) -> Result<Vec<f64>> {
    let order: Vec<usize> = (0..model.dims.d_lat).collect();
    prefix_curve_ordered(model, batch, &order)
}

#[derive(Debug, Clone)]
pub struct GreedyReorder {
    pub permutation: Vec<usize>,
    pub curve: Vec<f64>,
}

/// Greedily pick, at each step, the latent whose addition lowers the mean
/// reconstruction error the most, and report the resulting prefix curve.
pub fn greedy_reorder(model: &BilinearModel, batch: &ActivationBatch) -> Result<GreedyReorder> {
    let d_lat = model.dims.d_lat;
    if d_lat > GREEDY_MAX_LATENTS {
        return Err(Error::Guard(format!(
            "greedy reorder capped at {GREEDY_MAX_LATENTS} latents, model has {d_lat}"
        )));
    }
    let acts = model.encode(batch)?;
    let f = acts.f;
    let a = effective_kernel(model);
    let h = linear_response(model, &f);
    let n = batch.n_samples();
    if n == 0 {
        return Err(Error::Invalid("greedy reorder needs data".into()));
    }

    // u[s][j] = sum over picked P of A[i][j] f_s[i]
    let mut u = Array2::<f64>::zeros((n, d_lat));
    let mut picked = vec![false; d_lat];
    let mut permutation = Vec::with_capacity(d_lat);
    let mut curve = Vec::with_capacity(d_lat);
    let mut err_sum = n as f64; // empty prefix error is 1 per sample

    for _ in 0..d_lat {
        // delta in total (summed over samples) error for adding candidate j
        let mut best: Option<(usize, f64)> = None;
        for j in 0..d_lat {
            if picked[j] {
                continue;
            }
            let mut delta = 0.0;
            for s in 0..n {
                let fj = f[[s, j]];
                delta += 2.0 * fj * u[[s, j]] + a[[j, j]] * fj * fj - 2.0 * fj * h[[s, j]];
            }
            match best {
                Some((_, d)) if delta >= d => {}
                _ => best = Some((j, delta)),
            }
        }
        let (j, delta) = best.expect("unpicked latent exists");
        picked[j] = true;
        permutation.push(j);
        err_sum += delta;
        curve.push(err_sum / n as f64);
        for s in 0..n {
            let fj = f[[s, j]];
            for t in 0..d_lat {
                u[[s, t]] += a[[j, t]] * fj;
            }
        }
    }
    Ok(GreedyReorder { permutation, curve })
}
