//! Mercer kernels, Gram matrices, feature-space centering, kernel-value
//! estimation from partially observed signals with concentration-bound
//! verifiers, and positive-definite repair of estimated Gram matrices.

use crate::error::{McuosError, Result};
use crate::missing::ObservedSignal;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Eigenvalues with magnitude below this are treated as exact zeros by the
/// positive-definite repair map.
pub const EIGENVALUE_ZERO_TOL: f64 = 1e-12;

/// Supported kernel functions.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelSpec {
    /// exp(-||y - y'||^2 / c), c > 0.
    Gaussian { c: f64 },
    /// (<y, y'> + c)^d, c >= 0, d >= 1.
    Polynomial { c: f64, d: u32 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { c } if c <= 0.0 => Err(McuosError::UnsupportedKernel(
                "gaussian kernel requires c > 0".into(),
            )),
            KernelSpec::Polynomial { c, d } if c < 0.0 || d == 0 => Err(
                McuosError::UnsupportedKernel("polynomial kernel requires c >= 0 and d >= 1".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Whether kernel values can be estimated from partial observations:
    /// gaussian always, polynomial only for odd degree.
    pub fn supports_missing(&self) -> bool {
        match *self {
            KernelSpec::Gaussian { .. } => true,
            KernelSpec::Polynomial { d, .. } => d % 2 == 1,
        }
    }
}

/// Evaluates the kernel on two complete signals.
pub fn kernel_value(spec: &KernelSpec, y: &DVector<f64>, yp: &DVector<f64>) -> f64 {
    match *spec {
        KernelSpec::Gaussian { c } => (-(y - yp).norm_squared() / c).exp(),
        KernelSpec::Polynomial { c, d } => (y.dot(yp) + c).powi(d as i32),
    }
}

/// An N x N kernel matrix, optionally centered in feature space.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub centered: bool,
}

/// Builds the (uncentered) Gram matrix of the data columns.
pub fn gram(spec: &KernelSpec, data: &DMatrix<f64>) -> GramMatrix {
    let n = data.ncols();
    let mut g = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel_value(spec, &data.column(i).into_owned(), &data.column(j).into_owned());
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    GramMatrix {
        values: g,
        centered: false,
    }
}

/// Centers a Gram matrix in feature space: G - HG - GH + HGH with H the
/// rank-one averaging matrix. Idempotent; centered rows sum to zero.
pub fn center(g: &GramMatrix) -> GramMatrix {
    let n = g.values.nrows();
    let row_means = g.values.column_sum() / n as f64; // mean over j of g_ij per row i
    let total_mean = row_means.sum() / n as f64;
    let mut out = g.values.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] += total_mean - row_means[i] - row_means[j];
        }
    }
    GramMatrix {
        values: out,
        centered: true,
    }
}

/// The vector of uncentered kernel evaluations k_y = (kappa(y_1, y), ...,
/// kappa(y_N, y)).
pub fn kernel_column(spec: &KernelSpec, data: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(data.ncols(), |i, _| {
        kernel_value(spec, &data.column(i).into_owned(), y)
    })
}

/// Centered cross inner products between the feature images of a cluster
/// (rows `cluster` of the training set) and an external signal `y`:
/// entry k is <centered phi(y_{cluster[k]}), centered phi(y)>.
pub fn centered_cross_vector(
    spec: &KernelSpec,
    data: &DMatrix<f64>,
    cluster: &[usize],
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    if cluster.is_empty() {
        return Err(McuosError::InsufficientData("empty cluster index set".into()));
    }
    let g = gram(spec, data).values;
    let k_y = kernel_column(spec, data, y);
    Ok(centered_cross_from_parts(&g, &k_y, cluster))
}

/// [`centered_cross_vector`] with the Gram matrix and kernel column already
/// available (used by the trained kernel model to avoid O(N^2) rebuilds).
pub fn centered_cross_from_parts(
    g: &DMatrix<f64>,
    k_y: &DVector<f64>,
    cluster: &[usize],
) -> DVector<f64> {
    let n = g.nrows() as f64;
    let k_sum = k_y.sum();
    let g_total: f64 = g.sum();
    DVector::from_fn(cluster.len(), |k, _| {
        let i = cluster[k];
        let g_row_sum: f64 = g.row(i).sum();
        k_y[i] - k_sum / n - g_row_sum / n + g_total / (n * n)
    })
}

/// The centered self inner product <centered phi(y), centered phi(y)>.
pub fn centered_self_value(
    spec: &KernelSpec,
    data: &DMatrix<f64>,
    y: &DVector<f64>,
) -> f64 {
    let g = gram(spec, data).values;
    let k_y = kernel_column(spec, data, y);
    centered_self_from_parts(spec, &g, &k_y, y)
}

/// [`centered_self_value`] from precomputed pieces.
pub fn centered_self_from_parts(
    spec: &KernelSpec,
    g: &DMatrix<f64>,
    k_y: &DVector<f64>,
    y: &DVector<f64>,
) -> f64 {
    let n = g.nrows() as f64;
    kernel_value(spec, y, y) - 2.0 * k_y.sum() / n + g.sum() / (n * n)
}

/// Sorted intersection of two sorted index sets.
pub fn overlap(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Estimates the kernel value of two partially observed signals from their
/// overlapping coordinates, rescaling the squared distance or inner product
/// by m / |overlap|.
pub fn estimate_kernel_missing(
    spec: &KernelSpec,
    a: &ObservedSignal,
    b: &ObservedSignal,
) -> Result<f64> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(McuosError::ShapeMismatch(
            "signals disagree on ambient dimension".into(),
        ));
    }
    if !spec.supports_missing() {
        return Err(McuosError::UnsupportedKernel(
            "even-degree polynomial kernels cannot be estimated from partial observations".into(),
        ));
    }
    let m = a.ambient_dim() as f64;
    let shared = overlap(a.omega(), b.omega());
    if shared.is_empty() {
        return Err(McuosError::EmptyOverlap { i: 0, j: 0 });
    }
    let a_full = a.zero_filled();
    let b_full = b.zero_filled();
    let scale = m / shared.len() as f64;
    match *spec {
        KernelSpec::Gaussian { c } => {
            let dist_sq: f64 = shared.iter().map(|&u| (a_full[u] - b_full[u]).powi(2)).sum();
            Ok((-scale * dist_sq / c).exp())
        }
        KernelSpec::Polynomial { c, d } => {
            let inner: f64 = shared.iter().map(|&u| a_full[u] * b_full[u]).sum();
            Ok((scale * inner + c).powi(d as i32))
        }
    }
}

/// A(n estimated) Gram matrix after optional positive-definite repair.
#[derive(Debug, Clone)]
pub struct EstimatedGram {
    pub values: DMatrix<f64>,
    /// True when the repair map changed at least one eigenvalue.
    pub psd_repaired: bool,
    pub delta_min: f64,
}

/// Makes a symmetric matrix positive definite by flipping negative
/// eigenvalues and lifting exact zeros to `delta_min`, keeping eigenvectors.
pub fn psd_repair(g: &DMatrix<f64>, delta_min: f64) -> Result<EstimatedGram> {
    if g.nrows() != g.ncols() {
        return Err(McuosError::ShapeMismatch("PSD repair needs a square matrix".into()));
    }
    let sym = (g + g.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut changed = false;
    let mut lambda = eig.eigenvalues.clone();
    for v in lambda.iter_mut() {
        if !v.is_finite() {
            return Err(McuosError::NumericalFailure(
                "non-finite eigenvalue during PSD repair".into(),
            ));
        }
        if *v > EIGENVALUE_ZERO_TOL {
            // keep
        } else if v.abs() <= EIGENVALUE_ZERO_TOL {
            *v = delta_min;
            changed = true;
        } else {
            *v = -*v;
            changed = true;
        }
    }
    let repaired = if changed {
        &eig.eigenvectors * DMatrix::from_diagonal(&lambda) * eig.eigenvectors.transpose()
    } else {
        g.clone()
    };
    let repaired = (&repaired + repaired.transpose()) * 0.5;
    Ok(EstimatedGram {
        values: repaired,
        psd_repaired: changed,
        delta_min,
    })
}

/// Builds the estimated Gram matrix of partially observed signals and makes
/// it positive definite. For the gaussian kernel, diagonal entries are pinned
/// to 1 before repair.
pub fn estimated_gram_missing(
    spec: &KernelSpec,
    data: &[ObservedSignal],
    delta_min: f64,
) -> Result<EstimatedGram> {
    let n = data.len();
    if n == 0 {
        return Err(McuosError::InsufficientData("no observed signals".into()));
    }
    let mut g = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = match estimate_kernel_missing(spec, &data[i], &data[j]) {
                Ok(v) => v,
                Err(McuosError::EmptyOverlap { .. }) => {
                    return Err(McuosError::EmptyOverlap { i, j })
                }
                Err(e) => return Err(e),
            };
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    if let KernelSpec::Gaussian { .. } = spec {
        for i in 0..n {
            g[(i, i)] = 1.0;
        }
    }
    psd_repair(&g, delta_min)
}

/// Coherence of the line spanned by a vector: m ||z||_inf^2 / ||z||^2.
pub fn coherence(z: &DVector<f64>) -> f64 {
    let m = z.len() as f64;
    let max_abs = z.amax();
    m * max_abs * max_abs / z.norm_squared()
}

/// Bound half-width for the rescaled squared distance between two signals
/// observed on a shared set of the given size.
pub fn distance_bound_alpha(
    yi: &DVector<f64>,
    yj: &DVector<f64>,
    overlap_size: usize,
    delta: f64,
) -> f64 {
    let mu = coherence(&(yi - yj));
    (2.0 * mu * mu / overlap_size as f64 * (1.0 / delta).ln()).sqrt()
}

/// Bound half-width for the rescaled inner product between two signals
/// observed on a shared set of the given size.
pub fn inner_bound_beta(
    yi: &DVector<f64>,
    yj: &DVector<f64>,
    overlap_size: usize,
    delta: f64,
) -> f64 {
    let m = yi.len() as f64;
    let max_prod = yi
        .iter()
        .zip(yj.iter())
        .map(|(a, b)| (a * b).abs())
        .fold(0.0f64, f64::max);
    (2.0 * m * m * max_prod * max_prod / overlap_size as f64 * (1.0 / delta).ln()).sqrt()
}

/// One Monte Carlo outcome of a bound check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundOutcome {
    Held,
    Violated,
    /// The bound is vacuous for this draw (e.g. alpha >= 1 makes the
    /// gaussian sandwich exponents meaningless); counted separately.
    Vacuous,
}

/// Checks the squared-distance sandwich
/// (1-alpha)||yi-yj||^2 <= (m/|O|)||[yi-yj]_O||^2 <= (1+alpha)||yi-yj||^2
/// for one draw of the shared observation set (sampled with replacement).
pub fn check_distance_bound<R: rand::Rng>(
    yi: &DVector<f64>,
    yj: &DVector<f64>,
    overlap_size: usize,
    delta: f64,
    rng: &mut R,
) -> BoundOutcome {
    let m = yi.len();
    let alpha = distance_bound_alpha(yi, yj, overlap_size, delta);
    let true_dist = (yi - yj).norm_squared();
    let mut obs = 0.0;
    for _ in 0..overlap_size {
        let u = rng.gen_range(0..m);
        obs += (yi[u] - yj[u]).powi(2);
    }
    let scaled = m as f64 / overlap_size as f64 * obs;
    if scaled >= (1.0 - alpha) * true_dist && scaled <= (1.0 + alpha) * true_dist {
        BoundOutcome::Held
    } else {
        BoundOutcome::Violated
    }
}

/// Checks the inner-product deviation bound |(m/|O|)<.,.>_O - <yi,yj>| <= beta
/// for one with-replacement draw of the shared observation set.
pub fn check_inner_bound<R: rand::Rng>(
    yi: &DVector<f64>,
    yj: &DVector<f64>,
    overlap_size: usize,
    delta: f64,
    rng: &mut R,
) -> BoundOutcome {
    let m = yi.len();
    let beta = inner_bound_beta(yi, yj, overlap_size, delta);
    let true_inner = yi.dot(yj);
    let mut obs = 0.0;
    for _ in 0..overlap_size {
        let u = rng.gen_range(0..m);
        obs += yi[u] * yj[u];
    }
    let scaled = m as f64 / overlap_size as f64 * obs;
    if (scaled - true_inner).abs() <= beta {
        BoundOutcome::Held
    } else {
        BoundOutcome::Violated
    }
}

/// Checks the gaussian kernel sandwich h^{1/(1-alpha)} <= kappa <=
/// h^{1/(1+alpha)} for one with-replacement draw.
pub fn check_gaussian_kernel_bound<R: rand::Rng>(
    c: f64,
    yi: &DVector<f64>,
    yj: &DVector<f64>,
    overlap_size: usize,
    delta: f64,
    rng: &mut R,
) -> BoundOutcome {
    let m = yi.len();
    let alpha = distance_bound_alpha(yi, yj, overlap_size, delta);
    if alpha >= 1.0 {
        return BoundOutcome::Vacuous;
    }
    let kappa = (-(yi - yj).norm_squared() / c).exp();
    let mut obs = 0.0;
    for _ in 0..overlap_size {
        let u = rng.gen_range(0..m);
        obs += (yi[u] - yj[u]).powi(2);
    }
    let h = (-(m as f64 / overlap_size as f64) * obs / c).exp();
    let lower = h.powf(1.0 / (1.0 - alpha));
    let upper = h.powf(1.0 / (1.0 + alpha));
    if kappa >= lower - 1e-15 && kappa <= upper + 1e-15 {
        BoundOutcome::Held
    } else {
        BoundOutcome::Violated
    }
}

/// Checks the odd-degree polynomial sandwich
/// (h^{1/d} - beta)^d <= kappa <= (h^{1/d} + beta)^d for one draw.
pub fn check_polynomial_kernel_bound<R: rand::Rng>(
    c: f64,
    d: u32,
    yi: &DVector<f64>,
    yj: &DVector<f64>,
    overlap_size: usize,
    delta: f64,
    rng: &mut R,
) -> BoundOutcome {
    assert!(d % 2 == 1, "polynomial bound requires odd degree");
    let m = yi.len();
    let beta = inner_bound_beta(yi, yj, overlap_size, delta);
    let kappa = (yi.dot(yj) + c).powi(d as i32);
    let mut obs = 0.0;
    for _ in 0..overlap_size {
        let u = rng.gen_range(0..m);
        obs += yi[u] * yj[u];
    }
    let h = (m as f64 / overlap_size as f64 * obs + c).powi(d as i32);
    // Signed real d-th root (d odd).
    let root = h.abs().powf(1.0 / d as f64) * h.signum();
    let lower = (root - beta).powi(d as i32);
    let upper = (root + beta).powi(d as i32);
    if kappa >= lower - 1e-12 && kappa <= upper + 1e-12 {
        BoundOutcome::Held
    } else {
        BoundOutcome::Violated
    }
}
