//! Union-of-subspaces learning in a kernel-induced feature space. Subspaces
//! are represented implicitly through coefficient matrices over training
//! points, so nothing here scales with the feature-space dimension: all
//! computation goes through the N x N Gram matrix.

use crate::error::{McuosError, Result};
use crate::kernel::{
    center, centered_cross_from_parts, centered_self_from_parts, estimate_kernel_missing,
    estimated_gram_missing, gram, kernel_column, kernel_value, KernelSpec,
};
use crate::linear::{default_max_outer_iters, default_rel_tol};
use crate::missing::ObservedSignal;
use crate::subspace::fix_column_signs;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Training signals backing a kernel model.
#[derive(Debug, Clone)]
pub enum TrainingData {
    Complete(DMatrix<f64>),
    Observed(Vec<ObservedSignal>),
}

impl TrainingData {
    pub fn len(&self) -> usize {
        match self {
            TrainingData::Complete(m) => m.ncols(),
            TrainingData::Observed(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            TrainingData::Complete(m) => m.nrows(),
            TrainingData::Observed(v) => v.first().map_or(0, |s| s.ambient_dim()),
        }
    }
}

/// A learned union of subspaces in feature space. Subspace `ell` is spanned
/// by the centered feature images of the training points in `clusters[ell]`
/// mixed by `coefficients[ell]` (an N_ell x s matrix E with E' G~_cc E = I).
#[derive(Debug, Clone)]
pub struct KernelModel {
    pub spec: KernelSpec,
    pub training: TrainingData,
    /// Uncentered (for missing data: estimated and repaired) Gram matrix.
    pub gram: DMatrix<f64>,
    /// Feature-space-centered Gram matrix.
    pub gram_centered: DMatrix<f64>,
    pub clusters: Vec<Vec<usize>>,
    pub coefficients: Vec<DMatrix<f64>>,
    pub assignments: Vec<usize>,
    pub objective: f64,
    pub s: usize,
    pub lambda: f64,
}

/// Parameters for kernel union-of-subspaces learning.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MckusalParams {
    #[serde(rename = "L")]
    pub l: usize,
    pub s: usize,
    pub lambda: f64,
    #[serde(default = "default_max_outer_iters")]
    pub max_outer_iters: usize,
    #[serde(default = "default_inner_sweeps")]
    pub inner_sweeps: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_restarts() -> usize {
    1
}

fn default_inner_sweeps() -> usize {
    20
}

impl MckusalParams {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.l == 0 || self.s == 0 {
            return Err(McuosError::ParseError(
                "subspace count and dimension must be positive".into(),
            ));
        }
        if n < self.l * self.s {
            return Err(McuosError::InsufficientData(format!(
                "need at least L*s = {} training signals, got {n}",
                self.l * self.s
            )));
        }
        if self.lambda <= 0.0 {
            return Err(McuosError::ParseError("lambda must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(McuosError::ParseError("restarts must be positive".into()));
        }
        Ok(())
    }
}

/// Extracts the Gram submatrix with the given row and column index sets.
pub fn gram_block(g: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| g[(rows[i], cols[j])])
}

/// Kernel-PCA-style coefficients for a cluster: the top `s_eff` eigenvectors
/// of the cluster's centered Gram block, scaled by inverse square-root
/// eigenvalues so that E' G~_cc E = I.
fn cluster_pca_coefficients(
    gc: &DMatrix<f64>,
    cluster: &[usize],
    s_eff: usize,
) -> Result<DMatrix<f64>> {
    let gcc = gram_block(gc, cluster, cluster);
    let eig = gcc.symmetric_eigen();
    let mut order: Vec<usize> = (0..cluster.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut e = DMatrix::<f64>::zeros(cluster.len(), s_eff);
    for (j, &idx) in order.iter().take(s_eff).enumerate() {
        let lam = eig.eigenvalues[idx];
        if lam <= 0.0 {
            return Err(McuosError::NumericalFailure(
                "cluster Gram block is not positive definite".into(),
            ));
        }
        let col = eig.eigenvectors.column(idx) / lam.sqrt();
        e.set_column(j, &col);
    }
    fix_column_signs(&mut e);
    Ok(e)
}

/// Greedy initialization: each cluster is seeded with a random unused index,
/// then grown by repeatedly adding the unused point with the highest total
/// centered similarity to the cluster; coefficients whiten the cluster block.
pub fn gkiop<R: rand::Rng>(
    gc: &DMatrix<f64>,
    l: usize,
    s: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, Vec<DMatrix<f64>>)> {
    let n = gc.nrows();
    if n < l * s {
        return Err(McuosError::InsufficientData(format!(
            "need at least L*s = {} points, got {n}",
            l * s
        )));
    }
    let mut used = vec![false; n];
    let mut clusters = Vec::with_capacity(l);
    let mut coefficients = Vec::with_capacity(l);
    for _ in 0..l {
        let free: Vec<usize> = (0..n).filter(|&i| !used[i]).collect();
        let seed = *free.choose(rng).expect("free indices remain by the size check");
        let mut cluster = vec![seed];
        used[seed] = true;
        while cluster.len() < s {
            let mut best = None;
            let mut best_score = f64::NEG_INFINITY;
            for i in 0..n {
                if used[i] {
                    continue;
                }
                let score: f64 = cluster.iter().map(|&j| gc[(i, j)]).sum();
                if score > best_score {
                    best_score = score;
                    best = Some(i);
                }
            }
            let i = best.expect("free indices remain by the size check");
            cluster.push(i);
            used[i] = true;
        }
        cluster.sort_unstable();
        let e = cluster_pca_coefficients(gc, &cluster, s)?;
        clusters.push(cluster);
        coefficients.push(e);
    }
    Ok((clusters, coefficients))
}

/// Squared feature-space distance between subspaces `ell` and `p`:
/// s - ||E_l' [G~]_{c_l c_p} E_p||_F^2, clamped to [0, s].
pub fn feature_distance_sq(
    gc: &DMatrix<f64>,
    clusters: &[Vec<usize>],
    coefficients: &[DMatrix<f64>],
    ell: usize,
    p: usize,
    s: usize,
) -> f64 {
    if ell == p {
        return 0.0;
    }
    let cross = coefficients[ell].transpose()
        * gram_block(gc, &clusters[ell], &clusters[p])
        * &coefficients[p];
    (s as f64 - cross.norm_squared()).clamp(0.0, s as f64)
}

/// Per-point fit in feature space: the squared residual of the point's
/// centered feature image against subspace `ell`.
fn point_fit(
    gc: &DMatrix<f64>,
    clusters: &[Vec<usize>],
    coefficients: &[DMatrix<f64>],
    ell: usize,
    i: usize,
) -> f64 {
    let psi = DVector::from_fn(clusters[ell].len(), |k, _| gc[(clusters[ell][k], i)]);
    let proj = coefficients[ell].transpose() * psi;
    gc[(i, i)] - proj.norm_squared()
}

/// The learning objective: pairwise feature-space closeness plus
/// lambda-weighted per-point residuals under the given labels.
pub fn objective_f3(
    gc: &DMatrix<f64>,
    clusters: &[Vec<usize>],
    coefficients: &[DMatrix<f64>],
    assignments: &[usize],
    lambda: f64,
    s: usize,
) -> f64 {
    let l = clusters.len();
    let mut closeness = 0.0;
    for a in 0..l {
        for b in 0..l {
            if a != b {
                closeness += feature_distance_sq(gc, clusters, coefficients, a, b, s);
            }
        }
    }
    let fit: f64 = assignments
        .iter()
        .enumerate()
        .map(|(i, &ell)| point_fit(gc, clusters, coefficients, ell, i))
        .sum();
    closeness + lambda * fit
}

/// Assigns a training point to the subspace with the smallest feature-space
/// residual; ties go to the lowest index.
pub fn kernel_assign_training(
    gc: &DMatrix<f64>,
    clusters: &[Vec<usize>],
    coefficients: &[DMatrix<f64>],
    i: usize,
) -> usize {
    let mut best = 0;
    let mut best_fit = f64::INFINITY;
    for ell in 0..clusters.len() {
        let fit = point_fit(gc, clusters, coefficients, ell, i);
        if fit < best_fit {
            best_fit = fit;
            best = ell;
        }
    }
    best
}

/// One generalized-eigenvector update of subspace `ell`: maximizes the sum of
/// closeness-to-others and lambda/2-weighted cluster fit subject to
/// E' G~_cc E = I, by Cholesky whitening of the cluster Gram block.
pub fn kernel_subspace_update(
    gc: &DMatrix<f64>,
    clusters: &[Vec<usize>],
    coefficients: &[DMatrix<f64>],
    ell: usize,
    lambda: f64,
    s_eff: usize,
) -> Result<DMatrix<f64>> {
    let cluster = &clusters[ell];
    let n_ell = cluster.len();
    let gcc = gram_block(gc, cluster, cluster);
    let mut a = DMatrix::<f64>::zeros(n_ell, n_ell);
    for p in 0..clusters.len() {
        if p == ell {
            continue;
        }
        let cross = gram_block(gc, cluster, &clusters[p]) * &coefficients[p];
        a += &cross * cross.transpose();
    }
    a += (lambda / 2.0) * (&gcc * &gcc);

    // Whiten: with G = LL', solve (L^-1 A L^-T) w = zeta w and map back
    // E = L^-T W, which enforces E' G E = W' W = I.
    let chol = gcc.clone().cholesky().or_else(|| {
        let ridge = 1e-10 * gcc.trace() / n_ell as f64;
        (gcc.clone() + DMatrix::identity(n_ell, n_ell) * ridge).cholesky()
    });
    let chol = chol.ok_or_else(|| {
        McuosError::NumericalFailure("cluster Gram block is not positive definite".into())
    })?;
    let l_mat = chol.l();
    let x = l_mat
        .solve_lower_triangular(&a)
        .ok_or_else(|| McuosError::NumericalFailure("triangular solve failed".into()))?;
    let m_whitened = l_mat
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| McuosError::NumericalFailure("triangular solve failed".into()))?;
    let m_sym = (&m_whitened + m_whitened.transpose()) * 0.5;
    let mut w = crate::linear::top_eigenvectors(&m_sym, s_eff)?;
    fix_column_signs(&mut w);
    let e = l_mat
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or_else(|| McuosError::NumericalFailure("triangular solve failed".into()))?;
    Ok(e)
}

/// Objective values recorded across a learning run, for monotonicity checks:
/// each assignment step as (before, after) with structures held fixed, and
/// each inner update phase as the sequence of values after every single
/// subspace update.
#[derive(Debug, Clone, Default)]
pub struct F3Trace {
    pub assignment_steps: Vec<(f64, f64)>,
    pub update_runs: Vec<Vec<f64>>,
}

struct RunOutput {
    clusters: Vec<Vec<usize>>,
    coefficients: Vec<DMatrix<f64>>,
    assignments: Vec<usize>,
    objective: f64,
}

fn run_pipeline(
    spec: KernelSpec,
    training: TrainingData,
    g_uncentered: DMatrix<f64>,
    params: &MckusalParams,
    trace: &mut F3Trace,
) -> Result<KernelModel> {
    let n = g_uncentered.nrows();
    params.validate(n)?;
    let gc = center(&crate::kernel::GramMatrix {
        values: g_uncentered.clone(),
        centered: false,
    })
    .values;

    let mut best: Option<(RunOutput, F3Trace)> = None;
    for r in 0..params.restarts {
        let mut run_trace = F3Trace::default();
        let out = run_single(&gc, params, params.rng_seed.wrapping_add(r as u64), &mut run_trace)?;
        if best.as_ref().map_or(true, |(b, _)| out.objective < b.objective) {
            best = Some((out, run_trace));
        }
    }
    let (out, best_trace) = best.expect("restarts is positive after validation");
    *trace = best_trace;

    Ok(KernelModel {
        spec,
        training,
        gram: g_uncentered,
        gram_centered: gc,
        clusters: out.clusters,
        coefficients: out.coefficients,
        assignments: out.assignments,
        objective: out.objective,
        s: params.s,
        lambda: params.lambda,
    })
}

fn run_single(
    gc: &DMatrix<f64>,
    params: &MckusalParams,
    seed: u64,
    trace: &mut F3Trace,
) -> Result<RunOutput> {
    let n = gc.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut clusters, mut coefficients) = gkiop(&gc, params.l, params.s, &mut rng)?;
    let mut assignments: Vec<usize> = (0..n)
        .map(|i| kernel_assign_training(&gc, &clusters, &coefficients, i))
        .collect();

    let mut objective = objective_f3(&gc, &clusters, &coefficients, &assignments, params.lambda, params.s);
    for _outer in 0..params.max_outer_iters {
        // Assignment with structures fixed.
        let before = objective;
        let new_assignments: Vec<usize> = (0..n)
            .map(|i| kernel_assign_training(&gc, &clusters, &coefficients, i))
            .collect();
        let after = objective_f3(
            &gc,
            &clusters,
            &coefficients,
            &new_assignments,
            params.lambda,
            params.s,
        );
        trace.assignment_steps.push((before, after));
        let converged = new_assignments == assignments;
        assignments = new_assignments;
        if converged && !trace.update_runs.is_empty() {
            objective = after;
            break;
        }

        // Rebuild clusters from the labels; a subspace whose cluster empties
        // keeps its previous representation and simply attracts no points.
        for ell in 0..params.l {
            let members: Vec<usize> = assignments
                .iter()
                .enumerate()
                .filter_map(|(i, &a)| (a == ell).then_some(i))
                .collect();
            if !members.is_empty() {
                let s_eff = params.s.min(members.len());
                coefficients[ell] = cluster_pca_coefficients(&gc, &members, s_eff)?;
                clusters[ell] = members;
            }
        }

        // Inner block-coordinate updates of the coefficient matrices.
        let mut run = Vec::new();
        let mut prev = objective_f3(&gc, &clusters, &coefficients, &assignments, params.lambda, params.s);
        run.push(prev);
        for _sweep in 0..params.inner_sweeps {
            for ell in 0..params.l {
                let s_eff = params.s.min(clusters[ell].len());
                coefficients[ell] = kernel_subspace_update(
                    &gc,
                    &clusters,
                    &coefficients,
                    ell,
                    params.lambda,
                    s_eff,
                )?;
                run.push(objective_f3(
                    &gc,
                    &clusters,
                    &coefficients,
                    &assignments,
                    params.lambda,
                    params.s,
                ));
            }
            let current = *run.last().unwrap();
            if (prev - current).abs() < params.rel_tol * prev.abs().max(1e-30) {
                break;
            }
            prev = current;
        }
        objective = *run.last().unwrap();
        trace.update_runs.push(run);
    }

    Ok(RunOutput {
        clusters,
        coefficients,
        assignments,
        objective,
    })
}

/// Learns a union of subspaces in feature space from complete data.
pub fn mckusal(data: &DMatrix<f64>, spec: KernelSpec, params: &MckusalParams) -> Result<KernelModel> {
    mckusal_traced(data, spec, params, &mut F3Trace::default())
}

/// [`mckusal`] recording the objective trace for monotonicity diagnostics.
pub fn mckusal_traced(
    data: &DMatrix<f64>,
    spec: KernelSpec,
    params: &MckusalParams,
    trace: &mut F3Trace,
) -> Result<KernelModel> {
    spec.validate()?;
    let g = gram(&spec, data).values;
    run_pipeline(spec, TrainingData::Complete(data.clone()), g, params, trace)
}

/// Learns a union of subspaces in feature space from partially observed data,
/// driving the same pipeline with the repaired estimated Gram matrix.
pub fn rmckusal(
    data: &[ObservedSignal],
    spec: KernelSpec,
    params: &MckusalParams,
    delta_min: f64,
) -> Result<KernelModel> {
    rmckusal_traced(data, spec, params, delta_min, &mut F3Trace::default())
}

/// [`rmckusal`] recording the objective trace.
pub fn rmckusal_traced(
    data: &[ObservedSignal],
    spec: KernelSpec,
    params: &MckusalParams,
    delta_min: f64,
    trace: &mut F3Trace,
) -> Result<KernelModel> {
    spec.validate()?;
    let est = estimated_gram_missing(&spec, data, delta_min)?;
    run_pipeline(
        spec,
        TrainingData::Observed(data.to_vec()),
        est.values,
        params,
        trace,
    )
}

impl KernelModel {
    pub fn n_training(&self) -> usize {
        self.gram.nrows()
    }

    /// Uncentered kernel evaluations of an external signal against every
    /// training signal (estimated from overlaps when training data is
    /// partially observed).
    pub fn kernel_column_for(&self, z: &ObservedSignal) -> Result<DVector<f64>> {
        match &self.training {
            TrainingData::Complete(y) => {
                if z.observed_count() == z.ambient_dim() {
                    Ok(kernel_column(&self.spec, y, &z.zero_filled()))
                } else {
                    let sigs: Vec<ObservedSignal> = (0..y.ncols())
                        .map(|j| ObservedSignal::full(y.column(j).into_owned()))
                        .collect();
                    sigs.iter()
                        .map(|s| estimate_kernel_missing(&self.spec, z, s))
                        .collect::<Result<Vec<f64>>>()
                        .map(DVector::from_vec)
                }
            }
            TrainingData::Observed(sigs) => sigs
                .iter()
                .map(|s| estimate_kernel_missing(&self.spec, z, s))
                .collect::<Result<Vec<f64>>>()
                .map(DVector::from_vec),
        }
    }

    /// Uncentered self kernel value of an external signal.
    pub fn self_kernel(&self, z: &ObservedSignal) -> Result<f64> {
        if z.observed_count() == z.ambient_dim() {
            let full = z.zero_filled();
            Ok(kernel_value(&self.spec, &full, &full))
        } else {
            estimate_kernel_missing(&self.spec, z, z)
        }
    }

    /// Centered cross vector between cluster `ell` and an external signal.
    pub fn centered_cross(&self, ell: usize, k_z: &DVector<f64>) -> DVector<f64> {
        centered_cross_from_parts(&self.gram, k_z, &self.clusters[ell])
    }

    /// Assigns an external signal to the subspace with the smallest
    /// feature-space residual.
    pub fn assign_external(&self, z: &ObservedSignal) -> Result<usize> {
        let k_z = self.kernel_column_for(z)?;
        let n = self.n_training() as f64;
        let self_centered = if z.observed_count() == z.ambient_dim() {
            if let TrainingData::Complete(_) = self.training {
                let full = z.zero_filled();
                centered_self_from_parts(&self.spec, &self.gram, &k_z, &full)
            } else {
                self.self_kernel(z)? - 2.0 * k_z.sum() / n + self.gram.sum() / (n * n)
            }
        } else {
            self.self_kernel(z)? - 2.0 * k_z.sum() / n + self.gram.sum() / (n * n)
        };
        let mut best = 0;
        let mut best_fit = f64::INFINITY;
        for ell in 0..self.clusters.len() {
            let psi = self.centered_cross(ell, &k_z);
            let proj = self.coefficients[ell].transpose() * psi;
            let fit = self_centered - proj.norm_squared();
            if fit < best_fit {
                best_fit = fit;
                best = ell;
            }
        }
        Ok(best)
    }
}
