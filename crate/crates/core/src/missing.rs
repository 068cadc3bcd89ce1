//! Union-of-subspaces learning from partially observed signals: cluster
//! assignment by least-squares residuals on observed coordinates, and
//! incremental geodesic descent that mixes a subspace-closeness step with
//! rank-one data-fit updates per signal.

use crate::error::{McuosError, Result};
use crate::linear::{default_max_outer_iters, default_rel_tol};
use crate::subspace::{orthonormalize, random_orthonormal, subspace_distance, Subspace, SubspaceCollection};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A signal observed only on the coordinate set `omega`.
#[derive(Debug, Clone)]
pub struct ObservedSignal {
    values: DVector<f64>,
    omega: Vec<usize>,
    ambient_dim: usize,
}

impl ObservedSignal {
    /// `values[k]` is the signal's entry at coordinate `omega[k]`; `omega`
    /// must be strictly increasing and within bounds.
    pub fn new(values: DVector<f64>, omega: Vec<usize>, ambient_dim: usize) -> Result<Self> {
        if values.len() != omega.len() {
            return Err(McuosError::ShapeMismatch(
                "observed values and index set differ in length".into(),
            ));
        }
        if omega.is_empty() {
            return Err(McuosError::InsufficientData("empty observation set".into()));
        }
        if !omega.windows(2).all(|w| w[0] < w[1]) || *omega.last().unwrap() >= ambient_dim {
            return Err(McuosError::ShapeMismatch(
                "observation indices must be strictly increasing and in bounds".into(),
            ));
        }
        Ok(Self {
            values,
            omega,
            ambient_dim,
        })
    }

    /// A fully observed signal.
    pub fn full(x: DVector<f64>) -> Self {
        let m = x.len();
        Self {
            values: x,
            omega: (0..m).collect(),
            ambient_dim: m,
        }
    }

    /// Restricts a complete signal to the coordinates in `omega`.
    pub fn from_mask(x: &DVector<f64>, omega: &[usize]) -> Result<Self> {
        let values = DVector::from_fn(omega.len(), |k, _| x[omega[k]]);
        Self::new(values, omega.to_vec(), x.len())
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn omega(&self) -> &[usize] {
        &self.omega
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn observed_count(&self) -> usize {
        self.omega.len()
    }

    /// The signal zero-filled on unobserved coordinates.
    pub fn zero_filled(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.ambient_dim);
        for (k, &u) in self.omega.iter().enumerate() {
            x[u] = self.values[k];
        }
        x
    }
}

/// Parameters for learning from partially observed signals.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RmicusalParams {
    #[serde(rename = "L")]
    pub l: usize,
    pub s: usize,
    pub lambda: f64,
    /// Base step size; the sweep step decays as eta / t.
    pub eta: f64,
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    #[serde(default = "default_missing_outer_iters")]
    pub max_outer_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_restarts_one")]
    pub restarts: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_inner_iters() -> usize {
    100
}
fn default_missing_outer_iters() -> usize {
    default_max_outer_iters()
}
fn default_restarts_one() -> usize {
    1
}

impl RmicusalParams {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.s >= m {
            return Err(McuosError::ShapeMismatch(format!(
                "subspace dimension {} must be below ambient dimension {m}",
                self.s
            )));
        }
        if self.l == 0 || self.restarts == 0 || self.inner_iters == 0 {
            return Err(McuosError::ParseError(
                "subspace count, restarts, and inner iterations must be positive".into(),
            ));
        }
        if self.eta <= 0.0 || self.lambda <= 0.0 {
            return Err(McuosError::ParseError("eta and lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Solves the restricted least-squares coefficients
/// theta = argmin ||[y]_omega - [D]_omega theta|| via the s x s normal
/// equations. Fails when the restricted basis is effectively rank deficient.
fn restricted_coefficients(sub: &Subspace, sig: &ObservedSignal) -> Result<DVector<f64>> {
    let s = sub.dim();
    let d_omega = crate::datagen::restrict_rows(sub.basis(), sig.omega());
    let gram = d_omega.transpose() * &d_omega;
    let rhs = d_omega.transpose() * sig.values();
    // Condition estimate from the eigenvalue range of the small Gram matrix.
    let eig = gram.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(min_ev > 0.0) || max_ev / min_ev > 1e12 {
        return Err(McuosError::RankDeficient);
    }
    gram.cholesky()
        .ok_or(McuosError::RankDeficient)
        .map(|ch| ch.solve(&rhs))
        .or_else(|_| {
            let _ = s;
            Err(McuosError::RankDeficient)
        })
}

/// Squared least-squares residual of the signal against the subspace on the
/// observed coordinates only.
pub fn residual_on_omega(sub: &Subspace, sig: &ObservedSignal) -> Result<f64> {
    if sub.ambient_dim() != sig.ambient_dim() {
        return Err(McuosError::ShapeMismatch(
            "signal and subspace disagree on ambient dimension".into(),
        ));
    }
    let theta = restricted_coefficients(sub, sig)?;
    let d_omega = crate::datagen::restrict_rows(sub.basis(), sig.omega());
    Ok((sig.values() - d_omega * theta).norm_squared())
}

/// Moves subspace `ell` a geodesic step toward the other subspaces in the
/// collection: the descent direction is 2(I - DD')AD with A the sum of the
/// other subspaces' projectors, followed via its compact SVD.
pub fn grassmann_closeness_step(
    ell: usize,
    bases: &SubspaceCollection,
    eta_t: f64,
) -> Result<Subspace> {
    let d = bases.get(ell).basis();
    let (m, s) = d.shape();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (p, sub) in bases.iter().enumerate() {
        if p != ell {
            a += sub.basis() * sub.basis().transpose();
        }
    }
    let ad = &a * d;
    let delta = 2.0 * (&ad - d * (d.transpose() * &ad));
    if delta.amax() < 1e-14 {
        return Ok(bases.get(ell).clone());
    }
    let svd = delta.svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| {
        McuosError::NumericalFailure("SVD of the geodesic direction failed".into())
    })?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| {
        McuosError::NumericalFailure("SVD of the geodesic direction failed".into())
    })?;
    let mut cos_diag = DMatrix::<f64>::zeros(s, s);
    let mut sin_diag = DMatrix::<f64>::zeros(s, s);
    for j in 0..s {
        let ang = svd.singular_values[j] * eta_t;
        cos_diag[(j, j)] = ang.cos();
        sin_diag[(j, j)] = ang.sin();
    }
    let v = v_t.transpose();
    let next = d * (&v * cos_diag * v_t) + u * (sin_diag * v_t);
    // The geodesic preserves orthonormality in exact arithmetic; a cheap QR
    // pass removes accumulated floating-point drift.
    orthonormalize(&next)
        .map_err(|_| McuosError::NumericalFailure("geodesic step left a degenerate basis".into()))
}

/// Rank-one geodesic update fitting one partially observed signal: computes
/// the restricted least-squares fit, then rotates the basis toward the
/// zero-filled residual with angle `step * ||r|| * ||w||`.
pub fn grouse_style_data_step(
    sub: &Subspace,
    sig: &ObservedSignal,
    step: f64,
) -> Result<Subspace> {
    if sub.ambient_dim() != sig.ambient_dim() {
        return Err(McuosError::ShapeMismatch(
            "signal and subspace disagree on ambient dimension".into(),
        ));
    }
    let theta = restricted_coefficients(sub, sig)?;
    let theta_norm = theta.norm();
    if theta_norm == 0.0 {
        return Ok(sub.clone());
    }
    let w = sub.basis() * &theta;
    let w_norm = w.norm();
    if w_norm == 0.0 {
        return Ok(sub.clone());
    }
    let d_omega = crate::datagen::restrict_rows(sub.basis(), sig.omega());
    let resid_omega = sig.values() - d_omega * &theta;
    let mut r = DVector::<f64>::zeros(sub.ambient_dim());
    for (k, &u) in sig.omega().iter().enumerate() {
        r[u] = resid_omega[k];
    }
    let r_norm = r.norm();
    if r_norm < 1e-14 {
        return Ok(sub.clone());
    }
    let mu = r_norm * w_norm;
    let angle = mu * step;
    let coef_w = (angle.cos() - 1.0) / w_norm;
    let coef_r = angle.sin() / r_norm;
    let direction = coef_w * &w + coef_r * &r;
    let basis = sub.basis() + direction * (theta.transpose() / theta_norm);
    Ok(Subspace::from_orthonormal_unchecked(basis))
}

/// Sum of squared pairwise subspace distances plus the scaled data-fit term:
/// the objective whose pieces the incremental steps descend.
pub fn objective_f2(
    bases: &SubspaceCollection,
    assignments: &[usize],
    data: &[ObservedSignal],
    lambda: f64,
) -> Result<f64> {
    let m = bases.ambient_dim() as f64;
    let mut closeness = 0.0;
    for ell in 0..bases.len() {
        for p in 0..bases.len() {
            if p != ell {
                let d = subspace_distance(bases.get(ell), bases.get(p))?;
                closeness += d * d;
            }
        }
    }
    let mut fit = 0.0;
    for (sig, &ell) in data.iter().zip(assignments) {
        fit += (m / sig.observed_count() as f64) * residual_on_omega(bases.get(ell), sig)?;
    }
    Ok(closeness + lambda * fit)
}

/// Learns a union of subspaces from partially observed signals. No centering
/// is applied; the returned model's mean is the zero vector.
pub fn rmicusal(data: &[ObservedSignal], params: &RmicusalParams) -> Result<crate::linear::McUosModel> {
    if data.is_empty() {
        return Err(McuosError::InsufficientData("no observed signals".into()));
    }
    let m = data[0].ambient_dim();
    params.validate(m)?;
    for sig in data {
        if sig.ambient_dim() != m {
            return Err(McuosError::ShapeMismatch(
                "signals disagree on ambient dimension".into(),
            ));
        }
        if sig.observed_count() <= params.s {
            return Err(McuosError::InsufficientObservations {
                observed: sig.observed_count(),
                s: params.s,
            });
        }
    }

    let mut best: Option<(SubspaceCollection, Vec<usize>, f64)> = None;
    for restart in 0..params.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed.wrapping_add(restart as u64));
        let mut bases = SubspaceCollection::new(
            (0..params.l)
                .map(|_| random_orthonormal(m, params.s, &mut rng))
                .collect(),
        )?;
        let mut assignments = vec![0usize; data.len()];
        let mut prev_obj = f64::INFINITY;
        let mut final_obj = f64::INFINITY;
        for _outer in 0..params.max_outer_iters {
            // Assignment by observed-coordinate residual, ties to lowest index.
            for (i, sig) in data.iter().enumerate() {
                let mut best_ell = 0;
                let mut best_resid = f64::INFINITY;
                for ell in 0..params.l {
                    let resid = residual_on_omega(bases.get(ell), sig)?;
                    if resid < best_resid {
                        best_resid = resid;
                        best_ell = ell;
                    }
                }
                assignments[i] = best_ell;
            }
            // Per-subspace incremental descent.
            for ell in 0..params.l {
                let members: Vec<usize> = assignments
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &a)| (a == ell).then_some(i))
                    .collect();
                let mut updates_since_reortho = 0usize;
                for t in 1..=params.inner_iters {
                    let eta_t = params.eta / t as f64;
                    let stepped = grassmann_closeness_step(ell, &bases, eta_t)?;
                    let mut inner = bases.into_inner();
                    inner[ell] = stepped;
                    bases = SubspaceCollection::new(inner)?;
                    for &i in &members {
                        let sig = &data[i];
                        let step =
                            params.lambda * m as f64 / (2.0 * sig.observed_count() as f64) * eta_t;
                        let stepped = grouse_style_data_step(bases.get(ell), sig, step)?;
                        let mut inner = bases.into_inner();
                        inner[ell] = stepped;
                        updates_since_reortho += 1;
                        if updates_since_reortho >= 50 {
                            inner[ell] = orthonormalize(inner[ell].basis()).map_err(|_| {
                                McuosError::NumericalFailure(
                                    "basis drifted to rank deficiency".into(),
                                )
                            })?;
                            updates_since_reortho = 0;
                        }
                        bases = SubspaceCollection::new(inner)?;
                    }
                }
                // Final cleanup so downstream consumers see an orthonormal basis.
                let mut inner = bases.into_inner();
                inner[ell] = orthonormalize(inner[ell].basis()).map_err(|_| {
                    McuosError::NumericalFailure("basis drifted to rank deficiency".into())
                })?;
                bases = SubspaceCollection::new(inner)?;
            }
            let obj = objective_f2(&bases, &assignments, data, params.lambda)?;
            final_obj = obj;
            if (prev_obj - obj).abs() < params.rel_tol * prev_obj.abs().max(1e-30) {
                break;
            }
            prev_obj = obj;
        }
        if best.as_ref().map_or(true, |(_, _, b)| final_obj < *b) {
            best = Some((bases, assignments, final_obj));
        }
    }
    let (subspaces, assignments, objective) = best.unwrap();
    Ok(crate::linear::McUosModel {
        subspaces,
        mean: DVector::zeros(m),
        assignments,
        objective,
    })
}
