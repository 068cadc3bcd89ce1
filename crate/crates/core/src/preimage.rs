//! Reconstruction of ambient-space signals from feature-space projections.
//! A test signal is assigned to a learned feature-space subspace, projected
//! onto it, and the projection is mapped back to the ambient space through
//! kernel-specific closed-form weight formulas over the training signals.

use crate::error::{McuosError, Result};
use crate::kernel::KernelSpec;
use crate::kernel_learning::{KernelModel, TrainingData};
use crate::missing::ObservedSignal;
use nalgebra::{DMatrix, DVector};

const DENOMINATOR_TOL: f64 = 1e-10;

/// Combination weights over the training signals for one reconstruction.
#[derive(Debug, Clone)]
pub struct PreimageWeights {
    /// Weights of the projected point's expansion over all training images:
    /// equal to `chi` off the assigned cluster and `chi + zeta` on it.
    pub chi_hat: DVector<f64>,
    /// Projection coefficients over the assigned cluster's training images.
    pub zeta: DVector<f64>,
    /// Index of the assigned subspace.
    pub tau: usize,
    /// Final per-training-signal combination weights.
    pub e: DVector<f64>,
}

/// Geometry of the feature-space projection of one signal, expressed purely
/// through kernel evaluations.
struct ProjectionGeometry {
    tau: usize,
    chi_hat: DVector<f64>,
    zeta: DVector<f64>,
    /// Squared norm of the projected (uncentered) feature point.
    proj_norm_sq: f64,
    /// Inner products of the projected point with every training image.
    proj_dot: DVector<f64>,
    /// Squared feature distances from the projected point to every training image.
    dist_sq: DVector<f64>,
}

fn projection_geometry(model: &KernelModel, z: &ObservedSignal) -> Result<ProjectionGeometry> {
    let n = model.n_training();
    let nf = n as f64;
    let tau = model.assign_external(z)?;
    let k_z = model.kernel_column_for(z)?;
    let cluster = &model.clusters[tau];
    let e_tau = &model.coefficients[tau];

    let psi_tilde = model.centered_cross(tau, &k_z);
    let v = e_tau.transpose() * &psi_tilde;
    let zeta = e_tau * &v;

    let g = &model.gram;
    let g_total: f64 = g.sum();
    // Row sums of the uncentered Gram matrix restricted to the cluster.
    let g_row_sums_cluster =
        DVector::from_fn(cluster.len(), |k, _| g.row(cluster[k]).sum());
    let correction = e_tau.transpose()
        * (&psi_tilde + (2.0 / nf) * &g_row_sums_cluster
            - DVector::from_element(cluster.len(), 2.0 * g_total / (nf * nf)));
    let proj_norm_sq = v.dot(&correction) + g_total / (nf * nf);

    let mut proj_dot = DVector::<f64>::zeros(n);
    let mut dist_sq = DVector::<f64>::zeros(n);
    for i in 0..n {
        let col_sum: f64 = g.column(i).sum();
        let psi_i = DVector::from_fn(cluster.len(), |k, _| g[(cluster[k], i)]);
        let w = e_tau.transpose()
            * (&psi_i - DVector::from_element(cluster.len(), col_sum / nf));
        let dot = v.dot(&w) + col_sum / nf;
        proj_dot[i] = dot;
        dist_sq[i] = proj_norm_sq + g[(i, i)] - 2.0 * dot;
    }

    let sum_zeta = zeta.sum();
    let mut chi_hat = DVector::from_element(n, (1.0 - sum_zeta) / nf);
    for (k, &i) in cluster.iter().enumerate() {
        chi_hat[i] += zeta[k];
    }

    Ok(ProjectionGeometry {
        tau,
        chi_hat,
        zeta,
        proj_norm_sq,
        proj_dot,
        dist_sq,
    })
}

/// Squared feature-space distance between the projection of `z` onto its
/// assigned subspace and the feature image of training signal `i`.
pub fn feature_distance_to_projection(
    model: &KernelModel,
    z: &ObservedSignal,
    i: usize,
) -> Result<f64> {
    let geom = projection_geometry(model, z)?;
    Ok(geom.dist_sq[i])
}

/// Per-training-signal combination weights for the reconstruction of `z`.
pub fn preimage_weights(model: &KernelModel, z: &ObservedSignal) -> Result<PreimageWeights> {
    let geom = projection_geometry(model, z)?;
    let n = model.n_training();
    let e = match model.spec {
        KernelSpec::Gaussian { .. } => {
            DVector::from_fn(n, |i, _| geom.chi_hat[i] * 0.5 * (2.0 - geom.dist_sq[i]))
        }
        KernelSpec::Polynomial { d, .. } => {
            if geom.proj_norm_sq.abs() < DENOMINATOR_TOL {
                return Err(McuosError::DegenerateDenominator);
            }
            let exponent = (d as f64 - 1.0) / d as f64;
            DVector::from_fn(n, |i, _| {
                let ratio = geom.proj_dot[i] / geom.proj_norm_sq;
                geom.chi_hat[i] * signed_pow(ratio, exponent)
            })
        }
    };
    Ok(PreimageWeights {
        chi_hat: geom.chi_hat,
        zeta: geom.zeta,
        tau: geom.tau,
        e,
    })
}

/// Real power with the sign carried through, well defined for the odd-degree
/// exponents (d-1)/d used here; an exponent of zero yields one.
fn signed_pow(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else {
        x.signum() * x.abs().powf(p)
    }
}

fn training_matrix(model: &KernelModel) -> Result<&DMatrix<f64>> {
    match &model.training {
        TrainingData::Complete(y) => Ok(y),
        TrainingData::Observed(_) => Err(McuosError::InsufficientData(
            "complete-data reconstruction requires fully observed training signals".into(),
        )),
    }
}

/// Reconstructs a signal from its feature-space projection for a model
/// trained with a Gaussian kernel on complete data.
pub fn preimage_gaussian(model: &KernelModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    let y = training_matrix(model)?;
    let w = preimage_weights(model, &ObservedSignal::full(z.clone()))?;
    let denom = w.e.sum();
    if denom.abs() < DENOMINATOR_TOL {
        return Err(McuosError::DegenerateDenominator);
    }
    let out = (y * &w.e) / denom;
    ensure_finite(&out)?;
    Ok(out)
}

/// Reconstructs a signal from its feature-space projection for a model
/// trained with an odd-degree polynomial kernel on complete data.
pub fn preimage_polynomial(model: &KernelModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    let y = training_matrix(model)?;
    let w = preimage_weights(model, &ObservedSignal::full(z.clone()))?;
    let out = y * &w.e;
    ensure_finite(&out)?;
    Ok(out)
}

/// Dispatches to the kernel-appropriate complete-data reconstruction.
pub fn preimage_complete(model: &KernelModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    match model.spec {
        KernelSpec::Gaussian { .. } => preimage_gaussian(model, z),
        KernelSpec::Polynomial { .. } => preimage_polynomial(model, z),
    }
}

/// Reconstructs a signal when the training data is partially observed: the
/// weights use estimated kernel values and each coordinate is combined over
/// the training signals that observe it.
pub fn preimage_missing(model: &KernelModel, z: &ObservedSignal) -> Result<DVector<f64>> {
    let signals: Vec<ObservedSignal> = match &model.training {
        TrainingData::Observed(sigs) => sigs.clone(),
        TrainingData::Complete(y) => (0..y.ncols())
            .map(|j| ObservedSignal::full(y.column(j).into_owned()))
            .collect(),
    };
    let m = signals
        .first()
        .map(|s| s.ambient_dim())
        .ok_or_else(|| McuosError::InsufficientData("no training signals".into()))?;
    let n = signals.len() as f64;
    let w = preimage_weights(model, z)?;
    let e_sum = w.e.sum();
    let gaussian = matches!(model.spec, KernelSpec::Gaussian { .. });
    if gaussian && e_sum.abs() < DENOMINATOR_TOL {
        return Err(McuosError::DegenerateDenominator);
    }

    let mut out = DVector::<f64>::zeros(m);
    for u in 0..m {
        let mut acc = 0.0;
        let mut covered = 0usize;
        for (i, sig) in signals.iter().enumerate() {
            if let Some(pos) = sig.omega().binary_search(&u).ok() {
                acc += w.e[i] * sig.values()[pos];
                covered += 1;
            }
        }
        if covered == 0 {
            return Err(McuosError::UncoveredCoordinate(u));
        }
        out[u] = if gaussian {
            acc / (e_sum * covered as f64 / n)
        } else {
            acc
        };
    }
    ensure_finite(&out)?;
    Ok(out)
}

fn ensure_finite(v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(McuosError::NumericalFailure(
            "reconstruction produced non-finite values".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::standard_normal_matrix;
    use crate::kernel::{gram, kernel_value};
    use crate::kernel_learning::{mckusal, MckusalParams};
    use crate::linear::center_columns;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn params(l: usize, s: usize) -> MckusalParams {
        MckusalParams {
            l,
            s,
            lambda: 5.0,
            max_outer_iters: 20,
            inner_sweeps: 8,
            rel_tol: 1e-9,
            restarts: 2,
            rng_seed: 1,
        }
    }

    /// Data confined to a planted low-dimensional subspace so that, with the
    /// identity kernel, feature images lie exactly in the learned span.
    fn planted_linear_data(m: usize, s: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        let basis = standard_normal_matrix(m, s, &mut r);
        let coords = standard_normal_matrix(s, n, &mut r);
        basis * coords
    }

    #[test]
    fn distance_zero_when_training_point_lies_in_subspace() {
        let data = planted_linear_data(6, 2, 12, 1);
        let spec = KernelSpec::Polynomial { c: 0.0, d: 1 };
        let model = mckusal(&data, spec, &params(1, 2)).unwrap();
        for i in 0..12 {
            let z = ObservedSignal::full(data.column(i).into_owned());
            let d = feature_distance_to_projection(&model, &z, i).unwrap();
            assert!(d.abs() < 1e-8, "point {i}: distance {d}");
        }
    }

    #[test]
    fn distance_matches_ambient_oracle_with_identity_kernel() {
        let mut r = rng(2);
        let data = standard_normal_matrix(5, 10, &mut r);
        let spec = KernelSpec::Polynomial { c: 0.0, d: 1 };
        let model = mckusal(&data, spec, &params(1, 2)).unwrap();
        let (centered, mean) = center_columns(&data);
        // Ambient basis induced by the coefficients.
        let mut y_cl = DMatrix::<f64>::zeros(5, model.clusters[0].len());
        for (k, &j) in model.clusters[0].iter().enumerate() {
            y_cl.set_column(k, &centered.column(j));
        }
        let d_basis = y_cl * &model.coefficients[0];
        let z = standard_normal_matrix(5, 1, &mut r).column(0).into_owned();
        let proj = &d_basis * (d_basis.transpose() * (&z - &mean)) + &mean;
        for i in 0..10 {
            let oracle = (&proj - data.column(i)).norm_squared();
            let got = feature_distance_to_projection(
                &model,
                &ObservedSignal::full(z.clone()),
                i,
            )
            .unwrap();
            assert!((got - oracle).abs() < 1e-8, "i={i}: {got} vs {oracle}");
        }
    }

    #[test]
    fn distance_matches_explicit_feature_expansion() {
        // Three training points and one test point: factor the joint kernel
        // matrix to get explicit finite-dimensional feature vectors and
        // compute the projection geometry literally.
        let mut r = rng(3);
        let data = standard_normal_matrix(4, 3, &mut r);
        let spec = KernelSpec::Gaussian { c: 2.0 };
        let model = mckusal(&data, spec, &params(1, 1)).unwrap();
        let z = standard_normal_matrix(4, 1, &mut r).column(0).into_owned();

        // Joint kernel matrix over [y_0, y_1, y_2, z].
        let mut pts: Vec<DVector<f64>> = (0..3).map(|j| data.column(j).into_owned()).collect();
        pts.push(z.clone());
        let k_joint = DMatrix::from_fn(4, 4, |i, j| kernel_value(&spec, &pts[i], &pts[j]));
        let eig = k_joint.symmetric_eigen();
        let mut feat = DMatrix::<f64>::zeros(4, 4);
        for k in 0..4 {
            let lam = eig.eigenvalues[k].max(0.0).sqrt();
            feat.set_column(k, &(eig.eigenvectors.column(k) * lam));
        }
        let feat = feat.transpose(); // columns are explicit feature vectors
        let mean = (feat.column(0) + feat.column(1) + feat.column(2)) / 3.0;
        // Explicit subspace direction from the cluster and coefficients.
        let cluster = &model.clusters[0];
        let mut dir = DVector::<f64>::zeros(4);
        for (k, &i) in cluster.iter().enumerate() {
            dir += (feat.column(i) - &mean) * model.coefficients[0][(k, 0)];
        }
        let z_feat = feat.column(3).into_owned();
        let proj = &dir * (dir.dot(&(&z_feat - &mean))) + &mean;
        for i in 0..3 {
            let oracle = (&proj - feat.column(i)).norm_squared();
            let got = feature_distance_to_projection(
                &model,
                &ObservedSignal::full(z.clone()),
                i,
            )
            .unwrap();
            assert!((got - oracle).abs() < 1e-8, "i={i}: {got} vs {oracle}");
        }
    }

    #[test]
    fn expansion_weights_sum_to_one() {
        let mut r = rng(4);
        let data = standard_normal_matrix(5, 12, &mut r);
        let spec = KernelSpec::Gaussian { c: 2.0 };
        let model = mckusal(&data, spec, &params(2, 2)).unwrap();
        let z = standard_normal_matrix(5, 1, &mut r).column(0).into_owned();
        let w = preimage_weights(&model, &ObservedSignal::full(z)).unwrap();
        assert!((w.chi_hat.sum() - 1.0).abs() < 1e-10);
        // chi_hat equals the constant value off the assigned cluster.
        let off = (1.0 - w.zeta.sum()) / 12.0;
        for i in 0..12 {
            if !model.clusters[w.tau].contains(&i) {
                assert!((w.chi_hat[i] - off).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_training_points_reconstruct_to_that_point() {
        // Hand-built model: all training columns equal, so any valid weight
        // vector with a nonzero sum reconstructs the common point.
        let y_star = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut data = DMatrix::<f64>::zeros(3, 4);
        for j in 0..4 {
            data.set_column(j, &y_star);
        }
        let spec = KernelSpec::Gaussian { c: 1.0 };
        let g = gram(&spec, &data).values;
        let model = KernelModel {
            spec,
            training: TrainingData::Complete(data),
            gram_centered: DMatrix::zeros(4, 4),
            gram: g,
            clusters: vec![vec![0, 1, 2, 3]],
            coefficients: vec![DMatrix::from_element(4, 1, 0.5)],
            assignments: vec![0; 4],
            objective: 0.0,
            s: 1,
            lambda: 1.0,
        };
        let z = DVector::from_vec(vec![0.7, 0.1, -0.3]);
        let out = preimage_gaussian(&model, &z).unwrap();
        assert!((out - y_star).amax() < 1e-10);
    }

    #[test]
    fn gaussian_reconstruction_of_near_training_signal_is_close() {
        let mut r = rng(5);
        // Tight cloud: reconstruction of a member should stay near the cloud.
        let center = standard_normal_matrix(6, 1, &mut r).column(0).into_owned();
        let mut data = DMatrix::<f64>::zeros(6, 15);
        for j in 0..15 {
            let noise = standard_normal_matrix(6, 1, &mut r) * 0.1;
            data.set_column(j, &(&center + noise.column(0)));
        }
        let spec = KernelSpec::Gaussian { c: 4.0 };
        let model = mckusal(&data, spec, &params(1, 4)).unwrap();
        let z = data.column(0).into_owned();
        let out = preimage_gaussian(&model, &z).unwrap();
        assert!((&out - &z).norm() < 0.5, "residual {}", (&out - &z).norm());
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn degree_one_polynomial_equals_ambient_pca_reconstruction() {
        let mut r = rng(6);
        let data = standard_normal_matrix(5, 10, &mut r);
        let spec = KernelSpec::Polynomial { c: 0.0, d: 1 };
        let model = mckusal(&data, spec, &params(1, 3)).unwrap();
        let (centered, mean) = center_columns(&data);
        let mut y_cl = DMatrix::<f64>::zeros(5, model.clusters[0].len());
        for (k, &j) in model.clusters[0].iter().enumerate() {
            y_cl.set_column(k, &centered.column(j));
        }
        let d_basis = y_cl * &model.coefficients[0];
        let z = standard_normal_matrix(5, 1, &mut r).column(0).into_owned();
        let oracle = &d_basis * (d_basis.transpose() * (&z - &mean)) + &mean;
        let got = preimage_polynomial(&model, &z).unwrap();
        assert!((&got - &oracle).amax() < 1e-8, "defect {}", (&got - &oracle).amax());
    }

    #[test]
    fn cubic_polynomial_matches_termwise_recomputation() {
        let mut r = rng(7);
        let data = standard_normal_matrix(4, 8, &mut r);
        let spec = KernelSpec::Polynomial { c: 1.0, d: 3 };
        let model = mckusal(&data, spec, &params(1, 2)).unwrap();
        let z = standard_normal_matrix(4, 1, &mut r).column(0).into_owned();
        let w = preimage_weights(&model, &ObservedSignal::full(z.clone())).unwrap();

        // Independent recomputation of the weight formula from raw kernel calls.
        let n = 8usize;
        let nf = n as f64;
        let g = &model.gram;
        let k_z = DVector::from_fn(n, |i, _| {
            kernel_value(&spec, &z, &data.column(i).into_owned())
        });
        let cluster = &model.clusters[w.tau];
        let e_tau = &model.coefficients[w.tau];
        let g_sum = g.sum();
        let psi_tilde = DVector::from_fn(cluster.len(), |k, _| {
            let i = cluster[k];
            k_z[i] - k_z.sum() / nf - g.row(i).sum() / nf + g_sum / (nf * nf)
        });
        let v = e_tau.transpose() * &psi_tilde;
        let corr = e_tau.transpose()
            * (&psi_tilde
                + DVector::from_fn(cluster.len(), |k, _| {
                    2.0 / nf * g.row(cluster[k]).sum() - 2.0 * g_sum / (nf * nf)
                }));
        let proj_norm_sq = v.dot(&corr) + g_sum / (nf * nf);
        let mut expected = DVector::<f64>::zeros(4);
        for i in 0..n {
            let col_sum = g.column(i).sum();
            let psi_i = DVector::from_fn(cluster.len(), |k, _| g[(cluster[k], i)]);
            let dot = v.dot(
                &(e_tau.transpose()
                    * (&psi_i - DVector::from_element(cluster.len(), col_sum / nf))),
            ) + col_sum / nf;
            let ratio: f64 = dot / proj_norm_sq;
            let weight = w.chi_hat[i] * ratio.signum() * ratio.abs().powf(2.0 / 3.0);
            expected += data.column(i) * weight;
        }
        let got = preimage_polynomial(&model, &z).unwrap();
        assert!((&got - &expected).amax() < 1e-8);
    }

    #[test]
    fn missing_formula_with_full_observation_matches_complete() {
        let mut r = rng(8);
        let data = standard_normal_matrix(5, 12, &mut r);
        let z = standard_normal_matrix(5, 1, &mut r).column(0).into_owned();
        for spec in [
            KernelSpec::Gaussian { c: 2.0 },
            KernelSpec::Polynomial { c: 1.0, d: 3 },
        ] {
            let model = mckusal(&data, spec, &params(2, 2)).unwrap();
            let complete = preimage_complete(&model, &z).unwrap();
            let via_missing =
                preimage_missing(&model, &ObservedSignal::full(z.clone())).unwrap();
            assert!(
                (&complete - &via_missing).amax() < 1e-12,
                "defect {}",
                (&complete - &via_missing).amax()
            );
        }
    }

    #[test]
    fn single_full_training_signal_reconstructs_itself() {
        let y = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let spec = KernelSpec::Gaussian { c: 1.0 };
        let data = DMatrix::from_columns(&[y.clone()]);
        let g = gram(&spec, &data).values;
        let model = KernelModel {
            spec,
            training: TrainingData::Observed(vec![ObservedSignal::full(y.clone())]),
            gram_centered: DMatrix::zeros(1, 1),
            gram: g,
            clusters: vec![vec![0]],
            coefficients: vec![DMatrix::from_element(1, 1, 1.0)],
            assignments: vec![0],
            objective: 0.0,
            s: 1,
            lambda: 1.0,
        };
        let z = ObservedSignal::full(DVector::from_vec(vec![0.5, -1.0, 1.5]));
        let out = preimage_missing(&model, &z).unwrap();
        assert!((out - y).amax() < 1e-10);
    }

    #[test]
    fn uncovered_coordinate_is_reported() {
        // Two training signals that both skip coordinate 2.
        let sigs = vec![
            ObservedSignal::new(DVector::from_vec(vec![1.0, 0.5]), vec![0, 1], 3).unwrap(),
            ObservedSignal::new(DVector::from_vec(vec![-0.5, 1.5]), vec![0, 1], 3).unwrap(),
        ];
        let spec = KernelSpec::Gaussian { c: 1.0 };
        let g = crate::kernel::estimated_gram_missing(&spec, &sigs, 1e-6).unwrap();
        let model = KernelModel {
            spec,
            training: TrainingData::Observed(sigs),
            gram_centered: DMatrix::zeros(2, 2),
            gram: g.values,
            clusters: vec![vec![0, 1]],
            coefficients: vec![DMatrix::from_element(2, 1, 0.5)],
            assignments: vec![0, 0],
            objective: 0.0,
            s: 1,
            lambda: 1.0,
        };
        let z = ObservedSignal::full(DVector::from_vec(vec![0.1, 0.2, 0.3]));
        match preimage_missing(&model, &z) {
            Err(McuosError::UncoveredCoordinate(2)) => {}
            other => panic!("expected uncovered coordinate 2, got {other:?}"),
        }
    }

    #[test]
    fn partially_observed_training_reconstruction_is_finite_and_reasonable() {
        let mut r = rng(9);
        let center = standard_normal_matrix(20, 1, &mut r).column(0).into_owned();
        let mut data = DMatrix::<f64>::zeros(20, 16);
        for j in 0..16 {
            let noise = standard_normal_matrix(20, 1, &mut r) * 0.1;
            data.set_column(j, &(&center + noise.column(0)));
        }
        let masks = crate::datagen::generate_masks(20, 16, 0.1, 2, &mut r).unwrap();
        let sigs: Vec<ObservedSignal> = (0..16)
            .map(|j| ObservedSignal::from_mask(&data.column(j).into_owned(), &masks[j]).unwrap())
            .collect();
        let spec = KernelSpec::Gaussian { c: 8.0 };
        let model = crate::kernel_learning::rmckusal(&sigs, spec, &params(1, 4), 1e-6).unwrap();
        let z = data.column(0).into_owned();
        let out = preimage_missing(&model, &ObservedSignal::full(z.clone())).unwrap();
        assert!(out.iter().all(|x| x.is_finite()));
        assert!((&out - &z).norm() < 1.0, "residual {}", (&out - &z).norm());
    }
}
