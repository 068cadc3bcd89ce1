//! Synthetic data generation on a union of nearby subspaces, noise injection,
//! missing-entry masks, and CSV/patch ingestion of external matrices.

use crate::error::{McuosError, Result};
use crate::subspace::{orthonormalize, random_orthonormal, Subspace, SubspaceCollection};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Parameters of the planted union-of-subspaces model.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Ambient dimension.
    pub m: usize,
    /// Subspace dimension.
    pub s: usize,
    /// Number of subspaces.
    #[serde(rename = "L")]
    pub l: usize,
    /// Perturbation scale controlling how far apart consecutive subspaces are.
    pub t_s: f64,
    /// Points drawn per subspace; length must equal `l`.
    pub cluster_sizes: Vec<usize>,
    /// Training noise energy: noise is N(0, sigma_tr_sq / m * I).
    pub sigma_tr_sq: f64,
    /// Test noise energy for denoising experiments.
    #[serde(default)]
    pub sigma_te_sq: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s >= self.m {
            return Err(McuosError::ShapeMismatch(format!(
                "subspace dimension {} must be below ambient dimension {}",
                self.s, self.m
            )));
        }
        if self.cluster_sizes.len() != self.l {
            return Err(McuosError::ShapeMismatch(format!(
                "expected {} cluster sizes, got {}",
                self.l,
                self.cluster_sizes.len()
            )));
        }
        if self.t_s < 0.0 || self.sigma_tr_sq < 0.0 || self.sigma_te_sq < 0.0 {
            return Err(McuosError::ParseError(
                "t_s and noise energies must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn total_points(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    /// The protocol used throughout the synthetic experiments: m=180, L=5,
    /// s=13, t_s=0.04, cluster sizes (150,100,150,100,150), training noise 0.1.
    pub fn standard_protocol() -> Self {
        Self {
            m: 180,
            s: 13,
            l: 5,
            t_s: 0.04,
            cluster_sizes: vec![150, 100, 150, 100, 150],
            sigma_tr_sq: 0.1,
            sigma_te_sq: 0.0,
        }
    }
}

/// A generated dataset: clean unit-norm signals, their noisy observations,
/// ground-truth labels, and (for synthetic data) the planted subspaces.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clean: DMatrix<f64>,
    pub noisy: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub truth: Option<SubspaceCollection>,
}

/// Fills an m x n matrix with i.i.d. standard normal entries.
pub fn standard_normal_matrix<R: Rng>(m: usize, n: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

/// Generates the planted subspaces: the first basis is a random orthonormal
/// matrix; each subsequent basis orthonormalizes the previous basis plus a
/// `t_s`-scaled matrix with entries uniform on [0, 1].
pub fn generate_subspaces<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<SubspaceCollection> {
    spec.validate()?;
    let mut subspaces: Vec<Subspace> = Vec::with_capacity(spec.l);
    let first = random_orthonormal(spec.m, spec.s, rng);
    subspaces.push(first);
    for _ in 1..spec.l {
        let w = DMatrix::<f64>::from_fn(spec.m, spec.s, |_, _| rng.gen::<f64>());
        let prev = subspaces.last().unwrap().basis();
        let next = orthonormalize(&(prev + spec.t_s * w))?;
        subspaces.push(next);
    }
    SubspaceCollection::new(subspaces)
}

/// Draws `cluster_sizes[l]` points on each subspace with standard normal
/// coefficients and normalizes every column to unit norm. The `noisy` field
/// starts as a copy of `clean`; apply [`add_noise`] to perturb it.
pub fn generate_points<R: Rng>(
    truth: &SubspaceCollection,
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<Dataset> {
    spec.validate()?;
    if truth.len() != spec.l || truth.ambient_dim() != spec.m || truth.dim() != spec.s {
        return Err(McuosError::ShapeMismatch(
            "subspace collection does not match the generation parameters".into(),
        ));
    }
    let n_total = spec.total_points();
    let mut clean = DMatrix::<f64>::zeros(spec.m, n_total);
    let mut labels = Vec::with_capacity(n_total);
    let mut col = 0;
    for (ell, &n_ell) in spec.cluster_sizes.iter().enumerate() {
        let coeffs = standard_normal_matrix(spec.s, n_ell, rng);
        let block = truth.get(ell).basis() * coeffs;
        for j in 0..n_ell {
            let mut x = block.column(j).into_owned();
            let norm = x.norm();
            if norm > 0.0 {
                x /= norm;
            }
            clean.set_column(col, &x);
            labels.push(ell);
            col += 1;
        }
    }
    Ok(Dataset {
        noisy: clean.clone(),
        clean,
        labels,
        truth: Some(truth.clone()),
    })
}

/// Adds i.i.d. Gaussian noise with per-entry variance `sigma_sq / m`, so the
/// expected squared norm of each noise vector is `sigma_sq`.
pub fn add_noise<R: Rng>(data: &DMatrix<f64>, sigma_sq: f64, rng: &mut R) -> DMatrix<f64> {
    if sigma_sq == 0.0 {
        return data.clone();
    }
    let std = (sigma_sq / data.nrows() as f64).sqrt();
    let mut out = data.clone();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
    }
    out
}

/// Generates a sorted observation index set per signal: a uniform random
/// subset of {0..m} of size round((1 - fraction) * m), without replacement.
/// `s` is the intended subspace dimension; masks smaller than it are refused.
pub fn generate_masks<R: Rng>(
    m: usize,
    n: usize,
    missing_fraction: f64,
    s: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !(0.0..=1.0).contains(&missing_fraction) {
        return Err(McuosError::ParseError(format!(
            "missing fraction {missing_fraction} outside [0, 1]"
        )));
    }
    let keep = ((1.0 - missing_fraction) * m as f64).round() as usize;
    if keep <= s {
        return Err(McuosError::InsufficientObservations { observed: keep, s });
    }
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let mut omega = rand::seq::index::sample(rng, m, keep).into_vec();
        omega.sort_unstable();
        masks.push(omega);
    }
    Ok(masks)
}

/// Reads a headerless CSV of decimal numbers into a matrix (rows in file
/// order). With `transpose`, signals stored one per row become one per column.
pub fn load_matrix_csv(path: &std::path::Path, transpose: bool) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| McuosError::ParseError(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| McuosError::ParseError(e.to_string()))?;
        let row: Vec<f64> = record
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| McuosError::ParseError(format!("bad number '{f}': {e}")))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(McuosError::ParseError(format!(
                    "ragged CSV: row {} has {} fields, expected {}",
                    rows.len() + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(McuosError::ParseError(format!(
            "{}: empty CSV",
            path.display()
        )));
    }
    let (r, c) = (rows.len(), rows[0].len());
    let mat = DMatrix::from_fn(r, c, |i, j| rows[i][j]);
    Ok(if transpose { mat.transpose() } else { mat })
}

/// Reads one integer label per line.
pub fn load_labels_csv(path: &std::path::Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| McuosError::ParseError(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| McuosError::ParseError(format!("bad label '{l}': {e}")))
        })
        .collect()
}

/// Splits an image matrix into non-overlapping patch_h x patch_w patches,
/// row-major over the patch grid, each patch vectorized column-major into a
/// column of the output.
pub fn extract_patches(
    image: &DMatrix<f64>,
    patch_h: usize,
    patch_w: usize,
) -> Result<DMatrix<f64>> {
    let (h, w) = image.shape();
    if patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0 {
        return Err(McuosError::TilingError(format!(
            "{patch_h}x{patch_w} patches do not tile a {h}x{w} image"
        )));
    }
    let (gh, gw) = (h / patch_h, w / patch_w);
    let mut out = DMatrix::<f64>::zeros(patch_h * patch_w, gh * gw);
    for pi in 0..gh {
        for pj in 0..gw {
            let col = pi * gw + pj;
            let mut k = 0;
            for j in 0..patch_w {
                for i in 0..patch_h {
                    out[(k, col)] = image[(pi * patch_h + i, pj * patch_w + j)];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`extract_patches`] for round-trip checks.
pub fn assemble_patches(
    patches: &DMatrix<f64>,
    patch_h: usize,
    patch_w: usize,
    image_h: usize,
    image_w: usize,
) -> Result<DMatrix<f64>> {
    if image_h % patch_h != 0 || image_w % patch_w != 0 {
        return Err(McuosError::TilingError("patch size does not divide image".into()));
    }
    let (gh, gw) = (image_h / patch_h, image_w / patch_w);
    if patches.nrows() != patch_h * patch_w || patches.ncols() != gh * gw {
        return Err(McuosError::ShapeMismatch("patch matrix shape mismatch".into()));
    }
    let mut image = DMatrix::<f64>::zeros(image_h, image_w);
    for pi in 0..gh {
        for pj in 0..gw {
            let col = pi * gw + pj;
            let mut k = 0;
            for j in 0..patch_w {
                for i in 0..patch_h {
                    image[(pi * patch_h + i, pj * patch_w + j)] = patches[(k, col)];
                    k += 1;
                }
            }
        }
    }
    Ok(image)
}

/// Restricts a vector to its observed coordinates.
pub fn restrict(x: &DVector<f64>, omega: &[usize]) -> DVector<f64> {
    DVector::from_fn(omega.len(), |i, _| x[omega[i]])
}

/// Restricts a matrix's rows to the observed coordinates.
pub fn restrict_rows(mat: &DMatrix<f64>, omega: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(omega.len(), mat.ncols(), |i, j| mat[(omega[i], j)])
}
