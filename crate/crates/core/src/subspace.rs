//! Subspaces as orthonormal bases, the Grassmann metric `d_u`, projections,
//! and matching of learned against ground-truth collections.

use crate::error::{McuosError, Result};
use nalgebra::{DMatrix, DVector};

/// Tolerance for orthonormality checks.
pub const ORTHO_TOL: f64 = 1e-10;
/// Tolerance below which a diagonal entry of R in a QR factorization is
/// treated as a rank deficiency.
pub const RANK_TOL: f64 = 1e-10;

/// An `s`-dimensional subspace of R^m represented by an m x s matrix with
/// orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wraps a matrix that is already orthonormal. Columns keep the order they
    /// were produced in (descending eigenvalue/singular-value order for bases
    /// coming out of the learning updates).
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Result<Self> {
        let s = basis.ncols();
        let gram = basis.transpose() * &basis;
        let id = DMatrix::<f64>::identity(s, s);
        if (gram - id).amax() > 1e-8 {
            return Err(McuosError::NumericalFailure(
                "basis columns are not orthonormal".into(),
            ));
        }
        Ok(Self { basis })
    }

    /// Wraps without checking; caller guarantees orthonormality.
    pub(crate) fn from_orthonormal_unchecked(basis: DMatrix<f64>) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Max deviation of basis'*basis from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let s = self.basis.ncols();
        (self.basis.transpose() * &self.basis - DMatrix::<f64>::identity(s, s)).amax()
    }
}

/// A collection of subspaces sharing the same ambient dimension and dimension.
#[derive(Debug, Clone)]
pub struct SubspaceCollection {
    subspaces: Vec<Subspace>,
}

impl SubspaceCollection {
    pub fn new(subspaces: Vec<Subspace>) -> Result<Self> {
        if subspaces.is_empty() {
            return Err(McuosError::InsufficientData("empty subspace collection".into()));
        }
        let (m, s) = (subspaces[0].ambient_dim(), subspaces[0].dim());
        for sub in &subspaces {
            if sub.ambient_dim() != m || sub.dim() != s {
                return Err(McuosError::ShapeMismatch(
                    "subspaces in a collection must share (m, s)".into(),
                ));
            }
        }
        Ok(Self { subspaces })
    }

    pub fn len(&self) -> usize {
        self.subspaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subspaces.is_empty()
    }

    pub fn ambient_dim(&self) -> usize {
        self.subspaces[0].ambient_dim()
    }

    pub fn dim(&self) -> usize {
        self.subspaces[0].dim()
    }

    pub fn get(&self, ell: usize) -> &Subspace {
        &self.subspaces[ell]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Subspace> {
        self.subspaces.iter()
    }

    pub fn into_inner(self) -> Vec<Subspace> {
        self.subspaces
    }
}

/// Fixes column signs so the first entry with magnitude above `RANK_TOL` in
/// each column is positive. Makes repeated factorizations bit-comparable.
pub(crate) fn fix_column_signs(mat: &mut DMatrix<f64>) {
    for j in 0..mat.ncols() {
        let mut sign = 1.0;
        for i in 0..mat.nrows() {
            let v = mat[(i, j)];
            if v.abs() > RANK_TOL {
                sign = v.signum();
                break;
            }
        }
        if sign < 0.0 {
            for i in 0..mat.nrows() {
                mat[(i, j)] = -mat[(i, j)];
            }
        }
    }
}

/// Orthonormalizes the columns of `matrix` by thin QR with a deterministic
/// sign convention. Fails if the matrix is rank deficient.
pub fn orthonormalize(matrix: &DMatrix<f64>) -> Result<Subspace> {
    let (m, k) = matrix.shape();
    if k > m {
        return Err(McuosError::ShapeMismatch(format!(
            "cannot orthonormalize {k} columns in ambient dimension {m}"
        )));
    }
    let qr = matrix.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| r[(j, j)].abs()).fold(1.0_f64, f64::max);
    for j in 0..k {
        if r[(j, j)].abs() < RANK_TOL * scale {
            return Err(McuosError::RankDeficient);
        }
    }
    let mut q = qr.q();
    // q already m x k (thin); enforce sign convention.
    fix_column_signs(&mut q);
    Ok(Subspace::from_orthonormal_unchecked(q))
}

/// The Grassmann metric d_u(a, b) = sqrt(s - tr(Da' Db Db' Da)).
pub fn subspace_distance(a: &Subspace, b: &Subspace) -> Result<f64> {
    if a.ambient_dim() != b.ambient_dim() || a.dim() != b.dim() {
        return Err(McuosError::ShapeMismatch(
            "subspace_distance requires equal (m, s)".into(),
        ));
    }
    // Equal to sqrt(s - ||Da' Db||_F^2), but computed through the residual
    // ||Db - Da Da' Db||_F^2 (the sum of squared principal-angle sines),
    // which stays accurate when the subspaces are nearly identical.
    let cross = a.basis().transpose() * b.basis();
    let resid = b.basis() - a.basis() * cross;
    let val = resid.norm_squared().min(a.dim() as f64);
    Ok(val.max(0.0).sqrt())
}

/// Orthogonal projection of `x` onto the subspace: D D' x.
pub fn project(sub: &Subspace, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != sub.ambient_dim() {
        return Err(McuosError::ShapeMismatch(format!(
            "vector length {} != ambient dimension {}",
            x.len(),
            sub.ambient_dim()
        )));
    }
    let coeffs = sub.basis().transpose() * x;
    Ok(sub.basis() * coeffs)
}

/// Result of greedily matching learned subspaces to ground-truth subspaces.
#[derive(Debug, Clone)]
pub struct SubspaceMatch {
    /// `permutation[ell]` is the index of the truth subspace matched to
    /// learned subspace `ell`.
    pub permutation: Vec<usize>,
    /// Mean normalized distance over matched pairs, in [0, 1].
    pub d_avg: f64,
}

/// Greedily pairs each learned subspace with a distinct ground-truth subspace
/// by descending ||D_l' T_p||_F (ties to the lowest indices), then reports
/// the mean normalized subspace distance over the pairs.
pub fn match_subspaces(
    learned: &SubspaceCollection,
    truth: &SubspaceCollection,
) -> Result<SubspaceMatch> {
    if learned.len() != truth.len() {
        return Err(McuosError::ShapeMismatch(
            "match_subspaces requires equal subspace counts".into(),
        ));
    }
    if learned.ambient_dim() != truth.ambient_dim() || learned.dim() != truth.dim() {
        return Err(McuosError::ShapeMismatch(
            "match_subspaces requires equal (m, s)".into(),
        ));
    }
    let count = learned.len();
    let s = learned.dim() as f64;

    let mut scores = Vec::with_capacity(count * count);
    for ell in 0..count {
        for p in 0..count {
            let cross = learned.get(ell).basis().transpose() * truth.get(p).basis();
            scores.push((cross.norm_squared(), ell, p));
        }
    }
    // Descending score; ties broken by lowest learned index then truth index.
    scores.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut permutation = vec![usize::MAX; count];
    let mut truth_used = vec![false; count];
    let mut assigned = 0;
    for &(_, ell, p) in &scores {
        if permutation[ell] == usize::MAX && !truth_used[p] {
            permutation[ell] = p;
            truth_used[p] = true;
            assigned += 1;
            if assigned == count {
                break;
            }
        }
    }

    let mut total = 0.0;
    for ell in 0..count {
        let d = subspace_distance(learned.get(ell), truth.get(permutation[ell]))?;
        total += (d * d / s).max(0.0).sqrt();
    }
    Ok(SubspaceMatch {
        permutation,
        d_avg: total / count as f64,
    })
}

/// Draws a random point on the Stiefel manifold V_{m,s} by orthonormalizing a
/// standard Gaussian matrix.
pub fn random_orthonormal<R: rand::Rng>(m: usize, s: usize, rng: &mut R) -> Subspace {
    let mat = crate::datagen::standard_normal_matrix(m, s, rng);
    orthonormalize(&mat).expect("random Gaussian matrix is full rank almost surely")
}
