//! Dense linear-algebra kernels and the subset-expansion identities for
//! `det(A + Diag(λ))` and `(A + Diag(λ))⁻¹`.
//!
//! Every subset expansion here enumerates `2^n` principal submatrices, so it is
//! guarded by [`SUBSET_LIMIT`]. These routines serve as verification oracles
//! for the barrier Jacobian, not as production solve paths.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest dimension accepted by the `2^n` subset expansions.
pub const SUBSET_LIMIT: usize = 12;

/// Largest dimension accepted by cofactor-expansion adjugates.
pub const ADJUGATE_LIMIT: usize = 12;

/// Relative eigenvalue floor used when testing positive semidefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// A selection σ ∈ {0,1}^m of constraint rows (or matrix indices).
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActiveSet {
    len: usize,
    words: Vec<u64>,
}

impl ActiveSet {
    pub fn empty(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn full(len: usize) -> Self {
        let mut s = Self::empty(len);
        for i in 0..len {
            s.insert(i);
        }
        s
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut s = Self::empty(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                s.insert(i);
            }
        }
        s
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut s = Self::empty(len);
        for &i in indices {
            if i >= len {
                return Err(Error::Dimension(format!(
                    "index {i} out of range for active set of length {len}"
                )));
            }
            s.insert(i);
        }
        Ok(s)
    }

    /// Low `len` bits of `mask`, bit `i` selecting index `i`.
    pub fn from_mask(len: usize, mask: u64) -> Self {
        assert!(len <= 64);
        let mut s = Self::empty(len);
        if len > 0 {
            s.words[0] = if len == 64 { mask } else { mask & ((1u64 << len) - 1) };
        }
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "index {i} out of range ({})", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, i: usize) {
        assert!(i < self.len, "index {i} out of range ({})", self.len);
        self.words[i / 64] &= !(1 << (i % 64));
    }

    /// Number of selected indices, |σ|.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.contains(i))
    }

    pub fn complement_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| !self.contains(i))
    }

    /// `'0'`/`'1'` string, index 0 first.
    pub fn to_bit_string(&self) -> String {
        (0..self.len)
            .map(|i| if self.contains(i) { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidArgument(format!(
                    "invalid active-set character {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_bools(&bits))
    }

    /// All `2^len` subsets, in increasing mask order.
    pub fn all_subsets(len: usize) -> Result<impl Iterator<Item = ActiveSet>> {
        if len > SUBSET_LIMIT {
            return Err(Error::CombinatorialLimit {
                size: len,
                limit: SUBSET_LIMIT,
            });
        }
        Ok((0..1u64 << len).map(move |mask| ActiveSet::from_mask(len, mask)))
    }
}

impl fmt::Debug for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActiveSet({})", self.to_bit_string())
    }
}

impl fmt::Display for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

fn ensure_square(m: &Matrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

/// Determinant by LU with partial pivoting. The 0×0 determinant is 1.
pub fn det(m: &Matrix) -> Result<f64> {
    let n = ensure_square(m)?;
    Ok(match n {
        0 => 1.0,
        1 => m[(0, 0)],
        _ => m.clone().lu().determinant(),
    })
}

/// Inverse by LU; fails on exactly singular pivots.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    let n = ensure_square(m)?;
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    m.clone().lu().try_inverse().ok_or(Error::Singular("LU inverse"))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    ensure_square(m)?;
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("Cholesky factorization failed"))?;
    Ok(chol.inverse())
}

/// Matrix with row `i` and column `j` removed.
fn minor(m: &Matrix, i: usize, j: usize) -> Matrix {
    let n = m.nrows();
    Matrix::from_fn(n - 1, n - 1, |r, c| {
        let rr = if r < i { r } else { r + 1 };
        let cc = if c < j { c } else { c + 1 };
        m[(rr, cc)]
    })
}

/// Transpose of the cofactor matrix. Valid for singular `m`.
///
/// The 1×1 adjugate is `[1]` and the 0×0 adjugate is the empty matrix.
pub fn adjugate(m: &Matrix) -> Result<Matrix> {
    let n = ensure_square(m)?;
    if n > ADJUGATE_LIMIT {
        return Err(Error::CombinatorialLimit {
            size: n,
            limit: ADJUGATE_LIMIT,
        });
    }
    match n {
        0 => return Ok(Matrix::zeros(0, 0)),
        1 => return Ok(Matrix::from_element(1, 1, 1.0)),
        _ => {}
    }
    let mut adj = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            // cofactor C_ij lands at adj_ji
            adj[(j, i)] = sign * det(&minor(m, i, j))?;
        }
    }
    Ok(adj)
}

fn ensure_mask(m: &Matrix, sigma: &ActiveSet) -> Result<usize> {
    let n = ensure_square(m)?;
    if sigma.len() != n {
        return Err(Error::Dimension(format!(
            "active set length {} does not match matrix dimension {n}",
            sigma.len()
        )));
    }
    Ok(n)
}

/// `[M]_σ`: rows and columns with σ_i = 1, in ascending index order.
pub fn principal_submatrix(m: &Matrix, sigma: &ActiveSet) -> Result<Matrix> {
    ensure_mask(m, sigma)?;
    let idx: Vec<usize> = sigma.indices().collect();
    Ok(Matrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])]))
}

fn pad(sub: &Matrix, sigma: &ActiveSet) -> Matrix {
    let idx: Vec<usize> = sigma.indices().collect();
    let n = sigma.len();
    let mut out = Matrix::zeros(n, n);
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            out[(i, j)] = sub[(r, c)];
        }
    }
    out
}

/// `M_σ^{-1}`: inverse of `[M]_σ` padded with zeros back to the size of `M`.
pub fn padded_inverse(m: &Matrix, sigma: &ActiveSet) -> Result<Matrix> {
    let sub = principal_submatrix(m, sigma)?;
    let inv = inverse(&sub).map_err(|_| Error::DegenerateActiveSet(sigma.to_bit_string()))?;
    Ok(pad(&inv, sigma))
}

/// `adj(M)_σ`: adjugate of `[M]_σ` padded with zeros back to the size of `M`.
pub fn padded_adjugate(m: &Matrix, sigma: &ActiveSet) -> Result<Matrix> {
    let sub = principal_submatrix(m, sigma)?;
    Ok(pad(&adjugate(&sub)?, sigma))
}

fn check_lambda(n: usize, lambda: &Vector) -> Result<()> {
    if lambda.len() != n {
        return Err(Error::Dimension(format!(
            "diagonal has length {}, matrix dimension is {n}",
            lambda.len()
        )));
    }
    Ok(())
}

/// `∏_{i ∉ σ} λ_i`.
fn complement_product(sigma: &ActiveSet, lambda: &Vector) -> f64 {
    sigma.complement_indices().map(|i| lambda[i]).product()
}

/// `Σ_σ (∏ λ_i^{1-σ_i}) det(A_σ)`, which equals `det(A + Diag(λ))`.
pub fn det_plus_diagonal(a: &Matrix, lambda: &Vector) -> Result<f64> {
    let n = ensure_square(a)?;
    check_lambda(n, lambda)?;
    let mut total = 0.0;
    for sigma in ActiveSet::all_subsets(n)? {
        let d = det(&principal_submatrix(a, &sigma)?)?;
        total += complement_product(&sigma, lambda) * d;
    }
    Ok(total)
}

/// Whether `det` should be treated as zero for a PSD principal submatrix.
///
/// Hadamard's inequality bounds `det(A_σ)` by the product of its diagonal, so
/// the test is relative to that product.
pub fn psd_det_is_zero(det: f64, sub: &Matrix) -> bool {
    let scale: f64 = sub.diagonal().iter().map(|d| d.abs()).product();
    det <= 1e-11 * scale || scale == 0.0
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn sym_min_eigenvalue(m: &Matrix) -> Result<f64> {
    let n = ensure_square(m)?;
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let sym = (m + m.transpose()) * 0.5;
    Ok(sym.symmetric_eigenvalues().min())
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

fn ensure_psd(a: &Matrix) -> Result<()> {
    let min = sym_min_eigenvalue(a)?;
    let scale = spectral_norm(a).max(1.0);
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    /// `(h_σ / h) · A_σ^{-1}` for nonsingular `A_σ`.
    Inverse,
    /// `(∏ λ_i^{1-σ_i} / h) · adj(A_σ)` for singular `A_σ`.
    Adjugate,
}

#[derive(Clone, Debug)]
pub struct DecompositionTerm {
    pub sigma: ActiveSet,
    pub kind: TermKind,
    /// `h_σ = det(A_σ) ∏ λ_i^{1-σ_i}`; zero for adjugate terms.
    pub h_sigma: f64,
    /// Coefficient multiplying `matrix` in the reconstruction.
    pub weight: f64,
    /// Padded inverse or padded adjugate.
    pub matrix: Matrix,
}

#[derive(Clone, Debug)]
pub struct InverseDecomposition {
    pub terms: Vec<DecompositionTerm>,
    /// `h = Σ h_σ = det(A + Λ)`.
    pub h: f64,
}

impl InverseDecomposition {
    /// `Σ weight_σ · matrix_σ`, which equals `(A + Λ)^{-1}`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.terms.first().map_or(0, |t| t.matrix.nrows());
        self.terms
            .iter()
            .fold(Matrix::zeros(n, n), |acc, t| acc + &t.matrix * t.weight)
    }
}

/// Expands `(A + Diag(λ))^{-1}` over all principal submatrices of a PSD `A`.
///
/// Nonsingular `A_σ` contribute weighted padded inverses; singular ones
/// contribute weighted padded adjugates. Where `A_σ` is singular in exact
/// arithmetic `adj(A_σ)` is still well defined, and for nonsingular `A_σ`
/// both forms coincide since `A_σ^{-1} = adj(A_σ) / det(A_σ)`.
pub fn decompose_inverse_plus_diagonal(
    a: &Matrix,
    lambda: &Vector,
) -> Result<InverseDecomposition> {
    let n = ensure_square(a)?;
    check_lambda(n, lambda)?;
    if n > SUBSET_LIMIT {
        return Err(Error::CombinatorialLimit {
            size: n,
            limit: SUBSET_LIMIT,
        });
    }
    if let Some(bad) = lambda.iter().find(|&&l| l <= 0.0 || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "diagonal entries must be positive, got {bad}"
        )));
    }
    ensure_psd(a)?;

    let mut raw = Vec::with_capacity(1 << n);
    let mut h = 0.0;
    for sigma in ActiveSet::all_subsets(n)? {
        let sub = principal_submatrix(a, &sigma)?;
        let d = det(&sub)?;
        let c = complement_product(&sigma, lambda);
        if psd_det_is_zero(d, &sub) {
            let m = pad(&adjugate(&sub)?, &sigma);
            raw.push((sigma, TermKind::Adjugate, 0.0, c, m));
        } else {
            let h_sigma = d * c;
            h += h_sigma;
            let m = pad(&inverse(&sub)?, &sigma);
            raw.push((sigma, TermKind::Inverse, h_sigma, h_sigma, m));
        }
    }
    let terms = raw
        .into_iter()
        .map(|(sigma, kind, h_sigma, numerator, matrix)| DecompositionTerm {
            sigma,
            kind,
            h_sigma,
            weight: numerator / h,
            matrix,
        })
        .collect();
    Ok(InverseDecomposition { terms, h })
}

/// `(A + U C V)^{-1} = A^{-1} - A^{-1} U (C^{-1} + V A^{-1} U)^{-1} V A^{-1}`.
pub fn woodbury_inverse(a: &Matrix, u: &Matrix, c: &Matrix, v: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a)?;
    let k = ensure_square(c)?;
    if u.nrows() != n || u.ncols() != k || v.nrows() != k || v.ncols() != n {
        return Err(Error::Dimension(format!(
            "woodbury shapes: A {n}x{n}, U {}x{}, C {k}x{k}, V {}x{}",
            u.nrows(),
            u.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    let a_inv = inverse(a).map_err(|_| Error::Singular("woodbury: A"))?;
    let c_inv = inverse(c).map_err(|_| Error::Singular("woodbury: C"))?;
    let inner = c_inv + v * &a_inv * u;
    let inner_inv = inverse(&inner).map_err(|_| Error::Singular("woodbury: C^-1 + V A^-1 U"))?;
    Ok(&a_inv - &a_inv * u * inner_inv * v * &a_inv)
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.shape() == b.shape() && max_abs_diff(a, b) <= tol
    }

    #[test]
    fn adjugate_two_by_two_closed_form() {
        let m = dmatrix![3.0, -2.0; 5.0, 7.0];
        assert_eq!(adjugate(&m).unwrap(), dmatrix![7.0, 2.0; -5.0, 3.0]);
    }

    #[test]
    fn adjugate_of_identity() {
        let i = Matrix::identity(4, 4);
        assert!(close(&adjugate(&i).unwrap(), &i, 1e-14));
    }

    #[test]
    fn adjugate_of_singular_matrix() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        let adj = adjugate(&m).unwrap();
        assert_eq!(adj, dmatrix![1.0, -1.0; -1.0, 1.0]);
        assert!(close(&(&adj * &m), &Matrix::zeros(2, 2), 0.0));
    }

    #[test]
    fn adjugate_rejects_non_square() {
        assert!(matches!(
            adjugate(&Matrix::zeros(2, 3)),
            Err(Error::NotSquare { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn small_adjugate_conventions() {
        assert_eq!(adjugate(&dmatrix![5.0]).unwrap(), dmatrix![1.0]);
        assert_eq!(det(&Matrix::zeros(0, 0)).unwrap(), 1.0);
    }

    #[test]
    fn principal_submatrix_selection() {
        let m = Matrix::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        assert_eq!(principal_submatrix(&m, &ActiveSet::full(3)).unwrap(), m);
        let empty = principal_submatrix(&m, &ActiveSet::empty(3)).unwrap();
        assert_eq!(empty.shape(), (0, 0));
        assert_eq!(det(&empty).unwrap(), 1.0);
        let s = ActiveSet::from_bools(&[true, false, true]);
        assert_eq!(
            principal_submatrix(&m, &s).unwrap(),
            dmatrix![0.0, 2.0; 6.0, 8.0]
        );
        assert!(principal_submatrix(&m, &ActiveSet::empty(2)).is_err());
    }

    #[test]
    fn padded_inverse_cases() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let full = padded_inverse(&m, &ActiveSet::full(2)).unwrap();
        assert!(close(&full, &inverse(&m).unwrap(), 1e-15));
        assert_eq!(
            padded_inverse(&m, &ActiveSet::empty(2)).unwrap(),
            Matrix::zeros(2, 2)
        );
        let d = dmatrix![2.0, 0.0; 0.0, 5.0];
        assert_eq!(
            padded_inverse(&d, &ActiveSet::from_bools(&[true, false])).unwrap(),
            dmatrix![0.5, 0.0; 0.0, 0.0]
        );
        let singular = dmatrix![1.0, 1.0; 1.0, 1.0];
        assert!(matches!(
            padded_inverse(&singular, &ActiveSet::full(2)),
            Err(Error::DegenerateActiveSet(_))
        ));
        assert_eq!(
            padded_adjugate(&singular, &ActiveSet::from_bools(&[false, true])).unwrap(),
            dmatrix![0.0, 0.0; 0.0, 1.0]
        );
    }

    #[test]
    fn det_plus_diagonal_examples() {
        let lambda = dvector![2.0, 3.0, 0.5];
        assert!((det_plus_diagonal(&Matrix::zeros(3, 3), &lambda).unwrap() - 3.0).abs() < 1e-15);

        let a = dmatrix![1.0, 1.0; 1.0, 1.0];
        let v = det_plus_diagonal(&a, &dvector![2.0, 3.0]).unwrap();
        // det([[3,1],[1,4]]) = 11
        assert!((v - 11.0).abs() < 1e-14);

        let a = dmatrix![2.0, 1.0; 1.0, 3.0];
        let tiny = det_plus_diagonal(&a, &dvector![1e-12, 1e-12]).unwrap();
        assert!((tiny - 5.0).abs() < 1e-10);
    }

    #[test]
    fn decomposition_examples() {
        let dec =
            decompose_inverse_plus_diagonal(&Matrix::zeros(2, 2), &dvector![2.0, 3.0]).unwrap();
        let nonzero: Vec<_> = dec
            .terms
            .iter()
            .filter(|t| t.weight != 0.0 && t.matrix.amax() > 0.0)
            .collect();
        assert_eq!(nonzero.len(), 2);
        assert!(close(&dec.reconstruct(), &dmatrix![0.5, 0.0; 0.0, 1.0 / 3.0], 1e-15));

        let a = dmatrix![1.0, 1.0; 1.0, 1.0];
        let dec = decompose_inverse_plus_diagonal(&a, &dvector![2.0, 3.0]).unwrap();
        let direct = inverse(&dmatrix![3.0, 1.0; 1.0, 4.0]).unwrap();
        assert!(close(&dec.reconstruct(), &direct, 1e-12));
        assert!((dec.h - 11.0).abs() < 1e-12);

        let a = dmatrix![4.0, 0.0; 0.0, 0.0];
        let dec = decompose_inverse_plus_diagonal(&a, &dvector![1.0, 1.0]).unwrap();
        assert!(close(&dec.reconstruct(), &dmatrix![0.2, 0.0; 0.0, 1.0], 1e-14));
        let h10 = dec
            .terms
            .iter()
            .find(|t| t.sigma.to_bit_string() == "10")
            .unwrap();
        assert_eq!(h10.kind, TermKind::Inverse);
        assert!((h10.h_sigma - 4.0).abs() < 1e-15);
        let h01 = dec
            .terms
            .iter()
            .find(|t| t.sigma.to_bit_string() == "01")
            .unwrap();
        assert_eq!(h01.kind, TermKind::Adjugate);
        assert_eq!(h01.h_sigma, 0.0);
        assert!((dec.h - 5.0).abs() < 1e-14);
    }

    #[test]
    fn decomposition_rejects_bad_input() {
        let a = dmatrix![1.0, 0.0; 0.0, 1.0];
        assert!(matches!(
            decompose_inverse_plus_diagonal(&a, &dvector![1.0, 0.0]),
            Err(Error::InvalidArgument(_))
        ));
        let indefinite = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(matches!(
            decompose_inverse_plus_diagonal(&indefinite, &dvector![1.0, 1.0]),
            Err(Error::NotPsd { .. })
        ));
        let big = Matrix::identity(13, 13);
        assert!(matches!(
            decompose_inverse_plus_diagonal(&big, &Vector::from_element(13, 1.0)),
            Err(Error::CombinatorialLimit { size: 13, limit: 12 })
        ));
    }

    #[test]
    fn singular_padded_adjugates_are_annihilated() {
        // A = Bᵀ B with B rank one: every 2x2 principal submatrix is singular,
        // and Bᵀ-side products with the padded adjugate vanish.
        let b = dmatrix![1.0, 2.0, -1.0];
        let a = b.transpose() * &b;
        for sigma in ActiveSet::all_subsets(3).unwrap().filter(|s| s.count() >= 2) {
            let adj = padded_adjugate(&a, &sigma).unwrap();
            let prod = &a * &adj;
            assert!(prod.amax() < 1e-12, "{sigma}: {prod}");
        }
    }

    #[test]
    fn woodbury_examples() {
        let a = dmatrix![2.0, 0.5; 0.5, 1.0];
        let zero_u = Matrix::zeros(2, 1);
        let got = woodbury_inverse(&a, &zero_u, &dmatrix![1.0], &zero_u.transpose()).unwrap();
        assert!(close(&got, &inverse(&a).unwrap(), 1e-15));

        let e1 = dmatrix![1.0; 0.0];
        let got = woodbury_inverse(&Matrix::identity(2, 2), &e1, &dmatrix![1.0], &e1.transpose())
            .unwrap();
        assert!(close(&got, &dmatrix![0.5, 0.0; 0.0, 1.0], 1e-15));

        assert!(matches!(
            woodbury_inverse(&Matrix::zeros(2, 2), &e1, &dmatrix![1.0], &e1.transpose()),
            Err(Error::Singular(_))
        ));
        assert!(woodbury_inverse(&Matrix::identity(2, 2), &e1, &dmatrix![1.0], &e1).is_err());
    }

    #[test]
    fn active_set_bits() {
        let s = ActiveSet::from_indices(70, &[0, 3, 65]).unwrap();
        assert_eq!(s.count(), 3);
        assert!(s.contains(65) && !s.contains(64));
        let round = ActiveSet::parse_bit_string(&s.to_bit_string()).unwrap();
        assert_eq!(round, s);
        assert_eq!(ActiveSet::all_subsets(3).unwrap().count(), 8);
    }

    fn random_matrix(n: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn adjugate_identity(n in 1usize..=6, seed in any::<u64>()) {
            let m = random_matrix(n, seed);
            let adj = adjugate(&m).unwrap();
            let d = det(&m).unwrap();
            let lhs = &adj * &m;
            let rhs = Matrix::identity(n, n) * d;
            prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-9 * (1.0 + d.abs()));
        }

        #[test]
        fn decomposition_inverts(n in 1usize..=6, rank in 0usize..=6, seed in any::<u64>()) {
            let b = random_matrix(n, seed).rows(0, rank.min(n)).into_owned();
            let a = b.transpose() * &b;
            let lambda = Vector::from_fn(n, |i, _| 0.1 + ((seed >> i) & 7) as f64 * 0.3);
            let dec = decompose_inverse_plus_diagonal(&a, &lambda).unwrap();
            let prod = (&a + Matrix::from_diagonal(&lambda)) * dec.reconstruct();
            prop_assert!(max_abs_diff(&prod, &Matrix::identity(n, n)) <= 1e-8);
        }
    }
}
