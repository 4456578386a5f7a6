//! Small dense symmetric positive-definite matrices.
//!
//! Dimensions here are the covariate count, so everything is plain
//! row-major `Vec<f64>` with O(p³) factorizations.

use super::NumericError;

/// Pivots at or below this fraction of the largest diagonal entry are
/// treated as zero.
const PIVOT_RELATIVE_TOL: f64 = 1e-12;

/// Symmetric matrix intended to be positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SpdMatrix {
    /// Builds from row-major entries, checking symmetry to 1e-12 relative to
    /// the largest entry.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if dim == 0 || data.len() != dim * dim {
            return Err(NumericError::Domain(format!(
                "expected {dim}x{dim} entries, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::Domain("matrix has non-finite entries".into()));
        }
        let scale = data.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (data[i * dim + j], data[j * dim + i]);
                if (a - b).abs() > 1e-12 * scale {
                    return Err(NumericError::Asymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    /// Builds `f(i, j)` for `i <= j` and mirrors it, so the result is exactly
    /// symmetric.
    pub fn from_upper(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, weight: f64, other: &SpdMatrix) {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += weight * b;
        }
    }

    pub fn scaled(&self, weight: f64) -> SpdMatrix {
        SpdMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| v * weight).collect(),
        }
    }

    /// Adds `lambda * mean(diag) * I`; returns the amount added.
    pub fn add_ridge(&mut self, lambda: f64) -> f64 {
        let mean_diag = self.diag().iter().sum::<f64>() / self.dim as f64;
        let bump = lambda * mean_diag;
        for i in 0..self.dim {
            self.data[i * self.dim + i] += bump;
        }
        bump
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim, "dimension mismatch");
        self.data
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn cholesky(&self) -> Result<Cholesky, NumericError> {
        cholesky(self)
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

/// Factors `m = L Lᵀ`. A pivot that is not clearly positive yields
/// [`NumericError::Singular`] naming its index.
pub fn cholesky(m: &SpdMatrix) -> Result<Cholesky, NumericError> {
    let n = m.dim;
    let max_diag = m.diag().into_iter().fold(0.0_f64, f64::max);
    let tol = PIVOT_RELATIVE_TOL * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = m.get(j, j);
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if !(pivot > tol) {
            return Err(NumericError::Singular { pivot: j });
        }
        let d = pivot.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(Cholesky { dim: n, lower: l })
}

/// Solves `m x = rhs` through a Cholesky factorization.
pub fn solve_spd(m: &SpdMatrix, rhs: &[f64]) -> Result<Vec<f64>, NumericError> {
    Ok(cholesky(m)?.solve(rhs))
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry `(i, j)` of `L` (zero above the diagonal).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// `L⁻¹ v`.
    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.forward_in_place(&mut out);
        out
    }

    pub fn forward_in_place(&self, v: &mut [f64]) {
        let n = self.dim;
        assert_eq!(v.len(), n, "dimension mismatch");
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&v[..i]).map(|(a, b)| a * b).sum();
            v[i] = (v[i] - s) / self.lower[i * n + i];
        }
    }

    /// `L⁻ᵀ v`.
    pub fn backward(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        assert_eq!(v.len(), n, "dimension mismatch");
        let mut out = v.to_vec();
        for i in (0..n).rev() {
            let mut s = out[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * out[k];
            }
            out[i] = s / self.lower[i * n + i];
        }
        out
    }

    /// `L v`.
    pub fn mul_lower(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| (0..=i).map(|k| self.lower[i * n + k] * v[k]).sum())
            .collect()
    }

    /// `A⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(v))
    }

    /// `vᵀ A⁻¹ v = ‖L⁻¹ v‖²`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let w = self.forward(v);
        w.iter().map(|x| x * x).sum()
    }

    /// `uᵀ A⁻¹ v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let a = self.forward(u);
        let b = self.forward(v);
        a.iter().zip(&b).map(|(x, y)| x * y).sum()
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> SpdMatrix {
        let n = self.dim;
        SpdMatrix::from_upper(n, |i, j| (0..=i).map(|k| self.get(i, k) * self.get(j, k)).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(dim: usize, entries: &[f64]) -> SpdMatrix {
        // A = BᵀB + I
        SpdMatrix::from_upper(dim, |i, j| {
            let dot: f64 = (0..dim).map(|k| entries[k * dim + i] * entries[k * dim + j]).sum();
            dot + if i == j { 1.0 } else { 0.0 }
        })
    }

    fn inf_norm(v: &[f64]) -> f64 {
        v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn identity_factor_is_identity() {
        let c = cholesky(&SpdMatrix::identity(4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_by_two_by_hand() {
        let m = SpdMatrix::new(2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let c = m.cholesky().unwrap();
        assert_eq!(c.get(0, 0), 2.0);
        assert_eq!(c.get(1, 0), 1.0);
        assert!((c.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.get(0, 1), 0.0);
        let x = solve_spd(&m, &[2.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
        assert_eq!(solve_spd(&SpdMatrix::identity(3), &[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn singular_reports_pivot() {
        let m = SpdMatrix::new(3, vec![1.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.cholesky().unwrap_err(), NumericError::Singular { pivot: 2 });
        let m = SpdMatrix::new(2, vec![-1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.cholesky().unwrap_err(), NumericError::Singular { pivot: 0 });
    }

    #[test]
    fn asymmetric_rejected() {
        let err = SpdMatrix::new(2, vec![1.0, 0.5, 0.4, 1.0]).unwrap_err();
        assert_eq!(err, NumericError::Asymmetric { row: 0, col: 1 });
    }

    #[test]
    fn ridge_bumps_diagonal() {
        let mut m = SpdMatrix::new(2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let bump = m.add_ridge(0.5);
        assert_eq!(bump, 1.5);
        assert_eq!(m.diag(), vec![3.5, 5.5]);
    }

    proptest! {
        #[test]
        fn reconstruction_and_residual(dim in 1usize..=32, seed in proptest::collection::vec(-2.0f64..2.0, 32 * 32 + 32)) {
            let a = random_spd(dim, &seed);
            let c = a.cholesky().unwrap();
            let r = c.reconstruct();
            let scale = inf_norm(a.as_slice());
            let err = a.as_slice().iter().zip(r.as_slice()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
            prop_assert!(err <= 1e-10 * scale, "reconstruction error {err}");

            let rhs = &seed[32 * 32..32 * 32 + dim];
            let x = c.solve(rhs);
            let ax = a.mul_vec(&x);
            let resid: Vec<f64> = ax.iter().zip(rhs).map(|(p, q)| p - q).collect();
            prop_assert!(inf_norm(&resid) <= 1e-9 * inf_norm(rhs).max(1e-300));

            let qf = c.quad_form(rhs);
            let direct: f64 = rhs.iter().zip(&x).map(|(p, q)| p * q).sum();
            prop_assert!((qf - direct).abs() <= 1e-9 * direct.abs().max(1e-12));
        }
    }
}
