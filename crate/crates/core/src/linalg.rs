//! Small dense symmetric positive-definite solver.
//!
//! The GLM code needs to know *which* column makes a cross-product singular,
//! so the factorization is done by hand instead of through `nalgebra`'s
//! Cholesky, which only reports failure.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance below which a column is treated as dependent.
const PIVOT_TOL: f64 = 1e-11;

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factor a symmetric matrix. Only the lower triangle of `a` is read.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let p = a.nrows();
        let mut l = DMatrix::<f64>::zeros(p, p);
        for j in 0..p {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            let scale = a[(j, j)].abs().max(f64::MIN_POSITIVE);
            if !d.is_finite() || d <= PIVOT_TOL * scale {
                return Err(Error::RankDeficient { column: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..p {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let p = self.dim();
        let mut z = b.clone();
        for i in 0..p {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        for i in (0..p).rev() {
            let mut s = z[i];
            for k in (i + 1)..p {
                s -= self.l[(k, i)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        z
    }

    /// Full inverse `A⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mut inv = DMatrix::<f64>::zeros(p, p);
        let mut e = DVector::<f64>::zeros(p);
        for j in 0..p {
            e.fill(0.0);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        inv
    }

    /// Diagonal of `A⁻¹` without forming the full inverse.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        // (A⁻¹)_jj = Σ_i (L⁻¹)_ij², one column of L⁻¹ at a time.
        let p = self.dim();
        let mut out = vec![0.0; p];
        let mut col = vec![0.0; p];
        for j in 0..p {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0 / self.l[(j, j)];
            for i in (j + 1)..p {
                let s: f64 = (j..i).map(|k| self.l[(i, k)] * col[k]).sum();
                col[i] = -s / self.l[(i, i)];
            }
            out[j] = col[j..].iter().map(|c| c * c).sum();
        }
        out
    }
}

/// `Zᵀ diag(w) Z` for a column-major design; `w = None` means unit weights.
pub fn weighted_gram(z: &DMatrix<f64>, w: Option<&[f64]>) -> DMatrix<f64> {
    let (n, p) = z.shape();
    let scaled;
    let data = match w {
        Some(w) if w.iter().all(|v| *v >= 0.0) => {
            let mut s = z.clone();
            for mut col in s.column_iter_mut() {
                for (v, wi) in col.iter_mut().zip(w) {
                    *v *= wi.sqrt();
                }
            }
            scaled = s;
            scaled.as_slice()
        }
        Some(w) => {
            let mut wz = z.clone();
            for mut col in wz.column_iter_mut() {
                for (v, wi) in col.iter_mut().zip(w) {
                    *v *= wi;
                }
            }
            return z.tr_mul(&wz);
        }
        None => z.as_slice(),
    };
    let mut g = DMatrix::zeros(p, p);
    for j in 0..p {
        let cj = &data[j * n..(j + 1) * n];
        for k in 0..=j {
            let v = dot(cj, &data[k * n..(k + 1) * n]);
            g[(j, k)] = v;
            g[(k, j)] = v;
        }
    }
    g
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `Zᵀ diag(w) v`.
pub fn weighted_cross(z: &DMatrix<f64>, w: Option<&[f64]>, v: &[f64]) -> DVector<f64> {
    let p = z.ncols();
    let n = z.nrows();
    let data = z.as_slice();
    let mut out = DVector::<f64>::zeros(p);
    for j in 0..p {
        let col = &data[j * n..(j + 1) * n];
        out[j] = match w {
            None => col.iter().zip(v).map(|(a, b)| a * b).sum(),
            Some(w) => col
                .iter()
                .zip(v)
                .zip(w)
                .map(|((a, b), c)| a * b * c)
                .sum(),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_and_inverts_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let ch = Cholesky::factor(&a).unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = ch.solve(&b);
        let r = &a * &x - &b;
        assert!(r.norm() < 1e-12);
        let inv = ch.inverse();
        let eye = &a * &inv;
        for i in 0..3 {
            for j in 0..3 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - t).abs() < 1e-12);
            }
        }
        let d = ch.inverse_diagonal();
        for j in 0..3 {
            assert!((d[j] - inv[(j, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn reports_dependent_column() {
        // column 2 = column 0 + column 1
        let z = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0, 5.0, 6.0],
        );
        let g = weighted_gram(&z, None);
        assert_eq!(Cholesky::factor(&g).unwrap_err(), Error::RankDeficient { column: 2 });
    }
}
