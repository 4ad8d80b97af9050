//! Small dense helpers on top of nalgebra: min-norm solves, spectra, and the
//! ball-constrained quadratic used by both the dual and primal steps.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative cutoff below which singular values count as zero in min-norm solves.
pub const PINV_REL_CUT: f64 = 1e-10;

/// Relative ridge floor applied to second-moment spectra.
pub const RIDGE_REL: f64 = 1e-8;

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Minimum-norm least-squares solution of `m x = c`.
pub fn min_norm_solve(m: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut x = DVector::zeros(m.ncols());
    if smax == 0.0 {
        return x;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > PINV_REL_CUT * smax {
            let coef = u.column(k).dot(c) / s;
            x.axpy(coef, &vt.row(k).transpose(), 1.0);
        }
    }
    x
}

/// Residual `‖m x − c‖∞ / max(1, ‖c‖∞)`.
pub fn relative_residual(m: &DMatrix<f64>, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
    let r = m * x - c;
    r.amax() / c.amax().max(1.0)
}

/// Symmetric positive semidefinite matrix with its spectrum floored at
/// `RIDGE_REL * trace / d`.
#[derive(Debug, Clone)]
pub struct FlooredSpectrum {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
    pub floor: f64,
}

impl FlooredSpectrum {
    /// Returns `None` when the trace is not strictly positive.
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        let d = m.nrows();
        let trace = m.trace();
        if d == 0 || !(trace > 0.0) || !trace.is_finite() {
            return None;
        }
        let floor = RIDGE_REL * trace / d as f64;
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let values = eig.eigenvalues.map(|v| v.max(floor));
        Some(Self {
            vectors: eig.eigenvectors,
            values,
            floor,
        })
    }

    pub fn to_basis(&self, v: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(v)
    }

    pub fn from_basis(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.vectors * v
    }

    /// Applies the inverse of the floored matrix.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut t = self.to_basis(v);
        for (ti, &s) in t.iter_mut().zip(self.values.iter()) {
            *ti /= s;
        }
        self.from_basis(&t)
    }
}

/// Solution of `x_i = r_i / (scale * s_i + mu)` with the smallest `mu ≥ 0`
/// such that `‖x‖ ≤ radius`.
#[derive(Debug, Clone)]
pub struct BallSolution {
    pub x: DVector<f64>,
    pub multiplier: f64,
    pub active: bool,
}

pub fn ball_secular(values: &DVector<f64>, r: &DVector<f64>, scale: f64, radius: f64) -> BallSolution {
    let eval = |mu: f64| -> DVector<f64> {
        DVector::from_iterator(
            r.len(),
            r.iter().zip(values.iter()).map(|(&ri, &si)| ri / (scale * si + mu)),
        )
    };
    let x0 = eval(0.0);
    if x0.norm() <= radius {
        return BallSolution {
            x: x0,
            multiplier: 0.0,
            active: false,
        };
    }
    if radius <= 0.0 {
        return BallSolution {
            x: DVector::zeros(r.len()),
            multiplier: f64::INFINITY,
            active: true,
        };
    }
    let mut lo = 0.0;
    let mut hi = r.norm() / radius;
    for _ in 0..400 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eval(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    BallSolution {
        x: eval(hi),
        multiplier: hi,
        active: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_norm_matches_normal_equations_on_full_rank() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 1.0]);
        let c = DVector::from_vec(vec![1.0, 0.0, 2.0]);
        let x = min_norm_solve(&m, &c);
        let direct = (m.transpose() * &m).try_inverse().unwrap() * m.transpose() * &c;
        assert!((x - direct).amax() < 1e-12);
    }

    #[test]
    fn min_norm_picks_orthogonal_complement_of_null_space() {
        // Null space is spanned by (1, -1); the min-norm answer has equal entries.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let c = DVector::from_vec(vec![2.0, 4.0]);
        let x = min_norm_solve(&m, &c);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ball_secular_hits_radius_when_active() {
        let s = DVector::from_vec(vec![1.0, 0.25]);
        let r = DVector::from_vec(vec![3.0, -2.0]);
        let sol = ball_secular(&s, &r, 2.0, 0.5);
        assert!(sol.active);
        assert!((sol.x.norm() - 0.5).abs() < 1e-9);
        assert!(sol.x.norm() <= 0.5);
    }

    #[test]
    fn floored_spectrum_inverts_well_conditioned_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = FlooredSpectrum::new(&m).unwrap();
        let v = DVector::from_vec(vec![1.0, -1.0]);
        let x = f.solve(&v);
        assert!((&m * x - v).amax() < 1e-12);
    }
}
