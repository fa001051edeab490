//! Small dense helpers shared by the solver, oracle and checks.

use nalgebra::{DMatrix, DVector};

/// Reciprocal condition numbers below this are treated as singular.
pub const RCOND_MIN: f64 = 1e-12;
/// Relative singular-value cutoff for the Moore-Penrose inverse.
pub const PINV_CUTOFF: f64 = 1e-12;
/// Inputs with relative asymmetry up to this are symmetrized, larger is rejected.
pub const INPUT_ASYMMETRY: f64 = 1e-12;

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// ‖M − Mᵀ‖_F / ‖M‖_F, zero for the zero matrix.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = frobenius(m);
    if norm == 0.0 {
        return 0.0;
    }
    frobenius(&(m - m.transpose())) / norm
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// `1e-9 · (1 + max |λ|)`.
pub fn psd_tolerance(eigenvalues: &[f64]) -> f64 {
    let scale = eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    1e-9 * (1.0 + scale)
}

/// Smallest eigenvalue and the tolerance it is judged against.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(m);
    let tol = psd_tolerance(&ev);
    (ev.first().copied().unwrap_or(0.0), tol)
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let (min, tol) = min_eigenvalue(m);
    min >= -tol
}

pub fn is_pd(m: &DMatrix<f64>) -> bool {
    let (min, tol) = min_eigenvalue(m);
    min > tol
}

/// Singular triplets of `m` from the symmetric eigenproblem of `[0 M; Mᵀ 0]`,
/// largest first. nalgebra's Golub-Kahan SVD can stall short of convergence
/// on some well-conditioned inputs, the symmetric solver does not.
struct Svd {
    sigma: Vec<f64>,
    u: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
}

fn svd(m: &DMatrix<f64>) -> Svd {
    let (r, c) = m.shape();
    let mut jw = DMatrix::zeros(r + c, r + c);
    jw.view_mut((0, r), (r, c)).copy_from(m);
    jw.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let eig = jw.symmetric_eigen();
    let mut order: Vec<usize> = (0..r + c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Svd {
        sigma: Vec::new(),
        u: Vec::new(),
        v: Vec::new(),
    };
    for &idx in order.iter().take(r.min(c)) {
        let vec = eig.eigenvectors.column(idx);
        out.sigma.push(eig.eigenvalues[idx].max(0.0));
        out.u.push(vec.rows(0, r) * std::f64::consts::SQRT_2);
        out.v.push(vec.rows(r, c) * std::f64::consts::SQRT_2);
    }
    out
}

/// Singular values of `m`, largest first.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    svd(m).sigma
}

/// σ_min / σ_max; 0 for zero or non-finite input, 1 for the empty matrix.
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return 0.0;
    }
    let sv = singular_values(m);
    let max = sv[0];
    if max == 0.0 {
        return 0.0;
    }
    sv[sv.len() - 1] / max
}

/// Solves `m · x = rhs` by pivoted LU after an SVD conditioning check, or
/// returns the failing rcond.
pub fn solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, rhs.ncols()));
    }
    let rc = rcond(m);
    if !(rc >= RCOND_MIN) {
        return Err(rc);
    }
    m.clone().full_piv_lu().solve(rhs).ok_or(rc)
}

/// Moore-Penrose inverse with singular values below `1e-12 · σ_max` dropped.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(c, r);
    if r == 0 || c == 0 {
        return out;
    }
    let d = svd(m);
    let max = d.sigma[0];
    if max == 0.0 {
        return out;
    }
    for ((s, u), v) in d.sigma.iter().zip(&d.u).zip(&d.v) {
        if *s > PINV_CUTOFF * max {
            out += v * u.transpose() / *s;
        }
    }
    out
}

/// `max|a − b| / max(max|a|, max|b|)`; absolute when both are zero.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.amax().max(b.amax());
    let diff = (a - b).amax();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn block(m: &DMatrix<f64>, r0: usize, c0: usize, nr: usize, nc: usize) -> DMatrix<f64> {
    m.view((r0, c0), (nr, nc)).into_owned()
}

pub fn set_block(m: &mut DMatrix<f64>, r0: usize, c0: usize, b: &DMatrix<f64>) {
    m.view_mut((r0, c0), b.shape()).copy_from(b);
}

pub fn quad(x: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

/// Trace of `a · b` without forming the product.
pub fn trace_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.ncols(), b.nrows());
    assert_eq!(a.nrows(), b.ncols());
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

/// Factor `F` with `F Fᵀ = Σ`: Cholesky when it succeeds, otherwise a
/// symmetric square root with negative eigenvalues clipped to zero.
pub fn covariance_factor(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    if sigma.nrows() == 0 {
        return sigma.clone();
    }
    let s = symmetrize(sigma);
    if let Some(ch) = s.clone().cholesky() {
        return ch.l();
    }
    let eig = s.symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Compensated (Neumaier) running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &Neumaier) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
