//! Dense complex linear algebra shared by every module.
//!
//! Storage is `nalgebra::DMatrix<Complex64>`; large products, Hermitian
//! eigensolves and SVDs are delegated to `faer`.

use faer::{c64, Mat, MatRef, Par, Side};
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

pub const I: Complex64 = Complex64::new(0.0, 1.0);
pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

const FAER_CUTOFF: usize = 24;

/// Reads `NCINDEX_THREADS` and configures the dense kernels. Unset or `1`
/// keeps everything sequential, which makes results bitwise reproducible.
pub fn configure_parallelism() -> usize {
    let n = std::env::var("NCINDEX_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    if n == 1 {
        faer::set_global_parallelism(Par::Seq);
    } else {
        faer::set_global_parallelism(Par::rayon(n));
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    n
}

pub fn to_faer(a: &CMat) -> Mat<c64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn from_faer(a: MatRef<'_, c64>) -> CMat {
    CMat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape");
    if a.nrows().min(a.ncols()).min(b.ncols()) < FAER_CUTOFF {
        return a * b;
    }
    let c = to_faer(a) * to_faer(b);
    from_faer(c.as_ref())
}

/// `a^H b`
pub fn ad_mul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.nrows(), b.nrows(), "ad_mul shape");
    if a.nrows().min(a.ncols()).min(b.ncols()) < FAER_CUTOFF {
        return a.ad_mul(b);
    }
    let c = to_faer(a).adjoint() * to_faer(b);
    from_faer(c.as_ref())
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(a: &CMat) -> Result<(Vec<f64>, CMat)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((vec![], CMat::zeros(0, 0)));
    }
    let h = hermitian_part(a);
    let e = to_faer(&h)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::LinAlg(format!("{e:?}")))?;
    let vals = e.S().column_vector().iter().map(|z| z.re).collect();
    Ok((vals, from_faer(e.U())))
}

pub fn eigvalsh(a: &CMat) -> Result<Vec<f64>> {
    if a.nrows() == 0 {
        return Ok(vec![]);
    }
    to_faer(&hermitian_part(a))
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::LinAlg(format!("{e:?}")))
}

/// Thin SVD `a = U diag(s) V^H`, singular values descending.
pub struct Svd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub v: CMat,
}

pub fn svd(a: &CMat) -> Result<Svd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(Svd { u: CMat::zeros(m, 0), s: vec![], v: CMat::zeros(n, 0) });
    }
    let f = to_faer(a)
        .thin_svd()
        .map_err(|e| Error::LinAlg(format!("{e:?}")))?;
    Ok(Svd {
        u: from_faer(f.U()),
        s: f.S().column_vector().iter().map(|z| z.re).collect(),
        v: from_faer(f.V()),
    })
}

/// Full SVD; `v` is square so that its trailing columns span the null space.
pub fn svd_full(a: &CMat) -> Result<Svd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(Svd { u: CMat::identity(m, m), s: vec![], v: CMat::identity(n, n) });
    }
    let f = to_faer(a).svd().map_err(|e| Error::LinAlg(format!("{e:?}")))?;
    Ok(Svd {
        u: from_faer(f.U()),
        s: f.S().column_vector().iter().map(|z| z.re).collect(),
        v: from_faer(f.V()),
    })
}

pub fn singular_values(a: &CMat) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(vec![]);
    }
    to_faer(a)
        .singular_values()
        .map_err(|e| Error::LinAlg(format!("{e:?}")))
}

/// Spectral norm; zero for empty matrices.
pub fn op_norm(a: &CMat) -> f64 {
    singular_values(a).ok().and_then(|s| s.first().copied()).unwrap_or(0.0)
}

pub fn hermitian_part(a: &CMat) -> CMat {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// Columns of `q` spanning the eigenspaces of `h` where `keep(λ)` holds.
pub fn spectral_subspace(h: &CMat, keep: impl Fn(f64) -> bool) -> Result<CMat> {
    let (vals, vecs) = eigh(h)?;
    let cols: Vec<usize> = (0..vals.len()).filter(|&i| keep(vals[i])).collect();
    Ok(vecs.select_columns(cols.iter()))
}

/// Applies `f` to the eigenvalues of a Hermitian matrix.
pub fn hermitian_calculus(h: &CMat, f: impl Fn(f64) -> Complex64) -> Result<CMat> {
    let (vals, vecs) = eigh(h)?;
    let mut scaled = vecs.clone();
    for (j, &l) in vals.iter().enumerate() {
        let fl = f(l);
        scaled.column_mut(j).iter_mut().for_each(|z| *z *= fl);
    }
    Ok(matmul(&scaled, &vecs.adjoint()))
}

/// Projection onto the column span of an isometry.
pub fn projector(q: &CMat) -> CMat {
    matmul(q, &q.adjoint())
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}
