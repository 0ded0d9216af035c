//! Discretized twisted Dolbeault operators on the torus, kernel extraction,
//! and analytic indices through the extended trace.
//!
//! Sections take values in the GNS fiber `X = l²(pA^n)` of dimension `d` and
//! are stored with coordinates `point·d + c`. Derivatives are spectral in the
//! quasi-periodic gauge of the bundle. Kernels are extracted on the resolved
//! subspace: the span of covariant-Laplacian eigenvectors below
//! `(2π·N/4)²`. Modes near the grid's Nyquist limit see a distorted symbol
//! and are excluded from the count.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::algebra::{check_owner, AlgebraSpec, TraceFunctional, TraceKind, ZValue};
use crate::bundle::BundleSpec;
use crate::chern::{self, OperatorKind};
use crate::error::{Error, Result};
use crate::forms::{Grid, LineDerivative, Manifold, MatrixForm};
use crate::gns::{extend_map, extended_trace_of_diagonal, GnsSpace};
use crate::hilbert_module::{gap_ratio, K0Class, ModuleMap, ProjectiveModule, GAP_RATIO};
use crate::linalg::{self, CMat, I, ZERO};

/// Default zero threshold for singular values, relative to `σ_max`.
pub const ZERO_REL_TOL: f64 = 1e-6;
/// Resolved modes have Laplacian eigenvalue below `(2π·CUTOFF_FRACTION·N)²`.
pub const CUTOFF_FRACTION: f64 = 0.25;
/// Largest section-space dimension accepted for dense assembly.
pub const MAX_SECTION_DIM: usize = 6000;
/// Allowed commutator with the right action for kernels and operators.
pub const EQUIVARIANCE_TOL: f64 = 1e-9;
/// Relative separation required between the last kept and first dropped
/// Laplacian eigenvalue.
const CLUSTER_REL: f64 = 1e-8;

/// Smallest grid that resolves the zero modes of a degree-`c` twist:
/// `N ≥ 4|c| + 4`. Coarser grids alias theta-function kernels into
/// near-zero singular values that a gap test alone does not reject.
pub fn min_resolution(chern: i64) -> usize {
    4 * chern.unsigned_abs() as usize + 4
}

fn check_resolution(op: &TwistedOperator) -> Result<()> {
    let (n, c) = (op.grid().n, op.bundle().chern());
    if n < min_resolution(c) {
        return Err(Error::Domain(format!("grid N = {n} under-resolves chern {c}; need N ≥ {}", min_resolution(c))));
    }
    Ok(())
}

/// `∂̄` twisted by a bundle, as a dense matrix on grid sections of `X`.
#[derive(Clone, Debug)]
pub struct TwistedOperator {
    bundle: BundleSpec,
    tau: TraceFunctional,
    fiber: GnsSpace,
    dbar: CMat,
    laplacian: CMat,
    right: Vec<CMat>,
}

/// Kernel and cokernel of an operator on its resolved subspace.
#[derive(Clone, Debug)]
pub struct KernelData {
    /// Orthonormal kernel basis in section coordinates.
    pub kernel: CMat,
    pub cokernel: CMat,
    pub gap_ratio: f64,
    pub threshold: f64,
    pub resolved_dim: usize,
    /// Smallest singular values of `D` and `D*` on the resolved subspace, ascending.
    pub kernel_spectrum: Vec<f64>,
    pub cokernel_spectrum: Vec<f64>,
    pub equivariance_defect: f64,
}

impl KernelData {
    pub fn kernel_projection(&self) -> CMat {
        linalg::projector(&self.kernel)
    }

    pub fn cokernel_projection(&self) -> CMat {
        linalg::projector(&self.cokernel)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Tolerances {
    pub zero_rel: f64,
    pub gap_ratio_min: f64,
    pub cutoff_fraction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { zero_rel: ZERO_REL_TOL, gap_ratio_min: GAP_RATIO, cutoff_fraction: CUTOFF_FRACTION }
    }
}

/// Analytic and topological index of one twisted operator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IndexReport {
    pub analytic_index: ZValue,
    pub topological_index: ZValue,
    pub kernel_dim_t: ZValue,
    pub cokernel_dim_t: ZValue,
    /// `None` when the zero cluster is exact or one side is empty.
    pub gap_ratio: Option<f64>,
    pub discrepancy: f64,
    pub integrality_residual: f64,
    pub resolved_dim: usize,
    pub section_dim: usize,
    pub grid_n: usize,
    pub trace: String,
    pub tolerances: Tolerances,
    /// Blockwise `K₀` index and its agreement with the extended trace.
    pub k0_index: Option<Vec<i64>>,
    pub pipeline_gap: Option<f64>,
}

/// `m ∈ M_n(A)` (block-diagonal) acting on the GNS fiber.
fn fiber_rep(owner: &std::sync::Arc<AlgebraSpec>, n: usize, x: &GnsSpace, m: &CMat) -> Result<CMat> {
    extend_map(&ModuleMap::from_block_diag(owner, n, n, m)?, x)
}

fn eig_projectors(h: &CMat) -> Result<Vec<(f64, CMat)>> {
    let (vals, vecs) = linalg::eigh(&linalg::hermitian_part(h))?;
    Ok(vals
        .iter()
        .enumerate()
        .map(|(a, &t)| {
            let w = vecs.column(a);
            (t, &w * w.adjoint())
        })
        .collect())
}

/// Adds `Σ_a K_a[i,j]·P_a` along every line of the given axis.
fn add_line_derivative(out: &mut CMat, grid: &Grid, d: usize, axis: usize, kernels: &[Vec<(CMat, &CMat)>]) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (lines, len) = if axis == 0 { (ny, nx) } else { (nx, ny) };
    let point = |line: usize, s: usize| if axis == 0 { grid.index(s, line) } else { grid.index(line, s) };
    for line in 0..lines {
        let ks = &kernels[if axis == 0 { 0 } else { line }];
        for i in 0..len {
            for j in 0..len {
                let mut blk = CMat::zeros(d, d);
                for (k, p) in ks {
                    blk += *p * k[(i, j)];
                }
                let (r, c) = (point(line, i) * d, point(line, j) * d);
                let mut view = out.view_mut((r, c), (d, d));
                view += &blk;
            }
        }
    }
}

/// Assembles `∂̄_W = (∇_x + i∇_y)/2` for a bundle in the quasi-periodic gauge,
/// with fiber `l²(pA^n)` for the faithful trace `tau`.
pub fn assemble_dolbeault(b: &BundleSpec, tau: &TraceFunctional) -> Result<TwistedOperator> {
    check_owner(b.owner(), tau.owner())?;
    let grid = b.grid().clone();
    if grid.manifold != Manifold::T2 {
        return Err(Error::Domain("the Dolbeault operator is built on T²".into()));
    }
    if !tau.is_faithful() || !tau.is_positive() {
        return Err(Error::GramDegenerate);
    }
    let (fiber, chern, form): (&ProjectiveModule, i64, &MatrixForm) = match b {
        BundleSpec::Trivialized { fiber, omega } => (fiber, 0, omega),
        BundleSpec::Automorphy { fiber, chern, eta, .. } => (fiber, *chern, eta),
        BundleSpec::ProjectionField { .. } => {
            return Err(Error::Unsupported("Dolbeault operators on projection-field presentations".into()))
        }
    };
    let owner = fiber.owner().clone();
    let n = fiber.ambient_rank();
    let x = GnsSpace::l2_of_module(fiber, tau)?;
    let d = x.dim();
    let total = grid.len() * d;
    if total > MAX_SECTION_DIM {
        return Err(Error::Domain(format!("section space of dimension {total} exceeds {MAX_SECTION_DIM}")));
    }
    let (hx, hy) = match form.twist() {
        Some(t) => (fiber_rep(&owner, n, &x, &t.hx)?, fiber_rep(&owner, n, &x, &t.hy)?),
        None => (CMat::zeros(d, d), CMat::zeros(d, d)),
    };
    let (ex, ey) = (eig_projectors(&hx)?, eig_projectors(&hy)?);
    let (lx, c) = (grid.lx as f64, chern as f64);
    let ldx = LineDerivative::new(grid.nx(), lx);
    let ldy = LineDerivative::new(grid.ny(), 1.0);

    let mut nabla_x = CMat::zeros(total, total);
    let kx: Vec<(CMat, &CMat)> = ex.iter().map(|(t, p)| (ldx.matrix(*t), p)).collect();
    add_line_derivative(&mut nabla_x, &grid, d, 0, &[kx]);
    let mut nabla_y = CMat::zeros(total, total);
    let ky: Vec<Vec<(CMat, &CMat)>> = (0..grid.nx())
        .map(|ix| {
            let xf = (ix as f64 * grid.h()).fract();
            ey.iter().map(|(t, p)| (ldy.matrix(t - c * xf), p)).collect()
        })
        .collect();
    add_line_derivative(&mut nabla_y, &grid, d, 1, &ky);

    for pt in 0..grid.len() {
        let (_, y) = grid.coords(pt);
        let ax = fiber_rep(&owner, n, &x, form.at(0, pt))? + CMat::identity(d, d) * (I * 2.0 * PI * c * y);
        let ay = fiber_rep(&owner, n, &x, form.at(1, pt))?;
        let mut vx = nabla_x.view_mut((pt * d, pt * d), (d, d));
        vx += &ax;
        let mut vy = nabla_y.view_mut((pt * d, pt * d), (d, d));
        vy += &ay;
    }
    let dbar = (&nabla_x + &nabla_y * I) * Complex64::new(0.5, 0.0);
    let laplacian = linalg::ad_mul(&nabla_x, &nabla_x) + linalg::ad_mul(&nabla_y, &nabla_y);
    let right = x.right_action_generators();
    Ok(TwistedOperator { bundle: b.clone(), tau: tau.clone(), fiber: x, dbar, laplacian, right })
}

/// `(I ⊗ r)·m` for a fiber operator `r` acting pointwise.
fn apply_pointwise(r: &CMat, m: &CMat) -> CMat {
    let d = r.nrows();
    let mut out = CMat::zeros(m.nrows(), m.ncols());
    for p in 0..m.nrows() / d {
        let blk = r * m.rows(p * d, d);
        out.rows_mut(p * d, d).copy_from(&blk);
    }
    out
}

/// `m·(I ⊗ r)`.
fn apply_pointwise_right(m: &CMat, r: &CMat) -> CMat {
    let d = r.nrows();
    let mut out = CMat::zeros(m.nrows(), m.ncols());
    for p in 0..m.ncols() / d {
        let blk = m.columns(p * d, d) * r;
        out.columns_mut(p * d, d).copy_from(&blk);
    }
    out
}

impl TwistedOperator {
    pub fn bundle(&self) -> &BundleSpec {
        &self.bundle
    }

    pub fn grid(&self) -> &Grid {
        self.bundle.grid()
    }

    /// Trace defining the fiber inner product.
    pub fn trace(&self) -> &TraceFunctional {
        &self.tau
    }

    pub fn fiber(&self) -> &GnsSpace {
        &self.fiber
    }

    /// Dense matrix of `∂̄_W`.
    pub fn matrix(&self) -> &CMat {
        &self.dbar
    }

    /// `∇_x*∇_x + ∇_y*∇_y`.
    pub fn laplacian(&self) -> &CMat {
        &self.laplacian
    }

    pub fn dim(&self) -> usize {
        self.dbar.nrows()
    }

    /// Right action of the matrix-unit generators on one fiber.
    pub fn right_generators(&self) -> &[CMat] {
        &self.right
    }

    /// Right action of generator `j` on the whole section space.
    pub fn right_action_matrix(&self, j: usize) -> CMat {
        linalg::kron(&CMat::identity(self.grid().len(), self.grid().len()), &self.right[j])
    }

    /// Largest commutator `‖[m, I⊗r]‖∞` over the generators.
    pub fn equivariance_defect(&self, m: &CMat) -> f64 {
        self.right
            .iter()
            .map(|r| linalg::max_abs(&(apply_pointwise_right(m, r) - apply_pointwise(r, m))))
            .fold(0.0, f64::max)
    }

    /// `G*·∂̄·G` for a unitary gauge transformation `G` commuting with the
    /// right action.
    pub fn conjugated(&self, g: &CMat) -> Result<Self> {
        if g.shape() != self.dbar.shape() {
            return Err(Error::Shape("gauge transformation has the wrong size".into()));
        }
        let defect = self.equivariance_defect(g);
        if defect > EQUIVARIANCE_TOL {
            return Err(Error::Precondition(format!("gauge transformation is not A-linear ({defect:.3e})")));
        }
        let unit = linalg::max_abs(&(linalg::ad_mul(g, g) - CMat::identity(g.nrows(), g.nrows())));
        if unit > 1e-10 {
            return Err(Error::Precondition(format!("gauge transformation is not unitary ({unit:.3e})")));
        }
        let conj = |m: &CMat| linalg::ad_mul(g, &linalg::matmul(m, g));
        Ok(Self { dbar: conj(&self.dbar), laplacian: conj(&self.laplacian), ..self.clone() })
    }

    fn restricted(&self, coords: &[usize]) -> (CMat, CMat) {
        let pick = |m: &CMat| CMat::from_fn(coords.len(), coords.len(), |i, j| m[(coords[i], coords[j])]);
        (pick(&self.dbar), pick(&self.laplacian))
    }
}

struct Resolved {
    kernel: CMat,
    cokernel: CMat,
    gap: f64,
    threshold: f64,
    dim: usize,
    ker_sv: Vec<f64>,
    coker_sv: Vec<f64>,
}

/// Orthonormal basis of the resolved subspace of `laplacian`, with the
/// cutoff moved up past any eigenvalue cluster it would split.
fn resolved_subspace(laplacian: &CMat, n: usize) -> Result<CMat> {
    let (w, q) = linalg::eigh(laplacian)?;
    let cutoff = (2.0 * PI * CUTOFF_FRACTION * n as f64).powi(2);
    let mut m = w.iter().filter(|&&l| l <= cutoff).count();
    while m > 0 && m < w.len() && w[m] - w[m - 1] <= CLUSTER_REL * w[m].abs().max(1.0) {
        m += 1;
    }
    Ok(q.columns(0, m).into_owned())
}

fn null_directions(a: &CMat, rel: f64) -> Result<(CMat, Vec<f64>, f64, f64)> {
    let f = linalg::svd(a)?;
    let smax = f.s.first().copied().unwrap_or(0.0);
    let thr = rel * smax;
    // the thin SVD has min(rows, cols) values; a square-or-tall input keeps them all
    let zero: Vec<usize> = (0..f.s.len()).filter(|&j| f.s[j] <= thr).collect();
    let mut asc = f.s.clone();
    asc.reverse();
    asc.truncate(8);
    Ok((f.v.select_columns(zero.iter()), asc, gap_ratio(&f.s, thr), thr))
}

fn resolve(dbar: &CMat, laplacian: &CMat, n: usize, rel: f64) -> Result<Resolved> {
    let q = resolved_subspace(laplacian, n)?;
    let dim = q.ncols();
    let (kv, ker_sv, g1, t1) = null_directions(&linalg::matmul(dbar, &q), rel)?;
    let (cv, coker_sv, g2, t2) = null_directions(&linalg::ad_mul(dbar, &q), rel)?;
    let gap = g1.min(g2);
    let threshold = t1.max(t2);
    if gap < GAP_RATIO {
        return Err(Error::DegenerateSpectrum { tol: threshold, gap, required: GAP_RATIO });
    }
    Ok(Resolved {
        kernel: linalg::matmul(&q, &kv),
        cokernel: linalg::matmul(&q, &cv),
        gap,
        threshold,
        dim,
        ker_sv,
        coker_sv,
    })
}

fn invariance_defect(op: &TwistedOperator, basis: &CMat) -> f64 {
    if basis.ncols() == 0 {
        return 0.0;
    }
    op.right
        .iter()
        .map(|r| {
            let rk = apply_pointwise(r, basis);
            let back = linalg::matmul(basis, &linalg::ad_mul(basis, &rk));
            linalg::max_abs(&(rk - back))
        })
        .fold(0.0, f64::max)
}

/// Kernel and cokernel projections of `op` with relative zero threshold
/// `tol` (default [`ZERO_REL_TOL`]).
pub fn kernel_data(op: &TwistedOperator, tol: Option<f64>) -> Result<KernelData> {
    check_resolution(op)?;
    let r = resolve(&op.dbar, &op.laplacian, op.grid().n, tol.unwrap_or(ZERO_REL_TOL))?;
    let defect = invariance_defect(op, &r.kernel).max(invariance_defect(op, &r.cokernel));
    if defect > EQUIVARIANCE_TOL {
        return Err(Error::Precondition(format!("kernel is not invariant under the right action ({defect:.3e})")));
    }
    Ok(KernelData {
        kernel: r.kernel,
        cokernel: r.cokernel,
        gap_ratio: r.gap,
        threshold: r.threshold,
        resolved_dim: r.dim,
        kernel_spectrum: r.ker_sv,
        cokernel_spectrum: r.coker_sv,
        equivariance_defect: defect,
    })
}

fn diag_of_projector(basis: &CMat) -> Vec<Complex64> {
    basis.row_iter().map(|row| Complex64::new(row.norm_squared(), 0.0)).collect()
}

/// `(t(P_ker), t(P_coker))` through the extended trace.
pub fn index_dimensions(op: &TwistedOperator, kd: &KernelData, t: &TraceFunctional) -> Result<(ZValue, ZValue)> {
    check_owner(op.fiber.owner(), t.owner())?;
    let h = op.grid().len();
    let cb = op.fiber.col_block();
    Ok((
        extended_trace_of_diagonal(t, cb, h, &diag_of_projector(&kd.kernel))?,
        extended_trace_of_diagonal(t, cb, h, &diag_of_projector(&kd.cokernel))?,
    ))
}

/// `t(P_ker) − t(P_coker)`.
pub fn analytic_index(op: &TwistedOperator, t: &TraceFunctional, tol: Option<f64>) -> Result<ZValue> {
    let kd = kernel_data(op, tol)?;
    let (k, c) = index_dimensions(op, &kd, t)?;
    Ok(k.sub(&c))
}

/// The index as a `K₀` class, computed block by block: on block `i` the
/// operator is `I_{nᵢ} ⊗ Yᵢ`, and `Yᵢ` is read off the `β = 0` coordinates.
pub fn blockwise_index(op: &TwistedOperator, tol: Option<f64>) -> Result<K0Class> {
    check_resolution(op)?;
    let cb = op.fiber.col_block();
    let owner = op.fiber.owner().clone();
    let d = cb.len();
    let mut ranks = Vec::with_capacity(owner.k());
    for i in 0..owner.k() {
        let cols: Vec<usize> = (0..d).filter(|&c| cb[c] == i).collect();
        let r = cols.len() / owner.blocks()[i];
        if r == 0 {
            ranks.push(0);
            continue;
        }
        let coords: Vec<usize> = (0..op.grid().len()).flat_map(|p| cols[..r].iter().map(move |&c| p * d + c)).collect();
        let (y, l) = op.restricted(&coords);
        let res = resolve(&y, &l, op.grid().n, tol.unwrap_or(ZERO_REL_TOL))?;
        ranks.push(res.kernel.ncols() as i64 - res.cokernel.ncols() as i64);
    }
    Ok(K0Class { ranks })
}

/// `∫ ch_t` in degree 2 for any trace; non-positive traces are evaluated
/// through the center-valued character.
pub fn topological_index_any(b: &BundleSpec, t: &TraceFunctional) -> Result<ZValue> {
    if t.is_positive() {
        return chern::topological_index(b, t, OperatorKind::Dolbeault);
    }
    let owner = b.owner().clone();
    let cv = chern::topological_index(b, &TraceFunctional::center_valued(&owner), OperatorKind::Dolbeault)?;
    let ev: Vec<Complex64> = cv.0.iter().zip(owner.blocks()).map(|(z, &ni)| z * ni as f64).collect();
    t.apply_block_traces(&ev)
}

fn trace_label(t: &TraceFunctional) -> String {
    match t.kind() {
        TraceKind::Scalar { weights } => {
            let w: Vec<String> = weights.iter().map(|w| format!("{w}")).collect();
            format!("scalar[{}]", w.join(","))
        }
        TraceKind::CenterValued => "center_valued".into(),
        TraceKind::Delocalized { g, .. } => format!("delocalized[{g}]"),
    }
}

/// Full index computation for `b` with fiber trace `tau` and evaluation
/// trace `t`.
pub fn index_report(b: &BundleSpec, tau: &TraceFunctional, t: &TraceFunctional, tol: Option<f64>) -> Result<IndexReport> {
    let op = assemble_dolbeault(b, tau)?;
    report_for(&op, t, tol)
}

pub fn report_for(op: &TwistedOperator, t: &TraceFunctional, tol: Option<f64>) -> Result<IndexReport> {
    let kd = kernel_data(op, tol)?;
    let (k, c) = index_dimensions(op, &kd, t)?;
    let analytic = k.sub(&c);
    let topological = topological_index_any(op.bundle(), t)?;
    let (k0, pipeline) = match blockwise_index(op, tol) {
        Ok(class) => {
            let via = t.apply_block_traces(&class.as_block_traces())?;
            (Some(class.ranks), Some(via.dist(&analytic)))
        }
        Err(Error::DegenerateSpectrum { .. }) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(IndexReport {
        discrepancy: analytic.dist(&topological),
        integrality_residual: analytic.integrality_residual(),
        analytic_index: analytic,
        topological_index: topological,
        kernel_dim_t: k,
        cokernel_dim_t: c,
        gap_ratio: kd.gap_ratio.is_finite().then_some(kd.gap_ratio),
        resolved_dim: kd.resolved_dim,
        section_dim: op.dim(),
        grid_n: op.grid().n,
        trace: trace_label(t),
        tolerances: Tolerances { zero_rel: tol.unwrap_or(ZERO_REL_TOL), ..Tolerances::default() },
        k0_index: k0,
        pipeline_gap: pipeline,
    })
}

/// Unitary gauge transformation `s ↦ g(x)·s` for a periodic field of
/// unitaries `g` in `End_A(pA^n)` (block-diagonal), on the section space.
pub fn gauge_matrix(op: &TwistedOperator, g: &MatrixForm) -> Result<CMat> {
    let b = op.bundle();
    let (owner, n) = (b.owner().clone(), b.ambient_rank());
    let d = op.fiber.dim();
    let mut out = CMat::from_element(op.dim(), op.dim(), ZERO);
    for p in 0..op.grid().len() {
        let r = fiber_rep(&owner, n, &op.fiber, g.at(0, p))?;
        out.view_mut((p * d, p * d), (d, d)).copy_from(&r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{AlgebraElement, FiniteGroup};
    use crate::bundle::{flat_bundle, random_perturbation, Monodromy};
    use crate::hilbert_module::{dim_tau, ProjectiveModule};
    use crate::linalg::ONE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_trace() -> TraceFunctional {
        TraceFunctional::normalized(&AlgebraSpec::complex())
    }

    fn re(z: &ZValue) -> f64 {
        z.0[0].re
    }

    #[test]
    fn trivial_bundle_kernel_is_constants() {
        let g = Grid::torus(16).unwrap();
        let op = assemble_dolbeault(&BundleSpec::line(&g, 0).unwrap(), &scalar_trace()).unwrap();
        let kd = kernel_data(&op, None).unwrap();
        assert_eq!((kd.kernel.ncols(), kd.cokernel.ncols()), (1, 1));
        let k = kd.kernel.column(0);
        let mean = k.sum() / k.len() as f64;
        assert!(k.iter().all(|z| (z - mean).norm() < 1e-10));
        assert!(re(&analytic_index(&op, &scalar_trace(), None).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn twisted_flat_line_is_invertible() {
        let g = Grid::torus(12).unwrap();
        let complex = AlgebraSpec::complex();
        let fiber = ProjectiveModule::free(&complex, 1).unwrap();
        let u = ModuleMap::diagonal(&AlgebraElement::scalar(&complex, Complex64::from_polar(1.0, 0.6 * PI)), 1).unwrap();
        let m = Monodromy::new(&fiber, u, ModuleMap::identity(&complex, 1).unwrap()).unwrap();
        let op = assemble_dolbeault(&flat_bundle(&g, &m).unwrap(), &scalar_trace()).unwrap();
        let kd = kernel_data(&op, None).unwrap();
        assert_eq!((kd.kernel.ncols(), kd.cokernel.ncols()), (0, 0));
        assert!(linalg::max_abs(&kd.kernel_projection()) == 0.0);
    }

    #[test]
    fn chern_one_kernel_and_gap() {
        let g = Grid::torus(16).unwrap();
        let op = assemble_dolbeault(&BundleSpec::line(&g, 1).unwrap(), &scalar_trace()).unwrap();
        let kd = kernel_data(&op, None).unwrap();
        assert_eq!((kd.kernel.ncols(), kd.cokernel.ncols()), (1, 0));
        assert!(kd.gap_ratio > 1e3, "gap {}", kd.gap_ratio);
        let p = kd.kernel_projection();
        assert!(linalg::max_abs(&(&p * &p - &p)) < 1e-10);
        assert!(linalg::max_abs(&(&p - p.adjoint())) < 1e-10);
    }

    #[test]
    fn line_bundle_indices() {
        let g = Grid::torus(16).unwrap();
        for c in -3..=3 {
            let b = BundleSpec::line(&g, c).unwrap();
            let r = index_report(&b, &scalar_trace(), &scalar_trace(), None).unwrap();
            assert!((re(&r.analytic_index) - c as f64).abs() < 1e-6, "c = {c}: {:?}", r.analytic_index);
            assert!(r.discrepancy < 1e-6);
            assert_eq!(r.k0_index, Some(vec![c]));
        }
    }

    #[test]
    fn flat_cyclic_bundle_splits_over_characters() {
        let g = Grid::torus(8).unwrap();
        let a = AlgebraSpec::group_algebra(FiniteGroup::cyclic(3).unwrap());
        let fiber = ProjectiveModule::free(&a, 1).unwrap();
        let u = ModuleMap::diagonal(&AlgebraElement::delta(&a, 1).unwrap(), 1).unwrap();
        let m = Monodromy::new(&fiber, u, ModuleMap::identity(&a, 1).unwrap()).unwrap();
        let op = assemble_dolbeault(&flat_bundle(&g, &m).unwrap(), &TraceFunctional::normalized(&a)).unwrap();
        let d = 3;
        let mx = op.matrix();
        for p in 0..g.len() {
            for q in 0..g.len() {
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            assert!(mx[(p * d + i, q * d + j)].norm() < 1e-12);
                        }
                    }
                }
            }
        }
        // each character block is the line operator with the matching x-holonomy
        let hx = crate::bundle::unitary_log(&m.u().to_block_diag());
        let complex = AlgebraSpec::complex();
        let line_fiber = ProjectiveModule::free(&complex, 1).unwrap();
        for j in 0..d {
            let phase = Complex64::from_polar(1.0, 2.0 * PI * hx[(j, j)].re);
            let uj = ModuleMap::diagonal(&AlgebraElement::scalar(&complex, phase), 1).unwrap();
            let mj = Monodromy::new(&line_fiber, uj, ModuleMap::identity(&complex, 1).unwrap()).unwrap();
            let oj = assemble_dolbeault(&flat_bundle(&g, &mj).unwrap(), &scalar_trace()).unwrap();
            let diff = (0..g.len())
                .flat_map(|p| (0..g.len()).map(move |q| (p, q)))
                .map(|(p, q)| (mx[(p * d + j, q * d + j)] - oj.matrix()[(p, q)]).norm())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "character {j}: {diff:.3e}");
        }
    }

    fn m2_flat(g: &Grid, chern: i64) -> (BundleSpec, TraceFunctional) {
        let a = AlgebraSpec::matrix_blocks(&[2]).unwrap();
        let fiber = ProjectiveModule::free(&a, 1).unwrap();
        let u = AlgebraElement::from_blocks(&a, vec![CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![ONE, -ONE]))]).unwrap();
        let m = Monodromy::new(&fiber, ModuleMap::diagonal(&u, 1).unwrap(), ModuleMap::identity(&a, 1).unwrap()).unwrap();
        (BundleSpec::automorphy(g, chern, &m, None).unwrap(), TraceFunctional::normalized(&a))
    }

    #[test]
    fn matrix_fiber_index_and_equivariance() {
        let g = Grid::torus(16).unwrap();
        let (b, tau) = m2_flat(&g, 1);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let b = b.perturbed(&random_perturbation(&b, 2, 0.05, &mut r).unwrap()).unwrap();
        let op = assemble_dolbeault(&b, &tau).unwrap();
        assert!(op.equivariance_defect(op.matrix()) < 1e-10);
        let rep = report_for(&op, &tau, None).unwrap();
        let expected = dim_tau(b.fiber().unwrap(), &tau).unwrap();
        assert!(rep.analytic_index.dist(&expected) < 1e-6, "{:?}", rep.analytic_index);
        assert!(rep.pipeline_gap.unwrap() < 1e-8);
    }

    #[test]
    fn gauge_conjugation_preserves_index() {
        let g = Grid::torus(12).unwrap();
        let b = BundleSpec::line(&g, 2).unwrap();
        let op = assemble_dolbeault(&b, &scalar_trace()).unwrap();
        let field = MatrixForm::from_fn(&g, 0, 1, 1, |_, x, y| {
            CMat::from_element(1, 1, Complex64::from_polar(1.0, 0.7 * (2.0 * PI * x).sin() + 0.3 * (2.0 * PI * y).cos()))
        })
        .unwrap();
        let gm = gauge_matrix(&op, &field).unwrap();
        let conj = op.conjugated(&gm).unwrap();
        let i0 = re(&analytic_index(&op, &scalar_trace(), None).unwrap());
        let i1 = re(&analytic_index(&conj, &scalar_trace(), None).unwrap());
        assert!((i0 - 2.0).abs() < 1e-6 && (i1 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn refinement_keeps_index() {
        let tau = scalar_trace();
        for c in [-2, 1] {
            let a = index_report(&BundleSpec::line(&Grid::torus(12).unwrap(), c).unwrap(), &tau, &tau, None).unwrap();
            let b = index_report(&BundleSpec::line(&Grid::torus(24).unwrap(), c).unwrap(), &tau, &tau, None).unwrap();
            assert_eq!(a.analytic_index.rounded(), b.analytic_index.rounded());
            assert!(a.analytic_index.dist(&b.analytic_index) < 1e-8);
        }
    }

    #[test]
    fn rejections() {
        let g = Grid::torus(8).unwrap();
        let b = BundleSpec::line(&g, 1).unwrap();
        let zero = TraceFunctional::scalar(&AlgebraSpec::complex(), vec![0.0]).unwrap();
        assert!(matches!(assemble_dolbeault(&b, &zero), Err(Error::GramDegenerate)));
        let coarse = assemble_dolbeault(&BundleSpec::line(&g, 2).unwrap(), &scalar_trace()).unwrap();
        assert!(matches!(kernel_data(&coarse, None), Err(Error::Domain(_))));
        let s1 = BundleSpec::line(&Grid::circle(8).unwrap(), 0).unwrap();
        assert!(matches!(assemble_dolbeault(&s1, &scalar_trace()), Err(Error::Domain(_))));
    }
}
