//! Finitely generated projective Hilbert `A`-module bundles over the grids of
//! [`crate::forms`].
//!
//! Fields with values in `M_n(A)` are stored in the faithful block-diagonal
//! realization `⊕ᵢ M_{n·nᵢ}(ℂ)` of [`ModuleMap::to_block_diag`]; sections of
//! `pA^n` are `n·Σnᵢ × Σnᵢ` matrices in the same realization.
//!
//! Nontrivial topology on `T²` comes from factors of automorphy. In the gauge
//! used here a section satisfies
//!
//! ```text
//! s(x + 1, y) = U·s(x, y),    s(x, y + 1) = e^{−2πicx}·V·s(x, y),
//! ```
//!
//! and the connection is `ω = 2πic·y·dx + η` with `η` a reduced skew-adjoint
//! `End`-valued 1-form, so that `Ω = −2πic·dx∧dy + dη + η∧η`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::algebra::{check_owner, AlgebraElement, AlgebraSpec};
use crate::error::{Error, Result};
use crate::forms::{self, exterior_d, wedge, Grid, Manifold, MatrixForm, TrigPoly, Twist, TwistKind};
use crate::gns;
use crate::hilbert_module::{ModuleMap, ProjectiveModule};
use crate::linalg::{self, CMat};

/// Eigenvalues of `(F + F*)/2` inside this band make the retraction undefined.
pub const FORBIDDEN_BAND: (f64, f64) = (0.4, 0.6);
/// Default bound on the distance between a near-projection field and its reference.
pub const DEFAULT_DELTA: f64 = 0.1;

const PROJ_TOL: f64 = 1e-10;

/// Width `n·Σnᵢ` of the block-diagonal realization of `M_n(A)`.
pub fn fiber_width(owner: &AlgebraSpec, n: usize) -> usize {
    n * owner.blocks().iter().sum::<usize>()
}

/// Hermitian `H` with `e^{2πiH} = u` and spectrum in `[0, 1)`; `u` unitary.
pub fn unitary_log(u: &CMat) -> CMat {
    let h = crate::algebra::normal_calculus(u, &|z: Complex64| {
        let mut t = z.arg() / (2.0 * PI);
        if t < 0.0 {
            t += 1.0;
        }
        if t > 1.0 - 1e-12 {
            t = 0.0;
        }
        Complex64::new(t, 0.0)
    });
    linalg::hermitian_part(&h)
}

fn unitary_power(u: &CMat, k: usize) -> CMat {
    (0..k).fold(CMat::identity(u.nrows(), u.nrows()), |acc, _| linalg::matmul(&acc, u))
}

/// Commuting unitaries of `End_A(pA^n)`: the transitions along the two
/// torus generators (the second is ignored on `S¹`).
#[derive(Clone, Debug)]
pub struct Monodromy {
    fiber: ProjectiveModule,
    u: ModuleMap,
    v: ModuleMap,
}

impl Monodromy {
    pub fn new(fiber: &ProjectiveModule, u: ModuleMap, v: ModuleMap) -> Result<Self> {
        let p = fiber.projection();
        for (name, w) in [("U", &u), ("V", &v)] {
            check_owner(fiber.owner(), w.owner())?;
            if w.shape() != p.shape() {
                return Err(Error::Shape(format!("{name} has the wrong shape")));
            }
            let red = p.compose(w)?.compose(p)?.sub(w)?.max_abs();
            let iso = w.adjoint().compose(w)?.sub(p)?.max_abs().max(w.compose(&w.adjoint())?.sub(p)?.max_abs());
            if red > 1e-12 || iso > 1e-12 {
                return Err(Error::Precondition(format!("{name} is not a unitary of End_A(pA^n)")));
            }
        }
        let comm = u.compose(&v)?.sub(&v.compose(&u)?)?.max_abs();
        if comm > 1e-12 {
            return Err(Error::Precondition(format!("monodromies do not commute ([U,V] = {comm:.3e})")));
        }
        Ok(Self { fiber: fiber.clone(), u, v })
    }

    pub fn trivial(fiber: &ProjectiveModule) -> Self {
        let p = fiber.projection().clone();
        Self { fiber: fiber.clone(), u: p.clone(), v: p }
    }

    pub fn fiber(&self) -> &ProjectiveModule {
        &self.fiber
    }

    pub fn u(&self) -> &ModuleMap {
        &self.u
    }

    pub fn v(&self) -> &ModuleMap {
        &self.v
    }

    fn extended(&self, w: &ModuleMap) -> CMat {
        let q = self.fiber.complement();
        w.add(q.projection()).unwrap().to_block_diag()
    }

    /// Generators `(H_U, H_V)` of `U ⊕ 1`, `V ⊕ 1` on `A^n`, block-diagonal.
    pub fn generators(&self) -> (CMat, CMat) {
        (unitary_log(&self.extended(&self.u)), unitary_log(&self.extended(&self.v)))
    }
}

#[derive(Clone, Debug)]
pub enum BundleSpec {
    /// Globally trivial `X × pA^n` with connection `d + ω`.
    Trivialized { fiber: ProjectiveModule, omega: MatrixForm },
    /// Quasi-periodic gauge: transitions `U`, `e^{−2πicx}V`; connection
    /// `d + 2πic·y·dx + η`.
    Automorphy { fiber: ProjectiveModule, chern: i64, monodromy: Monodromy, eta: MatrixForm },
    /// Image bundle of a projection field `ε` in `M_n(A)` with connection
    /// `ε∘d + η`, `η = εηε`.
    ProjectionField { owner: Arc<AlgebraSpec>, n: usize, eps: MatrixForm, eta: MatrixForm },
}

fn check_reduced(p: &CMat, form: &MatrixForm, what: &str) -> Result<()> {
    let defect = form.sub(&form.sandwich(p, p))?.max_abs();
    if defect > PROJ_TOL * form.max_abs().max(1.0) {
        return Err(Error::Precondition(format!("{what} is not reduced by the fiber projection ({defect:.3e})")));
    }
    Ok(())
}

fn check_algebra_valued(owner: &Arc<AlgebraSpec>, n: usize, form: &MatrixForm) -> Result<()> {
    for comp in form.components() {
        for m in comp {
            let back = ModuleMap::from_block_diag(owner, n, n, m)?.to_block_diag();
            if linalg::max_abs(&(&back - m)) > 1e-12 * linalg::max_abs(m).max(1.0) {
                return Err(Error::Shape("field leaves the block-diagonal realization of M_n(A)".into()));
            }
        }
    }
    Ok(())
}

impl BundleSpec {
    pub fn trivialized(fiber: &ProjectiveModule, omega: MatrixForm) -> Result<Self> {
        let d = fiber_width(fiber.owner(), fiber.ambient_rank());
        if omega.degree() != 1 || omega.shape() != (d, d) || omega.twist().is_some() {
            return Err(Error::Shape(format!("ω must be an untwisted {d}×{d} 1-form")));
        }
        check_algebra_valued(fiber.owner(), fiber.ambient_rank(), &omega)?;
        check_reduced(&fiber.projection().to_block_diag(), &omega, "ω")?;
        Ok(Self::Trivialized { fiber: fiber.clone(), omega })
    }

    /// Automorphy bundle; `eta = None` is the zero form.
    pub fn automorphy(grid: &Grid, chern: i64, monodromy: &Monodromy, eta: Option<MatrixForm>) -> Result<Self> {
        if grid.manifold == Manifold::S1 && chern != 0 {
            return Err(Error::Domain("line bundles over S¹ are trivial; use chern = 0".into()));
        }
        let fiber = monodromy.fiber().clone();
        let (owner, n) = (fiber.owner().clone(), fiber.ambient_rank());
        let d = fiber_width(&owner, n);
        let eta = match eta {
            Some(e) => {
                if e.grid() != grid || e.degree() != 1 || e.shape() != (d, d) {
                    return Err(Error::Shape(format!("η must be a {d}×{d} 1-form on the bundle grid")));
                }
                check_algebra_valued(&owner, n, &e)?;
                check_reduced(&fiber.projection().to_block_diag(), &e, "η")?;
                e
            }
            None => MatrixForm::zero(grid, 1, d, d)?,
        };
        let (mut hx, hy) = monodromy.generators();
        if grid.lx > 1 {
            // on a cover grid the x-transition over the full length is U^lx
            hx = unitary_log(&unitary_power(&monodromy.extended(&monodromy.u), grid.lx));
        }
        let twist = Twist { kind: TwistKind::Conjugation, chern, hx, hy };
        let eta = eta.with_twist(Some(twist))?;
        Ok(Self::Automorphy { fiber, chern, monodromy: monodromy.clone(), eta })
    }

    /// The degree-`c` line bundle over `T²` with `A = ℂ`.
    pub fn line(grid: &Grid, chern: i64) -> Result<Self> {
        let fiber = ProjectiveModule::free(&AlgebraSpec::complex(), 1)?;
        Self::automorphy(grid, chern, &Monodromy::trivial(&fiber), None)
    }

    pub fn projection_field(owner: &Arc<AlgebraSpec>, eps: MatrixForm, eta: Option<MatrixForm>) -> Result<Self> {
        let width: usize = owner.blocks().iter().sum();
        let (rows, cols) = eps.shape();
        if eps.degree() != 0 || rows != cols || rows % width != 0 || eps.twist().is_some() {
            return Err(Error::Shape("ε must be an untwisted square 0-form over M_n(A)".into()));
        }
        let n = rows / width;
        check_algebra_valued(owner, n, &eps)?;
        let worst = eps.component(0).par_iter().map(|e| linalg::max_abs(&(e * e - e)).max(linalg::max_abs(&(e - e.adjoint())))).reduce(|| 0.0, f64::max);
        if worst > PROJ_TOL {
            return Err(Error::NotProjection(format!("ε is not a projection field (residual {worst:.3e})")));
        }
        let eta = match eta {
            Some(e) => {
                check_algebra_valued(owner, n, &e)?;
                let red = e.sub(&reduce_pointwise(&eps, &e)?)?.max_abs();
                if red > PROJ_TOL * e.max_abs().max(1.0) {
                    return Err(Error::Precondition("η is not reduced by ε".into()));
                }
                e
            }
            None => MatrixForm::zero(eps.grid(), 1, rows, rows)?,
        };
        Ok(Self::ProjectionField { owner: owner.clone(), n, eps, eta })
    }

    pub fn grid(&self) -> &Grid {
        match self {
            Self::Trivialized { omega, .. } => omega.grid(),
            Self::Automorphy { eta, .. } => eta.grid(),
            Self::ProjectionField { eps, .. } => eps.grid(),
        }
    }

    pub fn owner(&self) -> &Arc<AlgebraSpec> {
        match self {
            Self::Trivialized { fiber, .. } | Self::Automorphy { fiber, .. } => fiber.owner(),
            Self::ProjectionField { owner, .. } => owner,
        }
    }

    /// Ambient rank `n` of the fibers `⊂ A^n`.
    pub fn ambient_rank(&self) -> usize {
        match self {
            Self::Trivialized { fiber, .. } | Self::Automorphy { fiber, .. } => fiber.ambient_rank(),
            Self::ProjectionField { n, .. } => *n,
        }
    }

    pub fn width(&self) -> usize {
        fiber_width(self.owner(), self.ambient_rank())
    }

    pub fn chern(&self) -> i64 {
        match self {
            Self::Automorphy { chern, .. } => *chern,
            _ => 0,
        }
    }

    /// Fiber module (constant presentations only).
    pub fn fiber(&self) -> Option<&ProjectiveModule> {
        match self {
            Self::Trivialized { fiber, .. } | Self::Automorphy { fiber, .. } => Some(fiber),
            Self::ProjectionField { .. } => None,
        }
    }

    /// Fiber projection at grid point `p`, block-diagonal.
    pub fn projection_at(&self, p: usize) -> CMat {
        match self {
            Self::Trivialized { fiber, .. } | Self::Automorphy { fiber, .. } => fiber.projection().to_block_diag(),
            Self::ProjectionField { eps, .. } => eps.at(0, p).clone(),
        }
    }

    /// Automorphy of sections, if the presentation has one.
    pub fn section_twist(&self) -> Option<Twist> {
        match self {
            Self::Automorphy { eta, .. } => eta.twist().map(|t| t.with_kind(TwistKind::Left)),
            _ => None,
        }
    }

    /// Automorphy of endomorphism-valued fields.
    pub fn endomorphism_twist(&self) -> Option<Twist> {
        match self {
            Self::Automorphy { eta, .. } => eta.twist().cloned(),
            _ => None,
        }
    }

    /// The part of the connection form that is a genuine (quasi-periodic)
    /// `End`-valued field: `ω`, `η` or `η` respectively.
    pub fn tensorial_part(&self) -> &MatrixForm {
        match self {
            Self::Trivialized { omega, .. } => omega,
            Self::Automorphy { eta, .. } | Self::ProjectionField { eta, .. } => eta,
        }
    }

    /// The connection form sampled on the grid. For automorphy bundles this
    /// includes the central term `2πic·y·dx` with `y ∈ [0, 1)`.
    pub fn connection_form(&self) -> MatrixForm {
        match self {
            Self::Automorphy { fiber, chern, eta, .. } if *chern != 0 => {
                let p = fiber.projection().to_block_diag();
                let c = *chern as f64;
                let grid = eta.grid().clone();
                let central = MatrixForm::from_fn(&grid, 1, p.nrows(), p.ncols(), |comp, _, y| {
                    if comp == 0 {
                        &p * Complex64::new(0.0, 2.0 * PI * c * y)
                    } else {
                        CMat::zeros(p.nrows(), p.ncols())
                    }
                })
                .unwrap();
                central.add(eta).unwrap()
            }
            _ => self.tensorial_part().clone(),
        }
    }

    /// Replaces the tensorial part by `tensorial_part() + delta`, checking
    /// that `delta` is reduced.
    pub fn perturbed(&self, delta: &MatrixForm) -> Result<Self> {
        match self {
            Self::Trivialized { fiber, omega } => Self::trivialized(fiber, omega.add(&strip(delta))?),
            Self::Automorphy { chern, monodromy, eta, .. } => {
                Self::automorphy(eta.grid(), *chern, monodromy, Some(strip(eta).add(&strip(delta))?))
            }
            Self::ProjectionField { owner, eps, eta, .. } => Self::projection_field(owner, eps.clone(), Some(eta.add(&strip(delta))?)),
        }
    }

    /// Curvature `Ω`, an `End`-valued 2-form.
    pub fn curvature(&self) -> Result<MatrixForm> {
        if self.grid().manifold != Manifold::T2 {
            return Err(Error::Domain("curvature 2-forms need a 2-dimensional base".into()));
        }
        match self {
            Self::Trivialized { omega, .. } => exterior_d(omega)?.add(&wedge(omega, omega)?),
            Self::Automorphy { fiber, chern, eta, .. } => {
                let p = fiber.projection().to_block_diag();
                let central = p * Complex64::new(0.0, -2.0 * PI * *chern as f64);
                let base = exterior_d(eta)?.add(&wedge(eta, eta)?)?;
                Ok(base.map(|m| m + &central))
            }
            Self::ProjectionField { eps, eta, .. } => {
                let de = exterior_d(eps)?;
                let grass = wedge(eps, &wedge(&wedge(&de, &de)?, eps)?)?;
                let deta = wedge(eps, &wedge(&exterior_d(eta)?, eps)?)?;
                grass.add(&deta)?.add(&wedge(eta, eta)?)
            }
        }
    }

    /// `∇s` for a section field (`Left`-twisted for automorphy bundles).
    pub fn covariant_derivative(&self, s: &MatrixForm) -> Result<MatrixForm> {
        if s.degree() != 0 || s.shape().0 != self.width() {
            return Err(Error::Shape("sections are 0-forms with one row per fiber coordinate".into()));
        }
        let ds = exterior_d(s)?;
        match self {
            Self::ProjectionField { eps, eta, .. } => wedge(eps, &ds)?.add(&wedge(&strip(eta), &strip(s))?),
            _ => {
                let omega = strip(&self.connection_form());
                Ok(strip(&ds).add(&wedge(&omega, &strip(s))?)?.with_twist(s.twist().cloned())?)
            }
        }
    }

    /// Pullback along the `k`-fold cover of the base along x.
    pub fn pullback(&self, k: usize) -> Result<Self> {
        let cover = self.grid().cover(k)?;
        match self {
            Self::Trivialized { fiber, omega } => Self::trivialized(fiber, forms::pullback_form(omega, &cover)?),
            Self::Automorphy { chern, monodromy, eta, .. } => {
                let pulled = strip(&forms::pullback_form(eta, &cover)?);
                Self::automorphy(&cover, *chern, monodromy, Some(pulled))
            }
            Self::ProjectionField { owner, eps, eta, .. } => Self::projection_field(
                owner,
                forms::pullback_form(eps, &cover)?,
                Some(forms::pullback_form(eta, &cover)?),
            ),
        }
    }

    /// Direct sum with the diagonal connection. Automorphy bundles must share
    /// the Chern parameter (the central term is a scalar).
    pub fn direct_sum(&self, o: &Self) -> Result<Self> {
        check_owner(self.owner(), o.owner())?;
        if self.grid() != o.grid() {
            return Err(Error::Shape("bundles live on different grids".into()));
        }
        let owner = self.owner().clone();
        let (n1, n2) = (self.ambient_rank(), o.ambient_rank());
        let sum_form = |a: &MatrixForm, b: &MatrixForm| -> Result<MatrixForm> {
            let comps = a
                .components()
                .iter()
                .zip(b.components())
                .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| block_direct_sum(&owner, n1, n2, x, y)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            MatrixForm::from_components(a.grid(), a.degree(), comps)
        };
        match (self, o) {
            (Self::Trivialized { fiber: f1, omega: w1 }, Self::Trivialized { fiber: f2, omega: w2 }) => {
                Self::trivialized(&f1.direct_sum(f2)?, sum_form(w1, w2)?)
            }
            (
                Self::Automorphy { chern: c1, monodromy: m1, eta: e1, .. },
                Self::Automorphy { chern: c2, monodromy: m2, eta: e2, .. },
            ) if c1 == c2 => {
                let fiber = m1.fiber().direct_sum(m2.fiber())?;
                let m = Monodromy::new(&fiber, m1.u().direct_sum(m2.u())?, m1.v().direct_sum(m2.v())?)?;
                Self::automorphy(self.grid(), *c1, &m, Some(sum_form(&strip(e1), &strip(e2))?))
            }
            (Self::ProjectionField { eps: a, eta: ea, .. }, Self::ProjectionField { eps: b, eta: eb, .. }) => {
                Self::projection_field(&owner, sum_form(a, b)?, Some(sum_form(ea, eb)?))
            }
            _ => Err(Error::Unsupported("direct sum of these presentations".into())),
        }
    }
}

/// Drops the automorphy annotation (for pointwise algebra with central terms).
fn strip(f: &MatrixForm) -> MatrixForm {
    f.clone().with_twist(None).unwrap()
}

fn reduce_pointwise(eps: &MatrixForm, f: &MatrixForm) -> Result<MatrixForm> {
    wedge(eps, &wedge(f, eps)?)
}

/// `x ⊕ y` in the block-diagonal realization of `M_{n1+n2}(A)`.
pub fn block_direct_sum(owner: &Arc<AlgebraSpec>, n1: usize, n2: usize, x: &CMat, y: &CMat) -> Result<CMat> {
    let a = ModuleMap::from_block_diag(owner, n1, n1, x)?;
    let b = ModuleMap::from_block_diag(owner, n2, n2, y)?;
    Ok(a.direct_sum(&b)?.to_block_diag())
}

/// `e ⊗ x` for a scalar `r×r` matrix `e` and `x ∈ M_n(A)`, realized in `M_{rn}(A)`.
pub fn block_kron(owner: &Arc<AlgebraSpec>, e: &CMat, n: usize, x: &CMat) -> Result<CMat> {
    let a = ModuleMap::from_block_diag(owner, n, n, x)?;
    let r = e.nrows();
    let blocks = a.blocks().iter().map(|b| linalg::kron(e, b)).collect();
    Ok(ModuleMap::from_blocks(owner, r * n, r * n, blocks)?.to_block_diag())
}

/// The flat bundle with monodromies `U`, `V` and zero connection form.
pub fn flat_bundle(grid: &Grid, m: &Monodromy) -> Result<BundleSpec> {
    BundleSpec::automorphy(grid, 0, m, None)
}

/// The complementary projection field `1 − ε` with the Grassmann connection.
pub fn complement(b: &BundleSpec) -> Result<BundleSpec> {
    match b {
        BundleSpec::ProjectionField { owner, eps, .. } => {
            let one = CMat::identity(eps.shape().0, eps.shape().0);
            BundleSpec::projection_field(owner, eps.map(|e| &one - e), None)
        }
        _ => Err(Error::Unsupported("complements are taken of projection fields".into())),
    }
}

/// `χ_{>1/2}` of the Hermitian part of a near-projection field, pointwise.
///
/// With a `reference` field the input must lie within `delta` of it; without
/// one the only requirement is that no eigenvalue enters [`FORBIDDEN_BAND`].
pub fn retract_projection(f: &MatrixForm, delta: f64, reference: Option<&MatrixForm>) -> Result<MatrixForm> {
    if f.degree() != 0 || f.shape().0 != f.shape().1 {
        return Err(Error::Shape("retraction needs a square 0-form".into()));
    }
    if let Some(r) = reference {
        let dist = f.sub(r)?.component(0).iter().map(linalg::op_norm).fold(0.0, f64::max);
        if dist >= delta {
            return Err(Error::Precondition(format!("field is {dist:.3e} from the reference, not within δ = {delta}")));
        }
    }
    let out: Vec<Result<CMat>> = f
        .component(0)
        .par_iter()
        .enumerate()
        .map(|(p, m)| {
            let (vals, vecs) = linalg::eigh(&linalg::hermitian_part(m))?;
            if let Some(&l) = vals.iter().find(|&&l| l > FORBIDDEN_BAND.0 && l < FORBIDDEN_BAND.1) {
                return Err(Error::RetractionUndefined { point: p, eigenvalue: l });
            }
            let cols: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] >= 0.5).collect();
            Ok(linalg::projector(&vecs.select_columns(cols.iter())))
        })
        .collect();
    let field = out.into_iter().collect::<Result<Vec<_>>>()?;
    MatrixForm::from_components(f.grid(), 0, vec![field])
}

/// `min_x σ_min(Q₁(x)* Q₂(x))` over orthonormal bases of the two images: the
/// map `ε₁ε₂` restricted to images is invertible iff this is positive.
/// Returns 0 when the pointwise ranks differ.
pub fn image_overlap(e1: &MatrixForm, e2: &MatrixForm) -> Result<f64> {
    if e1.grid() != e2.grid() || e1.shape() != e2.shape() {
        return Err(Error::Shape("projection fields are not comparable".into()));
    }
    let vals: Vec<Result<f64>> = e1
        .component(0)
        .par_iter()
        .zip(e2.component(0).par_iter())
        .map(|(a, b)| {
            let qa = linalg::spectral_subspace(&linalg::hermitian_part(a), |l| l > 0.5)?;
            let qb = linalg::spectral_subspace(&linalg::hermitian_part(b), |l| l > 0.5)?;
            if qa.ncols() != qb.ncols() {
                return Ok(0.0);
            }
            if qa.ncols() == 0 {
                return Ok(1.0);
            }
            Ok(linalg::singular_values(&qa.ad_mul(&qb))?.last().copied().unwrap_or(0.0))
        })
        .collect();
    Ok(vals.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold(1.0, f64::min))
}

/// `E ⊗ b` for an automorphy bundle `E` over `ℂ` and a constant-fiber bundle `b`.
pub fn tensor_with_vector_bundle(e: &BundleSpec, b: &BundleSpec) -> Result<BundleSpec> {
    if e.owner().blocks() != [1] || e.owner().group().is_some() {
        return Err(Error::Domain("the first factor must be a bundle over ℂ".into()));
    }
    if e.grid() != b.grid() {
        return Err(Error::Shape("tensor factors live on different grids".into()));
    }
    let (em, ec, eeta) = as_automorphy(e)?;
    let (bm, bc, beta) = as_automorphy(b)?;
    let owner = b.owner().clone();
    let n = b.ambient_rank();
    let r = e.ambient_rank();
    let pe = em.fiber().projection().to_block_diag();
    let pb = bm.fiber().projection().to_block_diag();
    let kron_map = |x: &ModuleMap, y: &ModuleMap| -> Result<ModuleMap> {
        let xe = x.to_block_diag();
        ModuleMap::from_block_diag(&owner, r * n, r * n, &block_kron(&owner, &xe, n, &y.to_block_diag())?)
    };
    let fiber = ProjectiveModule::new(kron_map(em.fiber().projection(), bm.fiber().projection())?)?;
    let m = Monodromy::new(&fiber, kron_map(em.u(), bm.u())?, kron_map(em.v(), bm.v())?)?;
    let comps = eeta
        .components()
        .iter()
        .zip(beta.components())
        .map(|(ce, cb)| {
            ce.iter()
                .zip(cb)
                .map(|(x, y)| Ok(block_kron(&owner, x, n, &pb)? + block_kron(&owner, &pe, n, y)?))
                .collect::<Result<Vec<CMat>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let eta = MatrixForm::from_components(b.grid(), 1, comps)?;
    BundleSpec::automorphy(b.grid(), ec + bc, &m, Some(eta))
}

fn as_automorphy(b: &BundleSpec) -> Result<(Monodromy, i64, MatrixForm)> {
    match b {
        BundleSpec::Trivialized { fiber, omega } => Ok((Monodromy::trivial(fiber), 0, omega.clone())),
        BundleSpec::Automorphy { chern, monodromy, eta, .. } => Ok((monodromy.clone(), *chern, strip(eta))),
        BundleSpec::ProjectionField { .. } => Err(Error::Unsupported("tensor products of projection-field bundles".into())),
    }
}

/// Basis of `M_m×n(A)` in the block-diagonal realization.
pub fn module_basis(owner: &Arc<AlgebraSpec>, m: usize, n: usize) -> Result<Vec<CMat>> {
    let elems: Vec<AlgebraElement> = if owner.is_block_model() {
        gns::generators(owner)
    } else {
        (0..owner.dim()).map(|g| AlgebraElement::delta(owner, g)).collect::<Result<_>>()?
    };
    let zero = AlgebraElement::zero(owner);
    let mut out = Vec::new();
    for r in 0..m {
        for s in 0..n {
            for a in &elems {
                let entries: Vec<Vec<AlgebraElement>> =
                    (0..m).map(|i| (0..n).map(|j| if (i, j) == (r, s) { a.clone() } else { zero.clone() }).collect()).collect();
                out.push(ModuleMap::from_entries(owner, &entries)?.to_block_diag());
            }
        }
    }
    Ok(out)
}

/// Random smooth `M_{m×n}(A)`-valued field with Fourier modes `|k| < kmax`.
pub fn random_field<R: Rng>(grid: &Grid, owner: &Arc<AlgebraSpec>, m: usize, n: usize, degree: usize, kmax: i64, rng: &mut R) -> Result<MatrixForm> {
    let basis = module_basis(owner, m, n)?;
    let polys: Vec<Vec<TrigPoly>> =
        (0..grid.components(degree)).map(|_| basis.iter().map(|_| TrigPoly::random(rng, grid.manifold, kmax)).collect()).collect();
    let (rows, cols) = basis[0].shape();
    let lx = grid.lx as f64;
    MatrixForm::from_fn(grid, degree, rows, cols, |c, x, y| {
        let mut acc = CMat::zeros(rows, cols);
        for (b, poly) in basis.iter().zip(&polys[c]) {
            acc += b * poly.eval(x / lx, y);
        }
        acc
    })
}

/// Random reduced skew-adjoint 1-form `amp·p(X − X*)p/2` with values in
/// `End_A(pA^n)`, for a constant fiber projection `p`.
pub fn random_skew_form<R: Rng>(grid: &Grid, fiber: &ProjectiveModule, kmax: i64, amp: f64, rng: &mut R) -> Result<MatrixForm> {
    let p = fiber.projection().to_block_diag();
    let x = random_field(grid, fiber.owner(), fiber.ambient_rank(), fiber.ambient_rank(), 1, kmax, rng)?;
    Ok(x.map(|m| &p * (m - m.adjoint()) * &p * Complex64::new(0.5 * amp, 0.0)))
}

/// Random reduced skew-adjoint perturbation of the connection of `b`,
/// quasi-periodic in the bundle's automorphy (`E·X·E*` with
/// `E = e^{2πi(x·H_U + y·H_V)}` and `X` periodic), or `εXε` for projection fields.
pub fn random_perturbation<R: Rng>(b: &BundleSpec, kmax: i64, amp: f64, rng: &mut R) -> Result<MatrixForm> {
    let grid = b.grid().clone();
    let n = b.ambient_rank();
    match b {
        BundleSpec::Trivialized { fiber, .. } => random_skew_form(&grid, fiber, kmax, amp, rng),
        BundleSpec::Automorphy { fiber, eta, .. } => {
            let x = random_skew_form(&grid, fiber, kmax, amp, rng)?;
            let t = eta.twist().expect("automorphy twist").clone();
            let lx = grid.lx as f64;
            let frames: Vec<CMat> = (0..grid.len())
                .into_par_iter()
                .map(|pt| {
                    let (px, py) = grid.coords(pt);
                    let gen = &t.hx * Complex64::new(px / lx, 0.0) + &t.hy * Complex64::new(py, 0.0);
                    linalg::hermitian_calculus(&gen, |l| Complex64::from_polar(1.0, 2.0 * PI * l)).unwrap()
                })
                .collect();
            let comps = x
                .components()
                .iter()
                .map(|c| c.iter().zip(&frames).map(|(m, e)| e * m * e.adjoint()).collect())
                .collect();
            MatrixForm::from_components(&grid, 1, comps)
        }
        BundleSpec::ProjectionField { owner, eps, .. } => {
            let x = random_field(&grid, owner, n, n, 1, kmax, rng)?;
            let skew = x.map(|m| (m - m.adjoint()) * Complex64::new(0.5 * amp, 0.0));
            reduce_pointwise(eps, &skew)
        }
    }
}

/// Random smooth section of `b` (columns realize `A^1`); for automorphy
/// bundles `θ_c·e^{2πi(x·H_U + y·H_V)}·p·F` with `F` a random field.
pub fn random_section<R: Rng>(b: &BundleSpec, kmax: i64, rng: &mut R) -> Result<MatrixForm> {
    let grid = b.grid().clone();
    let owner = b.owner().clone();
    let f = random_field(&grid, &owner, b.ambient_rank(), 1, 0, kmax, rng)?;
    match b {
        BundleSpec::Automorphy { fiber, chern, eta, .. } => {
            let p = fiber.projection().to_block_diag();
            let t = eta.twist().expect("automorphy twist").clone();
            let lx = grid.lx as f64;
            let c = *chern;
            let comp: Vec<CMat> = f
                .component(0)
                .par_iter()
                .enumerate()
                .map(|(pt, m)| {
                    let (x, y) = grid.coords(pt);
                    let gen = &t.hx * Complex64::new(x / lx, 0.0) + &t.hy * Complex64::new(y, 0.0);
                    let mut e = linalg::hermitian_calculus(&gen, |l| Complex64::from_polar(1.0, 2.0 * PI * l)).unwrap();
                    if c != 0 {
                        e *= forms::theta(c, x, y);
                    }
                    e * &p * m
                })
                .collect();
            MatrixForm::from_components(&grid, 0, vec![comp])?.with_twist(Some(t.with_kind(TwistKind::Left)))
        }
        _ => {
            let comp: Vec<CMat> = f.component(0).iter().enumerate().map(|(pt, m)| b.projection_at(pt) * m).collect();
            MatrixForm::from_components(&grid, 0, vec![comp])
        }
    }
}

/// `‖d⟨s₁,s₂⟩ − ⟨∇s₁,s₂⟩ − ⟨s₁,∇s₂⟩‖∞` with `⟨s,t⟩ = s*t`.
pub fn metric_defect(b: &BundleSpec, s1: &MatrixForm, s2: &MatrixForm) -> Result<f64> {
    let inner = wedge(&s1.adjoint(), &strip(s2))?;
    let lhs = exterior_d(&inner)?;
    let n1 = b.covariant_derivative(s1)?;
    let n2 = b.covariant_derivative(s2)?;
    let rhs = wedge(&n1.adjoint(), &strip(s2))?.add(&wedge(&s1.adjoint(), &strip(&n2))?)?;
    Ok(lhs.sub(&rhs)?.max_abs())
}

/// `‖Ω + Ω*‖∞`: zero for metric connections.
pub fn skew_defect(omega: &MatrixForm) -> f64 {
    omega.add(&omega.adjoint()).map(|s| s.max_abs()).unwrap_or(f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{I, ONE, ZERO};
    use crate::hilbert_module::class_of;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn with_random_connection(g: &Grid, c: i64, m: &Monodromy, kmax: i64, r: &mut ChaCha8Rng) -> BundleSpec {
        let b = BundleSpec::automorphy(g, c, m, None).unwrap();
        b.perturbed(&random_perturbation(&b, kmax, 1.0, r).unwrap()).unwrap()
    }

    fn m2() -> Arc<AlgebraSpec> {
        AlgebraSpec::matrix_blocks(&[2]).unwrap()
    }

    /// Smooth rank-1 projection field on ℂ²: the Bloch sphere map of a smooth
    /// unit vector field.
    fn bloch_field(grid: &Grid) -> MatrixForm {
        MatrixForm::from_fn(grid, 0, 2, 2, |_, x, y| {
            let th = 0.6 + 0.3 * (2.0 * PI * x).cos();
            let ph = 2.0 * PI * y + 0.4 * (2.0 * PI * x).sin();
            let v = nalgebra::DVector::from_vec(vec![Complex64::new(th.cos(), 0.0), Complex64::from_polar(th.sin(), ph)]);
            &v * v.adjoint()
        })
        .unwrap()
    }

    #[test]
    fn zero_connection_is_flat() {
        let g = Grid::torus(8).unwrap();
        let fiber = ProjectiveModule::free(&m2(), 1).unwrap();
        let b = BundleSpec::trivialized(&fiber, MatrixForm::zero(&g, 1, 2, 2).unwrap()).unwrap();
        assert!(b.curvature().unwrap().max_abs() == 0.0);
    }

    #[test]
    fn line_bundle_curvature() {
        let g = Grid::torus(16).unwrap();
        for c in -3..=3 {
            let om = BundleSpec::line(&g, c).unwrap().curvature().unwrap();
            let expect = Complex64::new(0.0, -2.0 * PI * c as f64);
            assert!(om.component(0).iter().all(|m| (m[(0, 0)] - expect).norm() < 1e-12));
        }
    }

    #[test]
    fn flat_monodromy_bundle() {
        let g = Grid::torus(16).unwrap();
        let a = AlgebraSpec::group_algebra(crate::algebra::FiniteGroup::cyclic(3).unwrap());
        let fiber = ProjectiveModule::free(&a, 1).unwrap();
        let u = ModuleMap::diagonal(&AlgebraElement::delta(&a, 1).unwrap(), 1).unwrap();
        let v = ModuleMap::diagonal(&AlgebraElement::delta(&a, 2).unwrap(), 1).unwrap();
        let m = Monodromy::new(&fiber, u.clone(), v.clone()).unwrap();
        let b = flat_bundle(&g, &m).unwrap();
        assert!(b.curvature().unwrap().max_abs() < 1e-12);
        let (hu, hv) = m.generators();
        let eu = linalg::hermitian_calculus(&hu, |l| Complex64::from_polar(1.0, 2.0 * PI * l)).unwrap();
        let ev = linalg::hermitian_calculus(&hv, |l| Complex64::from_polar(1.0, 2.0 * PI * l)).unwrap();
        assert!(linalg::max_abs(&(eu - u.to_block_diag())) < 1e-12);
        assert!(linalg::max_abs(&(ev - v.to_block_diag())) < 1e-12);
        // identity monodromy: exactly periodic, zero generators
        let t = Monodromy::trivial(&fiber);
        let (h0, _) = t.generators();
        assert!(linalg::max_abs(&h0) == 0.0);
    }

    #[test]
    fn noncommuting_monodromy_rejected() {
        let a = m2();
        let fiber = ProjectiveModule::free(&a, 1).unwrap();
        let x = CMat::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]);
        let z = CMat::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]);
        let u = ModuleMap::from_blocks(&a, 1, 1, vec![x]).unwrap();
        let v = ModuleMap::from_blocks(&a, 1, 1, vec![z]).unwrap();
        assert!(matches!(Monodromy::new(&fiber, u, v), Err(Error::Precondition(_))));
    }

    #[test]
    fn random_connection_curvature_is_skew() {
        let g = Grid::torus(16).unwrap();
        let a = AlgebraSpec::matrix_blocks(&[2, 1]).unwrap();
        let fiber = ProjectiveModule::free(&a, 2).unwrap();
        let mut r = rng(5);
        let u = ModuleMap::random_unitary(&a, 2, &mut r).unwrap();
        let m = Monodromy::new(&fiber, u.clone(), u.compose(&u).unwrap()).unwrap();
        for c in [0, 2] {
            let b = with_random_connection(&g, c, &m, 3, &mut r);
            let om = b.curvature().unwrap();
            assert!(skew_defect(&om) < 1e-9 * om.max_abs());
        }
    }

    #[test]
    fn metric_compatibility() {
        let g = Grid::torus(32).unwrap();
        let a = AlgebraSpec::matrix_blocks(&[2, 1]).unwrap();
        let mut r = rng(6);
        let fiber = ProjectiveModule::free(&a, 1).unwrap();
        let u = ModuleMap::random_unitary(&a, 1, &mut r).unwrap();
        let m = Monodromy::new(&fiber, u.clone(), u.adjoint()).unwrap();
        for c in [0, 1, -2] {
            let b = with_random_connection(&g, c, &m, 2, &mut r);
            let s1 = random_section(&b, 2, &mut r).unwrap();
            let s2 = random_section(&b, 2, &mut r).unwrap();
            let scale = s1.max_abs() * s2.max_abs() * 2.0 * PI * (1.0 + c.abs() as f64);
            let md = metric_defect(&b, &s1, &s2).unwrap();
            assert!(md < 1e-9 * scale, "c = {c}: {md:e} vs {scale:e}");
        }
        let pf = BundleSpec::projection_field(&m2(), bloch_field(&g), None).unwrap();
        let s1 = random_section(&pf, 2, &mut r).unwrap();
        let s2 = random_section(&pf, 2, &mut r).unwrap();
        assert!(metric_defect(&pf, &s1, &s2).unwrap() < 1e-8 * s1.max_abs() * s2.max_abs() * 10.0);
    }

    #[test]
    fn connection_difference_is_tensorial() {
        // ∇₁s − ∇₂s = (ω₁ − ω₂)s with no derivative of s
        let g = Grid::torus(16).unwrap();
        let a = m2();
        let fiber = ProjectiveModule::free(&a, 1).unwrap();
        let mut r = rng(7);
        let b1 = BundleSpec::automorphy(&g, 1, &Monodromy::trivial(&fiber), Some(random_skew_form(&g, &fiber, 2, 1.0, &mut r).unwrap())).unwrap();
        let delta = random_skew_form(&g, &fiber, 2, 1.0, &mut r).unwrap();
        let b2 = b1.perturbed(&delta).unwrap();
        let s = random_section(&b1, 2, &mut r).unwrap();
        let diff = b2.covariant_derivative(&s).unwrap().sub(&b1.covariant_derivative(&s).unwrap()).unwrap();
        let expect = wedge(&delta, &strip(&s)).unwrap();
        assert!(strip(&diff).sub(&expect).unwrap().max_abs() < 1e-10 * s.max_abs());
    }

    #[test]
    fn complement_examples() {
        let g = Grid::torus(16).unwrap();
        let a = m2();
        let b = BundleSpec::projection_field(&a, bloch_field(&g), None).unwrap();
        let c = complement(&b).unwrap();
        let BundleSpec::ProjectionField { eps: e, .. } = &b else { unreachable!() };
        let BundleSpec::ProjectionField { eps: f, .. } = &c else { unreachable!() };
        let one = CMat::identity(2, 2);
        for p in 0..g.len() {
            let (x, y) = (e.at(0, p), f.at(0, p));
            assert!(linalg::max_abs(&(y * y - y)) < 1e-12);
            assert!(linalg::max_abs(&(x + y - &one)) < 1e-14);
        }
        // rank additivity at a point
        let pm = |m: &CMat| ProjectiveModule::new(ModuleMap::from_blocks(&a, 1, 1, vec![m.clone()]).unwrap()).unwrap();
        let sum = class_of(&pm(e.at(0, 3))).unwrap().add(&class_of(&pm(f.at(0, 3))).unwrap());
        assert_eq!(sum, class_of(&ProjectiveModule::free(&a, 1).unwrap()).unwrap());
        // Ω_ε ⊕ Ω_{1−ε} is the curvature of ε ⊕ (1−ε)
        let ds = b.direct_sum(&c).unwrap();
        let (o1, o2, o) = (b.curvature().unwrap(), c.curvature().unwrap(), ds.curvature().unwrap());
        for p in 0..g.len() {
            let expect = block_direct_sum(&a, 1, 1, o1.at(0, p), o2.at(0, p)).unwrap();
            assert!(linalg::max_abs(&(o.at(0, p) - expect)) < 1e-10);
        }
        assert!(o1.max_abs() > 1.0);
    }

    #[test]
    fn retraction_examples() {
        let g = Grid::torus(8).unwrap();
        let eps = bloch_field(&g);
        let same = retract_projection(&eps, DEFAULT_DELTA, Some(&eps)).unwrap();
        assert!(same.sub(&eps).unwrap().max_abs() < 1e-12);

        let mut r = rng(8);
        let noise = random_field(&g, &m2(), 1, 1, 0, 2, &mut r).unwrap();
        let nmax = noise.component(0).iter().map(linalg::op_norm).fold(0.0, f64::max);
        let pert = eps.add(&noise.map(|m| linalg::hermitian_part(m) * Complex64::new(0.05 / nmax, 0.0))).unwrap();
        let e2 = retract_projection(&pert, DEFAULT_DELTA, Some(&eps)).unwrap();
        let idem = e2.component(0).iter().map(|m| linalg::max_abs(&(m * m - m))).fold(0.0, f64::max);
        assert!(idem < 1e-12);
        let dist = e2.sub(&eps).unwrap().component(0).iter().map(linalg::op_norm).fold(0.0, f64::max);
        assert!(dist < 0.2);
        assert!(image_overlap(&e2, &eps).unwrap() > 0.5);

        let small = MatrixForm::from_fn(&g, 0, 2, 2, |_, _, _| CMat::identity(2, 2) * Complex64::new(0.3, 0.0)).unwrap();
        assert!(retract_projection(&small, 1.0, None).unwrap().max_abs() == 0.0);
        let half = MatrixForm::from_fn(&g, 0, 2, 2, |_, _, _| CMat::identity(2, 2) * Complex64::new(0.5, 0.0)).unwrap();
        assert!(matches!(retract_projection(&half, 1.0, None), Err(Error::RetractionUndefined { .. })));
    }

    #[test]
    fn tensor_curvature_identity() {
        let g = Grid::torus(16).unwrap();
        let a = AlgebraSpec::matrix_blocks(&[2, 1]).unwrap();
        let mut r = rng(9);
        let cplx = AlgebraSpec::complex();
        let fe = ProjectiveModule::free(&cplx, 2).unwrap();
        let ue = ModuleMap::random_unitary(&cplx, 2, &mut r).unwrap();
        let me = Monodromy::new(&fe, ue.clone(), ue.compose(&ue).unwrap()).unwrap();
        let e = with_random_connection(&g, 1, &me, 2, &mut r);
        let fb = ProjectiveModule::free(&a, 1).unwrap();
        let ub = ModuleMap::random_unitary(&a, 1, &mut r).unwrap();
        let mb = Monodromy::new(&fb, ub.clone(), ub.adjoint()).unwrap();
        let b = with_random_connection(&g, -2, &mb, 2, &mut r);
        let t = tensor_with_vector_bundle(&e, &b).unwrap();
        assert_eq!(t.chern(), -1);
        let (oe, ob, ot) = (e.curvature().unwrap(), b.curvature().unwrap(), t.curvature().unwrap());
        let pb = fb.projection().to_block_diag();
        let pe = fe.projection().to_block_diag();
        for p in (0..g.len()).step_by(7) {
            let expect = block_kron(&a, oe.at(0, p), 1, &pb).unwrap() + block_kron(&a, &pe, 1, ob.at(0, p)).unwrap();
            assert!(linalg::max_abs(&(ot.at(0, p) - &expect)) < 1e-9 * expect.iter().map(|z| z.norm()).fold(1.0, f64::max));
        }
        // trivial line ⊗ b = b
        let triv = BundleSpec::line(&g, 0).unwrap();
        let tb = tensor_with_vector_bundle(&triv, &b).unwrap();
        assert!(tb.curvature().unwrap().sub(&ob).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn pullback_curvature() {
        let g = Grid::torus(16).unwrap();
        let a = AlgebraSpec::matrix_blocks(&[2, 1]).unwrap();
        let mut r = rng(10);
        let fiber = ProjectiveModule::free(&a, 1).unwrap();
        let u = ModuleMap::random_unitary(&a, 1, &mut r).unwrap();
        let m = Monodromy::new(&fiber, u.clone(), u.compose(&u).unwrap()).unwrap();
        let b = with_random_connection(&g, 1, &m, 3, &mut r);
        for k in [2, 3] {
            let cover = g.cover(k).unwrap();
            let lhs = b.pullback(k).unwrap().curvature().unwrap();
            let rhs = forms::pullback_form(&b.curvature().unwrap(), &cover).unwrap();
            assert!(strip(&lhs).sub(&strip(&rhs)).unwrap().max_abs() < 1e-10 * rhs.max_abs());
        }
        let pf = BundleSpec::projection_field(&m2(), bloch_field(&g), None).unwrap();
        let lhs = pf.pullback(2).unwrap().curvature().unwrap();
        let rhs = forms::pullback_form(&pf.curvature().unwrap(), &g.cover(2).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10 * rhs.max_abs());
    }

    #[test]
    fn invalid_inputs() {
        let g = Grid::torus(8).unwrap();
        let a = m2();
        let half = MatrixForm::from_fn(&g, 0, 2, 2, |_, _, _| CMat::identity(2, 2) * Complex64::new(0.5, 0.0)).unwrap();
        assert!(matches!(BundleSpec::projection_field(&a, half, None), Err(Error::NotProjection(_))));
        // ω not reduced by p
        let q = ProjectiveModule::from_isometries(&a, 1, &[CMat::from_column_slice(2, 1, &[ONE, ZERO])]).unwrap();
        let om = MatrixForm::from_fn(&g, 1, 2, 2, |_, _, _| CMat::from_row_slice(2, 2, &[ZERO, I, I, ZERO])).unwrap();
        assert!(BundleSpec::trivialized(&q, om).is_err());
        assert!(BundleSpec::line(&Grid::circle(8).unwrap(), 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn perturbed_curvature_stays_skew(seed in any::<u64>()) {
            let g = Grid::torus(16).unwrap();
            let a = AlgebraSpec::matrix_blocks(&[1, 2]).unwrap();
            let mut r = rng(seed);
            let q = ProjectiveModule::from_isometries(&a, 2, &[
                CMat::from_column_slice(2, 1, &[ONE, ZERO]),
                CMat::from_column_slice(4, 2, &[ONE, ZERO, ZERO, ZERO, ZERO, ZERO, ONE, ZERO]),
            ]).unwrap();
            let b = BundleSpec::trivialized(&q, random_skew_form(&g, &q, 3, 1.0, &mut r).unwrap()).unwrap();
            let om = b.curvature().unwrap();
            prop_assert!(skew_defect(&om) < 1e-9 * om.max_abs().max(1.0));
            check_reduced(&q.projection().to_block_diag(), &om, "Ω").unwrap();
        }
    }
}
