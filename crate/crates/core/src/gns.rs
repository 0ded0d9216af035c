//! The GNS completion `l²(V)` of projective modules, the recovery functor
//! back to Hilbert modules, commutants, and the extended trace on operators
//! commuting with the right action.
//!
//! Coordinates on `l²(A^n)`: block `i` contributes the column-major entries of
//! the `(n·nᵢ)×nᵢ` matrix realizing a vector, scaled by `√wᵢ`, so that the
//! Euclidean inner product equals `τ(⟨v,w⟩)`. In these coordinates a map
//! `Φ ∈ M_n(A)` acts as `⊕ I_{nᵢ} ⊗ Φᵢ` and `a ∈ A` acts on the right as
//! `⊕ aᵢᵀ ⊗ I_{n·nᵢ}`.

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;

use crate::algebra::{check_owner, AlgebraElement, AlgebraSpec, TraceFunctional, TraceKind, ZValue};
use crate::error::{Error, Result};
use crate::hilbert_module::{ModuleMap, ModuleVector, ProjectiveModule};
use crate::linalg::{self, CMat, ZERO};

/// Commutation residual allowed for operators claimed to be `A`-linear.
pub const COMMUTANT_TOL: f64 = 1e-9;

/// A finite-dimensional `A`-Hilbert space realized inside `l²(A^n)`.
#[derive(Clone, Debug)]
pub struct GnsSpace {
    owner: Arc<AlgebraSpec>,
    weights: Vec<f64>,
    rank: usize,
    /// Orthonormal columns in ambient coordinates, grouped by block.
    basis: CMat,
    /// Block of `A` each basis column belongs to.
    col_block: Vec<usize>,
    origin: Option<ProjectiveModule>,
}

fn scalar_weights(tau: &TraceFunctional) -> Result<Vec<f64>> {
    match tau.kind() {
        TraceKind::Scalar { weights } if weights.iter().all(|w| *w > 0.0) => Ok(weights.clone()),
        TraceKind::Scalar { .. } => Err(Error::GramDegenerate),
        _ => Err(Error::Domain("the GNS inner product needs a positive scalar trace".into())),
    }
}

fn block_offsets(owner: &AlgebraSpec, n: usize) -> Vec<usize> {
    let mut o = vec![0];
    for &ni in owner.blocks() {
        o.push(o.last().unwrap() + n * ni * ni);
    }
    o
}

/// Ambient dimension of `l²(A^n)`.
pub fn ambient_dim(owner: &AlgebraSpec, n: usize) -> usize {
    n * owner.blocks().iter().map(|x| x * x).sum::<usize>()
}

/// `Φ` acting on `l²(A^m) ← l²(A^n)` in ambient coordinates.
pub fn ambient_left(f: &ModuleMap) -> CMat {
    let owner = f.owner();
    let (m, n) = f.shape();
    let (ro, co) = (block_offsets(owner, m), block_offsets(owner, n));
    let mut out = CMat::zeros(*ro.last().unwrap(), *co.last().unwrap());
    for (i, &ni) in owner.blocks().iter().enumerate() {
        let k = linalg::kron(&CMat::identity(ni, ni), f.block(i));
        out.view_mut((ro[i], co[i]), k.shape()).copy_from(&k);
    }
    out
}

/// Right multiplication by `a` on `l²(A^n)`.
pub fn ambient_right(a: &AlgebraElement, n: usize) -> CMat {
    let owner = a.owner();
    let o = block_offsets(owner, n);
    let mut out = CMat::zeros(*o.last().unwrap(), *o.last().unwrap());
    for (i, &ni) in owner.blocks().iter().enumerate() {
        let k = linalg::kron(&a.block(i).transpose(), &CMat::identity(n * ni, n * ni));
        out.view_mut((o[i], o[i]), k.shape()).copy_from(&k);
    }
    out
}

/// Matrix units of every block: a generating set of `A` as an algebra.
pub fn generators(owner: &Arc<AlgebraSpec>) -> Vec<AlgebraElement> {
    let mut g = Vec::new();
    for (i, &ni) in owner.blocks().iter().enumerate() {
        for r in 0..ni {
            for s in 0..ni {
                g.push(AlgebraElement::matrix_unit(owner, i, r, s));
            }
        }
    }
    g
}

impl GnsSpace {
    /// `l²(pA^n)` for a faithful scalar trace.
    pub fn l2_of_module(p: &ProjectiveModule, tau: &TraceFunctional) -> Result<Self> {
        let owner = p.owner().clone();
        check_owner(&owner, tau.owner())?;
        let weights = scalar_weights(tau)?;
        let n = p.ambient_rank();
        let off = block_offsets(&owner, n);
        let ranges = p.range_bases();
        let d: usize = ranges.iter().zip(owner.blocks()).map(|(q, ni)| q.ncols() * ni).sum();
        let mut basis = CMat::zeros(*off.last().unwrap(), d);
        let mut col_block = Vec::with_capacity(d);
        let mut c = 0;
        for (i, (&ni, q)) in owner.blocks().iter().zip(&ranges).enumerate() {
            let k = linalg::kron(&CMat::identity(ni, ni), q);
            basis.view_mut((off[i], c), k.shape()).copy_from(&k);
            col_block.extend(std::iter::repeat(i).take(k.ncols()));
            c += k.ncols();
        }
        Ok(Self { owner, weights, rank: n, basis, col_block, origin: Some(p.clone()) })
    }

    /// `l²(A^n)` itself.
    pub fn free(owner: &Arc<AlgebraSpec>, n: usize, tau: &TraceFunctional) -> Result<Self> {
        Self::l2_of_module(&ProjectiveModule::free(owner, n)?, tau)
    }

    /// The subspace of `l²(A^n)` spanned by the columns of `span`, which must be
    /// invariant under the right action.
    pub fn from_subspace(owner: &Arc<AlgebraSpec>, n: usize, tau: &TraceFunctional, span: &CMat) -> Result<Self> {
        check_owner(owner, tau.owner())?;
        let weights = scalar_weights(tau)?;
        let off = block_offsets(owner, n);
        if span.nrows() != *off.last().unwrap() {
            return Err(Error::Shape("spanning set is not in l²(A^n) coordinates".into()));
        }
        let mut cols = Vec::new();
        let mut col_block = Vec::new();
        for i in 0..owner.k() {
            let mut part = CMat::zeros(span.nrows(), span.ncols());
            let len = off[i + 1] - off[i];
            part.view_mut((off[i], 0), (len, span.ncols())).copy_from(&span.view((off[i], 0), (len, span.ncols())));
            let f = linalg::svd(&part)?;
            let smax = f.s.first().copied().unwrap_or(0.0);
            for (j, &s) in f.s.iter().enumerate() {
                if s > 1e-10 * smax.max(1e-300) && s > 0.0 {
                    cols.push(f.u.column(j).into_owned());
                    col_block.push(i);
                }
            }
        }
        let basis = if cols.is_empty() { CMat::zeros(span.nrows(), 0) } else { CMat::from_columns(&cols) };
        let x = Self { owner: owner.clone(), weights, rank: n, basis, col_block, origin: None };
        x.check_invariant()?;
        Ok(x)
    }

    fn check_invariant(&self) -> Result<()> {
        let p = self.ambient_projection();
        for g in generators(&self.owner) {
            let r = ambient_right(&g, self.rank);
            let c = &p * &r - &r * &p;
            if linalg::max_abs(&c) > COMMUTANT_TOL {
                return Err(Error::Precondition("subspace is not invariant under the right A-action".into()));
            }
        }
        Ok(())
    }

    pub fn owner(&self) -> &Arc<AlgebraSpec> {
        &self.owner
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_rank(&self) -> usize {
        self.rank
    }

    pub fn basis(&self) -> &CMat {
        &self.basis
    }

    pub fn col_block(&self) -> &[usize] {
        &self.col_block
    }

    pub fn origin(&self) -> Option<&ProjectiveModule> {
        self.origin.as_ref()
    }

    pub fn ambient_projection(&self) -> CMat {
        linalg::projector(&self.basis)
    }

    /// Ambient coordinates of a module vector.
    pub fn embed(&self, v: &ModuleVector) -> Result<DVector<Complex64>> {
        check_owner(&self.owner, v.0.owner())?;
        if v.rank() != self.rank {
            return Err(Error::Shape("vector rank differs from the ambient rank".into()));
        }
        let off = block_offsets(&self.owner, self.rank);
        let mut out = DVector::zeros(*off.last().unwrap());
        for (i, b) in v.0.blocks().iter().enumerate() {
            let s = self.weights[i].sqrt();
            for (t, z) in b.iter().enumerate() {
                out[off[i] + t] = z * s;
            }
        }
        Ok(out)
    }

    /// Coordinates in the basis of this space (orthogonal projection).
    pub fn coords(&self, v: &ModuleVector) -> Result<DVector<Complex64>> {
        Ok(self.basis.ad_mul(&self.embed(v)?))
    }

    /// `τ(⟨vₐ, v_b⟩)` for a family of vectors.
    pub fn gram(&self, vs: &[ModuleVector]) -> Result<CMat> {
        let e = vs.iter().map(|v| self.embed(v)).collect::<Result<Vec<_>>>()?;
        Ok(CMat::from_fn(vs.len(), vs.len(), |a, b| e[a].dotc(&e[b])))
    }

    /// Right multiplication by `a` on this space.
    pub fn right_action(&self, a: &AlgebraElement) -> Result<CMat> {
        check_owner(&self.owner, a.owner())?;
        Ok(self.basis.ad_mul(&(ambient_right(a, self.rank) * &self.basis)))
    }

    pub fn right_action_generators(&self) -> Vec<CMat> {
        generators(&self.owner).iter().map(|g| self.right_action(g).unwrap()).collect()
    }

    /// Largest commutator with the right action of the generators.
    pub fn commutation_defect(&self, x: &CMat) -> f64 {
        self.right_action_generators()
            .iter()
            .map(|r| linalg::max_abs(&(x * r - r * x)))
            .fold(0.0, f64::max)
    }
}

/// `l²(f)` as a matrix from `x` to `y`.
pub fn extend_map_between(f: &ModuleMap, x: &GnsSpace, y: &GnsSpace) -> Result<CMat> {
    check_owner(f.owner(), x.owner())?;
    check_owner(f.owner(), y.owner())?;
    if f.shape() != (y.rank, x.rank) {
        return Err(Error::Shape("map does not go between the ambient modules".into()));
    }
    Ok(y.basis.ad_mul(&(ambient_left(f) * &x.basis)))
}

/// `l²(f)` for an endomorphism of the module underlying `x`.
pub fn extend_map(f: &ModuleMap, x: &GnsSpace) -> Result<CMat> {
    extend_map_between(f, x, x)
}

/// `A(F)`: the module map realizing an operator `F: x → y` that commutes with
/// the right action.
pub fn recover_map(f: &CMat, x: &GnsSpace, y: &GnsSpace) -> Result<ModuleMap> {
    if f.shape() != (y.dim(), x.dim()) {
        return Err(Error::Shape("operator does not map x to y".into()));
    }
    let owner = x.owner.clone();
    let amb = &y.basis * f * x.basis.adjoint();
    let (ro, co) = (block_offsets(&owner, y.rank), block_offsets(&owner, x.rank));
    let mut blocks = Vec::new();
    for (i, &ni) in owner.blocks().iter().enumerate() {
        let (m, n) = (y.rank * ni, x.rank * ni);
        let fi = amb.view((ro[i], co[i]), (m, n)).into_owned();
        let expect = linalg::kron(&CMat::identity(ni, ni), &fi);
        let got = amb.view((ro[i], co[i]), expect.shape()).into_owned();
        if linalg::max_abs(&(got - expect)) > COMMUTANT_TOL {
            return Err(Error::Precondition("operator does not commute with the right A-action".into()));
        }
        blocks.push(fi);
    }
    // cross-block entries must vanish
    let mut rest = amb.clone();
    for (i, &ni) in owner.blocks().iter().enumerate() {
        rest.view_mut((ro[i], co[i]), (y.rank * ni * ni, x.rank * ni * ni)).fill(ZERO);
    }
    if linalg::max_abs(&rest) > COMMUTANT_TOL {
        return Err(Error::Precondition("operator mixes blocks of A".into()));
    }
    ModuleMap::from_blocks(&owner, y.rank, x.rank, blocks)
}

/// `A(X)`: the projection in `M_n(A)` whose GNS space is `X`.
pub fn recover_module(x: &GnsSpace) -> Result<ProjectiveModule> {
    let amb = GnsSpace {
        owner: x.owner.clone(),
        weights: x.weights.clone(),
        rank: x.rank,
        basis: CMat::identity(x.basis.nrows(), x.basis.nrows()),
        col_block: vec![],
        origin: None,
    };
    let p = recover_map(&x.ambient_projection(), &amb, &amb)
        .map_err(|_| Error::Precondition("projection does not commute with the right action: not an A-Hilbert space".into()))?;
    ProjectiveModule::new(p)
}

/// Orthonormal (Frobenius) basis of `{X : X aᵢ = aᵢ X for all i}`.
pub fn commutant(actions: &[CMat]) -> Result<Vec<CMat>> {
    let d = match actions.first() {
        Some(a) => a.nrows(),
        None => return Err(Error::Shape("commutant needs at least one action matrix".into())),
    };
    let id = CMat::identity(d, d);
    let mut rows = CMat::zeros(d * d * actions.len(), d * d);
    for (k, a) in actions.iter().enumerate() {
        if a.shape() != (d, d) {
            return Err(Error::Shape("action matrices must share one square shape".into()));
        }
        // vec(XA − AX) = (Aᵀ ⊗ I − I ⊗ A) vec(X)
        let blk = linalg::kron(&a.transpose(), &id) - linalg::kron(&id, a);
        rows.view_mut((k * d * d, 0), (d * d, d * d)).copy_from(&blk);
    }
    let null = crate::hilbert_module::null_space(&rows, 1e-9)?;
    let all_zero = linalg::max_abs(&rows) == 0.0;
    let basis = if all_zero { CMat::identity(d * d, d * d) } else { null };
    Ok((0..basis.ncols())
        .map(|j| CMat::from_column_slice(d, d, basis.column(j).as_slice()))
        .collect())
}

/// `t(a)` for an operator on `x` commuting with the right action: the
/// weighted partial trace `Σᵢ cᵢ Tr(a|_{block i}) / nᵢ`.
pub fn extended_trace_value(t: &TraceFunctional, x: &GnsSpace, a: &CMat) -> Result<ZValue> {
    check_owner(t.owner(), &x.owner)?;
    if a.shape() != (x.dim(), x.dim()) {
        return Err(Error::Shape("operator is not on the given space".into()));
    }
    let defect = x.commutation_defect(a);
    if defect > COMMUTANT_TOL * linalg::max_abs(a).max(1.0) {
        return Err(Error::Precondition(format!("operator is not A-linear (commutator {defect:.3e})")));
    }
    let diag: Vec<Complex64> = (0..x.dim()).map(|c| a[(c, c)]).collect();
    extended_trace_of_diagonal(t, &x.col_block, 1, &diag)
}

/// Partial-trace evaluation from the diagonal of an operator on `ℂ^h ⊗ x`
/// with coordinates ordered `(η, c) ↦ η·dim(x) + c`.
pub fn extended_trace_of_diagonal(
    t: &TraceFunctional,
    col_block: &[usize],
    h: usize,
    diag: &[Complex64],
) -> Result<ZValue> {
    let owner = t.owner();
    let d = col_block.len();
    if diag.len() != h * d {
        return Err(Error::Shape("diagonal length does not match the space".into()));
    }
    let mut per_block = vec![ZERO; owner.k()];
    for eta in 0..h {
        for (c, &b) in col_block.iter().enumerate() {
            per_block[b] += diag[eta * d + c];
        }
    }
    for (i, &ni) in owner.blocks().iter().enumerate() {
        per_block[i] /= ni as f64;
    }
    t.apply_block_traces(&per_block)
}

/// `Σ_e t(U_e* a U_e)` over an orthonormal basis `{e}` of `H = ℂ^h` (the
/// columns of `h_basis`), for `a` acting on `l²(A^h) = H ⊗ l²(A)`.
pub fn extended_trace_in_basis(t: &TraceFunctional, tau: &TraceFunctional, a: &CMat, h_basis: &CMat) -> Result<ZValue> {
    let owner = t.owner().clone();
    let h = h_basis.nrows();
    let big = GnsSpace::free(&owner, h, tau)?;
    let small = GnsSpace::free(&owner, 1, tau)?;
    let mut total = ZValue::zeros(t.value_len());
    for e in 0..h_basis.ncols() {
        let entries: Vec<Vec<AlgebraElement>> =
            (0..h).map(|r| vec![AlgebraElement::scalar(&owner, h_basis[(r, e)])]).collect();
        let ue = extend_map_between(&ModuleMap::from_entries(&owner, &entries)?, &small, &big)?;
        let local = ue.ad_mul(&(a * &ue));
        total = total.add(&extended_trace_value(t, &small, &local)?);
    }
    Ok(total)
}
