//! Free modules `A^n`, projective modules `pA^n`, adjointable maps between
//! them, `ev` on endomorphisms, K₀ rank vectors and the kernel-projection
//! Fredholm index.
//!
//! A map `Φ: A^n → A^m` is stored as one complex matrix per block of `A`:
//! block `i` is the `(m·nᵢ)×(n·nᵢ)` matrix whose `(r,s)` sub-block is the
//! `i`-th block of the entry `Φ_{rs}`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;

use crate::algebra::{check_owner, AlgebraElement, AlgebraSpec, TraceFunctional, ZValue};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, ONE};

/// Required ratio between the smallest "nonzero" and largest "zero" eigenvalue.
pub const GAP_RATIO: f64 = 10.0;
/// Relative default for the zero-eigenvalue threshold of `Φ*Φ`.
pub const DEFAULT_REL_TOL: f64 = 1e-8;
/// Block traces of projections must be this close to integers.
pub const RANK_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ModuleMap {
    owner: Arc<AlgebraSpec>,
    m: usize,
    n: usize,
    blocks: Vec<CMat>,
}

impl ModuleMap {
    pub fn from_blocks(owner: &Arc<AlgebraSpec>, m: usize, n: usize, blocks: Vec<CMat>) -> Result<Self> {
        owner.require_block_model()?;
        if blocks.len() != owner.k()
            || blocks.iter().zip(owner.blocks()).any(|(b, &ni)| b.shape() != (m * ni, n * ni))
        {
            return Err(Error::Shape(format!("blocks do not realize a {m}×{n} map over {}", owner.describe())));
        }
        Ok(Self { owner: owner.clone(), m, n, blocks })
    }

    pub fn from_entries(owner: &Arc<AlgebraSpec>, entries: &[Vec<AlgebraElement>]) -> Result<Self> {
        owner.require_block_model()?;
        let m = entries.len();
        let n = entries.first().map(|r| r.len()).unwrap_or(0);
        if entries.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged entry matrix".into()));
        }
        let mut out = Self::zero(owner, m, n)?;
        for (r, row) in entries.iter().enumerate() {
            for (s, a) in row.iter().enumerate() {
                check_owner(owner, a.owner())?;
                for (i, &ni) in owner.blocks().iter().enumerate() {
                    out.blocks[i].view_mut((r * ni, s * ni), (ni, ni)).copy_from(a.block(i));
                }
            }
        }
        Ok(out)
    }

    pub fn zero(owner: &Arc<AlgebraSpec>, m: usize, n: usize) -> Result<Self> {
        owner.require_block_model()?;
        Ok(Self {
            owner: owner.clone(),
            m,
            n,
            blocks: owner.blocks().iter().map(|&ni| CMat::zeros(m * ni, n * ni)).collect(),
        })
    }

    pub fn identity(owner: &Arc<AlgebraSpec>, n: usize) -> Result<Self> {
        owner.require_block_model()?;
        Ok(Self {
            owner: owner.clone(),
            m: n,
            n,
            blocks: owner.blocks().iter().map(|&ni| CMat::identity(n * ni, n * ni)).collect(),
        })
    }

    /// Diagonal map with the element `a` repeated `n` times.
    pub fn diagonal(a: &AlgebraElement, n: usize) -> Result<Self> {
        let owner = a.owner().clone();
        let blocks = a.blocks().iter().map(|b| linalg::kron(&CMat::identity(n, n), b)).collect();
        Self::from_blocks(&owner, n, n, blocks)
    }

    pub fn random<R: Rng>(owner: &Arc<AlgebraSpec>, m: usize, n: usize, rng: &mut R) -> Result<Self> {
        owner.require_block_model()?;
        let blocks = owner
            .blocks()
            .iter()
            .map(|&ni| {
                CMat::from_fn(m * ni, n * ni, |_, _| {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                })
            })
            .collect();
        Ok(Self { owner: owner.clone(), m, n, blocks })
    }

    /// Haar-like random unitary in `M_n(A)` (QR of a random map).
    pub fn random_unitary<R: Rng>(owner: &Arc<AlgebraSpec>, n: usize, rng: &mut R) -> Result<Self> {
        let g = Self::random(owner, n, n, rng)?;
        let blocks = g.blocks.iter().map(|b| b.clone().qr().q()).collect();
        Self::from_blocks(owner, n, n, blocks)
    }

    pub fn owner(&self) -> &Arc<AlgebraSpec> {
        &self.owner
    }

    /// `(m, n)` for a map `A^n → A^m`.
    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn blocks(&self) -> &[CMat] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &CMat {
        &self.blocks[i]
    }

    pub fn entry(&self, r: usize, s: usize) -> AlgebraElement {
        let blocks = self
            .owner
            .blocks()
            .iter()
            .zip(&self.blocks)
            .map(|(&ni, b)| b.view((r * ni, s * ni), (ni, ni)).into_owned())
            .collect();
        AlgebraElement::from_blocks(&self.owner, blocks).expect("entry shape")
    }

    fn check(&self, o: &Self) -> Result<()> {
        check_owner(&self.owner, &o.owner)
    }

    /// Composition `self ∘ o`.
    pub fn compose(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        if self.n != o.m {
            return Err(Error::Shape(format!("cannot compose {}×{} with {}×{}", self.m, self.n, o.m, o.n)));
        }
        Ok(Self {
            owner: self.owner.clone(),
            m: self.m,
            n: o.n,
            blocks: self.blocks.iter().zip(&o.blocks).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        if self.shape() != o.shape() {
            return Err(Error::Shape("cannot add maps of different shapes".into()));
        }
        Ok(Self {
            owner: self.owner.clone(),
            m: self.m,
            n: self.n,
            blocks: self.blocks.iter().zip(&o.blocks).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.add(&o.scale(-ONE))
    }

    pub fn scale(&self, z: Complex64) -> Self {
        Self { owner: self.owner.clone(), m: self.m, n: self.n, blocks: self.blocks.iter().map(|b| b * z).collect() }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            owner: self.owner.clone(),
            m: self.n,
            n: self.m,
            blocks: self.blocks.iter().map(|b| b.adjoint()).collect(),
        }
    }

    /// Direct sum `self ⊕ o`.
    pub fn direct_sum(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        let blocks = self
            .blocks
            .iter()
            .zip(&o.blocks)
            .map(|(a, b)| {
                let mut c = CMat::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
                c.view_mut((0, 0), a.shape()).copy_from(a);
                c.view_mut(a.shape(), b.shape()).copy_from(b);
                c
            })
            .collect();
        Ok(Self { owner: self.owner.clone(), m: self.m + o.m, n: self.n + o.n, blocks })
    }

    /// Operator norm on the Hilbert module: the largest block spectral norm.
    pub fn op_norm(&self) -> f64 {
        self.blocks.iter().map(linalg::op_norm).fold(0.0, f64::max)
    }

    /// Hilbert-module norm `|Φ| = (Σⱼ ‖Φ(eⱼ)‖²)^{1/2}` over the standard basis.
    pub fn module_norm(&self) -> f64 {
        (0..self.n)
            .map(|j| {
                self.owner
                    .blocks()
                    .iter()
                    .zip(&self.blocks)
                    .map(|(&ni, b)| linalg::op_norm(&b.columns(j * ni, ni).into_owned()))
                    .fold(0.0, f64::max)
                    .powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(linalg::max_abs).fold(0.0, f64::max)
    }

    /// Block-diagonal realization `⊕ᵢ Φᵢ` as a single complex matrix.
    pub fn to_block_diag(&self) -> CMat {
        let rows: usize = self.blocks.iter().map(|b| b.nrows()).sum();
        let cols: usize = self.blocks.iter().map(|b| b.ncols()).sum();
        let mut out = CMat::zeros(rows, cols);
        let (mut r, mut c) = (0, 0);
        for b in &self.blocks {
            out.view_mut((r, c), b.shape()).copy_from(b);
            r += b.nrows();
            c += b.ncols();
        }
        out
    }

    /// Inverse of [`to_block_diag`](Self::to_block_diag).
    pub fn from_block_diag(owner: &Arc<AlgebraSpec>, m: usize, n: usize, x: &CMat) -> Result<Self> {
        let rows: usize = owner.blocks().iter().map(|ni| m * ni).sum();
        let cols: usize = owner.blocks().iter().map(|ni| n * ni).sum();
        if x.shape() != (rows, cols) {
            return Err(Error::Shape(format!("expected {rows}×{cols} block-diagonal matrix")));
        }
        let (mut r, mut c) = (0, 0);
        let mut blocks = Vec::new();
        for &ni in owner.blocks() {
            blocks.push(x.view((r, c), (m * ni, n * ni)).into_owned());
            r += m * ni;
            c += n * ni;
        }
        Self::from_blocks(owner, m, n, blocks)
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.m == self.n
            && self.blocks.iter().all(|b| linalg::max_abs(&(b.ad_mul(b) - CMat::identity(b.ncols(), b.ncols()))) < tol)
    }

    pub fn is_projection(&self, tol: f64) -> bool {
        self.m == self.n
            && self
                .blocks
                .iter()
                .all(|b| linalg::max_abs(&(b * b - b)) < tol && linalg::max_abs(&(b - b.adjoint())) < tol)
    }

    /// Unnormalized block traces of a square map.
    pub fn block_traces(&self) -> Vec<Complex64> {
        self.blocks.iter().map(|b| b.trace()).collect()
    }
}

/// An element of `A^n`, i.e. a map `A → A^n`.
#[derive(Clone, Debug)]
pub struct ModuleVector(pub ModuleMap);

impl ModuleVector {
    pub fn from_entries(owner: &Arc<AlgebraSpec>, entries: &[AlgebraElement]) -> Result<Self> {
        let col: Vec<Vec<AlgebraElement>> = entries.iter().map(|a| vec![a.clone()]).collect();
        Ok(Self(ModuleMap::from_entries(owner, &col)?))
    }

    pub fn random<R: Rng>(owner: &Arc<AlgebraSpec>, n: usize, rng: &mut R) -> Result<Self> {
        Ok(Self(ModuleMap::random(owner, n, 1, rng)?))
    }

    pub fn rank(&self) -> usize {
        self.0.m
    }

    /// Right action `v·a`.
    pub fn right_mul(&self, a: &AlgebraElement) -> Result<Self> {
        Ok(Self(self.0.compose(&ModuleMap::diagonal(a, 1)?)?))
    }
}

/// `⟨v, w⟩ = Σ vᵢ* wᵢ`.
pub fn inner_product(v: &ModuleVector, w: &ModuleVector) -> Result<AlgebraElement> {
    if v.rank() != w.rank() {
        return Err(Error::Shape(format!("ranks {} and {} differ", v.rank(), w.rank())));
    }
    let p = v.0.adjoint().compose(&w.0)?;
    Ok(p.entry(0, 0))
}

/// `(‖Φ‖, |Φ|)`.
pub fn module_norms(phi: &ModuleMap) -> (f64, f64) {
    (phi.op_norm(), phi.module_norm())
}

/// The functional `x ↦ ⟨v, x⟩` as a `1×n` map; its adjoint is `a ↦ v·a`.
pub fn dual_functional(v: &ModuleVector) -> ModuleMap {
    v.0.adjoint()
}

/// `pA^n` for a self-adjoint idempotent `p ∈ M_n(A)`.
#[derive(Clone, Debug)]
pub struct ProjectiveModule {
    p: ModuleMap,
}

impl ProjectiveModule {
    pub fn new(p: ModuleMap) -> Result<Self> {
        if !p.is_projection(1e-10) {
            return Err(Error::NotProjection("p must satisfy p = p² = p* to 1e-10".into()));
        }
        Ok(Self { p })
    }

    pub fn free(owner: &Arc<AlgebraSpec>, n: usize) -> Result<Self> {
        Ok(Self { p: ModuleMap::identity(owner, n)? })
    }

    /// Projection onto the column span of an isometry given per block.
    pub fn from_isometries(owner: &Arc<AlgebraSpec>, n: usize, q: &[CMat]) -> Result<Self> {
        let blocks = q.iter().map(linalg::projector).collect();
        Self::new(ModuleMap::from_blocks(owner, n, n, blocks)?)
    }

    pub fn projection(&self) -> &ModuleMap {
        &self.p
    }

    pub fn owner(&self) -> &Arc<AlgebraSpec> {
        self.p.owner()
    }

    /// Ambient rank `n` of `pA^n ⊂ A^n`.
    pub fn ambient_rank(&self) -> usize {
        self.p.n
    }

    pub fn complement(&self) -> Self {
        let one = ModuleMap::identity(self.owner(), self.ambient_rank()).unwrap();
        Self { p: one.sub(&self.p).unwrap() }
    }

    pub fn direct_sum(&self, o: &Self) -> Result<Self> {
        Ok(Self { p: self.p.direct_sum(&o.p)? })
    }

    /// `u p u*` for a unitary `u`.
    pub fn conjugate(&self, u: &ModuleMap) -> Result<Self> {
        Self::new(u.compose(&self.p)?.compose(&u.adjoint())?)
    }

    /// Orthonormal basis (per block) of the range of `pᵢ`.
    pub fn range_bases(&self) -> Vec<CMat> {
        self.p
            .blocks
            .iter()
            .map(|b| linalg::spectral_subspace(b, |l| l > 0.5).expect("projection eigensolve"))
            .collect()
    }
}

/// K₀ class of `A`: one integer rank per block.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct K0Class {
    pub ranks: Vec<i64>,
}

impl K0Class {
    pub fn zero(k: usize) -> Self {
        Self { ranks: vec![0; k] }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self { ranks: self.ranks.iter().zip(&o.ranks).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self { ranks: self.ranks.iter().zip(&o.ranks).map(|(a, b)| a - b).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.ranks.iter().all(|&r| r == 0)
    }

    /// Block traces of the class, as the element of `A/[A,A] ≅ ℂ^k`.
    pub fn as_block_traces(&self) -> Vec<Complex64> {
        self.ranks.iter().map(|&r| Complex64::new(r as f64, 0.0)).collect()
    }
}

/// `ev: End_A(pA^n) → ℂ^k`, the unnormalized block traces of `Φ`.
pub fn ev_endomorphism(phi: &ModuleMap, p: &ProjectiveModule) -> Result<Vec<Complex64>> {
    let pp = p.projection();
    let red = pp.compose(phi)?.compose(pp)?;
    let defect = red.sub(phi)?.max_abs();
    if defect > 1e-10 * phi.max_abs().max(1.0) {
        return Err(Error::Precondition(format!("Φ is not reduced by p (‖pΦp − Φ‖ = {defect:.3e})")));
    }
    Ok(phi.block_traces())
}

/// Polar decomposition `Φ = U|Φ|`.
pub fn polar_decomposition(phi: &ModuleMap) -> Result<(ModuleMap, ModuleMap)> {
    let scale = phi.op_norm();
    let mut us = Vec::new();
    let mut abs = Vec::new();
    for b in &phi.blocks {
        // singular vectors give sqrt(Φ*Φ) without squaring the conditioning
        let f = linalg::svd(b)?;
        let mut vs = f.v.clone();
        for (j, &s) in f.s.iter().enumerate() {
            vs.column_mut(j).iter_mut().for_each(|z| *z *= s);
        }
        abs.push(&vs * f.v.adjoint());
        let r = f.s.iter().filter(|&&s| scale > 0.0 && s > 1e-13 * scale).count();
        us.push(f.u.columns(0, r) * f.v.columns(0, r).adjoint());
    }
    let (m, n) = phi.shape();
    Ok((
        ModuleMap::from_blocks(phi.owner(), m, n, us)?,
        ModuleMap::from_blocks(phi.owner(), n, n, abs)?,
    ))
}

/// Ratio between the smallest eigenvalue above `tol` and the largest at or
/// below it (infinite when one side is empty or the zero cluster is exact).
pub fn gap_ratio(eigs: &[f64], tol: f64) -> f64 {
    let zero = eigs.iter().copied().filter(|&l| l <= tol).fold(f64::NEG_INFINITY, f64::max);
    let nonzero = eigs.iter().copied().filter(|&l| l > tol).fold(f64::INFINITY, f64::min);
    if !nonzero.is_finite() {
        return f64::INFINITY;
    }
    if !zero.is_finite() {
        return nonzero / tol;
    }
    if zero <= 0.0 {
        return f64::INFINITY;
    }
    nonzero / zero
}

fn spectral_kernel(blocks: &[CMat], tol: f64) -> Result<(Vec<CMat>, Vec<f64>)> {
    let mut bases = Vec::new();
    let mut all = Vec::new();
    for g in blocks {
        let (vals, vecs) = linalg::eigh(g)?;
        let cols: Vec<usize> = (0..vals.len()).filter(|&j| vals[j] <= tol).collect();
        bases.push(vecs.select_columns(cols.iter()));
        all.extend(vals);
    }
    Ok((bases, all))
}

fn resolve_tol(phi: &ModuleMap, tol: Option<f64>) -> f64 {
    tol.unwrap_or_else(|| DEFAULT_REL_TOL * phi.op_norm().powi(2).max(f64::MIN_POSITIVE))
}

/// `χ_{[0,tol]}(Φ*Φ)` together with the measured gap ratio.
pub fn kernel_projection(phi: &ModuleMap, tol: Option<f64>) -> Result<(ProjectiveModule, f64)> {
    let tol = resolve_tol(phi, tol);
    let gram: Vec<CMat> = phi.blocks.iter().map(|b| b.ad_mul(b)).collect();
    let (bases, eigs) = spectral_kernel(&gram, tol)?;
    let gap = gap_ratio(&eigs, tol);
    if gap < GAP_RATIO {
        return Err(Error::DegenerateSpectrum { tol, gap, required: GAP_RATIO });
    }
    Ok((ProjectiveModule::from_isometries(phi.owner(), phi.shape().1, &bases)?, gap))
}

/// `[χ_{[0,tol]}(Φ*Φ)] − [χ_{[0,tol]}(ΦΦ*)]` in `K₀(A)`.
pub fn fredholm_index(phi: &ModuleMap, tol: Option<f64>) -> Result<K0Class> {
    let tol = resolve_tol(phi, tol);
    let (ker, _) = kernel_projection(phi, Some(tol))?;
    let (coker, _) = kernel_projection(&phi.adjoint(), Some(tol))?;
    Ok(class_of(&ker)?.sub(&class_of(&coker)?))
}

/// Rank vector of a projection, from its block traces.
pub fn class_of(p: &ProjectiveModule) -> Result<K0Class> {
    let mut ranks = Vec::new();
    for (i, t) in p.projection().block_traces().into_iter().enumerate() {
        let r = t.re.round();
        if (t - Complex64::new(r, 0.0)).norm() > RANK_TOL {
            return Err(Error::NotProjection(format!("block {i} trace {t} is not an integer")));
        }
        ranks.push(r as i64);
    }
    Ok(K0Class { ranks })
}

/// `τ(ev(p))`.
pub fn dim_tau(p: &ProjectiveModule, tau: &TraceFunctional) -> Result<ZValue> {
    check_owner(p.owner(), tau.owner())?;
    tau.apply_block_traces(&p.projection().block_traces())
}

/// Elementary endomorphism `x ↦ v⟨w, x⟩`.
pub fn elementary(v: &ModuleVector, w: &ModuleVector) -> Result<ModuleMap> {
    v.0.compose(&w.0.adjoint())
}

/// Complex matrix with orthonormal columns spanning the null space of `x`,
/// using a relative singular-value threshold.
pub fn null_space(x: &CMat, rel: f64) -> Result<CMat> {
    let f = linalg::svd_full(x)?;
    let smax = f.s.first().copied().unwrap_or(0.0);
    let rank = f.s.iter().filter(|&&s| s > rel * smax && s > 0.0).count();
    let n = x.ncols();
    Ok(f.v.columns(rank, n - rank).into_owned())
}
