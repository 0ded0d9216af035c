//! Cyclic covers of the torus along x, the dictionary between sections on
//! the cover and sections of `E ⊗ H` on the base with `H` the flat
//! `l²(ℤ/k)` bundle, and L²-indices as fundamental-domain sums.
//!
//! Base bundles here have fiber `ℂ`. The deck generator acts on cover
//! sections by `(T s)(x, y) = u⁻¹·s(x + 1, y)` where `u` is the base
//! x-monodromy.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::algebra::{AlgebraElement, AlgebraSpec, FiniteGroup, TraceFunctional, ZValue};
use crate::bundle::{flat_bundle, tensor_with_vector_bundle, BundleSpec, Monodromy};
use crate::error::{Error, Result};
use crate::forms::{Grid, Manifold};
use crate::gns::GnsSpace;
use crate::hilbert_module::{ModuleMap, ModuleVector, ProjectiveModule};
use crate::linalg::{self, CMat, ZERO};
use crate::spectral::{self, assemble_dolbeault, kernel_data, KernelData, TwistedOperator};

/// Scenario form of a cover: `{"group": "Z/3", "axis": "x"}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CoverConfig {
    pub group: String,
    #[serde(default = "default_axis")]
    pub axis: String,
}

fn default_axis() -> String {
    "x".into()
}

/// The `k`-fold cyclic cover of a base torus grid along x.
#[derive(Clone, Debug)]
pub struct CoverSpec {
    k: usize,
    base: Grid,
    cover: Grid,
}

impl CoverSpec {
    pub fn cyclic(base: &Grid, k: usize) -> Result<Self> {
        if base.manifold != Manifold::T2 || base.lx != 1 {
            return Err(Error::Domain("covers are taken of the unit torus grid".into()));
        }
        let cover = base.cover(k)?;
        Ok(Self { k, base: base.clone(), cover })
    }

    pub fn from_config(base: &Grid, c: &CoverConfig) -> Result<Self> {
        if c.axis != "x" {
            return Err(Error::Unsupported(format!("covers along axis {:?}; only \"x\" is built", c.axis)));
        }
        let label: String = c.group.chars().filter(|ch| !ch.is_whitespace()).collect();
        let k = label
            .strip_prefix("Z/")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Unsupported(format!("cover group {:?}; only cyclic Z/k is built", c.group)))?;
        Self::cyclic(base, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn base_grid(&self) -> &Grid {
        &self.base
    }

    pub fn cover_grid(&self) -> &Grid {
        &self.cover
    }

    pub fn group(&self) -> Result<FiniteGroup> {
        FiniteGroup::cyclic(self.k)
    }

    /// Covering map on grid points.
    pub fn project(&self, p: usize) -> usize {
        let ny = self.cover.ny();
        let (ix, iy) = (p / ny, p % ny);
        self.base.index(ix % self.base.n, iy)
    }

    /// Deck translation by `g` on cover grid points: `x ↦ x + g`.
    pub fn deck(&self, g: usize, p: usize) -> usize {
        let ny = self.cover.ny();
        let (ix, iy) = (p / ny, p % ny);
        self.cover.index((ix + g * self.base.n) % self.cover.nx(), iy)
    }

    /// Cover points over the base copy at deck index `e`.
    pub fn fundamental_domain(&self) -> std::ops::Range<usize> {
        0..self.base.len()
    }
}

fn scalar_monodromy(b: &BundleSpec) -> Result<Complex64> {
    if b.owner().blocks() != [1] || b.owner().group().is_some() || b.ambient_rank() != 1 {
        return Err(Error::Unsupported("cover dictionaries are built for base bundles over ℂ".into()));
    }
    match b {
        BundleSpec::Automorphy { monodromy, .. } => Ok(monodromy.u().block(0)[(0, 0)]),
        BundleSpec::Trivialized { .. } => Ok(Complex64::new(1.0, 0.0)),
        BundleSpec::ProjectionField { .. } => Err(Error::Unsupported("covers of projection-field bundles".into())),
    }
}

/// `D̃`: the operator of the pulled-back bundle on the cover.
pub fn lift_operator(op: &TwistedOperator, c: &CoverSpec) -> Result<TwistedOperator> {
    if op.grid() != &c.base {
        return Err(Error::Shape("operator does not live on the cover's base grid".into()));
    }
    assemble_dolbeault(&op.bundle().pullback(c.k)?, op.trace())
}

/// `T_g` applied to the columns of `m` (cover sections of a bundle with
/// x-monodromy `u`).
pub fn deck_apply(c: &CoverSpec, u: Complex64, g: usize, m: &CMat) -> CMat {
    let g = g % c.k;
    let (nx, ny, n) = (c.cover.nx(), c.cover.ny(), c.base.n);
    let mut out = CMat::zeros(m.nrows(), m.ncols());
    for ix in 0..nx {
        let src = ix + g * n;
        // wrapping past the end picks up the cover monodromy u^k
        let phase = u.powi(-(g as i32)) * if src >= nx { u.powi(c.k as i32) } else { Complex64::new(1.0, 0.0) };
        for iy in 0..ny {
            let row = m.row(c.cover.index(src % nx, iy)) * phase;
            out.row_mut(c.cover.index(ix, iy)).copy_from(&row);
        }
    }
    out
}

/// The regular flat `ℂ(ℤ/k)` bundle `H` and the base twist `E ⊗ H`.
pub fn regular_twist(b: &BundleSpec, k: usize) -> Result<BundleSpec> {
    scalar_monodromy(b)?;
    let a = AlgebraSpec::group_algebra(FiniteGroup::cyclic(k)?);
    let fiber = ProjectiveModule::free(&a, 1)?;
    let u = ModuleMap::diagonal(&AlgebraElement::delta(&a, 1 % k)?, 1)?;
    let m = Monodromy::new(&fiber, u, ModuleMap::identity(&a, 1)?)?;
    tensor_with_vector_bundle(b, &flat_bundle(b.grid(), &m)?)
}

/// Section dictionary `s̃ ↦ ŝ`, `ŝ(x) = Σ_j u^{−j}·s̃(x + j)·δ_{−j}`, from
/// cover sections to `l²(ℂΓ)`-valued base sections.
#[derive(Clone, Debug)]
pub struct DictionaryUnitary {
    pub matrix: CMat,
    /// `E ⊗ H` on the base.
    pub twisted: BundleSpec,
}

pub fn dictionary(c: &CoverSpec, b: &BundleSpec) -> Result<DictionaryUnitary> {
    if b.grid() != &c.base {
        return Err(Error::Shape("bundle does not live on the cover's base grid".into()));
    }
    let u = scalar_monodromy(b)?;
    let twisted = regular_twist(b, c.k)?;
    let a = twisted.owner().clone();
    let x = GnsSpace::free(&a, 1, &TraceFunctional::normalized(&a))?;
    let k = c.k;
    // fourier[(c, g)]: GNS coordinate c of δ_g
    let mut fourier = CMat::zeros(k, k);
    for g in 0..k {
        let v = x.coords(&ModuleVector::from_entries(&a, &[AlgebraElement::delta(&a, g)?])?)?;
        fourier.set_column(g, &v);
    }
    let (n, ny) = (c.base.n, c.base.ny());
    let mut w = CMat::from_element(c.base.len() * k, c.cover.len(), ZERO);
    for ix in 0..n {
        for iy in 0..ny {
            let p = c.base.index(ix, iy);
            for j in 0..k {
                let g = (k - j) % k;
                let src = c.cover.index(ix + j * n, iy);
                let phase = u.powi(-(j as i32));
                for cc in 0..k {
                    w[(p * k + cc, src)] = fourier[(cc, g)] * phase;
                }
            }
        }
    }
    Ok(DictionaryUnitary { matrix: w, twisted })
}

impl DictionaryUnitary {
    /// `‖W*W − 1‖∞`.
    pub fn unitarity_defect(&self) -> f64 {
        let n = self.matrix.ncols();
        linalg::max_abs(&(linalg::ad_mul(&self.matrix, &self.matrix) - CMat::identity(n, n)))
    }

    /// `‖W·cover·W* − base‖∞` for operators on the two section spaces.
    pub fn conjugation_defect(&self, cover: &CMat, base: &CMat) -> f64 {
        let conj = linalg::matmul(&linalg::matmul(&self.matrix, cover), &self.matrix.adjoint());
        linalg::max_abs(&(conj - base))
    }
}

/// `Σ_{x∈F} (P·T_g*)(x, x)` for the projection onto the columns of `basis`:
/// the fundamental-domain integral of the kernel `k(x, g·x)`.
fn fundamental_trace(c: &CoverSpec, u: Complex64, basis: &CMat, g: usize) -> Complex64 {
    if basis.ncols() == 0 {
        return ZERO;
    }
    let shifted = deck_apply(c, u, g, basis);
    c.fundamental_domain()
        .map(|p| basis.row(p).iter().zip(shifted.row(p).iter()).map(|(a, b)| a * b.conj()).sum::<Complex64>())
        .sum()
}

/// `t_g(P_ker) − t_g(P_coker)` on the cover from fundamental-domain sums;
/// `g = 0` is the canonical trace.
pub fn l2_index_from(c: &CoverSpec, u: Complex64, kd: &KernelData, g: usize) -> Complex64 {
    fundamental_trace(c, u, &kd.kernel, g) - fundamental_trace(c, u, &kd.cokernel, g)
}

pub fn l2_index(cover_op: &TwistedOperator, c: &CoverSpec, g: usize) -> Result<Complex64> {
    if cover_op.grid() != &c.cover {
        return Err(Error::Shape("operator does not live on the cover grid".into()));
    }
    let u = scalar_monodromy(cover_op.bundle())?;
    Ok(l2_index_from(c, u, &kernel_data(cover_op, None)?, g))
}

/// One delocalized comparison `t_g`, cover side against base side.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DelocalizedIndex {
    pub g: usize,
    pub cover: Complex64,
    pub base: Complex64,
}

/// Cover-side and base-side indices for one `(k, base bundle)` pair.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AtiyahReport {
    pub k: usize,
    pub chern: i64,
    pub base_index: f64,
    /// Ordinary index of `D̃` on the cover.
    pub cover_index: f64,
    /// Canonical-trace L²-index from fundamental-domain sums.
    pub l2_index: f64,
    /// τ-index of `D_{E⊗H}` on the base with the canonical trace.
    pub flat_twist_index: f64,
    pub delocalized: Vec<DelocalizedIndex>,
    pub dictionary_defect: f64,
    /// Largest deviation of the cover, L² and twist indices from the rounded base index.
    pub residual: f64,
}

impl AtiyahReport {
    pub fn delocalized_residual(&self) -> f64 {
        self.delocalized.iter().map(|d| d.cover.norm().max(d.base.norm())).fold(0.0, f64::max)
    }

    pub fn delocalized_agreement(&self) -> f64 {
        self.delocalized.iter().map(|d| (d.cover - d.base).norm()).fold(0.0, f64::max)
    }
}

fn real(z: &ZValue) -> Complex64 {
    z.0[0]
}

/// Runs every index of the correspondence for a base bundle over `ℂ`.
pub fn atiyah_check(b: &BundleSpec, k: usize) -> Result<AtiyahReport> {
    let c = CoverSpec::cyclic(b.grid(), k)?;
    let u = scalar_monodromy(b)?;
    let tau = TraceFunctional::normalized(b.owner());
    let base_op = assemble_dolbeault(b, &tau)?;
    let base_index = real(&spectral::analytic_index(&base_op, &tau, None)?).re;

    let cover_op = lift_operator(&base_op, &c)?;
    let cover_kd = kernel_data(&cover_op, None)?;
    let cover_index = (cover_kd.kernel.ncols() as f64) - (cover_kd.cokernel.ncols() as f64);
    let l2 = l2_index_from(&c, u, &cover_kd, 0).re;

    let dict = dictionary(&c, b)?;
    let a = dict.twisted.owner().clone();
    let canonical = TraceFunctional::canonical_group_trace(&a)?;
    let twist_op = assemble_dolbeault(&dict.twisted, &canonical)?;
    let defect = dict.conjugation_defect(cover_op.matrix(), twist_op.matrix());
    let twist_kd = kernel_data(&twist_op, None)?;
    let (tk, tc) = spectral::index_dimensions(&twist_op, &twist_kd, &canonical)?;
    let flat_twist_index = real(&tk.sub(&tc)).re;
    let mut delocalized = Vec::new();
    for g in 1..k {
        let tg = TraceFunctional::delocalized_trace(&a, g)?;
        let (dk, dc) = spectral::index_dimensions(&twist_op, &twist_kd, &tg)?;
        delocalized.push(DelocalizedIndex { g, cover: l2_index_from(&c, u, &cover_kd, g), base: real(&dk.sub(&dc)) });
    }
    let rounded = base_index.round();
    let residual = [base_index, cover_index / k as f64, l2, flat_twist_index]
        .iter()
        .map(|v| (v - rounded).abs())
        .fold(0.0, f64::max);
    Ok(AtiyahReport {
        k,
        chern: b.chern(),
        base_index,
        cover_index,
        l2_index: l2,
        flat_twist_index,
        delocalized,
        dictionary_defect: defect,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::random_perturbation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn flat_line(g: &Grid, phase: f64) -> BundleSpec {
        let complex = AlgebraSpec::complex();
        let fiber = ProjectiveModule::free(&complex, 1).unwrap();
        let u = ModuleMap::diagonal(&AlgebraElement::scalar(&complex, Complex64::from_polar(1.0, 2.0 * PI * phase)), 1).unwrap();
        flat_bundle(g, &Monodromy::new(&fiber, u, ModuleMap::identity(&complex, 1).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn deck_action_is_free_and_transitive() {
        let c = CoverSpec::cyclic(&Grid::torus(8).unwrap(), 3).unwrap();
        for p in c.fundamental_domain() {
            let orbit: Vec<usize> = (0..3).map(|g| c.deck(g, p)).collect();
            let mut sorted = orbit.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 3);
            assert!(orbit.iter().all(|&q| c.project(q) == c.project(p)));
        }
        let cover_pts = c.cover_grid().len();
        assert_eq!(cover_pts, 3 * c.base_grid().len());
    }

    #[test]
    fn config_parsing() {
        let g = Grid::torus(8).unwrap();
        let cfg: CoverConfig = serde_json::from_str(r#"{"group":"Z/3","axis":"x"}"#).unwrap();
        assert_eq!(CoverSpec::from_config(&g, &cfg).unwrap().k(), 3);
        let y = CoverConfig { group: "Z/2".into(), axis: "y".into() };
        assert!(matches!(CoverSpec::from_config(&g, &y), Err(Error::Unsupported(_))));
        let s3 = CoverConfig { group: "S3".into(), axis: "x".into() };
        assert!(matches!(CoverSpec::from_config(&g, &s3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn trivial_cover_lift_is_identity() {
        let g = Grid::torus(8).unwrap();
        let b = BundleSpec::line(&g, 1).unwrap();
        let tau = TraceFunctional::normalized(b.owner());
        let op = assemble_dolbeault(&b, &tau).unwrap();
        let c = CoverSpec::cyclic(&g, 1).unwrap();
        let lifted = lift_operator(&op, &c).unwrap();
        assert!(linalg::max_abs(&(lifted.matrix() - op.matrix())) < 1e-14);
        let d = dictionary(&c, &b).unwrap();
        assert!(linalg::max_abs(&(&d.matrix - CMat::identity(g.len(), g.len()))) < 1e-14);
    }

    #[test]
    fn lift_commutes_with_deck_and_restricts() {
        let g = Grid::torus(8).unwrap();
        let b = flat_line(&g, 0.3).perturbed(&random_perturbation(&flat_line(&g, 0.3), 2, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()).unwrap();
        let u = Complex64::from_polar(1.0, 2.0 * PI * 0.3);
        let tau = TraceFunctional::normalized(b.owner());
        let op = assemble_dolbeault(&b, &tau).unwrap();
        let c = CoverSpec::cyclic(&g, 3).unwrap();
        let lifted = lift_operator(&op, &c).unwrap();
        let dm = lifted.matrix();
        let t = deck_apply(&c, u, 1, &CMat::identity(dm.nrows(), dm.nrows()));
        assert!(linalg::max_abs(&(linalg::matmul(&t, dm) - linalg::matmul(dm, &t))) < 1e-12);
        // a base section extends equivariantly; D̃ on the extension restricts to D
        let mut r = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        let s = CMat::from_fn(g.len(), 1, |_, _| Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)));
        let mut ext = CMat::zeros(c.cover_grid().len(), 1);
        for q in 0..c.cover_grid().len() {
            let j = q / g.len();
            ext[(q, 0)] = s[(c.project(q), 0)] * u.powi(j as i32);
        }
        let lhs = linalg::matmul(dm, &ext);
        let rhs = linalg::matmul(op.matrix(), &s);
        let err = c.fundamental_domain().map(|p| (lhs[(p, 0)] - rhs[(p, 0)]).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err:.3e}");
    }

    #[test]
    fn dictionary_conjugates_lift_to_twist() {
        let g = Grid::torus(8).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for (k, chern) in [(2, 1), (3, -1), (4, 0)] {
            let base = BundleSpec::line(&g, chern).unwrap();
            let b = base.perturbed(&random_perturbation(&base, 2, 0.2, &mut r).unwrap()).unwrap();
            let c = CoverSpec::cyclic(&g, k).unwrap();
            let d = dictionary(&c, &b).unwrap();
            assert!(d.unitarity_defect() < 1e-12);
            let tau = TraceFunctional::normalized(b.owner());
            let lifted = lift_operator(&assemble_dolbeault(&b, &tau).unwrap(), &c).unwrap();
            let a = d.twisted.owner().clone();
            let twist = assemble_dolbeault(&d.twisted, &TraceFunctional::normalized(&a)).unwrap();
            let defect = d.conjugation_defect(lifted.matrix(), twist.matrix());
            assert!(defect < 1e-10, "k = {k}: {defect:.3e}");
        }
    }

    #[test]
    fn flat_lift_splits_over_characters() {
        let g = Grid::torus(8).unwrap();
        let b = flat_line(&g, 0.0);
        let c = CoverSpec::cyclic(&g, 2).unwrap();
        let d = dictionary(&c, &b).unwrap();
        let tau = TraceFunctional::normalized(b.owner());
        let lifted = lift_operator(&assemble_dolbeault(&b, &tau).unwrap(), &c).unwrap();
        let conj = linalg::matmul(&linalg::matmul(&d.matrix, lifted.matrix()), &d.matrix.adjoint());
        let mut kernel_sum = 0;
        for ch in 0..2 {
            for other in 0..2 {
                if other != ch {
                    let off = (0..g.len())
                        .flat_map(|p| (0..g.len()).map(move |q| (p, q)))
                        .map(|(p, q)| conj[(p * 2 + ch, q * 2 + other)].norm())
                        .fold(0.0, f64::max);
                    assert!(off < 1e-12);
                }
            }
            let phase = ch as f64 / 2.0;
            let line = assemble_dolbeault(&flat_line(&g, phase), &tau).unwrap();
            kernel_sum += kernel_data(&line, None).unwrap().kernel.ncols();
        }
        assert_eq!(kernel_data(&lifted, None).unwrap().kernel.ncols(), kernel_sum);
    }

    #[test]
    fn delocalized_trace_of_flat_kernel() {
        // u = e^{2πi/3}: the cover twist is trivial and the kernel is the constants,
        // on which T_g acts by u^{-g}, so the kernel at (x, g·x) carries u^g
        let g = Grid::torus(8).unwrap();
        let b = flat_line(&g, 1.0 / 3.0);
        let u = Complex64::from_polar(1.0, 2.0 * PI / 3.0);
        let c = CoverSpec::cyclic(&g, 3).unwrap();
        let tau = TraceFunctional::normalized(b.owner());
        let cover_kd = kernel_data(&lift_operator(&assemble_dolbeault(&b, &tau).unwrap(), &c).unwrap(), None).unwrap();
        assert_eq!(cover_kd.kernel.ncols(), 1);
        let d = dictionary(&c, &b).unwrap();
        let a = d.twisted.owner().clone();
        let twist = assemble_dolbeault(&d.twisted, &TraceFunctional::normalized(&a)).unwrap();
        let twist_kd = kernel_data(&twist, None).unwrap();
        for h in 0..3 {
            let cover = fundamental_trace(&c, u, &cover_kd.kernel, h);
            assert!((cover - u.powi(h as i32) / 3.0).norm() < 1e-12, "g = {h}: {cover}");
            let tg = TraceFunctional::delocalized_trace(&a, h).unwrap();
            let (base, _) = spectral::index_dimensions(&twist, &twist_kd, &tg).unwrap();
            assert!((base.0[0] - cover).norm() < 1e-12, "g = {h}: {} vs {cover}", base.0[0]);
        }
    }

    #[test]
    fn atiyah_identity_small() {
        let g = Grid::torus(12).unwrap();
        for c in [-1, 0, 2] {
            let rep = atiyah_check(&BundleSpec::line(&g, c).unwrap(), 2).unwrap();
            assert_eq!(rep.base_index.round() as i64, c);
            assert!(rep.residual < 1e-6, "{rep:?}");
            assert!(rep.delocalized_residual() < 1e-6);
            assert!(rep.delocalized_agreement() < 1e-8);
        }
    }

    #[test]
    fn roundtrip_random_sections() {
        let g = Grid::torus(8).unwrap();
        let c = CoverSpec::cyclic(&g, 3).unwrap();
        let d = dictionary(&c, &flat_line(&g, 0.2)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let s = CMat::from_fn(c.cover_grid().len(), 2, |_, _| Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)));
        let back = linalg::ad_mul(&d.matrix, &linalg::matmul(&d.matrix, &s));
        assert!(linalg::max_abs(&(back - &s)) < 1e-12);
    }
}
