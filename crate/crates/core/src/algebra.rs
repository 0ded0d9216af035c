//! Finite-dimensional C*-algebras `A = ⊕ M_{n_i}(ℂ)` and group algebras `ℂΓ`.
//!
//! Elements are stored blockwise. Abelian group algebras are diagonalized by
//! the character table (one 1×1 block per character); nonabelian groups are
//! carried in the left regular representation as a single `|Γ|×|Γ|` block
//! whose first column is the coefficient function.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::Schur;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, ONE, ZERO};

/// A finite group given by its multiplication table; element 0 is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteGroup {
    pub label: String,
    table: Vec<Vec<usize>>,
    inverse: Vec<usize>,
    /// Cyclic factors when the group is a product of cyclic groups.
    cyclic_factors: Option<Vec<usize>>,
}

impl FiniteGroup {
    pub fn from_table(label: &str, table: Vec<Vec<usize>>) -> Result<Self> {
        let n = table.len();
        if n == 0 || table.iter().any(|r| r.len() != n || r.iter().any(|&x| x >= n)) {
            return Err(Error::Domain(format!("{label}: malformed multiplication table")));
        }
        if (0..n).any(|g| table[0][g] != g || table[g][0] != g) {
            return Err(Error::Domain(format!("{label}: element 0 must be the identity")));
        }
        let mut inverse = vec![usize::MAX; n];
        for g in 0..n {
            inverse[g] = (0..n)
                .find(|&h| table[g][h] == 0)
                .ok_or_else(|| Error::Domain(format!("{label}: element {g} has no inverse")))?;
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    if table[table[a][b]][c] != table[a][table[b][c]] {
                        return Err(Error::Domain(format!("{label}: table is not associative")));
                    }
                }
            }
        }
        Ok(Self { label: label.to_string(), table, inverse, cyclic_factors: None })
    }

    /// `ℤ/n₁ × … × ℤ/n_r`, elements encoded in mixed radix (first factor fastest).
    pub fn abelian(factors: &[usize]) -> Result<Self> {
        if factors.is_empty() || factors.iter().any(|&k| k == 0) {
            return Err(Error::Domain("cyclic factors must be positive".into()));
        }
        let n: usize = factors.iter().product();
        let digits = |mut g: usize| {
            factors
                .iter()
                .map(|&k| {
                    let d = g % k;
                    g /= k;
                    d
                })
                .collect::<Vec<_>>()
        };
        let encode = |d: &[usize]| {
            let mut g = 0;
            let mut stride = 1;
            for (x, &k) in d.iter().zip(factors) {
                g += (x % k) * stride;
                stride *= k;
            }
            g
        };
        let table: Vec<Vec<usize>> = (0..n)
            .map(|a| {
                let da = digits(a);
                (0..n)
                    .map(|b| {
                        let s: Vec<usize> = da.iter().zip(digits(b)).map(|(x, y)| x + y).collect();
                        encode(&s)
                    })
                    .collect()
            })
            .collect();
        let label = factors.iter().map(|k| format!("Z/{k}")).collect::<Vec<_>>().join(" x ");
        let mut g = Self::from_table(&label, table)?;
        g.cyclic_factors = Some(factors.to_vec());
        Ok(g)
    }

    pub fn cyclic(k: usize) -> Result<Self> {
        Self::abelian(&[k])
    }

    /// Dihedral group of order `2m`: elements `r^a s^b` encoded as `a + m·b`.
    pub fn dihedral(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain("dihedral group needs m ≥ 2".into()));
        }
        let n = 2 * m;
        let table = (0..n)
            .map(|x| {
                let (a1, b1) = (x % m, x / m);
                (0..n)
                    .map(|y| {
                        let (a2, b2) = (y % m, y / m);
                        // r^a1 s^b1 r^a2 s^b2 = r^(a1 ± a2) s^(b1+b2)
                        let a = if b1 == 0 { (a1 + a2) % m } else { (a1 + m - a2) % m };
                        a + m * ((b1 + b2) % 2)
                    })
                    .collect()
            })
            .collect();
        Self::from_table(&format!("D{m}"), table)
    }

    /// Parses `Z/k`, `Z/a x Z/b`, `D<m>` or `S3`.
    pub fn parse(label: &str) -> Result<Self> {
        let s: String = label.chars().filter(|c| !c.is_whitespace()).collect();
        if s == "S3" {
            return Self::dihedral(3);
        }
        if let Some(m) = s.strip_prefix('D') {
            let m = m.parse().map_err(|_| Error::Domain(format!("bad group label {label:?}")))?;
            return Self::dihedral(m);
        }
        let factors = s
            .split(['x', '×'])
            .map(|f| {
                f.strip_prefix("Z/")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Domain(format!("bad group label {label:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::abelian(&factors)
    }

    pub fn order(&self) -> usize {
        self.table.len()
    }

    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.table[a][b]
    }

    pub fn inv(&self, a: usize) -> usize {
        self.inverse[a]
    }

    pub fn is_abelian(&self) -> bool {
        let n = self.order();
        (0..n).all(|a| (0..n).all(|b| self.table[a][b] == self.table[b][a]))
    }

    pub fn conjugacy_class(&self, g: usize) -> Vec<usize> {
        let mut cls: Vec<usize> = (0..self.order())
            .map(|h| self.mul(self.mul(h, g), self.inv(h)))
            .collect();
        cls.sort_unstable();
        cls.dedup();
        cls
    }

    /// Character table of an abelian group: `chars[j][g] = χ_j(g)`.
    fn characters(&self) -> Option<Vec<Vec<Complex64>>> {
        let f = self.cyclic_factors.as_ref()?;
        let n = self.order();
        let digits = |mut g: usize| {
            f.iter()
                .map(|&k| {
                    let d = g % k;
                    g /= k;
                    d
                })
                .collect::<Vec<_>>()
        };
        Some(
            (0..n)
                .map(|j| {
                    let dj = digits(j);
                    (0..n)
                        .map(|g| {
                            let dg = digits(g);
                            let phase: f64 = dj
                                .iter()
                                .zip(&dg)
                                .zip(f)
                                .map(|((a, b), &k)| (a * b) as f64 / k as f64)
                                .sum();
                            Complex64::from_polar(1.0, 2.0 * PI * phase)
                        })
                        .collect()
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
enum GroupModel {
    /// Diagonalized by characters; `chars[j][g]`.
    Fourier(Vec<Vec<Complex64>>),
    /// Left regular representation.
    Regular,
}

#[derive(Clone, Debug, PartialEq)]
struct GroupData {
    group: FiniteGroup,
    model: GroupModel,
}

/// The shape of `A`: matrix block sizes, plus the group when `A = ℂΓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgebraSpec {
    blocks: Vec<usize>,
    group: Option<GroupData>,
}

/// Scenario-level description: `{"blocks":[2,1]}` or `{"group":"Z/3"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum AlgebraConfig {
    Blocks { blocks: Vec<usize> },
    Group { group: String },
}

impl AlgebraSpec {
    pub fn matrix_blocks(blocks: &[usize]) -> Result<Arc<Self>> {
        if blocks.is_empty() || blocks.iter().any(|&n| n == 0) {
            return Err(Error::Domain(format!("invalid block sizes {blocks:?}")));
        }
        Ok(Arc::new(Self { blocks: blocks.to_vec(), group: None }))
    }

    pub fn complex() -> Arc<Self> {
        Self::matrix_blocks(&[1]).unwrap()
    }

    pub fn group_algebra(group: FiniteGroup) -> Arc<Self> {
        let n = group.order();
        match group.characters() {
            Some(chars) => Arc::new(Self {
                blocks: vec![1; n],
                group: Some(GroupData { group, model: GroupModel::Fourier(chars) }),
            }),
            None => Arc::new(Self {
                blocks: vec![n],
                group: Some(GroupData { group, model: GroupModel::Regular }),
            }),
        }
    }

    pub fn from_config(c: &AlgebraConfig) -> Result<Arc<Self>> {
        match c {
            AlgebraConfig::Blocks { blocks } => Self::matrix_blocks(blocks),
            AlgebraConfig::Group { group } => Ok(Self::group_algebra(FiniteGroup::parse(group)?)),
        }
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    /// Complex dimension `Σ nᵢ²` (equals `|Γ|` for group algebras).
    pub fn dim(&self) -> usize {
        match &self.group {
            Some(g) => g.group.order(),
            None => self.blocks.iter().map(|n| n * n).sum(),
        }
    }

    pub fn group(&self) -> Option<&FiniteGroup> {
        self.group.as_ref().map(|g| &g.group)
    }

    /// True when the blocks are the full matrix algebras `M_{nᵢ}` of `A`, so
    /// that module and GNS constructions may work block by block.
    pub fn is_block_model(&self) -> bool {
        !matches!(self.group, Some(GroupData { model: GroupModel::Regular, .. }))
    }

    pub fn require_block_model(&self) -> Result<()> {
        if self.is_block_model() {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "module constructions over the nonabelian group algebra of {}",
                self.group().map(|g| g.label.as_str()).unwrap_or("?")
            )))
        }
    }

    pub fn describe(&self) -> String {
        match self.group() {
            Some(g) => format!("C[{}]", g.label),
            None => self
                .blocks
                .iter()
                .map(|n| if *n == 1 { "C".to_string() } else { format!("M{n}(C)") })
                .collect::<Vec<_>>()
                .join(" + "),
        }
    }
}

fn same_owner(a: &AlgebraSpec, b: &AlgebraSpec) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::OwnerMismatch(format!("{} vs {}", a.describe(), b.describe())))
    }
}

pub(crate) fn check_owner(a: &Arc<AlgebraSpec>, b: &Arc<AlgebraSpec>) -> Result<()> {
    if Arc::ptr_eq(a, b) {
        return Ok(());
    }
    same_owner(a, b)
}

/// A member of `A`, stored blockwise.
#[derive(Clone, Debug)]
pub struct AlgebraElement {
    owner: Arc<AlgebraSpec>,
    blocks: Vec<CMat>,
}

impl AlgebraElement {
    pub fn from_blocks(owner: &Arc<AlgebraSpec>, blocks: Vec<CMat>) -> Result<Self> {
        if blocks.len() != owner.k()
            || blocks.iter().zip(owner.blocks()).any(|(b, &n)| b.shape() != (n, n))
        {
            return Err(Error::Shape(format!("blocks do not match {}", owner.describe())));
        }
        Ok(Self { owner: owner.clone(), blocks })
    }

    pub fn zero(owner: &Arc<AlgebraSpec>) -> Self {
        Self { owner: owner.clone(), blocks: owner.blocks().iter().map(|&n| CMat::zeros(n, n)).collect() }
    }

    pub fn identity(owner: &Arc<AlgebraSpec>) -> Self {
        Self { owner: owner.clone(), blocks: owner.blocks().iter().map(|&n| CMat::identity(n, n)).collect() }
    }

    pub fn scalar(owner: &Arc<AlgebraSpec>, z: Complex64) -> Self {
        Self::identity(owner).scale(z)
    }

    /// Matrix unit `e_{rs}` in block `i`.
    pub fn matrix_unit(owner: &Arc<AlgebraSpec>, i: usize, r: usize, s: usize) -> Self {
        let mut a = Self::zero(owner);
        a.blocks[i][(r, s)] = ONE;
        a
    }

    /// Group algebra element from its coefficient function `f: Γ → ℂ`.
    pub fn from_coeffs(owner: &Arc<AlgebraSpec>, f: &[Complex64]) -> Result<Self> {
        let gd = owner
            .group
            .as_ref()
            .ok_or_else(|| Error::Domain("coefficient functions need a group algebra".into()))?;
        let n = gd.group.order();
        if f.len() != n {
            return Err(Error::Shape(format!("expected {n} coefficients, got {}", f.len())));
        }
        let blocks = match &gd.model {
            GroupModel::Fourier(chars) => chars
                .iter()
                .map(|chi| {
                    let v: Complex64 = chi.iter().zip(f).map(|(c, x)| c * x).sum();
                    CMat::from_element(1, 1, v)
                })
                .collect(),
            GroupModel::Regular => {
                let g = &gd.group;
                vec![CMat::from_fn(n, n, |h, k| f[g.mul(h, g.inv(k))])]
            }
        };
        Ok(Self { owner: owner.clone(), blocks })
    }

    /// Point mass `δ_g`.
    pub fn delta(owner: &Arc<AlgebraSpec>, g: usize) -> Result<Self> {
        let n = owner.group().map(|g| g.order()).unwrap_or(0);
        if g >= n {
            return Err(Error::Domain(format!("group element {g} out of range")));
        }
        let mut f = vec![ZERO; n];
        f[g] = ONE;
        Self::from_coeffs(owner, &f)
    }

    /// Coefficient function of a group algebra element.
    pub fn coeffs(&self) -> Result<Vec<Complex64>> {
        let gd = self
            .owner
            .group
            .as_ref()
            .ok_or_else(|| Error::Domain("coefficient functions need a group algebra".into()))?;
        let n = gd.group.order();
        Ok(match &gd.model {
            GroupModel::Fourier(chars) => (0..n)
                .map(|g| {
                    chars.iter().zip(&self.blocks).map(|(chi, b)| chi[g].conj() * b[(0, 0)]).sum::<Complex64>()
                        / n as f64
                })
                .collect(),
            GroupModel::Regular => self.blocks[0].column(0).iter().copied().collect(),
        })
    }

    pub fn random<R: Rng>(owner: &Arc<AlgebraSpec>, rng: &mut R) -> Self {
        match owner.group.as_ref().map(|g| &g.model) {
            Some(GroupModel::Regular) => {
                let f: Vec<Complex64> = (0..owner.dim())
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect();
                Self::from_coeffs(owner, &f).unwrap()
            }
            _ => Self {
                owner: owner.clone(),
                blocks: owner
                    .blocks()
                    .iter()
                    .map(|&n| {
                        CMat::from_fn(n, n, |_, _| {
                            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                        })
                    })
                    .collect(),
            },
        }
    }

    pub fn owner(&self) -> &Arc<AlgebraSpec> {
        &self.owner
    }

    pub fn blocks(&self) -> &[CMat] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &CMat {
        &self.blocks[i]
    }

    pub fn mul(&self, b: &Self) -> Result<Self> {
        check_owner(&self.owner, &b.owner)?;
        Ok(Self {
            owner: self.owner.clone(),
            blocks: self.blocks.iter().zip(&b.blocks).map(|(x, y)| x * y).collect(),
        })
    }

    pub fn add(&self, b: &Self) -> Result<Self> {
        check_owner(&self.owner, &b.owner)?;
        Ok(Self {
            owner: self.owner.clone(),
            blocks: self.blocks.iter().zip(&b.blocks).map(|(x, y)| x + y).collect(),
        })
    }

    pub fn sub(&self, b: &Self) -> Result<Self> {
        self.add(&b.scale(-ONE))
    }

    pub fn scale(&self, z: Complex64) -> Self {
        Self { owner: self.owner.clone(), blocks: self.blocks.iter().map(|x| x * z).collect() }
    }

    pub fn adjoint(&self) -> Self {
        Self { owner: self.owner.clone(), blocks: self.blocks.iter().map(|x| x.adjoint()).collect() }
    }

    /// C*-norm: the largest block operator norm.
    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(linalg::op_norm).fold(0.0, f64::max)
    }

    /// Largest entry modulus over all blocks.
    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(linalg::max_abs).fold(0.0, f64::max)
    }

    pub fn normality_defect(&self) -> f64 {
        self.blocks
            .iter()
            .map(|x| linalg::op_norm(&(x * x.adjoint() - x.adjoint() * x)))
            .fold(0.0, f64::max)
    }

    /// Applies `f` to the spectrum of a normal element.
    pub fn spectral_calculus(&self, f: impl Fn(Complex64) -> Complex64) -> Result<Self> {
        let defect = self.normality_defect();
        if defect >= 1e-10 {
            return Err(Error::Precondition(format!("element is not normal (‖aa*−a*a‖ = {defect:.3e})")));
        }
        let blocks = self.blocks.iter().map(|x| normal_calculus(x, &f)).collect();
        let out = Self { owner: self.owner.clone(), blocks };
        // Regular-representation results are projected back onto λ(ℂΓ).
        if let Some(GroupData { model: GroupModel::Regular, .. }) = &self.owner.group {
            return Self::from_coeffs(&self.owner, &out.coeffs()?);
        }
        Ok(out)
    }

    /// Block-diagonal complex matrix `⊕ aᵢ`.
    pub fn to_block_diag(&self) -> CMat {
        let m: usize = self.owner.blocks().iter().sum();
        let mut out = CMat::zeros(m, m);
        let mut o = 0;
        for b in &self.blocks {
            let n = b.nrows();
            out.view_mut((o, o), (n, n)).copy_from(b);
            o += n;
        }
        out
    }
}

/// `f` applied to the Schur diagonal of a (near-)normal matrix.
pub(crate) fn normal_calculus(x: &CMat, f: &impl Fn(Complex64) -> Complex64) -> CMat {
    let n = x.nrows();
    if n == 1 {
        return CMat::from_element(1, 1, f(x[(0, 0)]));
    }
    let (q, t) = Schur::new(x.clone()).unpack();
    let mut d = CMat::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = f(t[(i, i)]);
    }
    &q * d * q.adjoint()
}

/// Value of a trace: one complex number for scalar kinds, `k` for center-valued.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZValue(pub Vec<Complex64>);

impl ZValue {
    pub fn scalar(z: Complex64) -> Self {
        Self(vec![z])
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![ZERO; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add(&self, o: &Self) -> Self {
        Self(self.0.iter().zip(&o.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self(self.0.iter().zip(&o.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, z: Complex64) -> Self {
        Self(self.0.iter().map(|a| a * z).collect())
    }

    /// Max-modulus distance.
    pub fn dist(&self, o: &Self) -> f64 {
        if self.0.len() != o.0.len() {
            return f64::INFINITY;
        }
        self.sub(o).max_abs()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn rounded(&self) -> Self {
        Self(self.0.iter().map(|z| Complex64::new(z.re.round(), z.im.round())).collect())
    }

    /// Distance to the nearest Gaussian-integer tuple.
    pub fn integrality_residual(&self) -> f64 {
        self.dist(&self.rounded())
    }
}

impl fmt::Display for ZValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|z| if z.im.abs() < 1e-12 { format!("{:.6}", z.re) } else { format!("{:.6}{:+.6}i", z.re, z.im) })
            .collect();
        if parts.len() == 1 {
            write!(f, "{}", parts[0])
        } else {
            write!(f, "({})", parts.join(", "))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceKind {
    /// `Σ wᵢ Tr(aᵢ)`.
    Scalar { weights: Vec<f64> },
    /// `(Tr(aᵢ)/nᵢ)ᵢ`.
    CenterValued,
    /// `f ↦ Σ_{γ∈[g]} f(γ)`.
    Delocalized { g: usize, class: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct TraceFunctional {
    owner: Arc<AlgebraSpec>,
    kind: TraceKind,
}

impl TraceFunctional {
    pub fn scalar(owner: &Arc<AlgebraSpec>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != owner.k() {
            return Err(Error::Shape(format!("{} weights for {} blocks", weights.len(), owner.k())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("trace weights must be nonnegative".into()));
        }
        Ok(Self { owner: owner.clone(), kind: TraceKind::Scalar { weights } })
    }

    /// Faithful normalized trace with weights `1/Σnⱼ` on every block
    /// (the canonical trace `f ↦ f(e)` on group algebras).
    pub fn normalized(owner: &Arc<AlgebraSpec>) -> Self {
        let total: usize = owner.blocks().iter().sum();
        let w = match owner.group.as_ref().map(|g| &g.model) {
            Some(GroupModel::Regular) => vec![1.0 / owner.dim() as f64],
            _ => vec![1.0 / total as f64; owner.k()],
        };
        Self { owner: owner.clone(), kind: TraceKind::Scalar { weights: w } }
    }

    pub fn center_valued(owner: &Arc<AlgebraSpec>) -> Self {
        Self { owner: owner.clone(), kind: TraceKind::CenterValued }
    }

    pub fn canonical_group_trace(owner: &Arc<AlgebraSpec>) -> Result<Self> {
        if owner.group().is_none() {
            return Err(Error::Domain("canonical group trace needs a group algebra".into()));
        }
        Ok(Self::normalized(owner))
    }

    pub fn delocalized_trace(owner: &Arc<AlgebraSpec>, g: usize) -> Result<Self> {
        let grp = owner
            .group()
            .ok_or_else(|| Error::Domain("delocalized trace needs a group algebra".into()))?;
        if g >= grp.order() {
            return Err(Error::Domain(format!("{g} is not an element of {}", grp.label)));
        }
        Ok(Self { owner: owner.clone(), kind: TraceKind::Delocalized { g, class: grp.conjugacy_class(g) } })
    }

    pub fn owner(&self) -> &Arc<AlgebraSpec> {
        &self.owner
    }

    pub fn kind(&self) -> &TraceKind {
        &self.kind
    }

    /// Number of complex components of a value.
    pub fn value_len(&self) -> usize {
        match self.kind {
            TraceKind::CenterValued => self.owner.k(),
            _ => 1,
        }
    }

    pub fn is_positive(&self) -> bool {
        match &self.kind {
            TraceKind::Scalar { weights } => weights.iter().all(|w| *w >= 0.0),
            TraceKind::CenterValued => true,
            TraceKind::Delocalized { g, .. } => *g == 0,
        }
    }

    pub fn is_faithful(&self) -> bool {
        match &self.kind {
            TraceKind::Scalar { weights } => weights.iter().all(|w| *w > 0.0),
            TraceKind::CenterValued => true,
            TraceKind::Delocalized { g, .. } => *g == 0,
        }
    }

    pub fn is_normalized(&self) -> bool {
        match &self.kind {
            TraceKind::Scalar { weights } => {
                let s: f64 = weights.iter().zip(self.owner.blocks()).map(|(w, &n)| w * n as f64).sum();
                (s - 1.0).abs() < 1e-12
            }
            TraceKind::CenterValued => true,
            TraceKind::Delocalized { g, .. } => *g == 0,
        }
    }

    /// Complex weights `cᵢ` with `t(a) = Σ cᵢ Tr(aᵢ)` in the block model,
    /// one weight vector per value component.
    pub fn block_weights(&self) -> Result<Vec<Vec<Complex64>>> {
        let k = self.owner.k();
        match &self.kind {
            TraceKind::Scalar { weights } => Ok(vec![weights.iter().map(|&w| Complex64::new(w, 0.0)).collect()]),
            TraceKind::CenterValued => Ok((0..k)
                .map(|i| {
                    (0..k)
                        .map(|j| if i == j { Complex64::new(1.0 / self.owner.blocks()[i] as f64, 0.0) } else { ZERO })
                        .collect()
                })
                .collect()),
            TraceKind::Delocalized { class, .. } => match self.owner.group.as_ref().map(|g| &g.model) {
                Some(GroupModel::Fourier(chars)) => {
                    let n = chars.len() as f64;
                    Ok(vec![chars
                        .iter()
                        .map(|chi| class.iter().map(|&h| chi[h].conj()).sum::<Complex64>() / n)
                        .collect()])
                }
                _ => Err(Error::Unsupported(
                    "delocalized traces of nonabelian groups are not block functionals".into(),
                )),
            },
        }
    }

    /// `t` applied to a tuple of unnormalized block traces (the model of `A/[A,A]`).
    pub fn apply_block_traces(&self, ev: &[Complex64]) -> Result<ZValue> {
        if ev.len() != self.owner.k() {
            return Err(Error::Shape(format!("{} block traces for {} blocks", ev.len(), self.owner.k())));
        }
        let w = self.block_weights()?;
        Ok(ZValue(w.iter().map(|wi| wi.iter().zip(ev).map(|(a, b)| a * b).sum()).collect()))
    }

    pub fn apply(&self, a: &AlgebraElement) -> Result<ZValue> {
        check_owner(&self.owner, a.owner())?;
        if let TraceKind::Delocalized { class, .. } = &self.kind {
            let f = a.coeffs()?;
            return Ok(ZValue::scalar(class.iter().map(|&h| f[h]).sum()));
        }
        let ev: Vec<Complex64> = a.blocks().iter().map(|b| b.trace()).collect();
        self.apply_block_traces(&ev)
    }
}
