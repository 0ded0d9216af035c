//! Matrix-valued differential forms on discretized `S¹` and `T²`.
//!
//! Derivatives are spectral. A field may be quasi-periodic: it then carries a
//! [`Twist`] and is differentiated after removing the automorphy factor along
//! each line, with every Fourier mode keeping its exact twisted wavenumber.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manifold {
    S1,
    T2,
}

impl Manifold {
    pub fn dim(self) -> usize {
        match self {
            Manifold::S1 => 1,
            Manifold::T2 => 2,
        }
    }
}

/// Uniform periodic grid. The x-circle may have integer length `lx > 1`
/// (a cyclic cover); spacing is `1/n` in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub manifold: Manifold,
    pub n: usize,
    pub lx: usize,
}

impl Grid {
    pub fn new(manifold: Manifold, n: usize) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::Domain(format!("grid resolution must be even and ≥ 8, got {n}")));
        }
        Ok(Self { manifold, n, lx: 1 })
    }

    pub fn torus(n: usize) -> Result<Self> {
        Self::new(Manifold::T2, n)
    }

    pub fn circle(n: usize) -> Result<Self> {
        Self::new(Manifold::S1, n)
    }

    /// The `k`-fold cover along x, as a grid of x-length `k·lx`.
    pub fn cover(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("cover degree must be positive".into()));
        }
        Ok(Self { manifold: self.manifold, n: self.n, lx: self.lx * k })
    }

    pub fn dim(&self) -> usize {
        self.manifold.dim()
    }

    pub fn nx(&self) -> usize {
        self.n * self.lx
    }

    pub fn ny(&self) -> usize {
        match self.manifold {
            Manifold::S1 => 1,
            Manifold::T2 => self.n,
        }
    }

    pub fn len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Point index, x-major.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny() + iy
    }

    pub fn coords(&self, p: usize) -> (f64, f64) {
        let (ix, iy) = (p / self.ny(), p % self.ny());
        (ix as f64 * self.h(), iy as f64 * self.h())
    }

    /// Number of components of a form of the given degree.
    pub fn components(&self, degree: usize) -> usize {
        match (self.manifold, degree) {
            (_, 0) => 1,
            (Manifold::S1, 1) => 1,
            (Manifold::T2, 1) => 2,
            (Manifold::T2, 2) => 1,
            _ => 0,
        }
    }

    /// Integration weight of one cell.
    pub fn cell(&self) -> f64 {
        self.h().powi(self.dim() as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TwistKind {
    /// `F ↦ g F` (sections).
    Left,
    /// `F ↦ g F g⁻¹` (endomorphism-valued fields).
    Conjugation,
}

/// Automorphy data: `F(x+lx, y) = e^{2πi Hx}·F` and
/// `F(x, y+1) = e^{2πi(Hy − c·frac(x))}·F`, acting as `kind` prescribes.
/// `Hx`, `Hy` are commuting Hermitian generators; the Chern term is central.
#[derive(Clone, Debug)]
pub struct Twist {
    pub kind: TwistKind,
    pub chern: i64,
    pub hx: CMat,
    pub hy: CMat,
}

impl Twist {
    pub fn dim(&self) -> usize {
        self.hx.nrows()
    }

    pub fn with_kind(&self, kind: TwistKind) -> Self {
        Self { kind, ..self.clone() }
    }

    fn same_data(&self, o: &Self) -> bool {
        self.chern == o.chern && linalg::max_abs(&(&self.hx - &o.hx)) < 1e-12 && linalg::max_abs(&(&self.hy - &o.hy)) < 1e-12
    }

    /// Eigen-decomposition of a generator as `(phases, eigenvectors)`.
    fn eig(h: &CMat) -> (Vec<f64>, CMat) {
        linalg::eigh(h).expect("generator eigensolve")
    }
}

pub(crate) fn twist_eigs(t: &Twist) -> ((Vec<f64>, CMat), (Vec<f64>, CMat)) {
    (Twist::eig(&t.hx), Twist::eig(&t.hy))
}

/// One spectral differentiation along a line of `m` samples over length
/// `period`, for a field with `f(x+period) = e^{2πiθ} f(x)`.
pub struct LineDerivative {
    m: usize,
    period: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl LineDerivative {
    pub fn new(m: usize, period: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self { m, period, fwd: planner.plan_fft_forward(m), inv: planner.plan_fft_inverse(m) }
    }

    /// Signed wavenumber of FFT slot `j`; the Nyquist slot is `−m/2`.
    fn wavenumber(&self, j: usize) -> f64 {
        if j < self.m / 2 {
            j as f64
        } else {
            j as f64 - self.m as f64
        }
    }

    pub fn apply(&self, f: &mut [Complex64], theta: f64) {
        let m = self.m;
        let step = self.period / m as f64;
        let phase = |s: usize, sign: f64| Complex64::from_polar(1.0, sign * 2.0 * PI * theta * (s as f64 * step) / self.period);
        for (s, z) in f.iter_mut().enumerate() {
            *z *= phase(s, -1.0);
        }
        self.fwd.process(f);
        for (j, z) in f.iter_mut().enumerate() {
            let kk = self.wavenumber(j) + theta;
            *z *= Complex64::new(0.0, 2.0 * PI * kk / self.period) / m as f64;
        }
        self.inv.process(f);
        for (s, z) in f.iter_mut().enumerate() {
            *z *= phase(s, 1.0);
        }
    }

    /// Dense matrix of the twisted derivative.
    pub fn matrix(&self, theta: f64) -> CMat {
        let m = self.m;
        let mut out = CMat::zeros(m, m);
        let mut col = vec![ZERO; m];
        for j in 0..m {
            col.iter_mut().for_each(|z| *z = ZERO);
            col[j] = Complex64::new(1.0, 0.0);
            self.apply(&mut col, theta);
            for i in 0..m {
                out[(i, j)] = col[i];
            }
        }
        out
    }
}

/// Periodic trigonometric polynomial `Σ c_k e^{2πi(kx·x + ky·y)}`.
#[derive(Clone, Debug)]
pub struct TrigPoly {
    terms: Vec<(f64, f64, Complex64)>,
}

impl TrigPoly {
    /// Random coefficients in the unit square for all modes `|kx|, |ky| < kmax`
    /// (`ky = 0` only on `S¹`).
    pub fn random<R: rand::Rng>(rng: &mut R, manifold: Manifold, kmax: i64) -> Self {
        let ky_max = if manifold == Manifold::S1 { 1 } else { kmax };
        let mut terms = Vec::new();
        for kx in -kmax + 1..kmax {
            for ky in -ky_max + 1..ky_max {
                terms.push((kx as f64, ky as f64, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
            }
        }
        Self { terms }
    }

    pub fn eval(&self, x: f64, y: f64) -> Complex64 {
        self.terms.iter().map(|(kx, ky, c)| c * Complex64::from_polar(1.0, 2.0 * PI * (kx * x + ky * y))).sum()
    }
}

/// Scalar theta function with `θ(x+1,y) = θ(x,y)` and
/// `θ(x,y+1) = e^{−2πicx}·θ(x,y)`, for `c ≠ 0`: a smooth section of the
/// degree-`c` line bundle in the quasi-periodic gauge.
pub fn theta(c: i64, x: f64, y: f64) -> Complex64 {
    let cf = c as f64;
    let k0 = (cf * x).round() as i64;
    (k0 - 12..=k0 + 12)
        .map(|k| {
            let t = cf * x - k as f64;
            Complex64::from_polar((-0.5 * t * t).exp(), 2.0 * PI * (k as f64 - cf * x) * y)
        })
        .sum()
}

/// A differential form whose coefficients are `rows×cols` complex matrices.
#[derive(Clone, Debug)]
pub struct MatrixForm {
    grid: Grid,
    degree: usize,
    rows: usize,
    cols: usize,
    comps: Vec<Vec<CMat>>,
    twist: Option<Twist>,
}

impl MatrixForm {
    pub fn zero(grid: &Grid, degree: usize, rows: usize, cols: usize) -> Result<Self> {
        if degree > grid.dim() {
            return Err(Error::Domain(format!("degree {degree} exceeds dimension {}", grid.dim())));
        }
        Ok(Self {
            grid: grid.clone(),
            degree,
            rows,
            cols,
            comps: vec![vec![CMat::zeros(rows, cols); grid.len()]; grid.components(degree)],
            twist: None,
        })
    }

    /// Samples `f(component, x, y)` on the grid.
    pub fn from_fn(
        grid: &Grid,
        degree: usize,
        rows: usize,
        cols: usize,
        f: impl Fn(usize, f64, f64) -> CMat + Sync,
    ) -> Result<Self> {
        let mut out = Self::zero(grid, degree, rows, cols)?;
        for (c, comp) in out.comps.iter_mut().enumerate() {
            comp.par_iter_mut().enumerate().for_each(|(p, m)| {
                let (x, y) = grid.coords(p);
                *m = f(c, x, y);
            });
            if comp.iter().any(|m| m.shape() != (rows, cols)) {
                return Err(Error::Shape(format!("sampler must return {rows}×{cols} matrices")));
            }
        }
        Ok(out)
    }

    pub fn from_components(grid: &Grid, degree: usize, comps: Vec<Vec<CMat>>) -> Result<Self> {
        if degree > grid.dim() || comps.len() != grid.components(degree) {
            return Err(Error::Shape("component count does not match the degree".into()));
        }
        let (rows, cols) = comps.first().and_then(|c| c.first()).map(|m| m.shape()).unwrap_or((0, 0));
        if comps.iter().any(|c| c.len() != grid.len() || c.iter().any(|m| m.shape() != (rows, cols))) {
            return Err(Error::Shape("component fields are not uniform".into()));
        }
        Ok(Self { grid: grid.clone(), degree, rows, cols, comps, twist: None })
    }

    pub fn with_twist(mut self, twist: Option<Twist>) -> Result<Self> {
        if let Some(t) = &twist {
            if t.dim() != self.rows || (t.kind == TwistKind::Conjugation && self.rows != self.cols) {
                return Err(Error::Shape("twist dimension does not match the coefficients".into()));
            }
        }
        self.twist = twist;
        Ok(self)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn twist(&self) -> Option<&Twist> {
        self.twist.as_ref()
    }

    pub fn components(&self) -> &[Vec<CMat>] {
        &self.comps
    }

    pub fn component(&self, c: usize) -> &[CMat] {
        &self.comps[c]
    }

    pub fn at(&self, c: usize, p: usize) -> &CMat {
        &self.comps[c][p]
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().map(linalg::max_abs).fold(0.0, f64::max)
    }

    fn same_frame(&self, o: &Self) -> Result<()> {
        if self.grid != o.grid || self.degree != o.degree || self.shape() != o.shape() {
            return Err(Error::Shape("forms live on different grids, degrees or shapes".into()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(&CMat) -> CMat + Sync) -> Self {
        let comps: Vec<Vec<CMat>> = self.comps.iter().map(|c| c.par_iter().map(&f).collect()).collect();
        let (rows, cols) = comps.first().and_then(|c| c.first()).map(|m| m.shape()).unwrap_or(self.shape());
        Self { comps, rows, cols, ..self.clone() }
    }

    fn zip(&self, o: &Self, f: impl Fn(&CMat, &CMat) -> CMat + Sync) -> Result<Self> {
        self.same_frame(o)?;
        let comps = self
            .comps
            .iter()
            .zip(&o.comps)
            .map(|(a, b)| a.par_iter().zip(b.par_iter()).map(|(x, y)| f(x, y)).collect())
            .collect();
        Ok(Self { comps, twist: self.twist.clone().or_else(|| o.twist.clone()), ..self.clone() })
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.zip(o, |a, b| a - b)
    }

    pub fn scale(&self, z: Complex64) -> Self {
        self.map(|a| a * z)
    }

    /// Pointwise adjoint of every component.
    pub fn adjoint(&self) -> Self {
        let mut out = self.map(|a| a.adjoint());
        out.twist = None;
        out
    }

    /// Pointwise `l·F·r` with constant matrices.
    pub fn sandwich(&self, l: &CMat, r: &CMat) -> Self {
        self.map(|a| l * a * r)
    }

    /// Degree-`d` form with one nonzero component.
    pub fn single(grid: &Grid, degree: usize, comp: usize, field: Vec<CMat>) -> Result<Self> {
        let (rows, cols) = field.first().map(|m| m.shape()).unwrap_or((0, 0));
        let mut out = Self::zero(grid, degree, rows, cols)?;
        if comp >= out.comps.len() || field.len() != grid.len() {
            return Err(Error::Shape("bad component or field length".into()));
        }
        out.comps[comp] = field;
        Ok(out)
    }

    fn line_values(&self, c: usize, axis: usize, line: usize, r: usize, s: usize) -> Vec<Complex64> {
        let g = &self.grid;
        match axis {
            0 => (0..g.nx()).map(|ix| self.comps[c][g.index(ix, line)][(r, s)]).collect(),
            _ => (0..g.ny()).map(|iy| self.comps[c][g.index(line, iy)][(r, s)]).collect(),
        }
    }

    /// Partial derivative of one component along `axis` (0 = x, 1 = y).
    pub fn partial(&self, c: usize, axis: usize) -> Result<Vec<CMat>> {
        let g = &self.grid;
        if axis >= g.dim() {
            return Err(Error::Domain("no such coordinate direction".into()));
        }
        // rotate into the eigenbasis of the automorphy generators
        let (basis, phases_x, phases_y, kind) = match &self.twist {
            None => (None, vec![0.0; self.rows], vec![0.0; self.rows], None),
            Some(t) => {
                let ((px, wx), (py, wy)) = twist_eigs(t);
                (Some((wx, wy)), px, py, Some(t.kind))
            }
        };
        let w = basis.as_ref().map(|(wx, wy)| if axis == 0 { wx.clone() } else { wy.clone() });
        let rotated: Vec<CMat> = match (&w, kind) {
            (Some(w), Some(TwistKind::Left)) => self.comps[c].iter().map(|m| w.ad_mul(m)).collect(),
            (Some(w), Some(TwistKind::Conjugation)) => self.comps[c].iter().map(|m| w.ad_mul(m) * w).collect(),
            _ => self.comps[c].clone(),
        };
        let phases = if axis == 0 { &phases_x } else { &phases_y };
        let chern = self.twist.as_ref().map(|t| t.chern).unwrap_or(0) as f64;
        let tmp = Self { comps: vec![rotated], ..self.clone() };
        let (nlines, m, period) = if axis == 0 { (g.ny(), g.nx(), g.lx as f64) } else { (g.nx(), g.ny(), 1.0) };
        let deriv = LineDerivative::new(m, period);
        let mut out = vec![CMat::zeros(self.rows, self.cols); g.len()];
        for line in 0..nlines {
            // y-lines at column `line` carry the central Chern phase −c·frac(x)
            let central = if axis == 1 && kind == Some(TwistKind::Left) {
                let x = line as f64 * g.h();
                -chern * (x - x.floor())
            } else {
                0.0
            };
            for r in 0..self.rows {
                for s in 0..self.cols {
                    let theta = match kind {
                        None => 0.0,
                        Some(TwistKind::Left) => phases[r] + central,
                        Some(TwistKind::Conjugation) => phases[r] - phases[s],
                    };
                    let mut v = tmp.line_values(0, axis, line, r, s);
                    deriv.apply(&mut v, theta);
                    for (t, z) in v.into_iter().enumerate() {
                        let p = if axis == 0 { g.index(t, line) } else { g.index(line, t) };
                        out[p][(r, s)] = z;
                    }
                }
            }
        }
        Ok(match (&w, kind) {
            (Some(w), Some(TwistKind::Left)) => out.iter().map(|m| w * m).collect(),
            (Some(w), Some(TwistKind::Conjugation)) => out.iter().map(|m| w * m * w.adjoint()).collect(),
            _ => out,
        })
    }
}

/// Spectral exterior derivative.
pub fn exterior_d(a: &MatrixForm) -> Result<MatrixForm> {
    let g = a.grid.clone();
    if a.degree >= g.dim() {
        return Err(Error::Domain("exterior derivative of a top-degree form".into()));
    }
    let comps = match a.degree {
        0 => (0..g.dim()).map(|ax| a.partial(0, ax)).collect::<Result<Vec<_>>>()?,
        _ => {
            // d(αx dx + αy dy) = (∂x αy − ∂y αx) dx∧dy
            let dxy = a.partial(1, 0)?;
            let dyx = a.partial(0, 1)?;
            vec![dxy.iter().zip(&dyx).map(|(p, q)| p - q).collect()]
        }
    };
    Ok(MatrixForm { grid: g, degree: a.degree + 1, rows: a.rows, cols: a.cols, comps, twist: a.twist.clone() })
}

fn wedge_twist(a: &Option<Twist>, b: &Option<Twist>) -> Result<Option<Twist>> {
    match (a, b) {
        (None, t) | (t, None) => Ok(t.clone()),
        (Some(x), Some(y)) if x.same_data(y) => match (x.kind, y.kind) {
            (TwistKind::Conjugation, k) => Ok(Some(x.with_kind(k))),
            (TwistKind::Left, TwistKind::Conjugation) => Err(Error::Domain("section ∧ endomorphism is not defined".into())),
            (TwistKind::Left, TwistKind::Left) => Err(Error::Domain("product of two sections is not defined".into())),
        },
        _ => Err(Error::Domain("wedge of fields with different automorphy".into())),
    }
}

/// Pointwise matrix wedge product; for 1-forms
/// `(α∧β)(∂x,∂y) = α(∂x)β(∂y) − α(∂y)β(∂x)`.
pub fn wedge(a: &MatrixForm, b: &MatrixForm) -> Result<MatrixForm> {
    if a.grid != b.grid {
        return Err(Error::Shape("forms live on different grids".into()));
    }
    let g = a.grid.clone();
    let deg = a.degree + b.degree;
    if deg > g.dim() {
        return Err(Error::Domain(format!("wedge degree {deg} exceeds dimension {}", g.dim())));
    }
    if a.cols != b.rows {
        return Err(Error::Shape(format!("cannot multiply {}×{} by {}×{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let twist = wedge_twist(&a.twist, &b.twist)?;
    let prod = |x: &[CMat], y: &[CMat]| -> Vec<CMat> { x.par_iter().zip(y.par_iter()).map(|(p, q)| p * q).collect() };
    let comps = match (a.degree, b.degree) {
        (0, _) => b.comps.iter().map(|bc| prod(&a.comps[0], bc)).collect(),
        (_, 0) => a.comps.iter().map(|ac| prod(ac, &b.comps[0])).collect(),
        (1, 1) => {
            let xy = prod(&a.comps[0], &b.comps[1]);
            let yx = prod(&a.comps[1], &b.comps[0]);
            vec![xy.iter().zip(&yx).map(|(p, q)| p - q).collect()]
        }
        _ => unreachable!(),
    };
    Ok(MatrixForm { grid: g, degree: deg, rows: a.rows, cols: b.cols, comps, twist })
}

/// `∫ α` for a top-degree form with 1×1 coefficients.
pub fn integrate(a: &MatrixForm) -> Result<Complex64> {
    if a.degree != a.grid.dim() {
        return Err(Error::Domain(format!("cannot integrate a {}-form over a {}-manifold", a.degree, a.grid.dim())));
    }
    if a.shape() != (1, 1) {
        return Err(Error::Shape("integration needs scalar coefficients; apply a trace first".into()));
    }
    Ok(a.comps[0].iter().map(|m| m[(0, 0)]).sum::<Complex64>() * a.grid.cell())
}

/// Entrywise integral of a top-degree matrix-valued form.
pub fn integrate_entries(a: &MatrixForm) -> Result<CMat> {
    if a.degree != a.grid.dim() {
        return Err(Error::Domain("integration needs a top-degree form".into()));
    }
    let mut s = CMat::zeros(a.rows, a.cols);
    for m in &a.comps[0] {
        s += m;
    }
    Ok(s * Complex64::new(a.grid.cell(), 0.0))
}

/// Pullback along the `k`-fold x-cover `cover → base`, as the quasi-periodic
/// extension of the field to the larger fundamental domain.
pub fn pullback_form(a: &MatrixForm, cover: &Grid) -> Result<MatrixForm> {
    let base = &a.grid;
    if cover.manifold != base.manifold || cover.n != base.n || cover.lx % base.lx != 0 {
        return Err(Error::Shape("cover resolution is not a multiple of the base resolution".into()));
    }
    let k = cover.lx / base.lx;
    let sheet_maps: Vec<(CMat, CMat)> = match &a.twist {
        None => vec![(CMat::identity(a.rows, a.rows), CMat::identity(a.cols, a.cols)); k],
        Some(t) => (0..k)
            .map(|j| {
                let u = linalg::hermitian_calculus(&t.hx, |l| Complex64::from_polar(1.0, 2.0 * PI * l * j as f64)).unwrap();
                let r = match t.kind {
                    TwistKind::Left => CMat::identity(a.cols, a.cols),
                    TwistKind::Conjugation => u.adjoint(),
                };
                (u, r)
            })
            .collect(),
    };
    let comps = a
        .comps
        .iter()
        .map(|comp| {
            (0..cover.len())
                .map(|p| {
                    let (ix, iy) = (p / cover.ny(), p % cover.ny());
                    let (j, bx) = (ix / base.nx(), ix % base.nx());
                    let (l, r) = &sheet_maps[j];
                    l * &comp[base.index(bx, iy)] * r
                })
                .collect()
        })
        .collect();
    let twist = a.twist.as_ref().map(|t| Twist { hx: &t.hx * Complex64::new(k as f64, 0.0), ..t.clone() });
    Ok(MatrixForm { grid: cover.clone(), degree: a.degree, rows: a.rows, cols: a.cols, comps, twist })
}

/// CSV export: one row per grid point with `x, y` and re/im of every entry of
/// every component.
pub fn write_csv<W: Write>(a: &MatrixForm, mut w: W) -> std::io::Result<()> {
    let names = match (a.grid.manifold, a.degree) {
        (_, 0) => vec!["f"],
        (Manifold::S1, 1) => vec!["dx"],
        (Manifold::T2, 1) => vec!["dx", "dy"],
        _ => vec!["dxdy"],
    };
    let mut header = vec!["x".to_string(), "y".to_string()];
    for n in &names {
        for r in 0..a.rows {
            for s in 0..a.cols {
                header.push(format!("{n}_{r}_{s}_re"));
                header.push(format!("{n}_{r}_{s}_im"));
            }
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for p in 0..a.grid.len() {
        let (x, y) = a.grid.coords(p);
        let mut row = vec![format!("{x}"), format!("{y}")];
        for c in &a.comps {
            for r in 0..a.rows {
                for s in 0..a.cols {
                    row.push(format!("{:e}", c[p][(r, s)].re));
                    row.push(format!("{:e}", c[p][(r, s)].im));
                }
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(z: Complex64) -> CMat {
        CMat::from_element(1, 1, z)
    }

    /// Random trigonometric polynomial with modes `|k| < kmax` in each direction.
    fn band_limited(rng: &mut ChaCha8Rng, kmax: i64) -> impl Fn(f64, f64) -> Complex64 + Sync {
        let p = TrigPoly::random(rng, Manifold::T2, kmax);
        move |x: f64, y: f64| p.eval(x, y)
    }

    fn random_form(grid: &Grid, degree: usize, m: usize, seed: u64) -> MatrixForm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs: Vec<Vec<_>> = (0..grid.components(degree)).map(|_| (0..m * m).map(|_| band_limited(&mut rng, 3)).collect()).collect();
        MatrixForm::from_fn(grid, degree, m, m, |c, x, y| CMat::from_fn(m, m, |r, q| fs[c][r * m + q](x, y))).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::torus(6).is_err());
        assert!(Grid::torus(9).is_err());
        let g = Grid::torus(8).unwrap();
        assert_eq!(g.len(), 64);
        assert_eq!(Grid::circle(8).unwrap().components(2), 0);
        assert!(MatrixForm::zero(&Grid::circle(8).unwrap(), 2, 1, 1).is_err());
    }

    #[test]
    fn line_derivative_is_exact_on_twisted_modes() {
        let d = LineDerivative::new(16, 1.0);
        for theta in [0.0, 0.3, -0.45, 0.7] {
            for k in -8i64..8 {
                let w = 2.0 * PI * (k as f64 + theta);
                let mut f: Vec<Complex64> = (0..16).map(|s| Complex64::from_polar(1.0, w * s as f64 / 16.0)).collect();
                let expect: Vec<Complex64> = f.iter().map(|z| z * Complex64::new(0.0, w)).collect();
                d.apply(&mut f, theta);
                for (a, b) in f.iter().zip(&expect) {
                    assert!((a - b).norm() < 1e-11 * w.abs().max(1.0));
                }
            }
        }
        // dense matrix is anti-Hermitian
        let m = d.matrix(0.3);
        assert!(linalg::max_abs(&(&m + m.adjoint())) < 1e-11);
    }

    #[test]
    fn constant_form_is_closed() {
        let g = Grid::torus(8).unwrap();
        let a = MatrixForm::from_fn(&g, 0, 2, 2, |_, _, _| CMat::from_element(2, 2, Complex64::new(0.3, -1.0))).unwrap();
        assert!(exterior_d(&a).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn d_of_sin_y_dx() {
        let g = Grid::torus(16).unwrap();
        let a = MatrixForm::from_fn(&g, 1, 1, 1, |c, _, y| s(if c == 0 { Complex64::new((2.0 * PI * y).sin(), 0.0) } else { ZERO })).unwrap();
        let da = exterior_d(&a).unwrap();
        for p in 0..g.len() {
            let (_, y) = g.coords(p);
            assert!((da.at(0, p)[(0, 0)] - Complex64::new(-2.0 * PI * (2.0 * PI * y).cos(), 0.0)).norm() < 1e-12);
        }
        assert!(exterior_d(&da).is_err());
    }

    #[test]
    fn wedge_examples() {
        let g = Grid::torus(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = band_limited(&mut rng, 3);
        let h = band_limited(&mut rng, 3);
        let a = MatrixForm::from_fn(&g, 1, 1, 1, |c, x, y| s(if c == 0 { f(x, y) } else { h(x, y) })).unwrap();
        assert!(wedge(&a, &a).unwrap().max_abs() < 1e-12);

        let (ca, cb) = (Complex64::new(2.0, 1.0), Complex64::new(-0.5, 3.0));
        let dx = MatrixForm::from_fn(&g, 1, 1, 1, |c, _, _| s(if c == 0 { ca } else { ZERO })).unwrap();
        let dy = MatrixForm::from_fn(&g, 1, 1, 1, |c, _, _| s(if c == 1 { cb } else { ZERO })).unwrap();
        let w = wedge(&dx, &dy).unwrap();
        assert!((w.at(0, 5)[(0, 0)] - ca * cb).norm() < 1e-14);

        let om = random_form(&g, 1, 3, 2);
        let ww = wedge(&om, &om).unwrap();
        for p in [0, 17, 63] {
            let expect = om.at(0, p) * om.at(1, p) - om.at(1, p) * om.at(0, p);
            assert!(linalg::max_abs(&(ww.at(0, p) - expect)) < 1e-12);
        }
        let top = MatrixForm::zero(&g, 2, 1, 1).unwrap();
        assert!(wedge(&a, &top).is_err());
        assert!(wedge(&om, &a).is_err());
    }

    #[test]
    fn integration_examples() {
        let g = Grid::torus(16).unwrap();
        let c = Complex64::new(1.5, -0.25);
        assert!((integrate(&MatrixForm::from_fn(&g, 2, 1, 1, |_, _, _| s(c)).unwrap()).unwrap() - c).norm() < 1e-14);
        let sx = MatrixForm::from_fn(&g, 2, 1, 1, |_, x, _| s(Complex64::new((2.0 * PI * x).sin(), 0.0))).unwrap();
        assert!(integrate(&sx).unwrap().norm() < 1e-12);
        // band-limited polynomial: the integral is the constant Fourier coefficient
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = band_limited(&mut rng, 5);
        let mean: Complex64 = {
            // a much finer grid integrates the same polynomial exactly
            let fine = 64;
            (0..fine * fine).map(|p| f((p / fine) as f64 / fine as f64, (p % fine) as f64 / fine as f64)).sum::<Complex64>()
                / (fine * fine) as f64
        };
        let a = MatrixForm::from_fn(&g, 2, 1, 1, |_, x, y| s(f(x, y))).unwrap();
        assert!((integrate(&a).unwrap() - mean).norm() < 1e-12);
        assert!(integrate(&MatrixForm::zero(&g, 1, 1, 1).unwrap()).is_err());
        assert!(integrate(&MatrixForm::zero(&g, 2, 2, 2).unwrap()).is_err());
    }

    #[test]
    fn integration_refinement_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = band_limited(&mut rng, 4);
        let a = |n| integrate(&MatrixForm::from_fn(&Grid::torus(n).unwrap(), 2, 1, 1, |_, x, y| s(f(x, y))).unwrap()).unwrap();
        assert!((a(16) - a(32)).norm() < 1e-10);
    }

    #[test]
    fn pullback_examples() {
        let g = Grid::torus(16).unwrap();
        let cover = g.cover(2).unwrap();
        let c = CMat::from_element(1, 1, Complex64::new(0.7, 0.1));
        let a = MatrixForm::from_fn(&g, 0, 1, 1, |_, _, _| c.clone()).unwrap();
        let pa = pullback_form(&a, &cover).unwrap();
        assert!(pa.component(0).iter().all(|m| linalg::max_abs(&(m - &c)) < 1e-15));

        // g(x)dx pulls back to g(x̃ mod 1)dx̃; in the unit parametrization x̃ = 2u
        // this is 2·g(2u mod 1)du
        let gfun = |x: f64| Complex64::new((2.0 * PI * x).cos() + 0.3 * (4.0 * PI * x).sin(), 0.0);
        let al = MatrixForm::from_fn(&g, 1, 1, 1, |cc, x, _| s(if cc == 0 { gfun(x) } else { ZERO })).unwrap();
        let pl = pullback_form(&al, &cover).unwrap();
        for ix in 0..cover.nx() {
            let u = ix as f64 / cover.nx() as f64;
            let unit_coeff = pl.at(0, cover.index(ix, 3))[(0, 0)] * 2.0;
            assert!((unit_coeff - gfun((2.0 * u).fract()) * 2.0).norm() < 1e-12);
        }
        assert!(pullback_form(&al, &Grid::torus(32).unwrap()).is_err());
    }

    fn random_twist(rng: &mut ChaCha8Rng, m: usize, chern: i64, kind: TwistKind) -> Twist {
        // commuting generators: diagonal in a common random basis
        let z = CMat::from_fn(m, m, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let q = z.qr().q();
        let dx = CMat::from_diagonal(&nalgebra::DVector::from_fn(m, |_, _| Complex64::new(rng.gen_range(0.0..1.0), 0.0)));
        let dy = CMat::from_diagonal(&nalgebra::DVector::from_fn(m, |_, _| Complex64::new(rng.gen_range(0.0..1.0), 0.0)));
        Twist { kind, chern, hx: &q * dx * q.adjoint(), hy: &q * dy * q.adjoint() }
    }

    /// Quasi-periodic field `E·F` (or `E F E*`) with `E = e^{2πi(x·Hx + y·Hy)}`,
    /// times a theta function for sections of nonzero degree, and periodic
    /// band-limited `F`.
    struct TwistedSampler {
        t: Twist,
        fs: Vec<Vec<Box<dyn Fn(f64, f64) -> Complex64 + Sync>>>,
    }

    impl TwistedSampler {
        fn new(t: &Twist, ncomp: usize, seed: u64) -> Self {
            let m = t.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs = (0..ncomp)
                .map(|_| {
                    (0..m * m)
                        .map(|_| Box::new(band_limited(&mut rng, 3)) as Box<dyn Fn(f64, f64) -> Complex64 + Sync>)
                        .collect()
                })
                .collect();
            Self { t: t.clone(), fs }
        }

        fn eval(&self, c: usize, x: f64, y: f64) -> CMat {
            let m = self.t.dim();
            let gen = &self.t.hx * Complex64::new(x, 0.0) + &self.t.hy * Complex64::new(y, 0.0);
            let mut e = linalg::hermitian_calculus(&gen, |l| Complex64::from_polar(1.0, 2.0 * PI * l)).unwrap();
            if self.t.kind == TwistKind::Left && self.t.chern != 0 {
                e *= theta(self.t.chern, x, y);
            }
            let f = CMat::from_fn(m, m, |r, q| self.fs[c][r * m + q](x, y));
            match self.t.kind {
                TwistKind::Left => &e * f,
                TwistKind::Conjugation => &e * f * e.adjoint(),
            }
        }

        fn sample(&self, g: &Grid, degree: usize) -> MatrixForm {
            let m = self.t.dim();
            MatrixForm::from_fn(g, degree, m, m, |c, x, y| self.eval(c, x, y)).unwrap().with_twist(Some(self.t.clone())).unwrap()
        }
    }

    #[test]
    fn twisted_derivatives_match_analytic_ones() {
        let g = Grid::torus(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (kind, chern) in [(TwistKind::Conjugation, 0), (TwistKind::Left, 0), (TwistKind::Left, 2), (TwistKind::Left, -1)] {
            let t = random_twist(&mut rng, 2, chern, kind);
            let smp = TwistedSampler::new(&t, 1, 10);
            let da = exterior_d(&smp.sample(&g, 0)).unwrap();
            // centered-difference oracle on the analytic field
            let eps = 1e-6;
            let h = Complex64::new(2.0 * eps, 0.0);
            for p in [0usize, 37, 100, 255] {
                let (x, y) = g.coords(p);
                let fdx = (smp.eval(0, x + eps, y) - smp.eval(0, x - eps, y)) / h;
                let fdy = (smp.eval(0, x, y + eps) - smp.eval(0, x, y - eps)) / h;
                assert!(linalg::max_abs(&(da.at(0, p) - fdx)) < 1e-6, "{kind:?} c={chern}");
                assert!(linalg::max_abs(&(da.at(1, p) - fdy)) < 1e-6, "{kind:?} c={chern}");
            }
        }
    }

    #[test]
    fn d_squared_vanishes_on_twisted_fields() {
        let g = Grid::torus(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for chern in [0, 2] {
            let t = random_twist(&mut rng, 3, chern, TwistKind::Conjugation);
            let a = TwistedSampler::new(&t, 1, 13).sample(&g, 0);
            let dda = exterior_d(&exterior_d(&a).unwrap()).unwrap();
            assert!(dda.max_abs() < 1e-10 * a.max_abs());
        }
    }

    #[test]
    fn twisted_pullback_commutes_with_d() {
        let g = Grid::torus(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = random_twist(&mut rng, 2, 0, TwistKind::Conjugation);
        let a = TwistedSampler::new(&t, 2, 15).sample(&g, 1);
        for k in [2, 3] {
            let cover = g.cover(k).unwrap();
            let lhs = exterior_d(&pullback_form(&a, &cover).unwrap()).unwrap();
            let rhs = pullback_form(&exterior_d(&a).unwrap(), &cover).unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10 * a.max_abs());
        }
    }

    #[test]
    fn csv_layout() {
        let g = Grid::torus(8).unwrap();
        let a = random_form(&g, 1, 2, 3);
        let mut buf = Vec::new();
        write_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 64);
        assert_eq!(lines[0].split(',').count(), 2 + 2 * 4 * 2);
        assert!(lines[0].starts_with("x,y,dx_0_0_re,dx_0_0_im"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn d_squared_zero(seed in any::<u64>(), m in 1usize..4) {
            let g = Grid::torus(16).unwrap();
            let a = random_form(&g, 0, m, seed);
            let dda = exterior_d(&exterior_d(&a).unwrap()).unwrap();
            prop_assert!(dda.max_abs() < 1e-10 * a.max_abs());
            let c = Grid::circle(16).unwrap();
            let b = random_form(&c, 0, m, seed);
            prop_assert!(exterior_d(&b).unwrap().degree() == 1);
        }

        #[test]
        fn leibniz(seed in any::<u64>()) {
            let g = Grid::torus(24).unwrap();
            let f = random_form(&g, 0, 2, seed);
            let b = random_form(&g, 1, 2, seed.wrapping_add(1));
            let lhs = exterior_d(&wedge(&f, &b).unwrap()).unwrap();
            let rhs = wedge(&exterior_d(&f).unwrap(), &b).unwrap().add(&wedge(&f, &exterior_d(&b).unwrap()).unwrap()).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-9 * lhs.max_abs().max(1.0));
        }

        #[test]
        fn pullback_commutes_with_d(seed in any::<u64>(), k in 2usize..5) {
            let g = Grid::torus(16).unwrap();
            let a = random_form(&g, 1, 2, seed);
            let cover = g.cover(k).unwrap();
            let lhs = exterior_d(&pullback_form(&a, &cover).unwrap()).unwrap();
            let rhs = pullback_form(&exterior_d(&a).unwrap(), &cover).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10 * a.max_abs());
        }
    }
}
