//! The τ-Chern character `ch_τ = Σ_j (i/2π)^j/j! · τ(ev(Ω^{∧j}))` and the
//! topological side of the index formula on the flat torus.
//!
//! Every value reported here uses the `(i/2π)^j/j!` normalization per
//! degree-`2j` component.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{check_owner, TraceFunctional, ZValue};
use crate::bundle::BundleSpec;
use crate::error::{Error, Result};
use crate::forms::{exterior_d, wedge, Grid, Manifold, MatrixForm};
use crate::hilbert_module::ModuleMap;
use crate::linalg::{CMat, I};

/// Normalization tag attached to reported Chern numbers.
pub const NORMALIZATION: &str = "(i/2pi)^j/j! per degree-2j component";

#[derive(Clone, Debug)]
pub struct ChernForm {
    grid: Grid,
    /// `τ(ev(p(x)))` at every grid point.
    pub deg0: Vec<ZValue>,
    /// `(i/2π)·τ(ev(Ω(x)))` on `T²`.
    pub deg2: Option<Vec<ZValue>>,
    pub trace: String,
    pub bundle: String,
}

/// Integrated Chern data for reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChernSummary {
    pub normalization: String,
    pub degree0: ZValue,
    pub degree2_integral: ZValue,
    pub closedness_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `∂̄` on the flat torus, whose Todd factor is 1.
    Dolbeault,
}

impl OperatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dolbeault" => Ok(Self::Dolbeault),
            other => Err(Error::Unsupported(format!("operator kind {other:?}; only \"dolbeault\" is built"))),
        }
    }
}

fn ev_traces(b: &BundleSpec, m: &CMat) -> Result<Vec<Complex64>> {
    let n = b.ambient_rank();
    Ok(ModuleMap::from_block_diag(b.owner(), n, n, m)?.block_traces())
}

fn describe(b: &BundleSpec) -> String {
    let kind = match b {
        BundleSpec::Trivialized { .. } => "trivialized",
        BundleSpec::Automorphy { .. } => "automorphy",
        BundleSpec::ProjectionField { .. } => "projection-field",
    };
    format!("{kind} bundle over {} (rank {}, chern parameter {})", b.owner().describe(), b.ambient_rank(), b.chern())
}

/// Pointwise `ch_τ` of `b`.
pub fn ch_tau(b: &BundleSpec, tau: &TraceFunctional) -> Result<ChernForm> {
    check_owner(b.owner(), tau.owner())?;
    if !tau.is_positive() {
        return Err(Error::Precondition("ch_τ needs a positive trace".into()));
    }
    let grid = b.grid().clone();
    let deg0 = (0..grid.len())
        .into_par_iter()
        .map(|p| tau.apply_block_traces(&ev_traces(b, &b.projection_at(p))?))
        .collect::<Result<Vec<_>>>()?;
    let deg2 = match grid.manifold {
        Manifold::S1 => None,
        Manifold::T2 => {
            let omega = b.curvature()?;
            // Ω^{∧j} is a 2j-form; on a surface the series stops at j = 1
            let jmax = grid.dim() / 2;
            let mut power = omega.clone();
            let mut fact = 1.0;
            let mut coeff = Complex64::new(1.0, 0.0);
            let mut out: Vec<ZValue> = vec![ZValue::zeros(tau.value_len()); grid.len()];
            for j in 1..=jmax {
                if j > 1 {
                    power = wedge(&power, &omega)?;
                }
                fact *= j as f64;
                coeff *= I / (2.0 * std::f64::consts::PI);
                let scale = coeff / fact;
                let vals = power
                    .component(0)
                    .par_iter()
                    .map(|m| Ok(tau.apply_block_traces(&ev_traces(b, m)?)?.scale(scale)))
                    .collect::<Result<Vec<_>>>()?;
                out = out.iter().zip(vals).map(|(a, v)| a.add(&v)).collect();
            }
            Some(out)
        }
    };
    Ok(ChernForm { grid, deg0, deg2, trace: format!("{:?}", tau.kind()), bundle: describe(b) })
}

fn as_form(grid: &Grid, vals: &[ZValue], degree: usize) -> Result<MatrixForm> {
    let len = vals.first().map(|z| z.len()).unwrap_or(0);
    let field = vals.iter().map(|z| CMat::from_row_slice(1, len, &z.0)).collect();
    MatrixForm::from_components(grid, degree, vec![field])
}

impl ChernForm {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `∫ ch_τ` in degree 2 (zero on `S¹`).
    pub fn degree2_integral(&self) -> ZValue {
        let len = self.deg0.first().map(|z| z.len()).unwrap_or(0);
        match &self.deg2 {
            None => ZValue::zeros(len),
            Some(v) => v.iter().fold(ZValue::zeros(len), |a, z| a.add(z)).scale(Complex64::new(self.grid.cell(), 0.0)),
        }
    }

    /// Mean of the degree-0 part over the grid.
    pub fn degree0_mean(&self) -> ZValue {
        let len = self.deg0.first().map(|z| z.len()).unwrap_or(0);
        self.deg0.iter().fold(ZValue::zeros(len), |a, z| a.add(z)).scale(Complex64::new(1.0 / self.grid.len() as f64, 0.0))
    }

    /// Largest deviation of the degree-0 part from its mean.
    pub fn degree0_variation(&self) -> f64 {
        let m = self.degree0_mean();
        self.deg0.iter().map(|z| z.dist(&m)).fold(0.0, f64::max)
    }

    /// Pointwise image under the linear map `ℂ^k → ℂ^{k'}` given by `rows`.
    pub fn map_values(&self, rows: &[Vec<Complex64>]) -> Self {
        let f = |z: &ZValue| ZValue(rows.iter().map(|r| r.iter().zip(&z.0).map(|(a, b)| a * b).sum()).collect());
        Self {
            deg0: self.deg0.iter().map(f).collect(),
            deg2: self.deg2.as_ref().map(|v| v.iter().map(f).collect()),
            ..self.clone()
        }
    }

    pub fn summary(&self) -> Result<ChernSummary> {
        Ok(ChernSummary {
            normalization: NORMALIZATION.into(),
            degree0: self.degree0_mean(),
            degree2_integral: self.degree2_integral(),
            closedness_residual: closedness_residual(self)?,
        })
    }

    /// One row per grid point: `x, y`, then re/im of each degree-0 and
    /// degree-2 component.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let len = self.deg0.first().map(|z| z.len()).unwrap_or(0);
        let mut header = vec!["x".to_string(), "y".to_string()];
        for deg in ["ch0", "ch2"] {
            if deg == "ch2" && self.deg2.is_none() {
                continue;
            }
            for c in 0..len {
                header.push(format!("{deg}_{c}_re"));
                header.push(format!("{deg}_{c}_im"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for p in 0..self.grid.len() {
            let (x, y) = self.grid.coords(p);
            let mut row = vec![format!("{x}"), format!("{y}")];
            let parts = std::iter::once(&self.deg0[p]).chain(self.deg2.as_ref().map(|v| &v[p]));
            for z in parts {
                for c in &z.0 {
                    row.push(format!("{:e}", c.re));
                    row.push(format!("{:e}", c.im));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `‖d ch_τ‖∞` over all non-top degrees. On a surface the degree-2 part is
/// top-degree and closed identically, so only the degree-0 part contributes.
pub fn closedness_residual(c: &ChernForm) -> Result<f64> {
    let f = as_form(&c.grid, &c.deg0, 0)?;
    Ok(exterior_d(&f)?.max_abs())
}

/// `|∫ch_τ(b₁) − ∫ch_τ(b₂)|` for two connections on the same bundle.
pub fn connection_independence_gap(b1: &BundleSpec, b2: &BundleSpec, tau: &TraceFunctional) -> Result<f64> {
    same_underlying_bundle(b1, b2)?;
    let (c1, c2) = (ch_tau(b1, tau)?, ch_tau(b2, tau)?);
    Ok(c1.degree2_integral().dist(&c2.degree2_integral()).max(c1.degree0_mean().dist(&c2.degree0_mean())))
}

fn same_underlying_bundle(b1: &BundleSpec, b2: &BundleSpec) -> Result<()> {
    check_owner(b1.owner(), b2.owner())?;
    let close = |a: &CMat, b: &CMat| a.shape() == b.shape() && crate::linalg::max_abs(&(a - b)) < 1e-12;
    let same = b1.grid() == b2.grid()
        && match (b1, b2) {
            (BundleSpec::Trivialized { fiber: f1, .. }, BundleSpec::Trivialized { fiber: f2, .. }) => {
                close(&f1.projection().to_block_diag(), &f2.projection().to_block_diag())
            }
            (
                BundleSpec::Automorphy { chern: c1, monodromy: m1, .. },
                BundleSpec::Automorphy { chern: c2, monodromy: m2, .. },
            ) => {
                c1 == c2
                    && close(&m1.fiber().projection().to_block_diag(), &m2.fiber().projection().to_block_diag())
                    && close(&m1.u().to_block_diag(), &m2.u().to_block_diag())
                    && close(&m1.v().to_block_diag(), &m2.v().to_block_diag())
            }
            (BundleSpec::ProjectionField { eps: e1, .. }, BundleSpec::ProjectionField { eps: e2, .. }) => {
                e1.sub(e2).map(|d| d.max_abs() < 1e-12).unwrap_or(false)
            }
            _ => false,
        };
    if same {
        Ok(())
    } else {
        Err(Error::Precondition("connections do not live on the same bundle".into()))
    }
}

/// `∫_{T²} ch_τ(b)` in degree 2: the topological index of the `b`-twisted
/// Dolbeault operator on the flat torus (Todd class 1).
pub fn topological_index(b: &BundleSpec, tau: &TraceFunctional, kind: OperatorKind) -> Result<ZValue> {
    match kind {
        OperatorKind::Dolbeault => {
            if b.grid().manifold != Manifold::T2 {
                return Err(Error::Domain("the Dolbeault index lives on T²".into()));
            }
            Ok(ch_tau(b, tau)?.degree2_integral())
        }
    }
}
