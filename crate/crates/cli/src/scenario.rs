//! Declarative scenario configs and their execution.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ncindex_core::acceptance::bloch_field;
use ncindex_core::algebra::{AlgebraConfig, AlgebraElement, AlgebraSpec, TraceFunctional, ZValue};
use ncindex_core::bundle::{image_overlap, random_field, random_perturbation, random_skew_form, retract_projection, BundleSpec, Monodromy};
use ncindex_core::chern::{ch_tau, connection_independence_gap, ChernSummary, OperatorKind};
use ncindex_core::cover::{atiyah_check, AtiyahReport, CoverConfig, CoverSpec};
use ncindex_core::forms::{Grid, Manifold, MatrixForm};
use ncindex_core::hilbert_module::{ModuleMap, ProjectiveModule};
use ncindex_core::linalg::{self, CMat};
use ncindex_core::spectral::{index_report, IndexReport};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Matrix = Vec<Vec<Complex64>>;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub algebra: AlgebraConfig,
    /// Trace defining the GNS fibers.
    #[serde(default)]
    pub trace: TraceConfig,
    /// Trace the index is evaluated in; defaults to `trace`.
    #[serde(default)]
    pub index_trace: Option<TraceConfig>,
    pub grid: GridConfig,
    /// Parsed in a second pass so that diagnostics name the inner field.
    #[serde(rename = "bundle")]
    bundle_raw: serde_json::Value,
    #[serde(skip)]
    pub bundle: BundleConfig,
    #[serde(default)]
    pub operator: OperatorConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(default)]
    pub cover: Option<CoverConfig>,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub expect: Vec<Expectation>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum TraceConfig {
    #[default]
    Normalized,
    CenterValued,
    Canonical,
    Weights(Vec<f64>),
    Delocalized(usize),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_manifold")]
    pub manifold: String,
    pub n: usize,
}

fn default_manifold() -> String {
    "T2".into()
}

/// An element of `M_n(A)` in the block-diagonal realization.
#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixConfig {
    Matrix(Matrix),
    /// `diag(e^{2πiφ})` over the realization coordinates.
    Phases(Vec<f64>),
    /// `δ_g` on the diagonal of `M_n(ℂΓ)`.
    Delta(usize),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonodromyConfig {
    pub u: MatrixConfig,
    pub v: MatrixConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomForm {
    pub kmax: i64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaConfig {
    Random(RandomForm),
    /// `samples[component][point]`.
    Samples(Vec<Vec<Matrix>>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldConfig {
    Bloch,
    Samples(Vec<Matrix>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutomorphyConfig {
    pub chern: i64,
    #[serde(default = "one")]
    pub rank: usize,
    #[serde(default)]
    pub fiber: Option<MatrixConfig>,
    #[serde(default)]
    pub monodromy: Option<MonodromyConfig>,
    #[serde(default)]
    pub eta: Option<RandomForm>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrivializedConfig {
    #[serde(default = "one")]
    pub rank: usize,
    #[serde(default)]
    pub fiber: Option<MatrixConfig>,
    #[serde(default)]
    pub omega: Option<OmegaConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionFieldConfig {
    #[serde(default = "one")]
    pub rank: usize,
    pub field: FieldConfig,
    #[serde(default)]
    pub eta: Option<RandomForm>,
}

/// Selected by the `presentation` tag.
#[derive(Clone, Debug)]
pub enum BundleConfig {
    Automorphy(AutomorphyConfig),
    Trivialized(TrivializedConfig),
    ProjectionField(ProjectionFieldConfig),
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self::Trivialized(TrivializedConfig { rank: 1, fiber: None, omega: None })
    }
}

impl BundleConfig {
    fn from_value(v: &serde_json::Value) -> Result<Self, ConfigError> {
        let mut body = v.as_object().cloned().ok_or_else(|| bad("bundle", "expected an object"))?;
        let tag = body.remove("presentation").ok_or_else(|| bad("bundle.presentation", "missing"))?;
        fn part<T: serde::de::DeserializeOwned>(body: serde_json::Map<String, serde_json::Value>) -> Result<T, ConfigError> {
            serde_path_to_error::deserialize(serde_json::Value::Object(body)).map_err(|e| {
                let path = e.path().to_string();
                let field = if path == "." { "bundle".to_string() } else { format!("bundle.{path}") };
                bad(field, e.into_inner().to_string())
            })
        }
        match tag.as_str() {
            Some("automorphy") => Ok(Self::Automorphy(part(body)?)),
            Some("trivialized") => Ok(Self::Trivialized(part(body)?)),
            Some("projection_field") => Ok(Self::ProjectionField(part(body)?)),
            _ => Err(bad("bundle.presentation", format!("expected \"automorphy\", \"trivialized\" or \"projection_field\", got {tag}"))),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum OperatorConfig {
    #[default]
    Dolbeault,
    None,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(default)]
    pub zero_rel: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    #[serde(default)]
    pub retraction: Option<RetractionConfig>,
    /// Number of random connection pairs compared.
    #[serde(default)]
    pub connection_pairs: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetractionConfig {
    pub trials: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum ExpectedValue {
    Real(f64),
    Complex(Complex64),
    Vector(Vec<Complex64>),
}

impl ExpectedValue {
    fn to_zvalue(&self) -> ZValue {
        match self {
            Self::Real(x) => ZValue::scalar(Complex64::new(*x, 0.0)),
            Self::Complex(z) => ZValue::scalar(*z),
            Self::Vector(v) => ZValue(v.clone()),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub quantity: String,
    pub value: ExpectedValue,
    pub tol: f64,
    pub provenance: String,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub report: Option<String>,
    #[serde(default)]
    pub csv_dir: Option<String>,
}

/// Every quantity an expectation may name.
pub const QUANTITIES: [&str; 19] = [
    "index.analytic",
    "index.topological",
    "index.kernel_dim",
    "index.cokernel_dim",
    "index.k0",
    "index.discrepancy",
    "chern.degree0",
    "chern.degree2_integral",
    "chern.closedness_residual",
    "cover.base_index",
    "cover.index_per_sheet",
    "cover.l2_index",
    "cover.flat_twist_index",
    "cover.delocalized",
    "cover.dictionary_defect",
    "cover.residual",
    "retraction.idempotency",
    "retraction.min_overlap",
    "connection.independence_gap",
];

/// A config error tied to the field that caused it.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "field `{}`: {}", self.field, self.message)
    }
}

fn bad(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), message: message.into() }
}

impl Scenario {
    /// Parses and validates a JSON config.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if inner.is_syntax() || inner.is_eof() {
                "<syntax>".to_string()
            } else if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            bad(field, inner.to_string())
        })?;
        s.bundle = BundleConfig::from_value(&s.bundle_raw)?;
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(bad("name", "must not be empty"));
        }
        if self.grid.n == 0 {
            return Err(bad("grid.n", "must be positive"));
        }
        if !matches!(self.grid.manifold.as_str(), "T2" | "S1") {
            return Err(bad("grid.manifold", format!("expected \"T2\" or \"S1\", got {:?}", self.grid.manifold)));
        }
        if let Some(z) = self.tolerances.zero_rel {
            if !(z > 0.0) {
                return Err(bad("tolerances.zero_rel", "must be positive"));
            }
        }
        if let Some(r) = &self.checks.retraction {
            if !(r.delta > 0.0 && r.delta < 0.1) {
                return Err(bad("checks.retraction.delta", "must lie in (0, 0.1)"));
            }
            if !matches!(self.bundle, BundleConfig::ProjectionField(_)) {
                return Err(bad("checks.retraction", "needs a projection_field bundle"));
            }
        }
        for (i, e) in self.expect.iter().enumerate() {
            if !QUANTITIES.contains(&e.quantity.as_str()) {
                return Err(bad(format!("expect[{i}].quantity"), format!("unknown quantity {:?}", e.quantity)));
            }
            if !(e.tol > 0.0) {
                return Err(bad(format!("expect[{i}].tol"), "must be positive"));
            }
            if e.provenance.trim().is_empty() {
                return Err(bad(format!("expect[{i}].provenance"), "must name where the value comes from"));
            }
            let missing = |section: &str| bad(format!("expect[{i}].quantity"), format!("{:?} needs a `{section}` section", e.quantity));
            if e.quantity.starts_with("cover.") && self.cover.is_none() {
                return Err(missing("cover"));
            }
            if e.quantity.starts_with("retraction.") && self.checks.retraction.is_none() {
                return Err(missing("checks.retraction"));
            }
            if e.quantity.starts_with("connection.") && self.checks.connection_pairs.is_none() {
                return Err(missing("checks.connection_pairs"));
            }
            if e.quantity.starts_with("index.") && self.operator == OperatorConfig::None {
                return Err(bad(format!("expect[{i}].quantity"), "index quantities need an operator"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RetractionReport {
    pub trials: usize,
    pub delta: f64,
    pub idempotency: f64,
    pub min_overlap: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ExpectationOutcome {
    pub quantity: String,
    pub expected: ZValue,
    pub actual: Option<ZValue>,
    pub tol: f64,
    pub provenance: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub algebra: String,
    pub grid_n: usize,
    pub operator: Option<OperatorKind>,
    pub index: Option<IndexReport>,
    pub chern: Option<ChernSummary>,
    pub connection_independence_gap: Option<f64>,
    pub retraction: Option<RetractionReport>,
    pub cover: Option<AtiyahReport>,
    pub expectations: Vec<ExpectationOutcome>,
    pub errors: Vec<String>,
    pub passed: bool,
}

/// Data produced alongside a report for CSV export.
pub struct Artifacts {
    pub chern: Option<ncindex_core::chern::ChernForm>,
    pub curvature: Option<MatrixForm>,
}

fn trace(owner: &Arc<AlgebraSpec>, c: &TraceConfig) -> ncindex_core::Result<TraceFunctional> {
    match c {
        TraceConfig::Normalized => Ok(TraceFunctional::normalized(owner)),
        TraceConfig::CenterValued => Ok(TraceFunctional::center_valued(owner)),
        TraceConfig::Canonical => TraceFunctional::canonical_group_trace(owner),
        TraceConfig::Weights(w) => TraceFunctional::scalar(owner, w.clone()),
        TraceConfig::Delocalized(g) => TraceFunctional::delocalized_trace(owner, *g),
    }
}

fn to_cmat(m: &Matrix) -> ncindex_core::Result<CMat> {
    let rows = m.len();
    let cols = m.first().map(|r| r.len()).unwrap_or(0);
    if m.iter().any(|r| r.len() != cols) {
        return Err(ncindex_core::Error::Shape("ragged matrix rows".into()));
    }
    Ok(CMat::from_fn(rows, cols, |r, c| m[r][c]))
}

fn matrix(owner: &Arc<AlgebraSpec>, rank: usize, c: &MatrixConfig) -> ncindex_core::Result<ModuleMap> {
    let d = rank * owner.blocks().iter().sum::<usize>();
    let m = match c {
        MatrixConfig::Matrix(m) => to_cmat(m)?,
        MatrixConfig::Phases(p) => {
            if p.len() != d {
                return Err(ncindex_core::Error::Shape(format!("{} phases for dimension {d}", p.len())));
            }
            CMat::from_fn(d, d, |r, c| if r == c { Complex64::from_polar(1.0, 2.0 * PI * p[r]) } else { Complex64::new(0.0, 0.0) })
        }
        MatrixConfig::Delta(g) => return ModuleMap::diagonal(&AlgebraElement::delta(owner, *g)?, rank),
    };
    ModuleMap::from_block_diag(owner, rank, rank, &m)
}

fn fiber(owner: &Arc<AlgebraSpec>, rank: usize, c: &Option<MatrixConfig>) -> ncindex_core::Result<ProjectiveModule> {
    match c {
        Some(m) => ProjectiveModule::new(matrix(owner, rank, m)?),
        None => ProjectiveModule::free(owner, rank),
    }
}

fn at(field: &'static str) -> impl Fn(ncindex_core::Error) -> ConfigError {
    move |e| bad(field, e.to_string())
}

fn build_bundle(s: &Scenario, owner: &Arc<AlgebraSpec>, grid: &Grid, rng: &mut ChaCha8Rng) -> Result<BundleSpec, ConfigError> {
    let perturb = |b: BundleSpec, eta: &Option<RandomForm>, rng: &mut ChaCha8Rng| match eta {
        Some(e) => random_perturbation(&b, e.kmax, e.amplitude, rng).and_then(|d| b.perturbed(&d)).map_err(at("bundle.eta")),
        None => Ok(b),
    };
    match &s.bundle {
        BundleConfig::Automorphy(AutomorphyConfig { chern, rank, fiber: f, monodromy, eta }) => {
            let p = fiber(owner, *rank, f).map_err(at("bundle.fiber"))?;
            let m = match monodromy {
                Some(m) => {
                    let u = matrix(owner, *rank, &m.u).map_err(at("bundle.monodromy.u"))?;
                    let v = matrix(owner, *rank, &m.v).map_err(at("bundle.monodromy.v"))?;
                    Monodromy::new(&p, u, v).map_err(at("bundle.monodromy"))?
                }
                None => Monodromy::trivial(&p),
            };
            let b = BundleSpec::automorphy(grid, *chern, &m, None).map_err(at("bundle.chern"))?;
            perturb(b, eta, rng)
        }
        BundleConfig::Trivialized(TrivializedConfig { rank, fiber: f, omega }) => {
            let p = fiber(owner, *rank, f).map_err(at("bundle.fiber"))?;
            let d = p.projection().to_block_diag().nrows();
            let om = match omega {
                None => MatrixForm::zero(grid, 1, d, d),
                Some(OmegaConfig::Random(r)) => random_skew_form(grid, &p, r.kmax, r.amplitude, rng),
                Some(OmegaConfig::Samples(comps)) => comps
                    .iter()
                    .map(|c| c.iter().map(to_cmat).collect())
                    .collect::<ncindex_core::Result<Vec<Vec<CMat>>>>()
                    .and_then(|comps| MatrixForm::from_components(grid, 1, comps)),
            }
            .map_err(at("bundle.omega"))?;
            BundleSpec::trivialized(&p, om).map_err(at("bundle.omega"))
        }
        BundleConfig::ProjectionField(ProjectionFieldConfig { rank, field, eta }) => {
            let eps = match field {
                FieldConfig::Bloch => bloch_field(grid),
                FieldConfig::Samples(pts) => pts
                    .iter()
                    .map(to_cmat)
                    .collect::<ncindex_core::Result<_>>()
                    .and_then(|f| MatrixForm::from_components(grid, 0, vec![f])),
            }
            .map_err(at("bundle.field"))?;
            let d = rank * owner.blocks().iter().sum::<usize>();
            if eps.shape() != (d, d) {
                return Err(bad("bundle.rank", format!("projection field is {:?}, rank {rank} needs {d}x{d}", eps.shape())));
            }
            let b = BundleSpec::projection_field(owner, eps, None).map_err(at("bundle.field"))?;
            perturb(b, eta, rng)
        }
    }
}

fn retraction(b: &BundleSpec, cfg: &RetractionConfig, rng: &mut ChaCha8Rng) -> ncindex_core::Result<RetractionReport> {
    let BundleSpec::ProjectionField { owner, n, eps, .. } = b else {
        return Err(ncindex_core::Error::Unsupported("retraction checks need a projection field".into()));
    };
    let mut out = RetractionReport { trials: cfg.trials, delta: cfg.delta, idempotency: 0.0, min_overlap: 1.0 };
    for _ in 0..cfg.trials {
        let x = random_field(eps.grid(), owner, *n, *n, 0, 2, rng)?;
        let sup = x.component(0).iter().map(linalg::op_norm).fold(0.0, f64::max);
        let size = cfg.delta * rng.gen_range(0.1..0.95);
        let f = eps.add(&x.scale(Complex64::new(size / sup, 0.0)))?;
        let e = retract_projection(&f, cfg.delta, Some(eps))?;
        for m in e.component(0) {
            out.idempotency = out.idempotency.max(linalg::max_abs(&(m * m - m))).max(linalg::max_abs(&(m - m.adjoint())));
        }
        out.min_overlap = out.min_overlap.min(image_overlap(eps, &e)?);
    }
    Ok(out)
}

fn real(x: f64) -> ZValue {
    ZValue::scalar(Complex64::new(x, 0.0))
}

impl ScenarioReport {
    fn quantity(&self, q: &str) -> Option<ZValue> {
        let idx = self.index.as_ref();
        let ch = self.chern.as_ref();
        let cov = self.cover.as_ref();
        let ret = self.retraction.as_ref();
        match q {
            "index.analytic" => idx.map(|r| r.analytic_index.clone()),
            "index.topological" => idx.map(|r| r.topological_index.clone()),
            "index.kernel_dim" => idx.map(|r| r.kernel_dim_t.clone()),
            "index.cokernel_dim" => idx.map(|r| r.cokernel_dim_t.clone()),
            "index.k0" => idx.and_then(|r| r.k0_index.as_ref()).map(|k| ZValue(k.iter().map(|&x| Complex64::new(x as f64, 0.0)).collect())),
            "index.discrepancy" => idx.map(|r| real(r.discrepancy)),
            "chern.degree0" => ch.map(|c| c.degree0.clone()),
            "chern.degree2_integral" => ch.map(|c| c.degree2_integral.clone()),
            "chern.closedness_residual" => ch.map(|c| real(c.closedness_residual)),
            "cover.base_index" => cov.map(|c| real(c.base_index)),
            "cover.index_per_sheet" => cov.map(|c| real(c.cover_index / c.k as f64)),
            "cover.l2_index" => cov.map(|c| real(c.l2_index)),
            "cover.flat_twist_index" => cov.map(|c| real(c.flat_twist_index)),
            "cover.delocalized" => cov.map(|c| real(c.delocalized_residual())),
            "cover.dictionary_defect" => cov.map(|c| real(c.dictionary_defect)),
            "cover.residual" => cov.map(|c| real(c.residual)),
            "retraction.idempotency" => ret.map(|r| real(r.idempotency)),
            "retraction.min_overlap" => ret.map(|r| real(r.min_overlap)),
            "connection.independence_gap" => self.connection_independence_gap.map(real),
            _ => None,
        }
    }
}

/// Objects built from a validated config.
pub struct Prepared {
    owner: Arc<AlgebraSpec>,
    tau: TraceFunctional,
    t: TraceFunctional,
    bundle: BundleSpec,
    cover: Option<CoverSpec>,
    rng: ChaCha8Rng,
}

/// Builds the algebra, traces and bundle; failures name the config field.
pub fn prepare(s: &Scenario) -> Result<Prepared, ConfigError> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let owner = AlgebraSpec::from_config(&s.algebra).map_err(at("algebra"))?;
    let manifold = if s.grid.manifold == "S1" { Manifold::S1 } else { Manifold::T2 };
    let grid = Grid::new(manifold, s.grid.n).map_err(at("grid"))?;
    let tau = trace(&owner, &s.trace).map_err(at("trace"))?;
    let t = match &s.index_trace {
        Some(c) => trace(&owner, c).map_err(at("index_trace"))?,
        None => tau.clone(),
    };
    if !tau.is_positive() || !tau.is_faithful() {
        return Err(bad("trace", "the fiber trace must be positive and faithful"));
    }
    let bundle = build_bundle(s, &owner, &grid, &mut rng)?;
    let cover = s.cover.as_ref().map(|c| CoverSpec::from_config(&grid, c)).transpose().map_err(at("cover"))?;
    Ok(Prepared { owner, tau, t, bundle, cover, rng })
}

/// Runs every stage of a scenario. Stage failures are recorded, not fatal.
pub fn run(s: &Scenario, prepared: Prepared) -> (ScenarioReport, Artifacts) {
    let Prepared { owner, tau, t, bundle: b, cover, mut rng } = prepared;
    let mut errors = Vec::new();
    let mut report = ScenarioReport {
        scenario: s.name.clone(),
        seed: s.seed,
        algebra: owner.describe(),
        grid_n: s.grid.n,
        operator: None,
        index: None,
        chern: None,
        connection_independence_gap: None,
        retraction: None,
        cover: None,
        expectations: Vec::new(),
        errors: Vec::new(),
        passed: false,
    };
    let mut artifacts = Artifacts { chern: None, curvature: None };
    if s.operator == OperatorConfig::Dolbeault {
        report.operator = Some(OperatorKind::Dolbeault);
        match index_report(&b, &tau, &t, s.tolerances.zero_rel) {
            Ok(r) => report.index = Some(r),
            Err(e) => errors.push(format!("index: {e}")),
        }
    }
    match ch_tau(&b, &tau).and_then(|c| Ok((c.summary()?, c))) {
        Ok((summary, c)) => {
            report.chern = Some(summary);
            artifacts.chern = Some(c);
        }
        Err(e) => errors.push(format!("chern: {e}")),
    }
    match b.curvature() {
        Ok(om) => artifacts.curvature = Some(om),
        Err(e) => errors.push(format!("curvature: {e}")),
    }
    if let Some(pairs) = s.checks.connection_pairs {
        let gap = (|| -> ncindex_core::Result<f64> {
            let mut worst: f64 = 0.0;
            for _ in 0..pairs {
                let b1 = b.perturbed(&random_perturbation(&b, 3, 0.3, &mut rng)?)?;
                let b2 = b.perturbed(&random_perturbation(&b, 3, 0.3, &mut rng)?)?;
                worst = worst.max(connection_independence_gap(&b1, &b2, &tau)?);
            }
            Ok(worst)
        })();
        match gap {
            Ok(g) => report.connection_independence_gap = Some(g),
            Err(e) => errors.push(format!("connection: {e}")),
        }
    }
    if let Some(cfg) = &s.checks.retraction {
        match retraction(&b, cfg, &mut rng) {
            Ok(r) => report.retraction = Some(r),
            Err(e) => errors.push(format!("retraction: {e}")),
        }
    }
    if let Some(c) = &cover {
        match atiyah_check(&b, c.k()) {
            Ok(r) => report.cover = Some(r),
            Err(e) => errors.push(format!("cover: {e}")),
        }
    }
    report.expectations = s
        .expect
        .iter()
        .map(|e| {
            let expected = e.value.to_zvalue();
            let actual = report.quantity(&e.quantity);
            let passed = actual.as_ref().is_some_and(|a| a.len() == expected.len() && a.dist(&expected) <= e.tol);
            ExpectationOutcome { quantity: e.quantity.clone(), expected, actual, tol: e.tol, provenance: e.provenance.clone(), passed }
        })
        .collect();
    report.passed = errors.is_empty() && report.expectations.iter().all(|e| e.passed);
    report.errors = errors;
    (report, artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"name":"t","algebra":{"group":"Z/3"},"grid":{"n":12},"bundle":{"presentation":"automorphy","chern":1}"#;

    fn with(extra: &str) -> String {
        format!("{BASE}{extra}}}")
    }

    #[test]
    fn expected_values_accept_real_complex_and_vectors() {
        let s = Scenario::parse(&with(
            r#","expect":[
                {"quantity":"index.analytic","value":1,"tol":1e-6,"provenance":"a"},
                {"quantity":"index.analytic","value":[1,0],"tol":1e-6,"provenance":"b"},
                {"quantity":"index.analytic","value":[[1,0],[0.5,0]],"tol":1e-6,"provenance":"c"}]"#,
        ))
        .unwrap();
        let lens: Vec<usize> = s.expect.iter().map(|e| e.value.to_zvalue().len()).collect();
        assert_eq!(lens, vec![1, 1, 2]);
    }

    #[test]
    fn traces_and_matrices_parse() {
        let s = Scenario::parse(&with(r#","trace":"canonical","index_trace":{"delocalized":1}"#)).unwrap();
        assert_eq!(s.trace, TraceConfig::Canonical);
        assert_eq!(s.index_trace, Some(TraceConfig::Delocalized(1)));
        let p = prepare(&s).unwrap();
        assert_eq!(p.t.value_len(), 1);

        let cfg = r#"{"name":"t","algebra":{"group":"Z/3"},"grid":{"n":12},
            "bundle":{"presentation":"automorphy","chern":0,"monodromy":{"u":{"delta":1},"v":{"phases":[0,0,0]}}}}"#;
        let s = Scenario::parse(cfg).unwrap();
        assert!(prepare(&s).is_ok());
    }

    #[test]
    fn references_must_resolve() {
        let e = Scenario::parse(&with(r#","expect":[{"quantity":"cover.l2_index","value":1,"tol":1e-6,"provenance":"x"}]"#)).unwrap_err();
        assert_eq!(e.field, "expect[0].quantity");
        let e = Scenario::parse(&with(r#","expect":[{"quantity":"index.size","value":1,"tol":1e-6,"provenance":"x"}]"#)).unwrap_err();
        assert_eq!(e.field, "expect[0].quantity");
        let e = Scenario::parse(&with(r#","tolerances":{"zero_rel":0}"#)).unwrap_err();
        assert_eq!(e.field, "tolerances.zero_rel");
        let e = Scenario::parse(&with(r#","checks":{"retraction":{"trials":3,"delta":0.05}}"#)).unwrap_err();
        assert_eq!(e.field, "checks.retraction");
    }

    #[test]
    fn nonfaithful_fiber_trace_is_a_config_error() {
        let s = Scenario::parse(&with(r#","trace":{"delocalized":1}"#)).unwrap();
        assert_eq!(prepare(&s).err().unwrap().field, "trace");
    }
}
