//! Experiment configs: a JSON tree with `command`, `seed`, `output`, and
//! per-command `problem`, `numeric` and `checks` blocks.

use opincl::penalty::SearchMethod;
use opincl::second_order::{BidiffMode, EstimateKind, EstimatorOptions, Schedule};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SolveInclusion,
    Perturb,
    Penalty,
    Certify,
    SecondOrder,
    GradCheck,
    Dist2Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SolveInclusion => "solve-inclusion",
            Command::Perturb => "perturb",
            Command::Penalty => "penalty",
            Command::Certify => "certify",
            Command::SecondOrder => "second-order",
            Command::GradCheck => "grad-check",
            Command::Dist2Check => "dist2-check",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub problem: Value,
    #[serde(default)]
    pub numeric: Value,
    #[serde(default)]
    pub checks: Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: String,
    pub csv: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: "out".into(), csv: true }
    }
}

/// Parses one block, reporting the full field path on failure. A missing
/// block is read as an empty object so that defaults apply.
pub fn parse_block<T: DeserializeOwned>(block: &str, value: &Value) -> Result<T, CliError> {
    let value = if value.is_null() { Value::Object(Default::default()) } else { value.clone() };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { block.to_string() } else { format!("{block}.{path}") };
        CliError::Input(format!("{at}: {}", e.into_inner()))
    })
}

/// Norm exponent p in [1, inf]; written as a number or "inf".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExponentRepr", into = "ExponentRepr")]
pub struct Exponent(pub f64);

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ExponentRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<ExponentRepr> for Exponent {
    type Error = String;

    fn try_from(r: ExponentRepr) -> Result<Self, String> {
        match r {
            ExponentRepr::Number(p) if p >= 1.0 && p.is_finite() => Ok(Exponent(p)),
            ExponentRepr::Number(p) => Err(format!("exponent must be >= 1 or \"inf\", got {p}")),
            ExponentRepr::Text(s) if s == "inf" => Ok(Exponent(f64::INFINITY)),
            ExponentRepr::Text(s) => Err(format!("exponent must be >= 1 or \"inf\", got {s:?}")),
        }
    }
}

impl From<Exponent> for ExponentRepr {
    fn from(p: Exponent) -> Self {
        if p.0.is_infinite() {
            ExponentRepr::Text("inf".into())
        } else {
            ExponentRepr::Number(p.0)
        }
    }
}

fn p_one() -> Exponent {
    Exponent(1.0)
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GridSpec {
    Interval {
        #[serde(default)]
        t0: f64,
        #[serde(default = "one")]
        t1: f64,
        nodes: usize,
    },
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
        nodes: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindName {
    Volterra,
    Fredholm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    VolterraIdentity,
    VolterraConstant { c: f64 },
    /// K(t, s) = exp(rate (t - s)).
    VolterraExp { rate: f64 },
    FredholmConstant { c: f64 },
    /// K(t, s) = c exp(-rate |t - s|).
    FredholmExp { c: f64, rate: f64 },
    /// Scalar kernel values on node pairs.
    Table { kind: KindName, values: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub kernel: KernelSpec,
    #[serde(default = "one_usize")]
    pub dim: usize,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub declared_norm: Option<f64>,
}

fn sixteen() -> usize {
    16
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MultiMapSpec {
    /// {slope x + offset}.
    Affine {
        slope: f64,
        offset: Vec<f64>,
        #[serde(default)]
        modulus_floor: f64,
    },
    /// Polygonal disc of fixed radius around slope x + offset (2-D).
    AffineBall {
        slope: f64,
        offset: Vec<f64>,
        radius: f64,
        #[serde(default = "sixteen")]
        vertices: usize,
    },
    /// A fixed set, ignoring x.
    ConstantSet {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        convex: bool,
        modulus: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClosedForm {
    Constant {
        value: Vec<f64>,
    },
    /// scale exp(rate t), scalar.
    Exponential {
        #[serde(default = "one")]
        scale: f64,
        rate: f64,
    },
}

// ---- solve-inclusion ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionProblem {
    pub grid: GridSpec,
    pub operator: OperatorSpec,
    pub multimap: MultiMapSpec,
    /// Constant initial guess; zero when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default = "p_one")]
    pub p: Exponent,
    /// Declared growth |F(t,x)| <= alpha + beta |x| for the solution-set bound.
    #[serde(default)]
    pub growth: Option<GrowthSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSpec {
    pub alpha: f64,
    pub beta: f64,
    /// Solves from this many random constant starts.
    #[serde(default = "eight")]
    pub samples: usize,
}

fn eight() -> usize {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InclusionNumeric {
    pub tol: f64,
    pub max_iter: usize,
    /// Also solve on the grid with halved spacing.
    pub refine_check: bool,
}

impl Default for InclusionNumeric {
    fn default() -> Self {
        InclusionNumeric { tol: 1e-12, max_iter: 500, refine_check: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InclusionChecks {
    pub expected_u: Option<ClosedForm>,
    pub expected_tol: f64,
    /// Bound slack must be at most this multiple of the grid spacing.
    pub slack_per_spacing: f64,
    pub max_decay_ratio: Option<f64>,
    pub expected_growth_bound: Option<f64>,
    pub growth_tol: f64,
}

impl Default for InclusionChecks {
    fn default() -> Self {
        InclusionChecks {
            expected_u: None,
            expected_tol: 1e-2,
            slack_per_spacing: 10.0,
            max_decay_ratio: None,
            expected_growth_bound: None,
            growth_tol: 1e-9,
        }
    }
}

// ---- perturb ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbProblem {
    pub grid: GridSpec,
    pub operator: OperatorSpec,
    pub multimap: MultiMapSpec,
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default = "p_one")]
    pub p: Exponent,
    /// Constant perturbation direction; all ones when absent.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    #[serde(default = "default_magnitudes")]
    pub magnitudes: Vec<f64>,
    pub tube_radius: f64,
}

fn default_magnitudes() -> Vec<f64> {
    (1..=8).map(|k| 0.5f64.powi(k)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveNumeric {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveNumeric {
    fn default() -> Self {
        SolveNumeric { tol: 1e-12, max_iter: 500 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbChecks {
    pub require_monotone: bool,
}

impl Default for PerturbChecks {
    fn default() -> Self {
        PerturbChecks { require_monotone: true }
    }
}

// ---- penalty and certify ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrandName {
    /// f = |u|^2.
    ControlSquare,
    /// f = (|x|^2 + |u|^2) / 2.
    HalfQuadratic,
    /// f = |u|_1 + |x|^2 / 2.
    AbsControl,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointName {
    #[default]
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub grid: GridSpec,
    pub operator: OperatorSpec,
    pub multimap: MultiMapSpec,
    pub integrand: IntegrandName,
    #[serde(default)]
    pub endpoint: EndpointName,
    #[serde(default = "p_one")]
    pub p: Exponent,
    /// Constant feasible reference control.
    pub u_bar: Vec<f64>,
    /// Trust-region parameter: the radius is alpha / beta.
    #[serde(default = "one")]
    pub alpha: f64,
}

/// A penalty parameter: a number, "r0", or "max(c,r0)".
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RValue {
    Number(f64),
    Expr(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyNumeric {
    pub r_values: Vec<RValue>,
    /// Constant start for the global minimization; zero when absent.
    pub start: Option<Vec<f64>>,
    pub method: SearchMethod,
    pub budget: usize,
    /// Per-start budget of the trust-region exactness study.
    pub trust_budget: usize,
    pub feasibility_tol: f64,
}

impl Default for PenaltyNumeric {
    fn default() -> Self {
        PenaltyNumeric {
            r_values: vec![RValue::Expr("r0".into()), RValue::Number(10.0)],
            start: None,
            method: SearchMethod::PatternSearch,
            budget: 200_000,
            trust_budget: 50_000,
            feasibility_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfeasibleExpectation {
    pub r: f64,
    pub min_psi: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyChecks {
    pub expect_r0: Option<f64>,
    pub r0_tol: f64,
    pub objective_tol: f64,
    pub expect_infeasible: Vec<InfeasibleExpectation>,
}

impl Default for PenaltyChecks {
    fn default() -> Self {
        PenaltyChecks { expect_r0: None, r0_tol: 1e-12, objective_tol: 1e-4, expect_infeasible: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CertificateSpec {
    Zero,
    /// Constant-in-time multipliers.
    Constant { v_star: Vec<f64>, u_star: Vec<f64>, c1: Vec<f64>, c2: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyProblem {
    pub grid: GridSpec,
    pub operator: OperatorSpec,
    pub multimap: MultiMapSpec,
    pub integrand: IntegrandName,
    #[serde(default)]
    pub endpoint: EndpointName,
    #[serde(default = "p_one")]
    pub p: Exponent,
    pub u_bar: Vec<f64>,
    pub certificate: CertificateSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyNumeric {
    pub probes: usize,
    pub sufficiency_probes: usize,
    pub scale: f64,
}

impl Default for CertifyNumeric {
    fn default() -> Self {
        CertifyNumeric { probes: 64, sufficiency_probes: 1000, scale: 2.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyChecks {
    pub expect_pass: bool,
    pub gap_tol: f64,
    pub improvement_tol: f64,
}

impl Default for CertifyChecks {
    fn default() -> Self {
        CertifyChecks { expect_pass: true, gap_tol: 1e-10, improvement_tol: 1e-6 }
    }
}

// ---- second-order ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    /// <Ax, x> + constant, A square row-major.
    Quadratic {
        a: Vec<f64>,
        #[serde(default)]
        constant: f64,
    },
    SignedSquare,
    #[serde(rename = "example3-half-square", alias = "half-square")]
    HalfSquare,
    AbsProduct,
    MaxOfQuadratics {
        matrices: Vec<Vec<f64>>,
    },
    DistanceSquaredToPolytope {
        vertices: Vec<Vec<f64>>,
    },
    /// Piecewise-linear interpolation of (xs, ys) in one dimension.
    Table1d {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
    Negated {
        of: Box<FieldSpec>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SmoothMapSpec {
    /// x -> B x with B given row-major.
    Linear { rows: usize, cols: usize, b: Vec<f64> },
    /// Scalar polynomial sum c_k x^k.
    Polynomial1d { coeffs: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomQuadratics {
    pub count: usize,
    pub dim: usize,
}

fn twenty() -> usize {
    20
}

fn hundred() -> usize {
    100
}

fn tol9() -> f64 {
    1e-9
}

fn tol8() -> f64 {
    1e-8
}

fn tol6() -> f64 {
    1e-6
}

fn tol3() -> f64 {
    1e-3
}

fn f2plus_local() -> EstimateKind {
    EstimateKind::F2PlusLocal
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SecondOrderCheck {
    /// Compares estimates with the known closed form of a builtin field.
    ClosedForm {
        field: FieldSpec,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        kinds: Vec<EstimateKind>,
        #[serde(default = "twenty")]
        directions: usize,
        #[serde(default = "tol9")]
        tol: f64,
        #[serde(default)]
        schedule: Option<Schedule>,
    },
    /// Lower estimates never exceed upper ones.
    Sandwich {
        field: FieldSpec,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default = "twenty")]
        directions: usize,
    },
    Bidiff {
        field: FieldSpec,
        #[serde(default)]
        x0: f64,
        mode: BidiffMode,
        #[serde(default)]
        expected: Option<[f64; 2]>,
        #[serde(default)]
        expect_empty: bool,
        #[serde(default = "tol9")]
        tol: f64,
    },
    Optimality {
        field: FieldSpec,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default = "twenty")]
        directions: usize,
        expect_necessary: bool,
        /// Some(alpha): sufficient_alpha must be within alpha_tol of it;
        /// None: no sufficient alpha may be reported.
        #[serde(default)]
        expect_alpha: Option<f64>,
        #[serde(default = "tol3")]
        alpha_tol: f64,
    },
    MaxRule {
        #[serde(default)]
        fields: Vec<FieldSpec>,
        #[serde(default)]
        random_quadratics: Option<RandomQuadratics>,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default = "hundred")]
        directions: usize,
        #[serde(default = "f2plus_local")]
        kind: EstimateKind,
        #[serde(default = "tol8")]
        tol: f64,
    },
    ChainRule {
        outer: FieldSpec,
        map: SmoothMapSpec,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default = "hundred")]
        directions: usize,
        #[serde(default = "tol6")]
        tol: f64,
        #[serde(default)]
        schedule: Option<Schedule>,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecondOrderProblem {
    pub estimator: EstimatorOptions,
}

// ---- grad-check ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OcSpec {
    /// x+ = A x + B u, cost x'Qx + u'Ru with diagonal weights.
    Lq { a: Vec<f64>, b: Vec<f64>, q: Vec<f64>, r: Vec<f64>, x0: Vec<f64> },
    /// Random LQ instances with |A|_F = 0.6 and |B|_F = 1.
    RandomLq {
        n: usize,
        m: usize,
        #[serde(default = "one_usize")]
        count: usize,
    },
    /// x+ = 0.5 tanh(x) + 0.5 u, cost |x|^2 + |u|^2.
    Logistic { x0: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlsSpec {
    pub amplitude: f64,
    pub ratio: f64,
}

impl Default for ControlsSpec {
    fn default() -> Self {
        ControlsSpec { amplitude: 1.0, ratio: 0.8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSpec {
    pub instance: OcSpec,
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub controls: ControlsSpec,
}

fn fifty() -> usize {
    50
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradProblem {
    pub instances: Vec<OcSpec>,
    #[serde(default = "fifty")]
    pub horizon: usize,
    #[serde(default)]
    pub controls: ControlsSpec,
    #[serde(default)]
    pub truncation: Option<TruncationSpec>,
    /// Instances whose construction must be refused.
    #[serde(default)]
    pub reject: Vec<OcSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradNumeric {
    pub step: f64,
    pub contraction_trials: usize,
    pub remainder: bool,
}

impl Default for GradNumeric {
    fn default() -> Self {
        GradNumeric { step: 1e-5, contraction_trials: 20, remainder: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradChecks {
    pub max_rel_err: f64,
    pub min_truncation_factor: f64,
}

impl Default for GradChecks {
    fn default() -> Self {
        GradChecks { max_rel_err: 1e-6, min_truncation_factor: 10.0 }
    }
}

// ---- dist2-check ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dist2Problem {
    /// Number of random polytopes.
    pub polytopes: usize,
    pub dim: usize,
    pub vertices: usize,
    pub scale: f64,
    pub trials: usize,
    /// Extra explicit convex sets given by their vertices.
    pub sets: Vec<Vec<Vec<f64>>>,
}

impl Default for Dist2Problem {
    fn default() -> Self {
        Dist2Problem { polytopes: 5, dim: 2, vertices: 6, scale: 1.0, trials: 10_000, sets: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dist2Checks {
    pub tol: f64,
}

impl Default for Dist2Checks {
    fn default() -> Self {
        Dist2Checks { tol: 1e-10 }
    }
}
