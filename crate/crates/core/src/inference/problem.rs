use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::{minimize, normal_covariance, LeastSquares, LmOptions, StopReason};
use super::stats::lifetime_with_uncertainty;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kinetics::{thermal_state, GeneratorParts, ModelTemplate, ParameterSet, RateParameter};
use crate::propagation::StepPlan;
use crate::sequences::{InitialCondition, PulseSequence, SimulationSettings};
use crate::signal::{bin_average, PLTrace, TraceMode};

/// One measured trace and the conditions that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Bin edges are in sequence time (0 = start of the sequence).
    pub trace: PLTrace,
    pub sequence: PulseSequence,
    pub power_mw: f64,
    pub initial: InitialCondition,
    /// Free-form label such as `thermal` or `polarized`.
    pub tag: String,
    /// Datasets sharing a group share one amplitude. Ungrouped datasets get
    /// their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeParameter {
    pub parameter: RateParameter,
    pub lower: f64,
    pub upper: f64,
}

impl FreeParameter {
    pub fn new(parameter: RateParameter, lower: f64, upper: f64) -> Self {
        FreeParameter { parameter, lower, upper }
    }

    /// Bounds spanning `factor` either side of `value`.
    pub fn around(parameter: RateParameter, value: f64, factor: f64) -> Self {
        FreeParameter {
            parameter,
            lower: value / factor,
            upper: value * factor,
        }
    }

    fn log_bounds(&self) -> (f64, f64) {
        (self.lower.max(self.upper * 1e-12).ln(), self.upper.ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    #[default]
    Sensitivity,
    FiniteDifference,
}

/// Joint weighted least-squares problem over several traces.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub template: ModelTemplate,
    pub fixed: ParameterSet,
    pub free: Vec<FreeParameter>,
    pub datasets: Vec<Dataset>,
    pub fit_background: bool,
    pub settings: SimulationSettings,
    pub execution: Execution,
    pub jacobian: JacobianMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStrategy {
    /// Total starts including the supplied one.
    pub starts: usize,
    pub seed: u64,
    pub options: LmOptions,
}

impl Default for FitStrategy {
    fn default() -> Self {
        FitStrategy {
            starts: 1,
            seed: 0,
            options: LmOptions {
                max_iterations: 100,
                cost_tolerance: 1e-10,
                step_tolerance: 1e-10,
                gradient_tolerance: 1e-8,
                initial_damping: 1e-3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub parameter: RateParameter,
    pub value: f64,
    /// 1σ from the inverse normal matrix; `None` when it is singular.
    pub sigma: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub at_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResidual {
    pub tag: String,
    pub power_mw: f64,
    pub bins: usize,
    pub chi2: f64,
    pub amplitude: f64,
    pub background: f64,
    /// Weighted residuals `(model − data)/σ` per bin.
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    pub index: usize,
    pub start: Vec<f64>,
    pub cost: Option<f64>,
    pub iterations: usize,
    pub reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifetimeEstimate {
    pub tau_ns: f64,
    pub sigma_ns: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameters: Vec<ParameterEstimate>,
    pub fixed: ParameterSet,
    /// Linear-space covariance of the free physics parameters, in the order
    /// of `parameters`.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub datasets: Vec<DatasetResidual>,
    pub cost: f64,
    pub dof: usize,
    pub reduced_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
    pub best_start: usize,
    pub starts: Vec<StartDiagnostics>,
    pub lifetime: Option<LifetimeEstimate>,
    /// Free parameters that are normally held at their reference values.
    pub usually_fixed: Vec<RateParameter>,
    /// Optimum in the internal (log) coordinates.
    pub x: Vec<f64>,
}

impl FitResult {
    pub fn estimate(&self, p: RateParameter) -> Option<f64> {
        self.parameters
            .iter()
            .find(|e| e.parameter == p)
            .map(|e| e.value)
            .or_else(|| self.fixed.get(p))
    }

    /// All parameter values, fixed and fitted.
    pub fn parameter_set(&self) -> ParameterSet {
        let mut ps = self.fixed.clone();
        for e in &self.parameters {
            ps.set(e.parameter, e.value);
        }
        ps
    }
}

struct Experiment {
    plan: StepPlan,
    initial: InitialCondition,
    datasets: Vec<usize>,
}

struct Compiled<'a> {
    problem: &'a FitProblem,
    experiments: Vec<Experiment>,
    group_of: Vec<usize>,
    group_names: Vec<String>,
    sigma: Vec<Vec<f64>>,
    bin_factor: Vec<Vec<f64>>,
    n_free: usize,
}

/// Rates and `∂rate/∂lnθ` at the plan samples of one experiment.
struct ExperimentSignal {
    rates: Vec<f64>,
    sens: Vec<Vec<f64>>,
}

impl FitProblem {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::validation("fit problem has no datasets"));
        }
        if self.free.is_empty() {
            return Err(Error::validation("fit problem has no free parameters"));
        }
        let used = self.template.parameters();
        for f in &self.free {
            if !used.contains(&f.parameter) {
                return Err(Error::validation(format!(
                    "free parameter {} does not appear in model '{}'",
                    f.parameter, self.template.name
                )));
            }
            if !(f.lower >= 0.0) || !(f.upper > f.lower) || !f.upper.is_finite() {
                return Err(Error::validation(format!(
                    "bounds of {} must satisfy 0 <= lower < upper < inf",
                    f.parameter
                )));
            }
        }
        let mut seen = Vec::new();
        for f in &self.free {
            if seen.contains(&f.parameter) {
                return Err(Error::validation(format!("parameter {} listed twice", f.parameter)));
            }
            seen.push(f.parameter);
        }
        for p in used {
            if !seen.contains(&p) && !self.fixed.contains(p) {
                return Err(Error::validation(format!("parameter {p} is neither free nor fixed")));
            }
        }
        for (i, d) in self.datasets.iter().enumerate() {
            d.trace.validate()?;
            d.sequence.validate()?;
            if !(d.power_mw > 0.0) {
                return Err(Error::validation(format!("dataset {i}: power must be > 0")));
            }
        }
        Ok(())
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// Parameter values for internal coordinates `x`.
    pub fn parameters_at(&self, x: &[f64]) -> ParameterSet {
        let mut ps = self.fixed.clone();
        for (f, v) in self.free.iter().zip(x) {
            ps.set(f.parameter, v.exp());
        }
        ps
    }

    fn compile(&self) -> Result<Compiled<'_>> {
        self.validate()?;
        let mut keys: Vec<String> = Vec::new();
        let mut experiments: Vec<Experiment> = Vec::new();
        for (i, d) in self.datasets.iter().enumerate() {
            let seq = d.sequence.with_power(d.power_mw);
            let key = serde_json::to_string(&(&seq, &d.initial)).expect("serializable");
            match keys.iter().position(|k| *k == key) {
                Some(e) => experiments[e].datasets.push(i),
                None => {
                    let plan = self.settings.plan(&seq)?;
                    let end = *plan.sample_times().last().unwrap_or(&0.0);
                    if d.trace.start() < -1e-9 || d.trace.end() > end + 1e-6 {
                        return Err(Error::validation(format!(
                            "dataset {i} ({}) spans [{}, {}] ns outside the simulated [0, {end}] ns",
                            d.tag,
                            d.trace.start(),
                            d.trace.end()
                        )));
                    }
                    keys.push(key);
                    experiments.push(Experiment {
                        plan,
                        initial: d.initial.clone(),
                        datasets: vec![i],
                    });
                }
            }
        }
        let mut group_names: Vec<String> = Vec::new();
        let mut group_of = Vec::with_capacity(self.datasets.len());
        for (i, d) in self.datasets.iter().enumerate() {
            let name = d.amplitude_group.clone().unwrap_or_else(|| format!("dataset-{i}"));
            let g = match group_names.iter().position(|n| *n == name) {
                Some(g) => g,
                None => {
                    group_names.push(name);
                    group_names.len() - 1
                }
            };
            group_of.push(g);
        }
        let mut sigma = Vec::new();
        let mut bin_factor = Vec::new();
        for d in &self.datasets {
            let t = &d.trace;
            match t.mode {
                TraceMode::Counts => {
                    sigma.push(t.values.iter().map(|&c| c.max(1.0).sqrt()).collect());
                    bin_factor.push((0..t.len()).map(|i| t.bin_width(i)).collect());
                }
                TraceMode::Rate => {
                    // Relative weighting keeps the objective invariant under
                    // rescaling a trace together with its amplitude.
                    let mean = t.values.iter().sum::<f64>() / t.len() as f64;
                    let s = if mean > 0.0 { mean } else { 1.0 };
                    sigma.push(vec![s; t.len()]);
                    bin_factor.push(vec![1.0; t.len()]);
                }
            }
        }
        Ok(Compiled {
            problem: self,
            experiments,
            group_of,
            group_names,
            sigma,
            bin_factor,
            n_free: self.free.len(),
        })
    }

    /// Minimise from `start` plus `strategy.starts − 1` log-uniform starts.
    pub fn fit(&self, start: &ParameterSet, strategy: &FitStrategy) -> Result<FitResult> {
        fit_model(self, start, strategy)
    }
}

impl Compiled<'_> {
    fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    fn n_params(&self) -> usize {
        self.n_free + self.n_groups() + if self.problem.fit_background { self.problem.datasets.len() } else { 0 }
    }

    fn n_residuals(&self) -> usize {
        self.problem.datasets.iter().map(|d| d.trace.len()).sum()
    }

    fn simulate(&self, exp: &Experiment, params: &ParameterSet, with_sens: bool) -> Result<ExperimentSignal> {
        let p = self.problem;
        let graph = p.template.instantiate(params)?;
        let parts = GeneratorParts::from_graph(&graph);
        let weights = graph.emission_vector();
        let p0 = exp.initial.populations(&graph)?;
        let thermal = thermal_state(&graph).unwrap_or_else(|_| p0.clone());
        if !with_sens {
            let pops = exp.plan.run(&parts, &p0, &thermal)?;
            let rates = pops.iter().map(|v| weights.dot(v)).collect();
            return Ok(ExperimentSignal { rates, sens: vec![] });
        }
        let mut dparts = Vec::with_capacity(self.n_free);
        let mut dweights = Vec::with_capacity(self.n_free);
        let mut dp0 = Vec::with_capacity(self.n_free);
        for f in &p.free {
            let dp = GeneratorParts::derivative(&p.template, params, f.parameter)?;
            dp0.push(initial_sensitivity(p, &exp.initial, params, f.parameter, &parts, &dp)?);
            dparts.push(dp);
            dweights.push(p.template.emission_derivative(params, f.parameter)?);
        }
        let (pops, sens) = exp.plan.run_with_sensitivity(&parts, &dparts, &p0, &dp0, &thermal)?;
        let rates: Vec<f64> = pops.iter().map(|v| weights.dot(v)).collect();
        let sens = p
            .free
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let theta = params.require(f.parameter).expect("free parameter is set");
                pops.iter()
                    .zip(&sens[j])
                    .map(|(pk, sk)| theta * (weights.dot(sk) + dweights[j].dot(pk)))
                    .collect()
            })
            .collect();
        Ok(ExperimentSignal { rates, sens })
    }

    /// Base (unit-amplitude, zero-background) bin values per dataset and,
    /// optionally, their derivatives with respect to the log parameters.
    #[allow(clippy::type_complexity)]
    fn base(&self, x: &DVector<f64>, mode: Option<JacobianMode>) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
        let p = self.problem;
        let params = p.parameters_at(&x.as_slice()[..self.n_free]);
        let nd = p.datasets.len();
        let with_sens = mode == Some(JacobianMode::Sensitivity);
        let signals = p.execution.map(&self.experiments, |e| self.simulate(e, &params, with_sens));
        let mut base = vec![Vec::new(); nd];
        let mut dbase = vec![Vec::new(); nd];
        for (e, sig) in self.experiments.iter().zip(signals) {
            let sig = sig?;
            let times = e.plan.sample_times();
            for &d in &e.datasets {
                let edges = &p.datasets[d].trace.bin_edges;
                base[d] = bin_average(times, &sig.rates, edges);
                dbase[d] = sig.sens.iter().map(|s| bin_average(times, s, edges)).collect();
            }
        }
        if mode == Some(JacobianMode::FiniteDifference) {
            let cols: Vec<Result<Vec<Vec<f64>>>> = p.execution.map_range(self.n_free, |j| {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let (bp, _) = self.base(&xp, None)?;
                let (bm, _) = self.base(&xm, None)?;
                Ok(bp.iter()
                    .zip(&bm)
                    .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) / (2.0 * h)).collect())
                    .collect())
            });
            for (j, col) in cols.into_iter().enumerate() {
                let col = col?;
                for d in 0..nd {
                    if j == 0 {
                        dbase[d] = Vec::with_capacity(self.n_free);
                    }
                    dbase[d].push(col[d].clone());
                }
            }
        }
        Ok((base, dbase))
    }

    fn nuisance(&self, x: &DVector<f64>, d: usize) -> (f64, f64) {
        let a = x[self.n_free + self.group_of[d]].exp();
        let b = if self.problem.fit_background {
            x[self.n_free + self.n_groups() + d]
        } else {
            0.0
        };
        (a, b)
    }

    fn evaluate(&self, x: &DVector<f64>, mode: Option<JacobianMode>) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let (base, dbase) = self.base(x, mode)?;
        let m = self.n_residuals();
        let mut r = DVector::zeros(m);
        let mut jac = mode.map(|_| DMatrix::zeros(m, self.n_params()));
        let mut row = 0;
        for (d, ds) in self.problem.datasets.iter().enumerate() {
            let (a, b) = self.nuisance(x, d);
            for i in 0..ds.trace.len() {
                let f = self.bin_factor[d][i];
                let s = self.sigma[d][i];
                let model = (a * base[d][i] + b) * f;
                r[row] = (model - ds.trace.values[i]) / s;
                if let Some(j) = jac.as_mut() {
                    for k in 0..self.n_free {
                        j[(row, k)] = a * dbase[d][k][i] * f / s;
                    }
                    j[(row, self.n_free + self.group_of[d])] = a * base[d][i] * f / s;
                    if self.problem.fit_background {
                        j[(row, self.n_free + self.n_groups() + d)] = f / s;
                    }
                }
                row += 1;
            }
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("residuals are not finite"));
        }
        Ok((r, jac))
    }

    /// Internal start vector with least-squares amplitudes for the given
    /// physics parameters.
    fn start_vector(&self, log_theta: &[f64]) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.n_params());
        for (k, v) in log_theta.iter().enumerate() {
            x[k] = *v;
        }
        let (base, _) = self.base(&x, None)?;
        let mut num = vec![0.0; self.n_groups()];
        let mut den = vec![0.0; self.n_groups()];
        for (d, ds) in self.problem.datasets.iter().enumerate() {
            let g = self.group_of[d];
            for i in 0..ds.trace.len() {
                let bf = base[d][i] * self.bin_factor[d][i];
                let w = 1.0 / (self.sigma[d][i] * self.sigma[d][i]);
                num[g] += bf * ds.trace.values[i] * w;
                den[g] += bf * bf * w;
            }
        }
        for g in 0..self.n_groups() {
            let a = if den[g] > 0.0 && num[g] > 0.0 { num[g] / den[g] } else { 1.0 };
            x[self.n_free + g] = a.ln();
        }
        Ok(x)
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n_params();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for (k, f) in self.problem.free.iter().enumerate() {
            let (l, h) = f.log_bounds();
            lo[k] = l;
            hi[k] = h;
        }
        if self.problem.fit_background {
            for d in 0..self.problem.datasets.len() {
                lo[self.n_free + self.n_groups() + d] = 0.0;
            }
        }
        (lo, hi)
    }
}

impl LeastSquares for Compiled<'_> {
    fn n_params(&self) -> usize {
        Compiled::n_params(self)
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(x, None)?.0)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (r, j) = self.evaluate(x, Some(self.problem.jacobian))?;
        Ok((r, j.expect("requested")))
    }
}

/// `∂p₀/∂θ` for the initial condition.
fn initial_sensitivity(
    problem: &FitProblem,
    initial: &InitialCondition,
    params: &ParameterSet,
    parameter: RateParameter,
    parts: &GeneratorParts,
    dparts: &GeneratorParts,
) -> Result<DVector<f64>> {
    let n = parts.dim();
    let InitialCondition::SteadyState { power_mw } = initial else {
        return Ok(DVector::zeros(n));
    };
    let graph = problem.template.instantiate(params)?;
    let ss = graph.steady_state(*power_mw)?;
    if !ss.degenerate() {
        // M·dp = −dM·p with Σdp = 0.
        let m = parts.at(*power_mw);
        let rhs_top = -(dparts.at(*power_mw) * &ss.populations);
        let mut a = DMatrix::zeros(n + 1, n);
        a.view_mut((0, 0), (n, n)).copy_from(&m);
        a.row_mut(n).fill(1.0);
        let mut b = DVector::zeros(n + 1);
        b.rows_mut(0, n).copy_from(&rhs_top);
        return a
            .svd(true, true)
            .solve(&b, 1e-14)
            .map_err(|e| Error::numerical(format!("steady-state sensitivity: {e}")));
    }
    let v = params.require(parameter)?;
    let h = v.abs().max(1e-12) * 1e-6;
    let mut plus = params.clone();
    plus.set(parameter, v + h);
    let mut minus = params.clone();
    minus.set(parameter, (v - h).max(0.0));
    let sp = problem.template.instantiate(&plus)?.steady_state(*power_mw)?.populations;
    let sm = problem.template.instantiate(&minus)?.steady_state(*power_mw)?.populations;
    Ok((sp - sm) / (v + h - (v - h).max(0.0)))
}

/// Bound-constrained multi-start fit of `problem`.
pub fn fit_model(problem: &FitProblem, start: &ParameterSet, strategy: &FitStrategy) -> Result<FitResult> {
    let compiled = problem.compile()?;
    let (lo, hi) = compiled.bounds();
    let nf = compiled.n_free;

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(strategy.starts.max(1));
    let first = problem
        .free
        .iter()
        .map(|f| {
            let v = start.get(f.parameter).or_else(|| problem.fixed.get(f.parameter)).ok_or_else(|| {
                Error::validation(format!("start value for {} missing", f.parameter))
            })?;
            let (l, h) = f.log_bounds();
            Ok(v.max(f64::MIN_POSITIVE).ln().clamp(l, h))
        })
        .collect::<Result<Vec<_>>>()?;
    starts.push(first);
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
    for _ in 1..strategy.starts.max(1) {
        starts.push(
            problem
                .free
                .iter()
                .map(|f| {
                    let (l, h) = f.log_bounds();
                    rng.random_range(l..=h)
                })
                .collect(),
        );
    }

    let x0 = compiled.start_vector(&starts[0])?;
    let r0 = compiled.residuals(&x0)?;
    if !r0.norm_squared().is_finite() {
        return Err(Error::numerical("objective is not finite at the start point"));
    }

    let runs = problem.execution.map(&starts, |s| -> Result<super::lm::LmOutcome> {
        let x = compiled.start_vector(s)?;
        minimize(&compiled, &x, &lo, &hi, &strategy.options)
    });

    let mut diagnostics = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, super::lm::LmOutcome)> = None;
    for (i, (run, s)) in runs.into_iter().zip(&starts).enumerate() {
        let start_values = s.iter().map(|v| v.exp()).collect();
        match run {
            Ok(out) => {
                debug!("start {i}: cost {:.6e} after {} steps ({:?})", out.cost, out.iterations, out.reason);
                diagnostics.push(StartDiagnostics {
                    index: i,
                    start: start_values,
                    cost: Some(out.cost),
                    iterations: out.iterations,
                    reason: Some(out.reason),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| out.cost < b.cost) {
                    best = Some((i, out));
                }
            }
            Err(e) => diagnostics.push(StartDiagnostics {
                index: i,
                start: start_values,
                cost: None,
                iterations: 0,
                reason: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (best_start, out) = best.ok_or_else(|| {
        let msgs: Vec<String> = diagnostics.iter().filter_map(|d| d.error.clone()).collect();
        Error::NonConvergence(format!("every start failed: {}", msgs.join("; ")))
    })?;

    let theta: Vec<f64> = (0..nf).map(|k| out.x[k].exp()).collect();
    let cov_log = normal_covariance(&out.jacobian);
    let covariance = cov_log.as_ref().map(|c| {
        (0..nf)
            .map(|a| (0..nf).map(|b| theta[a] * theta[b] * c[(a, b)]).collect())
            .collect::<Vec<Vec<f64>>>()
    });
    let parameters: Vec<ParameterEstimate> = problem
        .free
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let (l, h) = f.log_bounds();
            let tol = 1e-9 * (h - l).abs().max(1.0);
            ParameterEstimate {
                parameter: f.parameter,
                value: theta[k],
                sigma: covariance.as_ref().map(|c| c[k][k].max(0.0).sqrt()),
                lower: f.lower,
                upper: f.upper,
                at_bound: out.x[k] <= l + tol || out.x[k] >= h - tol,
            }
        })
        .collect();
    for p in parameters.iter().filter(|p| p.at_bound) {
        warn!("parameter {} finished at a bound ({})", p.parameter, p.value);
    }

    let mut datasets = Vec::with_capacity(problem.datasets.len());
    let mut row = 0;
    for (d, ds) in problem.datasets.iter().enumerate() {
        let n = ds.trace.len();
        let res: Vec<f64> = out.residuals.as_slice()[row..row + n].to_vec();
        row += n;
        let (a, b) = compiled.nuisance(&out.x, d);
        datasets.push(DatasetResidual {
            tag: ds.tag.clone(),
            power_mw: ds.power_mw,
            bins: n,
            chi2: res.iter().map(|v| v * v).sum(),
            amplitude: a,
            background: b,
            residuals: res,
        });
    }
    let m = compiled.n_residuals();
    let dof = m.saturating_sub(compiled.n_params());
    let usually_fixed = problem
        .free
        .iter()
        .map(|f| f.parameter)
        .filter(|&p| p == RateParameter::Radiative)
        .collect::<Vec<_>>();
    if !usually_fixed.is_empty() {
        warn!("k_r is being fitted; it is normally held at its reference value");
    }
    let mut result = FitResult {
        parameters,
        fixed: problem.fixed.clone(),
        covariance,
        datasets,
        cost: out.cost,
        dof,
        reduced_chi2: out.cost / dof.max(1) as f64,
        iterations: out.iterations,
        converged: out.reason.converged(),
        reason: out.reason,
        best_start,
        starts: diagnostics,
        lifetime: None,
        usually_fixed,
        x: out.x.iter().copied().collect(),
    };
    result.lifetime = propagate_lifetime(&result).ok();
    Ok(result)
}

/// Singlet lifetime from fitted or fixed `κ₀`, `κ₁` with first-order error
/// propagation through `1000/(κ₀ + 2κ₁)`.
pub fn propagate_lifetime(result: &FitResult) -> Result<LifetimeEstimate> {
    let k0 = result
        .estimate(RateParameter::SingletToZero)
        .ok_or_else(|| Error::validation("kappa0 is not part of the fit"))?;
    let k1 = result
        .estimate(RateParameter::SingletToOne)
        .ok_or_else(|| Error::validation("kappa1 is not part of the fit"))?;
    let idx = |p: RateParameter| result.parameters.iter().position(|e| e.parameter == p);
    let cov = result.covariance.as_ref().map(|c| {
        let get = |a: Option<usize>, b: Option<usize>| match (a, b) {
            (Some(a), Some(b)) => c[a][b],
            _ => 0.0,
        };
        let (i0, i1) = (idx(RateParameter::SingletToZero), idx(RateParameter::SingletToOne));
        [[get(i0, i0), get(i0, i1)], [get(i1, i0), get(i1, i1)]]
    });
    let (tau_ns, sigma_ns) = lifetime_with_uncertainty(k0, k1, cov)?;
    Ok(LifetimeEstimate { tau_ns, sigma_ns })
}

/// Per-group amplitude names in internal order, for reports.
pub fn amplitude_groups(problem: &FitProblem) -> Result<Vec<String>> {
    Ok(problem.compile()?.group_names)
}

/// Weighted residuals at internal coordinates `x`.
pub fn weighted_residuals(problem: &FitProblem, x: &[f64]) -> Result<DVector<f64>> {
    let c = problem.compile()?;
    let x = DVector::from_column_slice(x);
    if x.len() != c.n_params() {
        return Err(Error::validation(format!("expected {} coordinates, got {}", c.n_params(), x.len())));
    }
    Ok(c.evaluate(&x, None)?.0)
}

/// Weighted residuals and Jacobian at internal coordinates `x` using the
/// given Jacobian mode. Exposed for derivative checks.
pub fn residual_jacobian(problem: &FitProblem, x: &[f64], mode: JacobianMode) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let c = problem.compile()?;
    let x = DVector::from_column_slice(x);
    if x.len() != c.n_params() {
        return Err(Error::validation(format!("expected {} coordinates, got {}", c.n_params(), x.len())));
    }
    let (r, j) = c.evaluate(&x, Some(mode))?;
    Ok((r, j.expect("requested")))
}

/// Internal coordinates for physics values `start` with least-squares
/// amplitudes and zero background.
pub fn internal_start(problem: &FitProblem, start: &ParameterSet) -> Result<Vec<f64>> {
    let c = problem.compile()?;
    let logs = problem
        .free
        .iter()
        .map(|f| Ok(start.require(f.parameter)?.ln()))
        .collect::<Result<Vec<_>>>()?;
    Ok(c.start_vector(&logs)?.iter().copied().collect())
}

/// Model bin values per dataset at internal coordinates `x`.
pub fn predict(problem: &FitProblem, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let c = problem.compile()?;
    let x = DVector::from_column_slice(x);
    let (base, _) = c.base(&x, None)?;
    Ok(base
        .iter()
        .enumerate()
        .map(|(d, b)| {
            let (a, bg) = c.nuisance(&x, d);
            b.iter().zip(&c.bin_factor[d]).map(|(v, f)| (a * v + bg) * f).collect()
        })
        .collect())
}

/// Map from parameter to bounds, handy for building problems.
pub fn free_parameters(bounds: &BTreeMap<RateParameter, (f64, f64)>) -> Vec<FreeParameter> {
    bounds.iter().map(|(&p, &(l, h))| FreeParameter::new(p, l, h)).collect()
}
