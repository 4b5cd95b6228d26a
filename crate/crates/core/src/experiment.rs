//! Experiment orchestration shared by the CLI and the acceptance suite:
//! multi-run, multi-scheme simulations on common arrivals, and offline
//! verification of recorded traces.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdb::{SchemeConfig, SchemeKind, DISTRIBUTED_INITIAL_STEP};
use crate::model::{generate_scenario, GeneratorParams, Scenario};
use crate::power::StepsizeRule;
use crate::scenario_io::{load_scenario, save_scenario};
use crate::sim::{average_curves, draw_arrivals, drift_bound, drift_identity, lyapunov, run_rng, run_with_arrivals, SimTrace, TraceTable};
use crate::stability::{
    axis_directions, check_drift_condition, estimate_epsilon, lambda_from_rates, max_d_delta, random_directions,
    DriftConstants, DriftReport, RateRegionOracle,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScenarioSource {
    File { path: PathBuf },
    Generate(GeneratorParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schemes: Vec<SchemeKind>,
    pub slots: usize,
    pub runs: usize,
    /// Seeds the arrival streams; run `r` uses stream `r`.
    pub seed: u64,
    /// For generated scenarios, draw a fresh layout for every run (seed
    /// `generator.seed + r`) instead of reusing one network.
    pub layout_per_run: bool,
    pub iterations_per_slot: usize,
    pub iterative_initial_step: f64,
    pub kkt_tolerance: f64,
    pub max_iterations: usize,
    /// Add per-queue backlog and rate columns to the trace files.
    pub per_queue: bool,
    pub scenario: ScenarioSource,
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioSource) -> Self {
        Self {
            schemes: SchemeKind::ALL.to_vec(),
            slots: 1000,
            runs: 10,
            seed: 1,
            layout_per_run: true,
            iterations_per_slot: 50,
            iterative_initial_step: DISTRIBUTED_INITIAL_STEP,
            kkt_tolerance: 1e-6,
            max_iterations: 2000,
            per_queue: false,
            scenario,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::Config("at least one scheme is required".into()));
        }
        if self.slots == 0 || self.runs == 0 {
            return Err(Error::Config("slots and runs must be at least 1".into()));
        }
        if self.iterations_per_slot == 0 {
            return Err(Error::Config("iterations per slot must be at least 1".into()));
        }
        self.scheme_config().solver.validate()?;
        self.scheme_config().iterative.validate()
    }

    pub fn scheme_config(&self) -> SchemeConfig<f64> {
        let mut c = SchemeConfig::default();
        c.solver.kkt_tolerance = self.kkt_tolerance;
        c.solver.max_iterations = self.max_iterations;
        c.iterative.kkt_tolerance = self.kkt_tolerance;
        c.iterative.max_iterations = self.max_iterations;
        if let StepsizeRule::Armijo { initial, .. } = &mut c.iterative.stepsize {
            *initial = self.iterative_initial_step;
        }
        c.iterations_per_slot = self.iterations_per_slot;
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// The scenario simulated in run `run`.
    pub fn scenario_for_run(&self, run: usize) -> Result<Scenario<f64>> {
        match &self.scenario {
            ScenarioSource::File { path } => load_scenario(path),
            ScenarioSource::Generate(p) => {
                let mut p = p.clone();
                if self.layout_per_run {
                    p.seed = p.seed.wrapping_add(run as u64);
                }
                generate_scenario(&p)
            }
        }
    }

    fn shared_layout(&self) -> bool {
        matches!(self.scenario, ScenarioSource::File { .. }) || !self.layout_per_run
    }
}

/// Per-slot pathwise checks accumulated over runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathChecks {
    pub slots: usize,
    pub negative_backlog: usize,
    pub queue_bound_violations: usize,
    /// Same inequality with nominal outgoing rates; informative only.
    pub nominal_queue_bound_violations: usize,
    pub conservation_failures: usize,
    pub max_conservation_residual: f64,
    pub drift_violations: usize,
    /// Slots with `B'R̃ < 0`, where the pathwise drift bound can fail.
    pub negative_cross_slots: usize,
    pub drift_violations_with_nonnegative_cross: usize,
    /// Largest relative gap between the realized drift and [`drift_identity`].
    pub max_identity_residual: f64,
    pub ascent_violations: usize,
    pub unconverged_slots: usize,
}

impl PathChecks {
    pub fn absorb<T: crate::Scalar>(&mut self, trace: &SimTrace<T>) {
        let zero = vec![T::zero(); trace.nodes * trace.commodities];
        for (t, r) in trace.rows.iter().enumerate() {
            let u = if t == 0 { &zero } else { &trace.rows[t - 1].backlog };
            let u_prev = if t < 2 { &zero } else { &trace.rows[t - 2].backlog };
            let exact = drift_identity(u, u_prev, &r.arrivals, &r.virtual_rate).as_f64();
            let scale = r.lyapunov.as_f64().abs().max(1.0);
            let gap = (r.realized_drift.as_f64() - exact).abs() / scale;
            self.max_identity_residual = self.max_identity_residual.max(gap);
            self.slots += 1;
            self.negative_backlog += r.backlog.iter().filter(|&&x| x < T::zero()).count();
            self.queue_bound_violations += r.queue_bound_violations;
            self.nominal_queue_bound_violations += r.nominal_queue_bound_violations;
            if !r.conserves() {
                self.conservation_failures += 1;
            }
            self.max_conservation_residual = self.max_conservation_residual.max(r.conservation_residual.as_f64().abs());
            let negative_cross = r.arrival_rate_product < T::zero();
            self.negative_cross_slots += usize::from(negative_cross);
            if !r.drift_bound_holds() {
                self.drift_violations += 1;
                if !negative_cross {
                    self.drift_violations_with_nonnegative_cross += 1;
                }
            }
            self.ascent_violations += r.ascent_violations;
            self.unconverged_slots += usize::from(!r.solver_converged);
        }
    }

    pub fn merge(&mut self, o: &PathChecks) {
        self.slots += o.slots;
        self.negative_backlog += o.negative_backlog;
        self.queue_bound_violations += o.queue_bound_violations;
        self.nominal_queue_bound_violations += o.nominal_queue_bound_violations;
        self.conservation_failures += o.conservation_failures;
        self.max_conservation_residual = self.max_conservation_residual.max(o.max_conservation_residual);
        self.drift_violations += o.drift_violations;
        self.negative_cross_slots += o.negative_cross_slots;
        self.drift_violations_with_nonnegative_cross += o.drift_violations_with_nonnegative_cross;
        self.max_identity_residual = self.max_identity_residual.max(o.max_identity_residual);
        self.ascent_violations += o.ascent_violations;
        self.unconverged_slots += o.unconverged_slots;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: SchemeKind,
    /// Run-averaged total backlog per slot.
    pub mean_curve: Vec<f64>,
    pub run_curves: Vec<Vec<f64>>,
    pub checks: PathChecks,
    /// SHA-256 over the arrival tensors this scheme consumed, in run order.
    pub arrival_checksum: String,
}

impl SchemeSummary {
    fn window_mean(&self, from: usize, to: usize) -> f64 {
        let w = &self.mean_curve[from..to];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }

    pub fn mean_last_half(&self) -> f64 {
        let h = self.mean_curve.len();
        self.window_mean(h / 2, h)
    }

    /// Mean over the third quarter of the horizon.
    pub fn middle_quartile_mean(&self) -> f64 {
        let h = self.mean_curve.len();
        self.window_mean(h / 2, 3 * h / 4)
    }

    pub fn last_quartile_mean(&self) -> f64 {
        let h = self.mean_curve.len();
        self.window_mean(3 * h / 4, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub schemes: Vec<SchemeSummary>,
}

impl ExperimentResult {
    pub fn scheme(&self, kind: SchemeKind) -> Option<&SchemeSummary> {
        self.schemes.iter().find(|s| s.scheme == kind)
    }
}

fn digest_arrivals<T: crate::Scalar>(trace: &SimTrace<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    for r in &trace.rows {
        for x in &r.arrivals {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    h.finalize().into()
}

struct RunOutput {
    curves: Vec<Vec<f64>>,
    checks: Vec<PathChecks>,
    digests: Vec<[u8; 32]>,
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_one(config: &ExperimentConfig, run: usize, out: Option<&Path>) -> Result<RunOutput> {
    let scenario = config.scenario_for_run(run)?;
    if let Some(dir) = out {
        if !config.shared_layout() {
            save_scenario(&scenario, &dir.join(format!("scenario_run{run}.toml")))?;
        }
    }
    let n = scenario.model.node_count();
    let arrivals = draw_arrivals(&scenario.traffic, n, config.slots, &mut run_rng(config.seed, run as u64));
    let sc = config.scheme_config();
    let mut output = RunOutput {
        curves: Vec::new(),
        checks: Vec::new(),
        digests: Vec::new(),
    };
    for &scheme in &config.schemes {
        let trace = run_with_arrivals(&scenario.model, &scenario.traffic, scheme, &arrivals, &sc)?;
        if let Some(dir) = out {
            write_file(&dir.join(format!("trace_{scheme}_run{run}.csv")), |w| trace.write_csv(w, config.per_queue))?;
        }
        let mut checks = PathChecks::default();
        checks.absorb(&trace);
        output.curves.push(trace.total_backlog());
        output.checks.push(checks);
        output.digests.push(digest_arrivals(&trace));
    }
    Ok(output)
}

/// Runs every scheme on the same pre-drawn arrivals for each run and, when
/// `out` is given, writes the config echo, scenario(s), per-run traces,
/// averaged curves, a summary table and a plotting stub into it. Output is
/// a pure function of the config.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    config.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        if config.shared_layout() {
            save_scenario(&config.scenario_for_run(0)?, &dir.join("scenario.toml"))?;
        }
    }
    let runs: Vec<RunOutput> = (0..config.runs)
        .into_par_iter()
        .map(|r| run_one(config, r, out))
        .collect::<Result<_>>()?;

    let mut schemes = Vec::new();
    for (si, &scheme) in config.schemes.iter().enumerate() {
        let run_curves: Vec<Vec<f64>> = runs.iter().map(|r| r.curves[si].clone()).collect();
        let mut checks = PathChecks::default();
        let mut h = Sha256::new();
        for r in &runs {
            checks.merge(&r.checks[si]);
            h.update(r.digests[si]);
        }
        schemes.push(SchemeSummary {
            scheme,
            mean_curve: average_curves(&run_curves)?,
            run_curves,
            checks,
            arrival_checksum: hex::encode(h.finalize()),
        });
    }
    let result = ExperimentResult { schemes };
    if let Some(dir) = out {
        write_outputs(config, &result, dir)?;
    }
    Ok(result)
}

fn write_outputs(config: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<()> {
    for s in &result.schemes {
        write_file(&dir.join(format!("backlog_{}.csv", s.scheme)), |w| {
            write!(w, "slot,mean_total_backlog")?;
            for r in 0..s.run_curves.len() {
                write!(w, ",run{r}")?;
            }
            writeln!(w)?;
            for (t, m) in s.mean_curve.iter().enumerate() {
                write!(w, "{t},{m}")?;
                for c in &s.run_curves {
                    write!(w, ",{}", c[t])?;
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
    }
    write_file(&dir.join("summary.csv"), |w| {
        writeln!(
            w,
            "scheme,runs,slots,mean_last_half,middle_quartile_mean,last_quartile_mean,ascent_violations,queue_bound_violations,conservation_failures,drift_violations,negative_cross_slots,arrival_checksum"
        )?;
        for s in &result.schemes {
            let c = &s.checks;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                s.scheme,
                config.runs,
                config.slots,
                s.mean_last_half(),
                s.middle_quartile_mean(),
                s.last_quartile_mean(),
                c.ascent_violations,
                c.queue_bound_violations,
                c.conservation_failures,
                c.drift_violations,
                c.negative_cross_slots,
                s.arrival_checksum
            )?;
        }
        Ok(())
    })?;
    fs::write(dir.join("plot_backlog.py"), plot_script(&config.schemes))?;
    Ok(())
}

fn plot_script(schemes: &[SchemeKind]) -> String {
    let mut s = String::from(
        "# Plots the run-averaged total backlog of every scheme in this directory.\n\
         import csv\nimport sys\n\nimport matplotlib.pyplot as plt\n\n\
         def curve(name):\n    with open(name) as f:\n        rows = list(csv.DictReader(f))\n    \
         return [int(r['slot']) for r in rows], [float(r['mean_total_backlog']) for r in rows]\n\n",
    );
    s.push_str("for scheme in [");
    for (i, k) in schemes.iter().enumerate() {
        let _ = write!(s, "{}'{k}'", if i > 0 { ", " } else { "" });
    }
    s.push_str(
        "]:\n    x, y = curve(f'backlog_{scheme}.csv')\n    plt.plot(x, y, label=scheme)\n\
         plt.xlabel('slot')\nplt.ylabel('total backlog')\nplt.legend()\n\
         plt.savefig(sys.argv[1] if len(sys.argv) > 1 else 'backlog.png', dpi=150)\n",
    );
    s
}

/// Options of the offline trace verification.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub directions: usize,
    pub epsilon0: f64,
    pub seed: u64,
    pub kkt_tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            directions: 1000,
            epsilon0: 1.0,
            seed: 1,
            kkt_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRow {
    pub slot: usize,
    pub realized_drift: f64,
    pub drift_bound: f64,
    pub bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    /// `None` for an empty trace.
    pub drift: Option<DriftReport<f64>>,
}

impl VerifyReport {
    pub fn bound_violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.bound_holds).count()
    }

    pub fn drift_condition_violations(&self) -> usize {
        self.drift.as_ref().map_or(0, |d| d.violations())
    }

    pub fn drift_condition_checked(&self) -> usize {
        self.drift.as_ref().map_or(0, |d| d.checked())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "slot,V,outside_w0,drift_lhs,drift_violated,realized_drift,drift_bound,bound_holds")?;
        for (i, r) in self.rows.iter().enumerate() {
            let d = self.drift.as_ref().map(|d| &d.slots[i + 1]);
            let v = d.map(|d| d.lyapunov.to_string()).unwrap_or_default();
            let checked = d.is_some_and(|d| d.checked);
            let lhs = d.and_then(|d| d.lhs).map(|x| x.to_string()).unwrap_or_default();
            let viol = d.is_some_and(|d| d.violated);
            writeln!(
                w,
                "{},{v},{},{lhs},{},{},{},{}",
                r.slot,
                u8::from(checked),
                u8::from(viol),
                r.realized_drift,
                r.drift_bound,
                u8::from(r.bound_holds)
            )?;
        }
        Ok(())
    }
}

/// Re-derives the Lyapunov quantities of a recorded trace and evaluates the
/// drift condition outside `W₀`. Requires the per-queue columns; arrivals
/// are recovered as `B[t] = U[t+1] - U[t] + R̃[t]`.
pub fn verify_trace(scenario: &Scenario<f64>, table: &TraceTable, options: &VerifyOptions) -> Result<VerifyReport> {
    if table.slots.is_empty() {
        return Ok(VerifyReport {
            rows: Vec::new(),
            drift: None,
        });
    }
    let n = scenario.model.node_count();
    let kc = scenario.traffic.commodity_count();
    if !table.has_queues() {
        return Err(Error::Precondition("trace has no per-queue columns; rerun with --per-queue".into()));
    }
    let expected: Vec<(usize, usize)> = (0..n * kc).map(|q| (q / kc, q % kc)).collect();
    if table.queues != expected {
        return Err(Error::Precondition("trace queues do not match the scenario".into()));
    }
    let mut path = vec![vec![0.0; n * kc]];
    path.extend(table.backlog.iter().cloned());
    let mut rows = Vec::with_capacity(table.slots.len());
    for (t, &slot) in table.slots.iter().enumerate() {
        let (u, next, r) = (&path[t], &path[t + 1], &table.virtual_rate[t]);
        let prev = if t == 0 { u } else { &path[t - 1] };
        let b: Vec<f64> = (0..n * kc).map(|q| (next[q] - u[q] + r[q]).max(0.0)).collect();
        let realized = lyapunov(next, u) - lyapunov(u, prev);
        let bound = drift_bound(u, prev, &b, r);
        let scale = lyapunov(next, u).abs().max(bound.abs()).max(1.0);
        rows.push(VerifyRow {
            slot,
            realized_drift: realized,
            drift_bound: bound,
            bound_holds: realized <= bound + 1e-9 * scale,
        });
    }
    let solver = crate::SolverConfig {
        kkt_tolerance: options.kkt_tolerance,
        ..Default::default()
    };
    let oracle = RateRegionOracle::new(&scenario.model, &scenario.traffic, solver);
    let a = scenario.traffic.mean_vector(n);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut dirs = random_directions(oracle.mask(), options.directions, &mut rng);
    dirs.extend(axis_directions(oracle.mask()));
    let eps = estimate_epsilon(&oracle, &a, &dirs)?;
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!(
            "the mean arrival vector is not verifiably interior (sampled ε = {eps})"
        )));
    }
    let second = scenario.traffic.second_moment_vector(n);
    let lambda = lambda_from_rates(&second, &table.virtual_rate);
    let max_d = max_d_delta(&oracle, &a, eps, &dirs)?;
    let constants = DriftConstants::new(eps, options.epsilon0, lambda, max_d)?;
    let drift = check_drift_condition(&oracle, &a, &constants, &path)?;
    Ok(VerifyReport {
        rows,
        drift: Some(drift),
    })
}
