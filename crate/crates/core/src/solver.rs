//! Unsupervised inference: the steady-state latent fixed-point iteration, the
//! loosely-coupled transient rollout, initialization strategies and the
//! stability sweep.
//!
//! The steady iteration is synchronous (Jacobi): every proposal reads only the
//! previous iterate, then one global update applies them together. The
//! convergence norm is the L2 norm of all stacked latent deltas, divided by
//! `sqrt(subdomain count)` so the tolerance is resolution-comparable
//! (`raw_norm` restores the unscaled norm).

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use crate::encoders::{
    conditions_for_case, decode_solution, encode_solution, flux_update, time_step_latent,
    LatentState, ModelBundle,
};
use crate::error::{Error, Result};
use crate::fdm::{oracle_solve, BoundarySpec, CaseSpec};
use crate::grid::{decompose, interpolate, Field, Grid, SubdomainLayout};

/// How the steady iteration is initialized.
#[derive(Debug, Clone)]
pub enum InitMode {
    /// Encode the all-zero field.
    Zero,
    /// Encode the given fine-grid field.
    Given(Field),
    /// Bilinearly interpolate a coarse-grid field to the fine grid, then encode.
    Coarse(Field),
    /// Add seeded Gaussian noise of `sigma_frac * max|base|` to a fine field.
    Noisy {
        base: Field,
        sigma_frac: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    /// Convergence tolerance on the latent change norm.
    pub epsilon_t: f64,
    pub max_iters: usize,
    /// Damping factor for the latent update; 1 is the plain fixed point.
    pub damping: f64,
    pub init: InitMode,
    /// Skip the `1/sqrt(n_subdomains)` scaling of the convergence norm.
    pub raw_norm: bool,
    /// Inner flux-sweep tolerance for transient steps.
    pub transient_epsilon: f64,
    /// Inner flux-sweep cap for transient steps.
    pub transient_max_sweeps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            epsilon_t: 1e-4,
            max_iters: 200,
            damping: 1.0,
            init: InitMode::Zero,
            raw_norm: false,
            transient_epsilon: 1e-6,
            transient_max_sweeps: 10,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_t > 0.0) {
            return Err(Error::Config("epsilon_t must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!(
                "damping must be in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub epsilon: f64,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub entries: Vec<TraceEntry>,
    pub status: SolveStatus,
}

impl ConvergenceTrace {
    pub fn iterations(&self) -> usize {
        self.entries.len()
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn final_epsilon(&self) -> f64 {
        self.entries.last().map(|e| e.epsilon).unwrap_or(f64::NAN)
    }
}

// ---------------------------------------------------------------------------
// Condition and state preparation
// ---------------------------------------------------------------------------

/// Frozen condition latents for a case under a bundle's schema.
pub fn case_conditions(
    bundle: &ModelBundle,
    case: &CaseSpec,
    layout: &SubdomainLayout,
) -> Result<Array2<f64>> {
    conditions_for_case(
        &bundle.schema,
        &bundle.norm,
        bundle.geo.as_ref(),
        bundle.src.as_ref(),
        layout,
        case,
    )
}

fn initial_field(init: &InitMode, grid: Grid) -> Result<Field> {
    match init {
        InitMode::Zero => Ok(Field::zeros(grid)),
        InitMode::Given(f) => {
            if f.grid() != grid {
                return Err(Error::Shape("given init field grid mismatch".into()));
            }
            Ok(f.clone())
        }
        InitMode::Coarse(coarse) => interpolate(coarse, grid),
        InitMode::Noisy {
            base,
            sigma_frac,
            seed,
        } => {
            if base.grid() != grid {
                return Err(Error::Shape("noisy init base grid mismatch".into()));
            }
            let sigma = sigma_frac * base.max_abs();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut out = base.clone();
            for v in out.values_mut() {
                // Box-Muller
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v += sigma * z;
            }
            Ok(out)
        }
    }
}

/// Coarse-oracle initialization: solve the case with the FDM oracle at
/// `coarse_n` cells per axis and interpolate onto the fine grid.
pub fn init_from_coarse(
    case: &CaseSpec,
    coarse_n: usize,
    fine_grid: Grid,
    tol: f64,
) -> Result<Field> {
    let coarse_grid = Grid::new(coarse_n, coarse_n, fine_grid.lx(), fine_grid.ly())?;
    let coarse_case = CaseSpec {
        bc: case.bc.clone(),
        source: match &case.source {
            Some(src) => Some(interpolate(src, coarse_grid)?),
            None => None,
        },
        obstacle: case.obstacle.clone(),
    };
    let coarse_sol = oracle_solve(&coarse_case, coarse_grid, tol)?;
    interpolate(&coarse_sol, fine_grid)
}

// ---------------------------------------------------------------------------
// Steady fixed point
// ---------------------------------------------------------------------------

/// Synchronous flux proposals for every subdomain, reading only `state`.
pub fn propose_all(
    bundle: &ModelBundle,
    state: &LatentState,
    layout: &SubdomainLayout,
) -> Result<Array2<f64>> {
    let n_sub = layout.subdomain_count();
    let d_u = bundle.schema.d_u;
    let mut proposals = Array2::zeros((n_sub, d_u));
    for k in 0..n_sub {
        let eta = flux_update(&bundle.flux, &bundle.schema, state, layout, k)?;
        for (j, v) in eta.into_iter().enumerate() {
            proposals[[k, j]] = v;
        }
    }
    Ok(proposals)
}

fn change_norm(state: &LatentState, proposals: &Array2<f64>, raw: bool) -> f64 {
    let mut acc = 0.0;
    Zip::from(&state.eta_u).and(proposals).for_each(|a, b| {
        let d = a - b;
        acc += d * d;
    });
    let norm = acc.sqrt();
    if raw {
        norm
    } else {
        norm / (state.eta_u.nrows() as f64).sqrt()
    }
}

/// Runs the damped flux-conservation fixed point on an encoded state until the
/// latent change norm falls to `epsilon_t` or the sweep cap is reached.
fn flux_fixed_point(
    bundle: &ModelBundle,
    state: &mut LatentState,
    layout: &SubdomainLayout,
    epsilon_t: f64,
    max_iters: usize,
    damping: f64,
    raw_norm: bool,
    start: Instant,
) -> Result<ConvergenceTrace> {
    let mut entries = Vec::new();
    let mut status = SolveStatus::MaxIters;
    for iter in 1..=max_iters {
        let proposals = propose_all(bundle, state, layout)?;
        let epsilon = change_norm(state, &proposals, raw_norm);
        if !epsilon.is_finite() {
            return Err(Error::Divergence {
                step: iter,
                message: "latent change norm is not finite".into(),
            });
        }
        Zip::from(&mut state.eta_u)
            .and(&proposals)
            .for_each(|a, &p| *a = (1.0 - damping) * *a + damping * p);
        if !state.is_finite() {
            return Err(Error::Divergence {
                step: iter,
                message: "latent state left the finite range".into(),
            });
        }
        entries.push(TraceEntry {
            iter,
            epsilon,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        if epsilon <= epsilon_t {
            status = SolveStatus::Converged;
            break;
        }
    }
    Ok(ConvergenceTrace { entries, status })
}

/// Steady-state solve: encode the initial field and the case conditions, run
/// the latent fixed point, decode the converged state.
///
/// A `MaxIters` outcome still returns the decoded field; only non-finite
/// latents are an error.
pub fn solve_steady(
    bundle: &ModelBundle,
    case: &CaseSpec,
    grid: Grid,
    cfg: &SolveConfig,
) -> Result<(Field, ConvergenceTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let layout = decompose(grid, bundle.schema.s)?;
    let cond = case_conditions(bundle, case, &layout)?;
    let init = initial_field(&cfg.init, grid)?;
    let eta_u = encode_solution(&bundle.sol.enc, &init, &layout, &bundle.norm)?;
    let mut state = LatentState { eta_u, cond };
    let trace = flux_fixed_point(
        bundle,
        &mut state,
        &layout,
        cfg.epsilon_t,
        cfg.max_iters,
        cfg.damping,
        cfg.raw_norm,
        start,
    )?;
    let field = decode_solution(&bundle.sol.dec, &state, &layout, &bundle.norm)?;
    Ok((field, trace))
}

// ---------------------------------------------------------------------------
// Loosely-coupled transient rollout
// ---------------------------------------------------------------------------

/// Autoregressive transient rollout: each step applies the time-integration
/// network to every subdomain (synchronously), then re-establishes local
/// consistency with flux-conservation sweeps, then decodes the snapshot.
///
/// `init_history` must hold `k_history` consecutive oracle snapshots; the
/// returned fields are the `n_steps` predicted snapshots after the history.
pub fn solve_transient(
    bundle: &ModelBundle,
    bc: &BoundarySpec,
    init_history: &[Field],
    n_steps: usize,
    cfg: &SolveConfig,
) -> Result<(Vec<Field>, Vec<ConvergenceTrace>)> {
    cfg.validate()?;
    let schema = &bundle.schema;
    let k_hist = schema
        .k_history
        .ok_or_else(|| Error::Precondition("bundle has no time-integration model".into()))?;
    let phi = bundle
        .time
        .as_ref()
        .ok_or_else(|| Error::Precondition("bundle has no time-integration model".into()))?;
    if init_history.len() != k_hist {
        return Err(Error::Precondition(format!(
            "transient solve needs {k_hist} history snapshots, got {}",
            init_history.len()
        )));
    }
    let grid = init_history[0].grid();
    let layout = decompose(grid, schema.s)?;
    let case = CaseSpec::laplace(bc.clone());
    let cond = case_conditions(bundle, &case, &layout)?;

    let mut history: Vec<LatentState> = Vec::with_capacity(k_hist);
    for f in init_history {
        if f.grid() != grid {
            return Err(Error::Shape("history snapshots must share one grid".into()));
        }
        let eta_u = encode_solution(&bundle.sol.enc, f, &layout, &bundle.norm)?;
        history.push(LatentState {
            eta_u,
            cond: cond.clone(),
        });
    }

    let n_sub = layout.subdomain_count();
    let mut fields = Vec::with_capacity(n_steps);
    let mut traces = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let start = Instant::now();
        let mut eta_next = Array2::zeros((n_sub, schema.d_u));
        for k in 0..n_sub {
            let eta = time_step_latent(phi, schema, &history, &layout, k)?;
            for (j, v) in eta.into_iter().enumerate() {
                eta_next[[k, j]] = v;
            }
        }
        let mut state = LatentState {
            eta_u: eta_next,
            cond: cond.clone(),
        };
        if !state.is_finite() {
            return Err(Error::Divergence {
                step,
                message: "time integration produced non-finite latents".into(),
            });
        }
        let trace = flux_fixed_point(
            bundle,
            &mut state,
            &layout,
            cfg.transient_epsilon,
            cfg.transient_max_sweeps,
            cfg.damping,
            cfg.raw_norm,
            start,
        )
        .map_err(|e| match e {
            Error::Divergence { message, .. } => Error::Divergence { step, message },
            other => other,
        })?;
        let field = decode_solution(&bundle.sol.dec, &state, &layout, &bundle.norm)?;
        if !field.is_finite() {
            return Err(Error::Divergence {
                step,
                message: "decoded snapshot is not finite".into(),
            });
        }
        fields.push(field);
        traces.push(trace);
        history.remove(0);
        history.push(state);
    }
    Ok((fields, traces))
}

// ---------------------------------------------------------------------------
// Stability sweep
// ---------------------------------------------------------------------------

pub const STABILITY_UNIFORM_RUNS: usize = 25;
pub const STABILITY_FAMILY_RUNS: usize = 3;

#[derive(Debug, Clone)]
pub struct StabilityRun {
    pub family: &'static str,
    pub index: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_field: Field,
}

#[derive(Debug, Clone)]
pub struct StabilityCaseReport {
    pub case_id: String,
    pub runs: Vec<StabilityRun>,
    pub max_pairwise_mae: f64,
    pub all_converged: bool,
    /// The constant-zero run reproduces the standard zero init bit for bit.
    pub zero_init_bitwise_match: bool,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub cases: Vec<StabilityCaseReport>,
}

impl StabilityReport {
    pub fn total_runs(&self) -> usize {
        self.cases.iter().map(|c| c.runs.len()).sum()
    }

    pub fn all_converged(&self) -> bool {
        self.cases.iter().all(|c| c.all_converged)
    }
}

fn random_field(grid: Grid, seed: u64, family: &str) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut values = Vec::with_capacity(grid.cell_count());
    for _ in 0..grid.cell_count() {
        let v = match family {
            "uniform" => rng.gen::<f64>() * 2.0 - 1.0,
            "gaussian" => 0.5 * normal(&mut rng),
            "bimodal" => {
                let sign = if rng.gen::<f64>() < 0.5 { -0.5 } else { 0.5 };
                sign + 0.1 * normal(&mut rng)
            }
            other => panic!("unknown init family {other}"),
        };
        values.push(v.clamp(-1.0, 1.0));
    }
    Field::from_values(grid, values).expect("generated init is finite")
}

/// Robustness study: solves each case from 25 uniform-random initial fields
/// plus scaled-Gaussian, bimodal and constant-offset families (and the
/// constant-zero field, which must match the standard zero init bitwise).
/// Failures are data in the report, not errors.
pub fn stability_sweep(
    bundle: &ModelBundle,
    cases: &[(String, CaseSpec)],
    grid: Grid,
    cfg: &SolveConfig,
    seed: u64,
) -> Result<StabilityReport> {
    let mut reports = Vec::with_capacity(cases.len());
    for (c, (case_id, case)) in cases.iter().enumerate() {
        let mut runs: Vec<StabilityRun> = Vec::new();
        let mut inits: Vec<(&'static str, usize, InitMode)> = Vec::new();
        let case_seed = seed.wrapping_add(1000 * c as u64);
        for i in 0..STABILITY_UNIFORM_RUNS {
            inits.push((
                "uniform",
                i,
                InitMode::Given(random_field(grid, case_seed.wrapping_add(i as u64), "uniform")),
            ));
        }
        for i in 0..STABILITY_FAMILY_RUNS {
            inits.push((
                "gaussian",
                i,
                InitMode::Given(random_field(
                    grid,
                    case_seed.wrapping_add(100 + i as u64),
                    "gaussian",
                )),
            ));
            inits.push((
                "bimodal",
                i,
                InitMode::Given(random_field(
                    grid,
                    case_seed.wrapping_add(200 + i as u64),
                    "bimodal",
                )),
            ));
        }
        for (i, c0) in [-0.5, 0.25, 0.75].iter().enumerate() {
            inits.push((
                "constant",
                i,
                InitMode::Given(Field::constant(grid, *c0)),
            ));
        }
        inits.push(("constant", 3, InitMode::Given(Field::zeros(grid))));

        // reference: the standard zero init
        let zero_cfg = SolveConfig {
            init: InitMode::Zero,
            ..cfg.clone()
        };
        let (zero_field, zero_trace) = solve_steady(bundle, case, grid, &zero_cfg)?;

        for (family, index, init) in inits {
            let run_cfg = SolveConfig {
                init,
                ..cfg.clone()
            };
            let (field, trace) = solve_steady(bundle, case, grid, &run_cfg)?;
            runs.push(StabilityRun {
                family,
                index,
                converged: trace.converged(),
                iterations: trace.iterations(),
                final_field: field,
            });
        }
        let zero_init_bitwise_match = runs
            .iter()
            .find(|r| r.family == "constant" && r.index == 3)
            .map(|r| r.final_field.values() == zero_field.values())
            .unwrap_or(false);
        runs.push(StabilityRun {
            family: "zero",
            index: 0,
            converged: zero_trace.converged(),
            iterations: zero_trace.iterations(),
            final_field: zero_field,
        });

        let mut max_pairwise_mae = 0.0f64;
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                max_pairwise_mae = max_pairwise_mae.max(runs[i].final_field.mae(&runs[j].final_field));
            }
        }
        let all_converged = runs.iter().all(|r| r.converged);
        reports.push(StabilityCaseReport {
            case_id: case_id.clone(),
            runs,
            max_pairwise_mae,
            all_converged,
            zero_init_bitwise_match,
        });
    }
    Ok(StabilityReport { cases: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{AePair, Normalization, ProblemSchema};
    use crate::nn::{Activation, DenseNet};

    /// A random (untrained) bundle: structural properties hold regardless of
    /// the weights.
    fn random_bundle() -> ModelBundle {
        let schema = ProblemSchema::steady(8, 7, None, None);
        ModelBundle {
            schema,
            norm: Normalization::for_domain(2.0f64.sqrt()),
            sol: AePair {
                enc: DenseNet::new(&[64, 24, 7], &[Activation::Tanh, Activation::Linear], 1).unwrap(),
                dec: DenseNet::new(&[15, 24, 64], &[Activation::Tanh, Activation::Linear], 2).unwrap(),
            },
            flux: DenseNet::new(
                &[75, 32, 18, 32, 75],
                &[Activation::Tanh, Activation::Tanh, Activation::Tanh, Activation::Linear],
                3,
            )
            .unwrap(),
            geo: None,
            src: None,
            time: None,
        }
    }

    #[test]
    fn jacobi_proposals_independent_of_order() {
        let bundle = random_bundle();
        let grid = Grid::unit(64).unwrap();
        let layout = decompose(grid, 8).unwrap();
        let case = CaseSpec::laplace(BoundarySpec::all_dirichlet(0.4));
        let cond = case_conditions(&bundle, &case, &layout).unwrap();
        let field = Field::from_fn(grid, |x, y| (x - y) * 0.5);
        let eta_u = encode_solution(&bundle.sol.enc, &field, &layout, &bundle.norm).unwrap();
        let state = LatentState { eta_u, cond };

        let forward = propose_all(&bundle, &state, &layout).unwrap();
        // reversed evaluation order must produce bitwise identical proposals
        let mut reversed = Array2::zeros(forward.raw_dim());
        for k in (0..layout.subdomain_count()).rev() {
            let eta = flux_update(&bundle.flux, &bundle.schema, &state, &layout, k).unwrap();
            for (j, v) in eta.into_iter().enumerate() {
                reversed[[k, j]] = v;
            }
        }
        assert_eq!(forward, reversed);
    }

    #[test]
    fn trace_status_matches_epsilon() {
        // With an untrained bundle the iteration still runs; whatever the
        // status, the trace invariants hold.
        let bundle = random_bundle();
        let grid = Grid::unit(64).unwrap();
        let case = CaseSpec::laplace(BoundarySpec::all_dirichlet(0.1));
        let cfg = SolveConfig {
            max_iters: 30,
            ..SolveConfig::default()
        };
        let (field, trace) = solve_steady(&bundle, &case, grid, &cfg).unwrap();
        assert!(field.is_finite());
        assert!(trace.iterations() <= 30);
        assert!(trace.entries.iter().all(|e| e.epsilon.is_finite()));
        match trace.status {
            SolveStatus::Converged => assert!(trace.final_epsilon() <= cfg.epsilon_t),
            SolveStatus::MaxIters => assert_eq!(trace.iterations(), 30),
        }
        // millis are monotone
        for w in trace.entries.windows(2) {
            assert!(w[1].millis >= w[0].millis);
        }
    }

    #[test]
    fn solve_config_validation() {
        let mut cfg = SolveConfig::default();
        cfg.damping = 0.0;
        assert!(cfg.validate().is_err());
        cfg.damping = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SolveConfig::default();
        cfg.epsilon_t = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_from_coarse_at_fine_resolution_is_oracle() {
        let grid = Grid::unit(64).unwrap();
        let case = CaseSpec::laplace(BoundarySpec {
            left: crate::fdm::EdgeBc::dirichlet(1.0),
            right: crate::fdm::EdgeBc::dirichlet(0.0),
            bottom: crate::fdm::EdgeBc::neumann(0.0),
            top: crate::fdm::EdgeBc::neumann(0.0),
        });
        let oracle = oracle_solve(&case, grid, 1e-10).unwrap();
        let init = init_from_coarse(&case, 64, grid, 1e-10).unwrap();
        // interpolation at identical resolution reproduces the oracle solution
        assert!(init.linf(&oracle) <= 1e-12);
    }

    #[test]
    fn transient_requires_history_and_time_model() {
        let bundle = random_bundle();
        let grid = Grid::unit(64).unwrap();
        let fields = vec![Field::zeros(grid); 3];
        let err = solve_transient(
            &bundle,
            &BoundarySpec::all_dirichlet(0.0),
            &fields,
            2,
            &SolveConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn noisy_init_is_seed_deterministic() {
        let grid = Grid::unit(32).unwrap();
        let base = Field::from_fn(grid, |x, y| x * y);
        let a = initial_field(
            &InitMode::Noisy {
                base: base.clone(),
                sigma_frac: 0.25,
                seed: 5,
            },
            grid,
        )
        .unwrap();
        let b = initial_field(
            &InitMode::Noisy {
                base: base.clone(),
                sigma_frac: 0.25,
                seed: 5,
            },
            grid,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.linf(&base) > 0.0);
    }
}
