//! Run configuration: a flat `key = value` text format with `[section]`
//! headers, fully defaulted per problem kind. Every command writes its
//! resolved configuration next to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sampling::{BcSampler, ObstacleSampler, SourceSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Laplace,
    Poisson,
    Obstacle,
    HeatTransient,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Laplace => "laplace",
            ProblemKind::Poisson => "poisson",
            ProblemKind::Obstacle => "obstacle",
            ProblemKind::HeatTransient => "heat-transient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(ProblemKind::Laplace),
            "poisson" => Ok(ProblemKind::Poisson),
            "obstacle" => Ok(ProblemKind::Obstacle),
            "heat-transient" => Ok(ProblemKind::HeatTransient),
            other => Err(Error::Parse(format!(
                "unknown problem '{other}' (expected laplace|poisson|obstacle|heat-transient)"
            ))),
        }
    }

    pub fn is_transient(self) -> bool {
        self == ProblemKind::HeatTransient
    }
}

/// Everything a pipeline run needs, resolved from defaults, a config file and
/// CLI overrides, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [problem]
    pub problem: ProblemKind,
    pub grid_n: usize,
    pub subdomain: usize,

    // [sampling]
    pub seed: u64,
    pub train_cases: usize,
    pub test_cases: usize,
    pub dirichlet_prob: f64,
    pub bc_value_min: f64,
    pub bc_value_max: f64,
    pub source_max_gaussians: usize,
    pub source_amplitude_min: f64,
    pub source_amplitude_max: f64,
    pub source_variance_min: f64,
    pub source_variance_max: f64,
    pub obstacle_center_min: f64,
    pub obstacle_center_max: f64,
    pub obstacle_radius_min: f64,
    pub obstacle_radius_max: f64,
    pub obstacle_value: f64,
    pub heat_max_mode: usize,

    // [latent]
    pub d_u: usize,
    pub d_g: usize,
    pub d_s: usize,
    pub k_history: usize,

    // [training]
    pub lr: f64,
    pub batch: usize,
    pub val_fraction: f64,
    pub mse_target: f64,
    pub mae_target: f64,
    pub max_epochs_solution: usize,
    pub max_epochs_condition: usize,
    pub max_epochs_flux: usize,
    pub max_epochs_time: usize,
    pub hidden_solution: usize,
    pub hidden_condition: usize,
    pub hidden_flux: usize,
    pub hidden_time: usize,
    pub max_solution_rows: usize,
    pub max_flux_rows: usize,
    pub max_time_rows: usize,
    /// Denoising strength for the flux autoencoder (fraction of column std).
    pub flux_input_noise: f64,
    /// Flux bottleneck width; 0 selects `max(8, row_width / 2)`.
    pub flux_bottleneck: usize,

    // [solver]
    pub epsilon_t: f64,
    pub max_iters: usize,
    pub damping: f64,
    pub raw_norm: bool,
    pub transient_epsilon: f64,
    pub transient_max_sweeps: usize,

    // [oracle]
    pub oracle_tol: f64,
    pub alpha: f64,
    pub substeps: usize,
    pub train_snapshots: usize,
    pub test_snapshots: usize,
}

impl RunConfig {
    /// Defaults for one problem kind (case counts follow the shipped
    /// experiment sizes: 300+50 steady, 200+20 obstacle, 500+10 transient).
    pub fn default_for(problem: ProblemKind) -> Self {
        let (train_cases, test_cases) = match problem {
            ProblemKind::Laplace | ProblemKind::Poisson => (300, 50),
            ProblemKind::Obstacle => (200, 20),
            ProblemKind::HeatTransient => (500, 10),
        };
        RunConfig {
            problem,
            grid_n: 64,
            subdomain: 8,
            seed: 7,
            train_cases,
            test_cases,
            dirichlet_prob: 0.7,
            bc_value_min: -1.0,
            bc_value_max: 1.0,
            source_max_gaussians: 25,
            source_amplitude_min: 0.2,
            source_amplitude_max: 1.0,
            source_variance_min: 5e-4,
            source_variance_max: 5e-2,
            obstacle_center_min: 0.3,
            obstacle_center_max: 0.7,
            obstacle_radius_min: 0.08,
            obstacle_radius_max: 0.2,
            obstacle_value: 1.0,
            heat_max_mode: 3,
            d_u: 7,
            d_g: 8,
            d_s: 10,
            k_history: 3,
            lr: 1e-3,
            batch: 64,
            val_fraction: 0.1,
            mse_target: 1e-6,
            mae_target: 1e-3,
            max_epochs_solution: 400,
            max_epochs_condition: 300,
            max_epochs_flux: 800,
            max_epochs_time: 300,
            hidden_solution: 64,
            hidden_condition: 48,
            hidden_flux: 96,
            hidden_time: 96,
            max_solution_rows: 12_000,
            max_flux_rows: 16_000,
            max_time_rows: 24_000,
            flux_input_noise: 0.1,
            flux_bottleneck: 0,
            epsilon_t: 1e-4,
            max_iters: 200,
            damping: 1.0,
            raw_norm: false,
            transient_epsilon: 1e-6,
            transient_max_sweeps: 10,
            oracle_tol: 1e-10,
            alpha: 0.05,
            substeps: 20,
            train_snapshots: 25,
            test_snapshots: 50,
        }
    }

    pub fn bc_sampler(&self) -> BcSampler {
        BcSampler {
            dirichlet_prob: self.dirichlet_prob,
            value_range: (self.bc_value_min, self.bc_value_max),
        }
    }

    pub fn source_sampler(&self) -> SourceSampler {
        SourceSampler {
            max_gaussians: self.source_max_gaussians,
            amplitude_range: (self.source_amplitude_min, self.source_amplitude_max),
            variance_range: (self.source_variance_min, self.source_variance_max),
        }
    }

    pub fn obstacle_sampler(&self) -> ObstacleSampler {
        ObstacleSampler {
            center_range: (self.obstacle_center_min, self.obstacle_center_max),
            radius_range: (self.obstacle_radius_min, self.obstacle_radius_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 2 {
            return Err(Error::Config("grid must have at least 2 cells".into()));
        }
        if self.subdomain == 0 || self.grid_n % self.subdomain != 0 {
            return Err(Error::Config(format!(
                "subdomain size {} does not divide grid {}",
                self.subdomain, self.grid_n
            )));
        }
        if self.train_cases < 2 {
            return Err(Error::Config("need at least 2 training cases".into()));
        }
        if self.test_cases == 0 {
            return Err(Error::Config("need at least 1 test case".into()));
        }
        if !(self.dirichlet_prob > 0.0 && self.dirichlet_prob <= 1.0) {
            return Err(Error::Config("dirichlet_prob must be in (0, 1]".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(Error::Config("val_fraction must be in (0, 0.5]".into()));
        }
        if self.d_u == 0 {
            return Err(Error::Config("d_u must be positive".into()));
        }
        if self.problem.is_transient() && self.k_history == 0 {
            return Err(Error::Config("k_history must be positive for transient runs".into()));
        }
        if self.problem.is_transient() && self.train_snapshots < self.k_history + 1 {
            return Err(Error::Config(
                "train_snapshots must exceed k_history for transient runs".into(),
            ));
        }
        Ok(())
    }

    /// Serializes the fully-resolved configuration (deterministic key order).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[problem]");
        let _ = writeln!(s, "kind = {}", self.problem.name());
        let _ = writeln!(s, "grid = {}", self.grid_n);
        let _ = writeln!(s, "subdomain = {}", self.subdomain);
        let _ = writeln!(s, "\n[sampling]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "train_cases = {}", self.train_cases);
        let _ = writeln!(s, "test_cases = {}", self.test_cases);
        let _ = writeln!(s, "dirichlet_prob = {:?}", self.dirichlet_prob);
        let _ = writeln!(s, "bc_value_min = {:?}", self.bc_value_min);
        let _ = writeln!(s, "bc_value_max = {:?}", self.bc_value_max);
        let _ = writeln!(s, "source_max_gaussians = {}", self.source_max_gaussians);
        let _ = writeln!(s, "source_amplitude_min = {:?}", self.source_amplitude_min);
        let _ = writeln!(s, "source_amplitude_max = {:?}", self.source_amplitude_max);
        let _ = writeln!(s, "source_variance_min = {:?}", self.source_variance_min);
        let _ = writeln!(s, "source_variance_max = {:?}", self.source_variance_max);
        let _ = writeln!(s, "obstacle_center_min = {:?}", self.obstacle_center_min);
        let _ = writeln!(s, "obstacle_center_max = {:?}", self.obstacle_center_max);
        let _ = writeln!(s, "obstacle_radius_min = {:?}", self.obstacle_radius_min);
        let _ = writeln!(s, "obstacle_radius_max = {:?}", self.obstacle_radius_max);
        let _ = writeln!(s, "obstacle_value = {:?}", self.obstacle_value);
        let _ = writeln!(s, "heat_max_mode = {}", self.heat_max_mode);
        let _ = writeln!(s, "\n[latent]");
        let _ = writeln!(s, "d_u = {}", self.d_u);
        let _ = writeln!(s, "d_g = {}", self.d_g);
        let _ = writeln!(s, "d_s = {}", self.d_s);
        let _ = writeln!(s, "k_history = {}", self.k_history);
        let _ = writeln!(s, "\n[training]");
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "val_fraction = {:?}", self.val_fraction);
        let _ = writeln!(s, "mse_target = {:?}", self.mse_target);
        let _ = writeln!(s, "mae_target = {:?}", self.mae_target);
        let _ = writeln!(s, "max_epochs_solution = {}", self.max_epochs_solution);
        let _ = writeln!(s, "max_epochs_condition = {}", self.max_epochs_condition);
        let _ = writeln!(s, "max_epochs_flux = {}", self.max_epochs_flux);
        let _ = writeln!(s, "max_epochs_time = {}", self.max_epochs_time);
        let _ = writeln!(s, "hidden_solution = {}", self.hidden_solution);
        let _ = writeln!(s, "hidden_condition = {}", self.hidden_condition);
        let _ = writeln!(s, "hidden_flux = {}", self.hidden_flux);
        let _ = writeln!(s, "hidden_time = {}", self.hidden_time);
        let _ = writeln!(s, "max_solution_rows = {}", self.max_solution_rows);
        let _ = writeln!(s, "max_flux_rows = {}", self.max_flux_rows);
        let _ = writeln!(s, "max_time_rows = {}", self.max_time_rows);
        let _ = writeln!(s, "flux_input_noise = {:?}", self.flux_input_noise);
        let _ = writeln!(s, "flux_bottleneck = {}", self.flux_bottleneck);
        let _ = writeln!(s, "\n[solver]");
        let _ = writeln!(s, "epsilon_t = {:?}", self.epsilon_t);
        let _ = writeln!(s, "max_iters = {}", self.max_iters);
        let _ = writeln!(s, "damping = {:?}", self.damping);
        let _ = writeln!(s, "raw_norm = {}", self.raw_norm);
        let _ = writeln!(s, "transient_epsilon = {:?}", self.transient_epsilon);
        let _ = writeln!(s, "transient_max_sweeps = {}", self.transient_max_sweeps);
        let _ = writeln!(s, "\n[oracle]");
        let _ = writeln!(s, "tol = {:?}", self.oracle_tol);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "substeps = {}", self.substeps);
        let _ = writeln!(s, "train_snapshots = {}", self.train_snapshots);
        let _ = writeln!(s, "test_snapshots = {}", self.test_snapshots);
        s
    }

    /// Parses a config file. The `[problem] kind` key is read first so the
    /// remaining keys apply on top of the right defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let kind = entries
            .iter()
            .find(|(k, _)| k == "problem.kind")
            .map(|(_, v)| ProblemKind::parse(v))
            .transpose()?
            .unwrap_or(ProblemKind::Laplace);
        let mut cfg = RunConfig::default_for(kind);
        for (key, value) in &entries {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parse(format!("bad value '{v}' for key '{key}'")))
        }
        match key {
            "problem.kind" => self.problem = ProblemKind::parse(value)?,
            "problem.grid" => self.grid_n = p(key, value)?,
            "problem.subdomain" => self.subdomain = p(key, value)?,
            "sampling.seed" => self.seed = p(key, value)?,
            "sampling.train_cases" => self.train_cases = p(key, value)?,
            "sampling.test_cases" => self.test_cases = p(key, value)?,
            "sampling.dirichlet_prob" => self.dirichlet_prob = p(key, value)?,
            "sampling.bc_value_min" => self.bc_value_min = p(key, value)?,
            "sampling.bc_value_max" => self.bc_value_max = p(key, value)?,
            "sampling.source_max_gaussians" => self.source_max_gaussians = p(key, value)?,
            "sampling.source_amplitude_min" => self.source_amplitude_min = p(key, value)?,
            "sampling.source_amplitude_max" => self.source_amplitude_max = p(key, value)?,
            "sampling.source_variance_min" => self.source_variance_min = p(key, value)?,
            "sampling.source_variance_max" => self.source_variance_max = p(key, value)?,
            "sampling.obstacle_center_min" => self.obstacle_center_min = p(key, value)?,
            "sampling.obstacle_center_max" => self.obstacle_center_max = p(key, value)?,
            "sampling.obstacle_radius_min" => self.obstacle_radius_min = p(key, value)?,
            "sampling.obstacle_radius_max" => self.obstacle_radius_max = p(key, value)?,
            "sampling.obstacle_value" => self.obstacle_value = p(key, value)?,
            "sampling.heat_max_mode" => self.heat_max_mode = p(key, value)?,
            "latent.d_u" => self.d_u = p(key, value)?,
            "latent.d_g" => self.d_g = p(key, value)?,
            "latent.d_s" => self.d_s = p(key, value)?,
            "latent.k_history" => self.k_history = p(key, value)?,
            "training.lr" => self.lr = p(key, value)?,
            "training.batch" => self.batch = p(key, value)?,
            "training.val_fraction" => self.val_fraction = p(key, value)?,
            "training.mse_target" => self.mse_target = p(key, value)?,
            "training.mae_target" => self.mae_target = p(key, value)?,
            "training.max_epochs_solution" => self.max_epochs_solution = p(key, value)?,
            "training.max_epochs_condition" => self.max_epochs_condition = p(key, value)?,
            "training.max_epochs_flux" => self.max_epochs_flux = p(key, value)?,
            "training.max_epochs_time" => self.max_epochs_time = p(key, value)?,
            "training.hidden_solution" => self.hidden_solution = p(key, value)?,
            "training.hidden_condition" => self.hidden_condition = p(key, value)?,
            "training.hidden_flux" => self.hidden_flux = p(key, value)?,
            "training.hidden_time" => self.hidden_time = p(key, value)?,
            "training.max_solution_rows" => self.max_solution_rows = p(key, value)?,
            "training.max_flux_rows" => self.max_flux_rows = p(key, value)?,
            "training.max_time_rows" => self.max_time_rows = p(key, value)?,
            "training.flux_input_noise" => self.flux_input_noise = p(key, value)?,
            "training.flux_bottleneck" => self.flux_bottleneck = p(key, value)?,
            "solver.epsilon_t" => self.epsilon_t = p(key, value)?,
            "solver.max_iters" => self.max_iters = p(key, value)?,
            "solver.damping" => self.damping = p(key, value)?,
            "solver.raw_norm" => self.raw_norm = p(key, value)?,
            "solver.transient_epsilon" => self.transient_epsilon = p(key, value)?,
            "solver.transient_max_sweeps" => self.transient_max_sweeps = p(key, value)?,
            "oracle.tol" => self.oracle_tol = p(key, value)?,
            "oracle.alpha" => self.alpha = p(key, value)?,
            "oracle.substeps" => self.substeps = p(key, value)?,
            "oracle.train_snapshots" => self.train_snapshots = p(key, value)?,
            "oracle.test_snapshots" => self.test_snapshots = p(key, value)?,
            other => return Err(Error::Parse(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// Parses `[section]` / `key = value` lines into `section.key` entries.
fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse(format!("line {}: unclosed section", lineno + 1)))?
                .trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Parse(format!("line {}: bad section name", lineno + 1)));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value'", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key or value", lineno + 1)));
        }
        if section.is_empty() {
            return Err(Error::Parse(format!(
                "line {}: key '{key}' outside any [section]",
                lineno + 1
            )));
        }
        out.push((format!("{section}.{key}"), value.to_string()));
    }
    Ok(out)
}
