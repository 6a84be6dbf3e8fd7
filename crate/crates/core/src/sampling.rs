//! Seed-deterministic random problem generators: boundary conditions,
//! Gaussian-mixture source terms, circular obstacles, transient initial
//! states, and signed-distance-field evaluation.
//!
//! Every sampler is a pure function of `(seed, config)`; reruns are
//! byte-identical. Concurrent sampling uses distinct seeds
//! (`seed = base + sample index`).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fdm::{BcKind, BoundarySpec, Circle, EdgeBc, ObstacleSpec};
use crate::grid::{Field, Grid};

/// Probability that an edge is Dirichlet (the rest are Neumann).
pub const DIRICHLET_PROB: f64 = 0.7;
/// Boundary values are drawn uniformly from this symmetric range.
pub const BC_VALUE_RANGE: (f64, f64) = (-1.0, 1.0);
/// Gaussian-mixture component count range.
pub const SOURCE_GAUSSIANS_MAX: usize = 25;
/// Source amplitudes are drawn uniformly from this range.
pub const SOURCE_AMPLITUDE_RANGE: (f64, f64) = (0.2, 1.0);
/// Source variances are log-uniform over this decade span (area units).
pub const SOURCE_VARIANCE_RANGE: (f64, f64) = (5e-4, 5e-2);
/// Obstacle center coordinate range.
pub const OBSTACLE_CENTER_RANGE: (f64, f64) = (0.3, 0.7);
/// Obstacle radius range.
pub const OBSTACLE_RADIUS_RANGE: (f64, f64) = (0.08, 0.2);

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Boundary-condition sampler parameters (config-overridable).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcSampler {
    pub dirichlet_prob: f64,
    pub value_range: (f64, f64),
}

impl Default for BcSampler {
    fn default() -> Self {
        BcSampler {
            dirichlet_prob: DIRICHLET_PROB,
            value_range: BC_VALUE_RANGE,
        }
    }
}

/// Per-edge boundary conditions: each edge is independently Dirichlet with
/// probability [`DIRICHLET_PROB`], value uniform in [`BC_VALUE_RANGE`],
/// resampled until at least one edge is Dirichlet.
pub fn sample_bc(seed: u64) -> BoundarySpec {
    sample_bc_with(seed, &BcSampler::default())
}

/// [`sample_bc`] with explicit sampler parameters.
pub fn sample_bc_with(seed: u64, params: &BcSampler) -> BoundarySpec {
    let mut rng = rng_for(seed);
    loop {
        let mut edges = Vec::with_capacity(4);
        for _ in 0..4 {
            let kind = if rng.gen::<f64>() < params.dirichlet_prob {
                BcKind::Dirichlet
            } else {
                BcKind::Neumann
            };
            let value = uniform(&mut rng, params.value_range.0, params.value_range.1);
            edges.push(EdgeBc::constant(kind, value));
        }
        let spec = BoundarySpec {
            left: edges[0].clone(),
            right: edges[1].clone(),
            bottom: edges[2].clone(),
            top: edges[3].clone(),
        };
        if spec.dirichlet_count() >= 1 {
            return spec;
        }
    }
}

/// One Gaussian-mixture component: mean, per-axis variance, amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub mean: (f64, f64),
    pub variance: (f64, f64),
    pub amplitude: f64,
}

/// Evaluates a Gaussian mixture at every cell center, clamps the result to be
/// non-negative and scales the maximum to 1.
pub fn gaussian_mixture_field(grid: Grid, comps: &[GaussianComponent]) -> Field {
    let mut field = Field::from_fn(grid, |x, y| {
        comps
            .iter()
            .map(|c| {
                let ex = (x - c.mean.0).powi(2) / (2.0 * c.variance.0)
                    + (y - c.mean.1).powi(2) / (2.0 * c.variance.1);
                c.amplitude * (-ex).exp()
            })
            .sum::<f64>()
    });
    for v in field.values_mut() {
        *v = v.max(0.0);
    }
    let max = field.max();
    if max > 0.0 {
        for v in field.values_mut() {
            *v /= max;
        }
    }
    field
}

/// Source sampler parameters (config-overridable).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSampler {
    pub max_gaussians: usize,
    pub amplitude_range: (f64, f64),
    pub variance_range: (f64, f64),
}

impl Default for SourceSampler {
    fn default() -> Self {
        SourceSampler {
            max_gaussians: SOURCE_GAUSSIANS_MAX,
            amplitude_range: SOURCE_AMPLITUDE_RANGE,
            variance_range: SOURCE_VARIANCE_RANGE,
        }
    }
}

/// Gaussian-mixture source field: up to [`SOURCE_GAUSSIANS_MAX`] components
/// with random means, axis-aligned variances spanning orders of magnitude and
/// random amplitudes; clamped to be non-negative and scaled to a maximum of 1.
pub fn sample_source(seed: u64, grid: Grid) -> Field {
    sample_source_with(seed, grid, &SourceSampler::default())
}

/// [`sample_source`] with explicit sampler parameters.
pub fn sample_source_with(seed: u64, grid: Grid, params: &SourceSampler) -> Field {
    let mut rng = rng_for(seed);
    let n_g = rng.gen_range(1..=params.max_gaussians.max(1));
    let (lv_lo, lv_hi) = (params.variance_range.0.ln(), params.variance_range.1.ln());
    let mut comps = Vec::with_capacity(n_g);
    for _ in 0..n_g {
        let mean = (
            uniform(&mut rng, 0.0, grid.lx()),
            uniform(&mut rng, 0.0, grid.ly()),
        );
        let variance = (
            uniform(&mut rng, lv_lo, lv_hi).exp(),
            uniform(&mut rng, lv_lo, lv_hi).exp(),
        );
        let amplitude = uniform(
            &mut rng,
            params.amplitude_range.0,
            params.amplitude_range.1,
        );
        comps.push(GaussianComponent {
            mean,
            variance,
            amplitude,
        });
    }
    gaussian_mixture_field(grid, &comps)
}

/// Obstacle sampler parameters (config-overridable).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleSampler {
    pub center_range: (f64, f64),
    pub radius_range: (f64, f64),
}

impl Default for ObstacleSampler {
    fn default() -> Self {
        ObstacleSampler {
            center_range: OBSTACLE_CENTER_RANGE,
            radius_range: OBSTACLE_RADIUS_RANGE,
        }
    }
}

/// One random circular obstacle held at `t_obj`.
pub fn sample_obstacle(seed: u64, t_obj: f64) -> ObstacleSpec {
    sample_obstacle_with(seed, t_obj, &ObstacleSampler::default())
}

/// [`sample_obstacle`] with explicit sampler parameters.
pub fn sample_obstacle_with(seed: u64, t_obj: f64, params: &ObstacleSampler) -> ObstacleSpec {
    let mut rng = rng_for(seed);
    let cx = uniform(&mut rng, params.center_range.0, params.center_range.1);
    let cy = uniform(&mut rng, params.center_range.0, params.center_range.1);
    let r = uniform(&mut rng, params.radius_range.0, params.radius_range.1);
    ObstacleSpec {
        circles: vec![Circle { cx, cy, r }],
        t_obj,
    }
}

/// Random sine-series initial state for the transient heat problem:
/// `sum a_mn sin(m pi x) sin(n pi y)` over modes `m, n <= max_mode`, scaled to
/// a maximum absolute value of 1. Compatible with homogeneous Dirichlet walls.
pub fn sample_heat_init(seed: u64, grid: Grid, max_mode: usize) -> Field {
    let mut rng = rng_for(seed);
    let pi = std::f64::consts::PI;
    let mut coeffs = Vec::with_capacity(max_mode * max_mode);
    for m in 1..=max_mode {
        for n in 1..=max_mode {
            coeffs.push((m as f64, n as f64, uniform(&mut rng, -1.0, 1.0)));
        }
    }
    let mut field = Field::from_fn(grid, |x, y| {
        coeffs
            .iter()
            .map(|(m, n, a)| a * (m * pi * x / grid.lx()).sin() * (n * pi * y / grid.ly()).sin())
            .sum::<f64>()
    });
    let max = field.max_abs();
    if max > 0.0 {
        for v in field.values_mut() {
            *v /= max;
        }
    }
    field
}

/// A field whose values are signed distances: negative inside objects,
/// positive outside (graphics convention).
#[derive(Debug, Clone, PartialEq)]
pub struct SdfField(pub Field);

impl SdfField {
    pub fn field(&self) -> &Field {
        &self.0
    }

    pub fn into_field(self) -> Field {
        self.0
    }
}

/// Exact signed distance of a circle union at every cell center. An empty
/// obstacle list yields the large-constant surrogate `diagonal(grid)`.
pub fn evaluate_sdf(obstacle: &ObstacleSpec, grid: Grid) -> SdfField {
    let far = grid.diagonal();
    SdfField(Field::from_fn(grid, |x, y| obstacle.sdf(x, y, far)))
}
