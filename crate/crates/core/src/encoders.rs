//! The autoencoder stack: manual boundary-condition encoding, solution
//! autoencoders conditioned at the bottleneck, geometry/source autoencoders,
//! the flux-conservation autoencoder over neighborhood rows, the
//! time-integration network, and model-bundle I/O.
//!
//! Layout conventions:
//! - the BC encoding is an 8-vector of `(type, value)` pairs in face order
//!   left, right, bottom, top; types are Dirichlet=0, Neumann=1, Open=2;
//! - a subdomain block is `[eta_u, bc, eta_g?, eta_s?]`;
//! - a flux row concatenates the blocks of `[self, left, right, down, up]`,
//!   zero-padding missing neighbors;
//! - a time-integration input stacks `k_history` flux rows, oldest first.

use ndarray::{Array2, ArrayView2};
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fdm::BoundarySpec;
use crate::grid::{Field, SubdomainLayout};
use crate::nn::{
    train, train_conditioned_autoencoder, Activation, DenseNet, TrainConfig, TrainOutcome,
};

/// Width of the manual BC encoding: 4 faces x (type index, value).
pub const BC_ENCODING_WIDTH: usize = 8;
/// Type index for faces with no boundary condition imposed.
pub const OPEN_TYPE_INDEX: f64 = 2.0;

// ---------------------------------------------------------------------------
// Problem schema
// ---------------------------------------------------------------------------

/// Which condition channels a problem carries and every latent width derived
/// from them. Network input widths follow from this schema exactly; loading a
/// model bundle re-validates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemSchema {
    /// Subdomain edge length in cells.
    pub s: usize,
    /// Solution latent width.
    pub d_u: usize,
    /// Geometry latent width, when the problem has a geometry channel.
    pub d_g: Option<usize>,
    /// Source latent width, when the problem has a source channel.
    pub d_s: Option<usize>,
    /// History length for transient problems.
    pub k_history: Option<usize>,
}

impl ProblemSchema {
    pub fn steady(s: usize, d_u: usize, d_g: Option<usize>, d_s: Option<usize>) -> Self {
        ProblemSchema {
            s,
            d_u,
            d_g,
            d_s,
            k_history: None,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.s * self.s
    }

    /// Width of the per-subdomain condition vector `[bc, eta_g?, eta_s?]`.
    pub fn cond_width(&self) -> usize {
        BC_ENCODING_WIDTH + self.d_g.unwrap_or(0) + self.d_s.unwrap_or(0)
    }

    /// Width of one subdomain block `[eta_u, cond]`.
    pub fn block_width(&self) -> usize {
        self.d_u + self.cond_width()
    }

    /// Width of a flux-conservation row (5 blocks).
    pub fn flux_row_width(&self) -> usize {
        5 * self.block_width()
    }

    /// Input width of the time-integration network, if transient.
    pub fn time_input_width(&self) -> Option<usize> {
        self.k_history.map(|k| k * self.flux_row_width())
    }

    /// Columns of a flux row holding solution latents (the iterated part).
    pub fn eta_u_columns(&self) -> Vec<usize> {
        let bw = self.block_width();
        (0..5)
            .flat_map(|slot| (0..self.d_u).map(move |j| slot * bw + j))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        let text = format!(
            "schema v1\ns {}\nd_u {}\nd_g {}\nd_s {}\nk_history {}\n",
            self.s,
            self.d_u,
            opt(self.d_g),
            opt(self.d_s),
            opt(self.k_history),
        );
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("schema v1") {
            return Err(Error::Load("unsupported schema header".into()));
        }
        let mut s = None;
        let mut d_u = None;
        let mut d_g = None;
        let mut d_s = None;
        let mut k_history = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once(' ')
                .ok_or_else(|| Error::Load(format!("bad schema line '{line}'")))?;
            let parse_opt = |v: &str| -> Result<Option<usize>> {
                if v == "-" {
                    Ok(None)
                } else {
                    v.parse::<usize>()
                        .map(Some)
                        .map_err(|_| Error::Load(format!("bad schema value '{v}'")))
                }
            };
            match key {
                "s" => s = parse_opt(val)?,
                "d_u" => d_u = parse_opt(val)?,
                "d_g" => d_g = Some(parse_opt(val)?),
                "d_s" => d_s = Some(parse_opt(val)?),
                "k_history" => k_history = Some(parse_opt(val)?),
                other => return Err(Error::Load(format!("unknown schema key '{other}'"))),
            }
        }
        let schema = ProblemSchema {
            s: s.ok_or_else(|| Error::Load("schema missing 's'".into()))?,
            d_u: d_u.ok_or_else(|| Error::Load("schema missing 'd_u'".into()))?,
            d_g: d_g.ok_or_else(|| Error::Load("schema missing 'd_g'".into()))?,
            d_s: d_s.ok_or_else(|| Error::Load("schema missing 'd_s'".into()))?,
            k_history: k_history.ok_or_else(|| Error::Load("schema missing 'k_history'".into()))?,
        };
        if schema.s == 0 || schema.d_u == 0 {
            return Err(Error::Load("schema sizes must be positive".into()));
        }
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Invertible affine map: `normalized = (raw - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        if !(scale != 0.0 && scale.is_finite() && offset.is_finite()) {
            return Err(Error::Config(format!("bad affine map scale={scale} offset={offset}")));
        }
        Ok(Affine { scale, offset })
    }

    #[inline]
    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    #[inline]
    pub fn denormalize(&self, n: f64) -> f64 {
        n * self.scale + self.offset
    }

    pub fn normalize_slice(&self, vs: &mut [f64]) {
        for v in vs {
            *v = self.normalize(*v);
        }
    }
}

/// Per-channel normalization constants stored next to the model bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub solution: Affine,
    pub source: Affine,
    pub sdf: Affine,
}

impl Normalization {
    /// Solution values already live in the BC sampling range [-1, 1], sources
    /// in [0, 1] by construction; the SDF is divided by the domain diagonal.
    pub fn for_domain(diagonal: f64) -> Self {
        Normalization {
            solution: Affine::identity(),
            source: Affine::identity(),
            sdf: Affine {
                scale: diagonal,
                offset: 0.0,
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let line = |a: &Affine| format!("{:?} {:?}", a.scale, a.offset);
        let text = format!(
            "norm v1\nsolution {}\nsource {}\nsdf {}\n",
            line(&self.solution),
            line(&self.source),
            line(&self.sdf),
        );
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("norm v1") {
            return Err(Error::Load("unsupported norm header".into()));
        }
        let mut out = Normalization::for_domain(1.0);
        let mut seen = 0;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Load(format!("bad norm line '{line}'")));
            }
            let scale: f64 = parts[1]
                .parse()
                .map_err(|_| Error::Load(format!("bad norm scale '{}'", parts[1])))?;
            let offset: f64 = parts[2]
                .parse()
                .map_err(|_| Error::Load(format!("bad norm offset '{}'", parts[2])))?;
            let affine = Affine::new(scale, offset).map_err(|e| Error::Load(e.to_string()))?;
            match parts[0] {
                "solution" => out.solution = affine,
                "source" => out.source = affine,
                "sdf" => out.sdf = affine,
                other => return Err(Error::Load(format!("unknown norm channel '{other}'"))),
            }
            seen += 1;
        }
        if seen != 3 {
            return Err(Error::Load("norm file must define all three channels".into()));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Boundary-condition encoding
// ---------------------------------------------------------------------------

/// Manual BC encoding for subdomain `k`: per face `(type, value)` with types
/// Dirichlet=0, Neumann=1, Open=2. Faces on the global boundary inherit the
/// matching edge's type and value; interior faces are `(2, 0)`.
pub fn encode_bc(
    layout: &SubdomainLayout,
    bc: &BoundarySpec,
    k: usize,
) -> Result<[f64; BC_ENCODING_WIDTH]> {
    if k >= layout.subdomain_count() {
        return Err(Error::Index(format!(
            "subdomain {k} out of range ({})",
            layout.subdomain_count()
        )));
    }
    let (kx, ky) = layout.coords(k);
    let mut enc = [0.0; BC_ENCODING_WIDTH];
    let faces = [
        (kx == 0, &bc.left),
        (kx == layout.ns_x() - 1, &bc.right),
        (ky == 0, &bc.bottom),
        (ky == layout.ns_y() - 1, &bc.top),
    ];
    for (f, (on_boundary, edge)) in faces.into_iter().enumerate() {
        if on_boundary {
            let value = edge.constant_value().ok_or_else(|| {
                Error::Config("BC encoding requires constant edge values".into())
            })?;
            enc[2 * f] = edge.kind.type_index();
            enc[2 * f + 1] = value;
        } else {
            enc[2 * f] = OPEN_TYPE_INDEX;
            enc[2 * f + 1] = 0.0;
        }
    }
    Ok(enc)
}

// ---------------------------------------------------------------------------
// Latent state
// ---------------------------------------------------------------------------

/// Per-subdomain latent vectors: solution latents (updated by the solver) and
/// frozen condition vectors `[bc, eta_g?, eta_s?]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub eta_u: Array2<f64>,
    pub cond: Array2<f64>,
}

impl LatentState {
    pub fn subdomain_count(&self) -> usize {
        self.eta_u.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.eta_u.iter().all(|v| v.is_finite())
    }
}

/// Encodes every subdomain patch of a solution field.
pub fn encode_solution(
    enc: &DenseNet,
    field: &Field,
    layout: &SubdomainLayout,
    norm: &Normalization,
) -> Result<Array2<f64>> {
    let n_sub = layout.subdomain_count();
    let mut out = Array2::zeros((n_sub, enc.output_size()));
    for k in 0..n_sub {
        let mut patch = layout.extract_patch(field, k)?;
        norm.solution.normalize_slice(&mut patch);
        let eta = enc.forward(&patch)?;
        for (j, v) in eta.into_iter().enumerate() {
            out[[k, j]] = v;
        }
    }
    Ok(out)
}

/// Decodes a latent state back to a field via the conditioned decoder.
pub fn decode_solution(
    dec: &DenseNet,
    state: &LatentState,
    layout: &SubdomainLayout,
    norm: &Normalization,
) -> Result<Field> {
    let n_sub = layout.subdomain_count();
    let mut field = Field::zeros(layout.grid());
    let mut input = vec![0.0; state.eta_u.ncols() + state.cond.ncols()];
    for k in 0..n_sub {
        let d_u = state.eta_u.ncols();
        input[..d_u].copy_from_slice(state.eta_u.row(k).to_slice().unwrap());
        input[d_u..].copy_from_slice(state.cond.row(k).to_slice().unwrap());
        let mut patch = dec.forward(&input)?;
        for v in &mut patch {
            *v = norm.solution.denormalize(*v);
        }
        layout.write_patch(&mut field, k, &patch)?;
    }
    Ok(field)
}

/// Encodes patches of a (geometry or source) field through a plain encoder.
pub fn encode_condition_field(
    enc: &DenseNet,
    field: &Field,
    layout: &SubdomainLayout,
    affine: &Affine,
) -> Result<Array2<f64>> {
    let n_sub = layout.subdomain_count();
    let mut out = Array2::zeros((n_sub, enc.output_size()));
    for k in 0..n_sub {
        let mut patch = layout.extract_patch(field, k)?;
        affine.normalize_slice(&mut patch);
        let eta = enc.forward(&patch)?;
        for (j, v) in eta.into_iter().enumerate() {
            out[[k, j]] = v;
        }
    }
    Ok(out)
}

/// Assembles the frozen condition matrix `[bc | eta_g? | eta_s?]`.
pub fn build_cond(
    schema: &ProblemSchema,
    layout: &SubdomainLayout,
    bc: &BoundarySpec,
    geo_latents: Option<&Array2<f64>>,
    src_latents: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let n_sub = layout.subdomain_count();
    if schema.d_g.is_some() != geo_latents.is_some() || schema.d_s.is_some() != src_latents.is_some()
    {
        return Err(Error::Shape(
            "condition channels must match the problem schema".into(),
        ));
    }
    let mut cond = Array2::zeros((n_sub, schema.cond_width()));
    for k in 0..n_sub {
        let bc_enc = encode_bc(layout, bc, k)?;
        for (j, v) in bc_enc.iter().enumerate() {
            cond[[k, j]] = *v;
        }
        let mut col = BC_ENCODING_WIDTH;
        if let (Some(d_g), Some(g)) = (schema.d_g, geo_latents) {
            if g.ncols() != d_g || g.nrows() != n_sub {
                return Err(Error::Shape("geometry latents do not match schema".into()));
            }
            for j in 0..d_g {
                cond[[k, col + j]] = g[[k, j]];
            }
            col += d_g;
        }
        if let (Some(d_s), Some(s)) = (schema.d_s, src_latents) {
            if s.ncols() != d_s || s.nrows() != n_sub {
                return Err(Error::Shape("source latents do not match schema".into()));
            }
            for j in 0..d_s {
                cond[[k, col + j]] = s[[k, j]];
            }
        }
    }
    Ok(cond)
}

/// Frozen condition latents for one problem instance: encodes the obstacle
/// SDF and/or source field through the trained condition encoders (when the
/// schema carries those channels) and prepends the manual BC encoding.
#[allow(clippy::too_many_arguments)]
pub fn conditions_for_case(
    schema: &ProblemSchema,
    norm: &Normalization,
    geo: Option<&AePair>,
    src: Option<&AePair>,
    layout: &SubdomainLayout,
    case: &crate::fdm::CaseSpec,
) -> Result<Array2<f64>> {
    let geo_latents = match (schema.d_g, geo) {
        (Some(_), Some(geo)) => {
            let obstacle = case
                .obstacle
                .clone()
                .unwrap_or_else(crate::fdm::ObstacleSpec::empty);
            let sdf = crate::sampling::evaluate_sdf(&obstacle, layout.grid()).into_field();
            Some(encode_condition_field(&geo.enc, &sdf, layout, &norm.sdf)?)
        }
        (None, None) => {
            if case.obstacle.is_some() {
                return Err(Error::Config(
                    "case has an obstacle but the schema has no geometry channel".into(),
                ));
            }
            None
        }
        _ => return Err(Error::Shape("geometry channel inconsistent with schema".into())),
    };
    let src_latents = match (schema.d_s, src) {
        (Some(_), Some(src)) => {
            let field = case.source.as_ref().ok_or_else(|| {
                Error::Precondition("schema expects a source field for every case".into())
            })?;
            Some(encode_condition_field(&src.enc, field, layout, &norm.source)?)
        }
        (None, None) => {
            if case.source.is_some() {
                return Err(Error::Config(
                    "case has a source but the schema has no source channel".into(),
                ));
            }
            None
        }
        _ => return Err(Error::Shape("source channel inconsistent with schema".into())),
    };
    build_cond(schema, layout, &case.bc, geo_latents.as_ref(), src_latents.as_ref())
}

// ---------------------------------------------------------------------------
// Flux-conservation rows
// ---------------------------------------------------------------------------

fn write_block(schema: &ProblemSchema, state: &LatentState, k: Option<usize>, out: &mut [f64]) {
    let bw = schema.block_width();
    debug_assert_eq!(out.len(), bw);
    match k {
        Some(k) => {
            out[..schema.d_u].copy_from_slice(state.eta_u.row(k).to_slice().unwrap());
            out[schema.d_u..].copy_from_slice(state.cond.row(k).to_slice().unwrap());
        }
        None => out.fill(0.0),
    }
}

/// Concatenated `[self, left, right, down, up]` blocks for subdomain `k`;
/// absent neighbors are zero-padded.
pub fn build_flux_row(
    schema: &ProblemSchema,
    state: &LatentState,
    layout: &SubdomainLayout,
    k: usize,
) -> Result<Vec<f64>> {
    let bw = schema.block_width();
    let mut row = vec![0.0; schema.flux_row_width()];
    let [l, r, d, u] = layout.neighbor_indices(k)?;
    for (slot, kk) in [Some(k), l, r, d, u].into_iter().enumerate() {
        write_block(schema, state, kk, &mut row[slot * bw..(slot + 1) * bw]);
    }
    Ok(row)
}

/// Stacks flux rows over every subdomain of every solved case.
/// Row count is `states.len() * subdomain_count`.
pub fn build_flux_dataset(
    schema: &ProblemSchema,
    states: &[LatentState],
    layout: &SubdomainLayout,
) -> Result<Array2<f64>> {
    let n_sub = layout.subdomain_count();
    let width = schema.flux_row_width();
    let mut rows = Array2::zeros((states.len() * n_sub, width));
    for (c, state) in states.iter().enumerate() {
        if state.eta_u.ncols() != schema.d_u || state.cond.ncols() != schema.cond_width() {
            return Err(Error::Shape("latent state does not match schema".into()));
        }
        for k in 0..n_sub {
            let row = build_flux_row(schema, state, layout, k)?;
            for (j, v) in row.into_iter().enumerate() {
                rows[[c * n_sub + k, j]] = v;
            }
        }
    }
    Ok(rows)
}

/// Evaluates the flux-conservation autoencoder on subdomain `k`'s neighborhood
/// row and returns the reconstructed center solution latent. Reconstructed
/// condition blocks are discarded; conditions are never updated.
pub fn flux_update(
    theta: &DenseNet,
    schema: &ProblemSchema,
    state: &LatentState,
    layout: &SubdomainLayout,
    k: usize,
) -> Result<Vec<f64>> {
    if theta.input_size() != schema.flux_row_width() {
        return Err(Error::Shape(format!(
            "flux net width {} != schema row width {}",
            theta.input_size(),
            schema.flux_row_width()
        )));
    }
    let row = build_flux_row(schema, state, layout, k)?;
    let out = theta.forward(&row)?;
    Ok(out[..schema.d_u].to_vec())
}

// ---------------------------------------------------------------------------
// Time-integration rows
// ---------------------------------------------------------------------------

/// Concatenated neighborhood rows over `k_history` consecutive states
/// (oldest first) for subdomain `k`.
pub fn build_time_input(
    schema: &ProblemSchema,
    history: &[LatentState],
    layout: &SubdomainLayout,
    k: usize,
) -> Result<Vec<f64>> {
    let k_hist = schema
        .k_history
        .ok_or_else(|| Error::Precondition("schema has no history length".into()))?;
    if history.len() != k_hist {
        return Err(Error::Precondition(format!(
            "need {k_hist} history states, got {}",
            history.len()
        )));
    }
    let rw = schema.flux_row_width();
    let mut input = vec![0.0; k_hist * rw];
    for (t, state) in history.iter().enumerate() {
        let row = build_flux_row(schema, state, layout, k)?;
        input[t * rw..(t + 1) * rw].copy_from_slice(&row);
    }
    Ok(input)
}

/// Predicts the center subdomain's next-step solution latent.
pub fn time_step_latent(
    phi: &DenseNet,
    schema: &ProblemSchema,
    history: &[LatentState],
    layout: &SubdomainLayout,
    k: usize,
) -> Result<Vec<f64>> {
    let width = schema
        .time_input_width()
        .ok_or_else(|| Error::Precondition("schema has no history length".into()))?;
    if phi.input_size() != width {
        return Err(Error::Shape(format!(
            "time net width {} != schema input width {width}",
            phi.input_size()
        )));
    }
    let input = build_time_input(schema, history, layout, k)?;
    phi.forward(&input)
}

// ---------------------------------------------------------------------------
// Training wrappers
// ---------------------------------------------------------------------------

/// Encoder/decoder pair trained jointly.
#[derive(Debug, Clone)]
pub struct AePair {
    pub enc: DenseNet,
    pub dec: DenseNet,
}

/// Solution autoencoder: encoder `s^2 -> d_u`, decoder conditioned at the
/// bottleneck `[d_u + cond_width] -> s^2`. Stops at the A-series thresholds
/// from the training config.
pub fn train_solution_ae(
    patches: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    d_u: usize,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(AePair, TrainOutcome)> {
    let p = patches.ncols();
    let mut enc = DenseNet::new(
        &[p, hidden, d_u],
        &[Activation::Tanh, Activation::Linear],
        cfg.seed.wrapping_add(1),
    )?;
    let mut dec = DenseNet::new(
        &[d_u + cond.ncols(), hidden, p],
        &[Activation::Tanh, Activation::Linear],
        cfg.seed.wrapping_add(2),
    )?;
    let outcome = train_conditioned_autoencoder(&mut enc, &mut dec, patches, cond, cfg)?;
    Ok((AePair { enc, dec }, outcome))
}

/// Unconditioned autoencoder for geometry or source patches.
pub fn train_plain_ae(
    patches: ArrayView2<f64>,
    d_latent: usize,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(AePair, TrainOutcome)> {
    let empty = Array2::zeros((patches.nrows(), 0));
    let p = patches.ncols();
    let mut enc = DenseNet::new(
        &[p, hidden, d_latent],
        &[Activation::Tanh, Activation::Linear],
        cfg.seed.wrapping_add(1),
    )?;
    let mut dec = DenseNet::new(
        &[d_latent, hidden, p],
        &[Activation::Tanh, Activation::Linear],
        cfg.seed.wrapping_add(2),
    )?;
    let outcome = train_conditioned_autoencoder(&mut enc, &mut dec, patches, empty.view(), cfg)?;
    Ok((AePair { enc, dec }, outcome))
}

/// Bottleneck width of the flux-conservation autoencoder.
pub fn flux_bottleneck(row_width: usize) -> usize {
    (row_width / 4).max(8)
}

/// Flux-conservation autoencoder over neighborhood rows (input = output).
///
/// `noise_frac > 0` turns on denoising: the solution-latent blocks of the
/// input rows are corrupted during training (conditions stay exact, as they
/// are at inference), which makes the iterated update contract toward the
/// manifold of locally-consistent neighborhoods.
pub fn train_flux_ae(
    schema: &ProblemSchema,
    rows: ArrayView2<f64>,
    hidden: usize,
    bottleneck: usize,
    noise_frac: f64,
    cfg: &TrainConfig,
) -> Result<(DenseNet, TrainOutcome)> {
    let w = rows.ncols();
    if w != schema.flux_row_width() {
        return Err(Error::Shape(format!(
            "row width {w} != schema flux width {}",
            schema.flux_row_width()
        )));
    }
    let bneck = if bottleneck == 0 { flux_bottleneck(w) } else { bottleneck };
    let mut net = DenseNet::new(
        &[w, hidden, bneck, hidden, w],
        &[
            Activation::Tanh,
            Activation::Tanh,
            Activation::Tanh,
            Activation::Linear,
        ],
        cfg.seed.wrapping_add(3),
    )?;
    let noise = crate::nn::InputNoise {
        frac: noise_frac,
        cols: schema.eta_u_columns(),
    };
    let outcome = crate::nn::train_denoising(&mut net, rows, rows, &noise, cfg)?;
    Ok((net, outcome))
}

/// Time-integration network: stacked history rows to next-step center latent.
pub fn train_time_ae(
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(DenseNet, TrainOutcome)> {
    let mut net = DenseNet::new(
        &[inputs.ncols(), hidden, targets.ncols()],
        &[Activation::Tanh, Activation::Linear],
        cfg.seed.wrapping_add(4),
    )?;
    let outcome = train(&mut net, inputs, targets, cfg)?;
    Ok((net, outcome))
}

// ---------------------------------------------------------------------------
// Model bundle I/O
// ---------------------------------------------------------------------------

fn save_pair(pair: &AePair, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        use std::io::Write;
        writeln!(&mut buf, "ae-pair v1")?;
    }
    pair.enc.write_into(&mut buf)?;
    pair.dec.write_into(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn load_pair(path: &Path) -> Result<AePair> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Load("empty pair checkpoint".into()))??;
    if header.trim() != "ae-pair v1" {
        return Err(Error::Load(format!("unsupported pair header '{header}'")));
    }
    let enc = DenseNet::read_from(&mut lines)?;
    let dec = DenseNet::read_from(&mut lines)?;
    Ok(AePair { enc, dec })
}

/// All trained models for one problem, stored as one directory.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub schema: ProblemSchema,
    pub norm: Normalization,
    pub sol: AePair,
    pub flux: DenseNet,
    pub geo: Option<AePair>,
    pub src: Option<AePair>,
    pub time: Option<DenseNet>,
}

impl ModelBundle {
    /// Rejects any model whose widths disagree with the schema formulas.
    pub fn validate(&self) -> Result<()> {
        let s2 = self.schema.patch_len();
        let expect = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Shape(format!("bundle does not match schema: {what}")))
            }
        };
        expect(self.sol.enc.input_size() == s2, "solution encoder input")?;
        expect(self.sol.enc.output_size() == self.schema.d_u, "solution latent width")?;
        expect(
            self.sol.dec.input_size() == self.schema.d_u + self.schema.cond_width(),
            "solution decoder input",
        )?;
        expect(self.sol.dec.output_size() == s2, "solution decoder output")?;
        expect(
            self.flux.input_size() == self.schema.flux_row_width()
                && self.flux.output_size() == self.schema.flux_row_width(),
            "flux row width",
        )?;
        match (self.schema.d_g, &self.geo) {
            (Some(d_g), Some(geo)) => {
                expect(geo.enc.input_size() == s2, "geometry encoder input")?;
                expect(geo.enc.output_size() == d_g, "geometry latent width")?;
                expect(geo.dec.output_size() == s2, "geometry decoder output")?;
            }
            (None, None) => {}
            _ => return Err(Error::Shape("geometry channel does not match schema".into())),
        }
        match (self.schema.d_s, &self.src) {
            (Some(d_s), Some(src)) => {
                expect(src.enc.input_size() == s2, "source encoder input")?;
                expect(src.enc.output_size() == d_s, "source latent width")?;
                expect(src.dec.output_size() == s2, "source decoder output")?;
            }
            (None, None) => {}
            _ => return Err(Error::Shape("source channel does not match schema".into())),
        }
        match (self.schema.time_input_width(), &self.time) {
            (Some(w), Some(time)) => {
                expect(time.input_size() == w, "time input width")?;
                expect(time.output_size() == self.schema.d_u, "time output width")?;
            }
            (None, None) => {}
            _ => return Err(Error::Shape("time channel does not match schema".into())),
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        self.schema.save(&dir.join("schema.txt"))?;
        self.norm.save(&dir.join("norm.txt"))?;
        save_pair(&self.sol, &dir.join("sol_ae.ckpt"))?;
        self.flux.save(&dir.join("flux_ae.ckpt"))?;
        if let Some(geo) = &self.geo {
            save_pair(geo, &dir.join("geo_ae.ckpt"))?;
        }
        if let Some(src) = &self.src {
            save_pair(src, &dir.join("src_ae.ckpt"))?;
        }
        if let Some(time) = &self.time {
            time.save(&dir.join("time_ae.ckpt"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schema = ProblemSchema::load(&dir.join("schema.txt"))?;
        let norm = Normalization::load(&dir.join("norm.txt"))?;
        let sol = load_pair(&dir.join("sol_ae.ckpt"))?;
        let flux = DenseNet::load(&dir.join("flux_ae.ckpt"))?;
        let geo = if schema.d_g.is_some() {
            Some(load_pair(&dir.join("geo_ae.ckpt"))?)
        } else {
            None
        };
        let src = if schema.d_s.is_some() {
            Some(load_pair(&dir.join("src_ae.ckpt"))?)
        } else {
            None
        };
        let time = if schema.k_history.is_some() {
            Some(DenseNet::load(&dir.join("time_ae.ckpt"))?)
        } else {
            None
        };
        let bundle = ModelBundle {
            schema,
            norm,
            sol,
            flux,
            geo,
            src,
            time,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdm::{BcKind, EdgeBc};
    use crate::grid::{decompose, Grid};

    fn layout_64_8() -> SubdomainLayout {
        decompose(Grid::unit(64).unwrap(), 8).unwrap()
    }

    fn laplace_schema() -> ProblemSchema {
        ProblemSchema::steady(8, 7, None, None)
    }

    #[test]
    fn encode_bc_left_edge_dirichlet() {
        let layout = layout_64_8();
        let bc = BoundarySpec {
            left: EdgeBc::dirichlet(0.5),
            right: EdgeBc::dirichlet(0.0),
            bottom: EdgeBc::dirichlet(0.0),
            top: EdgeBc::dirichlet(0.0),
        };
        // subdomain on the left edge but not a corner: (0, 3)
        let k = layout.index_of(0, 3);
        let enc = encode_bc(&layout, &bc, k).unwrap();
        assert_eq!(&enc[0..2], &[0.0, 0.5]); // left face: Dirichlet 0.5
        assert_eq!(&enc[2..4], &[2.0, 0.0]); // right face: open
        assert_eq!(&enc[4..6], &[2.0, 0.0]);
        assert_eq!(&enc[6..8], &[2.0, 0.0]);
    }

    #[test]
    fn encode_bc_interior_all_open() {
        let layout = layout_64_8();
        let bc = BoundarySpec::all_dirichlet(1.0);
        let k = layout.index_of(4, 4);
        let enc = encode_bc(&layout, &bc, k).unwrap();
        assert_eq!(enc, [2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn encode_bc_corner_mixed() {
        let layout = layout_64_8();
        let bc = BoundarySpec {
            left: EdgeBc::dirichlet(1.0),
            right: EdgeBc::dirichlet(0.0),
            bottom: EdgeBc::neumann(0.2),
            top: EdgeBc::dirichlet(0.0),
        };
        let enc = encode_bc(&layout, &bc, layout.index_of(0, 0)).unwrap();
        assert_eq!(&enc[0..2], &[0.0, 1.0]); // left Dirichlet 1.0
        assert_eq!(&enc[2..4], &[2.0, 0.0]); // right open
        assert_eq!(&enc[4..6], &[1.0, 0.2]); // bottom Neumann 0.2
        assert_eq!(&enc[6..8], &[2.0, 0.0]); // top open
    }

    #[test]
    fn encode_bc_rule_table_exhaustive() {
        // Every subdomain position x every edge-kind assignment matches the
        // rule table computed independently from the position predicate.
        let layout = layout_64_8();
        let kinds = [BcKind::Dirichlet, BcKind::Neumann];
        for mask in 0..16u32 {
            let kind_of = |bit: u32| kinds[((mask >> bit) & 1) as usize];
            let values = [0.3, -0.6, 0.9, -0.1];
            let bc = BoundarySpec {
                left: EdgeBc::constant(kind_of(0), values[0]),
                right: EdgeBc::constant(kind_of(1), values[1]),
                bottom: EdgeBc::constant(kind_of(2), values[2]),
                top: EdgeBc::constant(kind_of(3), values[3]),
            };
            for k in 0..layout.subdomain_count() {
                let (kx, ky) = layout.coords(k);
                let enc = encode_bc(&layout, &bc, k).unwrap();
                let on = [kx == 0, kx == 7, ky == 0, ky == 7];
                for f in 0..4 {
                    if on[f] {
                        assert_eq!(enc[2 * f], kind_of(f as u32).type_index());
                        assert_eq!(enc[2 * f + 1], values[f]);
                    } else {
                        assert_eq!(enc[2 * f], 2.0);
                        assert_eq!(enc[2 * f + 1], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn encode_bc_rejects_profiles() {
        let layout = layout_64_8();
        let bc = BoundarySpec::sampled_dirichlet(layout.grid(), |x, _| x);
        assert!(matches!(encode_bc(&layout, &bc, 0), Err(Error::Config(_))));
    }

    #[test]
    fn schema_widths() {
        let laplace = laplace_schema();
        assert_eq!(laplace.cond_width(), 8);
        assert_eq!(laplace.block_width(), 15);
        assert_eq!(laplace.flux_row_width(), 75);
        assert_eq!(laplace.time_input_width(), None);

        let poisson = ProblemSchema::steady(8, 7, None, Some(10));
        assert_eq!(poisson.flux_row_width(), 125);

        let obstacle = ProblemSchema::steady(8, 7, Some(8), None);
        assert_eq!(obstacle.flux_row_width(), 115);

        let heat = ProblemSchema {
            k_history: Some(3),
            ..laplace
        };
        assert_eq!(heat.time_input_width(), Some(225));
    }

    #[test]
    fn schema_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for schema in [
            laplace_schema(),
            ProblemSchema::steady(16, 9, Some(8), Some(10)),
            ProblemSchema {
                k_history: Some(3),
                ..laplace_schema()
            },
        ] {
            let path = dir.path().join("schema.txt");
            schema.save(&path).unwrap();
            assert_eq!(ProblemSchema::load(&path).unwrap(), schema);
        }
    }

    #[test]
    fn normalization_round_trip_and_io() {
        let dir = tempfile::tempdir().unwrap();
        let norm = Normalization::for_domain(Grid::unit(64).unwrap().diagonal());
        for raw in [-1.0, -0.1234567891234, 0.0, 0.5, 0.999999, 2.0_f64.sqrt()] {
            for a in [norm.solution, norm.source, norm.sdf] {
                let rt = a.denormalize(a.normalize(raw));
                assert!((rt - raw).abs() <= 1e-12);
            }
        }
        let path = dir.path().join("norm.txt");
        norm.save(&path).unwrap();
        assert_eq!(Normalization::load(&path).unwrap(), norm);
    }

    fn random_state(schema: &ProblemSchema, layout: &SubdomainLayout, seed: u64) -> LatentState {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = layout.subdomain_count();
        LatentState {
            eta_u: Array2::from_shape_fn((n, schema.d_u), |_| rng.gen::<f64>() - 0.5),
            cond: Array2::from_shape_fn((n, schema.cond_width()), |_| rng.gen::<f64>() - 0.5),
        }
    }

    #[test]
    fn flux_row_corner_has_two_zero_blocks() {
        let layout = layout_64_8();
        let schema = laplace_schema();
        let state = random_state(&schema, &layout, 3);
        let row = build_flux_row(&schema, &state, &layout, 0).unwrap();
        assert_eq!(row.len(), 75);
        let bw = schema.block_width();
        // block order: self, left, right, down, up; corner (0,0) misses left+down
        assert!(row[bw..2 * bw].iter().all(|&v| v == 0.0));
        assert!(row[3 * bw..4 * bw].iter().all(|&v| v == 0.0));
        assert!(row[2 * bw..3 * bw].iter().any(|&v| v != 0.0));
        assert!(row[4 * bw..5 * bw].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn flux_dataset_row_count() {
        let layout = layout_64_8();
        let schema = laplace_schema();
        let states: Vec<LatentState> = (0..3).map(|i| random_state(&schema, &layout, i)).collect();
        let rows = build_flux_dataset(&schema, &states, &layout).unwrap();
        assert_eq!(rows.nrows(), 3 * 64);
        assert_eq!(rows.ncols(), 75);
    }

    #[test]
    fn flux_update_deterministic_and_sensitive() {
        let layout = layout_64_8();
        let schema = laplace_schema();
        let state = random_state(&schema, &layout, 12);
        let theta = DenseNet::new(
            &[75, 32, 75],
            &[Activation::Tanh, Activation::Linear],
            99,
        )
        .unwrap();
        let k = layout.index_of(3, 3);
        let a = flux_update(&theta, &schema, &state, &layout, k).unwrap();
        let b = flux_update(&theta, &schema, &state, &layout, k).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        // perturbing a neighbor's latent must change the center update
        let mut perturbed = state.clone();
        let left = layout.index_of(2, 3);
        perturbed.eta_u[[left, 0]] += 0.25;
        let c = flux_update(&theta, &schema, &perturbed, &layout, k).unwrap();
        let delta: f64 = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).sum();
        assert!(delta > 0.0, "no information propagation from neighbor");
    }

    #[test]
    fn time_input_width_and_history_checks() {
        let layout = layout_64_8();
        let schema = ProblemSchema {
            k_history: Some(3),
            ..laplace_schema()
        };
        let states: Vec<LatentState> = (0..3).map(|i| random_state(&schema, &layout, i)).collect();
        let input = build_time_input(&schema, &states, &layout, 5).unwrap();
        assert_eq!(input.len(), 225);
        assert!(matches!(
            build_time_input(&schema, &states[..2], &layout, 5),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn bundle_save_load_and_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let schema = laplace_schema();
        let bundle = ModelBundle {
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
        };
        let bdir = dir.path().join("bundle");
        bundle.save(&bdir).unwrap();
        let loaded = ModelBundle::load(&bdir).unwrap();
        assert_eq!(loaded.schema, schema);
        let x: Vec<f64> = (0..64).map(|i| (i as f64) / 64.0 - 0.5).collect();
        assert_eq!(
            bundle.sol.enc.forward(&x).unwrap(),
            loaded.sol.enc.forward(&x).unwrap()
        );

        // Tampering with the schema must make the load fail width validation.
        let tampered = ProblemSchema::steady(8, 9, None, None);
        tampered.save(&bdir.join("schema.txt")).unwrap();
        assert!(matches!(ModelBundle::load(&bdir), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_decode_shapes_and_round_trip_scale() {
        let layout = layout_64_8();
        let schema = laplace_schema();
        let norm = Normalization::for_domain(2.0f64.sqrt());
        let enc = DenseNet::new(&[64, 24, 7], &[Activation::Tanh, Activation::Linear], 5).unwrap();
        let dec = DenseNet::new(&[15, 24, 64], &[Activation::Tanh, Activation::Linear], 6).unwrap();
        let field = Field::from_fn(layout.grid(), |x, y| x - y);
        let eta = encode_solution(&enc, &field, &layout, &norm).unwrap();
        assert_eq!(eta.nrows(), 64);
        assert_eq!(eta.ncols(), 7);
        let bc = BoundarySpec::all_dirichlet(0.0);
        let cond = build_cond(&schema, &layout, &bc, None, None).unwrap();
        let state = LatentState { eta_u: eta, cond };
        let decoded = decode_solution(&dec, &state, &layout, &norm).unwrap();
        assert_eq!(decoded.grid(), layout.grid());
        assert!(decoded.is_finite());
    }
}
