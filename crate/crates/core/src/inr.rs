//! Conditioned implicit neural representation (INR) for prior images.
//!
//! A convolutional encoder turns (μ, μ_MA) into a per-pixel latent field z;
//! a coordinate MLP maps (x, z(x)) to attenuation. Pretraining fits both on
//! paired data, stages are chained to build the metal-artifact image, and
//! per-measurement refinement adapts the MLP on unaffected rays.

use std::time::Instant;

use log::{debug, warn};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::neural::{relu, relu_backward, Adam, Conv2d, Dense, Feat, Grads, NeuralError, ParamStore};
use crate::nmar::{nmar_complete, NmarError};
use crate::projector::{Projector, ProjectorError};
use crate::raster::{Image, ImageGeometry, MetalTrace, Sinogram, DEFAULT_MU_WATER};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum InrError {
    #[error("no unaffected measurements")]
    NoUnaffected,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need {need} stages, bundle has {have}")]
    MissingStages { need: usize, have: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Nmar(#[from] NmarError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}

pub type Result<T> = std::result::Result<T, InrError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InrConfig {
    pub mlp_width: usize,
    pub mlp_layers: usize,
    pub enc_channels: usize,
    pub enc_blocks: usize,
    /// Latent channels m; 0 gives a plain coordinate MLP without encoder.
    pub latent: usize,
    /// Encoder input channels: 2 for (μ, μ_MA), 1 for μ alone.
    pub in_channels: usize,
    /// Attenuation scale for network inputs and outputs.
    pub mu_scale: f64,
    /// Fourier-feature octaves L on the coordinates; 0 feeds raw (x, y).
    pub fourier: usize,
}

impl InrConfig {
    pub fn desk() -> Self {
        Self { mlp_width: 64, mlp_layers: 3, enc_channels: 16, enc_blocks: 3, latent: 16, in_channels: 2, mu_scale: DEFAULT_MU_WATER, fourier: 0 }
    }

    pub fn paper() -> Self {
        Self { mlp_width: 256, mlp_layers: 4, enc_channels: 64, enc_blocks: 16, latent: 64, in_channels: 2, mu_scale: DEFAULT_MU_WATER, fourier: 0 }
    }

    pub fn unconditioned(&self) -> Self {
        Self { latent: 0, ..*self }
    }

    pub fn single_channel(&self) -> Self {
        Self { in_channels: 1, ..*self }
    }

    /// Coordinate columns ahead of the latent code in each MLP row.
    pub fn coord_width(&self) -> usize {
        2 + 4 * self.fourier
    }

    pub fn is_conditioned(&self) -> bool {
        self.latent > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_width == 0 || self.mlp_layers == 0 {
            return Err(InrError::Shape("MLP needs at least one hidden layer".into()));
        }
        if self.latent > 0 && (self.enc_channels == 0 || !(1..=2).contains(&self.in_channels)) {
            return Err(InrError::Shape("encoder needs channels and 1 or 2 inputs".into()));
        }
        if self.fourier > 16 {
            return Err(InrError::Shape(format!("at most 16 Fourier octaves, got {}", self.fourier)));
        }
        Ok(())
    }
}

/// Head conv → residual blocks (conv-ReLU-conv + skip) → tail conv, all 3×3
/// at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub head: Conv2d,
    pub blocks: Vec<(Conv2d, Conv2d)>,
    pub tail: Conv2d,
}

pub struct EncoderCache<T> {
    input: Feat<T>,
    block_in: Vec<Feat<T>>,
    block_pre: Vec<Feat<T>>,
    block_act: Vec<Feat<T>>,
    tail_in: Feat<T>,
}

impl Encoder {
    fn build(cfg: &InrConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.enc_channels;
        let head = Conv2d::new(store, "enc.head", cfg.in_channels, c, 3, rng);
        let blocks = (0..cfg.enc_blocks)
            .map(|i| {
                (
                    Conv2d::new(store, &format!("enc.block{i}.a"), c, c, 3, rng),
                    Conv2d::new(store, &format!("enc.block{i}.b"), c, c, 3, rng),
                )
            })
            .collect();
        let tail = Conv2d::new(store, "enc.tail", c, cfg.latent, 3, rng);
        Self { head, blocks, tail }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Feat<T>) -> Result<(Feat<T>, EncoderCache<T>)> {
        let mut h = self.head.forward(p, x)?;
        let mut cache = EncoderCache {
            input: x.clone(),
            block_in: Vec::new(),
            block_pre: Vec::new(),
            block_act: Vec::new(),
            tail_in: Feat::zeros(0, 0, 0, 0),
        };
        for (a, b) in &self.blocks {
            let pre = a.forward(p, &h)?;
            let act = Feat { data: relu(&pre.data), ..pre.clone() };
            let mut out = b.forward(p, &act)?;
            out.add_assign(&h);
            cache.block_in.push(std::mem::replace(&mut h, out));
            cache.block_pre.push(pre);
            cache.block_act.push(act);
        }
        let z = self.tail.forward(p, &h)?;
        cache.tail_in = h;
        Ok((z, cache))
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &EncoderCache<T>, dz: &Feat<T>, g: &mut Grads<T>) -> Result<()> {
        let mut dh = self.tail.backward(p, &cache.tail_in, dz, g, true)?.expect("requested");
        for (i, (a, b)) in self.blocks.iter().enumerate().rev() {
            let dact = b.backward(p, &cache.block_act[i], &dh, g, true)?.expect("requested");
            let dpre = Feat { data: relu_backward(&cache.block_pre[i].data, &dact.data), ..dact };
            let dx = a.backward(p, &cache.block_in[i], &dpre, g, true)?.expect("requested");
            dh.add_assign(&dx);
        }
        self.head.backward(p, &cache.input, &dh, g, false)?;
        Ok(())
    }

    /// Pixels of influence on each side: one per 3×3 conv.
    pub fn receptive_radius(&self) -> usize {
        2 + 2 * self.blocks.len()
    }
}

/// ReLU MLP with a scalar linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpCache<T> {
    inputs: Vec<Vec<T>>,
    rows: usize,
}

impl Mlp {
    fn build(n_in: usize, cfg: &InrConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut width = n_in;
        for i in 0..cfg.mlp_layers {
            layers.push(Dense::new(store, &format!("mlp.{i}"), width, cfg.mlp_width, rng));
            width = cfg.mlp_width;
        }
        layers.push(Dense::new(store, "mlp.out", width, 1, rng));
        Self { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(p, &h, rows);
            inputs.push(std::mem::replace(&mut h, if i < last { relu(&y) } else { y }));
        }
        (h, MlpCache { inputs, rows })
    }

    /// Returns the gradient w.r.t. the MLP input when `want_dx`.
    pub fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &MlpCache<T>, dout: &[T], g: &mut Grads<T>, want_dx: bool) -> Option<Vec<T>> {
        let mut dy = dout.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need = i > 0 || want_dx;
            let dx = layer.backward(p, &cache.inputs[i], &dy, cache.rows, g, need)?;
            if i == 0 {
                return Some(dx);
            }
            // the input of layer i is relu(pre), so its sign gives the mask
            dy = relu_backward(&cache.inputs[i], &dx);
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InrNet {
    pub cfg: InrConfig,
    pub encoder: Option<Encoder>,
    pub mlp: Mlp,
}

/// θ (MLP) and ψ (encoder; empty for unconditioned nets).
#[derive(Clone, Debug, PartialEq)]
pub struct InrWeights {
    pub theta: ParamStore<f32>,
    pub psi: ParamStore<f32>,
}

impl InrNet {
    /// Builds the architecture with Kaiming-uniform weights drawn from `seed`.
    pub fn build(cfg: &InrConfig, seed: u64) -> Result<(Self, InrWeights)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut psi = ParamStore::new();
        let encoder = cfg.is_conditioned().then(|| Encoder::build(cfg, &mut psi, &mut rng));
        let mut theta = ParamStore::new();
        let mlp = Mlp::build(cfg.coord_width() + cfg.latent, cfg, &mut theta, &mut rng);
        Ok((Self { cfg: *cfg, encoder, mlp }, InrWeights { theta, psi }))
    }

    pub fn header(&self) -> Vec<(String, String)> {
        let c = &self.cfg;
        [
            ("mlp_width", c.mlp_width),
            ("mlp_layers", c.mlp_layers),
            ("enc_channels", c.enc_channels),
            ("enc_blocks", c.enc_blocks),
            ("latent", c.latent),
            ("in_channels", c.in_channels),
            ("fourier", c.fourier),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .chain(std::iter::once(("mu_scale".to_string(), format!("{:?}", c.mu_scale))))
        .collect()
    }

    /// Scaled encoder input for one case.
    pub fn encoder_input(&self, mu: &Image, mu_ma: Option<&Image>) -> Result<Feat<f32>> {
        let g = mu.geometry;
        let s = (1.0 / self.cfg.mu_scale) as f32;
        let mut data: Vec<f32> = mu.values.iter().map(|v| v * s).collect();
        if self.cfg.in_channels == 2 {
            let ma = mu_ma.ok_or_else(|| InrError::Shape("two-channel encoder needs μ_MA".into()))?;
            if ma.geometry != g {
                return Err(InrError::Shape("μ and μ_MA geometries differ".into()));
            }
            data.extend(ma.values.iter().map(|v| v * s));
        }
        Ok(Feat::from_vec(1, self.cfg.in_channels, g.n_rows, g.n_cols, data))
    }

    pub fn encode<T: Real>(&self, psi: &ParamStore<T>, x: &Feat<T>) -> Result<Option<Feat<T>>> {
        match &self.encoder {
            Some(enc) => Ok(Some(enc.forward(psi, x)?.0)),
            None => Ok(None),
        }
    }

    /// MLP input rows (x, y, z_1..z_m) for every pixel of every sample.
    pub fn mlp_input<T: Real>(&self, geom: &ImageGeometry, z: Option<&Feat<T>>) -> Vec<T> {
        let m = self.cfg.latent;
        let k = self.cfg.coord_width();
        let width = k + m;
        let plane = geom.len();
        let n = z.map_or(1, |z| z.n);
        let mut x = vec![T::zero(); n * plane * width];
        for i in 0..n {
            for row in 0..geom.n_rows {
                for col in 0..geom.n_cols {
                    let p = row * geom.n_cols + col;
                    let (cx, cy) = geom.normalized_center(row, col);
                    let r = &mut x[(i * plane + p) * width..(i * plane + p + 1) * width];
                    r[0] = T::of(cx);
                    r[1] = T::of(cy);
                    for l in 0..self.cfg.fourier {
                        let f = std::f64::consts::PI * (1u64 << l) as f64;
                        let o = 2 + 4 * l;
                        r[o] = T::of((f * cx).sin());
                        r[o + 1] = T::of((f * cx).cos());
                        r[o + 2] = T::of((f * cy).sin());
                        r[o + 3] = T::of((f * cy).cos());
                    }
                    if let Some(z) = z {
                        for c in 0..m {
                            r[k + c] = z.data[(i * m + c) * plane + p];
                        }
                    }
                }
            }
        }
        x
    }

    /// Attenuation predicted for prepared MLP rows.
    pub fn eval_rows<T: Real>(&self, theta: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let rows = x.len() / self.mlp.n_in();
        let s = T::of(self.cfg.mu_scale);
        self.mlp.forward(theta, x, rows).0.into_iter().map(|v| v * s).collect()
    }

    /// MLP rows for one case: the latent is computed once and reused.
    pub fn case_rows(&self, w: &InrWeights, mu: &Image, mu_ma: Option<&Image>) -> Result<Vec<f32>> {
        let z = if self.cfg.is_conditioned() {
            self.encode(&w.psi, &self.encoder_input(mu, mu_ma)?)?
        } else {
            None
        };
        Ok(self.mlp_input(&mu.geometry, z.as_ref()))
    }

    pub fn predict(&self, w: &InrWeights, mu: &Image, mu_ma: Option<&Image>) -> Result<Image> {
        let rows = self.case_rows(w, mu, mu_ma)?;
        Ok(Image { geometry: mu.geometry, values: self.eval_rows(&w.theta, &rows) })
    }
}

/// Mean absolute error of f_θ(x, E_ψ(input)(x)) against targets over every
/// pixel of the batch, with gradients for θ and ψ.
pub fn loss_init<T: Real>(
    net: &InrNet,
    theta: &ParamStore<T>,
    psi: &ParamStore<T>,
    inputs: &Feat<T>,
    targets: &[T],
    geom: &ImageGeometry,
) -> Result<(f64, Grads<T>, Grads<T>)> {
    if inputs.n == 0 {
        return Err(InrError::EmptyDataset);
    }
    if targets.len() != inputs.n * geom.len() || inputs.h != geom.n_rows || inputs.w != geom.n_cols {
        return Err(InrError::Shape("batch does not match image geometry".into()));
    }
    let enc = net.encoder.as_ref().ok_or_else(|| InrError::Shape("loss_init needs an encoder".into()))?;
    let (z, enc_cache) = enc.forward(psi, inputs)?;
    let x = net.mlp_input(geom, Some(&z));
    let rows = targets.len();
    let (out, cache) = net.mlp.forward(theta, &x, rows);
    let s = T::of(net.cfg.mu_scale);
    let inv_n = 1.0 / rows as f64;
    let mut loss = 0.0;
    let dout: Vec<T> = out
        .iter()
        .zip(targets)
        .map(|(&o, &t)| {
            let r = o * s - t;
            loss += r.as_f64().abs();
            T::of(r.as_f64().signum() * inv_n * net.cfg.mu_scale)
        })
        .collect();
    let mut g_theta = theta.zero_grads();
    let mut g_psi = psi.zero_grads();
    let dx = net.mlp.backward(theta, &cache, &dout, &mut g_theta, true).expect("requested");
    let m = net.cfg.latent;
    let k = net.cfg.coord_width();
    let width = k + m;
    let plane = geom.len();
    let mut dz = Feat::zeros(z.n, m, z.h, z.w);
    for i in 0..z.n {
        for p in 0..plane {
            let r = &dx[(i * plane + p) * width..(i * plane + p + 1) * width];
            for c in 0..m {
                dz.data[(i * m + c) * plane + p] = r[k + c];
            }
        }
    }
    enc.backward(psi, &enc_cache, &dz, &mut g_psi)?;
    Ok((loss * inv_n, g_theta, g_psi))
}

/// Ray-domain data term on a set of unaffected rays, optionally anchored to
/// a frozen reference image with weight λ.
pub struct Fidelity<'a, T> {
    pub projector: &'a Projector,
    pub measured: &'a [f32],
    pub rays: &'a [usize],
    pub anchor: Option<(f64, &'a [T])>,
}

/// Mean |P − ∫f_θ| over the given rays, plus λ·mean_x |f_θ − f_θ0| when
/// anchored. Gradients reach θ through the exact projector transpose.
pub fn loss_refine<T: Real>(net: &InrNet, theta: &ParamStore<T>, x: &[T], term: &Fidelity<'_, T>) -> Result<(f64, Grads<T>)> {
    if term.rays.is_empty() {
        return Err(InrError::NoUnaffected);
    }
    let rows = x.len() / net.mlp.n_in();
    if rows != term.projector.img.len() {
        return Err(InrError::Shape("MLP rows must cover the image grid".into()));
    }
    let (out, cache) = net.mlp.forward(theta, x, rows);
    let s = net.cfg.mu_scale;
    let img: Vec<T> = out.iter().map(|&v| v * T::of(s)).collect();
    let proj = term.projector.project_subset(&img, term.rays);
    let inv_b = 1.0 / term.rays.len() as f64;
    let mut loss = 0.0;
    let weights: Vec<T> = proj
        .iter()
        .zip(term.rays)
        .map(|(&q, &i)| {
            let r = term.measured[i] as f64 - q.as_f64();
            loss += r.abs();
            T::of(-r.signum() * inv_b)
        })
        .collect();
    loss *= inv_b;
    let mut dimg = term.projector.adjoint_subset(&weights, term.rays);
    if let Some((lambda, f0)) = term.anchor {
        let inv_n = 1.0 / rows as f64;
        let mut reg = 0.0;
        for (d, (&f, &a)) in dimg.iter_mut().zip(img.iter().zip(f0)) {
            let diff = f.as_f64() - a.as_f64();
            reg += diff.abs();
            *d = *d + T::of(lambda * inv_n * diff.signum());
        }
        loss += lambda * reg * inv_n;
    }
    let dout: Vec<T> = dimg.iter().map(|&d| d * T::of(s)).collect();
    let mut g = theta.zero_grads();
    net.mlp.backward(theta, &cache, &dout, &mut g, false);
    Ok((loss, g))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub n_iter: usize,
    pub lr: f64,
    /// λ for the anchored loss; `None` gives the plain data term.
    pub lambda: Option<f64>,
    pub ray_batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub theta: ParamStore<f32>,
    pub losses: Vec<f64>,
}

/// Indices of rays outside the trace that actually cross the field of view.
pub fn unaffected_rays(projector: &Projector, trace: &MetalTrace) -> Vec<usize> {
    (0..trace.bits.len()).filter(|&i| !trace.bits[i] && projector.crosses(i)).collect()
}

/// Adam on the MLP weights for `n_iter` steps, one ray minibatch per step.
pub fn refine(
    net: &InrNet,
    theta0: &ParamStore<f32>,
    x: &[f32],
    projector: &Projector,
    measured: &Sinogram,
    trace: &MetalTrace,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    let mut theta = theta0.clone();
    if cfg.n_iter == 0 {
        return Ok(RefineOutcome { theta, losses: Vec::new() });
    }
    let free = unaffected_rays(projector, trace);
    if free.is_empty() {
        return Err(InrError::NoUnaffected);
    }
    let anchor_img = cfg.lambda.map(|_| net.eval_rows(theta0, x));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&theta, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.n_iter);
    let mut batch = Vec::with_capacity(cfg.ray_batch.min(free.len()));
    for _ in 0..cfg.n_iter {
        batch.clear();
        if free.len() <= cfg.ray_batch {
            batch.extend_from_slice(&free);
        } else {
            let mut idx: Vec<usize> = sample_indices(&mut rng, free.len(), cfg.ray_batch).into_vec();
            idx.sort_unstable();
            batch.extend(idx.into_iter().map(|i| free[i]));
        }
        let term = Fidelity {
            projector,
            measured: &measured.values,
            rays: &batch,
            anchor: cfg.lambda.zip(anchor_img.as_deref()),
        };
        let (loss, g) = loss_refine(net, &theta, x, &term)?;
        losses.push(loss);
        adam.step(&mut theta, &g);
    }
    Ok(RefineOutcome { theta, losses })
}

/// Pretrained stage weights (θ^(k), ψ^(k)), k = 0..K, sharing one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct StageBundle {
    pub net: InrNet,
    pub stages: Vec<InrWeights>,
}

/// Measured data for one case as seen by the prior generator.
#[derive(Clone, Debug)]
pub struct CaseData<'a> {
    pub mu: &'a Image,
    pub sino: &'a Sinogram,
    pub trace: &'a MetalTrace,
}

/// One recursion step: prior from stage weights, NMAR completion, and the
/// next artifact image B[P − P_NMAR]. Returns (prior, next μ_MA).
pub fn recursion_step(
    net: &InrNet,
    w: &InrWeights,
    case: &CaseData<'_>,
    mu_ma: &Image,
    projector: &Projector,
    eps_floor: f64,
) -> Result<(Image, Image)> {
    let prior = net.predict(w, case.mu, Some(mu_ma))?;
    let p_prior = projector.forward_project(&prior.nonnegative())?;
    let p_nmar = nmar_complete(case.sino, &p_prior, case.trace, eps_floor)?;
    let next = projector.fbp(&case.sino.sub(&p_nmar))?;
    Ok((prior, next))
}

/// μ_MA^(0) = B[χ_T P] followed by K recursion steps; returns all iterates.
pub fn build_mu_ma(bundle: &StageBundle, case: &CaseData<'_>, k: usize, projector: &Projector, eps_floor: f64) -> Result<Vec<Image>> {
    if bundle.stages.len() < k + 1 {
        return Err(InrError::MissingStages { need: k + 1, have: bundle.stages.len() });
    }
    let mut out = vec![projector.fbp(&case.sino.masked(case.trace))?];
    for stage in &bundle.stages[..k] {
        let (_, next) = recursion_step(&bundle.net, stage, case, out.last().expect("nonempty"), projector, eps_floor)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pub k: usize,
    pub lambda: f64,
    pub n_iter: usize,
    pub lr_refine: f64,
    pub ray_batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PriorResult {
    pub mu_ma: Vec<Image>,
    /// Pretrained prior before refinement.
    pub prior_init: Image,
    pub prior: Image,
    pub losses: Vec<f64>,
    /// Wall-clock seconds up to the pretrained prior, and for refinement.
    pub seconds_init: f64,
    pub seconds_refine: f64,
}

/// Full prior generation: build μ_MA, encode with the last stage, refine θ
/// with the encoder frozen, evaluate on the grid.
pub fn generate_prior(
    bundle: &StageBundle,
    case: &CaseData<'_>,
    cfg: &PriorConfig,
    projector: &Projector,
    eps_floor: f64,
) -> Result<PriorResult> {
    let start = Instant::now();
    let mu_ma = build_mu_ma(bundle, case, cfg.k, projector, eps_floor)?;
    let net = &bundle.net;
    let w = &bundle.stages[cfg.k];
    let ma_in = (net.cfg.in_channels == 2).then(|| mu_ma.last().expect("nonempty"));
    let rows = net.case_rows(w, case.mu, ma_in)?;
    let prior_init = Image { geometry: case.mu.geometry, values: net.eval_rows(&w.theta, &rows) };
    let seconds_init = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut n_iter = cfg.n_iter;
    if n_iter > 0 && unaffected_rays(projector, case.trace).is_empty() {
        warn!("every ray is metal-affected; using the pretrained prior without refinement");
        n_iter = 0;
    }
    let rc = RefineConfig { n_iter, lr: cfg.lr_refine, lambda: Some(cfg.lambda), ray_batch: cfg.ray_batch, seed: cfg.seed };
    let out = refine(net, &w.theta, &rows, projector, case.sino, case.trace, &rc)?;
    let prior = Image { geometry: case.mu.geometry, values: net.eval_rows(&out.theta, &rows) };
    let seconds_refine = start.elapsed().as_secs_f64();
    Ok(PriorResult { mu_ma, prior_init, prior, losses: out.losses, seconds_init, seconds_refine })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// One pretraining pair: scaled encoder input and the clean target image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: Feat<f32>,
    pub target: Vec<f32>,
}

/// Adam on loss_init over shuffled minibatches. Returns trained weights and
/// the mean loss of every epoch.
pub fn pretrain_stage(
    net: &InrNet,
    init: &InrWeights,
    samples: &[TrainSample],
    geom: &ImageGeometry,
    cfg: &PretrainConfig,
) -> Result<(InrWeights, Vec<f64>)> {
    if samples.is_empty() {
        return Err(InrError::EmptyDataset);
    }
    let mut w = init.clone();
    let mut opt_theta = Adam::new(&w.theta, cfg.lr);
    let mut opt_psi = Adam::new(&w.psi, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let bs = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let first = &samples[chunk[0]].input;
            let mut data = Vec::with_capacity(chunk.len() * first.data.len());
            let mut targets = Vec::with_capacity(chunk.len() * geom.len());
            for &i in chunk {
                data.extend_from_slice(&samples[i].input.data);
                targets.extend_from_slice(&samples[i].target);
            }
            let inputs = Feat::from_vec(chunk.len(), first.c, first.h, first.w, data);
            let (loss, gt, gp) = loss_init(net, &w.theta, &w.psi, &inputs, &targets, geom)?;
            opt_theta.step(&mut w.theta, &gt);
            opt_psi.step(&mut w.psi, &gp);
            total += loss * chunk.len() as f64;
        }
        let mean = total / samples.len() as f64;
        debug!("pretrain epoch {epoch}: loss {mean:.6e}");
        log.push(mean);
    }
    Ok((w, log))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaConfig {
    pub epochs: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub ray_batch: usize,
    pub seed: u64,
}

/// First-order meta-learning of an unconditioned MLP: each outer step fits a
/// copy to one case's full projections and moves θ toward the adapted copy,
/// using θ − θ_inner as the outer gradient for Adam.
pub fn meta_init(
    net: &InrNet,
    theta0: &ParamStore<f32>,
    sinos: &[Sinogram],
    projector: &Projector,
    cfg: &MetaConfig,
) -> Result<ParamStore<f32>> {
    if net.cfg.is_conditioned() {
        return Err(InrError::Shape("meta initialization uses an unconditioned MLP".into()));
    }
    let mut theta = theta0.clone();
    if cfg.epochs == 0 || sinos.is_empty() {
        return Ok(theta);
    }
    let x = net.mlp_input::<f32>(&projector.img, None);
    let mut outer = Adam::new(&theta, cfg.outer_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..sinos.len()).collect();
    let empty = MetalTrace::empty(projector.sino);
    let mut inner_seed = cfg.seed;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            inner_seed = inner_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let rc = RefineConfig { n_iter: cfg.inner_steps, lr: cfg.inner_lr, lambda: None, ray_batch: cfg.ray_batch, seed: inner_seed };
            let inner = refine(net, &theta, &x, projector, &sinos[i], &empty, &rc)?;
            let mut g = theta.zero_grads();
            for ((gt, a), b) in g.0.iter_mut().zip(theta.tensors()).zip(inner.theta.tensors()) {
                for ((gv, &av), &bv) in gt.iter_mut().zip(a).zip(b) {
                    *gv = av - bv;
                }
            }
            outer.step(&mut theta, &g);
        }
        debug!("meta epoch {epoch} done");
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check;
    use crate::raster::SinogramGeometry;
    use rand::Rng;

    fn tiny_cfg() -> InrConfig {
        InrConfig { mlp_width: 6, mlp_layers: 2, enc_channels: 3, enc_blocks: 1, latent: 2, in_channels: 2, mu_scale: 0.02, fourier: 0 }
    }

    fn rand_image(geom: ImageGeometry, seed: u64, scale: f32) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image { geometry: geom, values: (0..geom.len()).map(|_| scale * rng.random::<f32>()).collect() }
    }

    /// Makes ReLU kinks unlikely near the probe point by using nonzero biases.
    fn jitter_biases(p: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = p.ids().filter(|&id| p.name(id).ends_with(".b")).collect();
        for id in ids {
            p.get_mut(id).iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }

    #[test]
    fn zero_mlp_gives_constant_field() {
        let geom = ImageGeometry::new(8, 10.0).unwrap();
        let (net, mut w) = InrNet::build(&tiny_cfg(), 0).unwrap();
        w.theta.zero_all();
        let out = net.mlp.layers.last().unwrap().b;
        w.theta.get_mut(out)[0] = 1.5;
        let img = net.predict(&w, &rand_image(geom, 1, 0.02), Some(&rand_image(geom, 2, 0.02))).unwrap();
        assert!(img.values.iter().all(|&v| (v - 1.5 * 0.02).abs() < 1e-9));
    }

    #[test]
    fn zero_encoder_weights_give_constant_latent() {
        let geom = ImageGeometry::new(8, 10.0).unwrap();
        let (net, mut w) = InrNet::build(&tiny_cfg(), 0).unwrap();
        let ids: Vec<_> = w.psi.ids().collect();
        for id in ids {
            let is_bias = w.psi.name(id).ends_with(".b");
            w.psi.get_mut(id).iter_mut().for_each(|v| *v = if is_bias { 0.7 } else { 0.0 });
        }
        let x = net.encoder_input(&rand_image(geom, 1, 0.02), Some(&rand_image(geom, 2, 0.02))).unwrap();
        let z = net.encode(&w.psi, &x).unwrap().unwrap();
        assert!(z.data.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn batch_evaluation_matches_per_pixel() {
        let geom = ImageGeometry::new(8, 10.0).unwrap();
        let (net, w) = InrNet::build(&tiny_cfg(), 3).unwrap();
        let rows = net.case_rows(&w, &rand_image(geom, 1, 0.02), Some(&rand_image(geom, 2, 0.02))).unwrap();
        let full = net.eval_rows(&w.theta, &rows);
        let width = net.mlp.n_in();
        for p in [0, 17, 63] {
            let single = net.eval_rows(&w.theta, &rows[p * width..(p + 1) * width]);
            assert!((single[0] - full[p]).abs() < 1e-7);
        }
    }

    #[test]
    fn latent_change_stays_in_receptive_field() {
        let geom = ImageGeometry::new(16, 16.0).unwrap();
        let (net, w) = InrNet::build(&tiny_cfg(), 4).unwrap();
        let a = rand_image(geom, 1, 0.02);
        let mut b = a.clone();
        b.values[8 * 16 + 8] += 0.05;
        let ma = rand_image(geom, 2, 0.02);
        let za = net.encode(&w.psi, &net.encoder_input(&a, Some(&ma)).unwrap()).unwrap().unwrap();
        let zb = net.encode(&w.psi, &net.encoder_input(&b, Some(&ma)).unwrap()).unwrap().unwrap();
        let r = net.encoder.as_ref().unwrap().receptive_radius() as isize;
        for c in 0..za.c {
            for row in 0..16isize {
                for col in 0..16isize {
                    let idx = c * 256 + (row * 16 + col) as usize;
                    if (row - 8).abs() > r || (col - 8).abs() > r {
                        assert_eq!(za.data[idx], zb.data[idx]);
                    }
                }
            }
        }
    }

    #[test]
    fn lipschitz_bound_in_coordinates() {
        let cfg = tiny_cfg().unconditioned();
        let (net, w) = InrNet::build(&cfg, 5).unwrap();
        let mut bound = 1.0f64;
        for layer in &net.mlp.layers {
            let wt = w.theta.get(layer.w);
            let row_max = wt.chunks(layer.n_in).map(|r| r.iter().map(|v| (*v as f64).abs()).sum::<f64>()).fold(0.0, f64::max);
            bound *= row_max;
        }
        bound *= cfg.mu_scale;
        let delta = 1e-3;
        for (x, y) in [(0.1, -0.3), (-0.7, 0.2), (0.0, 0.9)] {
            let a = net.eval_rows(&w.theta.cast::<f64>(), &[x, y])[0];
            let b = net.eval_rows(&w.theta.cast::<f64>(), &[x + delta, y])[0];
            assert!((a - b).abs() <= bound * delta + 1e-12);
        }
    }

    #[test]
    fn loss_init_values_and_grad() {
        let geom = ImageGeometry::new(6, 10.0).unwrap();
        let cfg = tiny_cfg();
        let (net, w) = InrNet::build(&cfg, 6).unwrap();
        let mut theta: ParamStore<f64> = w.theta.cast();
        let mut psi: ParamStore<f64> = w.psi.cast();
        jitter_biases(&mut theta, 1);
        jitter_biases(&mut psi, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = Feat::from_vec(2, 2, 6, 6, (0..144).map(|_| rng.random_range(0.0..2.0)).collect());
        let targets: Vec<f64> = (0..72).map(|_| rng.random_range(0.0..0.04)).collect();

        // constant prediction c against constant target t
        let mut zeroed = theta.clone();
        zeroed.zero_all();
        let out_b = net.mlp.layers.last().unwrap().b;
        zeroed.get_mut(out_b)[0] = 1.0;
        let (l, _, _) = loss_init(&net, &zeroed, &psi, &inputs, &vec![0.005; 72], &geom).unwrap();
        assert!((l - 0.015).abs() < 1e-12);

        let mut store = ParamStore::<f64>::new();
        let names: Vec<(String, usize)> = theta
            .ids()
            .map(|id| (format!("t.{}", theta.name(id)), id.0))
            .chain(psi.ids().map(|id| (format!("p.{}", psi.name(id)), id.0)))
            .collect();
        for id in theta.ids() {
            store.add(&format!("t.{}", theta.name(id)), theta.shape(id), theta.get(id).to_vec());
        }
        for id in psi.ids() {
            store.add(&format!("p.{}", psi.name(id)), psi.shape(id), psi.get(id).to_vec());
        }
        let nt = theta.len();
        let report = grad_check(&store, |s| {
            let mut t = theta.clone();
            let mut p = psi.clone();
            for (i, (_, _)) in names.iter().enumerate() {
                let src = s.get(crate::neural::ParamId(i));
                if i < nt {
                    t.tensors_mut()[i].copy_from_slice(src);
                } else {
                    p.tensors_mut()[i - nt].copy_from_slice(src);
                }
            }
            let (loss, gt, gp) = loss_init(&net, &t, &p, &inputs, &targets, &geom).unwrap();
            let mut g = s.zero_grads();
            for i in 0..nt {
                g.0[i].copy_from_slice(&gt.0[i]);
            }
            for i in 0..p.len() {
                g.0[nt + i].copy_from_slice(&gp.0[i]);
            }
            (loss, g)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn refine_setup() -> (InrNet, ParamStore<f64>, Vec<f64>, Projector, Sinogram) {
        let geom = ImageGeometry::new(16, 40.0).unwrap();
        let sino = SinogramGeometry::fan(8, 24, &geom).unwrap();
        let proj = Projector::new(geom, sino).unwrap();
        let cfg = tiny_cfg();
        let (net, w) = InrNet::build(&cfg, 8).unwrap();
        let mut theta: ParamStore<f64> = w.theta.cast();
        jitter_biases(&mut theta, 3);
        let rows: Vec<f64> = net
            .case_rows(&w, &rand_image(geom, 1, 0.02), Some(&rand_image(geom, 2, 0.02)))
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        let truth = rand_image(geom, 9, 0.03);
        let p = proj.forward_project(&truth).unwrap();
        (net, theta, rows, proj, p)
    }

    #[test]
    fn loss_naive_grad_on_projection_path() {
        let (net, theta, rows, proj, p) = refine_setup();
        let rays: Vec<usize> = (0..proj.n_rays()).filter(|i| i % 3 != 0 && proj.crosses(*i)).collect();
        let report = grad_check(&theta, |t| {
            let term = Fidelity { projector: &proj, measured: &p.values, rays: &rays, anchor: None };
            loss_refine(&net, t, &rows, &term).unwrap()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn fourier_rows_layout() {
        use std::f64::consts::PI;
        let geom = ImageGeometry::new(8, 20.0).unwrap();
        let cfg = InrConfig { fourier: 2, ..tiny_cfg().unconditioned() };
        let (net, _) = InrNet::build(&cfg, 1).unwrap();
        let x = net.mlp_input::<f64>(&geom, None);
        assert_eq!(net.mlp.n_in(), 10);
        assert_eq!(x.len(), geom.len() * 10);
        let p = 3 * 8 + 5;
        let (cx, cy) = geom.normalized_center(3, 5);
        let r = &x[p * 10..(p + 1) * 10];
        assert_eq!((r[0], r[1]), (cx, cy));
        let want = [(PI * cx).sin(), (PI * cx).cos(), (PI * cy).sin(), (PI * cy).cos()];
        for (a, b) in r[2..6].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r[6] - (2.0 * PI * cx).sin()).abs() < 1e-12);
        assert!(InrNet::build(&InrConfig { fourier: 17, ..cfg }, 1).is_err());
    }

    #[test]
    fn fourier_mlp_grad_on_projection_path() {
        let (_, _, _, proj, p) = refine_setup();
        let cfg = InrConfig { fourier: 2, ..tiny_cfg().unconditioned() };
        let (net, w) = InrNet::build(&cfg, 4).unwrap();
        let mut theta: ParamStore<f64> = w.theta.cast();
        jitter_biases(&mut theta, 5);
        let rows = net.mlp_input::<f64>(&proj.img, None);
        let rays: Vec<usize> = (0..proj.n_rays()).filter(|&i| proj.crosses(i)).collect();
        let report = grad_check(&theta, |t| {
            let term = Fidelity { projector: &proj, measured: &p.values, rays: &rays, anchor: None };
            loss_refine(&net, t, &rows, &term).unwrap()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn loss_fid_grad_and_anchor() {
        let (net, theta, rows, proj, p) = refine_setup();
        let rays: Vec<usize> = (0..proj.n_rays()).filter(|&i| proj.crosses(i)).collect();
        let mut shifted = theta.clone();
        let out_b = net.mlp.layers.last().unwrap().b;
        shifted.get_mut(out_b)[0] += 0.3;
        let f0 = net.eval_rows(&shifted, &rows);
        let report = grad_check(&theta, |t| {
            let term = Fidelity { projector: &proj, measured: &p.values, rays: &rays, anchor: Some((10.0, &f0)) };
            loss_refine(&net, t, &rows, &term).unwrap()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        // at the anchor the regularizer vanishes exactly
        let anchor = net.eval_rows(&theta, &rows);
        let plain = Fidelity { projector: &proj, measured: &p.values, rays: &rays, anchor: None };
        let anchored = Fidelity { projector: &proj, measured: &p.values, rays: &rays, anchor: Some((10.0, &anchor)) };
        let (a, _) = loss_refine(&net, &theta, &rows, &plain).unwrap();
        let (b, _) = loss_refine(&net, &theta, &rows, &anchored).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_free_ray_loss() {
        let (net, theta, rows, proj, p) = refine_setup();
        let i = (0..proj.n_rays()).find(|&i| proj.crosses(i)).unwrap();
        let term = Fidelity { projector: &proj, measured: &p.values, rays: &[i], anchor: None };
        let (loss, _) = loss_refine(&net, &theta, &rows, &term).unwrap();
        let img = net.eval_rows(&theta, &rows);
        let expect = (p.values[i] as f64 - proj.ray_integral(&img, i)).abs();
        assert!((loss - expect).abs() < 1e-12);
        let none = Fidelity { projector: &proj, measured: &p.values, rays: &[], anchor: None };
        assert!(matches!(loss_refine(&net, &theta, &rows, &none), Err(InrError::NoUnaffected)));
    }

    #[test]
    fn zero_meta_epochs_is_identity() {
        let geom = ImageGeometry::new(8, 10.0).unwrap();
        let proj = Projector::new(geom, SinogramGeometry::parallel(8, 12, &geom).unwrap()).unwrap();
        let (net, w) = InrNet::build(&tiny_cfg().unconditioned(), 1).unwrap();
        let cfg = MetaConfig { epochs: 0, inner_steps: 4, inner_lr: 1e-3, outer_lr: 5e-4, ray_batch: 64, seed: 0 };
        let sinos = vec![Sinogram::zeros(proj.sino)];
        assert_eq!(meta_init(&net, &w.theta, &sinos, &proj, &cfg).unwrap(), w.theta);
    }

    #[test]
    fn refinement_zero_iterations_and_determinism() {
        let geom = ImageGeometry::new(8, 20.0).unwrap();
        let proj = Projector::new(geom, SinogramGeometry::parallel(8, 12, &geom).unwrap()).unwrap();
        let (net, w) = InrNet::build(&tiny_cfg().unconditioned(), 2).unwrap();
        let x = net.mlp_input::<f32>(&geom, None);
        let p = proj.forward_project(&rand_image(geom, 3, 0.02)).unwrap();
        let trace = MetalTrace::empty(proj.sino);
        let cfg = RefineConfig { n_iter: 0, lr: 1e-3, lambda: Some(10.0), ray_batch: 32, seed: 1 };
        assert_eq!(refine(&net, &w.theta, &x, &proj, &p, &trace, &cfg).unwrap().theta, w.theta);
        let cfg = RefineConfig { n_iter: 5, ..cfg };
        let a = refine(&net, &w.theta, &x, &proj, &p, &trace, &cfg).unwrap();
        let b = refine(&net, &w.theta, &x, &proj, &p, &trace, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta, w.theta);
    }
}
