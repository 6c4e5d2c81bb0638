//! Metal-conditioned residual correction: a Haar-pyramid encoder–decoder
//! whose AdaIN parameters come from a branch network fed with the metal mask.

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::neural::{
    adain, adain_backward, avg_pool2, avg_pool2_backward, concat_channels, haar_dwt, haar_idwt, leaky_relu,
    leaky_relu_backward, relu, relu_backward, split_channels, Adam, AdainCache, Conv2d, Dense, Feat, Grads, NeuralError,
    ParamStore,
};
use crate::raster::{Image, MetalMask, DEFAULT_MU_WATER};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("patch size {patch} exceeds image {rows}x{cols}")]
    PatchTooLarge { patch: usize, rows: usize, cols: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

pub type Result<T> = std::result::Result<T, ResidualError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualConfig {
    /// Encoder channels per scale; the length is the number of Haar scales S.
    pub channels: Vec<usize>,
    pub bottleneck: usize,
    pub patch: usize,
    pub slope: f64,
    pub trunk_input: usize,
    pub trunk_channels: [usize; 4],
    pub branch_width: usize,
    pub mu_scale: f64,
}

impl ResidualConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32],
            bottleneck: 32,
            patch: 32,
            slope: 0.2,
            trunk_input: 32,
            trunk_channels: [8, 16, 16, 16],
            branch_width: 64,
            mu_scale: DEFAULT_MU_WATER,
        }
    }

    pub fn paper() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            bottleneck: 256,
            patch: 128,
            slope: 0.2,
            trunk_input: 32,
            trunk_channels: [16, 32, 32, 32],
            branch_width: 256,
            mu_scale: DEFAULT_MU_WATER,
        }
    }

    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) || self.bottleneck == 0 {
            return Err(ResidualError::Shape("channel plan must be nonempty and positive".into()));
        }
        let unit = 1usize << self.scales();
        if self.patch == 0 || self.patch % unit != 0 {
            return Err(ResidualError::Shape(format!("patch {} not divisible by {unit}", self.patch)));
        }
        if self.trunk_input % 8 != 0 || self.trunk_input == 0 {
            return Err(ResidualError::Shape("trunk input must be a positive multiple of 8".into()));
        }
        let (a, b) = (self.patch.max(self.trunk_input), self.patch.min(self.trunk_input));
        if a % b != 0 {
            return Err(ResidualError::Shape("patch and trunk input sizes must divide each other".into()));
        }
        Ok(())
    }
}

/// Convolution followed by AdaIN and LeakyReLU; `site` indexes the branch head.
#[derive(Clone, Copy, Debug, PartialEq)]
struct AdaConv {
    conv: Conv2d,
    site: usize,
}

struct AdaConvCache<T> {
    input: Feat<T>,
    adain: AdainCache<T>,
    normed: Feat<T>,
}

impl AdaConv {
    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Feat<T>, mods: &[(Vec<T>, Vec<T>)], slope: f64) -> Result<(Feat<T>, AdaConvCache<T>)> {
        let h = self.conv.forward(p, x)?;
        let (alpha, beta) = &mods[self.site];
        let (normed, cache) = adain(&h, alpha, beta);
        let out = Feat { data: leaky_relu(&normed.data, slope), ..normed.clone() };
        Ok((out, AdaConvCache { input: x.clone(), adain: cache, normed }))
    }

    /// Returns dx (when asked) and accumulates (dα, dβ) for the site.
    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &AdaConvCache<T>,
        dout: &Feat<T>,
        mods: &[(Vec<T>, Vec<T>)],
        dmods: &mut [(Vec<T>, Vec<T>)],
        g: &mut Grads<T>,
        slope: f64,
        want_dx: bool,
    ) -> Result<Option<Feat<T>>> {
        let dn = Feat { data: leaky_relu_backward(&cache.normed.data, &dout.data, slope), ..dout.clone() };
        let (dh, da, db) = adain_backward(&cache.adain, &mods[self.site].1, &dn);
        let slot = &mut dmods[self.site];
        slot.0.iter_mut().zip(&da).for_each(|(a, &b)| *a = *a + b);
        slot.1.iter_mut().zip(&db).for_each(|(a, &b)| *a = *a + b);
        Ok(self.conv.backward(p, &cache.input, &dh, g, want_dx)?)
    }
}

/// Maps a mask patch to (α, β) for every AdaIN site.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchNet {
    trunk: [Conv2d; 4],
    fc: [Dense; 2],
    heads: Vec<Dense>,
    trunk_input: usize,
    site_channels: Vec<usize>,
}

struct BranchCache<T> {
    trunk_in: Vec<Feat<T>>,
    trunk_pre: Vec<Feat<T>>,
    fc_in: Vec<Vec<T>>,
    head_in: Vec<T>,
    n: usize,
}

impl BranchNet {
    fn build(cfg: &ResidualConfig, site_channels: Vec<usize>, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Self {
        let t = cfg.trunk_channels;
        let trunk = [
            Conv2d::new(store, "branch.conv0", 1, t[0], 3, rng),
            Conv2d::new(store, "branch.conv1", t[0], t[1], 3, rng),
            Conv2d::new(store, "branch.conv2", t[1], t[2], 3, rng),
            Conv2d::new(store, "branch.conv3", t[2], t[3], 3, rng),
        ];
        let side = cfg.trunk_input / 8;
        let flat = t[3] * side * side;
        let w = cfg.branch_width;
        let fc = [Dense::new(store, "branch.fc0", flat, w, rng), Dense::new(store, "branch.fc1", w, w, rng)];
        let heads: Vec<Dense> = site_channels
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let mut head_rng = ChaCha8Rng::seed_from_u64(rng.random());
                let d = Dense::new(store, &format!("branch.head{j}"), w, 2 * c, &mut head_rng);
                // small weights and β bias of one: the initial modulation is plain standardization
                store.get_mut(d.w).iter_mut().for_each(|v| *v *= 0.1);
                store.get_mut(d.b)[c..].iter_mut().for_each(|v| *v = 1.0);
                d
            })
            .collect();
        Self { trunk, fc, heads, trunk_input: cfg.trunk_input, site_channels }
    }

    /// Area-average (or replicate) a mask batch to the trunk input size.
    fn resize<T: Real>(&self, mask: &Feat<T>) -> Feat<T> {
        let s = self.trunk_input;
        if mask.h == s && mask.w == s {
            return mask.clone();
        }
        let mut out = Feat::zeros(mask.n, 1, s, s);
        if mask.h > s {
            let f = mask.h / s;
            let inv = T::of(1.0 / (f * f) as f64);
            for i in 0..mask.n {
                let src = mask.channel(i, 0);
                for r in 0..s {
                    for c in 0..s {
                        let mut acc = T::zero();
                        for a in 0..f {
                            for b in 0..f {
                                acc = acc + src[(r * f + a) * mask.w + c * f + b];
                            }
                        }
                        out.data[i * s * s + r * s + c] = acc * inv;
                    }
                }
            }
        } else {
            let f = s / mask.h;
            for i in 0..mask.n {
                let src = mask.channel(i, 0);
                for r in 0..s {
                    for c in 0..s {
                        out.data[i * s * s + r * s + c] = src[(r / f) * mask.w + c / f];
                    }
                }
            }
        }
        out
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, mask: &Feat<T>) -> Result<(Vec<(Vec<T>, Vec<T>)>, BranchCache<T>)> {
        let mut h = self.resize(mask);
        let mut cache = BranchCache { trunk_in: Vec::new(), trunk_pre: Vec::new(), fc_in: Vec::new(), head_in: Vec::new(), n: mask.n };
        for (i, conv) in self.trunk.iter().enumerate() {
            let pre = conv.forward(p, &h)?;
            let act = Feat { data: relu(&pre.data), ..pre.clone() };
            cache.trunk_in.push(std::mem::replace(&mut h, if i < 3 { avg_pool2(&act)? } else { act }));
            cache.trunk_pre.push(pre);
        }
        let n = mask.n;
        let mut v = h.data;
        for fc in &self.fc {
            let y = fc.forward(p, &v, n);
            cache.fc_in.push(std::mem::replace(&mut v, relu(&y)));
        }
        let mut mods = Vec::with_capacity(self.heads.len());
        for (head, &c) in self.heads.iter().zip(&self.site_channels) {
            let y = head.forward(p, &v, n);
            let mut alpha = Vec::with_capacity(n * c);
            let mut beta = Vec::with_capacity(n * c);
            for row in y.chunks_exact(2 * c) {
                alpha.extend_from_slice(&row[..c]);
                beta.extend_from_slice(&row[c..]);
            }
            mods.push((alpha, beta));
        }
        cache.head_in = v;
        Ok((mods, cache))
    }

    fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &BranchCache<T>, dmods: &[(Vec<T>, Vec<T>)], g: &mut Grads<T>) -> Result<()> {
        let n = cache.n;
        let w = self.fc[1].n_out;
        let mut dv = vec![T::zero(); n * w];
        for ((head, &c), (da, db)) in self.heads.iter().zip(&self.site_channels).zip(dmods) {
            let mut dy = Vec::with_capacity(n * 2 * c);
            for i in 0..n {
                dy.extend_from_slice(&da[i * c..(i + 1) * c]);
                dy.extend_from_slice(&db[i * c..(i + 1) * c]);
            }
            let dx = head.backward(p, &cache.head_in, &dy, n, g, true).expect("requested");
            dv.iter_mut().zip(&dx).for_each(|(a, &b)| *a = *a + b);
        }
        for (i, fc) in self.fc.iter().enumerate().rev() {
            let out = if i == 1 { &cache.head_in } else { &cache.fc_in[1] };
            let dpre = relu_backward(out, &dv);
            dv = fc.backward(p, &cache.fc_in[i], &dpre, n, g, true).expect("requested");
        }
        let last = &cache.trunk_pre[3];
        let mut dh = Feat::from_vec(n, last.c, last.h, last.w, dv);
        for (i, conv) in self.trunk.iter().enumerate().rev() {
            let dact = if i < 3 { avg_pool2_backward(&dh) } else { dh };
            let pre = &cache.trunk_pre[i];
            let dpre = Feat { data: relu_backward(&pre.data, &dact.data), ..dact };
            match conv.backward(p, &cache.trunk_in[i], &dpre, g, i > 0)? {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        Ok(())
    }
}

/// φ (encoder–decoder) and ζ (branch network).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualWeights {
    pub phi: ParamStore<f32>,
    pub zeta: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    pub cfg: ResidualConfig,
    enc: Vec<[AdaConv; 2]>,
    bottleneck: [AdaConv; 2],
    ups: Vec<Conv2d>,
    dec: Vec<[AdaConv; 2]>,
    out: Conv2d,
    pub branch: BranchNet,
}

pub struct ResidualCache<T> {
    enc: Vec<[AdaConvCache<T>; 2]>,
    bottleneck: [AdaConvCache<T>; 2],
    up_in: Vec<Feat<T>>,
    dec: Vec<[AdaConvCache<T>; 2]>,
    out_in: Feat<T>,
    enc_channels: Vec<usize>,
    branch: BranchCache<T>,
    mods: Vec<(Vec<T>, Vec<T>)>,
}

impl ResidualNet {
    pub fn build(cfg: &ResidualConfig, seed: u64) -> Result<(Self, ResidualWeights)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi = ParamStore::new();
        let mut sites = Vec::new();
        let mut block = |store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
            let a = AdaConv { conv: Conv2d::new(store, &format!("{name}.a"), cin, cout, 4, rng), site: sites.len() };
            sites.push(cout);
            let b = AdaConv { conv: Conv2d::new(store, &format!("{name}.b"), cout, cout, 4, rng), site: sites.len() };
            sites.push(cout);
            [a, b]
        };
        let mut enc = Vec::new();
        let mut cin = 1;
        for (l, &c) in cfg.channels.iter().enumerate() {
            enc.push(block(&mut phi, &mut rng, &format!("enc{l}"), cin, c));
            cin = 4 * c;
        }
        let bottleneck = block(&mut phi, &mut rng, "bottleneck", cin, cfg.bottleneck);
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        let mut cup = cfg.bottleneck;
        for l in (0..cfg.scales()).rev() {
            let c = cfg.channels[l];
            ups.push(Conv2d::new(&mut phi, &format!("up{l}"), cup, 4 * c, 1, &mut rng));
            dec.push(block(&mut phi, &mut rng, &format!("dec{l}"), 2 * c, c));
            cup = c;
        }
        let out = Conv2d::new(&mut phi, "out", cup, 1, 1, &mut rng);
        let mut zeta = ParamStore::new();
        let branch = BranchNet::build(cfg, sites, &mut zeta, &mut rng);
        Ok((Self { cfg: cfg.clone(), enc, bottleneck, ups, dec, out, branch }, ResidualWeights { phi, zeta }))
    }

    pub fn n_sites(&self) -> usize {
        self.branch.site_channels.len()
    }

    pub fn header(&self) -> Vec<(String, String)> {
        let c = &self.cfg;
        vec![
            ("channels".into(), c.channels.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
            ("bottleneck".into(), c.bottleneck.to_string()),
            ("patch".into(), c.patch.to_string()),
            ("slope".into(), format!("{:?}", c.slope)),
            ("trunk_input".into(), c.trunk_input.to_string()),
            ("branch_width".into(), c.branch_width.to_string()),
            ("mu_scale".into(), format!("{:?}", c.mu_scale)),
        ]
    }

    /// AdaIN parameters predicted from a mask batch.
    pub fn branch_forward<T: Real>(&self, zeta: &ParamStore<T>, mask: &Feat<T>) -> Result<Vec<(Vec<T>, Vec<T>)>> {
        Ok(self.branch.forward(zeta, mask)?.0)
    }

    /// Predicted residual for scaled inputs `x` (n×1×h×w) and masks.
    pub fn forward<T: Real>(
        &self,
        phi: &ParamStore<T>,
        zeta: &ParamStore<T>,
        x: &Feat<T>,
        mask: &Feat<T>,
    ) -> Result<(Feat<T>, ResidualCache<T>)> {
        let unit = 1usize << self.cfg.scales();
        if x.c != 1 || x.h % unit != 0 || x.w % unit != 0 {
            return Err(ResidualError::Shape(format!("input {}x{} not divisible by {unit}", x.h, x.w)));
        }
        if mask.n != x.n || mask.c != 1 || mask.h != x.h || mask.w != x.w {
            return Err(ResidualError::Shape("mask batch does not match input".into()));
        }
        if (x.h != self.cfg.patch || x.w != self.cfg.patch) && (x.h != x.w || !self.trunk_compatible(x.h)) {
            return Err(ResidualError::Shape(format!("input {}x{} incompatible with the branch trunk", x.h, x.w)));
        }
        let slope = self.cfg.slope;
        let (mods, bcache) = self.branch.forward(zeta, mask)?;
        let mut h = x.clone();
        let mut enc_cache = Vec::new();
        let mut skips = Vec::new();
        for blk in &self.enc {
            let (a, ca) = blk[0].forward(phi, &h, &mods, slope)?;
            let (b, cb) = blk[1].forward(phi, &a, &mods, slope)?;
            enc_cache.push([ca, cb]);
            h = haar_dwt(&b)?;
            skips.push(b);
        }
        let (a, ca) = self.bottleneck[0].forward(phi, &h, &mods, slope)?;
        let (mut u, cb) = self.bottleneck[1].forward(phi, &a, &mods, slope)?;
        let mut up_in = Vec::new();
        let mut dec_cache = Vec::new();
        for (up, blk) in self.ups.iter().zip(&self.dec) {
            let skip = skips.pop().expect("one skip per scale");
            let lifted = haar_idwt(&up.forward(phi, &u)?)?;
            up_in.push(u);
            let cat = concat_channels(&lifted, &skip);
            let (a, ca) = blk[0].forward(phi, &cat, &mods, slope)?;
            let (b, cb) = blk[1].forward(phi, &a, &mods, slope)?;
            dec_cache.push([ca, cb]);
            u = b;
        }
        let raw = self.out.forward(phi, &u)?;
        let s = T::of(self.cfg.mu_scale);
        let r = Feat { data: raw.data.iter().map(|&v| v * s).collect(), ..raw };
        let enc_channels = self.cfg.channels.clone();
        Ok((
            r,
            ResidualCache { enc: enc_cache, bottleneck: [ca, cb], up_in, dec: dec_cache, out_in: u, enc_channels, branch: bcache, mods },
        ))
    }

    fn trunk_compatible(&self, side: usize) -> bool {
        let t = self.cfg.trunk_input;
        side > 0 && (side % t == 0 || t % side == 0)
    }

    /// Gradients of φ and ζ for the output gradient `dr`.
    pub fn backward<T: Real>(
        &self,
        phi: &ParamStore<T>,
        zeta: &ParamStore<T>,
        cache: &ResidualCache<T>,
        dr: &Feat<T>,
    ) -> Result<(Grads<T>, Grads<T>)> {
        let slope = self.cfg.slope;
        let mut gp = phi.zero_grads();
        let mut gz = zeta.zero_grads();
        let mods = &cache.mods;
        let mut dmods: Vec<(Vec<T>, Vec<T>)> = mods.iter().map(|(a, b)| (vec![T::zero(); a.len()], vec![T::zero(); b.len()])).collect();
        let s = T::of(self.cfg.mu_scale);
        let draw = Feat { data: dr.data.iter().map(|&v| v * s).collect(), ..dr.clone() };
        let mut du = self.out.backward(phi, &cache.out_in, &draw, &mut gp, true)?.expect("requested");
        let mut dskips = Vec::new();
        for (i, (up, blk)) in self.ups.iter().zip(&self.dec).enumerate().rev() {
            let [ca, cb] = &cache.dec[i];
            let da = blk[1].backward(phi, cb, &du, mods, &mut dmods, &mut gp, slope, true)?.expect("requested");
            let dcat = blk[0].backward(phi, ca, &da, mods, &mut dmods, &mut gp, slope, true)?.expect("requested");
            let c = self.cfg.channels[self.cfg.scales() - 1 - i];
            let (dlift, dskip) = split_channels(&dcat, c);
            dskips.push(dskip);
            let dup = haar_dwt(&dlift)?;
            du = up.backward(phi, &cache.up_in[i], &dup, &mut gp, true)?.expect("requested");
        }
        // dskips now holds gradients for scales 0..S in order
        let [ca, cb] = &cache.bottleneck;
        let da = self.bottleneck[1].backward(phi, cb, &du, mods, &mut dmods, &mut gp, slope, true)?.expect("requested");
        let mut dh = self.bottleneck[0].backward(phi, ca, &da, mods, &mut dmods, &mut gp, slope, true)?.expect("requested");
        for (l, blk) in self.enc.iter().enumerate().rev() {
            let mut db = haar_idwt(&dh)?;
            db.add_assign(&dskips[l]);
            let [ca, cb] = &cache.enc[l];
            let da = blk[1].backward(phi, cb, &db, mods, &mut dmods, &mut gp, slope, true)?.expect("requested");
            match blk[0].backward(phi, ca, &da, mods, &mut dmods, &mut gp, slope, l > 0)? {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        debug_assert_eq!(cache.enc_channels.len(), self.enc.len());
        self.branch.backward(zeta, &cache.branch, &dmods, &mut gz)?;
        Ok((gp, gz))
    }
}

/// One training triple on the full image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSample {
    pub input: Image,
    pub target: Image,
    pub mask: MetalMask,
}

impl ResidualSample {
    /// r = μ_NMAR − μ* with the metal mask used for conditioning.
    pub fn new(mu_nmar: &Image, mu_star: &Image, mask: &MetalMask) -> Self {
        Self { input: mu_nmar.clone(), target: mu_nmar.sub(mu_star), mask: mask.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualTrainConfig {
    pub epochs: usize,
    pub patches_per_step: usize,
    pub cases_per_step: usize,
    pub lr: f64,
    pub seed: u64,
    /// Feed an all-zero mask to the branch network (conditioning ablation).
    pub zero_mask: bool,
}

fn crop(values: &[f32], cols: usize, r0: usize, c0: usize, size: usize, out: &mut Vec<f32>) {
    for r in 0..size {
        let start = (r0 + r) * cols + c0;
        out.extend_from_slice(&values[start..start + size]);
    }
}

/// Mean absolute error between predicted and true residual patches.
pub fn patch_loss<T: Real>(
    net: &ResidualNet,
    phi: &ParamStore<T>,
    zeta: &ParamStore<T>,
    x: &Feat<T>,
    mask: &Feat<T>,
    target: &[T],
) -> Result<(f64, Grads<T>, Grads<T>)> {
    let (r, cache) = net.forward(phi, zeta, x, mask)?;
    let inv_n = 1.0 / r.data.len() as f64;
    let mut loss = 0.0;
    let dr: Vec<T> = r
        .data
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            loss += d.abs();
            T::of(d.signum() * inv_n)
        })
        .collect();
    let (gp, gz) = net.backward(phi, zeta, &cache, &Feat { data: dr, ..r })?;
    Ok((loss * inv_n, gp, gz))
}

/// Adam on random patch batches. Each step draws `patches_per_step` patches
/// spread over `cases_per_step` cases; one epoch visits every case once.
pub fn train_residual(
    net: &ResidualNet,
    init: &ResidualWeights,
    samples: &[ResidualSample],
    cfg: &ResidualTrainConfig,
) -> Result<(ResidualWeights, Vec<f64>)> {
    if samples.is_empty() {
        return Err(ResidualError::EmptyDataset);
    }
    let p = net.cfg.patch;
    let g0 = samples[0].input.geometry;
    if p > g0.n_rows || p > g0.n_cols {
        return Err(ResidualError::PatchTooLarge { patch: p, rows: g0.n_rows, cols: g0.n_cols });
    }
    if samples.iter().any(|s| s.input.geometry != g0 || s.target.geometry != g0 || s.mask.geometry != g0) {
        return Err(ResidualError::Shape("all samples must share one geometry".into()));
    }
    let inv = (1.0 / net.cfg.mu_scale) as f32;
    let mut w = init.clone();
    let mut opt_phi = Adam::new(&w.phi, cfg.lr);
    let mut opt_zeta = Adam::new(&w.zeta, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_step = cfg.cases_per_step.max(1);
    let n_patch = cfg.patches_per_step.max(1);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for group in order.chunks(per_step) {
            let (mut xs, mut ms, mut ts) = (Vec::new(), Vec::new(), Vec::new());
            for k in 0..n_patch {
                let s = &samples[group[k % group.len()]];
                let r0 = rng.random_range(0..=g0.n_rows - p);
                let c0 = rng.random_range(0..=g0.n_cols - p);
                let before = xs.len();
                crop(&s.input.values, g0.n_cols, r0, c0, p, &mut xs);
                xs[before..].iter_mut().for_each(|v| *v *= inv);
                crop(&s.target.values, g0.n_cols, r0, c0, p, &mut ts);
                let mask_vals: Vec<f32> = s.mask.bits.iter().map(|&b| if b && !cfg.zero_mask { 1.0 } else { 0.0 }).collect();
                crop(&mask_vals, g0.n_cols, r0, c0, p, &mut ms);
            }
            let x = Feat::from_vec(n_patch, 1, p, p, xs);
            let m = Feat::from_vec(n_patch, 1, p, p, ms);
            let (loss, gp, gz) = patch_loss(net, &w.phi, &w.zeta, &x, &m, &ts)?;
            opt_phi.step(&mut w.phi, &gp);
            opt_zeta.step(&mut w.zeta, &gz);
            total += loss;
            steps += 1;
        }
        let mean = total / steps as f64;
        debug!("residual epoch {epoch}: loss {mean:.6e}");
        log.push(mean);
    }
    Ok((w, log))
}

/// Smooth tile weight, positive everywhere; shifted copies at half the tile
/// size sum to one.
fn tile_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|i| {
            let t = std::f64::consts::PI * (i as f64 + 0.5) / size as f64;
            t.sin().powi(2)
        })
        .collect()
}

fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = (tile / 2).max(1);
    let mut out: Vec<usize> = (0..=len - tile).step_by(stride).collect();
    if *out.last().expect("nonempty") != len - tile {
        out.push(len - tile);
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Full-image inference: μ_NMAR − G(μ_NMAR; χ_D) with overlapping tiles at
/// the training patch size blended by a raised-cosine window.
pub fn correct(net: &ResidualNet, w: &ResidualWeights, mu_nmar: &Image, mask: &MetalMask, zero_mask: bool) -> Result<Image> {
    let r = predict_residual(net, w, mu_nmar, mask, zero_mask)?;
    Ok(mu_nmar.sub(&r))
}

pub fn predict_residual(net: &ResidualNet, w: &ResidualWeights, img: &Image, mask: &MetalMask, zero_mask: bool) -> Result<Image> {
    let g = img.geometry;
    if mask.geometry != g {
        return Err(ResidualError::Shape("mask geometry differs from image".into()));
    }
    let p = net.cfg.patch;
    // pad by reflection when the image is smaller than a tile
    let (rows, cols) = (g.n_rows.max(p), g.n_cols.max(p));
    let inv = (1.0 / net.cfg.mu_scale) as f32;
    let at = |v: &dyn Fn(usize) -> f32, r: usize, c: usize| v(reflect(r as isize, g.n_rows) * g.n_cols + reflect(c as isize, g.n_cols));
    let xs_fn = |i: usize| img.values[i] * inv;
    let ms_fn = |i: usize| if mask.bits[i] && !zero_mask { 1.0 } else { 0.0 };
    let rs = tile_starts(rows, p);
    let cs = tile_starts(cols, p);
    let n = rs.len() * cs.len();
    let (mut xs, mut ms) = (Vec::with_capacity(n * p * p), Vec::with_capacity(n * p * p));
    for &r0 in &rs {
        for &c0 in &cs {
            for r in 0..p {
                for c in 0..p {
                    xs.push(at(&xs_fn, r0 + r, c0 + c));
                    ms.push(at(&ms_fn, r0 + r, c0 + c));
                }
            }
        }
    }
    let x = Feat::from_vec(n, 1, p, p, xs);
    let m = Feat::from_vec(n, 1, p, p, ms);
    let (out, _) = net.forward(&w.phi, &w.zeta, &x, &m)?;
    let win = tile_window(p);
    let mut acc = vec![0.0f64; rows * cols];
    let mut wsum = vec![0.0f64; rows * cols];
    let mut t = 0;
    for &r0 in &rs {
        for &c0 in &cs {
            let tile = out.channel(t, 0);
            for r in 0..p {
                for c in 0..p {
                    let wt = if n == 1 { 1.0 } else { win[r] * win[c] };
                    let idx = (r0 + r) * cols + c0 + c;
                    acc[idx] += wt * tile[r * p + c] as f64;
                    wsum[idx] += wt;
                }
            }
            t += 1;
        }
    }
    let mut values = Vec::with_capacity(g.len());
    for r in 0..g.n_rows {
        for c in 0..g.n_cols {
            let idx = r * cols + c;
            values.push((acc[idx] / wsum[idx]) as f32);
        }
    }
    Ok(Image { geometry: g, values })
}
