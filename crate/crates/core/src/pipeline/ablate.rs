//! Paired comparisons against the main pipeline: single-channel encoder
//! input, zero-mask residual conditioning, and the three initializations of
//! the refined prior.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rayon::prelude::*;

use super::{derive_seed, write_file, PipelineError, PreparedCase, Result};
use crate::eval::{self, MetricRow};
use crate::inr::{generate_prior, pretrain_stage, refine, InrNet, PretrainConfig, RefineConfig, TrainSample};
use crate::phantom::Split;
use crate::neural::ParamStore;
use crate::raster::Image;
use crate::residual::{correct, train_residual};

use super::Pipeline;

/// Lower bound on the mean pairwise RMSE between priors refined from
/// different random seeds. The desk preset at seed 0 measured 0.0127.
pub const RANDOM_SPREAD_FLOOR: f64 = 5e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    MuMa,
    MaskCond,
    Init,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::MuMa, Ablation::MaskCond, Ablation::Init];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MuMa => "mu_ma",
            Ablation::MaskCond => "mask_cond",
            Ablation::Init => "init",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| PipelineError::UnknownAblation(s.to_string()))
    }
}

/// Side-by-side metrics of a reference variant and its alternatives.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub which: Ablation,
    /// Stage column holds the variant name; the first variant is the reference.
    pub rows: Vec<MetricRow>,
    pub variants: Vec<String>,
    /// Mean RMSE per variant, in `variants` order.
    pub mean_rmse: Vec<f64>,
    pub checks: Vec<(String, bool)>,
    /// Scalar findings reported alongside the table.
    pub notes: Vec<(String, f64)>,
    pub summary: String,
}

impl AblationOutcome {
    pub fn holds(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }

    pub fn note(&self, key: &str) -> Option<f64> {
        self.notes.iter().find(|n| n.0 == key).map(|n| n.1)
    }
}

pub(super) fn run(p: &Pipeline, which: Ablation) -> Result<AblationOutcome> {
    let start = Instant::now();
    let out = match which {
        Ablation::MuMa => mu_ma(p)?,
        Ablation::MaskCond => mask_cond(p)?,
        Ablation::Init => init(p)?,
    };
    info!("ablation {}: {:.1}s", which.name(), start.elapsed().as_secs_f64());
    let dir = p.layout.ablate(which.name());
    std::fs::create_dir_all(&dir).map_err(super::io_err(&dir))?;
    eval::write_csv(&dir.join("metrics.csv"), &out.rows)?;
    write_file(&dir.join("deltas.csv"), deltas_csv(&out))?;
    write_file(&dir.join("summary.md"), &out.summary)?;
    Ok(out)
}

fn finish(
    which: Ablation,
    rows: Vec<MetricRow>,
    variants: &[&str],
    checks: Vec<(String, bool)>,
    notes: Vec<(String, f64)>,
) -> AblationOutcome {
    let mean_rmse: Vec<f64> = variants
        .iter()
        .map(|v| {
            let sel: Vec<f64> = rows.iter().filter(|r| r.stage == *v).map(|r| r.rmse).collect();
            sel.iter().sum::<f64>() / sel.len().max(1) as f64
        })
        .collect();
    let mut s = format!("## Ablation: {}\n\n| variant | n | mean RMSE | delta vs {} |\n|---|---|---|---|\n", which.name(), variants[0]);
    for (v, m) in variants.iter().zip(&mean_rmse) {
        let n = rows.iter().filter(|r| r.stage == *v).count();
        let _ = writeln!(s, "| {v} | {n} | {m:.6} | {:+.6} |", m - mean_rmse[0]);
    }
    if !notes.is_empty() {
        s.push('\n');
        for (k, v) in &notes {
            let _ = writeln!(s, "- {k}: {v:.6}");
        }
    }
    s.push('\n');
    for (c, ok) in &checks {
        let _ = writeln!(s, "- [{}] {c}", if *ok { "x" } else { " " });
    }
    AblationOutcome {
        which,
        rows,
        variants: variants.iter().map(|v| v.to_string()).collect(),
        mean_rmse,
        checks,
        notes,
        summary: s,
    }
}

/// Per case and variant: RMSE and the signed difference to the reference.
fn deltas_csv(out: &AblationOutcome) -> String {
    let mut s = String::from("case,variant,rmse,reference_rmse,delta_rmse\n");
    let reference = &out.variants[0];
    for r in out.rows.iter().filter(|r| &r.stage != reference) {
        if let Some(base) = out.rows.iter().find(|b| b.case == r.case && &b.stage == reference) {
            let _ = writeln!(s, "{},{},{:?},{:?},{:?}", r.case, r.stage, r.rmse, base.rmse, r.rmse - base.rmse);
        }
    }
    s
}

fn validation(p: &Pipeline) -> Result<Vec<PreparedCase>> {
    let manifest = p.manifest()?;
    let cases = p.prepare(&manifest, Split::Validation)?;
    if cases.is_empty() {
        return Err(PipelineError::Missing("validation cases".into()));
    }
    Ok(cases)
}

/// Stage 0 retrained with μ alone as encoder input, against the main
/// two-channel prior, both before refinement.
fn mu_ma(p: &Pipeline) -> Result<AblationOutcome> {
    let manifest = p.manifest()?;
    let train = p.prepare(&manifest, Split::Train)?;
    let val = validation(p)?;
    let bundle = p.load_stages()?;

    let (net1, init1) = InrNet::build(&p.cfg.inr.single_channel(), derive_seed(p.cfg.seed, "inr"))?;
    let samples = train
        .iter()
        .map(|c| Ok(TrainSample { input: net1.encoder_input(&c.case.mu, None)?, target: c.case.mu_star.values.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let pc = PretrainConfig {
        epochs: p.cfg.pretrain.epochs,
        batch: p.cfg.pretrain.batch,
        lr: p.cfg.pretrain.lr,
        seed: derive_seed(p.cfg.seed, "pretrain0"),
    };
    let (w1, _) = pretrain_stage(&net1, &init1, &samples, &p.projector.img, &pc)?;

    let rows = val
        .par_iter()
        .map(|c| {
            let cfg = p.prior_config(c.seed, 0);
            let two = generate_prior(&bundle, &c.data(), &cfg, &p.projector, p.cfg.nmar.eps_floor)?.prior_init;
            let one = net1.predict(&w1, &c.case.mu, None)?;
            Ok(vec![
                MetricRow::compute(&c.id, "mu+mu_ma", &two, &c.case.mu_star, 0.0)?,
                MetricRow::compute(&c.id, "mu_only", &one, &c.case.mu_star, 0.0)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let mut out = finish(Ablation::MuMa, rows, &["mu+mu_ma", "mu_only"], Vec::new(), Vec::new());
    out.checks.push(("two-channel input gives lower mean prior RMSE".into(), out.mean_rmse[0] < out.mean_rmse[1]));
    Ok(rebuild(out))
}

/// Residual network retrained with an all-zero mask channel, against the
/// main mask-conditioned network on the same NMAR images.
fn mask_cond(p: &Pipeline) -> Result<AblationOutcome> {
    let manifest = p.manifest()?;
    let train = p.prepare(&manifest, Split::Train)?;
    let val = validation(p)?;
    let samples = p.cached_residual_samples(&train)?;
    let (net, w_cond) = p.load_residual()?;
    let (_, init) = p.residual_net()?;
    let (w_zero, _) = train_residual(&net, &init, &samples, &p.residual_train_config(true))?;
    let dir = p.layout.ablate(Ablation::MaskCond.name());
    p.save_residual(&net, &w_zero, &dir.join("resnet_zero_mask.w"), &dir.join("branch_zero_mask.w"))?;

    let rows = val
        .par_iter()
        .map(|c| {
            let nmar = p.require_output(&c.id, "nmar")?;
            let cond = correct(&net, &w_cond, &nmar, &c.segmented, false)?;
            let zero = correct(&net, &w_zero, &nmar, &c.segmented, true)?;
            Ok(vec![
                MetricRow::compute(&c.id, "mask", &cond, &c.case.mu_star, 0.0)?,
                MetricRow::compute(&c.id, "zero_mask", &zero, &c.case.mu_star, 0.0)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let mut out = finish(Ablation::MaskCond, rows, &["mask", "zero_mask"], Vec::new(), Vec::new());
    let delta = out.mean_rmse[1] - out.mean_rmse[0];
    out.notes.push(("mean RMSE gain from conditioning".into(), delta));
    out.checks.push(("mask conditioning does not worsen mean RMSE".into(), delta >= 0.0));
    Ok(rebuild(out))
}

fn pairwise_spread(images: &[Image]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += eval::rmse(&images[i], &images[j], None)?;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// First iteration whose trailing mean loss drops below `threshold`.
fn iterations_to(losses: &[f64], threshold: f64) -> usize {
    const WINDOW: usize = 10;
    (WINDOW..=losses.len())
        .find(|&i| losses[i - WINDOW..i].iter().sum::<f64>() / WINDOW as f64 <= threshold)
        .unwrap_or(losses.len() + 1)
}

struct InitCase {
    rows: Vec<MetricRow>,
    spread: f64,
    meta_faster: bool,
}

/// Data-driven, meta-learned and random initial weights refined for the same
/// number of iterations on the first validation cases.
fn init(p: &Pipeline) -> Result<AblationOutcome> {
    let val = validation(p)?;
    let n = p.cfg.baseline.spread_cases.min(val.len()).max(1);
    let cases = &val[..n];
    let bundle = p.load_stages()?;
    let theta_meta = match p.load_meta()? {
        Some(t) => t,
        None => {
            let manifest = p.manifest()?;
            let train = p.prepare(&manifest, Split::Train)?;
            p.train_meta(&train)?
        }
    };
    let ucfg = p.cfg.inr.unconditioned();
    let (unet, _) = InrNet::build(&ucfg, derive_seed(p.cfg.seed, "meta-init"))?;
    let rows_x = unet.mlp_input::<f32>(&p.projector.img, None);
    let n_iter = p.cfg.prior.n_iter;
    let seeds = p.cfg.baseline.random_seeds;
    let geom = p.projector.img;

    let naive = |theta0: &ParamStore<f32>, c: &PreparedCase| -> Result<(Image, Vec<f64>)> {
        let rc = RefineConfig {
            n_iter,
            lr: p.cfg.prior.lr_refine,
            lambda: None,
            ray_batch: p.cfg.prior.ray_batch,
            seed: derive_seed(c.seed, "refine"),
        };
        let out = refine(&unet, theta0, &rows_x, &p.projector, &c.case.sino_corrupt, &c.trace, &rc)?;
        Ok((Image { geometry: geom, values: unet.eval_rows(&out.theta, &rows_x) }, out.losses))
    };

    let per_case = cases
        .iter()
        .map(|c| {
            let cfg = p.prior_config(c.seed, n_iter);
            let dd = generate_prior(&bundle, &c.data(), &cfg, &p.projector, p.cfg.nmar.eps_floor)?;
            let (meta_img, meta_loss) = naive(&theta_meta, c)?;
            let mut random = Vec::new();
            let mut random_loss = Vec::new();
            for s in 0..seeds {
                let (_, w) = InrNet::build(&ucfg, derive_seed(p.cfg.seed, &format!("random{s}")))?;
                let (img, l) = naive(&w.theta, c)?;
                random.push(img);
                random_loss.push(l);
            }
            let mut rows = vec![
                MetricRow::compute(&c.id, "data_driven", &dd.prior, &c.case.mu_star, 0.0)?,
                MetricRow::compute(&c.id, "meta", &meta_img, &c.case.mu_star, 0.0)?,
            ];
            // random-init metrics are averaged over seeds
            let mut r = MetricRow::compute(&c.id, "random", &random[0], &c.case.mu_star, 0.0)?;
            for img in &random[1..] {
                let m = MetricRow::compute(&c.id, "random", img, &c.case.mu_star, 0.0)?;
                r.rmse += m.rmse;
                r.psnr += m.psnr;
                r.ssim += m.ssim;
            }
            let k = random.len() as f64;
            r.rmse /= k;
            r.psnr /= k;
            r.ssim /= k;
            rows.push(r);
            let final_of = |l: &[f64]| l.last().copied().unwrap_or(f64::INFINITY);
            let threshold = 1.5 * random_loss.iter().map(|l| final_of(l)).chain([final_of(&meta_loss)]).fold(f64::INFINITY, f64::min);
            let meta_iters = iterations_to(&meta_loss, threshold);
            let random_iters = random_loss.iter().map(|l| iterations_to(l, threshold)).min().unwrap_or(usize::MAX);
            Ok(InitCase { rows, spread: pairwise_spread(&random)?, meta_faster: meta_iters < random_iters })
        })
        .collect::<Result<Vec<_>>>()?;

    // the data-driven path twice on the first case
    let c = &cases[0];
    let cfg = p.prior_config(c.seed, n_iter);
    let a = generate_prior(&bundle, &c.data(), &cfg, &p.projector, p.cfg.nmar.eps_floor)?.prior;
    let b = generate_prior(&bundle, &c.data(), &cfg, &p.projector, p.cfg.nmar.eps_floor)?.prior;
    let deterministic = a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits());

    let spread = per_case.iter().map(|c| c.spread).sum::<f64>() / n as f64;
    let meta_faster = per_case.iter().filter(|c| c.meta_faster).count() as f64 / n as f64;
    let rows = per_case.into_iter().flat_map(|c| c.rows).collect();
    let mut out = finish(
        Ablation::Init,
        rows,
        &["data_driven", "meta", "random"],
        Vec::new(),
        vec![
            ("random-init pairwise RMSE spread".into(), spread),
            ("random-init spread floor".into(), RANDOM_SPREAD_FLOOR),
            ("fraction of cases where meta reaches the loss threshold first".into(), meta_faster),
            ("refinement iterations".into(), n_iter as f64),
        ],
    );
    let m = &out.mean_rmse;
    out.checks = vec![
        ("data-driven < meta < random in mean prior RMSE".into(), m[0] < m[1] && m[1] < m[2]),
        ("random-init spread exceeds the recorded floor".into(), spread > RANDOM_SPREAD_FLOOR),
        ("data-driven prior is bit-identical across repeats".into(), deterministic),
    ];
    Ok(rebuild(out))
}

/// Re-renders the summary once checks and notes are final.
fn rebuild(out: AblationOutcome) -> AblationOutcome {
    let variants: Vec<&str> = out.variants.iter().map(String::as_str).collect();
    finish(out.which, out.rows.clone(), &variants, out.checks.clone(), out.notes.clone())
}
