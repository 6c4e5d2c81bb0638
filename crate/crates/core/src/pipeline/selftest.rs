//! Invariant suites shared by `mgmar selftest` and the acceptance gate.
//! Every check is seeded and prints identically on every run.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::inr::{loss_init, loss_refine, Fidelity, InrConfig, InrNet};
use crate::neural::{
    adain, adain_backward, grad_check, haar_dwt, haar_idwt, Conv2d, Dense, Feat, GradReport, ParamId, ParamStore,
};
use crate::nmar::{interpolation_error, nmar_complete, ErrorNorm};
use crate::projector::{build_ray, Projector};
use crate::raster::{Image, ImageGeometry, MetalTrace, Sinogram, SinogramGeometry};
use crate::residual::{patch_loss, ResidualConfig, ResidualNet};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value < limit`.
    pub fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value < limit }
    }

    /// Passes when `value <= limit`.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value <= limit }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<32} {:.3e} (limit {:.0e})", self.name, self.value, self.limit)
    }
}

pub const CHORD_TOL: f64 = 0.01;
pub const FBP_TOL: f64 = 0.05;
pub const GRAD_TOL: f64 = 1e-4;
pub const NMAR_TOL: f64 = 1e-6;
pub const ADAIN_TOL: f64 = 1e-6;
pub const HAAR_TOL: f64 = 1e-6;

/// Every suite in order.
pub fn selftest() -> Vec<Check> {
    let mut out = projector_checks();
    out.extend(gradient_checks());
    out.extend(nmar_checks());
    out.extend(adain_checks());
    out.extend(haar_checks(&[8, 64, 256]));
    out
}

fn supersampled_disk(geom: ImageGeometry, radius: f64, value: f64) -> Image {
    const SS: usize = 8;
    let d = geom.pixel_spacing();
    let mut img = Image::zeros(geom);
    for r in 0..geom.n_rows {
        for c in 0..geom.n_cols {
            let (x, y) = geom.pixel_center(r, c);
            let mut inside = 0;
            for i in 0..SS {
                for j in 0..SS {
                    let sx = x + ((i as f64 + 0.5) / SS as f64 - 0.5) * d;
                    let sy = y + ((j as f64 + 0.5) / SS as f64 - 0.5) * d;
                    inside += usize::from(sx * sx + sy * sy <= radius * radius);
                }
            }
            img.values[r * geom.n_cols + c] = (value * inside as f64 / (SS * SS) as f64) as f32;
        }
    }
    img
}

/// Chord lengths through a disk, and FBP of a smooth phantom.
pub fn projector_checks() -> Vec<Check> {
    let geom = ImageGeometry::new(128, 200.0).expect("valid");
    let (radius, mu) = (60.0, 0.02);
    let disk = supersampled_disk(geom, radius, mu);
    let mut out = Vec::new();

    // parallel beam: bin offset is the distance from the isocenter
    let par = SinogramGeometry::parallel(12, 129, &geom).expect("valid");
    let p = Projector::new(geom, par).expect("valid").forward_project(&disk).expect("shape");
    let mut worst = 0.0f64;
    for v in 0..par.n_views {
        for b in 0..par.n_bins {
            let s = par.bin_center(b);
            if s.abs() < 0.9 * radius {
                let chord = 2.0 * mu * (radius * radius - s * s).sqrt();
                worst = worst.max((p.values[v * par.n_bins + b] as f64 - chord).abs() / chord);
            }
        }
    }
    out.push(Check::below("chord/parallel", worst, CHORD_TOL));

    // fan beam: distance from the isocenter follows from two samples on the ray
    let fan = SinogramGeometry::fan(12, 129, &geom).expect("valid");
    let p = Projector::new(geom, fan).expect("valid").forward_project(&disk).expect("shape");
    let mut worst = 0.0f64;
    for v in 0..fan.n_views {
        for b in 0..fan.n_bins {
            let ray = build_ray(&geom, &fan, v, b, 0.5).expect("valid");
            if ray.samples.len() < 2 {
                continue;
            }
            let (x0, y0, _) = ray.samples[0];
            let (x1, y1, _) = ray.samples[ray.samples.len() - 1];
            let s = (x0 * y1 - x1 * y0).abs() / ((x1 - x0).hypot(y1 - y0));
            if s < 0.9 * radius {
                let chord = 2.0 * mu * (radius * radius - s * s).sqrt();
                worst = worst.max((p.values[v * fan.n_bins + b] as f64 - chord).abs() / chord);
            }
        }
    }
    out.push(Check::below("chord/fan", worst, CHORD_TOL));

    // smooth phantom through the desk geometry
    let geom = ImageGeometry::new(64, 200.0).expect("valid");
    let sino = SinogramGeometry::fan(180, 96, &geom).expect("valid");
    let blobs = [(0.0, 0.0, 45.0, 0.02), (20.0, -15.0, 12.0, 0.01), (-25.0, 20.0, 8.0, 0.015)];
    let mut smooth = Image::zeros(geom);
    for r in 0..geom.n_rows {
        for c in 0..geom.n_cols {
            let (x, y) = geom.pixel_center(r, c);
            smooth.values[r * geom.n_cols + c] = blobs
                .iter()
                .map(|&(bx, by, s, a)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp())
                .sum::<f64>() as f32;
        }
    }
    let proj = Projector::new(geom, sino).expect("valid");
    let rec = proj.fbp(&proj.forward_project(&smooth).expect("shape")).expect("shape");
    let range = smooth.values.iter().fold(f32::MIN, |a, &b| a.max(b)) - smooth.values.iter().fold(f32::MAX, |a, &b| a.min(b));
    let mse = rec.values.iter().zip(&smooth.values).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / geom.len() as f64;
    out.push(Check::below("fbp/smooth-rmse-over-range", mse.sqrt() / range as f64, FBP_TOL));
    out
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Concatenates parameter stores so one finite-difference pass covers all.
fn joined(stores: &[&ParamStore<f64>]) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (k, s) in stores.iter().enumerate() {
        for id in s.ids() {
            out.add(&format!("{k}.{}", s.name(id)), s.shape(id), s.get(id).to_vec());
        }
    }
    out
}

fn split(joined: &ParamStore<f64>, templates: &[&ParamStore<f64>]) -> Vec<ParamStore<f64>> {
    let mut at = 0;
    templates
        .iter()
        .map(|t| {
            let mut s = (*t).clone();
            for i in 0..s.len() {
                s.tensors_mut()[i].copy_from_slice(joined.get(ParamId(at + i)));
            }
            at += s.len();
            s
        })
        .collect()
}

fn jitter_biases(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
    let ids: Vec<_> = p.ids().filter(|&id| p.name(id).ends_with(".b")).collect();
    for id in ids {
        p.get_mut(id).iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
}

fn grad(name: &str, r: GradReport) -> Check {
    Check::below(format!("grad/{name}"), r.max_rel_error, GRAD_TOL)
}

/// Central differences in f64 for each layer and every training loss.
pub fn gradient_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let mut out = Vec::new();

    let mut s = ParamStore::<f32>::new();
    let d = Dense::new(&mut s, "d", 6, 5, &mut rng);
    let mut p: ParamStore<f64> = s.cast();
    let xi = p.add("x", &[4, 6], uniform(&mut rng, 24, -1.0, 1.0));
    let c = uniform(&mut rng, 20, -1.0, 1.0);
    out.push(grad(
        "dense",
        grad_check(&p, |p| {
            let y = d.forward(p, p.get(xi), 4);
            let mut g = p.zero_grads();
            let dx = d.backward(p, p.get(xi), &c, 4, &mut g, true).expect("requested");
            g.get_mut(xi).copy_from_slice(&dx);
            (y.iter().zip(&c).map(|(a, b)| a * b).sum(), g)
        }),
    ));

    for k in [1, 3, 4] {
        let mut s = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut s, "c", 2, 3, k, &mut rng);
        let mut p: ParamStore<f64> = s.cast();
        let (n, h, w) = (2, 6, 5);
        let xi = p.add("x", &[n, 2, h, w], uniform(&mut rng, n * 2 * h * w, -1.0, 1.0));
        let c = uniform(&mut rng, n * 3 * h * w, -1.0, 1.0);
        out.push(grad(
            &format!("conv{k}x{k}"),
            grad_check(&p, |p| {
                let x = Feat::from_vec(n, 2, h, w, p.get(xi).to_vec());
                let y = conv.forward(p, &x).expect("shape");
                let mut g = p.zero_grads();
                let dx = conv.backward(p, &x, &Feat::from_vec(n, 3, h, w, c.clone()), &mut g, true).expect("shape").expect("requested");
                g.get_mut(xi).copy_from_slice(&dx.data);
                (y.data.iter().zip(&c).map(|(a, b)| a * b).sum(), g)
            }),
        ));
    }

    let mut p = ParamStore::<f64>::new();
    let xi = p.add("x", &[2, 3, 4, 4], uniform(&mut rng, 96, -1.0, 1.0));
    let ai = p.add("alpha", &[6], uniform(&mut rng, 6, -1.0, 1.0));
    let bi = p.add("beta", &[6], uniform(&mut rng, 6, -1.5, 1.5));
    let c = uniform(&mut rng, 96, -1.0, 1.0);
    out.push(grad(
        "adain",
        grad_check(&p, |p| {
            let x = Feat::from_vec(2, 3, 4, 4, p.get(xi).to_vec());
            let (y, cache) = adain(&x, p.get(ai), p.get(bi));
            let (dx, da, db) = adain_backward(&cache, p.get(bi), &Feat { data: c.clone(), ..y.clone() });
            let mut g = p.zero_grads();
            g.get_mut(xi).copy_from_slice(&dx.data);
            g.get_mut(ai).copy_from_slice(&da);
            g.get_mut(bi).copy_from_slice(&db);
            (y.data.iter().zip(&c).map(|(a, b)| a * b).sum(), g)
        }),
    ));

    // pretraining loss through encoder and MLP
    let cfg = InrConfig { mlp_width: 6, mlp_layers: 2, enc_channels: 3, enc_blocks: 1, latent: 2, in_channels: 2, mu_scale: 0.02, fourier: 0 };
    let geom = ImageGeometry::new(6, 10.0).expect("valid");
    let (net, w) = InrNet::build(&cfg, 6).expect("valid");
    let mut theta: ParamStore<f64> = w.theta.cast();
    let mut psi: ParamStore<f64> = w.psi.cast();
    jitter_biases(&mut theta, &mut rng, -0.3, 0.3);
    jitter_biases(&mut psi, &mut rng, -0.3, 0.3);
    let inputs = Feat::from_vec(2, 2, 6, 6, uniform(&mut rng, 144, 0.0, 2.0));
    let targets = uniform(&mut rng, 72, 0.0, 0.04);
    let templates = [&theta, &psi];
    out.push(grad(
        "loss_init",
        grad_check(&joined(&templates), |s| {
            let parts = split(s, &templates);
            let (loss, gt, gp) = loss_init(&net, &parts[0], &parts[1], &inputs, &targets, &geom).expect("shape");
            let mut g = s.zero_grads();
            g.0 = gt.0.into_iter().chain(gp.0).collect();
            (loss, g)
        }),
    ));

    // ray-domain losses through the projector transpose
    let geom = ImageGeometry::new(16, 40.0).expect("valid");
    let proj = Projector::new(geom, SinogramGeometry::fan(8, 24, &geom).expect("valid")).expect("valid");
    let (net, w) = InrNet::build(&cfg, 8).expect("valid");
    let mut theta: ParamStore<f64> = w.theta.cast();
    jitter_biases(&mut theta, &mut rng, -0.3, 0.3);
    let rand_img = |rng: &mut ChaCha8Rng, scale: f32| Image { geometry: geom, values: (0..geom.len()).map(|_| scale * rng.random::<f32>()).collect() };
    let (mu, ma, truth) = (rand_img(&mut rng, 0.02), rand_img(&mut rng, 0.02), rand_img(&mut rng, 0.03));
    let rows: Vec<f64> = net.case_rows(&w, &mu, Some(&ma)).expect("shape").into_iter().map(f64::from).collect();
    let measured = proj.forward_project(&truth).expect("shape");
    let free: Vec<usize> = (0..proj.n_rays()).filter(|&i| i % 3 != 0 && proj.crosses(i)).collect();
    out.push(grad(
        "loss_naive",
        grad_check(&theta, |t| {
            let term = Fidelity { projector: &proj, measured: &measured.values, rays: &free, anchor: None };
            loss_refine(&net, t, &rows, &term).expect("rays")
        }),
    ));
    let mut shifted = theta.clone();
    let out_b = net.mlp.layers.last().expect("layers").b;
    shifted.get_mut(out_b)[0] += 0.3;
    let f0 = net.eval_rows(&shifted, &rows);
    out.push(grad(
        "loss_fid",
        grad_check(&theta, |t| {
            let term = Fidelity { projector: &proj, measured: &measured.values, rays: &free, anchor: Some((10.0, &f0)) };
            loss_refine(&net, t, &rows, &term).expect("rays")
        }),
    ));

    // residual patch loss through the AdaIN branch
    let rcfg = ResidualConfig {
        channels: vec![2, 3],
        bottleneck: 3,
        patch: 8,
        slope: 0.2,
        trunk_input: 8,
        trunk_channels: [2, 2, 2, 2],
        branch_width: 5,
        mu_scale: 0.02,
    };
    let (net, w) = ResidualNet::build(&rcfg, 4).expect("valid");
    let phi: ParamStore<f64> = w.phi.cast();
    let mut zeta: ParamStore<f64> = w.zeta.cast();
    for i in 0..4 {
        let id = zeta.id(&format!("branch.conv{i}.b")).expect("trunk bias");
        zeta.get_mut(id).iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
    }
    let x = Feat::from_vec(2, 1, 8, 8, uniform(&mut rng, 128, 0.0, 2.0));
    let mask = Feat::from_vec(2, 1, 8, 8, (0..128).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect());
    let target = uniform(&mut rng, 128, -0.05, 0.05);
    let templates = [&phi, &zeta];
    out.push(grad(
        "residual_patch_loss",
        grad_check(&joined(&templates), |s| {
            let parts = split(s, &templates);
            let (loss, gp, gz) = patch_loss(&net, &parts[0], &parts[1], &x, &mask, &target).expect("shape");
            let mut g = s.zero_grads();
            g.0 = gp.0.into_iter().chain(gz.0).collect();
            (loss, g)
        }),
    ));
    out
}

/// With a prior equal to the measurement off the trace, completion returns
/// the prior on the trace and the measurement elsewhere.
pub fn nmar_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4e4d);
    let img = ImageGeometry::new(32, 100.0).expect("valid");
    let geom = SinogramGeometry::fan(40, 48, &img).expect("valid");
    let prior = Sinogram { geometry: geom, values: (0..geom.len()).map(|_| rng.random_range(0.1f32..3.0)).collect() };
    let mut trace = MetalTrace::empty(geom);
    for v in 0..geom.n_views {
        let start = 10 + (v * 7) % 20;
        for b in start..start + 6 {
            trace.bits[v * geom.n_bins + b] = true;
        }
    }
    let mut p = prior.clone();
    for (i, v) in p.values.iter_mut().enumerate() {
        if trace.bits[i] {
            *v = rng.random_range(5.0..9.0);
        }
    }
    let done = nmar_complete(&p, &prior, &trace, 1e-4).expect("shape");
    let mut on = 0.0f64;
    let mut off = 0.0f64;
    for i in 0..geom.len() {
        let (got, want) = (done.values[i] as f64, if trace.bits[i] { prior.values[i] } else { p.values[i] } as f64);
        let rel = (got - want).abs() / want.abs();
        if trace.bits[i] {
            on = on.max(rel);
        } else {
            off = off.max(rel);
        }
    }
    let err = interpolation_error(&p, &prior, &trace, 1e-4, ErrorNorm::L2).expect("trace");
    vec![
        Check::below("nmar/exact-prior-on-trace", on, NMAR_TOL),
        Check::below("nmar/measured-off-trace", off, NMAR_TOL),
        Check::at_most("nmar/exact-prior-error", err, 0.0),
    ]
}

/// Per-channel spatial mean α and standard deviation |β| after modulation.
pub fn adain_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xada);
    let (n, c, h, w) = (3, 4, 16, 12);
    let x = Feat::from_vec(n, c, h, w, uniform(&mut rng, n * c * h * w, -3.0, 5.0));
    let alpha = uniform(&mut rng, n * c, -2.0, 2.0);
    let beta = uniform(&mut rng, n * c, -2.0, 2.0);
    let (y, _) = adain(&x, &alpha, &beta);
    let plane = h * w;
    let (mut dm, mut ds) = (0.0f64, 0.0f64);
    for j in 0..n * c {
        let ch = &y.data[j * plane..(j + 1) * plane];
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64).sqrt();
        dm = dm.max((mean - alpha[j]).abs());
        ds = ds.max((std - beta[j].abs()).abs());
    }
    vec![Check::below("adain/mean-equals-alpha", dm, ADAIN_TOL), Check::below("adain/std-equals-abs-beta", ds, ADAIN_TOL)]
}

/// Perfect reconstruction and energy preservation of the Haar transform.
pub fn haar_checks(sides: &[usize]) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4aa2);
    let (mut recon, mut parseval) = (0.0f64, 0.0f64);
    for &side in sides {
        let x = Feat::from_vec(1, 2, side, side, uniform(&mut rng, 2 * side * side, -1.0, 1.0));
        let y = haar_dwt(&x).expect("even");
        let back = haar_idwt(&y).expect("even");
        let err = back.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ex: f64 = x.data.iter().map(|v| v * v).sum();
        let ey: f64 = y.data.iter().map(|v| v * v).sum();
        recon = recon.max(err);
        parseval = parseval.max((ex - ey).abs() / ex);
    }
    let largest = sides.iter().max().copied().unwrap_or(0);
    vec![
        Check::below(format!("haar/reconstruction-up-to-{largest}"), recon, HAAR_TOL),
        Check::below(format!("haar/parseval-up-to-{largest}"), parseval, HAAR_TOL),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for c in nmar_checks().into_iter().chain(adain_checks()).chain(haar_checks(&[4, 32])) {
            assert!(c.pass, "{c}");
        }
    }

    #[test]
    fn joined_store_splits_back() {
        let mut a = ParamStore::<f64>::new();
        a.add("w", &[2], vec![1.0, 2.0]);
        let mut b = ParamStore::<f64>::new();
        b.add("w", &[1], vec![3.0]);
        b.add("b", &[1], vec![4.0]);
        let j = joined(&[&a, &b]);
        assert_eq!(j.len(), 3);
        let parts = split(&j, &[&a, &b]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn check_rendering() {
        let c = Check::below("x", 0.5, 1.0);
        assert!(c.pass);
        assert!(c.to_string().starts_with("PASS x"));
        assert!(!Check::below("y", 1.0, 1.0).pass);
        assert!(Check::at_most("z", 0.0, 0.0).pass);
    }
}
