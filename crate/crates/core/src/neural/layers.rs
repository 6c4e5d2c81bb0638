use rand::Rng;

use super::{kaiming_uniform, Feat, Grads, NeuralError, ParamId, ParamStore, Result};
use crate::real::Real;

/// Fully connected layer, `y = x·Wᵀ + b` with `W` stored out×in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let w = store.add(&format!("{name}.w"), &[n_out, n_in], kaiming_uniform(rng, n_in * n_out, n_in));
        let b = store.add(&format!("{name}.b"), &[n_out], vec![0.0; n_out]);
        Self { w, b, n_in, n_out }
    }

    /// `x` is rows×n_in, row-major.
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.n_in, "dense input size");
        let mut y = vec![T::zero(); rows * self.n_out];
        T::gemm(rows, self.n_in, self.n_out, T::one(), x, false, p.get(self.w), true, T::zero(), &mut y);
        let b = p.get(self.b);
        for row in y.chunks_exact_mut(self.n_out) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v = *v + bb);
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when asked.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        g: &mut Grads<T>,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(dy.len(), rows * self.n_out, "dense grad size");
        T::gemm(self.n_out, rows, self.n_in, T::one(), dy, true, x, false, T::one(), g.get_mut(self.w));
        let db = g.get_mut(self.b);
        for row in dy.chunks_exact(self.n_out) {
            db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
        }
        want_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.n_in];
            T::gemm(rows, self.n_out, self.n_in, T::one(), dy, false, p.get(self.w), false, T::zero(), &mut dx);
            dx
        })
    }
}

/// Stride-1 convolution (cross-correlation) preserving spatial size.
/// `pad` zeros go top/left and `k − 1 − pad` bottom/right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Odd kernels get symmetric padding; even kernels put the extra row/column bottom/right.
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let pad = if k % 2 == 1 { k / 2 } else { k / 2 - 1 };
        let fan_in = cin * k * k;
        let w = store.add(&format!("{name}.w"), &[cout, cin, k, k], kaiming_uniform(rng, cout * fan_in, fan_in));
        let b = store.add(&format!("{name}.b"), &[cout], vec![0.0; cout]);
        Self { w, b, cin, cout, k, pad }
    }

    fn check(&self, x: &Feat<impl Real>) -> Result<()> {
        if x.c != self.cin {
            return Err(NeuralError::Shape(format!("conv expects {} channels, got {}", self.cin, x.c)));
        }
        Ok(())
    }

    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (k, pad) = (self.k as isize, self.pad as isize);
        let plane = h * w;
        for c in 0..self.cin {
            let src = &x[c * plane..(c + 1) * plane];
            for i in 0..k {
                for j in 0..k {
                    let row = ((c as isize * k + i) * k + j) as usize;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for y in 0..h as isize {
                        let sy = y + i - pad;
                        let out = &mut dst[(y as usize) * w..(y as usize + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let shift = j - pad;
                        for (x, o) in out.iter_mut().enumerate() {
                            let sx = x as isize + shift;
                            *o = if sx >= 0 && sx < w as isize { srow[sx as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (k, pad) = (self.k as isize, self.pad as isize);
        let plane = h * w;
        for c in 0..self.cin {
            let dst = &mut dx[c * plane..(c + 1) * plane];
            for i in 0..k {
                for j in 0..k {
                    let row = ((c as isize * k + i) * k + j) as usize;
                    let src = &col[row * plane..(row + 1) * plane];
                    for y in 0..h as isize {
                        let sy = y + i - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let shift = j - pad;
                        let srow = &src[(y as usize) * w..(y as usize + 1) * w];
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        for (x, &v) in srow.iter().enumerate() {
                            let sx = x as isize + shift;
                            if sx >= 0 && sx < w as isize {
                                drow[sx as usize] = drow[sx as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Feat<T>) -> Result<Feat<T>> {
        self.check(x)?;
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let ckk = self.cin * self.k * self.k;
        let mut y = Feat::zeros(x.n, self.cout, h, w);
        let mut col = if self.k == 1 { Vec::new() } else { vec![T::zero(); ckk * plane] };
        let (wt, b) = (p.get(self.w), p.get(self.b));
        for i in 0..x.n {
            let xs = x.sample(i);
            let src: &[T] = if self.k == 1 {
                xs
            } else {
                self.im2col(xs, h, w, &mut col);
                &col
            };
            let ys = y.sample_mut(i);
            for (c, chunk) in ys.chunks_exact_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[c]);
            }
            T::gemm(self.cout, ckk, plane, T::one(), wt, false, src, false, T::one(), ys);
        }
        Ok(y)
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Feat<T>,
        dy: &Feat<T>,
        g: &mut Grads<T>,
        want_dx: bool,
    ) -> Result<Option<Feat<T>>> {
        self.check(x)?;
        if dy.c != self.cout || dy.n != x.n || dy.h != x.h || dy.w != x.w {
            return Err(NeuralError::Shape("conv output gradient shape".into()));
        }
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let ckk = self.cin * self.k * self.k;
        let mut col = if self.k == 1 { Vec::new() } else { vec![T::zero(); ckk * plane] };
        let mut dcol = vec![T::zero(); ckk * plane];
        let mut dx = want_dx.then(|| Feat::zeros(x.n, self.cin, h, w));
        let wt = p.get(self.w);
        for i in 0..x.n {
            let xs = x.sample(i);
            let src: &[T] = if self.k == 1 {
                xs
            } else {
                self.im2col(xs, h, w, &mut col);
                &col
            };
            let dys = dy.sample(i);
            T::gemm(self.cout, plane, ckk, T::one(), dys, false, src, true, T::one(), g.get_mut(self.w));
            let db = g.get_mut(self.b);
            for (c, chunk) in dys.chunks_exact(plane).enumerate() {
                db[c] = db[c] + chunk.iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(ckk, self.cout, plane, T::one(), wt, true, dys, false, T::zero(), &mut dcol);
                let out = dx.sample_mut(i);
                if self.k == 1 {
                    out.copy_from_slice(&dcol);
                } else {
                    self.col2im(&dcol, h, w, out);
                }
            }
        }
        Ok(dx)
    }
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect()
}

pub fn leaky_relu<T: Real>(x: &[T], slope: f64) -> Vec<T> {
    let s = T::of(slope);
    x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect()
}

pub fn leaky_relu_backward<T: Real>(x: &[T], dy: &[T], slope: f64) -> Vec<T> {
    let s = T::of(slope);
    x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { d * s }).collect()
}

/// Stabilizer inside the AdaIN standard deviation: σ = sqrt(var + ε²).
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct AdainCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Adaptive instance normalization with one (α, β) pair per sample and
/// channel: y = β·(x − mean)/σ + α, statistics over the spatial extent.
pub fn adain<T: Real>(x: &Feat<T>, alpha: &[T], beta: &[T]) -> (Feat<T>, AdainCache<T>) {
    let nc = x.n * x.c;
    assert!(alpha.len() == nc && beta.len() == nc, "adain parameter count");
    let plane = x.plane();
    let m = T::of(plane as f64);
    let eps2 = T::of(ADAIN_EPS * ADAIN_EPS);
    let mut y = Feat::zeros(x.n, x.c, x.h, x.w);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = vec![T::zero(); nc];
    for j in 0..nc {
        let src = &x.data[j * plane..(j + 1) * plane];
        let mean = src.iter().copied().sum::<T>() / m;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let inv = T::one() / (var + eps2).sqrt();
        inv_std[j] = inv;
        let xh = &mut xhat[j * plane..(j + 1) * plane];
        let out = &mut y.data[j * plane..(j + 1) * plane];
        for ((o, h), &v) in out.iter_mut().zip(xh.iter_mut()).zip(src) {
            *h = (v - mean) * inv;
            *o = beta[j] * *h + alpha[j];
        }
    }
    (y, AdainCache { xhat, inv_std })
}

/// Returns (dx, dα, dβ).
pub fn adain_backward<T: Real>(cache: &AdainCache<T>, beta: &[T], dy: &Feat<T>) -> (Feat<T>, Vec<T>, Vec<T>) {
    let nc = dy.n * dy.c;
    let plane = dy.plane();
    let m = T::of(plane as f64);
    let mut dx = Feat::zeros(dy.n, dy.c, dy.h, dy.w);
    let mut dalpha = vec![T::zero(); nc];
    let mut dbeta = vec![T::zero(); nc];
    for j in 0..nc {
        let g = &dy.data[j * plane..(j + 1) * plane];
        let xh = &cache.xhat[j * plane..(j + 1) * plane];
        let sum_g = g.iter().copied().sum::<T>();
        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        dalpha[j] = sum_g;
        dbeta[j] = sum_gx;
        // gradient through the normalization with dx̂ = β·g
        let (mean_d, mean_dx) = (beta[j] * sum_g / m, beta[j] * sum_gx / m);
        let inv = cache.inv_std[j];
        let out = &mut dx.data[j * plane..(j + 1) * plane];
        for ((o, &gg), &h) in out.iter_mut().zip(g).zip(xh) {
            *o = inv * (beta[j] * gg - mean_d - h * mean_dx);
        }
    }
    (dx, dalpha, dbeta)
}

fn check_even<T>(x: &Feat<T>) -> Result<()> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(NeuralError::Shape(format!("Haar transform needs even dims, got {}x{}", x.h, x.w)));
    }
    Ok(())
}

/// Orthonormal 2D Haar analysis. Channels of the output are band-major:
/// LL for every input channel, then LH, HL, HH.
pub fn haar_dwt<T: Real>(x: &Feat<T>) -> Result<Feat<T>> {
    check_even(x)?;
    let (h2, w2) = (x.h / 2, x.w / 2);
    let half = T::of(0.5);
    let mut y = Feat::zeros(x.n, 4 * x.c, h2, w2);
    let q = h2 * w2;
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(i, c);
            let base = i * 4 * x.c * q;
            for r in 0..h2 {
                for s in 0..w2 {
                    let a = src[2 * r * x.w + 2 * s];
                    let b = src[2 * r * x.w + 2 * s + 1];
                    let cc = src[(2 * r + 1) * x.w + 2 * s];
                    let d = src[(2 * r + 1) * x.w + 2 * s + 1];
                    let o = r * w2 + s;
                    y.data[base + c * q + o] = half * (a + b + cc + d);
                    y.data[base + (x.c + c) * q + o] = half * (a - b + cc - d);
                    y.data[base + (2 * x.c + c) * q + o] = half * (a + b - cc - d);
                    y.data[base + (3 * x.c + c) * q + o] = half * (a - b - cc + d);
                }
            }
        }
    }
    Ok(y)
}

/// Inverse of [`haar_dwt`]; the transform is orthonormal and self-inverse
/// per 2×2 block, so this is also its adjoint.
pub fn haar_idwt<T: Real>(y: &Feat<T>) -> Result<Feat<T>> {
    if y.c % 4 != 0 {
        return Err(NeuralError::Shape(format!("inverse Haar needs a multiple of 4 channels, got {}", y.c)));
    }
    let c = y.c / 4;
    let (h2, w2) = (y.h, y.w);
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::of(0.5);
    let mut x = Feat::zeros(y.n, c, h, w);
    let q = h2 * w2;
    for i in 0..y.n {
        let base = i * 4 * c * q;
        for ch in 0..c {
            let off = (i * c + ch) * h * w;
            for r in 0..h2 {
                for s in 0..w2 {
                    let o = r * w2 + s;
                    let ll = y.data[base + ch * q + o];
                    let lh = y.data[base + (c + ch) * q + o];
                    let hl = y.data[base + (2 * c + ch) * q + o];
                    let hh = y.data[base + (3 * c + ch) * q + o];
                    x.data[off + 2 * r * w + 2 * s] = half * (ll + lh + hl + hh);
                    x.data[off + 2 * r * w + 2 * s + 1] = half * (ll - lh + hl - hh);
                    x.data[off + (2 * r + 1) * w + 2 * s] = half * (ll + lh - hl - hh);
                    x.data[off + (2 * r + 1) * w + 2 * s + 1] = half * (ll - lh - hl + hh);
                }
            }
        }
    }
    Ok(x)
}

pub fn avg_pool2<T: Real>(x: &Feat<T>) -> Result<Feat<T>> {
    check_even(x)?;
    let (h2, w2) = (x.h / 2, x.w / 2);
    let quarter = T::of(0.25);
    let mut y = Feat::zeros(x.n, x.c, h2, w2);
    for j in 0..x.n * x.c {
        let src = &x.data[j * x.h * x.w..(j + 1) * x.h * x.w];
        let dst = &mut y.data[j * h2 * w2..(j + 1) * h2 * w2];
        for r in 0..h2 {
            for s in 0..w2 {
                let (a, b) = (src[2 * r * x.w + 2 * s], src[2 * r * x.w + 2 * s + 1]);
                let (c, d) = (src[(2 * r + 1) * x.w + 2 * s], src[(2 * r + 1) * x.w + 2 * s + 1]);
                dst[r * w2 + s] = quarter * (a + b + c + d);
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward<T: Real>(dy: &Feat<T>) -> Feat<T> {
    let (h, w) = (2 * dy.h, 2 * dy.w);
    let quarter = T::of(0.25);
    let mut dx = Feat::zeros(dy.n, dy.c, h, w);
    for j in 0..dy.n * dy.c {
        let src = &dy.data[j * dy.h * dy.w..(j + 1) * dy.h * dy.w];
        let dst = &mut dx.data[j * h * w..(j + 1) * h * w];
        for r in 0..dy.h {
            for s in 0..dy.w {
                let v = quarter * src[r * dy.w + s];
                dst[2 * r * w + 2 * s] = v;
                dst[2 * r * w + 2 * s + 1] = v;
                dst[(2 * r + 1) * w + 2 * s] = v;
                dst[(2 * r + 1) * w + 2 * s + 1] = v;
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Feat<T>, b: &Feat<T>) -> Feat<T> {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shapes");
    let mut out = Feat::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.sample_mut(i);
        let na = a.sample(i).len();
        dst[..na].copy_from_slice(a.sample(i));
        dst[na..].copy_from_slice(b.sample(i));
    }
    out
}

pub fn split_channels<T: Real>(x: &Feat<T>, ca: usize) -> (Feat<T>, Feat<T>) {
    let cb = x.c - ca;
    let mut a = Feat::zeros(x.n, ca, x.h, x.w);
    let mut b = Feat::zeros(x.n, cb, x.h, x.w);
    let na = ca * x.plane();
    for i in 0..x.n {
        let src = x.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..na]);
        b.sample_mut(i).copy_from_slice(&src[na..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Scalar loss Σ c·y with fixed random c, so dL/dy = c.
    fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        rand_vec(rng, n)
    }

    #[test]
    fn dense_identity_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        let d = Dense::new(&mut s, "d", 3, 3, &mut rng);
        let mut p: ParamStore<f64> = s.cast();
        p.get_mut(d.w).copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = [0.3, -0.2, 0.9, 1.0, 2.0, 3.0];
        assert_eq!(d.forward(&p, &x, 2), x.to_vec());
        // b-gradient of summed output is all ones per row
        let mut g = p.zero_grads();
        d.backward(&p, &x, &[1.0; 6], 2, &mut g, false);
        assert_eq!(g.get(d.b), &[2.0, 2.0, 2.0]);

        let mut s = ParamStore::<f32>::new();
        let d = Dense::new(&mut s, "d", 8, 8, &mut rng);
        let x = rand_vec(&mut rng, 5 * 8);
        let c = probe(&mut rng, 5 * 8);
        let mut p: ParamStore<f64> = s.cast();
        let xi = p.add("x", &[5, 8], x);
        let report = grad_check(&p, |p| {
            let y = d.forward(p, p.get(xi), 5);
            let loss = y.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut g = p.zero_grads();
            let dx = d.backward(p, p.get(xi), &c, 5, &mut g, true).unwrap();
            g.get_mut(xi).copy_from_slice(&dx);
            (loss, g)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut s, "c", 1, 1, 3, &mut rng);
        let mut p: ParamStore<f64> = s.cast();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        p.get_mut(conv.w).copy_from_slice(&k);
        let x = Feat::from_vec(1, 1, 5, 6, rand_vec(&mut rng, 30));
        assert_eq!(conv.forward(&p, &x).unwrap().data, x.data);
        // averaging kernel on a constant input stays constant in the interior
        p.get_mut(conv.w).copy_from_slice(&[1.0 / 9.0; 9]);
        let y = conv.forward(&p, &Feat::from_vec(1, 1, 5, 6, vec![2.0; 30])).unwrap();
        for r in 1..4 {
            for c in 1..5 {
                assert!((y.data[r * 6 + c] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_conv_alignment() {
        // a 4×4 kernel with a single one at (1, 1) is the identity under 1/2 padding
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut s, "c", 1, 1, 4, &mut rng);
        assert_eq!(conv.pad, 1);
        let mut p: ParamStore<f64> = s.cast();
        let mut k = vec![0.0; 16];
        k[5] = 1.0;
        p.get_mut(conv.w).copy_from_slice(&k);
        let x = Feat::from_vec(1, 1, 4, 4, rand_vec(&mut rng, 16));
        let y = conv.forward(&p, &x).unwrap();
        assert_eq!(y.h, 4);
        assert_eq!(y.data, x.data);
    }

    fn conv_grad_case(k: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut s, "c", 3, 4, k, &mut rng);
        let mut p: ParamStore<f64> = s.cast();
        for id in [conv.b] {
            let n = p.get(id).len();
            p.get_mut(id).copy_from_slice(&rand_vec(&mut rng, n));
        }
        let (n, h, w) = (2, 6, 5);
        let xi = p.add("x", &[n, 3, h, w], rand_vec(&mut rng, n * 3 * h * w));
        let c = probe(&mut rng, n * 4 * h * w);
        let report = grad_check(&p, |p| {
            let x = Feat::from_vec(n, 3, h, w, p.get(xi).to_vec());
            let y = conv.forward(p, &x).unwrap();
            let loss = y.data.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut g = p.zero_grads();
            let dy = Feat::from_vec(n, 4, h, w, c.clone());
            let dx = conv.backward(p, &x, &dy, &mut g, true).unwrap().unwrap();
            g.get_mut(xi).copy_from_slice(&dx.data);
            (loss, g)
        });
        assert!(report.max_rel_error < 1e-6, "k={k}: {report:?}");
    }

    #[test]
    fn conv_gradients() {
        conv_grad_case(3, 4);
        conv_grad_case(4, 5);
        conv_grad_case(1, 6);
    }

    #[test]
    fn adain_statistics_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Feat::from_vec(2, 3, 4, 5, rand_vec(&mut rng, 120));
        let alpha = rand_vec(&mut rng, 6);
        let beta = rand_vec(&mut rng, 6);
        let (y, _) = adain(&x, &alpha, &beta);
        for j in 0..6 {
            let ch = &y.data[j * 20..(j + 1) * 20];
            let mean = ch.iter().sum::<f64>() / 20.0;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
            assert!((mean - alpha[j]).abs() < 1e-6);
            assert!((std - beta[j].abs()).abs() < 1e-6);
        }
        let (z, _) = adain(&x, &[0.0; 6], &[1.0; 6]);
        let m = z.data[..20].iter().sum::<f64>() / 20.0;
        assert!(m.abs() < 1e-12);

        let mut p = ParamStore::<f64>::new();
        let xi = p.add("x", &[120], x.data.clone());
        let ai = p.add("a", &[6], alpha);
        let bi = p.add("b", &[6], beta);
        let c = probe(&mut rng, 120);
        let report = grad_check(&p, |p| {
            let x = Feat::from_vec(2, 3, 4, 5, p.get(xi).to_vec());
            let (y, cache) = adain(&x, p.get(ai), p.get(bi));
            let loss = y.data.iter().zip(&c).map(|(a, b)| a * b).sum();
            let (dx, da, db) = adain_backward(&cache, p.get(bi), &Feat::from_vec(2, 3, 4, 5, c.clone()));
            let mut g = p.zero_grads();
            g.get_mut(xi).copy_from_slice(&dx.data);
            g.get_mut(ai).copy_from_slice(&da);
            g.get_mut(bi).copy_from_slice(&db);
            (loss, g)
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn adain_constant_channel_is_finite() {
        let x = Feat::from_vec(1, 1, 2, 2, vec![3.0f32; 4]);
        let (y, _) = adain(&x, &[0.5], &[2.0]);
        assert!(y.data.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn haar_constant() {
        let x = Feat::from_vec(1, 1, 4, 4, vec![1.5f64; 16]);
        let y = haar_dwt(&x).unwrap();
        assert!(y.data[..4].iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(y.data[4..].iter().all(|&v| v.abs() < 1e-12));
        assert!(haar_dwt(&Feat::from_vec(1, 1, 3, 4, vec![0.0f64; 12])).is_err());
    }

    #[test]
    fn pool_and_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamStore::<f64>::new();
        let xi = p.add("x", &[2, 2, 4, 4], rand_vec(&mut rng, 64));
        let c = probe(&mut rng, 16);
        let report = grad_check(&p, |p| {
            let x = Feat::from_vec(2, 2, 4, 4, p.get(xi).to_vec());
            let y = avg_pool2(&x).unwrap();
            let loss = y.data.iter().zip(&c).map(|(a, b)| a * b).sum();
            let dx = avg_pool2_backward(&Feat::from_vec(2, 2, 2, 2, c.clone()));
            let mut g = p.zero_grads();
            g.get_mut(xi).copy_from_slice(&dx.data);
            (loss, g)
        });
        assert!(report.max_rel_error < 1e-6);
        let a = Feat::from_vec(2, 1, 2, 2, rand_vec(&mut rng, 8));
        let b = Feat::from_vec(2, 3, 2, 2, rand_vec(&mut rng, 24));
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 1);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn composed_stack_grad() {
        // conv → leaky → adain → haar → conv → relu → pool
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::<f32>::new();
        let c1 = Conv2d::new(&mut s, "c1", 2, 3, 4, &mut rng);
        let c2 = Conv2d::new(&mut s, "c2", 12, 2, 3, &mut rng);
        let mut p: ParamStore<f64> = s.cast();
        let xi = p.add("x", &[1, 2, 8, 8], rand_vec(&mut rng, 128));
        let ai = p.add("a", &[3], rand_vec(&mut rng, 3));
        let bi = p.add("b", &[3], rand_vec(&mut rng, 3));
        let c = probe(&mut rng, 2 * 2 * 2);
        let report = grad_check(&p, |p| {
            let x = Feat::from_vec(1, 2, 8, 8, p.get(xi).to_vec());
            let h1 = c1.forward(p, &x).unwrap();
            let a1 = Feat::from_vec(1, 3, 8, 8, leaky_relu(&h1.data, 0.2));
            let (n1, cache) = adain(&a1, p.get(ai), p.get(bi));
            let w1 = haar_dwt(&n1).unwrap();
            let h2 = c2.forward(p, &w1).unwrap();
            let a2 = Feat::from_vec(1, 2, 4, 4, relu(&h2.data));
            let y = avg_pool2(&a2).unwrap();
            let loss = y.data.iter().zip(&c).map(|(a, b)| a * b).sum();

            let mut g = p.zero_grads();
            let dy = Feat::from_vec(1, 2, 2, 2, c.clone());
            let da2 = avg_pool2_backward(&dy);
            let dh2 = Feat::from_vec(1, 2, 4, 4, relu_backward(&h2.data, &da2.data));
            let dw1 = c2.backward(p, &w1, &dh2, &mut g, true).unwrap().unwrap();
            let dn1 = haar_idwt(&dw1).unwrap();
            let (da1, dal, dbe) = adain_backward(&cache, p.get(bi), &dn1);
            let dh1 = Feat::from_vec(1, 3, 8, 8, leaky_relu_backward(&h1.data, &da1.data, 0.2));
            let dx = c1.backward(p, &x, &dh1, &mut g, true).unwrap().unwrap();
            g.get_mut(xi).copy_from_slice(&dx.data);
            g.get_mut(ai).copy_from_slice(&dal);
            g.get_mut(bi).copy_from_slice(&dbe);
            (loss, g)
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    proptest! {
        #[test]
        fn haar_round_trip_and_parseval(h in 1usize..9, w in 1usize..9, c in 1usize..3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (2 * h, 2 * w);
            let x = Feat::from_vec(1, c, h, w, rand_vec(&mut rng, c * h * w));
            let y = haar_dwt(&x).unwrap();
            let back = haar_idwt(&y).unwrap();
            for (a, b) in x.data.iter().zip(&back.data) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let ex: f64 = x.data.iter().map(|v| v * v).sum();
            let ey: f64 = y.data.iter().map(|v| v * v).sum();
            prop_assert!((ex - ey).abs() <= 1e-6 * ex.max(1.0));
        }

        #[test]
        fn adain_invariant(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Feat::from_vec(1, 4, 6, 6, rand_vec(&mut rng, 144).into_iter().map(|v| v * scale).collect());
            let alpha = rand_vec(&mut rng, 4);
            let beta: Vec<f64> = rand_vec(&mut rng, 4).into_iter().map(|v| 3.0 * v).collect();
            let (y, _) = adain(&x, &alpha, &beta);
            for j in 0..4 {
                let ch = &y.data[j * 36..(j + 1) * 36];
                let mean = ch.iter().sum::<f64>() / 36.0;
                let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0).sqrt();
                prop_assert!((mean - alpha[j]).abs() < 1e-6);
                prop_assert!((std - beta[j].abs()).abs() < 1e-6);
            }
        }
    }
}
