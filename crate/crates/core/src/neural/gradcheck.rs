use super::{Grads, ParamStore};

/// Finite-difference step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;

/// At most this many entries are probed per tensor (evenly strided).
pub const FD_MAX_PER_TENSOR: usize = 96;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// (parameter name, max relative error) per tensor.
    pub per_param: Vec<(String, f64)>,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences of its loss, all in `f64`.
pub fn grad_check<F>(params: &ParamStore<f64>, f: F) -> GradReport
where
    F: Fn(&ParamStore<f64>) -> (f64, Grads<f64>),
{
    let (_, analytic) = f(params);
    let mut probe = params.clone();
    let mut report = GradReport { max_rel_error: 0.0, per_param: Vec::new(), worst: None, checked: 0 };
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = n.div_ceil(FD_MAX_PER_TENSOR).max(1);
        let mut worst = 0.0f64;
        for i in (0..n).step_by(stride) {
            let x0 = params.get(id)[i];
            probe.get_mut(id)[i] = x0 + FD_STEP;
            let (up, _) = f(&probe);
            probe.get_mut(id)[i] = x0 - FD_STEP;
            let (down, _) = f(&probe);
            probe.get_mut(id)[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(id)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            if rel > worst {
                worst = rel;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
            report.checked += 1;
        }
        report.per_param.push((params.name(id).to_string(), worst));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_closure_has_zero_error() {
        let mut p = ParamStore::<f64>::new();
        let x = p.add("x", &[3], vec![0.5, -1.0, 2.0]);
        let r = grad_check(&p, |p| {
            let loss = p.get(x).iter().sum();
            let mut g = p.zero_grads();
            g.get_mut(x).iter_mut().for_each(|v| *v = 1.0);
            (loss, g)
        });
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn broken_backward_is_reported() {
        let mut p = ParamStore::<f64>::new();
        let x = p.add("x", &[2], vec![0.5, -1.0]);
        let r = grad_check(&p, |p| {
            let v = p.get(x);
            let loss = v[0] * v[0] + v[1];
            let mut g = p.zero_grads();
            // wrong: forgot the factor 2
            g.get_mut(x).copy_from_slice(&[v[0], 1.0]);
            (loss, g)
        });
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst, Some(("x".to_string(), 0)));
    }
}
