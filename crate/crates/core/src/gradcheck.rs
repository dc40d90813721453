//! Central finite-difference verification of tape gradients.

use crate::graph::{Graph, Var};
use crate::tensor::{invalid, Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compare the analytic gradient of a scalar-valued function against central
/// differences at every coordinate of `x`.
///
/// `f` must build the computation from scratch on the graph it is handed;
/// it runs once for the analytic gradient and twice per coordinate for the
/// numeric one, so keep the input small. Any tensors `f` captures beyond `x`
/// stay fixed across evaluations.
///
/// The relative error at coordinate `i` is
/// `|a_i - n_i| / max(|a_i|, |n_i|, floor)` with
/// `floor = 1e-6 * max_j |n_j| + 1e-12`, which keeps near-zero entries from
/// dominating while still catching sign and scale bugs.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(invalid("grad_check", format!("step h = {h} must be positive")));
    }
    let n = x.numel();

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let loss = f(&mut g, v)?;
    if g.val(loss).numel() != 1 {
        return Err(invalid(
            "grad_check",
            format!("f must return a scalar, got shape {:?}", g.val(loss).shape()),
        ));
    }
    g.backward(loss)?;
    let analytic = g
        .grad(v)
        .map(|s| s.to_vec())
        .ok_or_else(|| invalid("grad_check", "no gradient reached the input".into()))?;

    let eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::from_vec(x.shape(), data.to_vec())?;
        let mut g = Graph::new();
        let v = g.leaf(t, false);
        let loss = f(&mut g, v)?;
        Ok(g.val(loss).item())
    };

    let mut numeric = vec![0.0; n];
    let mut probe = x.data().to_vec();
    for i in 0..n {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }

    let nmax = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * nmax + 1e-12;
    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0 };
    for i in 0..n {
        let (a, nu) = (analytic[i], numeric[i]);
        let abs = (a - nu).abs();
        let rel = abs / a.abs().max(nu.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    Ok(report)
}
