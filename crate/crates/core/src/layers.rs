//! Small building blocks shared by the attention, feedforward and model
//! modules: bound convolutions and layer norm with their matching parameter
//! initializers. Each helper owns a `{prefix}.w` / `{prefix}.b` (or
//! `{prefix}.gamma` / `{prefix}.beta`) pair in the store.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{trunc_normal, Binder, ParamStore};
use crate::tensor::{Result, Tensor};

pub const WEIGHT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cout: usize,
    cin_per_group: usize,
    k: usize,
) -> Result<()> {
    store.register(
        &format!("{prefix}.w"),
        trunc_normal(rng, &[cout, cin_per_group, k, k], WEIGHT_STD),
    )?;
    store.register(&format!("{prefix}.b"), Tensor::zeros(&[cout]))
}

/// 1x1 pointwise convolution.
pub fn conv1x1(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.w"))?;
    let bias = b.var(g, &format!("{prefix}.b"))?;
    g.conv2d(x, w, Some(bias), 1, 0, 1)
}

/// Dense k x k convolution with same-size output.
pub fn conv_same(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.w"))?;
    let bias = b.var(g, &format!("{prefix}.b"))?;
    let k = g.val(w).shape()[2];
    g.conv2d(x, w, Some(bias), 1, (k - 1) / 2, 1)
}

/// Depthwise k x k convolution with same-size output.
pub fn conv_dw(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.w"))?;
    let bias = b.var(g, &format!("{prefix}.b"))?;
    let groups = g.val(w).shape()[0];
    let k = g.val(w).shape()[2];
    g.conv2d(x, w, Some(bias), 1, (k - 1) / 2, groups)
}

pub fn init_dwsep(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    init_conv(store, rng, &format!("{prefix}.dw"), c, 1, 3)?;
    init_conv(store, rng, &format!("{prefix}.pw"), c, c, 1)
}

/// 3x3 depthwise-separable convolution: depthwise then pointwise.
pub fn dwsep(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let y = conv_dw(g, b, &format!("{prefix}.dw"), x)?;
    conv1x1(g, b, &format!("{prefix}.pw"), y)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.register(&format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0))?;
    store.register(&format!("{prefix}.beta"), Tensor::zeros(&[c]))
}

/// Channel layer norm with learned affine terms.
pub fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.var(g, &format!("{prefix}.gamma"))?;
    let beta = b.var(g, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_param_count_example() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_conv(&mut s, &mut rng, "embed", 8, 3, 3).unwrap();
        assert_eq!(s.num_scalars(), 3 * 8 * 9 + 8);
    }

    #[test]
    fn dwsep_shapes_and_identity_init_of_norm() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_dwsep(&mut s, &mut rng, "f", 4).unwrap();
        init_layer_norm(&mut s, "n", 4).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&s, false);
        let x = g.constant(Tensor::filled(&[2, 4, 6, 6], 0.3));
        let y = dwsep(&mut g, &mut b, "f", x).unwrap();
        assert_eq!(g.val(y).shape(), &[2, 4, 6, 6]);
        let n = layer_norm(&mut g, &mut b, "n", x).unwrap();
        assert_eq!(g.val(n).shape(), &[2, 4, 6, 6]);
    }
}
