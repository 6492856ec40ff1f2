//! Convolution and residual-block helpers shared by the two networks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSet, ParamVars};
use crate::tensor::Real;

/// Registers `{prefix}.w` `(cout, cin, k, k)` and `{prefix}.b` `(cout)`.
pub(crate) fn register_conv<T: Real>(
    p: &mut ParamSet<T>,
    seed: u64,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
) {
    p.register(
        seed,
        &format!("{prefix}.w"),
        &[cout, cin, k, k],
        Init::Uniform { gain },
    );
    p.register(seed, &format!("{prefix}.b"), &[cout], Init::Zeros);
}

pub(crate) fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Same-padded convolution with the given stride.
pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.w"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    let k = g.value(w).shape()[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

pub(crate) fn register_res_block<T: Real>(p: &mut ParamSet<T>, seed: u64, prefix: &str, c: usize) {
    register_conv(p, seed, &format!("{prefix}.c1"), c, c, 3, 1.0);
    // Second conv starts small so each block begins close to the identity.
    register_conv(p, seed, &format!("{prefix}.c2"), c, c, 3, 0.1);
}

pub(crate) fn res_block_param_count(c: usize) -> usize {
    2 * conv_param_count(c, c, 3)
}

/// `x + c2(silu(c1(silu(x))))`.
pub(crate) fn res_block<T: Real>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let a = g.silu(x);
    let h = conv(g, vars, &format!("{prefix}.c1"), a, 1)?;
    let h = g.silu(h);
    let h = conv(g, vars, &format!("{prefix}.c2"), h, 1)?;
    g.add(x, h)
}
