use super::{Init, ModelConfig, ParamSpec};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

const GATES: [&str; 3] = ["z", "r", "n"];
const PER_LAYER: usize = 9;

pub(super) fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.hidden_dim;
    let mut specs = Vec::with_capacity(cfg.num_layers * PER_LAYER);
    for l in 0..cfg.num_layers {
        let input = if l == 0 { cfg.embed_dim } else { h };
        for gate in GATES {
            specs.push(ParamSpec::new(
                format!("gru{l}.w_{gate}"),
                vec![input, h],
                Init::Uniform,
            ));
            specs.push(ParamSpec::new(
                format!("gru{l}.u_{gate}"),
                vec![h, h],
                Init::Uniform,
            ));
            specs.push(ParamSpec::new(
                format!("gru{l}.b_{gate}"),
                vec![h],
                Init::Zeros,
            ));
        }
    }
    specs
}

/// Stacked GRU over the input rows; returns the top layer's hidden state
/// at every step.
pub(super) fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &[Var],
    inputs: Var,
) -> Result<Var> {
    let mut x = inputs;
    for layer in params.chunks(PER_LAYER).take(cfg.num_layers) {
        x = layer_forward(g, cfg.hidden_dim, layer, x)?;
    }
    Ok(x)
}

fn layer_forward(g: &mut Graph, h: usize, p: &[Var], x: Var) -> Result<Var> {
    let steps = g.value(x).rows();
    // input projections for all steps at once
    let mut proj = [x; 3];
    for (k, slot) in proj.iter_mut().enumerate() {
        let xw = g.matmul(x, p[3 * k])?;
        *slot = g.add_row(xw, p[3 * k + 2])?;
    }
    let [xz, xr, xn] = proj;
    let (uz, ur, un) = (p[1], p[4], p[7]);

    let mut state = g.constant(Tensor::matrix(1, h, vec![0.0; h])?);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let z_in = g.row(xz, t)?;
        let hz = g.matmul(state, uz)?;
        let z_pre = g.add(z_in, hz)?;
        let z = g.sigmoid(z_pre)?;

        let r_in = g.row(xr, t)?;
        let hr = g.matmul(state, ur)?;
        let r_pre = g.add(r_in, hr)?;
        let r = g.sigmoid(r_pre)?;

        let n_in = g.row(xn, t)?;
        let gated = g.mul(r, state)?;
        let hn = g.matmul(gated, un)?;
        let n_pre = g.add(n_in, hn)?;
        let n = g.tanh(n_pre)?;

        // h' = (1 - z) ⊙ n + z ⊙ h
        let keep = g.mul(z, state)?;
        let one_minus_z = g.affine(z, -1.0, 1.0)?;
        let fresh = g.mul(one_minus_z, n)?;
        state = g.add(fresh, keep)?;
        outputs.push(state);
    }
    g.stack_rows(&outputs)
}
