//! Single-head pre-norm transformer blocks with learned positions and a
//! causal attention mask. Dropout is not modelled.

use super::{Init, ModelConfig, ParamSpec};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

const PER_BLOCK: usize = 16;

pub(super) fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut specs = vec![ParamSpec::new(
        "positions",
        vec![cfg.max_seq_len + 1, d],
        Init::Uniform,
    )];
    for l in 0..cfg.num_layers {
        let name = |s: &str| format!("block{l}.{s}");
        specs.push(ParamSpec::new(name("ln1.gain"), vec![d], Init::Ones));
        specs.push(ParamSpec::new(name("ln1.bias"), vec![d], Init::Zeros));
        for proj in ["q", "k", "v", "o"] {
            specs.push(ParamSpec::new(
                name(&format!("w_{proj}")),
                vec![d, d],
                Init::Uniform,
            ));
            specs.push(ParamSpec::new(
                name(&format!("b_{proj}")),
                vec![d],
                Init::Zeros,
            ));
        }
        specs.push(ParamSpec::new(name("ln2.gain"), vec![d], Init::Ones));
        specs.push(ParamSpec::new(name("ln2.bias"), vec![d], Init::Zeros));
        specs.push(ParamSpec::new(name("ffn.w1"), vec![d, h], Init::Uniform));
        specs.push(ParamSpec::new(name("ffn.b1"), vec![h], Init::Zeros));
        specs.push(ParamSpec::new(name("ffn.w2"), vec![h, d], Init::Uniform));
        specs.push(ParamSpec::new(name("ffn.b2"), vec![d], Init::Zeros));
    }
    specs.push(ParamSpec::new("final_ln.gain", vec![d], Init::Ones));
    specs.push(ParamSpec::new("final_ln.bias", vec![d], Init::Zeros));
    specs
}

fn norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let scaled = g.mul_row(n, gain)?;
    g.add_row(scaled, bias)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(super) fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &[Var],
    inputs: Var,
) -> Result<Var> {
    let n = g.value(inputs).rows();
    if n > cfg.max_seq_len + 1 {
        return Err(Error::Input(format!(
            "{n} positions exceed the positional table"
        )));
    }
    let positions = g.rows(params[0], 0, n)?;
    let mut x = g.add(inputs, positions)?;
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();

    for p in params[1..].chunks(PER_BLOCK).take(cfg.num_layers) {
        let a_in = norm(g, x, p[0], p[1])?;
        let q = linear(g, a_in, p[2], p[3])?;
        let k = linear(g, a_in, p[4], p[5])?;
        let v = linear(g, a_in, p[6], p[7])?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.affine(logits, scale, 0.0)?;
        let attn = g.softmax_rows(logits, true)?;
        let ctx = g.matmul(attn, v)?;
        let out = linear(g, ctx, p[8], p[9])?;
        x = g.add(x, out)?;

        let f_in = norm(g, x, p[10], p[11])?;
        let hidden = linear(g, f_in, p[12], p[13])?;
        let hidden = g.relu(hidden)?;
        let out = linear(g, hidden, p[14], p[15])?;
        x = g.add(x, out)?;
    }
    let tail = params.len() - 2;
    norm(g, x, params[tail], params[tail + 1])
}
