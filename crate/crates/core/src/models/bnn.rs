//! Fully connected ReLU classifier with a softmax output.
//!
//! Parameter layout: for each layer in order, the weight matrix
//! (row-major, `out x in`) followed by the bias vector.

use super::tape::{GradTape, Var};

/// Layer sizes including input and output, e.g. `[d, 50, 10]`.
pub fn layer_sizes(input_dim: usize, widths: &[usize], classes: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(widths.len() + 2);
    s.push(input_dim);
    s.extend_from_slice(widths);
    s.push(classes);
    s
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Output logits for one input.
pub fn logits(sizes: &[usize], theta: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    let layers = sizes.len() - 1;
    for (l, w) in sizes.windows(2).enumerate() {
        let (nin, nout) = (w[0], w[1]);
        let weights = &theta[off..off + nin * nout];
        let bias = &theta[off + nin * nout..off + nin * nout + nout];
        off += nin * nout + nout;
        let mut out: Vec<f64> = (0..nout)
            .map(|j| {
                bias[j]
                    + weights[j * nin..(j + 1) * nin]
                        .iter()
                        .zip(&h)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        if l + 1 < layers {
            for o in &mut out {
                *o = o.max(0.0);
            }
        }
        h = out;
    }
    h
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Records `log p(y | x, theta)` on `tape`; returns the output node and
/// the parameter leaves.
pub fn record_log_lik(tape: &mut GradTape, sizes: &[usize], theta: &[f64], x: &[f64], label: usize) -> (Var, Vec<Var>) {
    let params: Vec<Var> = theta.iter().map(|t| tape.leaf(*t)).collect();
    let layers = sizes.len() - 1;
    let mut off = 0;
    let mut h: Vec<Var> = Vec::new();
    for (l, w) in sizes.windows(2).enumerate() {
        let (nin, nout) = (w[0], w[1]);
        let wv = &params[off..off + nin * nout];
        let bv = &params[off + nin * nout..off + nin * nout + nout];
        off += nin * nout + nout;
        let mut out = Vec::with_capacity(nout);
        for j in 0..nout {
            let row = &wv[j * nin..(j + 1) * nin];
            let a = if l == 0 {
                tape.affine_const(row, x, bv[j])
            } else {
                tape.affine(row, &h, bv[j])
            };
            out.push(if l + 1 < layers { tape.relu(a) } else { a });
        }
        h = out;
    }
    let lse = tape.logsumexp(&h);
    let ll = tape.sub(h[label], lse);
    (ll, params)
}
