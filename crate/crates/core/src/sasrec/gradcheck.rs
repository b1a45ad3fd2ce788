//! Finite-difference verification of the hand-written backward pass.

use super::network::{Dims, Network};
use super::{SasrecConfig, SasrecError};
use crate::rng::{derive, rng_from};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error.
    pub max_relative_error: f64,
    /// `(tensor name, relative error)` in storage order.
    pub per_tensor: Vec<(String, f64)>,
}

const STEP: f64 = 1e-5;
const N_ITEMS: usize = 12;

/// Compares analytic gradients of the mean BCE loss against central
/// differences for every element of every parameter tensor, in double
/// precision with dropout off.
///
/// A tensor's error is `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`;
/// when both norms are below 1e-8 (e.g. key biases, which softmax ignores)
/// the absolute difference is reported instead.
pub fn grad_check(config: &SasrecConfig) -> Result<GradCheckReport, SasrecError> {
    config.validate()?;
    let dims = Dims {
        n_items: N_ITEMS,
        max_len: config.max_seq_len,
        d: config.embed_dim,
        heads: config.n_heads,
        blocks: config.n_blocks,
    };
    let mut net: Network<f64> = Network::init(dims, &mut rng_from(derive(config.seed, &[0])));
    // Perturb gains and biases away from their 1/0 initial values so every
    // tensor carries a generic gradient.
    let mut rng = rng_from(derive(config.seed, &[9]));
    for t in net.tensors.iter_mut().skip(2) {
        if t.shape.len() == 1 {
            use rand::Rng as _;
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }

    let n = config.max_seq_len;
    // Fixed sequences: one filling the window, one shorter, one of length 1.
    let full: Vec<u32> = (0..n + 1).map(|i| 1 + (i * 5 % N_ITEMS) as u32).collect();
    let cases: Vec<(Vec<u32>, Vec<u32>, Vec<Option<u32>>)> = vec![
        (
            full[..n].to_vec(),
            full[1..].to_vec(),
            (0..n).map(|i| Some(1 + ((i * 7 + 3) % N_ITEMS) as u32)).collect(),
        ),
        (vec![2, 9, 4], vec![9, 4, 11], vec![Some(6), None, Some(1)]),
        (vec![7], vec![3], vec![Some(12)]),
    ];
    let events: usize = cases.iter().map(|c| c.1.len()).sum();

    let loss = |net: &Network<f64>| -> f64 {
        cases
            .iter()
            .map(|(inp, pos, neg)| net.bce(&net.forward(inp, None), pos, neg, None))
            .sum::<f64>()
            / events as f64
    };

    let mut analytic = net.zero_grads();
    for (inp, pos, neg) in &cases {
        let trace = net.forward(inp, None);
        net.bce(&trace, pos, neg, Some(&mut analytic));
    }
    analytic.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v /= events as f64));

    let mut per_tensor = Vec::with_capacity(net.tensors.len());
    for ti in 0..net.tensors.len() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..net.tensors[ti].data.len() {
            let orig = net.tensors[ti].data[j];
            net.tensors[ti].data[j] = orig + STEP;
            let up = loss(&net);
            net.tensors[ti].data[j] = orig - STEP;
            let down = loss(&net);
            net.tensors[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[ti][j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let err = if denom < 1e-8 { diff2.sqrt() } else { diff2.sqrt() / denom };
        per_tensor.push((net.tensors[ti].name.clone(), err));
    }
    let max_relative_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_tensor,
    })
}
