use rayon::prelude::*;

use super::{ResTTParams, Topology};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Everything backpropagation needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input vectors `X(1)..X(N)`.
    pub inputs: Vec<Vec<f64>>,
    /// Layer outputs `Y(1)..Y(N)`; the last entry is the model output.
    pub outputs: Vec<Vec<f64>>,
    /// Intermediate matrices, `None` where a layer has no chain node. Stored
    /// with shape `[r, width]`: element `[v_prev, v]` is
    /// `sum_i W(l,1)[v_prev, i, v] * x_i`, i.e. the transpose of `a_{v v_prev}`.
    pub transfer: Vec<Option<DenseTensor>>,
    /// Sum of the layer outputs routed to the final linear node because their
    /// identity skip was disabled.
    pub bypass: Option<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("at least one layer")
    }

    /// Input of the final linear node: `Y(N-1)` plus the bypass sum.
    pub(crate) fn final_linear_input(&self) -> Vec<f64> {
        let n = self.outputs.len();
        let mut s = self.outputs[n - 2].clone();
        if let Some(b) = &self.bypass {
            s.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        s
    }
}

fn check_inputs<X: AsRef<[f64]>>(topology: &Topology, x: &[X]) -> Result<()> {
    if x.len() != topology.n_nodes() {
        return Err(Error::InputCount {
            expected: topology.n_nodes(),
            actual: x.len(),
        });
    }
    for (layer, (xi, &dim)) in x.iter().zip(&topology.input_dims).enumerate() {
        if xi.as_ref().len() != dim {
            return Err(Error::InputLength {
                layer,
                expected: dim,
                actual: xi.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// `y[o] += sum_i x[i] * w[i, o]` for a row-major `w` of shape `[len(x), len(y)]`.
#[inline]
pub(crate) fn accumulate_vec_mat(x: &[f64], w: &[f64], y: &mut [f64]) {
    let width = y.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * width..(i + 1) * width];
        for (o, &wv) in y.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// Transfer matrix `[r, width]` of a chain node `[r, dim, width]` at input `x`.
#[inline]
pub(crate) fn transfer_matrix(w: &DenseTensor, x: &[f64]) -> DenseTensor {
    let (r, dim, width) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wd = w.data();
    let mut m = vec![0.0; r * width];
    for v in 0..r {
        let dst = &mut m[v * width..(v + 1) * width];
        for (i, &xi) in x.iter().enumerate().take(dim) {
            if xi == 0.0 {
                continue;
            }
            let src = &wd[(v * dim + i) * width..(v * dim + i + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += xi * s;
            }
        }
    }
    DenseTensor::new(vec![r, width], m).expect("consistent shape")
}

/// Evaluates the network on one sample and records the trace.
///
/// Layer `l >= 1` computes `Y(l) = Y(l,1) + Y(l-1) + Y(l,2)` where each addend
/// is present only if its flag is set. The last layer replaces the identity
/// addend with `W(N,3)` applied to `Y(N-1)` (plus any bypassed outputs).
pub fn forward<X: AsRef<[f64]>>(
    params: &ResTTParams,
    topology: &Topology,
    x: &[X],
) -> Result<(Vec<f64>, ForwardTrace)> {
    check_inputs(topology, x)?;
    let n = topology.n_nodes();
    let r = topology.bond_dim;

    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut transfer: Vec<Option<DenseTensor>> = vec![None; n];
    let mut bypass = topology.has_bypass().then(|| vec![0.0; r]);

    let mut y = vec![0.0; r];
    accumulate_vec_mat(x[0].as_ref(), params.first.data(), &mut y);
    outputs.push(y);

    for l in 1..n {
        let xl = x[l].as_ref();
        let width = topology.layer_width(l);
        let prev = &outputs[l - 1];
        let mut y = vec![0.0; width];

        if topology.chain[l] {
            let w = params.chain[l].as_ref().ok_or_else(|| missing("chain", l))?;
            let m = transfer_matrix(w, xl);
            accumulate_vec_mat(prev, m.data(), &mut y);
            transfer[l] = Some(m);
        }
        if topology.linear_branch[l] {
            let w = params.linear[l].as_ref().ok_or_else(|| missing("linear", l))?;
            accumulate_vec_mat(xl, w.data(), &mut y);
        }
        if l + 1 < n {
            if topology.identity_skip[l] {
                y.iter_mut().zip(prev).for_each(|(a, b)| *a += b);
            } else if let Some(b) = bypass.as_mut() {
                b.iter_mut().zip(prev).for_each(|(a, p)| *a += p);
            }
        } else if topology.final_linear {
            let w = params.final_linear.as_ref().ok_or_else(|| missing("final_linear", l))?;
            let mut s = prev.clone();
            if let Some(b) = &bypass {
                s.iter_mut().zip(b).for_each(|(a, b)| *a += b);
            }
            accumulate_vec_mat(&s, w.data(), &mut y);
        }
        outputs.push(y);
    }

    let trace = ForwardTrace {
        inputs: x.iter().map(|v| v.as_ref().to_vec()).collect(),
        outputs,
        transfer,
        bypass,
    };
    Ok((trace.output().to_vec(), trace))
}

/// Model output only.
pub fn predict<X: AsRef<[f64]>>(params: &ResTTParams, topology: &Topology, x: &[X]) -> Result<Vec<f64>> {
    forward(params, topology, x).map(|(y, _)| y)
}

/// [`forward`] on every sample; output order follows input order.
pub fn forward_batch<S>(
    params: &ResTTParams,
    topology: &Topology,
    xs: &[S],
) -> Result<(Vec<Vec<f64>>, Vec<ForwardTrace>)>
where
    S: AsRef<[Vec<f64>]> + Sync,
{
    let results: Vec<(Vec<f64>, ForwardTrace)> = xs
        .par_iter()
        .map(|x| forward(params, topology, x.as_ref()))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

fn missing(what: &str, layer: usize) -> Error {
    Error::ShapeMismatch(format!("{what} weights absent at layer {layer} but enabled in topology"))
}
