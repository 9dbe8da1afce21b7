//! Explicit backpropagation through (residual) tensor trains.
//!
//! Gradients are returned as `+dc/dW`; the optimizer negates them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, ResTTParams, Topology};

/// Gradient of a scalar cost with respect to every stored parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Same layout as the parameters; absent branches stay absent.
    pub params: ResTTParams,
    /// `dc/dY(N)`.
    pub upstream: Vec<f64>,
}

/// Cost functions on the model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    SoftmaxCrossEntropy,
}

impl Loss {
    pub fn as_str(self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "softmax_cross_entropy" | "cross_entropy" | "ce" => Ok(Loss::SoftmaxCrossEntropy),
            other => Err(Error::Parse(format!("unknown loss '{other}'"))),
        }
    }
}

/// Cost and `dc/doutput` for one sample. Cross-entropy targets are one-hot.
pub fn loss_and_grad(output: &[f64], target: &[f64], loss: Loss) -> Result<(f64, Vec<f64>)> {
    if output.len() != target.len() {
        return Err(Error::TargetLength {
            output: output.len(),
            target: target.len(),
        });
    }
    match loss {
        Loss::Mse => {
            let o = output.len() as f64;
            let c = output.iter().zip(target).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / o;
            let g = output.iter().zip(target).map(|(y, t)| 2.0 * (y - t) / o).collect();
            Ok((c, g))
        }
        Loss::SoftmaxCrossEntropy => {
            let class = one_hot_class(target)?;
            softmax_cross_entropy(output, class)
        }
    }
}

/// `-log softmax(output)[class]` and its gradient `softmax(output) - onehot`.
pub fn softmax_cross_entropy(output: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    if class >= output.len() {
        return Err(Error::ClassOutOfRange {
            class,
            classes: output.len(),
        });
    }
    let m = output.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = output.iter().map(|y| (y - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let c = z.ln() + m - output[class];
    let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
    g[class] -= 1.0;
    Ok((c, g))
}

fn one_hot_class(target: &[f64]) -> Result<usize> {
    let mut class = None;
    for (i, &t) in target.iter().enumerate() {
        if t == 1.0 && class.is_none() {
            class = Some(i);
        } else if t != 0.0 {
            return Err(Error::NotOneHot);
        }
    }
    class.ok_or(Error::NotOneHot)
}

fn check_trace(topology: &Topology, trace: &ForwardTrace, upstream: &[f64]) -> Result<()> {
    let n = topology.n_nodes();
    let stale = |what: String| Err(Error::StaleTrace(what));
    if trace.outputs.len() != n || trace.inputs.len() != n || trace.transfer.len() != n {
        return stale(format!("trace has {} layers, topology {n}", trace.outputs.len()));
    }
    for l in 0..n {
        if trace.outputs[l].len() != topology.layer_width(l) {
            return stale(format!("layer {l} output has width {}", trace.outputs[l].len()));
        }
        if trace.inputs[l].len() != topology.input_dims[l] {
            return stale(format!("layer {l} input has length {}", trace.inputs[l].len()));
        }
        let expected = l > 0 && topology.chain[l];
        match &trace.transfer[l] {
            Some(m) if expected && m.shape() == [topology.bond_dim, topology.layer_width(l)] => {}
            None if !expected => {}
            _ => return stale(format!("layer {l} intermediate matrix does not match the topology")),
        }
    }
    if trace.bypass.is_some() != topology.has_bypass() {
        return stale("bypass sum does not match the topology".into());
    }
    if upstream.len() != topology.output_dim {
        return Err(Error::TargetLength {
            output: topology.output_dim,
            target: upstream.len(),
        });
    }
    Ok(())
}

/// `acc += scale * dc/dW` for one traced sample.
pub fn backward_accumulate(
    params: &ResTTParams,
    topology: &Topology,
    trace: &ForwardTrace,
    upstream: &[f64],
    scale: f64,
    acc: &mut ResTTParams,
) -> Result<()> {
    backprop(params, topology, trace, upstream, scale, Some(acc), None)
}

/// `dc/dY(l)` for every layer `l`, given `dc/dY(N)` = `upstream`.
pub fn layer_sensitivities(
    params: &ResTTParams,
    topology: &Topology,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut sens = vec![Vec::new(); topology.n_nodes()];
    backprop(params, topology, trace, upstream, 1.0, None, Some(&mut sens))?;
    Ok(sens)
}

/// Walking back from the output, `g = dc/dY(l)` is pushed to `dc/dY(l-1)`
/// through the intermediate matrix (chain node), the identity skip, and for
/// the last layer through `W(N,3)`. Outputs routed to the final linear node
/// receive that node's input gradient.
fn backprop(
    params: &ResTTParams,
    topology: &Topology,
    trace: &ForwardTrace,
    upstream: &[f64],
    scale: f64,
    mut acc: Option<&mut ResTTParams>,
    mut sens: Option<&mut Vec<Vec<f64>>>,
) -> Result<()> {
    check_trace(topology, trace, upstream)?;
    let n = topology.n_nodes();
    let r = topology.bond_dim;
    let mut g: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
    let mut g_bypass: Option<Vec<f64>> = None;

    for l in (1..n).rev() {
        let x = &trace.inputs[l];
        let y_prev = &trace.outputs[l - 1];
        let width = g.len();
        let mut g_prev = vec![0.0; r];

        if let Some(m) = &trace.transfer[l] {
            if let Some(acc) = acc.as_deref_mut() {
                let gw = acc.chain[l].as_mut().ok_or_else(|| absent("chain", l))?.data_mut();
                let dim = x.len();
                for (v, &yv) in y_prev.iter().enumerate() {
                    if yv == 0.0 {
                        continue;
                    }
                    for (i, &xi) in x.iter().enumerate() {
                        let c = yv * xi;
                        if c == 0.0 {
                            continue;
                        }
                        let row = &mut gw[(v * dim + i) * width..(v * dim + i + 1) * width];
                        row.iter_mut().zip(&g).for_each(|(w, gv)| *w += c * gv);
                    }
                }
            }
            let md = m.data();
            for (v, gp) in g_prev.iter_mut().enumerate() {
                *gp += md[v * width..(v + 1) * width]
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        if topology.linear_branch[l] {
            if let Some(acc) = acc.as_deref_mut() {
                let gw = acc.linear[l].as_mut().ok_or_else(|| absent("linear", l))?.data_mut();
                outer_into(x, &g, gw);
            }
        }
        if l + 1 == n {
            if topology.final_linear {
                let w3 = params.final_linear.as_ref().ok_or_else(|| absent("final_linear", l))?;
                if let Some(acc) = acc.as_deref_mut() {
                    let s = trace.final_linear_input();
                    let gw = acc.final_linear.as_mut().ok_or_else(|| absent("final_linear", l))?;
                    outer_into(&s, &g, gw.data_mut());
                }
                let wd = w3.data();
                let gs: Vec<f64> = (0..r)
                    .map(|v| wd[v * width..(v + 1) * width].iter().zip(&g).map(|(a, b)| a * b).sum())
                    .collect();
                g_prev.iter_mut().zip(&gs).for_each(|(a, b)| *a += b);
                if trace.bypass.is_some() {
                    g_bypass = Some(gs);
                }
            }
        } else if topology.identity_skip[l] {
            g_prev.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        } else if let (true, Some(gb)) = (topology.routes_to_bypass(l), &g_bypass) {
            g_prev.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        }
        if let Some(sens) = sens.as_deref_mut() {
            sens[l] = std::mem::replace(&mut g, g_prev);
        } else {
            g = g_prev;
        }
    }
    if let Some(acc) = acc {
        outer_into(&trace.inputs[0], &g, acc.first.data_mut());
    }
    if let Some(sens) = sens {
        sens[0] = g;
    }
    Ok(())
}

/// Gradient of `upstream . Y(N)` with respect to every parameter.
pub fn backward(
    params: &ResTTParams,
    topology: &Topology,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<GradientSet> {
    let mut acc = ResTTParams::zeros(topology);
    backward_accumulate(params, topology, trace, upstream, 1.0, &mut acc)?;
    Ok(GradientSet {
        params: acc,
        upstream: upstream.to_vec(),
    })
}

/// `out[i, o] += a[i] * b[o]`.
fn outer_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    let w = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        out[i * w..(i + 1) * w].iter_mut().zip(b).for_each(|(o, bv)| *o += ai * bv);
    }
}

fn absent(what: &str, layer: usize) -> Error {
    Error::ShapeMismatch(format!("{what} gradient slot absent at layer {layer}"))
}

/// Central-difference gradient of `loss_fn(forward(params, x))`.
///
/// Every stored scalar is perturbed by `+-step`; `upstream` is the
/// central-difference derivative of `loss_fn` at the unperturbed output.
pub fn finite_diff_grad<X, F>(
    params: &ResTTParams,
    topology: &Topology,
    x: &[X],
    loss_fn: F,
    step: f64,
) -> Result<GradientSet>
where
    X: AsRef<[f64]>,
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Hyperparameter(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |p: &ResTTParams| -> Result<f64> { Ok(loss_fn(&forward(p, topology, x)?.0)) };
    let mut grads = ResTTParams::zeros(topology);
    let mut work = params.clone();
    let n_tensors = work.tensors_mut().len();
    for t in 0..n_tensors {
        let len = work.tensors_mut()[t].len();
        for j in 0..len {
            let orig = work.tensors_mut()[t].data()[j];
            work.tensors_mut()[t].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.tensors_mut()[t].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.tensors_mut()[t].data_mut()[j] = orig;
            grads.tensors_mut()[t].data_mut()[j] = (plus - minus) / (2.0 * step);
        }
    }
    let y = forward(params, topology, x)?.0;
    let upstream = (0..y.len())
        .map(|o| {
            let mut yp = y.clone();
            yp[o] += step;
            let mut ym = y.clone();
            ym[o] -= step;
            (loss_fn(&yp) - loss_fn(&ym)) / (2.0 * step)
        })
        .collect();
    Ok(GradientSet {
        params: grads,
        upstream,
    })
}

/// Samples per sequential accumulation chunk in [`batch_loss_and_grad`].
pub const GRAD_CHUNK: usize = 32;

/// Mean cost and mean gradient over a batch.
///
/// The batch is cut into fixed chunks of [`GRAD_CHUNK`] samples, each chunk
/// is accumulated sequentially, and the chunk sums are combined by a
/// pairwise tree in chunk order, so the result does not depend on how many
/// threads evaluate the chunks.
pub fn batch_loss_and_grad<S, T>(
    params: &ResTTParams,
    topology: &Topology,
    xs: &[S],
    targets: &[T],
    loss: Loss,
) -> Result<(f64, ResTTParams)>
where
    S: AsRef<[Vec<f64>]> + Sync,
    T: AsRef<[f64]> + Sync,
{
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if xs.len() != targets.len() {
        return Err(Error::CountMismatch {
            images: xs.len(),
            labels: targets.len(),
        });
    }
    let n = xs.len();
    let scale = 1.0 / n as f64;
    let partials: Vec<(f64, ResTTParams)> = xs
        .par_chunks(GRAD_CHUNK)
        .zip(targets.par_chunks(GRAD_CHUNK))
        .map(|(xc, tc)| {
            let mut acc = ResTTParams::zeros(topology);
            let mut cost = 0.0;
            for (x, t) in xc.iter().zip(tc) {
                let (y, trace) = forward(params, topology, x.as_ref())?;
                let (c, up) = loss_and_grad(&y, t.as_ref(), loss)?;
                cost += c;
                backward_accumulate(params, topology, &trace, &up, scale, &mut acc)?;
            }
            Ok((cost, acc))
        })
        .collect::<Result<_>>()?;
    let (cost, grad) = tree_reduce(partials)?;
    Ok((cost * scale, grad))
}

fn tree_reduce(mut items: Vec<(f64, ResTTParams)>) -> Result<(f64, ResTTParams)> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some((mut c, mut a)) = it.next() {
            if let Some((c2, b)) = it.next() {
                c += c2;
                a.axpy(1.0, &b)?;
            }
            next.push((c, a));
        }
        items = next;
    }
    items.pop().ok_or(Error::EmptyDataset)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{accumulate_vec_mat, init_params, predict, Preset};

    fn inputs(topo: &Topology, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        topo.input_dims
            .iter()
            .map(|&d| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn max_abs_diff(a: &ResTTParams, b: &ResTTParams) -> f64 {
        a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_and_grad(&[1.0, 1.0], &[1.0, 1.0], Loss::Mse).unwrap(), (0.0, vec![0.0, 0.0]));
        assert_eq!(loss_and_grad(&[2.0], &[0.0], Loss::Mse).unwrap(), (4.0, vec![4.0]));
        let (c, g) = loss_and_grad(&[0.0, 0.0], &[1.0, 0.0], Loss::SoftmaxCrossEntropy).unwrap();
        assert!((c - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        assert!(matches!(
            loss_and_grad(&[0.0, 0.0], &[0.5, 0.5], Loss::SoftmaxCrossEntropy),
            Err(Error::NotOneHot)
        ));
        assert!(matches!(softmax_cross_entropy(&[0.0], 3), Err(Error::ClassOutOfRange { .. })));
        assert!(matches!(loss_and_grad(&[0.0], &[0.0, 1.0], Loss::Mse), Err(Error::TargetLength { .. })));
        let (c, _) = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((c - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn two_node_symbolic_gradients() {
        let topo = Topology::uniform(Preset::GeneralRestt, 2, 1, 1, 1).unwrap();
        let (a, b, c, d) = (0.3, -1.2, 0.7, 2.5);
        let (x1, x2) = (1.5, -0.4);
        let mut p = ResTTParams::zeros(&topo);
        p.first.data_mut()[0] = a;
        p.chain[1].as_mut().unwrap().data_mut()[0] = b;
        p.linear[1].as_mut().unwrap().data_mut()[0] = c;
        p.final_linear.as_mut().unwrap().data_mut()[0] = d;
        let (_, tr) = forward(&p, &topo, &[vec![x1], vec![x2]]).unwrap();
        let g = backward(&p, &topo, &tr, &[1.0]).unwrap().params;
        let close = |u: f64, v: f64| assert!((u - v).abs() < 1e-14, "{u} vs {v}");
        close(g.first.data()[0], b * x1 * x2 + d * x1);
        close(g.chain[1].as_ref().unwrap().data()[0], a * x1 * x2);
        close(g.linear[1].as_ref().unwrap().data()[0], x2);
        close(g.final_linear.as_ref().unwrap().data()[0], a * x1);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let topo = Topology::uniform(Preset::GeneralRestt, 4, 2, 3, 2).unwrap();
        let p = init_params(&topo, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, tr) = forward(&p, &topo, &inputs(&topo, &mut rng)).unwrap();
        let g = backward(&p, &topo, &tr, &[0.0, 0.0]).unwrap();
        assert!(g.params.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let topo = Topology::uniform(Preset::GeneralRestt, 4, 2, 3, 2).unwrap();
        let other = Topology::uniform(Preset::GeneralRestt, 3, 2, 3, 2).unwrap();
        let p = init_params(&other, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, tr) = forward(&p, &other, &inputs(&other, &mut rng)).unwrap();
        let p4 = init_params(&topo, 1.0, 2).unwrap();
        assert!(matches!(backward(&p4, &topo, &tr, &[1.0, 0.0]), Err(Error::StaleTrace(_))));
    }

    #[test]
    fn matches_finite_differences_on_mixed_instance() {
        let mut topo = Topology::uniform(Preset::GeneralRestt, 5, 3, 4, 2).unwrap();
        topo.set_identity_skip(2, false).unwrap();
        let p = init_params(&topo, 1.0, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = inputs(&topo, &mut rng);
        let target = [0.3, -0.2];
        let (y, tr) = forward(&p, &topo, &x).unwrap();
        let (_, up) = loss_and_grad(&y, &target, Loss::Mse).unwrap();
        let g = backward(&p, &topo, &tr, &up).unwrap();
        let fd = finite_diff_grad(&p, &topo, &x, |y| loss_and_grad(y, &target, Loss::Mse).unwrap().0, 1e-5).unwrap();
        assert!(max_abs_diff(&g.params, &fd.params) < 1e-9);
        for (a, b) in g.upstream.iter().zip(&fd.upstream) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_only_quadratic_loss_is_exact() {
        let topo = Topology::uniform(Preset::FullyConnected, 3, 2, 2, 1).unwrap();
        let p = init_params(&topo, 1.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = inputs(&topo, &mut rng);
        let (y, tr) = forward(&p, &topo, &x).unwrap();
        let (_, up) = loss_and_grad(&y, &[1.0], Loss::Mse).unwrap();
        let g = backward(&p, &topo, &tr, &up).unwrap();
        let fd = finite_diff_grad(&p, &topo, &x, |y| (y[0] - 1.0).powi(2), 1e-4).unwrap();
        assert!(max_abs_diff(&g.params, &fd.params) < 1e-10);
    }

    #[test]
    fn central_differences_are_second_order() {
        let topo = Topology::uniform(Preset::GeneralRestt, 3, 2, 2, 3).unwrap();
        let p = init_params(&topo, 1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = inputs(&topo, &mut rng);
        let (y, tr) = forward(&p, &topo, &x).unwrap();
        let (_, up) = softmax_cross_entropy(&y, 1).unwrap();
        let exact = backward(&p, &topo, &tr, &up).unwrap().params;
        let loss = |y: &[f64]| softmax_cross_entropy(y, 1).unwrap().0;
        let e1 = max_abs_diff(&exact, &finite_diff_grad(&p, &topo, &x, loss, 0.1).unwrap().params);
        let e2 = max_abs_diff(&exact, &finite_diff_grad(&p, &topo, &x, loss, 0.05).unwrap().params);
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn absent_branches_stay_absent() {
        let topo = Topology::uniform(Preset::PlainTt, 3, 2, 2, 1).unwrap();
        let p = init_params(&topo, 1.0, 1).unwrap();
        let x = vec![vec![1.0, 0.5]; 3];
        let fd = finite_diff_grad(&p, &topo, &x, |y| y[0], 1e-5).unwrap();
        assert!(fd.params.linear.iter().all(Option::is_none));
        assert!(fd.params.final_linear.is_none());
        assert!(finite_diff_grad(&p, &topo, &x, |y| y[0], 0.0).is_err());
    }

    #[test]
    fn plain_tt_jacobian_is_transfer_product() {
        let topo = Topology::uniform(Preset::PlainTt, 5, 2, 3, 2).unwrap();
        let p = init_params(&topo, 1.0, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = inputs(&topo, &mut rng);
        let (_, tr) = forward(&p, &topo, &x).unwrap();
        let run_from = |k: usize, y: &[f64]| {
            let mut y = y.to_vec();
            for l in k + 1..5 {
                let m = tr.transfer[l].as_ref().unwrap();
                let mut next = vec![0.0; m.shape()[1]];
                accumulate_vec_mat(&y, m.data(), &mut next);
                y = next;
            }
            y
        };
        for k in 0..4 {
            // Jacobian column v by finite differences on Y(k).
            let base = tr.outputs[k].clone();
            assert_eq!(run_from(k, &base), tr.outputs[4]);
            for v in 0..3 {
                let h = 1e-6;
                let mut up = base.clone();
                up[v] += h;
                let mut dn = base.clone();
                dn[v] -= h;
                let (a, b) = (run_from(k, &up), run_from(k, &dn));
                // Same column from the backward pass: unit upstream on each output.
                for o in 0..2 {
                    let mut u = vec![0.0; 2];
                    u[o] = 1.0;
                    let g = backward(&p, &topo, &tr, &u).unwrap().params;
                    let fd = (a[o] - b[o]) / (2.0 * h);
                    let from_grad = if k == 0 {
                        // dy/dW(1,1)[i, v] = x1_i * J[o, v]; pick the largest x1 entry.
                        let (i, xi) = x[0]
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                            .unwrap();
                        g.first.data()[i * 3 + v] / xi
                    } else {
                        let (i, xi) = x[k]
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                            .unwrap();
                        let w = g.chain[k].as_ref().unwrap();
                        let (vp, yp) = tr.outputs[k - 1]
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                            .unwrap();
                        w.data()[(vp * 2 + i) * 3 + v] / (xi * yp)
                    };
                    assert!((fd - from_grad).abs() < 1e-8, "k={k} v={v} o={o}: {fd} vs {from_grad}");
                }
            }
        }
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let mut topo = Topology::uniform(Preset::GeneralRestt, 4, 2, 3, 2).unwrap();
        topo.set_identity_skip(1, false).unwrap();
        let p = init_params(&topo, 1.0, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = inputs(&topo, &mut rng);
        let (_, tr) = forward(&p, &topo, &x).unwrap();
        let up = [0.7, -0.3];
        let sens = layer_sensitivities(&p, &topo, &tr, &up).unwrap();
        assert_eq!(sens[3], up.to_vec());
        // dc/dY(0) through the first node: dc/dW(1,1) = x1 (x) dc/dY(0).
        let g = backward(&p, &topo, &tr, &up).unwrap().params;
        for i in 0..2 {
            for v in 0..3 {
                assert!((g.first.data()[i * 3 + v] - x[0][i] * sens[0][v]).abs() < 1e-14);
            }
        }
        let g2 = g.linear[2].as_ref().unwrap();
        for i in 0..2 {
            for v in 0..3 {
                assert!((g2.data()[i * 3 + v] - x[2][i] * sens[2][v]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn branch_decoupling_at_zero_chain() {
        let rt = Topology::uniform(Preset::GeneralRestt, 4, 2, 3, 2).unwrap();
        let fc = Topology::uniform(Preset::FullyConnected, 4, 2, 3, 2).unwrap();
        let mut p = init_params(&rt, 1.0, 6).unwrap();
        for c in p.chain.iter_mut().flatten() {
            c.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut q = ResTTParams::zeros(&fc);
        q.first = p.first.clone();
        q.linear = p.linear.clone();
        q.final_linear = p.final_linear.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = inputs(&rt, &mut rng);
        assert_eq!(predict(&p, &rt, &x).unwrap(), predict(&q, &fc, &x).unwrap());
        let up = [0.4, -1.1];
        let gr = backward(&p, &rt, &forward(&p, &rt, &x).unwrap().1, &up).unwrap().params;
        let gf = backward(&q, &fc, &forward(&q, &fc, &x).unwrap().1, &up).unwrap().params;
        assert_eq!(gr.first, gf.first);
        assert_eq!(gr.linear, gf.linear);
        assert_eq!(gr.final_linear, gf.final_linear);

        // Removing every residual connection leaves exactly the plain chain.
        let tt = Topology::uniform(Preset::PlainTt, 4, 2, 3, 2).unwrap();
        let mut custom = rt.clone();
        for l in 1..4 {
            custom.set_linear_branch(l, false).unwrap();
            if l < 3 {
                custom.set_identity_skip(l, false).unwrap();
            }
        }
        custom.set_final_linear(false).unwrap();
        let pt = init_params(&tt, 1.0, 3).unwrap();
        let gt = backward(&pt, &tt, &forward(&pt, &tt, &x).unwrap().1, &up).unwrap();
        let gc = backward(&pt, &custom, &forward(&pt, &custom, &x).unwrap().1, &up).unwrap();
        assert_eq!(gt, gc);
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let topo = Topology::uniform(Preset::GeneralRestt, 3, 2, 3, 2).unwrap();
        let p = init_params(&topo, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<Vec<Vec<f64>>> = (0..70).map(|_| inputs(&topo, &mut rng)).collect();
        let ts: Vec<Vec<f64>> = (0..70).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let (c, g) = batch_loss_and_grad(&p, &topo, &xs, &ts, Loss::SoftmaxCrossEntropy).unwrap();
        let mut mean = ResTTParams::zeros(&topo);
        let mut cost = 0.0;
        for (x, t) in xs.iter().zip(&ts) {
            let (y, tr) = forward(&p, &topo, x).unwrap();
            let (ci, up) = loss_and_grad(&y, t, Loss::SoftmaxCrossEntropy).unwrap();
            cost += ci / 70.0;
            mean.axpy(1.0 / 70.0, &backward(&p, &topo, &tr, &up).unwrap().params).unwrap();
        }
        assert!((c - cost).abs() < 1e-12);
        assert!(max_abs_diff(&g, &mean) < 1e-12);

        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (c3, g3) = pool.install(|| batch_loss_and_grad(&p, &topo, &xs, &ts, Loss::SoftmaxCrossEntropy)).unwrap();
        assert_eq!(c.to_bits(), c3.to_bits());
        assert_eq!(g, g3);
    }
}
