//! Brute-force reference evaluations of small models.
//!
//! These are exponential in the number of nodes and exist to cross-check
//! [`forward`](crate::model::forward) and the gradients, never to serve
//! predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ResTTParams, Topology};
use crate::tensor::{contract, ContractionSpec, DenseTensor};

pub const MAX_NODES: usize = 6;
pub const MAX_INPUT_DIM: usize = 4;
pub const MAX_BOND_DIM: usize = 5;

/// A monomial: `(layer, component)` pairs in increasing layer order, 0-based.
pub type TermKey = Vec<(usize, usize)>;

/// The model output written as a polynomial in the input components.
///
/// Every path through the layered sum produces a monomial; paths that
/// produce the same monomial are merged. Terms are kept even when their
/// coefficients happen to be zero, so [`families`](Self::families) reflects
/// the topology rather than the weight values.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialExpansion {
    pub n_nodes: usize,
    pub output_dim: usize,
    /// Coefficient vector (one entry per output component) of each monomial.
    pub terms: BTreeMap<TermKey, Vec<f64>>,
}

impl MonomialExpansion {
    pub fn evaluate<X: AsRef<[f64]>>(&self, x: &[X]) -> Result<Vec<f64>> {
        if x.len() != self.n_nodes {
            return Err(Error::InputCount {
                expected: self.n_nodes,
                actual: x.len(),
            });
        }
        let mut y = vec![0.0; self.output_dim];
        for (key, coef) in &self.terms {
            let mut m = 1.0;
            for &(layer, i) in key {
                let xl = x[layer].as_ref();
                m *= *xl.get(i).ok_or(Error::InputLength {
                    layer,
                    expected: i + 1,
                    actual: xl.len(),
                })?;
            }
            y.iter_mut().zip(coef).for_each(|(a, c)| *a += c * m);
        }
        Ok(y)
    }

    /// Distinct feature subsets (0-based layers) appearing in any term.
    pub fn families(&self) -> BTreeSet<Vec<usize>> {
        self.terms
            .keys()
            .map(|k| k.iter().map(|&(l, _)| l).collect())
            .collect()
    }

    /// Terms of one interaction order.
    pub fn of_order(&self, order: usize) -> impl Iterator<Item = (&TermKey, &Vec<f64>)> {
        self.terms.iter().filter(move |(k, _)| k.len() == order)
    }

    /// Text listing, one term per line, highest order first:
    ///
    /// ```text
    /// # order<TAB>features<TAB>indices<TAB>coefficients
    /// 2	1,3	0,1	0.5 -1.25
    /// ```
    ///
    /// Features are numbered from 1, component indices from 0, and the
    /// coefficient column holds one value per output component.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# order\tfeatures\tindices\tcoefficients\n");
        let mut keys: Vec<&TermKey> = self.terms.keys().collect();
        keys.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        for key in keys {
            let feats: Vec<String> = key.iter().map(|(l, _)| (l + 1).to_string()).collect();
            let idx: Vec<String> = key.iter().map(|(_, i)| i.to_string()).collect();
            let coefs: Vec<String> = self.terms[key].iter().map(|c| format!("{c:e}")).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", key.len(), feats.join(","), idx.join(","), coefs.join(" "));
        }
        out
    }
}

fn guard(topology: &Topology) -> Result<()> {
    let n = topology.n_nodes();
    let max_dim = topology.input_dims.iter().copied().max().unwrap_or(0);
    if n > MAX_NODES || max_dim > MAX_INPUT_DIM || topology.bond_dim > MAX_BOND_DIM {
        return Err(Error::SizeGuard(format!(
            "N = {n}, max I = {max_dim}, r = {} exceeds N <= {MAX_NODES}, I <= {MAX_INPUT_DIM}, r <= {MAX_BOND_DIM}; use a smaller model",
            topology.bond_dim
        )));
    }
    Ok(())
}

type Symbolic = BTreeMap<TermKey, Vec<f64>>;

fn add_into(dst: &mut Symbolic, key: TermKey, v: &[f64]) {
    let e = dst.entry(key).or_insert_with(|| vec![0.0; v.len()]);
    e.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// `v . W` for `W` row-major `[v.len(), width]`.
fn vec_mat(v: &[f64], w: &[f64], width: usize) -> Vec<f64> {
    (0..width)
        .map(|o| v.iter().enumerate().map(|(k, vk)| vk * w[k * width + o]).sum())
        .collect()
}

/// Polynomial expansion of the output, computed by propagating every
/// layer's output as a map from monomials to bond-space coefficient vectors.
pub fn expand(params: &ResTTParams, topology: &Topology) -> Result<MonomialExpansion> {
    guard(topology)?;
    topology.validate()?;
    params.check_shapes(topology)?;
    let n = topology.n_nodes();
    let r = topology.bond_dim;

    let mut y: Symbolic = BTreeMap::new();
    for i in 0..topology.input_dims[0] {
        y.insert(vec![(0, i)], params.first.data()[i * r..(i + 1) * r].to_vec());
    }
    let mut routed: Symbolic = BTreeMap::new();

    for l in 1..n {
        let width = topology.layer_width(l);
        let dim = topology.input_dims[l];
        let mut next: Symbolic = BTreeMap::new();
        if let Some(w) = params.chain[l].as_ref().filter(|_| topology.chain[l]) {
            for (key, v) in &y {
                for i in 0..dim {
                    // Slice W[:, i, :] as an r x width matrix.
                    let slice: Vec<f64> = (0..r)
                        .flat_map(|a| w.data()[(a * dim + i) * width..(a * dim + i + 1) * width].iter().copied())
                        .collect();
                    let mut k = key.clone();
                    k.push((l, i));
                    add_into(&mut next, k, &vec_mat(v, &slice, width));
                }
            }
        }
        if let Some(w) = params.linear[l].as_ref().filter(|_| topology.linear_branch[l]) {
            for i in 0..dim {
                add_into(&mut next, vec![(l, i)], &w.data()[i * width..(i + 1) * width]);
            }
        }
        if l + 1 < n {
            if topology.identity_skip[l] {
                for (key, v) in &y {
                    add_into(&mut next, key.clone(), v);
                }
            } else if topology.routes_to_bypass(l) {
                for (key, v) in &y {
                    add_into(&mut routed, key.clone(), v);
                }
            }
        } else if let Some(w3) = params.final_linear.as_ref().filter(|_| topology.final_linear) {
            for (key, v) in y.iter().chain(&routed) {
                add_into(&mut next, key.clone(), &vec_mat(v, w3.data(), width));
            }
        }
        y = next;
    }
    Ok(MonomialExpansion {
        n_nodes: n,
        output_dim: topology.output_dim,
        terms: y,
    })
}

fn is_chain_only(topology: &Topology) -> bool {
    let n = topology.n_nodes();
    (1..n).all(|l| topology.chain[l] && !topology.identity_skip[l] && !topology.linear_branch[l])
        && !topology.final_linear
}

/// Full weight tensor `I_1 x .. x I_N x O` of a plain tensor train, obtained
/// by contracting every chain node over its bond indices.
pub fn dense_weight_tensor(params: &ResTTParams, topology: &Topology) -> Result<DenseTensor> {
    guard(topology)?;
    if !is_chain_only(topology) {
        return Err(Error::WrongPreset(format!(
            "dense weight tensor needs a plain tensor train, got mode {}",
            topology.mode.as_str()
        )));
    }
    params.check_shapes(topology)?;
    let mut w = params.first.clone();
    for l in 1..topology.n_nodes() {
        let node = params.chain[l].as_ref().expect("checked shapes");
        w = contract(&w, node, &ContractionSpec::new(vec![(l, 0)]))?;
    }
    Ok(w)
}

/// Contracts a weight tensor's leading axes with one input vector each.
pub fn contract_inputs<X: AsRef<[f64]>>(w: &DenseTensor, x: &[X]) -> Result<DenseTensor> {
    let mut out = w.clone();
    for xi in x {
        let v = DenseTensor::vector(xi.as_ref().to_vec());
        out = contract(&v, &out, &ContractionSpec::new(vec![(0, 0)]))?;
    }
    Ok(out)
}

/// Volterra kernels `H(N), H(N-1), .., H(1)` of a volterra-preset model.
///
/// `H(k)` has shape `I_k x .. x I_N` and weights the products
/// `x(k)_{i_k} .. x(N)_{i_N}`: it is the linear branch of node `k` (the
/// first node for `k = 1`) contracted with the chain nodes `k+1..N`.
pub fn volterra_kernels(params: &ResTTParams, topology: &Topology) -> Result<Vec<DenseTensor>> {
    guard(topology)?;
    let n = topology.n_nodes();
    let flags_ok = (1..n).all(|l| topology.chain[l] && !topology.identity_skip[l] && topology.linear_branch[l])
        && !topology.final_linear;
    if !flags_ok || topology.output_dim != 1 || n < 2 {
        return Err(Error::WrongPreset(format!(
            "volterra kernels need the volterra preset with N >= 2 and O = 1, got mode {} with N = {n}, O = {}",
            topology.mode.as_str(),
            topology.output_dim
        )));
    }
    params.check_shapes(topology)?;
    let strip = |t: DenseTensor| -> Result<DenseTensor> {
        let shape = t.shape()[..t.rank() - 1].to_vec();
        t.reshape(shape)
    };
    let mut kernels = vec![strip(params.linear[n - 1].clone().expect("checked shapes"))?];
    // Suffix of chain nodes, shape r x I_{k+1} x .. x I_N x 1.
    let mut suffix = params.chain[n - 1].clone().expect("checked shapes");
    for l in (0..n - 1).rev() {
        let lin = if l == 0 {
            &params.first
        } else {
            params.linear[l].as_ref().expect("checked shapes")
        };
        kernels.push(strip(contract(lin, &suffix, &ContractionSpec::new(vec![(1, 0)]))?)?);
        if l > 0 {
            let node = params.chain[l].as_ref().expect("checked shapes");
            suffix = contract(node, &suffix, &ContractionSpec::new(vec![(2, 0)]))?;
        }
    }
    Ok(kernels)
}

/// `sum_k <H(k), x(k) (x) .. (x) x(N)>` for kernels from [`volterra_kernels`].
pub fn evaluate_volterra<X: AsRef<[f64]>>(kernels: &[DenseTensor], x: &[X]) -> Result<f64> {
    let n = x.len();
    let mut y = 0.0;
    for h in kernels {
        let first = n - h.rank();
        y += contract_inputs(h, &x[first..])?.data()[0];
    }
    Ok(y)
}
