use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Topology;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Weight tensors of a (residual) tensor train.
///
/// Shapes, for `N` nodes, bond `r`, output `O`:
/// - `first`: `I_1 x r` (`W(1,1)`)
/// - `chain[l]`: `r x I_l x r`, or `r x I_N x O` on the last layer (`W(l+1,1)`)
/// - `linear[l]`: `I_l x r`, or `I_N x O` on the last layer (`W(l+1,2)`)
/// - `final_linear`: `r x O` (`W(N,3)`)
///
/// `chain[0]` and `linear[0]` are always `None`; absent branches hold no
/// storage. The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ResTTParams {
    pub first: DenseTensor,
    pub chain: Vec<Option<DenseTensor>>,
    pub linear: Vec<Option<DenseTensor>>,
    pub final_linear: Option<DenseTensor>,
}

impl ResTTParams {
    pub fn zeros(topology: &Topology) -> Self {
        let n = topology.n_nodes();
        let r = topology.bond_dim;
        let first = DenseTensor::zeros(&[topology.input_dims[0], r]);
        let mut chain = vec![None; n];
        let mut linear = vec![None; n];
        for l in 1..n {
            let width = topology.layer_width(l);
            let dim = topology.input_dims[l];
            if topology.chain[l] {
                chain[l] = Some(DenseTensor::zeros(&[r, dim, width]));
            }
            if topology.linear_branch[l] {
                linear[l] = Some(DenseTensor::zeros(&[dim, width]));
            }
        }
        let final_linear = topology
            .final_linear
            .then(|| DenseTensor::zeros(&[r, topology.output_dim]));
        Self {
            first,
            chain,
            linear,
            final_linear,
        }
    }

    /// Every stored tensor with its checkpoint name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &DenseTensor)> {
        let mut out = vec![("w_1_1".to_string(), &self.first)];
        for l in 1..self.chain.len() {
            if let Some(t) = &self.chain[l] {
                out.push((format!("w_{}_1", l + 1), t));
            }
            if let Some(t) = &self.linear[l] {
                out.push((format!("w_{}_2", l + 1), t));
            }
        }
        if let Some(t) = &self.final_linear {
            out.push((format!("w_{}_3", self.chain.len()), t));
        }
        out
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out = vec![&mut self.first];
        for (c, w) in self.chain.iter_mut().zip(self.linear.iter_mut()).skip(1) {
            if let Some(t) = c {
                out.push(t);
            }
            if let Some(t) = w {
                out.push(t);
            }
        }
        if let Some(t) = &mut self.final_linear {
            out.push(t);
        }
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that every tensor has the shape `topology` prescribes.
    pub fn check_shapes(&self, topology: &Topology) -> Result<()> {
        let expected = Self::zeros(topology);
        let have = self.tensors();
        let want = expected.tensors();
        if have.len() != want.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors for a topology that needs {}",
                have.len(),
                want.len()
            )));
        }
        for ((name_h, h), (name_w, w)) in have.iter().zip(&want) {
            if name_h != name_w || h.shape() != w.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name_h} {:?} where {name_w} {:?} was expected",
                    h.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ResTTParams) -> Result<()> {
        let src: Vec<&DenseTensor> = other.tensors().into_iter().map(|(_, t)| t).collect();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::ShapeMismatch("parameter sets differ in structure".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.axpy(alpha, s)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

/// Draws every stored weight i.i.d. from `N(0, sigma_w2 / r)`.
pub fn init_params(topology: &Topology, sigma_w2: f64, seed: u64) -> Result<ResTTParams> {
    if !(sigma_w2 > 0.0) || !sigma_w2.is_finite() {
        return Err(Error::NonPositiveVariance(sigma_w2));
    }
    topology.validate()?;
    let std = (sigma_w2 / topology.bond_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ResTTParams::zeros(topology);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(params)
}
