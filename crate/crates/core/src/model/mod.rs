//! Tensor train and residual tensor train networks.

mod checkpoint;
mod forward;
mod params;
mod topology;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{forward, forward_batch, predict, ForwardTrace};
#[cfg(test)]
pub(crate) use forward::accumulate_vec_mat;
pub use params::{init_params, ResTTParams};
pub use topology::{Preset, Topology, TopologyMode};

/// Parameter counts under two conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Published-table convention: the first and last chain nodes count
    /// `I x r`, middle chain nodes `r x I x r`, each linear branch `I x r`;
    /// the output dimension and `W(N,3)` are not counted.
    pub chain_convention: usize,
    /// Exact number of stored scalars.
    pub full: usize,
}

pub fn param_count(topology: &Topology) -> ParamCount {
    let n = topology.n_nodes();
    let r = topology.bond_dim;
    let mut conv = topology.input_dims[0] * r;
    for l in 1..n {
        let dim = topology.input_dims[l];
        if topology.chain[l] {
            conv += if l + 1 == n { dim * r } else { r * dim * r };
        }
        if topology.linear_branch[l] {
            conv += dim * r;
        }
    }
    ParamCount {
        chain_convention: conv,
        full: ResTTParams::zeros(topology).n_scalars(),
    }
}
