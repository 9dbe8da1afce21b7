use crate::error::{Error, Result};

/// How the per-layer flags of a [`Topology`] were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TopologyMode {
    /// Chain nodes only: every skip, linear branch and the final linear node
    /// are absent.
    PlainTt,
    /// Every connection present.
    Restt,
    /// Identity skips and linear branches only; the chain nodes after the
    /// first are absent. The output is linear in the inputs.
    FullyConnected,
    /// Chain nodes plus linear branches, no identity skips, no final linear
    /// node, scalar output.
    Volterra,
    /// Flags edited layer by layer.
    Custom,
}

impl TopologyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TopologyMode::PlainTt => "plain_tt",
            TopologyMode::Restt => "restt",
            TopologyMode::FullyConnected => "fully_connected",
            TopologyMode::Volterra => "volterra",
            TopologyMode::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "plain_tt" | "tt" => TopologyMode::PlainTt,
            "restt" | "general_restt" => TopologyMode::Restt,
            "fully_connected" | "fc" => TopologyMode::FullyConnected,
            "volterra" => TopologyMode::Volterra,
            "custom" => TopologyMode::Custom,
            other => return Err(Error::Parse(format!("unknown topology mode '{other}'"))),
        })
    }
}

/// Named flag configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    GeneralRestt,
    FullyConnected,
    Volterra,
    PlainTt,
}

impl Preset {
    pub fn mode(self) -> TopologyMode {
        match self {
            Preset::GeneralRestt => TopologyMode::Restt,
            Preset::FullyConnected => TopologyMode::FullyConnected,
            Preset::Volterra => TopologyMode::Volterra,
            Preset::PlainTt => TopologyMode::PlainTt,
        }
    }
}

/// Network shape and connection flags.
///
/// Layers are numbered from 0: layer 0 holds the first node `W(1,1)`, layer
/// `l >= 1` holds `W(l+1,1)` (chain), `W(l+1,2)` (linear branch) and, for the
/// last layer, `W(N,3)` (final linear node). The flag vectors have one entry
/// per layer; entry 0 is ignored because the first node has no optional
/// connections.
///
/// All bond dimensions are equal to `bond_dim`, which is what lets the
/// identity skip add `Y(l-1)` to `Y(l)`. The output index of size
/// `output_dim` lives on the last layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub input_dims: Vec<usize>,
    pub bond_dim: usize,
    pub output_dim: usize,
    pub chain: Vec<bool>,
    /// `identity_skip[l]` adds `Y(l-1)` into `Y(l)`. When it is off and the
    /// final linear node exists, `Y(l-1)` is routed to the final linear node
    /// instead, so only its interactions with later chain nodes disappear.
    pub identity_skip: Vec<bool>,
    pub linear_branch: Vec<bool>,
    pub final_linear: bool,
    pub mode: TopologyMode,
}

impl Topology {
    pub fn preset(
        preset: Preset,
        input_dims: Vec<usize>,
        bond_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        if preset == Preset::Volterra && output_dim != 1 {
            return Err(Error::Topology(format!(
                "the volterra preset needs a scalar output, got output_dim = {output_dim}"
            )));
        }
        let n = input_dims.len();
        let all = |v: bool| {
            let mut flags = vec![v; n];
            if let Some(first) = flags.first_mut() {
                *first = false;
            }
            flags
        };
        let (chain, mut skip, linear, final_linear) = match preset {
            Preset::GeneralRestt => (all(true), all(true), all(true), true),
            Preset::PlainTt => (all(true), all(false), all(false), false),
            Preset::FullyConnected => (all(false), all(true), all(true), true),
            Preset::Volterra => (all(true), all(false), all(true), false),
        };
        if let Some(last) = skip.last_mut() {
            *last = false;
        }
        let topo = Self {
            input_dims,
            bond_dim,
            output_dim,
            chain,
            identity_skip: skip,
            linear_branch: linear,
            final_linear: final_linear && n > 1,
            mode: preset.mode(),
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn plain_tt(input_dims: Vec<usize>, bond_dim: usize, output_dim: usize) -> Result<Self> {
        Self::preset(Preset::PlainTt, input_dims, bond_dim, output_dim)
    }

    pub fn restt(input_dims: Vec<usize>, bond_dim: usize, output_dim: usize) -> Result<Self> {
        Self::preset(Preset::GeneralRestt, input_dims, bond_dim, output_dim)
    }

    /// Uniform input dimension for every node.
    pub fn uniform(preset: Preset, n_nodes: usize, input_dim: usize, bond_dim: usize, output_dim: usize) -> Result<Self> {
        Self::preset(preset, vec![input_dim; n_nodes], bond_dim, output_dim)
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.input_dims.len()
    }

    /// Width of `Y(l)`: `bond_dim` everywhere except the last layer.
    #[inline]
    pub fn layer_width(&self, layer: usize) -> usize {
        if layer + 1 == self.n_nodes() {
            self.output_dim
        } else {
            self.bond_dim
        }
    }

    pub fn set_chain(&mut self, layer: usize, on: bool) -> Result<()> {
        self.check_layer(layer)?;
        self.chain[layer] = on;
        self.mode = TopologyMode::Custom;
        Ok(())
    }

    pub fn set_identity_skip(&mut self, layer: usize, on: bool) -> Result<()> {
        self.check_layer(layer)?;
        if layer + 1 == self.n_nodes() && on {
            return Err(Error::Topology(
                "the last layer has no identity skip; use the final linear node".into(),
            ));
        }
        self.identity_skip[layer] = on;
        self.mode = TopologyMode::Custom;
        Ok(())
    }

    pub fn set_linear_branch(&mut self, layer: usize, on: bool) -> Result<()> {
        self.check_layer(layer)?;
        self.linear_branch[layer] = on;
        self.mode = TopologyMode::Custom;
        Ok(())
    }

    pub fn set_final_linear(&mut self, on: bool) -> Result<()> {
        if self.n_nodes() < 2 && on {
            return Err(Error::Topology("a single-node model has no final linear node".into()));
        }
        self.final_linear = on;
        self.mode = TopologyMode::Custom;
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer >= self.n_nodes() {
            return Err(Error::Topology(format!(
                "layer {layer} has no optional connections (valid: 1..{})",
                self.n_nodes()
            )));
        }
        Ok(())
    }

    /// True when disabled skips are routed to the final linear node.
    pub(crate) fn has_bypass(&self) -> bool {
        self.final_linear && (1..self.n_nodes()).any(|l| self.routes_to_bypass(l))
    }

    #[inline]
    pub(crate) fn routes_to_bypass(&self, layer: usize) -> bool {
        self.final_linear && layer + 1 < self.n_nodes() && layer >= 1 && !self.identity_skip[layer]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if n == 0 {
            return Err(Error::Topology("at least one node is required".into()));
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return Err(Error::Topology(format!("zero input dimension in {:?}", self.input_dims)));
        }
        if self.bond_dim == 0 || self.output_dim == 0 {
            return Err(Error::Topology("bond and output dimensions must be positive".into()));
        }
        if n == 1 && self.bond_dim != self.output_dim {
            return Err(Error::Topology(format!(
                "a single-node model maps I_1 to the bond space, so bond_dim ({}) must equal output_dim ({})",
                self.bond_dim, self.output_dim
            )));
        }
        for (name, flags) in [
            ("chain", &self.chain),
            ("identity_skip", &self.identity_skip),
            ("linear_branch", &self.linear_branch),
        ] {
            if flags.len() != n {
                return Err(Error::Topology(format!(
                    "{name} has {} flags for {n} layers",
                    flags.len()
                )));
            }
        }
        if n > 1 && self.identity_skip[n - 1] {
            return Err(Error::Topology("the last layer has no identity skip".into()));
        }
        if n == 1 && self.final_linear {
            return Err(Error::Topology("a single-node model has no final linear node".into()));
        }
        let inner = |flags: &Vec<bool>, v: bool| flags.iter().skip(1).all(|&f| f == v);
        match self.mode {
            TopologyMode::PlainTt => {
                if !inner(&self.chain, true)
                    || !inner(&self.identity_skip, false)
                    || !inner(&self.linear_branch, false)
                    || self.final_linear
                {
                    return Err(Error::Topology("plain_tt forbids skips and linear branches".into()));
                }
            }
            TopologyMode::Restt => {
                let skips_ok = self.identity_skip.iter().skip(1).take(n.saturating_sub(2)).all(|&f| f);
                if !inner(&self.chain, true)
                    || !skips_ok
                    || !inner(&self.linear_branch, true)
                    || self.final_linear != (n > 1)
                {
                    return Err(Error::Topology("restt requires every connection".into()));
                }
            }
            TopologyMode::FullyConnected => {
                let skips_ok = self.identity_skip.iter().skip(1).take(n.saturating_sub(2)).all(|&f| f);
                if !inner(&self.chain, false) || !skips_ok || !inner(&self.linear_branch, true) {
                    return Err(Error::Topology("fully_connected flags are inconsistent".into()));
                }
            }
            TopologyMode::Volterra => {
                if self.output_dim != 1 {
                    return Err(Error::Topology("volterra needs output_dim = 1".into()));
                }
                if !inner(&self.chain, true)
                    || !inner(&self.identity_skip, false)
                    || !inner(&self.linear_branch, true)
                    || self.final_linear
                {
                    return Err(Error::Topology("volterra flags are inconsistent".into()));
                }
            }
            TopologyMode::Custom => {}
        }
        Ok(())
    }
}
