//! Parameterized layers built on the gradient graph.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] so a
//! whole model can be saved, restored or perturbed by name.

mod attention;
mod norm;

pub use attention::{attention, MultiHeadAttention};
pub use norm::{normalize, AdaLn, AdaLnConfig, LayerNorm, NORM_EPS};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }
}

/// `y = x·W + b` over the last axis, `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.w"), init.xavier(fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// A linear map whose weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
        let bias = Some(store.add(format!("{name}.b"), Tensor::zeros([fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let last = *g.shape(x).last().unwrap_or(&0);
        if last != self.fan_in {
            return Err(Error::shape(
                "linear",
                format!("expected last axis {}, got shape {:?}", self.fan_in, g.shape(x)),
            ));
        }
        let x2 = if g.rank(x) == 1 { g.reshape(x, &[1, self.fan_in])? } else { x };
        let w = g.param(self.weight)?;
        let mut y = g.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b)?;
            y = g.add(y, b)?;
        }
        if g.rank(x) == 1 {
            y = g.reshape(y, &[self.fan_out])?;
        }
        Ok(y)
    }
}

/// Two linear layers with an activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, expansion: usize, activation: Activation) -> Self {
        let hidden = dim * expansion;
        Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = self.activation.apply(g, h)?;
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormPlacement {
    /// `x + f(LN(x))`
    #[default]
    Pre,
    /// `LN(x + f(x))`
    Post,
}

impl NormPlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            other => Err(Error::Config(format!("unknown norm placement {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        }
    }
}

/// Self-attention plus MLP, each with a residual connection, attending
/// over the second-to-last axis.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub placement: NormPlacement,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub placement: NormPlacement,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &EncoderLayerConfig) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), cfg.dim, cfg.mlp_ratio, cfg.activation),
            placement: cfg.placement,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self.placement {
            NormPlacement::Pre => {
                let h = self.norm1.forward(g, x)?;
                let h = self.attn.msa(g, h)?;
                let x = g.add(x, h)?;
                let h = self.norm2.forward(g, x)?;
                let h = self.mlp.forward(g, h)?;
                g.add(x, h)
            }
            NormPlacement::Post => {
                let h = self.attn.msa(g, x)?;
                let x = g.add(x, h)?;
                let x = self.norm1.forward(g, x)?;
                let h = self.mlp.forward(g, x)?;
                let x = g.add(x, h)?;
                self.norm2.forward(g, x)
            }
        }
    }
}
