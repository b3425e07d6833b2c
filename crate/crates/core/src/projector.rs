//! Two-layer MLP projector mapping encoder features into the decoder's
//! embedding space. Both the audio and vision paths instantiate this with
//! their own widths and parameter prefixes.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::params::{GraphBinder, ParamStore};
use crate::rng::SplitMix64;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct MlpProjector {
    prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl MlpProjector {
    /// `prefix` is the parameter group, e.g. "audio_projector".
    pub fn new(prefix: impl Into<String>, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::Config("projector widths must be >= 1".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            in_dim,
            hidden,
            out_dim,
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        store.insert(
            format!("{}.in.weight", self.prefix),
            Tensor::randn(&[self.hidden, self.in_dim], INIT_STD, rng),
        );
        store.insert(format!("{}.in.bias", self.prefix), Tensor::zeros(&[self.hidden]));
        store.insert(
            format!("{}.out.weight", self.prefix),
            Tensor::randn(&[self.out_dim, self.hidden], INIT_STD, rng),
        );
        store.insert(format!("{}.out.bias", self.prefix), Tensor::zeros(&[self.out_dim]));
    }

    /// linear -> GELU -> linear; preserves row count, changes width.
    pub fn forward(&self, g: &mut Graph, binder: &mut GraphBinder, x: NodeId) -> Result<NodeId> {
        let (_, w) = g.value(x).dims2()?;
        if w != self.in_dim {
            return Err(Error::Config(format!(
                "projector '{}' expects width {}, got {w}",
                self.prefix, self.in_dim
            )));
        }
        let w_in = binder.bind(g, &format!("{}.in.weight", self.prefix))?;
        let b_in = binder.bind(g, &format!("{}.in.bias", self.prefix))?;
        let w_out = binder.bind(g, &format!("{}.out.weight", self.prefix))?;
        let b_out = binder.bind(g, &format!("{}.out.bias", self.prefix))?;
        let h = g.matmul_nt(x, w_in)?;
        let h = g.add_bias(h, b_in)?;
        let h = g.gelu(h);
        let out = g.matmul_nt(h, w_out)?;
        g.add_bias(out, b_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_zero_biases_give_zero_output() {
        let proj = MlpProjector::new("audio_projector", 8, 12, 16).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        proj.init_params(&mut store, &mut rng);
        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(&store);
        let x = g.constant(Tensor::zeros(&[5, 8]));
        let y = proj.forward(&mut g, &mut binder, x).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 16]);
        // GELU(0) = 0, so zero input with zero biases stays exactly zero
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let proj = MlpProjector::new("vision_projector", 8, 12, 16).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        proj.init_params(&mut store, &mut rng);
        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(&store);
        let x = g.constant(Tensor::zeros(&[5, 9]));
        assert!(matches!(
            proj.forward(&mut g, &mut binder, x),
            Err(Error::Config(_))
        ));
    }
}
