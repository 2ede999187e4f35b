//! Mapping network F: a deterministic 3-layer MLP from an embedding row to
//! a style code. No noise input; diversity machinery is deliberately absent.

use crate::autodiff::{Scalar, Tape, Var};
use crate::nn::{Binding, Linear, ParamId, ParamSet};
use rand::Rng;

pub struct MappingNetwork {
    layers: [Linear; 3],
}

impl MappingNetwork {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        embed_dim: usize,
        hidden: usize,
        style_dim: usize,
        rng: &mut R,
    ) -> Self {
        MappingNetwork {
            layers: [
                Linear::new(ps, "map.fc0", embed_dim, hidden, rng),
                Linear::new(ps, "map.fc1", hidden, hidden, rng),
                Linear::new(ps, "map.fc2", hidden, style_dim, rng),
            ],
        }
    }

    /// s = F(M_z) for a batch of embedding rows [n, d] -> [n, S].
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, mz: Var) -> Var {
        let mut h = self.layers[0].forward(tape, bind, mz);
        h = tape.relu(h);
        h = self.layers[1].forward(tape, bind, h);
        h = tape.relu(h);
        self.layers[2].forward(tape, bind, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}
