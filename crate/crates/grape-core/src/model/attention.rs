//! Optional self-attention block over the gene rows of the embedding matrix,
//! sitting between the embedding layer and the mapping network. Scaled
//! dot-product attention with a residual connection; identity pass-through
//! when disabled.

use crate::autodiff::{Scalar, Tape, Var};
use crate::nn::{Binding, Linear, ParamId, ParamSet};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttentionConfig {
    pub enabled: bool,
    pub heads: usize,
    /// Total key/value dimension across heads; 0 means "use embed_dim".
    pub key_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { enabled: false, heads: 4, key_dim: 0 }
    }
}

impl AttentionConfig {
    pub fn resolved_key_dim(&self, embed_dim: usize) -> usize {
        if self.key_dim == 0 {
            embed_dim
        } else {
            self.key_dim
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let kd = self.resolved_key_dim(embed_dim);
        if self.heads == 0 || kd % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention key_dim {kd} must be divisible by heads {}",
                self.heads
            )));
        }
        Ok(())
    }
}

pub struct Attention {
    cfg: AttentionConfig,
    proj: Option<AttnParams>,
    head_dim: usize,
}

struct AttnParams {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl Attention {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        cfg: &AttentionConfig,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let kd = cfg.resolved_key_dim(embed_dim);
        let proj = cfg.enabled.then(|| AttnParams {
            wq: Linear::new(ps, "attn.wq", embed_dim, kd, rng),
            wk: Linear::new(ps, "attn.wk", embed_dim, kd, rng),
            wv: Linear::new(ps, "attn.wv", embed_dim, kd, rng),
            wo: Linear::new(ps, "attn.wo", kd, embed_dim, rng),
        });
        Attention {
            cfg: cfg.clone(),
            proj,
            head_dim: if cfg.enabled { kd / cfg.heads } else { 0 },
        }
    }

    pub fn enabled(&self) -> bool {
        self.proj.is_some()
    }

    /// M [P, d] -> M + Wo(multi-head attention over gene rows). Identity when
    /// disabled.
    pub fn attend<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, m: Var) -> Var {
        let Some(p) = &self.proj else {
            return m;
        };
        let q = p.wq.forward(tape, bind, m);
        let k = p.wk.forward(tape, bind, m);
        let v = p.wv.forward(tape, bind, m);
        let scale = F::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (a, b) = (h * self.head_dim, (h + 1) * self.head_dim);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let vh = tape.slice_cols(v, a, b);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let out = p.wo.forward(tape, bind, cat);
        tape.add(m, out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.proj {
            None => vec![],
            Some(p) => {
                let mut v = p.wq.params();
                v.extend(p.wk.params());
                v.extend(p.wv.params());
                v.extend(p.wo.params());
                v
            }
        }
    }
}
