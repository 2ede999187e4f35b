//! Multi-task discriminator: three norm-free residual blocks, then two
//! convolutional layers; the last layer emits one logit per perturbation.
//!
//! `forward` optionally carries a forward-mode tangent chain alongside the
//! primal computation. The tangent output is the directional derivative of
//! the logits w.r.t. the input image, built from ordinary first-order ops,
//! so its tape gradient w.r.t. the weights is exactly the R1 parameter
//! gradient (see `training::losses`).

use super::blocks::NormFreeResBlk;
use crate::autodiff::{Scalar, Tape, Var};
use crate::nn::{leaky_relu_dual, Binding, Conv2d, ParamId, ParamSet};
use rand::Rng;

pub struct Discriminator {
    stem: Conv2d,
    blocks: Vec<NormFreeResBlk>,
    conv_out: Conv2d,
    head: Conv2d,
    num_perturbations: usize,
}

impl Discriminator {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamSet<F>, cfg: &super::ModelConfig, rng: &mut R) -> Self {
        let w = cfg.widths();
        let stem = Conv2d::new(ps, "disc.stem", cfg.channels, w[0], 3, 1, rng);
        let mut blocks = Vec::new();
        for i in 0..3 {
            blocks.push(NormFreeResBlk::new(ps, &format!("disc.down{i}"), w[i], w[i + 1], true, rng));
        }
        // valid convolution over whatever spatial extent remains -> 1x1
        let spatial = cfg.img_size / 8;
        let conv_out = Conv2d::new(ps, "disc.conv_out", w[3], w[3], spatial, 0, rng);
        let head = Conv2d::new(ps, "disc.head", w[3], cfg.num_perturbations, 1, 0, rng);
        Discriminator { stem, blocks, conv_out, head, num_perturbations: cfg.num_perturbations }
    }

    /// Returns `[N, P]` logits, and the tangent logits when a tangent seed
    /// (same shape as `x`) is provided.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Binding,
        x: Var,
        tangent: Option<Var>,
    ) -> (Var, Option<Var>) {
        let alpha = F::from_f64(0.2);
        let n = tape.value(x).shape()[0];
        match tangent {
            None => {
                let mut h = self.stem.forward(tape, bind, x);
                for blk in &self.blocks {
                    h = blk.forward(tape, bind, h, None).0;
                }
                h = tape.leaky_relu(h, alpha);
                h = self.conv_out.forward(tape, bind, h);
                h = tape.leaky_relu(h, alpha);
                h = self.head.forward(tape, bind, h);
                (tape.reshape(h, &[n, self.num_perturbations]), None)
            }
            Some(t) => {
                let (mut h, mut th) = self.stem.forward_dual(tape, bind, x, t);
                for blk in &self.blocks {
                    let (h2, th2) = blk.forward(tape, bind, h, Some(th));
                    h = h2;
                    th = th2.unwrap();
                }
                let (h2, th2) = leaky_relu_dual(tape, alpha, h, th);
                let (mut h, mut th) = self.conv_out.forward_dual(tape, bind, h2, th2);
                let (h2, th2) = leaky_relu_dual(tape, alpha, h, th);
                let (h3, th3) = self.head.forward_dual(tape, bind, h2, th2);
                h = h3;
                th = th3;
                (
                    tape.reshape(h, &[n, self.num_perturbations]),
                    Some(tape.reshape(th, &[n, self.num_perturbations])),
                )
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.conv_out.params());
        p.extend(self.head.params());
        p
    }
}
