//! Style encoder E: three norm-free residual blocks, a valid convolution
//! collapsing the spatial extent, and a fully connected layer emitting one
//! style code per sample. Single shared head; the perturbation label is not
//! an input.

use super::blocks::NormFreeResBlk;
use crate::autodiff::{Scalar, Tape, Var};
use crate::nn::{Binding, Conv2d, Linear, ParamId, ParamSet};
use rand::Rng;

pub struct StyleEncoder {
    stem: Conv2d,
    blocks: Vec<NormFreeResBlk>,
    conv_out: Conv2d,
    fc: Linear,
    feat_width: usize,
}

impl StyleEncoder {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamSet<F>, cfg: &super::ModelConfig, rng: &mut R) -> Self {
        let w = cfg.widths();
        let stem = Conv2d::new(ps, "senc.stem", cfg.channels, w[0], 3, 1, rng);
        let mut blocks = Vec::new();
        for i in 0..3 {
            blocks.push(NormFreeResBlk::new(ps, &format!("senc.down{i}"), w[i], w[i + 1], true, rng));
        }
        let spatial = cfg.img_size / 8;
        let conv_out = Conv2d::new(ps, "senc.conv_out", w[3], w[3], spatial, 0, rng);
        let fc = Linear::new(ps, "senc.fc", w[3], cfg.style_dim, rng);
        StyleEncoder { stem, blocks, conv_out, fc, feat_width: w[3] }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var) -> Var {
        let alpha = F::from_f64(0.2);
        let n = tape.value(x).shape()[0];
        let mut h = self.stem.forward(tape, bind, x);
        for blk in &self.blocks {
            h = blk.forward(tape, bind, h, None).0;
        }
        h = tape.leaky_relu(h, alpha);
        h = self.conv_out.forward(tape, bind, h);
        h = tape.leaky_relu(h, alpha);
        let h = tape.reshape(h, &[n, self.feat_width]);
        self.fc.forward(tape, bind, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.conv_out.params());
        p.extend(self.fc.params());
        p
    }
}
