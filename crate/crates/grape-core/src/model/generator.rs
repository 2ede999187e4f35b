//! Encoder-decoder generator: 3 downsampling + 2 intermediate residual
//! blocks with instance normalization, then 2 intermediate + 3 upsampling
//! residual blocks with AdaIN, and a 1x1 projection back to image channels.

use super::blocks::{AdainResBlk, ResBlk, ADAIN_EPS};
use crate::autodiff::{Scalar, Tape, Var};
use crate::nn::{Binding, Conv2d, ParamId, ParamSet};
use rand::Rng;

pub struct Generator {
    stem: Conv2d,
    encoder: Vec<ResBlk>,
    decoder: Vec<AdainResBlk>,
    to_img: Conv2d,
}

impl Generator {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamSet<F>, cfg: &super::ModelConfig, rng: &mut R) -> Self {
        let w = cfg.widths();
        let stem = Conv2d::new(ps, "gen.stem", cfg.channels, w[0], 3, 1, rng);

        let mut encoder = Vec::new();
        for i in 0..3 {
            encoder.push(ResBlk::new(ps, &format!("gen.down{i}"), w[i], w[i + 1], true, rng));
        }
        for i in 0..2 {
            encoder.push(ResBlk::new(ps, &format!("gen.mid{i}"), w[3], w[3], false, rng));
        }

        let s = cfg.style_dim;
        let mut decoder = Vec::new();
        for i in 0..2 {
            decoder.push(AdainResBlk::new(ps, &format!("gen.dmid{i}"), w[3], w[3], s, false, rng));
        }
        for i in 0..3 {
            decoder.push(AdainResBlk::new(ps, &format!("gen.up{i}"), w[3 - i], w[2 - i], s, true, rng));
        }

        let to_img = Conv2d::new(ps, "gen.to_img", w[0], cfg.channels, 1, 0, rng);
        Generator { stem, encoder, decoder, to_img }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var, s: Var) -> Var {
        let mut h = self.stem.forward(tape, bind, x);
        for blk in &self.encoder {
            h = blk.forward(tape, bind, h);
        }
        for blk in &self.decoder {
            h = blk.forward(tape, bind, h, s);
        }
        h = tape.instance_norm(h, F::from_f64(ADAIN_EPS));
        h = tape.leaky_relu(h, F::from_f64(0.2));
        self.to_img.forward(tape, bind, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.stem.params();
        for b in &self.encoder {
            p.extend(b.params());
        }
        for b in &self.decoder {
            p.extend(b.params());
        }
        p.extend(self.to_img.params());
        p
    }
}
