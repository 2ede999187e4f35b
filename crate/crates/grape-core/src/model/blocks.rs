//! Residual building blocks shared by the networks.

use crate::autodiff::{Scalar, Tape, Var};
use crate::nn::{leaky_relu_dual, Binding, Conv2d, Linear, ParamId, ParamSet};
use rand::Rng;

pub const ADAIN_EPS: f64 = 1e-5;
const LEAKY_ALPHA: f64 = 0.2;
const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn alpha<F: Scalar>() -> F {
    F::from_f64(LEAKY_ALPHA)
}

/// Pre-activation residual block with instance normalization, optional 2x
/// downsampling. Used by the generator encoder.
pub struct ResBlk {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    pub down: bool,
}

impl ResBlk {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        down: bool,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_in, 3, 1, rng);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), c_in, c_out, 3, 1, rng);
        let skip = (c_in != c_out)
            .then(|| Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 0, rng));
        ResBlk { conv1, conv2, skip, down }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var) -> Var {
        let eps = F::from_f64(ADAIN_EPS);
        let mut h = tape.instance_norm(x, eps);
        h = tape.leaky_relu(h, alpha());
        h = self.conv1.forward(tape, bind, h);
        if self.down {
            h = tape.avg_pool2(h);
        }
        h = tape.instance_norm(h, eps);
        h = tape.leaky_relu(h, alpha());
        h = self.conv2.forward(tape, bind, h);

        let mut s = x;
        if let Some(skip) = &self.skip {
            s = skip.forward(tape, bind, s);
        }
        if self.down {
            s = tape.avg_pool2(s);
        }
        let sum = tape.add(h, s);
        tape.scale(sum, F::from_f64(INV_SQRT2))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }
}

/// Normalization-free residual block (discriminator / style encoder),
/// with an optional forward-mode tangent chain for the R1 penalty.
pub struct NormFreeResBlk {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    pub down: bool,
}

impl NormFreeResBlk {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        down: bool,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_in, 3, 1, rng);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), c_in, c_out, 3, 1, rng);
        let skip = (c_in != c_out)
            .then(|| Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 0, rng));
        NormFreeResBlk { conv1, conv2, skip, down }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Binding,
        x: Var,
        tangent: Option<Var>,
    ) -> (Var, Option<Var>) {
        match tangent {
            None => {
                let mut h = tape.leaky_relu(x, alpha());
                h = self.conv1.forward(tape, bind, h);
                if self.down {
                    h = tape.avg_pool2(h);
                }
                h = tape.leaky_relu(h, alpha());
                h = self.conv2.forward(tape, bind, h);
                let mut s = x;
                if let Some(skip) = &self.skip {
                    s = skip.forward(tape, bind, s);
                }
                if self.down {
                    s = tape.avg_pool2(s);
                }
                let sum = tape.add(h, s);
                (tape.scale(sum, F::from_f64(INV_SQRT2)), None)
            }
            Some(t) => {
                let (mut h, mut th) = leaky_relu_dual(tape, alpha(), x, t);
                let (h2, th2) = self.conv1.forward_dual(tape, bind, h, th);
                h = h2;
                th = th2;
                if self.down {
                    h = tape.avg_pool2(h);
                    th = tape.avg_pool2(th);
                }
                let (h2, th2) = leaky_relu_dual(tape, alpha(), h, th);
                let (mut h, mut th) = self.conv2.forward_dual(tape, bind, h2, th2);
                let (mut s, mut ts) = (x, t);
                if let Some(skip) = &self.skip {
                    let (s2, ts2) = skip.forward_dual(tape, bind, s, ts);
                    s = s2;
                    ts = ts2;
                }
                if self.down {
                    s = tape.avg_pool2(s);
                    ts = tape.avg_pool2(ts);
                }
                h = tape.add(h, s);
                th = tape.add(th, ts);
                let c = F::from_f64(INV_SQRT2);
                (tape.scale(h, c), Some(tape.scale(th, c)))
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }
}

/// Style projection for one AdaIN site: s -> (mean, std) with std = 1 + W s,
/// so the identity style is reachable at initialization.
pub struct AdainLayer {
    fc_mean: Linear,
    fc_std: Linear,
}

impl AdainLayer {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        style_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        AdainLayer {
            fc_mean: Linear::new(ps, &format!("{name}.mean"), style_dim, channels, rng),
            fc_std: Linear::new(ps, &format!("{name}.std"), style_dim, channels, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var, s: Var) -> Var {
        let mean = self.fc_mean.forward(tape, bind, s);
        let std_raw = self.fc_std.forward(tape, bind, s);
        let std = tape.add_scalar(std_raw, F::one());
        super::adain(tape, x, mean, std)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc_mean.params();
        p.extend(self.fc_std.params());
        p
    }
}

/// Residual block with AdaIN conditioning and optional 2x upsampling.
/// Used by the generator decoder.
pub struct AdainResBlk {
    adain1: AdainLayer,
    adain2: AdainLayer,
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    pub up: bool,
}

impl AdainResBlk {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        style_dim: usize,
        up: bool,
        rng: &mut R,
    ) -> Self {
        AdainResBlk {
            adain1: AdainLayer::new(ps, &format!("{name}.adain1"), style_dim, c_in, rng),
            adain2: AdainLayer::new(ps, &format!("{name}.adain2"), style_dim, c_out, rng),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1, rng),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 0, rng)),
            up,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var, s: Var) -> Var {
        let mut h = self.adain1.forward(tape, bind, x, s);
        h = tape.leaky_relu(h, alpha());
        if self.up {
            h = tape.upsample2(h);
        }
        h = self.conv1.forward(tape, bind, h);
        h = self.adain2.forward(tape, bind, h, s);
        h = tape.leaky_relu(h, alpha());
        h = self.conv2.forward(tape, bind, h);

        let mut sc = x;
        if self.up {
            sc = tape.upsample2(sc);
        }
        if let Some(skip) = &self.skip {
            sc = skip.forward(tape, bind, sc);
        }
        let sum = tape.add(h, sc);
        tape.scale(sum, F::from_f64(INV_SQRT2))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.adain1.params();
        p.extend(self.adain2.params());
        p.extend(self.conv1.params());
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }
}
