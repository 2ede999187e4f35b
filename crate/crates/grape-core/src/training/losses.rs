//! Objective terms: non-saturating adversarial loss with R1 regularization
//! on real images, cycle-consistency loss, and the detached style
//! reconstruction loss that trains only the style encoder.
//!
//! R1 needs the parameter gradient of an input-gradient norm, i.e. one
//! second-order term. Instead of a higher-order tape, pass 1 computes
//! g = d(sum_n D_{y_n}(x_n))/dx by ordinary backprop, and pass 2 pushes g as
//! a constant forward-mode tangent through the discriminator. The selected
//! tangent logit psi_n then has value ||g_n||^2, and because the tangent
//! chain reuses the live weights, grad_theta(gamma * mean psi) equals
//! grad_theta((gamma/2) * mean ||g_n||^2) exactly (the seed is treated as a
//! constant, which is exactly the product-rule half that survives).

use crate::autodiff::{Scalar, Tape};
use crate::model::{select_head, GrapeModel};
use crate::nn::{ParamId, ParamSet};
use crate::{Error, Result};
use ndarray::ArrayD;
use std::collections::HashSet;

/// Per-step loss values (both optimizer phases).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub adv_d: f64,
    pub adv_g: f64,
    pub r1: f64,
    pub cyc: f64,
    pub sty: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.adv_d, self.adv_g, self.r1, self.cyc, self.sty]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub type Grads<F> = Vec<(ParamId, ArrayD<F>)>;

fn id_set(ids: &[ParamId]) -> HashSet<usize> {
    ids.iter().map(|p| p.0).collect()
}

/// G(x, F(M_z)) evaluated without gradients; the detached fake batch for the
/// discriminator step.
pub fn generate_fake<F: Scalar>(
    model: &GrapeModel,
    ps: &ParamSet<F>,
    x: &ArrayD<F>,
    z: &[usize],
) -> Result<ArrayD<F>> {
    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let s = model.style_for_targets(&mut tape, &bind, z);
    let fake = model.generate(&mut tape, &bind, xv, s)?;
    Ok(tape.value(fake).to_owned())
}

/// Discriminator objective:
/// mean softplus(-D_y(x)) + mean softplus(D_z(x_fake)) + R1 on real images.
/// Returns (adv_d, r1, gradients for the discriminator parameters).
pub fn d_loss<F: Scalar>(
    model: &GrapeModel,
    ps: &ParamSet<F>,
    x: &ArrayD<F>,
    y: &[usize],
    x_fake: &ArrayD<F>,
    z: &[usize],
    r1_gamma: f64,
) -> Result<(f64, f64, Grads<F>)> {
    let n = x.shape()[0];
    assert_eq!(y.len(), n);
    assert_eq!(z.len(), x_fake.shape()[0]);

    // pass 1: input gradient of the selected real logits
    let (input_grad, r1_value) = if r1_gamma > 0.0 {
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, |_| false);
        let xv = tape.leaf(x.clone(), true);
        let logits = model.discriminate(&mut tape, &bind, xv)?;
        let sel = select_head(&mut tape, logits, y)?;
        let total = tape.sum_all(sel);
        let g = tape.grad(total, &[xv]).pop().unwrap();
        let sum_sq: f64 = g.iter().map(|&v| v.to_f64() * v.to_f64()).sum();
        let r1 = 0.5 * r1_gamma * sum_sq / n as f64;
        (Some(g), r1)
    } else {
        (None, 0.0)
    };

    // pass 2: main graph with the tangent chain seeded by the constant g
    let d_ids = model.params_discriminator();
    let dset = id_set(&d_ids);
    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape, |id| dset.contains(&id.0));
    let xv = tape.constant(x.clone());
    model.check_image_shape(x.shape())?;
    let tangent = input_grad.as_ref().map(|g| tape.constant(g.clone()));
    let (real_logits, tangent_logits) = model.discriminator.forward(&mut tape, &bind, xv, tangent);
    let real_sel = select_head(&mut tape, real_logits, y)?;
    let neg_real = tape.neg(real_sel);
    let sp_real = tape.softplus(neg_real);
    let loss_real = tape.mean_all(sp_real);

    let fv = tape.constant(x_fake.clone());
    let fake_logits = model.discriminate(&mut tape, &bind, fv)?;
    let fake_sel = select_head(&mut tape, fake_logits, z)?;
    let sp_fake = tape.softplus(fake_sel);
    let loss_fake = tape.mean_all(sp_fake);

    let adv = tape.add(loss_real, loss_fake);
    let total = match tangent_logits {
        Some(tl) => {
            let psi = select_head(&mut tape, tl, y)?;
            let psi_mean = tape.mean_all(psi);
            let r1_node = tape.scale(psi_mean, F::from_f64(r1_gamma));
            tape.add(adv, r1_node)
        }
        None => adv,
    };
    let adv_value = tape.scalar_value(adv).to_f64();
    if !adv_value.is_finite() || !r1_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "discriminator loss diverged (adv={adv_value}, r1={r1_value})"
        )));
    }
    let vars = bind.vars_of(&d_ids);
    let grads = tape.grad(total, &vars);
    Ok((adv_value, r1_value, d_ids.into_iter().zip(grads).collect()))
}

/// Generator-side objective with explicit term weights; `g_loss` fixes the
/// adversarial weight at 1.
///
/// adv_g = mean softplus(-D_z(G(x, F(M_z))));
/// cyc   = mean |x - G(G(x, s), E(x))|;
/// sty   = mean |s.detach() - E(G(x, s).detach())|, reaching only E.
pub fn g_loss_weighted<F: Scalar>(
    model: &GrapeModel,
    ps: &ParamSet<F>,
    x: &ArrayD<F>,
    z: &[usize],
    lambda_adv: f64,
    lambda_cyc: f64,
    lambda_sty: f64,
) -> Result<(f64, f64, f64, Grads<F>)> {
    let gen_ids = model.params_generator_side();
    let gset = id_set(&gen_ids);
    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape, |id| gset.contains(&id.0));
    let xv = tape.constant(x.clone());

    let s = model.style_for_targets(&mut tape, &bind, z);
    let fake = model.generate(&mut tape, &bind, xv, s)?;

    let fake_logits = model.discriminate(&mut tape, &bind, fake)?;
    let sel = select_head(&mut tape, fake_logits, z)?;
    let neg_sel = tape.neg(sel);
    let sp = tape.softplus(neg_sel);
    let adv_node = tape.mean_all(sp);

    let s_hat = model.encode_style(&mut tape, &bind, xv)?;
    let rec = model.generate(&mut tape, &bind, fake, s_hat)?;
    let cyc_node = tape.l1_loss(xv, rec);

    let s_det = tape.value(s).to_owned();
    let fake_det = tape.value(fake).to_owned();
    let s_det = tape.constant(s_det);
    let fake_det = tape.constant(fake_det);
    let e_fake = model.encode_style(&mut tape, &bind, fake_det)?;
    let sty_node = tape.l1_loss(s_det, e_fake);

    let adv_value = tape.scalar_value(adv_node).to_f64();
    let cyc_value = tape.scalar_value(cyc_node).to_f64();
    let sty_value = tape.scalar_value(sty_node).to_f64();
    if ![adv_value, cyc_value, sty_value].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "generator loss diverged (adv={adv_value}, cyc={cyc_value}, sty={sty_value})"
        )));
    }

    let mut terms = Vec::new();
    for (node, w) in [(adv_node, lambda_adv), (cyc_node, lambda_cyc), (sty_node, lambda_sty)] {
        if w != 0.0 {
            terms.push(tape.scale(node, F::from_f64(w)));
        }
    }
    let total = match terms.len() {
        0 => tape.scalar_constant(F::zero()),
        _ => {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = tape.add(acc, *t);
            }
            acc
        }
    };
    let vars = bind.vars_of(&gen_ids);
    let grads = tape.grad(total, &vars);
    Ok((adv_value, cyc_value, sty_value, gen_ids.into_iter().zip(grads).collect()))
}

/// Standard generator-side loss: adv + lambda_cyc * cyc + lambda_sty * sty.
pub fn g_loss<F: Scalar>(
    model: &GrapeModel,
    ps: &ParamSet<F>,
    x: &ArrayD<F>,
    z: &[usize],
    lambda_cyc: f64,
    lambda_sty: f64,
) -> Result<(f64, f64, f64, Grads<F>)> {
    g_loss_weighted(model, ps, x, z, 1.0, lambda_cyc, lambda_sty)
}
