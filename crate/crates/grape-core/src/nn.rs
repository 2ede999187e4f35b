//! Parameter storage and basic layers shared by the networks.
//!
//! Parameters live in a central [`ParamSet`]; layers hold [`ParamId`]s.
//! Each forward pass binds the current parameter values onto a fresh tape
//! (see [`ParamSet::bind`]), so the tape stays immutable while the optimizer
//! mutates the set between steps.

use crate::autodiff::{Scalar, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

pub struct ParamSet<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Place every parameter on the tape. `trainable` controls which leaves
    /// get gradients in this pass.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(ParamId) -> bool) -> Binding {
        let vars = self
            .iter()
            .map(|(id, e)| tape.leaf(e.value.clone(), trainable(id)))
            .collect();
        Binding { vars }
    }

    /// Convert to a different scalar type (f32 model -> f64 audit).
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.mapv(|v| G::from_f64(v.to_f64())),
                })
                .collect(),
        }
    }
}

/// Tape leaves for one bound parameter set, indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars_of(&self, ids: &[ParamId]) -> Vec<Var> {
        ids.iter().map(|id| self.var(*id)).collect()
    }
}

/// He-normal tensor: N(0, sqrt(2 / fan_in)).
pub fn he_normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::from_f64(z * std)
    })
}

pub fn std_normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::from_f64(z)
    })
}

/// Fully connected layer, weight shape [in, out].
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), he_normal(rng, &[fan_in, fan_out], fan_in));
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
        Linear { w, b }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var) -> Var {
        let y = tape.matmul(x, bind.var(self.w));
        tape.add_row(y, bind.var(self.b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// 2-d convolution, stride 1, square kernel.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = ps.add(format!("{name}.w"), he_normal(rng, &[c_out, c_in, k, k], fan_in));
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
        Conv2d { w, b, pad }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var) -> Var {
        tape.conv2d(x, bind.var(self.w), bind.var(self.b), self.pad)
    }

    /// Forward plus tangent chain: the tangent goes through the same weights
    /// with a zero bias, making the tangent output differentiable w.r.t. the
    /// weights.
    pub fn forward_dual<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Binding,
        x: Var,
        tangent: Var,
    ) -> (Var, Var) {
        let y = self.forward(tape, bind, x);
        let c_out = tape.value(bind.var(self.b)).len();
        let zb = tape.constant(ArrayD::zeros(IxDyn(&[c_out])));
        let ty = tape.conv2d(tangent, bind.var(self.w), zb, self.pad);
        (y, ty)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Leaky ReLU applied to a (primal, tangent) pair; the tangent is multiplied
/// by the primal's activation mask held constant.
pub fn leaky_relu_dual<F: Scalar>(
    tape: &mut Tape<F>,
    alpha: F,
    x: Var,
    tangent: Var,
) -> (Var, Var) {
    let mask = tape
        .value(x)
        .mapv(|v| if v > F::zero() { F::one() } else { alpha });
    let y = tape.leaky_relu(x, alpha);
    let ty = tape.mul_mask(tangent, mask);
    (y, ty)
}
