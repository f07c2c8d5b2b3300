//! One-hidden-layer MLPs emitting a log-odds, plus the closed-form first and
//! second-order derivatives the trainers need.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Bindings, Expr, Nonlinearity, Shape, Tensor, Variable};
use crate::error::{Error, Result};
use crate::rng;
use crate::textfmt;

/// Log-odds `ln p(y=1|x) / p(y=0|x)`.
pub type LogOdds = f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    /// Linear hidden layer; makes the network a linear model. Used in tests.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => diffcore::softplus(z),
            Activation::Identity => z,
        }
    }

    /// First derivative. Relu uses 0 at the kink.
    #[inline]
    pub fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => diffcore::sigmoid(z),
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative (zero almost everywhere for relu).
    #[inline]
    pub fn curvature(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => {
                let s = diffcore::sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Parameters of `f(x) = w2 · a(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    /// Hidden × input.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub activation: Activation,
}

/// Gradient of a scalar loss with respect to an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl MlpGrad {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrad {
            w1: Array2::zeros(p.w1.raw_dim()),
            b1: Array1::zeros(p.b1.len()),
            w2: Array1::zeros(p.w2.len()),
            b2: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.b2.is_finite()
            && self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        self.w1 *= k;
        self.b1 *= k;
        self.w2 *= k;
        self.b2 *= k;
    }

    /// Flat views in the canonical order W1, b1, w2, b2.
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.b2),
        ]
    }
}

/// Intermediate values of a batched forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Pre-activations, n × H.
    pub z: Array2<f64>,
    /// Post-activation hidden values after dropout, n × H.
    pub hidden: Array2<f64>,
    /// a'(z), n × H.
    pub slope: Array2<f64>,
    /// Effective per-example output weights times a'(z), n × H.
    pub v: Array2<f64>,
    /// Per-example dropout multipliers (already scaled by 1/keep), n × H.
    pub mask: Option<Array2<f64>>,
    pub logits: Array1<f64>,
    /// Input gradients ∇ₓf, n × D.
    pub input_grads: Array2<f64>,
}

impl MlpParams {
    /// He-style initialization: W1 ~ N(0, 2/D), w2 ~ N(0, 2/H), zero biases.
    pub fn init(input_dim: usize, hidden: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut r = rng::substream(seed, rng::INIT_BASE);
        Self::init_with_rng(input_dim, hidden, activation, &mut r)
    }

    pub fn init_with_rng<R: Rng>(input_dim: usize, hidden: usize, activation: Activation, r: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config(format!("network dimensions must be positive (D={input_dim}, H={hidden})")));
        }
        let n1 = Normal::new(0.0, (2.0 / input_dim as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).expect("positive std");
        let w1 = Array2::from_shape_simple_fn((hidden, input_dim), || n1.sample(r));
        let w2 = Array1::from_shape_simple_fn(hidden, || n2.sample(r));
        Ok(MlpParams { w1, b1: Array1::zeros(hidden), w2, b2: 0.0, activation })
    }

    pub fn zeros(input_dim: usize, hidden: usize, activation: Activation) -> Self {
        MlpParams {
            w1: Array2::zeros((hidden, input_dim)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: 0.0,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = self.w1.dim();
        if h == 0 || d == 0 || self.b1.len() != h || self.w2.len() != h {
            return Err(Error::Shape(format!(
                "inconsistent MLP shapes: W1 {h}x{d}, b1 {}, w2 {}",
                self.b1.len(),
                self.w2.len()
            )));
        }
        let finite = self.b2.is_finite()
            && self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("non-finite MLP parameter".into()));
        }
        Ok(())
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Shape(format!("expected input of length {}, got {len}", self.input_dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<LogOdds> {
        self.check_input(x.len())?;
        let z = self.w1.dot(&x) + &self.b1;
        Ok(z.iter().zip(&self.w2).map(|(&z, &w)| w * self.activation.apply(z)).sum::<f64>() + self.b2)
    }

    /// ∇ₓf(x) = W1ᵀ (w2 ⊙ a'(W1x + b1)).
    pub fn input_gradient(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        let z = self.w1.dot(&x) + &self.b1;
        let v: Array1<f64> = z.iter().zip(&self.w2).map(|(&z, &w)| w * self.activation.slope(z)).collect();
        Ok(self.w1.t().dot(&v))
    }

    pub fn predict_proba(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(diffcore::sigmoid(self.forward(x)?))
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_input(x.ncols())?;
        let mut z = x.dot(&self.w1.t());
        z += &self.b1;
        let act = self.activation;
        z.mapv_inplace(|v| act.apply(v));
        Ok(z.dot(&self.w2) + self.b2)
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_batch(x)?.mapv(diffcore::sigmoid))
    }

    /// Input gradients for every row of `x` (n × D).
    pub fn input_gradient_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_cache(x, None).input_grads)
    }

    /// Batched forward pass that keeps what [`MlpParams::backward`] needs.
    ///
    /// `mask` holds per-example dropout multipliers on the hidden layer; the
    /// input gradients are those of the masked network.
    pub fn forward_cache(&self, x: ArrayView2<f64>, mask: Option<&Array2<f64>>) -> ForwardCache {
        let act = self.activation;
        let mut z = x.dot(&self.w1.t());
        z += &self.b1;
        let mut hidden = z.mapv(|v| act.apply(v));
        let slope = z.mapv(|v| act.slope(v));
        let mut v = &slope * &self.w2;
        if let Some(m) = mask {
            hidden *= m;
            v *= m;
        }
        let logits = hidden.dot(&self.w2) + self.b2;
        let input_grads = v.dot(&self.w1);
        ForwardCache { z, hidden, slope, v, mask: mask.cloned(), logits, input_grads }
    }

    /// Accumulate into `grad` the parameter gradient of a loss whose
    /// sensitivities are `d_logits` (∂L/∂f per row) and, optionally,
    /// `d_input_grads` (∂L/∂∇ₓf per row, n × D).
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &ForwardCache,
        d_logits: ArrayView1<f64>,
        d_input_grads: Option<ArrayView2<f64>>,
        grad: &mut MlpGrad,
    ) {
        let act = self.activation;
        grad.b2 += d_logits.sum();
        grad.w2 += &cache.hidden.t().dot(&d_logits);

        // dL/dz from the logit path: d_logit * w2 * mask * a'(z)
        let mut dz = Array2::zeros(cache.z.raw_dim());
        Zip::from(dz.rows_mut())
            .and(&d_logits)
            .for_each(|mut row, &dl| row.assign(&(&self.w2 * dl)));
        if let Some(m) = &cache.mask {
            dz *= m;
        }
        dz *= &cache.slope;

        if let Some(dg) = d_input_grads {
            // G = V W1, V = a'(z) ⊙ w2 ⊙ mask
            grad.w1 += &cache.v.t().dot(&dg);
            let mut dv = dg.dot(&self.w1.t());
            if let Some(m) = &cache.mask {
                dv *= m;
            }
            grad.w2 += &(&dv * &cache.slope).sum_axis(Axis(0));
            if act != Activation::Relu && act != Activation::Identity {
                let mut ds = dv;
                ds *= &self.w2;
                Zip::from(&mut ds).and(&cache.z).for_each(|d, &z| *d *= act.curvature(z));
                dz += &ds;
            }
        }

        grad.w1 += &dz.t().dot(&x);
        grad.b1 += &dz.sum_axis(Axis(0));
    }

    /// Mutable flat views in the order W1, b1, w2, b2.
    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.b2),
        ]
    }

    /// Squared L2 norm of the weight matrices (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.w1.iter().map(|v| v * v).sum::<f64>() + self.w2.iter().map(|v| v * v).sum::<f64>()
    }

    // --- graph representation -------------------------------------------

    /// Parameter variables `{prefix}.W1`, `.b1`, `.w2`, `.b2`.
    pub fn variables(&self, prefix: &str) -> Vec<Variable> {
        let (h, d) = self.w1.dim();
        vec![
            Variable::param(format!("{prefix}.W1"), Shape::Matrix(h, d)),
            Variable::param(format!("{prefix}.b1"), Shape::Vector(h)),
            Variable::param(format!("{prefix}.w2"), Shape::Vector(h)),
            Variable::param(format!("{prefix}.b2"), Shape::Scalar),
        ]
    }

    pub fn bind(&self, prefix: &str, b: &mut Bindings) {
        let (h, d) = self.w1.dim();
        b.insert(format!("{prefix}.W1"), Tensor::matrix(h, d, self.w1.iter().copied().collect()));
        b.insert(format!("{prefix}.b1"), Tensor::vector(self.b1.to_vec()));
        b.insert(format!("{prefix}.w2"), Tensor::vector(self.w2.to_vec()));
        b.insert(format!("{prefix}.b2"), Tensor::scalar(self.b2));
    }

    /// The logit as a graph over this network's parameter variables and `x`.
    pub fn logit_expr(&self, prefix: &str, x: &Expr) -> Result<Expr> {
        let vars = self.variables(prefix);
        let z = diffcore::add(&diffcore::matvec(&vars[0].expr(), x)?, &vars[1].expr())?;
        let a = match self.activation {
            Activation::Relu => diffcore::nonlin(Nonlinearity::Relu, &z),
            Activation::Softplus => diffcore::nonlin(Nonlinearity::Softplus, &z),
            Activation::Identity => z,
        };
        Ok(diffcore::add(&diffcore::dot(&vars[2].expr(), &a)?, &vars[3].expr())?)
    }

    // --- text serialization --------------------------------------------

    pub fn write_text(&self, prefix: &str, out: &mut String) {
        let (h, d) = self.w1.dim();
        textfmt::write_matrix(out, &format!("{prefix}.W1"), h, d, self.w1.iter().copied());
        textfmt::write_vector(out, &format!("{prefix}.b1"), self.b1.as_slice().expect("standard layout"));
        textfmt::write_vector(out, &format!("{prefix}.w2"), self.w2.as_slice().expect("standard layout"));
        textfmt::write_scalar(out, &format!("{prefix}.b2"), self.b2);
    }

    /// Rebuild from the four tensor lines written by [`MlpParams::write_text`].
    pub fn from_tensor_lines(prefix: &str, lines: &[textfmt::TensorLine], activation: Activation) -> Result<Self> {
        let find = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            lines
                .iter()
                .find(|l| l.name == name)
                .ok_or_else(|| Error::Data(format!("missing tensor `{name}`")))
        };
        let w1 = find("W1")?;
        let cols = w1.cols.ok_or_else(|| Error::Data(format!("`{prefix}.W1` must be a matrix")))?;
        let p = MlpParams {
            w1: Array2::from_shape_vec((w1.rows, cols), w1.values.clone()).map_err(|e| Error::Shape(e.to_string()))?,
            b1: Array1::from(find("b1")?.values.clone()),
            w2: Array1::from(find("w2")?.values.clone()),
            b2: find("b2")?.values[0],
            activation,
        };
        p.validate()?;
        Ok(p)
    }

    /// Standalone text form: an `activation` line followed by the tensors.
    pub fn to_text(&self) -> String {
        let mut out = format!("activation {}\n", self.activation);
        self.write_text("mlp", &mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut activation = None;
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("activation ") {
                activation = Some(rest.trim().parse()?);
            } else {
                lines.push(textfmt::parse_line(line, i + 1)?);
            }
        }
        let activation = activation.ok_or_else(|| Error::Data("missing activation line".into()))?;
        Self::from_tensor_lines("mlp", &lines, activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradient, differentiate, evaluate};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, d: usize, h: usize, act: Activation) -> MlpParams {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams::init_with_rng(d, h, act, &mut r).unwrap();
        p.b1.mapv_inplace(|_| r.gen_range(-0.5..0.5));
        p.b2 = r.gen_range(-0.5..0.5);
        p
    }

    fn random_x(seed: u64, d: usize) -> Array1<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        Array1::from_shape_simple_fn(d, || r.gen_range(-2.0..2.0))
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = MlpParams::init(2, 4, Activation::Softplus, 7).unwrap();
        let b = MlpParams::init(2, 4, Activation::Softplus, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.b1.iter().all(|&v| v == 0.0) && a.b2 == 0.0);
        assert!(MlpParams::init(0, 4, Activation::Relu, 1).is_err());
        assert!(MlpParams::init(3, 0, Activation::Relu, 1).is_err());
    }

    #[test]
    fn init_variance_is_he_scaled() {
        let d = 5;
        let p = MlpParams::init(d, 2000, Activation::Relu, 3).unwrap();
        let n = p.w1.len() as f64;
        let mean = p.w1.sum() / n;
        let var = p.w1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / (2.0 / d as f64) - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn forward_edge_cases() {
        let mut p = MlpParams::zeros(3, 4, Activation::Relu);
        p.b2 = 0.3;
        assert_eq!(p.forward(array![1.0, -2.0, 5.0].view()).unwrap(), 0.3);

        let mut q = random_net(1, 2, 8, Activation::Relu);
        q.w1.mapv_inplace(f64::abs);
        q.b1.fill(0.0);
        // All pre-activations negative -> only the output bias survives.
        assert_eq!(q.forward(array![-3.0, -4.0].view()).unwrap(), q.b2);

        assert!(matches!(p.forward(array![1.0].view()), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_variant_has_constant_input_gradient() {
        let p = random_net(5, 3, 6, Activation::Identity);
        let expected = p.w1.t().dot(&p.w2);
        for s in 0..5 {
            let g = p.input_gradient(random_x(s, 3).view()).unwrap();
            for (a, b) in g.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mut z = p.clone();
        z.w2.fill(0.0);
        assert!(z.input_gradient(random_x(0, 3).view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let h = 1e-5;
        for s in 0..50 {
            let p = random_net(s, 4, 16, Activation::Softplus);
            let x = random_x(s, 4);
            let g = p.input_gradient(x.view()).unwrap();
            for k in 0..4 {
                let mut up = x.clone();
                up[k] += h;
                let mut dn = x.clone();
                dn[k] -= h;
                let fd = (p.forward(up.view()).unwrap() - p.forward(dn.view()).unwrap()) / (2.0 * h);
                assert!((fd - g[k]).abs() / g[k].abs().max(1.0) < 1e-4, "seed {s}");
            }
        }
    }

    #[test]
    fn softplus_input_gradient_is_continuous() {
        let p = random_net(11, 3, 32, Activation::Softplus);
        let x = random_x(2, 3);
        let g0 = p.input_gradient(x.view()).unwrap();
        let g1 = p.input_gradient((&x + 1e-6).view()).unwrap();
        let diff = (&g0 - &g1).mapv(|v| v * v).sum().sqrt();
        let norm = g0.mapv(|v| v * v).sum().sqrt();
        assert!(diff / norm < 1e-3);
    }

    #[test]
    fn probabilities() {
        let mut p = MlpParams::zeros(1, 1, Activation::Relu);
        assert_eq!(p.predict_proba(array![0.0].view()).unwrap(), 0.5);
        p.b2 = 1e3;
        assert!((p.predict_proba(array![0.0].view()).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn probability_is_monotone_in_logit(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let mut p = MlpParams::zeros(1, 1, Activation::Relu);
            p.b2 = a;
            let pa = p.predict_proba(array![0.0].view()).unwrap();
            p.b2 = b;
            let pb = p.predict_proba(array![0.0].view()).unwrap();
            prop_assert!((0.0..=1.0).contains(&pa));
            if a < b { prop_assert!(pa <= pb); }
        }

        #[test]
        fn text_round_trip_is_bit_exact(seed in 0u64..1000, d in 1usize..5, h in 1usize..9) {
            let p = random_net(seed, d, h, Activation::Softplus);
            let q = MlpParams::from_text(&p.to_text()).unwrap();
            prop_assert_eq!(p.w1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            q.w1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn graph_form_agrees_with_direct_evaluation() {
        for s in 0..20 {
            let p = random_net(s, 3, 10, Activation::Softplus);
            let x = random_x(s, 3);
            let xv = Variable::input("x", Shape::Vector(3));
            let logit = p.logit_expr("m", &xv.expr()).unwrap();
            let mut b = Bindings::new();
            p.bind("m", &mut b);
            b.insert("x", Tensor::vector(x.to_vec()));
            let f = evaluate(&logit, &b).unwrap().item();
            assert!((f - p.forward(x.view()).unwrap()).abs() < 1e-12);
            let g = differentiate(&logit, &[xv]).unwrap().remove(0);
            let g = evaluate(&g, &b).unwrap();
            let direct = p.input_gradient(x.view()).unwrap();
            for (a, b) in g.data().iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_parameter_gradient_passes_check() {
        for s in 0..10 {
            let p = random_net(s, 3, 8, Activation::Softplus);
            let x = random_x(s, 3);
            let logit = p.logit_expr("m", &diffcore::constant(Tensor::vector(x.to_vec()))).unwrap();
            let mut b = Bindings::new();
            p.bind("m", &mut b);
            let err = check_gradient(&logit, &b, &p.variables("m"), 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn batch_paths_agree_with_pointwise() {
        let p = random_net(4, 3, 12, Activation::Relu);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.5) * 0.7 + j as f64 * 0.3);
        let logits = p.forward_batch(x.view()).unwrap();
        let grads = p.input_gradient_batch(x.view()).unwrap();
        for i in 0..6 {
            assert!((logits[i] - p.forward(x.row(i)).unwrap()).abs() < 1e-12);
            let g = p.input_gradient(x.row(i)).unwrap();
            for k in 0..3 {
                assert!((grads[[i, k]] - g[k]).abs() < 1e-12);
            }
        }
    }
}
