//! Dense feed-forward networks with hand-derived forward and backward passes.
//!
//! Every layer computes `z = a W + b` followed by an element-wise activation,
//! where `a` is an `n x in` block of samples and `W` is stored `in x out`.
//! Hidden layers use ReLU; the output layer is either identity (discriminator
//! logits) or tanh (bounded generator output).
//!
//! `backward` returns the gradient of `sum_i <coeffs_i, output_i>` with respect
//! to all parameters, i.e. the SUM over the batch of per-sample contributions.
//! Cost semantics (and any 1/N factor) live with the caller.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Identity => {}
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` in place by the activation derivative. `pre` is the
    /// pre-activation, `post` the activation output. ReLU'(0) = 0.
    fn chain(self, grad: &mut Array2<f64>, pre: &Array2<f64>, post: &Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(pre).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Identity => {}
            Activation::Tanh => Zip::from(grad).and(post).for_each(|g, &y| *g *= 1.0 - y * y),
        }
    }
}

/// A batch of samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Empty("batch has no samples"));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch inputs".into()));
        }
        Ok(Self { inputs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("Batch::from_rows", format!("rows of width {d}"), "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let inputs = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| Error::shape("Batch::from_rows", format!("{n}x{d}"), e))?;
        Self::new(inputs)
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn into_inputs(self) -> Array2<f64> {
        self.inputs
    }

    /// Single-sample batch holding row `i`.
    pub fn row(&self, i: usize) -> Batch {
        Batch {
            inputs: self.inputs.slice(ndarray::s![i..i + 1, ..]).to_owned(),
        }
    }

    /// Batch made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        Ok(Batch {
            inputs: self.inputs.select(Axis(0), rows),
        })
    }
}

/// Activations cached by `forward`, sufficient for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("a cache always holds at least one layer")
    }

    pub fn n(&self) -> usize {
        self.input.nrows()
    }

    /// Smallest `|z|` over hidden-layer pre-activations: the distance to the
    /// nearest ReLU kink. Finite differences are only meaningful when the
    /// probe step stays well below it.
    pub fn min_hidden_margin(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    norm: f64,
}

impl ParamGradient {
    fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Self {
        let sq: f64 = weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>())
            .chain(biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()))
            .sum();
        Self {
            weights,
            biases,
            norm: sq.sqrt(),
        }
    }

    pub fn zeros_like(net: &DenseNet) -> Self {
        Self::from_parts(
            net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        )
    }

    /// Rebuilds a gradient with the shapes of `net` from a flat vector laid
    /// out as in [`ParamGradient::to_flat`].
    pub fn from_flat(net: &DenseNet, flat: &[f64]) -> Result<Self> {
        if flat.len() != net.n_params() {
            return Err(Error::shape("ParamGradient::from_flat", net.n_params(), flat.len()));
        }
        let mut weights = Vec::with_capacity(net.weights.len());
        let mut biases = Vec::with_capacity(net.biases.len());
        let mut offset = 0;
        for (w, b) in net.weights.iter().zip(&net.biases) {
            let wn = w.len();
            weights.push(
                Array2::from_shape_vec(w.raw_dim(), flat[offset..offset + wn].to_vec())
                    .expect("length checked"),
            );
            offset += wn;
            biases.push(Array1::from(flat[offset..offset + b.len()].to_vec()));
            offset += b.len();
        }
        Ok(Self::from_parts(weights, biases))
    }

    /// Flat Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Layer-major flattening: for each layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_parts(
            self.weights.iter().map(|w| w * factor).collect(),
            self.biases.iter().map(|b| b * factor).collect(),
        )
    }

    pub fn add(&self, other: &ParamGradient) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self::from_parts(
            self.weights.iter().zip(&other.weights).map(|(a, b)| a + b).collect(),
            self.biases.iter().zip(&other.biases).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn dot(&self, other: &ParamGradient) -> Result<f64> {
        self.check_compatible(other)?;
        let w: f64 = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a * b).sum())
            .sum();
        let b: f64 = self
            .biases
            .iter()
            .zip(&other.biases)
            .map(|(a, b)| (a * b).sum())
            .sum();
        Ok(w + b)
    }

    pub fn is_finite(&self) -> bool {
        self.norm.is_finite()
    }

    fn check_compatible(&self, other: &ParamGradient) -> Result<()> {
        let same = self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.dim() == b.dim())
            && self.biases.iter().zip(&other.biases).all(|(a, b)| a.dim() == b.dim());
        if same {
            Ok(())
        } else {
            Err(Error::shape("ParamGradient", "matching layer shapes", "different layer shapes"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Flat JSON layout for network snapshots. `weights[l]` is the row-major
/// `layer_dims[l] x layer_dims[l+1]` matrix of layer `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output dim, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!("layer dims must be positive, got {layer_dims:?}")));
    }
    Ok(())
}

impl DenseNet {
    /// Uniform init on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, zero biases.
    pub fn init(layer_dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(layer_dims, hidden, output, &mut rng)
    }

    pub fn init_with_rng<R: rand::Rng + ?Sized>(
        layer_dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation: hidden,
            output_activation: output,
        })
    }

    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config("need one bias vector per weight matrix".into()));
        }
        let mut layer_dims = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *layer_dims.last().unwrap() {
                return Err(Error::shape("DenseNet::from_parts", layer_dims[l], w.nrows()));
            }
            if b.len() != w.ncols() {
                return Err(Error::shape("DenseNet::from_parts bias", w.ncols(), b.len()));
            }
            layer_dims.push(w.ncols());
        }
        validate_dims(&layer_dims)?;
        Ok(Self {
            layer_dims,
            weights,
            biases,
            hidden_activation: hidden,
            output_activation: output,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    /// Sum over layers of `in * out + out`.
    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape("DenseNet::forward input width", self.input_dim(), inputs.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardCache> {
        self.forward_view(batch.inputs.view())
    }

    pub(crate) fn forward_view(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&inputs)?;
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let z = if l == 0 {
                inputs.dot(&self.weights[l]) + &self.biases[l]
            } else {
                post[l - 1].dot(&self.weights[l]) + &self.biases[l]
            };
            let mut y = z.clone();
            self.activation_of(l).apply(&mut y);
            pre.push(z);
            post.push(y);
        }
        Ok(ForwardCache {
            input: inputs.to_owned(),
            pre,
            post,
        })
    }

    /// Forward pass without keeping intermediate activations.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&inputs)?;
        let mut a = inputs.to_owned();
        for l in 0..self.n_layers() {
            let mut z = a.dot(&self.weights[l]) + &self.biases[l];
            self.activation_of(l).apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    fn check_cache(&self, cache: &ForwardCache, coeffs: &ArrayView2<f64>) -> Result<()> {
        if cache.pre.len() != self.n_layers()
            || cache.input.ncols() != self.input_dim()
            || cache.pre.iter().zip(&self.layer_dims[1..]).any(|(z, &d)| z.ncols() != d)
        {
            return Err(Error::CacheMismatch("cache was produced by a network of another shape".into()));
        }
        if coeffs.dim() != (cache.n(), self.output_dim()) {
            return Err(Error::CacheMismatch(format!(
                "coefficients {:?} vs cached outputs {:?}",
                coeffs.dim(),
                (cache.n(), self.output_dim())
            )));
        }
        Ok(())
    }

    /// Gradient of `sum_i <coeffs_i, output_i>` with respect to the parameters.
    pub fn backward(&self, cache: &ForwardCache, coeffs: ArrayView2<f64>) -> Result<ParamGradient> {
        self.backward_impl(cache, coeffs, false).map(|(g, _)| g)
    }

    /// Like [`DenseNet::backward`], also returning the gradient with respect to
    /// the inputs (`n x input_dim`).
    pub fn backward_with_input_grad(
        &self,
        cache: &ForwardCache,
        coeffs: ArrayView2<f64>,
    ) -> Result<(ParamGradient, Array2<f64>)> {
        self.backward_impl(cache, coeffs, true)
            .map(|(g, x)| (g, x.expect("input grad requested")))
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        coeffs: ArrayView2<f64>,
        want_input_grad: bool,
    ) -> Result<(ParamGradient, Option<Array2<f64>>)> {
        self.check_cache(cache, &coeffs)?;
        let n_layers = self.n_layers();
        let mut grad_w = vec![Array2::zeros((0, 0)); n_layers];
        let mut grad_b = vec![Array1::zeros(0); n_layers];

        let mut delta = coeffs.to_owned();
        let last = n_layers - 1;
        self.output_activation.chain(&mut delta, &cache.pre[last], &cache.post[last]);

        let mut input_grad = None;
        for l in (0..n_layers).rev() {
            let a_prev = if l == 0 { cache.input.view() } else { cache.post[l - 1].view() };
            grad_w[l] = a_prev.t().dot(&delta);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&self.weights[l].t());
                self.hidden_activation.chain(&mut next, &cache.pre[l - 1], &cache.post[l - 1]);
                delta = next;
            } else if want_input_grad {
                input_grad = Some(delta.dot(&self.weights[0].t()));
            }
        }
        Ok((ParamGradient::from_parts(grad_w, grad_b), input_grad))
    }

    /// Layer-major flattening matching [`ParamGradient::to_flat`].
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        self.update_flat(flat, |p, v| *p = v)
    }

    /// Adds `delta` (laid out as [`DenseNet::flat_params`]) to the parameters.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        self.update_flat(delta, |p, v| *p += v)
    }

    /// Multiplies the weights (not the biases) of the last layer by `factor`.
    pub fn scale_output_weights(&mut self, factor: f64) {
        if let Some(w) = self.weights.last_mut() {
            w.mapv_inplace(|v| v * factor);
        }
    }

    fn update_flat(&mut self, flat: &[f64], mut f: impl FnMut(&mut f64, f64)) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape("DenseNet flat parameters", self.n_params(), flat.len()));
        }
        let mut values = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for p in w.iter_mut().chain(b.iter_mut()) {
                f(p, values.next().unwrap());
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> NetSnapshot {
        NetSnapshot {
            layer_dims: self.layer_dims.clone(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }

    pub fn from_snapshot(snap: &NetSnapshot) -> Result<Self> {
        validate_dims(&snap.layer_dims)?;
        let n_layers = snap.layer_dims.len() - 1;
        if snap.weights.len() != n_layers || snap.biases.len() != n_layers {
            return Err(Error::shape("NetSnapshot layers", n_layers, snap.weights.len()));
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for (l, pair) in snap.layer_dims.windows(2).enumerate() {
            let w = Array2::from_shape_vec((pair[0], pair[1]), snap.weights[l].clone())
                .map_err(|_| Error::shape("NetSnapshot weights", pair[0] * pair[1], snap.weights[l].len()))?;
            if snap.biases[l].len() != pair[1] {
                return Err(Error::shape("NetSnapshot biases", pair[1], snap.biases[l].len()));
            }
            weights.push(w);
            biases.push(Array1::from(snap.biases[l].clone()));
        }
        Self::from_parts(weights, biases, snap.hidden_activation, snap.output_activation)
    }
}

/// Central-difference gradient of an arbitrary scalar function of the
/// network parameters.
pub fn finite_diff_params(net: &DenseNet, h: f64, mut cost: impl FnMut(&DenseNet) -> f64) -> Result<ParamGradient> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let base = net.flat_params();
    let mut probe = net.clone();
    let mut params = base.clone();
    let mut grad = vec![0.0; base.len()];
    for k in 0..base.len() {
        params[k] = base[k] + h;
        probe.set_flat_params(&params)?;
        let plus = cost(&probe);
        params[k] = base[k] - h;
        probe.set_flat_params(&params)?;
        let minus = cost(&probe);
        params[k] = base[k];
        grad[k] = (plus - minus) / (2.0 * h);
    }
    ParamGradient::from_flat(net, &grad)
}

/// Central differences of `cost(outputs)` where outputs = `net(batch)`.
pub fn finite_diff_grad(
    net: &DenseNet,
    batch: &Batch,
    cost: impl Fn(&Array2<f64>) -> f64,
    h: f64,
) -> Result<ParamGradient> {
    if batch.dim() != net.input_dim() {
        return Err(Error::shape("finite_diff_grad input width", net.input_dim(), batch.dim()));
    }
    finite_diff_params(net, h, |probe| {
        let out = probe.predict(batch.inputs.view()).expect("width checked");
        cost(&out)
    })
}

/// Cached forward pass of `D(G(z))`.
#[derive(Debug, Clone)]
pub struct ChainedForward {
    pub generator: ForwardCache,
    pub discriminator: ForwardCache,
}

impl ChainedForward {
    /// Generated samples `G(z)`.
    pub fn samples(&self) -> &Array2<f64> {
        self.generator.output()
    }

    /// Discriminator outputs on the generated samples.
    pub fn outputs(&self) -> &Array2<f64> {
        self.discriminator.output()
    }

    /// First discriminator output column (the logit for a scalar D).
    pub fn logits(&self) -> Vec<f64> {
        self.outputs().column(0).to_vec()
    }
}

pub fn chain_forward(g_net: &DenseNet, d_net: &DenseNet, noise: &Batch) -> Result<ChainedForward> {
    if g_net.output_dim() != d_net.input_dim() {
        return Err(Error::shape("G output vs D input", d_net.input_dim(), g_net.output_dim()));
    }
    let generator = g_net.forward(noise)?;
    let discriminator = d_net.forward_view(generator.output().view())?;
    Ok(ChainedForward { generator, discriminator })
}

/// Gradient with respect to G's parameters of `sum_i <coeffs_i, D(G(z_i))>`,
/// holding D fixed.
pub fn chain_generator_discriminator(
    g_net: &DenseNet,
    d_net: &DenseNet,
    chained: &ChainedForward,
    d_output_coeffs: ArrayView2<f64>,
) -> Result<ParamGradient> {
    if g_net.output_dim() != d_net.input_dim() {
        return Err(Error::shape("G output vs D input", d_net.input_dim(), g_net.output_dim()));
    }
    let (_, sample_grad) = d_net.backward_with_input_grad(&chained.discriminator, d_output_coeffs)?;
    g_net.backward(&chained.generator, sample_grad.view())
}
