//! Small classifiers: a ReLU MLP and a Lenet-shaped CNN, both with dropout
//! after every hidden fully-connected layer.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, softmax_in_place, Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Rows per forward pass when running inference over large batches.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Widths of the hidden fully-connected layers.
    pub hidden: Vec<usize>,
    /// Output channels of each conv/pool block (CNN only).
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub dropout: f64,
    pub seed: u64,
}

fn default_conv_channels() -> Vec<usize> {
    vec![6, 16]
}

fn default_kernel() -> usize {
    5
}

impl ModelSpec {
    pub fn mlp(input_shape: [usize; 3], classes: usize, hidden: Vec<usize>, dropout: f64, seed: u64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape,
            classes,
            hidden,
            conv_channels: Vec::new(),
            kernel: default_kernel(),
            dropout,
            seed,
        }
    }

    /// conv5x5x6 -> pool -> conv5x5x16 -> pool -> fc120 -> fc84 -> fc(classes).
    pub fn lenet(input_shape: [usize; 3], classes: usize, dropout: f64, seed: u64) -> Self {
        ModelSpec {
            kind: ModelKind::Cnn,
            input_shape,
            classes,
            hidden: vec![120, 84],
            conv_channels: default_conv_channels(),
            kernel: default_kernel(),
            dropout,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?}", self.input_shape));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.hidden.contains(&0) || self.conv_channels.contains(&0) {
            return bad("zero-width layer".into());
        }
        if self.kind == ModelKind::Cnn {
            if self.kernel == 0 {
                return bad("zero kernel".into());
            }
            let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
            for _ in &self.conv_channels {
                if h < self.kernel + 1 || w < self.kernel + 1 {
                    return bad(format!("input {:?} too small for the conv stack", self.input_shape));
                }
                h = (h - self.kernel + 1) / 2;
                w = (w - self.kernel + 1) / 2;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv { w: usize, b: usize },
    Pool,
    Flatten,
    Dense { w: usize, b: usize },
    Relu,
    Dropout,
    /// Marks the penultimate activations.
    Embedding,
}

/// Vars produced by one forward pass.
pub struct Forward {
    pub logits: Var,
    pub embedding: Var,
    pub params: Vec<Var>,
}

/// A classifier with its parameters.
///
/// Inference (`logits`, `predict_proba`, ...) always runs with dropout
/// disabled and is deterministic. Dropout is only active when a forward pass
/// receives a random stream: during training and in MC-dropout inference.
#[derive(Clone, Debug)]
pub struct Model<E: Element = f32> {
    spec: ModelSpec,
    layers: Vec<Layer>,
    names: Vec<String>,
    params: Vec<Tensor<E>>,
}

impl<E: Element> Model<E> {
    /// He-uniform weights, zero biases, reproducible from `spec.seed`.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut he = |shape: Vec<usize>, fan_in: usize, name: String, names: &mut Vec<String>, params: &mut Vec<Tensor<E>>| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| E::of(rng.random_range(-bound..bound))).collect();
            names.push(name);
            params.push(Tensor::new(shape, data).expect("shape matches"));
            params.len() - 1
        };
        let bias = |len: usize, name: String, names: &mut Vec<String>, params: &mut Vec<Tensor<E>>| {
            names.push(name);
            params.push(Tensor::zeros([len]));
            params.len() - 1
        };

        let [mut ch, mut h, mut w] = spec.input_shape;
        if spec.kind == ModelKind::Cnn {
            for (i, &out) in spec.conv_channels.iter().enumerate() {
                let k = spec.kernel;
                let wi = he(vec![out, ch, k, k], ch * k * k, format!("conv{i}.weight"), &mut names, &mut params);
                let bi = bias(out, format!("conv{i}.bias"), &mut names, &mut params);
                layers.extend([Layer::Conv { w: wi, b: bi }, Layer::Relu, Layer::Pool]);
                ch = out;
                h = (h - k + 1) / 2;
                w = (w - k + 1) / 2;
            }
        }
        layers.push(Layer::Flatten);
        let mut width = ch * h * w;
        if spec.hidden.is_empty() {
            layers.push(Layer::Embedding);
        }
        for (i, &out) in spec.hidden.iter().enumerate() {
            let wi = he(vec![width, out], width, format!("fc{i}.weight"), &mut names, &mut params);
            let bi = bias(out, format!("fc{i}.bias"), &mut names, &mut params);
            layers.extend([Layer::Dense { w: wi, b: bi }, Layer::Relu]);
            if i + 1 == spec.hidden.len() {
                layers.push(Layer::Embedding);
            }
            layers.push(Layer::Dropout);
            width = out;
        }
        let wi = he(vec![width, spec.classes], width, "head.weight".into(), &mut names, &mut params);
        let bi = bias(spec.classes, "head.bias".into(), &mut names, &mut params);
        layers.push(Layer::Dense { w: wi, b: bi });
        Ok(Model { spec, layers, names, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Width of the penultimate representation.
    pub fn embedding_dim(&self) -> usize {
        match self.spec.hidden.last() {
            Some(&d) => d,
            None => self.params[self.head_weight()].shape()[0],
        }
    }

    fn head_weight(&self) -> usize {
        self.params.len() - 2
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        let [c, h, w] = self.spec.input_shape;
        let ok = match x.shape() {
            [_, rest @ ..] if rest == [c, h, w] => true,
            [_, flat] if *flat == c * h * w => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("input {:?} for model input {:?}", x.shape(), self.spec.input_shape)))
        }
    }

    /// Records a forward pass; `x` must be `[n, c, h, w]` or `[n, c*h*w]`.
    ///
    /// Dropout is applied iff `dropout` is `Some`.
    pub fn forward<'g>(
        &'g self,
        g: &mut Graph<'g, E>,
        x: Var,
        track_params: bool,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        self.check_input(g.value(x))?;
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf_ref(p, track_params)).collect();
        let mut h = x;
        if self.spec.kind == ModelKind::Cnn && g.value(x).shape().len() == 2 {
            let mut shape = vec![g.value(x).rows()];
            shape.extend(self.spec.input_shape);
            h = g.reshape(h, &shape)?;
        }
        let mut embedding = None;
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { w, b } => g.conv2d(h, params[w], params[b])?,
                Layer::Pool => g.max_pool2(h)?,
                Layer::Flatten => g.flatten(h)?,
                Layer::Dense { w, b } => {
                    let z = g.matmul(h, params[w])?;
                    g.add_row(z, params[b])?
                }
                Layer::Relu => g.relu(h)?,
                Layer::Dropout => match reborrow(&mut dropout) {
                    Some(rng) if self.spec.dropout > 0.0 => g.dropout(h, self.spec.dropout, rng)?,
                    _ => h,
                },
                Layer::Embedding => {
                    embedding = Some(h);
                    h
                }
            };
        }
        Ok(Forward { logits: h, embedding: embedding.expect("embedding marker present"), params })
    }

    fn infer(&self, x: &Tensor<E>, mut dropout: Option<&mut dyn RngCore>, want: fn(&Forward) -> Var) -> Result<Tensor<E>> {
        self.check_input(x)?;
        let n = x.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let chunk = if start == 0 && end == n { x.clone() } else { x.select_rows(&rows) };
            let mut g = Graph::new();
            let xv = g.leaf(chunk, false);
            let fwd = self.forward(&mut g, xv, false, reborrow(&mut dropout))?;
            parts.push(g.value(want(&fwd)).clone());
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros([0, self.spec.classes]));
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    pub fn logits(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.infer(x, None, |f| f.logits)
    }

    /// Softmax outputs, one probability row per input.
    pub fn predict_proba(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(rows_softmax(self.logits(x)?))
    }

    /// Log-probabilities computed stably from the logits.
    pub fn predict_log_proba(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut logits = self.logits(x)?;
        let c = self.spec.classes;
        for row in logits.data_mut().chunks_mut(c) {
            let lse = crate::diffcore::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        Ok(logits)
    }

    pub fn predict(&self, x: &Tensor<E>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| logits.argmax_row(i)).collect())
    }

    /// `passes` stochastic forward passes with dropout active, stacked into
    /// `[passes, n, classes]`.
    pub fn predict_proba_mc(&self, x: &Tensor<E>, passes: usize, rng: &mut dyn RngCore) -> Result<Tensor<E>> {
        if self.spec.dropout == 0.0 {
            return Err(Error::DropoutDisabled);
        }
        if passes == 0 {
            return Err(Error::InvalidArgument("need at least one MC pass".into()));
        }
        let mut data = Vec::new();
        for _ in 0..passes {
            let logits = self.infer(x, Some(&mut *rng), |f| f.logits)?;
            data.extend(rows_softmax(logits).into_data());
        }
        Tensor::new([passes, x.rows(), self.spec.classes], data)
    }

    /// Activations feeding the classification layer.
    pub fn penultimate_embedding(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.infer(x, None, |f| f.embedding)
    }

    /// Mean cross-entropy and its gradient with respect to the input batch.
    pub fn input_gradient(&self, x: &Tensor<E>, labels: &[usize]) -> Result<(f64, Tensor<E>)> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let fwd = self.forward(&mut g, xv, false, None)?;
        let loss = g.cross_entropy(fwd.logits, labels)?;
        let value = g.value(loss).data()[0].f64();
        g.backward(loss)?;
        let grad = g.grad_or_zeros(xv);
        Ok((value, Tensor::new(x.shape().to_vec(), grad)?))
    }

    /// Logits at a single input and their Jacobian with respect to it.
    ///
    /// The input is replicated once per class so a single backward pass with
    /// an identity seed yields every row of the Jacobian.
    pub fn logit_jacobian(&self, x: &[E]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = self.spec.classes;
        let d = self.spec.input_len();
        if x.len() != d {
            return Err(Error::ShapeMismatch(format!("input of length {} for model input {d}", x.len())));
        }
        let mut data = Vec::with_capacity(c * d);
        for _ in 0..c {
            data.extend_from_slice(x);
        }
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::new([c, d], data)?, true);
        let fwd = self.forward(&mut g, xv, false, None)?;
        let logits: Vec<f64> = g.value(fwd.logits).row(0).iter().map(|v| v.f64()).collect();
        let seed = Tensor::<E>::eye(c).into_data();
        g.backward_with_seed(fwd.logits, &seed)?;
        let grad = g.grad_or_zeros(xv);
        let jac = grad.chunks(d).map(|r| r.iter().map(|v| v.f64()).collect()).collect();
        Ok((logits, jac))
    }

    /// Euclidean norm of the full parameter gradient of the loss at a single
    /// input for a hypothetical label.
    pub fn param_grad_norm(&self, x: &[E], label: usize) -> Result<f64> {
        let d = self.spec.input_len();
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::new([1, d], x.to_vec())?, false);
        let fwd = self.forward(&mut g, xv, true, None)?;
        let loss = g.cross_entropy(fwd.logits, &[label])?;
        g.backward(loss)?;
        let sq: f64 = fwd
            .params
            .iter()
            .filter_map(|&p| g.grad(p))
            .flat_map(|gr| gr.iter().map(|v| v.f64() * v.f64()))
            .sum();
        Ok(sq.sqrt())
    }

    /// Populates parameter gradients with those of the mean cross-entropy on
    /// the batch; returns the loss.
    pub fn accumulate_loss_gradients(
        &mut self,
        x: &Tensor<E>,
        labels: &[usize],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<f64> {
        let (loss, grads) = {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let fwd = self.forward(&mut g, xv, true, dropout)?;
            let loss = g.cross_entropy(fwd.logits, labels)?;
            let value = g.value(loss).data()[0].f64();
            g.backward(loss)?;
            let grads: Vec<Vec<E>> = fwd.params.iter().map(|&p| g.grad_or_zeros(p)).collect();
            (value, grads)
        };
        for (p, gr) in self.params.iter_mut().zip(grads) {
            p.set_grad(gr)?;
        }
        Ok(loss)
    }

    /// Overwrites parameter values (shapes must match).
    pub fn load_params(&mut self, values: &[Tensor<E>]) -> Result<()> {
        if values.len() != self.params.len() || values.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::ShapeMismatch("parameter set does not fit the model".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.data_mut().copy_from_slice(v.data());
            p.clear_grad();
        }
        Ok(())
    }

    /// Writes the parameters plus the spec to a checkpoint manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, &Tensor<E>)> = self.names.iter().cloned().zip(&self.params).collect();
        checkpoint::save(path, &tensors, Some(serde_json::to_value(&self.spec)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load::<E>(path)?;
        let meta = manifest.meta.ok_or_else(|| Error::InvalidSpec("checkpoint carries no model spec".into()))?;
        let spec: ModelSpec = serde_json::from_value(meta)?;
        let mut model = Model::build(spec)?;
        for ((name, _), (found, _)) in model.named_params().zip(&tensors) {
            if name != found {
                return Err(Error::InvalidSpec(format!("checkpoint tensor `{found}` where `{name}` was expected")));
            }
        }
        let values: Vec<Tensor<E>> = tensors.into_iter().map(|(_, t)| t).collect();
        model.load_params(&values)?;
        Ok(model)
    }
}

fn reborrow<'s>(rng: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn rows_softmax<E: Element>(mut t: Tensor<E>) -> Tensor<E> {
    let c = *t.shape().last().expect("batched logits");
    for row in t.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;

    fn random_batch<E: Element>(n: usize, shape: [usize; 3], seed: u64) -> Tensor<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![n];
        dims.extend(shape);
        let len = n * shape.iter().product::<usize>();
        Tensor::new(dims, (0..len).map(|_| E::of(rng.random::<f64>())).collect()).unwrap()
    }

    fn small_mlp(dropout: f64) -> ModelSpec {
        ModelSpec::mlp([1, 4, 4], 3, vec![8, 6], dropout, 11)
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(small_mlp(0.1)).unwrap();
        let b = Model::<f32>::build(small_mlp(0.1)).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn mnist_mlp_parameter_count() {
        let spec = ModelSpec::mlp([1, 28, 28], 10, vec![256, 128], 0.1, 0);
        let m = Model::<f32>::build(spec).unwrap();
        assert_eq!(m.param_count(), 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(m.param_count(), 235_146);
        assert_eq!(m.embedding_dim(), 128);
    }

    #[test]
    fn lenet_shapes() {
        let m = Model::<f32>::build(ModelSpec::lenet([1, 28, 28], 10, 0.1, 0)).unwrap();
        let x = random_batch::<f32>(3, [1, 28, 28], 1);
        assert_eq!(m.predict_proba(&x).unwrap().shape(), &[3, 10]);
        assert_eq!(m.penultimate_embedding(&x).unwrap().shape(), &[3, 84]);
        // 16 channels of 4x4 after two conv/pool blocks
        assert_eq!(m.params()[4].shape(), &[256, 120]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small_mlp(0.1);
        spec.classes = 1;
        assert!(matches!(Model::<f32>::build(spec), Err(Error::InvalidSpec(_))));
        let mut spec = small_mlp(0.1);
        spec.dropout = 1.0;
        assert!(Model::<f32>::build(spec).is_err());
        let spec = ModelSpec::lenet([1, 8, 8], 10, 0.0, 0);
        assert!(Model::<f32>::build(spec).is_err());
    }

    #[test]
    fn probabilities_are_rows_and_deterministic() {
        let m = Model::<f64>::build(small_mlp(0.3)).unwrap();
        let x = random_batch::<f64>(20, [1, 4, 4], 2);
        let p = m.predict_proba(&x).unwrap();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(p, m.predict_proba(&x).unwrap());
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let mut m = Model::<f64>::build(small_mlp(0.0)).unwrap();
        let n = m.params().len();
        for p in &mut m.params_mut()[n - 2..] {
            p.data_mut().fill(0.0);
        }
        let p = m.predict_proba(&random_batch(5, [1, 4, 4], 3)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn constant_logit_shift_leaves_probabilities() {
        let mut m = Model::<f64>::build(small_mlp(0.0)).unwrap();
        let x = random_batch(6, [1, 4, 4], 4);
        let before = m.predict_proba(&x).unwrap();
        let n = m.params().len();
        m.params_mut()[n - 1].data_mut().iter_mut().for_each(|b| *b += 3.7);
        let after = m.predict_proba(&x).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-12);
    }

    #[test]
    fn shape_mismatch_on_wrong_input() {
        let m = Model::<f32>::build(small_mlp(0.0)).unwrap();
        let x = Tensor::<f32>::zeros([2, 1, 5, 5]);
        assert!(matches!(m.predict_proba(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mc_dropout_requires_dropout() {
        let m = Model::<f32>::build(small_mlp(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_batch::<f32>(2, [1, 4, 4], 5);
        assert!(matches!(m.predict_proba_mc(&x, 3, &mut rng), Err(Error::DropoutDisabled)));
    }

    #[test]
    fn mc_dropout_passes_vary_but_replay() {
        let m = Model::<f64>::build(small_mlp(0.3)).unwrap();
        let x = random_batch::<f64>(4, [1, 4, 4], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let single = m.predict_proba_mc(&x, 1, &mut rng).unwrap();
        assert_eq!(single.shape(), &[1, 4, 3]);
        let run = |seed| m.predict_proba_mc(&x, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(1);
        assert_eq!(a, run(1));
        let per_pass = 4 * 3;
        let first = &a.data()[..per_pass];
        assert!((1..10).any(|t| a.data()[t * per_pass..(t + 1) * per_pass] != *first));
    }

    #[test]
    fn embedding_composes_with_head() {
        let m = Model::<f64>::build(small_mlp(0.2)).unwrap();
        let x = random_batch::<f64>(5, [1, 4, 4], 7);
        let e = m.penultimate_embedding(&x).unwrap();
        assert_eq!(e.shape(), &[5, 6]);
        let n = m.params().len();
        let (w, b) = (&m.params()[n - 2], &m.params()[n - 1]);
        let p = m.predict_proba(&x).unwrap();
        for i in 0..5 {
            let mut z: Vec<f64> = (0..3)
                .map(|k| b.data()[k] + (0..6).map(|j| e.row(i)[j] * w.data()[j * 3 + k]).sum::<f64>())
                .collect();
            softmax_in_place(&mut z);
            for k in 0..3 {
                assert!((z[k] - p.row(i)[k]).abs() < 1e-12);
            }
        }
        assert_eq!(e, m.penultimate_embedding(&x).unwrap());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for spec in [small_mlp(0.2), ModelSpec::lenet([1, 16, 16], 4, 0.2, 3)] {
            let m: &'static Model<f64> = Box::leak(Box::new(Model::build(spec.clone()).unwrap()));
            let x = random_batch::<f64>(2, spec.input_shape, 8);
            let labels = [1, 2];
            let err = finite_diff_check(
                |g, xv| {
                    let f = m.forward(g, xv, false, None)?;
                    g.cross_entropy(f.logits, &labels)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "{:?}: {err}", spec.kind);
            let (_, grad) = m.input_gradient(&x, &labels).unwrap();
            assert_eq!(grad.shape(), x.shape());
        }
    }

    #[test]
    fn jacobian_rows_are_logit_gradients() {
        let m = Model::<f64>::build(small_mlp(0.0)).unwrap();
        let x = random_batch::<f64>(1, [1, 4, 4], 12);
        let (logits, jac) = m.logit_jacobian(x.data()).unwrap();
        assert_eq!(logits, m.logits(&x).unwrap().data().to_vec());
        let h = 1e-6;
        for k in 0..3 {
            for j in [0, 5, 15] {
                let mut up = x.clone();
                up.data_mut()[j] += h;
                let mut dn = x.clone();
                dn.data_mut()[j] -= h;
                let fd = (m.logits(&up).unwrap().data()[k] - m.logits(&dn).unwrap().data()[k]) / (2.0 * h);
                assert!((fd - jac[k][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = Model::<f32>::build(ModelSpec::lenet([1, 16, 16], 4, 0.1, 5)).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.params(), m.params());
    }
}
