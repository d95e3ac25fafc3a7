//! Feature extractor, domain classifier, and the shared SGD-with-momentum
//! optimizer with a cosine learning-rate schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffkit::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One affine layer. `weight` is (d_in, d_out); `bias` is (d_out,).
#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub relu: bool,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Fan-in uniform init: weights in +-sqrt(6/fan_in), biases in
    /// +-1/sqrt(fan_in). Nonzero biases keep dead-activation inputs away
    /// from exactly-zero feature vectors, which the normalized losses
    /// reject.
    fn init(d_in: usize, d_out: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let weight = Tensor::new(
            vec![d_in, d_out],
            (0..d_in * d_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )
        .expect("init shape is consistent");
        let b_bound = 1.0 / (d_in as f64).sqrt();
        let bias = Tensor::new(
            vec![d_out],
            (0..d_out).map(|_| rng.gen_range(-b_bound..b_bound)).collect(),
        )
        .expect("init shape is consistent");
        Layer { weight, bias, relu }
    }
}

/// Parameters of the feature extractor: a chain of affine layers with
/// rectified-linear activations and a linear output head.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty {
                what: "encoder layer list".to_string(),
            });
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape_mismatch(
                    "encoder layer chain",
                    w[0].weight.shape(),
                    w[1].weight.shape(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Default architecture: hidden rectified-linear layers and a linear head.
    pub fn init(d_in: usize, hidden: &[usize], d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = d_in;
        for &h in hidden {
            layers.push(Layer::init(prev, h, true, rng));
            prev = h;
        }
        layers.push(Layer::init(prev, d_out, false, rng));
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Plain forward pass over a batch (n, d_in) -> (n, d_out).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() || x.cols() != self.in_dim() {
            return Err(Error::shape_contract(
                "encode",
                &format!("(n, {}) input", self.in_dim()),
                x.shape(),
            ));
        }
        let mut cur = x.clone();
        for layer in &self.layers {
            let lin = cur.matmul(&layer.weight)?;
            let biased = lin.add(&layer.bias.tile_rows(lin.rows())?)?;
            cur = if layer.relu { biased.relu() } else { biased };
        }
        Ok(cur)
    }

    /// Forward pass recorded on a tape. Returns the output node and the
    /// parameter leaves in `params_mut` order (w0, b0, w1, b1, ...).
    pub fn encode_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let got = tape.value(x).shape().to_vec();
        if got.len() != 2 || got[1] != self.in_dim() {
            return Err(Error::shape_contract(
                "encode",
                &format!("(n, {}) input", self.in_dim()),
                &got,
            ));
        }
        let mut param_vars = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            param_vars.push(tape.leaf(layer.weight.clone()));
            param_vars.push(tape.leaf(layer.bias.clone()));
        }
        let out = self.encode_with_vars(tape, x, &param_vars)?;
        Ok((out, param_vars))
    }

    /// Forward pass through existing parameter leaves (w0, b0, w1, b1, ...).
    /// Encoding several batches through one leaf set makes their parameter
    /// gradients accumulate on the same nodes.
    pub fn encode_with_vars(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let n = tape.value(x).rows();
        let mut cur = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let lin = tape.matmul(cur, params[2 * li])?;
            let bt = tape.tile_rows(params[2 * li + 1], n)?;
            let biased = tape.add(lin, bt)?;
            cur = if layer.relu { tape.relu(biased) } else { biased };
        }
        Ok(cur)
    }

    /// Mutable views of all parameters in the same order as `encode_tape`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    /// Hex digest over shapes and row-major parameter bytes.
    pub fn param_hash(&self) -> String {
        param_hash(&self.params())
    }
}

/// Domain classifier: two affine layers, hidden rectified-linear, sigmoid
/// scalar output.
#[derive(Clone, Debug)]
pub struct DomainClassifierParams {
    pub hidden: Layer,
    pub output: Layer,
}

impl DomainClassifierParams {
    pub fn init(d_in: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Layer::init(d_in, hidden_dim, true, rng),
            output: Layer::init(hidden_dim, 1, false, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    /// Probability that a single feature vector comes from domain A.
    pub fn classify_domain(&self, feature: &[f64]) -> Result<f64> {
        let x = Tensor::matrix(1, feature.len(), feature.to_vec())?;
        let p = self.classify(&x)?;
        Ok(p.data()[0])
    }

    /// Batch probabilities as an (n, 1) column.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        if !features.is_matrix() || features.cols() != self.in_dim() {
            return Err(Error::shape_contract(
                "classify_domain",
                &format!("(n, {}) features", self.in_dim()),
                features.shape(),
            ));
        }
        let h = features
            .matmul(&self.hidden.weight)?
            .add(&self.hidden.bias.tile_rows(features.rows())?)?
            .relu();
        let logit = h
            .matmul(&self.output.weight)?
            .add(&self.output.bias.tile_rows(h.rows())?)?;
        Ok(logit.sigmoid())
    }

    /// Taped batch forward. Returns probability node and parameter leaves.
    pub fn classify_tape(&self, tape: &mut Tape, features: Var) -> Result<(Var, Vec<Var>)> {
        let got = tape.value(features).shape().to_vec();
        if got.len() != 2 || got[1] != self.in_dim() {
            return Err(Error::shape_contract(
                "classify_domain",
                &format!("(n, {}) features", self.in_dim()),
                &got,
            ));
        }
        let w1 = tape.leaf(self.hidden.weight.clone());
        let b1 = tape.leaf(self.hidden.bias.clone());
        let w2 = tape.leaf(self.output.weight.clone());
        let b2 = tape.leaf(self.output.bias.clone());
        let vars = vec![w1, b1, w2, b2];
        let prob = Self::classify_with_vars(tape, features, &vars)?;
        Ok((prob, vars))
    }

    /// Forward pass from existing parameter leaves [w1, b1, w2, b2].
    pub fn classify_with_vars(tape: &mut Tape, features: Var, params: &[Var]) -> Result<Var> {
        let n = tape.value(features).rows();
        let lin1 = tape.matmul(features, params[0])?;
        let b1t = tape.tile_rows(params[1], n)?;
        let pre1 = tape.add(lin1, b1t)?;
        let h = tape.relu(pre1);
        let lin2 = tape.matmul(h, params[2])?;
        let b2t = tape.tile_rows(params[3], n)?;
        let logit = tape.add(lin2, b2t)?;
        Ok(tape.sigmoid(logit))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]
    }
}

/// Cosine-annealed learning rate: lr(t) = 0.5 lr0 (1 + cos(pi t / T)).
/// `total = 0` disables the schedule and returns `lr0`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (t.min(total) as f64) / (total as f64);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// SGD-with-momentum state for one parameter group.
///
/// The update is `v <- mu v + g; p <- p - lr(t) v`, with `lr(t)` from the
/// cosine schedule over `total_steps`. The step counter advances once per
/// `sgd_step` call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr0: f64,
    pub momentum: f64,
    pub total_steps: usize,
    pub step: usize,
    velocities: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr0: f64, momentum: f64, total_steps: usize, params: &[&Tensor]) -> Self {
        Self::with_start(lr0, momentum, total_steps, 0, params)
    }

    /// Start the schedule at a later step (used when a parameter group joins
    /// training after others, so all groups share one global trace).
    pub fn with_start(
        lr0: f64,
        momentum: f64,
        total_steps: usize,
        start_step: usize,
        params: &[&Tensor],
    ) -> Self {
        Self {
            lr0,
            momentum,
            total_steps,
            step: start_step,
            velocities: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Learning rate that the next `sgd_step` will apply.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.lr0)
    }

    pub fn sgd_step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.velocities.len() || grads.len() != params.len() {
            return Err(Error::shape_contract(
                "sgd_step",
                &format!("{} parameter tensors", self.velocities.len()),
                &[params.len(), grads.len()],
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::shape_mismatch(
                    "sgd_step",
                    params[i].shape(),
                    g.shape(),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient for parameter {i}"),
                });
            }
        }
        let lr = self.current_lr();
        for (i, g) in grads.iter().enumerate() {
            let v = &mut self.velocities[i];
            let p = params[i].data_mut();
            for j in 0..v.len() {
                v[j] = self.momentum * v[j] + g.data()[j];
                p[j] -= lr * v[j];
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Hex SHA-256 over shapes and little-endian f64 bytes of a parameter list.
pub fn param_hash(params: &[&Tensor]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for &e in p.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for &v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex_digest(&h.finalize())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{grad_check, DEFAULT_FD_STEP};
    use crate::rng::stream;

    fn identity_encoder(d: usize) -> EncoderParams {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        EncoderParams::new(vec![Layer {
            weight: Tensor::matrix(d, d, eye).unwrap(),
            bias: Tensor::zeros(vec![d]),
            relu: false,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let enc = identity_encoder(3);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 4.0, 0.0, -1.0]).unwrap();
        assert_eq!(enc.encode(&x).unwrap(), x);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let mut enc = identity_encoder(2);
        enc.layers[0].relu = true;
        let x = Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(enc.encode(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_fixture_matches_hand_computation() {
        let mut rng = stream(42, "enc-fixture");
        let enc = EncoderParams::init(3, &[4], 2, &mut rng);
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let got = enc.encode(&x).unwrap();

        // Independent evaluation with plain loops.
        let mut expect = vec![0.0; 2 * 2];
        for r in 0..2 {
            let mut h = vec![0.0; 4];
            for j in 0..4 {
                let mut s = enc.layers[0].bias.data()[j];
                for k in 0..3 {
                    s += x.data()[r * 3 + k] * enc.layers[0].weight.data()[k * 4 + j];
                }
                h[j] = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = enc.layers[1].bias.data()[j];
                for k in 0..4 {
                    s += h[k] * enc.layers[1].weight.data()[k * 2 + j];
                }
                expect[r * 2 + j] = s;
            }
        }
        for (g, e) in got.data().iter().zip(expect.iter()) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn encode_dim_mismatch_is_an_error() {
        let enc = identity_encoder(3);
        let x = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        assert!(enc.encode(&x).is_err());
    }

    #[test]
    fn encode_gradients_pass_grad_check() {
        let mut rng = stream(7, "enc-grad");
        let enc = EncoderParams::init(4, &[5], 3, &mut rng);
        let x = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64) / 3.0 - 1.1).collect()).unwrap();
        // Leaves are the raw parameter tensors; the builder re-assembles the
        // network from them so finite differences see the perturbations.
        let leaves: Vec<Tensor> = enc.params().into_iter().cloned().collect();
        let relu_flags: Vec<bool> = enc.layers.iter().map(|l| l.relu).collect();
        let err = grad_check(
            |tape, vars| {
                let mut cur = tape.leaf(x.clone());
                let n = 2;
                for (li, pair) in vars.chunks(2).enumerate() {
                    let lin = tape.matmul(cur, pair[0])?;
                    let bt = tape.tile_rows(pair[1], n)?;
                    let biased = tape.add(lin, bt)?;
                    cur = if relu_flags[li] {
                        tape.relu(biased)
                    } else {
                        biased
                    };
                }
                let sq = tape.mul(cur, cur)?;
                Ok(tape.sum(sq))
            },
            &leaves,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn zero_classifier_outputs_half() {
        let clf = DomainClassifierParams {
            hidden: Layer {
                weight: Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(),
                bias: Tensor::zeros(vec![3]),
                relu: true,
            },
            output: Layer {
                weight: Tensor::matrix(3, 1, vec![0.0; 3]).unwrap(),
                bias: Tensor::zeros(vec![1]),
                relu: false,
            },
        };
        assert_eq!(clf.classify_domain(&[1.0, -2.0]).unwrap(), 0.5);
    }

    #[test]
    fn sigmoid_of_logit_twenty() {
        let x = Tensor::scalar(20.0).sigmoid();
        let direct = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((x.data()[0] - direct).abs() <= 1e-15);
        assert!((x.data()[0] - 0.999999998).abs() <= 1e-9);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[0.0, 0.3, 1.7, 8.0, 33.0] {
            let a = Tensor::scalar(-x).sigmoid().data()[0];
            let b = 1.0 - Tensor::scalar(x).sigmoid().data()[0];
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sgd_first_and_second_steps() {
        let mut p = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![1.0]);
        // total_steps = 0 keeps the schedule constant at lr0.
        let mut opt = OptimizerState::new(0.1, 0.9, 0, &[&p]);
        opt.sgd_step(&mut [&mut p], &[g.clone()]).unwrap();
        assert!((p.data()[0] - 0.9).abs() <= 1e-15);
        opt.sgd_step(&mut [&mut p], &[g]).unwrap();
        // v = 0.9*1 + 1 = 1.9, p = 0.9 - 0.19 = 0.71
        assert!((p.data()[0] - 0.71).abs() <= 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_with_zero_velocity_is_a_fixed_point() {
        let mut p = Tensor::vector(vec![2.5, -1.0]);
        let before = p.clone();
        let mut opt = OptimizerState::new(0.1, 0.9, 0, &[&p]);
        for _ in 0..5 {
            opt.sgd_step(&mut [&mut p], &[Tensor::zeros(vec![2])])
                .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_with_zero_lr_is_bit_identical() {
        let mut rng = stream(9, "sgd-zero-lr");
        let mut enc = EncoderParams::init(3, &[4], 2, &mut rng);
        let before: Vec<Vec<f64>> = enc.params().iter().map(|t| t.data().to_vec()).collect();
        let shapes: Vec<Vec<usize>> = enc.params().iter().map(|t| t.shape().to_vec()).collect();
        let mut opt = OptimizerState::new(0.0, 0.9, 0, &enc.params());
        let grads: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), vec![0.37; n]).unwrap()
            })
            .collect();
        opt.sgd_step(&mut enc.params_mut(), &grads).unwrap();
        for (after, b) in enc.params().iter().zip(before.iter()) {
            for (x, y) in after.data().iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = OptimizerState::new(0.1, 0.9, 0, &[&p]);
        let g = Tensor::vector(vec![1.0]);
        let mut bad = g.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(opt.sgd_step(&mut [&mut p], &[bad]).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let lr0 = 2e-4;
        assert_eq!(cosine_lr(0, 100, lr0), lr0);
        assert!(cosine_lr(100, 100, lr0).abs() < 1e-19);
        assert!((cosine_lr(50, 100, lr0) - 1e-4).abs() <= 1e-19);
        assert_eq!(cosine_lr(3, 0, lr0), lr0);
    }

    #[test]
    fn cosine_schedule_is_nonincreasing() {
        for t in 0..400 {
            assert!(cosine_lr(t, 400, 1.0) >= cosine_lr(t + 1, 400, 1.0));
        }
    }
}
