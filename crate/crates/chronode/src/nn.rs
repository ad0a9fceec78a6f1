//! Dense feed-forward networks expressed over the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Tensor, // [out, in], row-major
    pub bias: Tensor,   // [out]
    pub activation: Activation,
}

/// Architecture of a [`DenseNet`]: `dims = [in, hidden.., out]` plus one
/// activation per layer. Used to rebuild a net from flat parameter lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NetLayout {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

/// A chain of dense layers. Consecutive layer dims must chain and all
/// weights stay finite.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    /// Seeded init with weights and biases uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn init<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.len() - 1 != activations.len() {
            return Err(Error::Contract(format!(
                "dense net needs n+1 dims for n activations, got {} dims / {} activations",
                dims.len(),
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract("zero-width dense layer".into()));
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (i, &act) in activations.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Tensor::matrix(
                fan_out,
                fan_in,
                (0..fan_out * fan_in)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            )?;
            let bias = Tensor::vector((0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect());
            layers.push(Layer {
                weight,
                bias,
                activation: act,
            });
        }
        Ok(DenseNet { layers })
    }

    /// Rebuild a net from a layout plus its parameter tensors in
    /// `w0, b0, w1, b1, ..` order.
    pub fn from_parts(layout: &NetLayout, params: Vec<Tensor>) -> Result<Self> {
        if params.len() != 2 * layout.activations.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                2 * layout.activations.len(),
                params.len()
            )));
        }
        let mut layers = Vec::with_capacity(layout.activations.len());
        let mut it = params.into_iter();
        for (i, &act) in layout.activations.iter().enumerate() {
            let weight = it.next().unwrap();
            let bias = it.next().unwrap();
            let expected_w = vec![layout.dims[i + 1], layout.dims[i]];
            if weight.shape() != expected_w.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("layer {i} weight"),
                    expected: expected_w,
                    got: weight.shape().to_vec(),
                });
            }
            if bias.shape() != [layout.dims[i + 1]] {
                return Err(Error::ShapeMismatch {
                    context: format!("layer {i} bias"),
                    expected: vec![layout.dims[i + 1]],
                    got: bias.shape().to_vec(),
                });
            }
            weight.check_finite("dense weight")?;
            bias.check_finite("dense bias")?;
            layers.push(Layer {
                weight,
                bias,
                activation: act,
            });
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[0]
    }

    pub fn layout(&self) -> NetLayout {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.shape()[0]));
        NetLayout {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    /// Parameter tensors in `w0, b0, w1, b1, ..` order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    /// `(name, tensor)` pairs as `{prefix}.{i}.w` / `{prefix}.{i}.b`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &layer.weight));
            out.push((format!("{prefix}.{i}.b"), &layer.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &mut layer.weight));
            out.push((format!("{prefix}.{i}.b"), &mut layer.bias));
        }
        out
    }

    /// Plain forward pass without recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.in_dim()] {
            return Err(Error::ShapeMismatch {
                context: "dense forward".into(),
                expected: vec![self.in_dim()],
                got: x.shape().to_vec(),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let (m, n) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut out = vec![0.0; m];
            for r in 0..m {
                let row = &layer.weight.data()[r * n..(r + 1) * n];
                let z: f64 = row.iter().zip(h.data()).map(|(a, b)| a * b).sum::<f64>()
                    + layer.bias.data()[r];
                out[r] = match layer.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                };
            }
            h = Tensor::vector(out);
        }
        h.check_finite("dense forward")?;
        Ok(h)
    }

    /// Forward pass recorded on a tape, registering parameters under `prefix`.
    pub fn forward_tape(&self, tape: &mut Tape, prefix: &str, x: ValueId) -> Result<ValueId> {
        if tape.value(x).shape() != [self.in_dim()] {
            return Err(Error::ShapeMismatch {
                context: "dense forward".into(),
                expected: vec![self.in_dim()],
                got: tape.value(x).shape().to_vec(),
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&format!("{prefix}.{i}.w"), &layer.weight)?;
            let b = tape.param(&format!("{prefix}.{i}.b"), &layer.bias)?;
            let wx = tape.matvec(w, h)?;
            let z = tape.add(wx, b)?;
            h = match layer.activation {
                Activation::Tanh => tape.tanh(z)?,
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    /// Register all parameters on a tape and return their node ids in
    /// `w0, b0, ..` order.
    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<Vec<ValueId>> {
        let mut ids = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            ids.push(tape.param(&format!("{prefix}.{i}.w"), &layer.weight)?);
            ids.push(tape.param(&format!("{prefix}.{i}.b"), &layer.bias)?);
        }
        Ok(ids)
    }

    /// Replace parameter tensors in `w0, b0, ..` order.
    pub fn set_param_tensors(&mut self, params: Vec<Tensor>) -> Result<()> {
        let rebuilt = DenseNet::from_parts(&self.layout(), params)?;
        self.layers = rebuilt.layers;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>, act: Activation) -> DenseNet {
        DenseNet::from_parts(
            &NetLayout {
                dims: vec![cols, rows],
                activations: vec![act],
            },
            vec![Tensor::matrix(rows, cols, w).unwrap(), Tensor::vector(b)],
        )
        .unwrap()
    }

    #[test]
    fn zero_net_annihilates() {
        let net = single_layer(vec![0.0; 4], 2, 2, vec![0.0; 2], Activation::Tanh);
        let y = net.forward(&Tensor::vector(vec![3.0, -7.5])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let net = single_layer(
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            2,
            vec![0.0; 2],
            Activation::Identity,
        );
        let y = net.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn tanh_layer_matches_direct_formula() {
        // W=[[2]], b=[0.5], tanh, x=[1] -> tanh(2.5)
        let net = single_layer(vec![2.0], 1, 1, vec![0.5], Activation::Tanh);
        let y = net.forward(&Tensor::vector(vec![1.0])).unwrap();
        assert!((y.data()[0] - 2.5f64.tanh()).abs() < 1e-15);
        assert!((y.data()[0] - 0.98661).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let net = single_layer(vec![2.0], 1, 1, vec![0.5], Activation::Tanh);
        assert!(net.forward(&Tensor::vector(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = DenseNet::init(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], &mut rng)
            .unwrap();
        let x = Tensor::vector(vec![0.3, -0.2, 0.9]);
        let plain = net.forward(&x).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let xid = tape.input(x).unwrap();
        let yid = net.forward_tape(&mut tape, "net", xid).unwrap();
        assert_eq!(tape.value(yid), &plain);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DenseNet::init(&[16, 4], &[Activation::Tanh], &mut rng).unwrap();
        let bound = 1.0 / 4.0;
        for p in net.param_tensors() {
            assert!(p.data().iter().all(|v| v.abs() <= bound));
        }
    }
}
