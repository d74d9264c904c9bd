//! Trainable parameters and the two layer types the models are built from.

use crate::tensor::{conv2d, linear, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::rc::Rc;

/// A named, trainable tensor. The held value is immutable; the optimizer
/// swaps in a fresh leaf on every update.
pub struct Param<S: Scalar> {
    inner: Rc<ParamInner<S>>,
}

struct ParamInner<S: Scalar> {
    name: String,
    value: RefCell<Tensor<S>>,
    trainable: RefCell<bool>,
}

impl<S: Scalar> Clone for Param<S> {
    fn clone(&self) -> Self {
        Param {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, data: Vec<S>, shape: &[usize]) -> Self {
        Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                value: RefCell::new(Tensor::param(data, shape)),
                trainable: RefCell::new(true),
            }),
        }
    }

    pub fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// Current value handle for use in a forward pass.
    pub fn value(&self) -> Tensor<S> {
        self.inner.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.value.borrow().numel()
    }

    /// Replace the value with new data (optimizer update / checkpoint load).
    pub fn set_data(&self, data: Vec<S>) {
        let shape = self.shape();
        let t = if *self.inner.trainable.borrow() {
            Tensor::param(data, &shape)
        } else {
            Tensor::from_vec(data, &shape)
        };
        *self.inner.value.borrow_mut() = t;
    }

    pub fn data(&self) -> Vec<S> {
        self.inner.value.borrow().data().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.inner.value.borrow().zero_grad();
    }

    pub fn trainable(&self) -> bool {
        *self.inner.trainable.borrow()
    }

    /// Freeze or unfreeze. Frozen params record no graph, so forward passes
    /// through them are pure inference.
    pub fn set_trainable(&self, on: bool) {
        if *self.inner.trainable.borrow() == on {
            return;
        }
        *self.inner.trainable.borrow_mut() = on;
        let data = self.data();
        self.set_data(data);
    }
}

/// Kaiming-uniform fan-in initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

/// 3x3 or 1x1 convolution layer with bias.
pub struct Conv2d<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            kaiming_uniform(rng, c_out * fan_in, fan_in),
            &[c_out, c_in, kernel, kernel],
        );
        let bias = Param::new(format!("{name}.bias"), vec![S::zero(); c_out], &[c_out]);
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        conv2d(
            x,
            &self.weight.value(),
            &self.bias.value(),
            self.stride,
            self.padding,
        )
        .expect("conv shapes fixed at construction")
    }

    pub fn params(&self) -> Vec<Param<S>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Fully connected layer with bias.
pub struct Linear<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, f_in: usize, f_out: usize) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            kaiming_uniform(rng, f_out * f_in, f_in),
            &[f_out, f_in],
        );
        let bias = Param::new(format!("{name}.bias"), vec![S::zero(); f_out], &[f_out]);
        Linear { weight, bias }
    }

    /// All-zero weights and bias (used where a neutral start is required).
    pub fn zeroed(name: &str, f_in: usize, f_out: usize) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            vec![S::zero(); f_out * f_in],
            &[f_out, f_in],
        );
        let bias = Param::new(format!("{name}.bias"), vec![S::zero(); f_out], &[f_out]);
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        linear(x, &self.weight.value(), &self.bias.value())
    }

    pub fn params(&self) -> Vec<Param<S>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sum_all;
    use rand::SeedableRng;

    #[test]
    fn frozen_param_records_no_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::<f64>::new("l", &mut rng, 3, 2);
        layer.weight.set_trainable(false);
        layer.bias.set_trainable(false);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]);
        let y = layer.forward(&x);
        assert!(!y.requires_grad());
    }

    #[test]
    fn param_update_swaps_value_and_preserves_shape() {
        let p = Param::<f64>::new("p", vec![1.0, 2.0], &[2]);
        let before = p.value();
        p.set_data(vec![3.0, 4.0]);
        assert_eq!(p.data(), vec![3.0, 4.0]);
        // the old handle still sees the old values (immutability)
        assert_eq!(before.data(), &[1.0, 2.0]);
    }

    #[test]
    fn grads_arrive_on_trainable_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Linear::<f64>::new("l", &mut rng, 3, 2);
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[1, 3]);
        sum_all(&layer.forward(&x)).backward().unwrap();
        assert!(layer.weight.grad().is_some());
        assert!(layer.bias.grad().is_some());
    }
}
