//! Dense f64 tensors with reverse-mode autodiff over exactly the primitives
//! the snow-response and Cross Fusion networks need.

mod check;
mod ops;
mod serialize;
mod tape;

pub use check::{finite_diff_check, EvalOutput, FdOptions, FdReport};
pub use serialize::{read_tensor, write_tensor};
pub use tape::{GradTape, Gradients, ResizeMode, TensorId};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense N-dimensional float array, row-major. Feature maps use N×C×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Dimensions of an N×C×H×W tensor; errors on other ranks.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected rank-4 N×C×H×W tensor, got shape {:?}",
                other
            ))),
        }
    }
}

/// A 2-D convolution layer: weights Cout×Cin×K×K, optional bias of length Cout.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let (cout, _cin, kh, kw) = weights.dims4()?;
        if kh != kw {
            return Err(Error::InvalidArgument(format!(
                "kernel must be square, got {}×{}",
                kh, kw
            )));
        }
        if kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {} must be odd", kh)));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?} does not match Cout {}",
                    b.shape(),
                    cout
                )));
            }
        }
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Seeded uniform init in [-scale, scale].
    pub fn init_uniform<R: Rng>(
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        padding: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weights = Tensor::rand_uniform(&[cout, cin, k, k], -scale, scale, rng);
        let bias = Tensor::rand_uniform(&[cout], -scale, scale, rng);
        ConvLayer::new(weights, Some(bias), stride, padding).expect("valid layer")
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// In-place SGD update p ← p − lr·(g + weight_decay·p).
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
    for (p, g) in params.iter_mut().zip(grads) {
        assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
        for (pv, gv) in p.data.iter_mut().zip(g.data()) {
            *pv -= lr * (gv + weight_decay * *pv);
        }
    }
}
