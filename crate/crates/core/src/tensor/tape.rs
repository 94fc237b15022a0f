use crate::act::{self, ActivationKind};
use crate::error::{Error, Result};

use super::ops;
use super::{ConvLayer, Tensor};

/// Handle to a tensor recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&[Tensor], &mut [Tensor])>;

struct Record {
    backward: BackwardFn,
}

/// Reverse-mode differentiation tape. Operations append records in creation
/// order; [`GradTape::backward`] replays them in strict reverse order, so each
/// record is visited exactly once and every consumer contributes its gradient
/// before a producer reads it.
#[derive(Default)]
pub struct GradTape {
    values: Vec<Tensor>,
    records: Vec<Record>,
    branch_hash: u64,
}

/// Accumulated gradients per tensor id after a backward pass.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn grad(&self, id: TensorId) -> &Tensor {
        &self.grads[id.0]
    }
}

/// Direction of a spatial resize; the scale ratio must be an exact integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Nearest-neighbor replication.
    Up,
    /// Non-overlapping average pooling.
    Down,
}

fn mix_hash(h: &mut u64, v: u64) {
    *h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(*h << 6).wrapping_add(*h >> 2);
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    /// Registers a tensor with no backward rule (parameter or input).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.values.len());
        self.values.push(t);
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Hash of every discrete branch decision (activation pieces, argmax
    /// channels) taken during the forward pass. Finite-difference checks skip
    /// coordinates whose ±ε evaluations disagree here.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// 2-D convolution with the layer parameters recorded as differentiable
    /// tensors on this tape.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weights: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let out = ops::conv2d_forward(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |values, grads| {
            let gout = grads[out_id.0].clone();
            let (din, dw, db) = ops::conv2d_backward(
                &gout,
                &values[input.0],
                &values[weights.0],
                stride,
                padding,
            );
            accumulate(&mut grads[input.0], &din);
            accumulate(&mut grads[weights.0], &dw);
            if let Some(b) = bias {
                accumulate(&mut grads[b.0], &db);
            }
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// Convenience wrapper: registers the layer's weights (and bias) as
    /// leaves and applies the convolution. Returns (output, weight id, bias id).
    pub fn apply_conv(
        &mut self,
        input: TensorId,
        layer: &ConvLayer,
    ) -> Result<(TensorId, TensorId, Option<TensorId>)> {
        let w = self.leaf(layer.weights.clone());
        let b = layer.bias.as_ref().map(|b| self.leaf(b.clone()));
        let out = self.conv2d(input, w, b, layer.stride, layer.padding)?;
        Ok((out, w, b))
    }

    pub fn resize(
        &mut self,
        input: TensorId,
        target_h: usize,
        target_w: usize,
        mode: ResizeMode,
    ) -> Result<TensorId> {
        let (out, fh, fw) = ops::resize_forward(self.value(input), target_h, target_w, mode)?;
        let in_shape = self.value(input).shape().to_vec();
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |_values, grads| {
            let gout = grads[out_id.0].clone();
            let din = ops::resize_backward(&gout, &in_shape, fh, fw, mode);
            accumulate(&mut grads[input.0], &din);
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// Per-channel batch normalization. With `running_stats = Some((mean, var))`
    /// the stored statistics are used (inference mode); otherwise batch
    /// statistics over N×H×W are used (training mode).
    pub fn batchnorm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        running_stats: Option<(&Tensor, &Tensor)>,
    ) -> Result<TensorId> {
        let fwd = ops::batchnorm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            eps,
            running_stats,
        )?;
        let ctx = fwd.ctx;
        let out_id = TensorId(self.values.len());
        self.values.push(fwd.output);
        let backward: BackwardFn = Box::new(move |values, grads| {
            let gout = grads[out_id.0].clone();
            let (din, dgamma, dbeta) =
                ops::batchnorm_backward(&gout, &values[input.0], &values[gamma.0], &ctx);
            accumulate(&mut grads[input.0], &din);
            accumulate(&mut grads[gamma.0], &dgamma);
            accumulate(&mut grads[beta.0], &dbeta);
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// PReLU with a learnable per-channel slope (length C).
    pub fn prelu(&mut self, input: TensorId, slope: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let s = self.value(slope);
        if s.shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "prelu slope shape {:?} does not match C={}",
                s.shape(),
                c
            )));
        }
        let slopes: Vec<f64> = s.data().to_vec();
        let mut out = x.clone();
        let plane = h * w;
        let mut hash = self.branch_hash;
        for ni in 0..n {
            for ci in 0..c {
                let sc = slopes[ci];
                let base = (ni * c + ci) * plane;
                for v in &mut out.data_mut()[base..base + plane] {
                    if *v < 0.0 {
                        mix_hash(&mut hash, 1);
                        *v *= sc;
                    } else {
                        mix_hash(&mut hash, 2);
                    }
                }
            }
        }
        self.branch_hash = hash;
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |values, grads| {
            let gout = grads[out_id.0].clone();
            let x = &values[input.0];
            let s = &values[slope.0];
            let mut din = Tensor::zeros(x.shape());
            let mut dslope = Tensor::zeros(s.shape());
            for ni in 0..n {
                for ci in 0..c {
                    let sc = s.data()[ci];
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        let xv = x.data()[i];
                        let g = gout.data()[i];
                        if xv < 0.0 {
                            din.data_mut()[i] = g * sc;
                            dslope.data_mut()[ci] += g * xv;
                        } else {
                            din.data_mut()[i] = g;
                        }
                    }
                }
            }
            accumulate(&mut grads[input.0], &din);
            accumulate(&mut grads[slope.0], &dslope);
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// Elementwise addition. Shapes must match exactly; no broadcasting.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |_values, grads| {
            let gout = grads[out_id.0].clone();
            accumulate(&mut grads[a.0], &gout);
            accumulate(&mut grads[b.0], &gout);
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// Channel-axis concatenation of N×C_i×H×W parts.
    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat: part shape {:?} does not match N={} H={} W={}",
                    self.value(p).shape(),
                    n,
                    h,
                    w
                )));
            }
            channels.push(pc);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        for ni in 0..n {
            let mut c_off = 0;
            for (&p, &pc) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                let src_base = ni * pc * plane;
                let dst_base = (ni * c_total + c_off) * plane;
                out.data_mut()[dst_base..dst_base + pc * plane]
                    .copy_from_slice(&src[src_base..src_base + pc * plane]);
                c_off += pc;
            }
        }
        let part_ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |_values, grads| {
            let gout = grads[out_id.0].clone();
            for ni in 0..n {
                let mut c_off = 0;
                for (&pid, &pc) in part_ids.iter().zip(&channels) {
                    let dst_base = ni * pc * plane;
                    let src_base = (ni * c_total + c_off) * plane;
                    let gslice = &gout.data()[src_base..src_base + pc * plane];
                    for (d, g) in grads[pid].data_mut()[dst_base..dst_base + pc * plane]
                        .iter_mut()
                        .zip(gslice)
                    {
                        *d += g;
                    }
                    c_off += pc;
                }
            }
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// Exact inverse of [`GradTape::concat_channels`]: slices the channel axis
    /// into parts of the given sizes.
    pub fn split_channels(&mut self, input: TensorId, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::ShapeMismatch(format!(
                "split sizes {:?} sum to {}, input has C={}",
                sizes, total, c
            )));
        }
        let plane = h * w;
        let mut outs = Vec::with_capacity(sizes.len());
        let mut c_off = 0;
        for &pc in sizes {
            let mut part = Tensor::zeros(&[n, pc, h, w]);
            for ni in 0..n {
                let src_base = (ni * c + c_off) * plane;
                let dst_base = ni * pc * plane;
                part.data_mut()[dst_base..dst_base + pc * plane]
                    .copy_from_slice(&self.value(input).data()[src_base..src_base + pc * plane]);
            }
            let start = c_off;
            let out_id = TensorId(self.values.len());
            self.values.push(part);
            let backward: BackwardFn = Box::new(move |_values, grads| {
                let gout = grads[out_id.0].clone();
                for ni in 0..n {
                    let dst_base = (ni * c + start) * plane;
                    let src_base = ni * pc * plane;
                    let gslice = &gout.data()[src_base..src_base + pc * plane];
                    for (d, g) in grads[input.0].data_mut()[dst_base..dst_base + pc * plane]
                        .iter_mut()
                        .zip(gslice)
                    {
                        *d += g;
                    }
                }
            });
            self.records.push(Record { backward });
            outs.push(out_id);
            c_off += pc;
        }
        Ok(outs)
    }

    /// Per-pixel maximum over the channel axis; N×C×H×W → N×1×H×W.
    /// Ties route the gradient to the lowest channel index.
    pub fn max_over_channels(&mut self, input: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if c == 0 {
            return Err(Error::InvalidArgument("max over zero channels".into()));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        let mut argmax = vec![0usize; n * plane];
        let mut hash = self.branch_hash;
        {
            let x = self.value(input).data();
            for ni in 0..n {
                for p in 0..plane {
                    let mut best = x[(ni * c) * plane + p];
                    let mut best_c = 0;
                    for ci in 1..c {
                        let v = x[(ni * c + ci) * plane + p];
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    out.data_mut()[ni * plane + p] = best;
                    argmax[ni * plane + p] = best_c;
                    mix_hash(&mut hash, best_c as u64);
                }
            }
        }
        self.branch_hash = hash;
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |_values, grads| {
            let gout = grads[out_id.0].clone();
            for ni in 0..n {
                for p in 0..plane {
                    let ci = argmax[ni * plane + p];
                    grads[input.0].data_mut()[(ni * c + ci) * plane + p] +=
                        gout.data()[ni * plane + p];
                }
            }
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// Elementwise activation (Peak Act or one of the references).
    pub fn activation(&mut self, kind: ActivationKind, input: TensorId) -> TensorId {
        let x = self.value(input);
        let mut out = Tensor::zeros(x.shape());
        let mut hash = self.branch_hash;
        for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
            *o = act::apply(kind, v);
            mix_hash(&mut hash, act::branch_index(kind, v));
        }
        self.branch_hash = hash;
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |values, grads| {
            let gout = grads[out_id.0].clone();
            let x = &values[input.0];
            let mut din = Tensor::zeros(x.shape());
            for ((d, &xv), g) in din
                .data_mut()
                .iter_mut()
                .zip(x.data())
                .zip(gout.data())
            {
                *d = g * act::gradient(kind, xv);
            }
            accumulate(&mut grads[input.0], &din);
        });
        self.records.push(Record { backward });
        out_id
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |_values, grads| {
            let gout = grads[out_id.0].clone();
            let mut din = gout;
            for v in din.data_mut() {
                *v *= factor;
            }
            accumulate(&mut grads[input.0], &din);
        });
        self.records.push(Record { backward });
        out_id
    }

    pub fn add_scalar(&mut self, input: TensorId, c: f64) -> TensorId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v += c;
        }
        let out_id = TensorId(self.values.len());
        self.values.push(out);
        let backward: BackwardFn = Box::new(move |_values, grads| {
            let gout = grads[out_id.0].clone();
            accumulate(&mut grads[input.0], &gout);
        });
        self.records.push(Record { backward });
        out_id
    }

    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.value(input).data().iter().sum();
        let out_id = TensorId(self.values.len());
        self.values.push(Tensor::scalar(s));
        let backward: BackwardFn = Box::new(move |_values, grads| {
            let g = grads[out_id.0].item();
            for v in grads[input.0].data_mut() {
                *v += g;
            }
        });
        self.records.push(Record { backward });
        out_id
    }

    pub fn mean_all(&mut self, input: TensorId) -> TensorId {
        let n = self.value(input).len() as f64;
        let s = self.sum_all(input);
        self.scale(s, 1.0 / n)
    }

    /// Sum of absolute values. Subgradient at 0 is 0.
    pub fn l1_norm(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.value(input).data().iter().map(|v| v.abs()).sum();
        let out_id = TensorId(self.values.len());
        self.values.push(Tensor::scalar(s));
        let backward: BackwardFn = Box::new(move |values, grads| {
            let g = grads[out_id.0].item();
            let x = values[input.0].clone();
            for (d, &xv) in grads[input.0].data_mut().iter_mut().zip(x.data()) {
                *d += g * sign(xv);
            }
        });
        self.records.push(Record { backward });
        out_id
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: TensorId, target: &Tensor) -> Result<TensorId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse: {:?} vs {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let n = target.len() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let target = target.clone();
        let out_id = TensorId(self.values.len());
        self.values.push(Tensor::scalar(s / n));
        let backward: BackwardFn = Box::new(move |values, grads| {
            let g = grads[out_id.0].item();
            let p = values[pred.0].clone();
            for ((d, &pv), &tv) in grads[pred.0]
                .data_mut()
                .iter_mut()
                .zip(p.data())
                .zip(target.data())
            {
                *d += g * 2.0 * (pv - tv) / n;
            }
        });
        self.records.push(Record { backward });
        Ok(out_id)
    }

    /// Reverse pass from a scalar loss. Traverses the records once, in strict
    /// reverse creation order.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(
                "backward requires a scalar loss".into(),
            ));
        }
        if !self.value(loss).item().is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        let mut grads: Vec<Tensor> = self.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        grads[loss.0].data_mut()[0] = 1.0;
        for rec in self.records.iter().rev() {
            (rec.backward)(&self.values, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{finite_diff_check, EvalOutput, FdOptions};

    use super::*;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    /// Builds the graph once for analytic gradients, then compares every leaf
    /// against central differences through a fresh forward per perturbation.
    fn check_grads(
        params: &[Tensor],
        build: &dyn Fn(&mut GradTape, &[TensorId]) -> Result<TensorId>,
        tol: f64,
    ) {
        let mut tape = GradTape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &ids).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.grad(id).clone()).collect();
        let mut f = |p: &[Tensor]| {
            let mut tape = GradTape::new();
            let ids: Vec<TensorId> = p.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &ids)?;
            Ok(EvalOutput {
                value: tape.value(loss).item(),
                branch_sig: tape.branch_signature(),
            })
        };
        let report = finite_diff_check(&mut f, params, &analytic, &FdOptions::default()).unwrap();
        assert!(report.checked > 0, "every coordinate was skipped");
        assert!(
            report.max_rel_err <= tol,
            "max rel err {} over {} coords ({} skipped)",
            report.max_rel_err,
            report.checked,
            report.skipped
        );
    }

    #[test]
    fn conv_of_all_ones_sums_the_window() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[1], 6.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let input = rand_t(&[1, 1, 5, 4], 1);
        let mut tape = GradTape::new();
        let x = tape.leaf(input.clone());
        let w = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 1).is_err());
        let narrow = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let w5 = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(narrow, w5, None, 1, 0).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let params = [rand_t(&[2, 3, 8, 8], 2), rand_t(&[4, 3, 3, 3], 3), rand_t(&[4], 4)];
        let target = rand_t(&[2, 4, 8, 8], 5);
        check_grads(
            &params,
            &|tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                tape.mse_loss(y, &target)
            },
            1e-5,
        );
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let params = [rand_t(&[1, 2, 6, 6], 6), rand_t(&[3, 2, 3, 3], 7), rand_t(&[3], 8)];
        let target = rand_t(&[1, 3, 3, 3], 9);
        check_grads(
            &params,
            &|tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
                tape.mse_loss(y, &target)
            },
            1e-5,
        );
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap());
        let y = tape.resize(x, 2, 2, ResizeMode::Up).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0; 4]);
    }

    #[test]
    fn downsample_averages() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.resize(x, 1, 1, ResizeMode::Down).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn downsample_gradient_splits_evenly() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.resize(x, 1, 1, ResizeMode::Down).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.grad(x).data(), &[0.25; 4]);
    }

    #[test]
    fn resize_rejects_non_integer_ratio() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(tape.resize(x, 3, 3, ResizeMode::Down).is_err());
        assert!(tape.resize(x, 6, 6, ResizeMode::Up).is_err());
    }

    #[test]
    fn resize_gradients_match_finite_differences() {
        let input = [rand_t(&[2, 2, 4, 4], 10)];
        let up_target = rand_t(&[2, 2, 8, 8], 11);
        check_grads(
            &input,
            &|tape, ids| {
                let y = tape.resize(ids[0], 8, 8, ResizeMode::Up)?;
                tape.mse_loss(y, &up_target)
            },
            1e-6,
        );
        let down_target = rand_t(&[2, 2, 2, 2], 12);
        check_grads(
            &input,
            &|tape, ids| {
                let y = tape.resize(ids[0], 2, 2, ResizeMode::Down)?;
                tape.mse_loss(y, &down_target)
            },
            1e-6,
        );
    }

    #[test]
    fn batchnorm_constant_channel_yields_beta() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::filled(&[1, 2, 3, 3], 7.0));
        let gamma = tape.leaf(Tensor::filled(&[2], 1.5));
        let beta = tape.leaf(Tensor::from_vec(&[2], vec![0.3, -0.4]).unwrap());
        let y = tape.batchnorm(x, gamma, beta, 1e-5, None).unwrap();
        for (ci, expected) in [0.3, -0.4].iter().enumerate() {
            for p in 0..9 {
                assert!((tape.value(y).data()[ci * 9 + p] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_leaves_normalized_data_nearly_unchanged() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![-1.0, 1.0]).unwrap());
        let gamma = tape.leaf(Tensor::filled(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.batchnorm(x, gamma, beta, 1e-5, None).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - -1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let params = [rand_t(&[2, 3, 4, 4], 13), rand_t(&[3], 14), rand_t(&[3], 15)];
        let target = rand_t(&[2, 3, 4, 4], 16);
        check_grads(
            &params,
            &|tape, ids| {
                let y = tape.batchnorm(ids[0], ids[1], ids[2], 1e-5, None)?;
                tape.mse_loss(y, &target)
            },
            1e-4,
        );
    }

    #[test]
    fn batchnorm_frozen_stats_gradients_match_finite_differences() {
        let params = [rand_t(&[1, 2, 3, 3], 17), rand_t(&[2], 18), rand_t(&[2], 19)];
        let mean = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let var = Tensor::from_vec(&[2], vec![0.5, 1.5]).unwrap();
        let target = rand_t(&[1, 2, 3, 3], 20);
        check_grads(
            &params,
            &|tape, ids| {
                let y = tape.batchnorm(ids[0], ids[1], ids[2], 1e-5, Some((&mean, &var)))?;
                tape.mse_loss(y, &target)
            },
            1e-5,
        );
    }

    #[test]
    fn prelu_trivial_cases() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![-4.0, 3.0]).unwrap());
        let s = tape.leaf(Tensor::filled(&[1], 0.25));
        let y = tape.prelu(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 3.0]);
    }

    #[test]
    fn prelu_gradients_match_finite_differences() {
        let params = [rand_t(&[2, 3, 4, 4], 21), rand_t(&[3], 22)];
        let target = rand_t(&[2, 3, 4, 4], 23);
        check_grads(
            &params,
            &|tape, ids| {
                let y = tape.prelu(ids[0], ids[1])?;
                tape.mse_loss(y, &target)
            },
            1e-5,
        );
    }

    #[test]
    fn prelu_slope_gradient_sums_negative_inputs() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 3], vec![-2.0, -0.5, 4.0]).unwrap());
        let s = tape.leaf(Tensor::filled(&[1], 0.25));
        let y = tape.prelu(x, s).unwrap();
        let sum = tape.sum_all(y);
        let grads = tape.backward(sum).unwrap();
        assert!((grads.grad(s).data()[0] - -2.5).abs() < 1e-12);
    }

    #[test]
    fn add_trivial_cases() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let zeros = tape.leaf(Tensor::zeros(&[1, 1, 1, 2]));
        let b = tape.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        let id = tape.add(a, zeros).unwrap();
        assert_eq!(tape.value(id).data(), &[1.0, 2.0]);
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);
        let mismatched = tape.leaf(Tensor::zeros(&[1, 1, 2, 1]));
        assert!(tape.add(a, mismatched).is_err());
    }

    #[test]
    fn add_gradient_is_ones_on_both_sides() {
        let mut tape = GradTape::new();
        let a = tape.leaf(rand_t(&[1, 1, 2, 2], 24));
        let b = tape.leaf(rand_t(&[1, 1, 2, 2], 25));
        let y = tape.add(a, b).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.grad(a).data(), &[1.0; 4]);
        assert_eq!(grads.grad(b).data(), &[1.0; 4]);
    }

    #[test]
    fn split_then_concat_is_identity() {
        let input = rand_t(&[2, 5, 3, 3], 26);
        let mut tape = GradTape::new();
        let x = tape.leaf(input.clone());
        let parts = tape.split_channels(x, &[2, 3]).unwrap();
        assert_eq!(tape.value(parts[0]).shape(), &[2, 2, 3, 3]);
        assert_eq!(tape.value(parts[1]).shape(), &[2, 3, 3, 3]);
        let back = tape.concat_channels(&parts).unwrap();
        assert_eq!(tape.value(back).data(), input.data());
    }

    #[test]
    fn concat_counts_channels() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 4, 4]);
        let wrong = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.concat_channels(&[a, wrong]).is_err());
        assert!(tape.split_channels(y, &[2, 2]).is_err());
    }

    #[test]
    fn concat_split_gradients_match_finite_differences() {
        let params = [rand_t(&[1, 2, 3, 3], 27), rand_t(&[1, 3, 3, 3], 28)];
        let target = rand_t(&[1, 3, 3, 3], 29);
        check_grads(
            &params,
            &|tape, ids| {
                let cat = tape.concat_channels(ids)?;
                let parts = tape.split_channels(cat, &[1, 3, 1])?;
                tape.mse_loss(parts[1], &target)
            },
            1e-6,
        );
    }

    #[test]
    fn max_over_channels_picks_the_largest() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3, 1, 1], vec![0.2, 0.9, 0.5]).unwrap());
        let y = tape.max_over_channels(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[0.9]);
    }

    #[test]
    fn max_over_single_channel_is_identity() {
        let input = rand_t(&[2, 1, 3, 3], 30);
        let mut tape = GradTape::new();
        let x = tape.leaf(input.clone());
        let y = tape.max_over_channels(x).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn max_gradient_reaches_only_the_argmax_channel() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3, 1, 2], vec![0.2, -1.0, 0.9, 0.3, 0.5, 0.8]).unwrap());
        let y = tape.max_over_channels(x).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        // Pixel 0 argmax is channel 1 (0.9); pixel 1 argmax is channel 2 (0.8).
        assert_eq!(grads.grad(x).data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_over_channels_gradients_match_finite_differences() {
        let params = [rand_t(&[1, 4, 5, 5], 31)];
        let target = rand_t(&[1, 1, 5, 5], 32);
        check_grads(
            &params,
            &|tape, ids| {
                let y = tape.max_over_channels(ids[0])?;
                tape.mse_loss(y, &target)
            },
            1e-6,
        );
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let params = [rand_t(&[1, 2, 4, 4], 33)];
        let target = rand_t(&[1, 2, 4, 4], 34);
        for kind in [
            ActivationKind::PeakAct,
            ActivationKind::Sigmoid,
            ActivationKind::ReLU,
            ActivationKind::LeakyReLU(0.1),
        ] {
            check_grads(
                &params,
                &|tape, ids| {
                    let y = tape.activation(kind, ids[0]);
                    tape.mse_loss(y, &target)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn l1_and_reductions_match_finite_differences() {
        // Values bounded away from zero so the |x| kink never straddles ±ε.
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut t = Tensor::rand_uniform(&[2, 3], 0.5, 2.0, &mut rng);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        check_grads(
            &[t],
            &|tape, ids| {
                let l1 = tape.l1_norm(ids[0]);
                let mean = tape.mean_all(ids[0]);
                let scaled = tape.scale(mean, 3.0);
                let shifted = tape.add_scalar(scaled, 1.0);
                tape.add(l1, shifted)
            },
            1e-6,
        );
    }

    #[test]
    fn backward_requires_finite_scalar_loss() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
        let bad = tape.leaf(Tensor::scalar(f64::NAN));
        assert!(tape.backward(bad).is_err());
    }

    #[test]
    fn branch_signature_stable_for_smooth_graphs() {
        let input = rand_t(&[1, 2, 3, 3], 36);
        let run = |t: &Tensor| {
            let mut tape = GradTape::new();
            let x = tape.leaf(t.clone());
            let _ = tape.activation(ActivationKind::Sigmoid, x);
            tape.branch_signature()
        };
        let mut shifted = input.clone();
        for v in shifted.data_mut() {
            *v += 0.37;
        }
        assert_eq!(run(&input), run(&shifted));
    }
}
