//! Forward/backward kernels for the tape primitives that carry real math.

use crate::error::{Error, Result};

use super::tape::ResizeMode;
use super::Tensor;

pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, k, kw) = weights.dims4()?;
    if k != kw {
        return Err(Error::InvalidArgument(format!("non-square kernel {}×{}", k, kw)));
    }
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {} channels, weights expect {}",
            cin, wcin
        )));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: padded spatial dims {}×{} smaller than kernel {}",
            h + 2 * padding,
            w + 2 * padding,
            k
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias shape {:?} vs Cout {}",
                b.shape(),
                cout
            )));
        }
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let x = input.data();
    let wt = weights.data();
    let col = ColRanges::new(w, wo, k, stride, padding);
    {
        let o = out.data_mut();
        for ni in 0..n {
            for co in 0..cout {
                let obase = ((ni * cout) + co) * ho * wo;
                for ci in 0..cin {
                    let xbase = ((ni * cin) + ci) * h * w;
                    let wbase = ((co * cin) + ci) * k * k;
                    for yo in 0..ho {
                        let yi0 = (yo * stride) as isize - padding as isize;
                        let orow = obase + yo * wo;
                        for ky in 0..k {
                            let yi = yi0 + ky as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let xrow = xbase + yi as usize * w;
                            for kx in 0..k {
                                let wv = wt[wbase + ky * k + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (lo, hi, xi0) = col.range(kx);
                                if lo >= hi {
                                    continue;
                                }
                                if stride == 1 {
                                    let ov = &mut o[orow + lo..orow + hi];
                                    let xv = &x[xrow + xi0..xrow + xi0 + (hi - lo)];
                                    for (ov, &xv) in ov.iter_mut().zip(xv) {
                                        *ov += wv * xv;
                                    }
                                } else {
                                    for (i, xo) in (lo..hi).enumerate() {
                                        o[orow + xo] += wv * x[xrow + xi0 + i * stride];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let bv = b.data()[co];
                    for v in &mut o[obase..obase + ho * wo] {
                        *v += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Valid output-column window per kernel column: output column `xo` reads
/// input column `xo·stride − padding + kx`, which must land in `[0, w)`.
struct ColRanges {
    ranges: Vec<(usize, usize, usize)>,
}

impl ColRanges {
    fn new(w: usize, wo: usize, k: usize, stride: usize, padding: usize) -> Self {
        let ranges = (0..k)
            .map(|kx| {
                let lo = if kx >= padding {
                    0
                } else {
                    (padding - kx).div_ceil(stride)
                };
                let hi = (w + padding - kx).div_ceil(stride).min(wo);
                if lo >= hi {
                    (0, 0, 0)
                } else {
                    (lo, hi, lo * stride + kx - padding)
                }
            })
            .collect();
        ColRanges { ranges }
    }

    /// (first output column, one-past-last output column, matching first
    /// input column) for kernel column `kx`.
    fn range(&self, kx: usize) -> (usize, usize, usize) {
        self.ranges[kx]
    }
}

/// Gradients w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    gout: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = input.dims4().expect("checked in forward");
    let (cout, _, k, _) = weights.dims4().expect("checked in forward");
    let (_, _, ho, wo) = gout.dims4().expect("checked in forward");
    let mut din = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[cout]);
    let x = input.data();
    let wt = weights.data();
    let g = gout.data();
    let col = ColRanges::new(w, wo, k, stride, padding);
    let di = din.data_mut();
    let dwt = dw.data_mut();
    let dbias = db.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            let obase = ((ni * cout) + co) * ho * wo;
            for ci in 0..cin {
                let xbase = ((ni * cin) + ci) * h * w;
                let wbase = ((co * cin) + ci) * k * k;
                for yo in 0..ho {
                    let yi0 = (yo * stride) as isize - padding as isize;
                    let orow = obase + yo * wo;
                    for ky in 0..k {
                        let yi = yi0 + ky as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let xrow = xbase + yi as usize * w;
                        for kx in 0..k {
                            let wv = wt[wbase + ky * k + kx];
                            let (lo, hi, xi0) = col.range(kx);
                            if lo >= hi {
                                continue;
                            }
                            let mut wgrad = 0.0;
                            if stride == 1 {
                                let gv = &g[orow + lo..orow + hi];
                                let xs = xrow + xi0;
                                let xv = &x[xs..xs + (hi - lo)];
                                let dv = &mut di[xs..xs + (hi - lo)];
                                for (dv, &gv) in dv.iter_mut().zip(gv) {
                                    *dv += gv * wv;
                                }
                                // 4-way unrolled dot product so the reduction
                                // vectorizes.
                                let mut acc = [0.0f64; 4];
                                let mut chunks = gv.chunks_exact(4).zip(xv.chunks_exact(4));
                                for (gc, xc) in &mut chunks {
                                    for i in 0..4 {
                                        acc[i] += gc[i] * xc[i];
                                    }
                                }
                                let rem = gv.len() / 4 * 4;
                                for (gv, xv) in gv[rem..].iter().zip(&xv[rem..]) {
                                    acc[0] += gv * xv;
                                }
                                wgrad = acc[0] + acc[1] + acc[2] + acc[3];
                            } else {
                                for (i, xo) in (lo..hi).enumerate() {
                                    let gv = g[orow + xo];
                                    let xi = xrow + xi0 + i * stride;
                                    wgrad += gv * x[xi];
                                    di[xi] += gv * wv;
                                }
                            }
                            dwt[wbase + ky * k + kx] += wgrad;
                        }
                    }
                }
            }
            let mut bgrad = 0.0;
            for v in &g[obase..obase + ho * wo] {
                bgrad += v;
            }
            dbias[co] += bgrad;
        }
    }
    (din, dw, db)
}

/// Returns the resized tensor plus the integer scale factors (fh, fw).
pub fn resize_forward(
    input: &Tensor,
    target_h: usize,
    target_w: usize,
    mode: ResizeMode,
) -> Result<(Tensor, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let factor = |src: usize, dst: usize| -> Result<usize> {
        let (big, small) = match mode {
            ResizeMode::Up => (dst, src),
            ResizeMode::Down => (src, dst),
        };
        if small == 0 || big % small != 0 {
            return Err(Error::InvalidArgument(format!(
                "resize: non-integer scale ratio {} -> {}",
                src, dst
            )));
        }
        Ok(big / small)
    };
    let fh = factor(h, target_h)?;
    let fw = factor(w, target_w)?;
    let mut out = Tensor::zeros(&[n, c, target_h, target_w]);
    match mode {
        ResizeMode::Up => {
            for nc in 0..n * c {
                let src = &input.data()[nc * h * w..(nc + 1) * h * w];
                let dst = &mut out.data_mut()[nc * target_h * target_w..(nc + 1) * target_h * target_w];
                for y in 0..target_h {
                    for x in 0..target_w {
                        dst[y * target_w + x] = src[(y / fh) * w + x / fw];
                    }
                }
            }
        }
        ResizeMode::Down => {
            let inv = 1.0 / (fh * fw) as f64;
            for nc in 0..n * c {
                let src = &input.data()[nc * h * w..(nc + 1) * h * w];
                let dst = &mut out.data_mut()[nc * target_h * target_w..(nc + 1) * target_h * target_w];
                for y in 0..target_h {
                    for x in 0..target_w {
                        let mut s = 0.0;
                        for dy in 0..fh {
                            for dx in 0..fw {
                                s += src[(y * fh + dy) * w + x * fw + dx];
                            }
                        }
                        dst[y * target_w + x] = s * inv;
                    }
                }
            }
        }
    }
    Ok((out, fh, fw))
}

pub fn resize_backward(
    gout: &Tensor,
    in_shape: &[usize],
    fh: usize,
    fw: usize,
    mode: ResizeMode,
) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, _, ho, wo) = gout.dims4().expect("rank 4");
    let mut din = Tensor::zeros(in_shape);
    match mode {
        ResizeMode::Up => {
            for nc in 0..n * c {
                let g = &gout.data()[nc * ho * wo..(nc + 1) * ho * wo];
                let d = &mut din.data_mut()[nc * h * w..(nc + 1) * h * w];
                for y in 0..ho {
                    for x in 0..wo {
                        d[(y / fh) * w + x / fw] += g[y * wo + x];
                    }
                }
            }
        }
        ResizeMode::Down => {
            let inv = 1.0 / (fh * fw) as f64;
            for nc in 0..n * c {
                let g = &gout.data()[nc * ho * wo..(nc + 1) * ho * wo];
                let d = &mut din.data_mut()[nc * h * w..(nc + 1) * h * w];
                for y in 0..ho {
                    for x in 0..wo {
                        let gv = g[y * wo + x] * inv;
                        for dy in 0..fh {
                            for dx in 0..fw {
                                d[(y * fh + dy) * w + x * fw + dx] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Saved statistics for the batchnorm backward pass.
pub struct BnCtx {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Inference mode (stored statistics): gradients skip the dependence of
    /// the statistics on the input.
    pub frozen_stats: bool,
}

pub struct BnForward {
    pub output: Tensor,
    pub ctx: BnCtx,
}

pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    running_stats: Option<(&Tensor, &Tensor)>,
) -> Result<BnForward> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm: gamma {:?} / beta {:?} vs C={}",
            gamma.shape(),
            beta.shape(),
            c
        )));
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::InvalidArgument("batchnorm over zero elements".into()));
    }
    let plane = h * w;
    let (mean, var, frozen) = match running_stats {
        Some((rm, rv)) => {
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::ShapeMismatch(
                    "batchnorm: running stats must have length C".into(),
                ));
            }
            (rm.data().to_vec(), rv.data().to_vec(), true)
        }
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &input.data()[base..base + plane] {
                        s += v;
                    }
                }
                let mu = s / m as f64;
                let mut sv = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &input.data()[base..base + plane] {
                        sv += (v - mu) * (v - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = sv / m as f64;
            }
            (mean, var, false)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(input.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for (o, &v) in out.data_mut()[base..base + plane]
                .iter_mut()
                .zip(&input.data()[base..base + plane])
            {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    Ok(BnForward {
        output: out,
        ctx: BnCtx {
            mean,
            inv_std,
            frozen_stats: frozen,
        },
    })
}

pub fn batchnorm_backward(
    gout: &Tensor,
    input: &Tensor,
    gamma: &Tensor,
    ctx: &BnCtx,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = input.dims4().expect("rank 4");
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut din = Tensor::zeros(input.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mu = ctx.mean[ci];
        let is = ctx.inv_std[ci];
        let g = gamma.data()[ci];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let xhat = (input.data()[i] - mu) * is;
                let dy = gout.data()[i];
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let dy = gout.data()[i];
                let dx = if ctx.frozen_stats {
                    g * is * dy
                } else {
                    let xhat = (input.data()[i] - mu) * is;
                    g * is * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                };
                din.data_mut()[i] = dx;
            }
        }
    }
    (din, dgamma, dbeta)
}
