//! Cross Fusion: a neck block that fuses every input stage into every output
//! stage in one step. Each output branch sums one conv per input stage (after
//! resizing to the branch scale), then applies batch normalization, PReLU, and
//! a Cross Stage Partial block. Includes an FPN+PANet reference neck and the
//! structural analyses (path length, parameter counts, PCA cluster distances).

mod config;
mod demo;
mod neck;
mod pca;

pub use config::{parse_cf_config, parse_cf_config_file};
pub use demo::{overfit_demo, DemoLog, DemoOptions};
pub use neck::{
    build_cf_neck, build_fpn_panet_neck, count_params, max_path_length, path_length, NeckGraph,
    NodeKind, ParamBreakdown,
};
pub use pca::{pca_cluster_distance, PcaResult};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvLayer, GradTape, ResizeMode, Tensor, TensorId};

/// One backbone stage: channel width and power-of-two downsampling factor
/// relative to the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub scale: usize,
}

/// Declarative description of a Cross Fusion neck: input/output stages, the
/// number of stacked CF layers (n), and the gOctConv kernel size (K).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfConfig {
    pub in_stages: Vec<StageSpec>,
    pub out_stages: Vec<StageSpec>,
    pub n: usize,
    pub k: usize,
}

pub(crate) fn validate_stages(stages: &[StageSpec], label: &str) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument(format!("{} stages empty", label)));
    }
    for s in stages {
        if s.channels == 0 {
            return Err(Error::InvalidArgument(format!("{}: zero channels", label)));
        }
        if !s.scale.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "{}: scale {} is not a power of two",
                label, s.scale
            )));
        }
    }
    for pair in stages.windows(2) {
        if pair[1].scale <= pair[0].scale {
            return Err(Error::InvalidArgument(format!(
                "{}: scales must be strictly increasing",
                label
            )));
        }
    }
    Ok(())
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.in_stages, "in")?;
        validate_stages(&self.out_stages, "out")?;
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be ≥ 1".into()));
        }
        if self.k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("K={} must be odd", self.k)));
        }
        Ok(())
    }
}

/// Resize a feature map from one stage scale to another on the tape.
/// Identity when scales match.
fn resize_to_scale(
    tape: &mut GradTape,
    x: TensorId,
    from_scale: usize,
    to_scale: usize,
) -> Result<TensorId> {
    if from_scale == to_scale {
        return Ok(x);
    }
    let (_, _, h, w) = tape.value(x).dims4()?;
    if to_scale > from_scale {
        let f = to_scale / from_scale;
        tape.resize(x, h / f, w / f, ResizeMode::Down)
    } else {
        let f = from_scale / to_scale;
        tape.resize(x, h * f, w * f, ResizeMode::Up)
    }
}

/// gOctConv: one independent K×K conv per (input stage, output stage) pair;
/// each output branch is the elementwise sum over input stages of
/// Conv(Resize(X)).
#[derive(Debug, Clone)]
pub struct GoctConv {
    pub in_stages: Vec<StageSpec>,
    pub out_stages: Vec<StageSpec>,
    pub k: usize,
    /// convs[t][s]: input stage s → output stage t.
    pub convs: Vec<Vec<ConvLayer>>,
}

impl GoctConv {
    pub fn init<R: Rng>(
        in_stages: &[StageSpec],
        out_stages: &[StageSpec],
        k: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_stages(in_stages, "in")?;
        validate_stages(out_stages, "out")?;
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("K={} must be odd", k)));
        }
        let convs = out_stages
            .iter()
            .map(|os| {
                in_stages
                    .iter()
                    .map(|is| {
                        ConvLayer::init_uniform(os.channels, is.channels, k, 1, (k - 1) / 2, scale, rng)
                    })
                    .collect()
            })
            .collect();
        Ok(GoctConv {
            in_stages: in_stages.to_vec(),
            out_stages: out_stages.to_vec(),
            k,
            convs,
        })
    }

    /// Checks that input i carries in_stages[i] channels and that spatial
    /// dims are consistent with the stage scales.
    fn check_inputs(&self, tape: &GradTape, inputs: &[TensorId]) -> Result<()> {
        if inputs.len() != self.in_stages.len() {
            return Err(Error::ShapeMismatch(format!(
                "goctconv: {} inputs for {} stages",
                inputs.len(),
                self.in_stages.len()
            )));
        }
        let mut base: Option<(usize, usize)> = None;
        for (x, spec) in inputs.iter().zip(&self.in_stages) {
            let (_, c, h, w) = tape.value(*x).dims4()?;
            if c != spec.channels {
                return Err(Error::ShapeMismatch(format!(
                    "goctconv: input has {} channels, stage expects {}",
                    c, spec.channels
                )));
            }
            let full = (h * spec.scale, w * spec.scale);
            match base {
                None => base = Some(full),
                Some(b) if b != full => {
                    return Err(Error::ShapeMismatch(format!(
                        "goctconv: stage scale mismatch, base resolution {:?} vs {:?}",
                        b, full
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Returns output branch ids and the flat parameter ids (matching
    /// [`GoctConv::params_mut`] order).
    pub fn forward(
        &self,
        tape: &mut GradTape,
        inputs: &[TensorId],
    ) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
        self.check_inputs(tape, inputs)?;
        let mut outs = Vec::with_capacity(self.out_stages.len());
        let mut param_ids = Vec::new();
        for (t, os) in self.out_stages.iter().enumerate() {
            let mut acc: Option<TensorId> = None;
            for (s, is) in self.in_stages.iter().enumerate() {
                let resized = resize_to_scale(tape, inputs[s], is.scale, os.scale)?;
                let (y, w, b) = tape.apply_conv(resized, &self.convs[t][s])?;
                param_ids.push(w);
                if let Some(b) = b {
                    param_ids.push(b);
                }
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            outs.push(acc.expect("at least one in stage"));
        }
        Ok((outs, param_ids))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for row in &mut self.convs {
            for conv in row {
                out.push(&mut conv.weights);
                if let Some(b) = conv.bias.as_mut() {
                    out.push(b);
                }
            }
        }
        out
    }

    /// Conv-weight element count Σ_{s,t} c_in[s]·c_out[t]·K².
    pub fn conv_weight_count(&self) -> usize {
        self.convs
            .iter()
            .flatten()
            .map(|c| c.weights.len())
            .sum()
    }

    pub fn bias_count(&self) -> usize {
        self.convs
            .iter()
            .flatten()
            .map(|c| c.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }
}

/// Cross Stage Partial block: the channels split in half, one half passes a
/// 1×1→3×3 bottleneck with a residual add, then the halves re-concatenate
/// through a final 1×1 fusion conv. Channel count is preserved.
#[derive(Debug, Clone)]
pub struct CspBlock {
    pub split_a: ConvLayer,
    pub split_b: ConvLayer,
    pub bottleneck1: ConvLayer,
    pub bottleneck2: ConvLayer,
    pub fuse: ConvLayer,
}

impl CspBlock {
    pub fn init<R: Rng>(channels: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "csp requires an even channel count, got {}",
                channels
            )));
        }
        let half = channels / 2;
        Ok(CspBlock {
            split_a: ConvLayer::init_uniform(half, channels, 1, 1, 0, scale, rng),
            split_b: ConvLayer::init_uniform(half, channels, 1, 1, 0, scale, rng),
            bottleneck1: ConvLayer::init_uniform(half, half, 1, 1, 0, scale, rng),
            bottleneck2: ConvLayer::init_uniform(half, half, 3, 1, 1, scale, rng),
            fuse: ConvLayer::init_uniform(channels, channels, 1, 1, 0, scale, rng),
        })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        input: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let mut param_ids = Vec::new();
        let conv = |tape: &mut GradTape, x: TensorId, layer: &ConvLayer, ids: &mut Vec<TensorId>| -> Result<TensorId> {
            let (y, w, b) = tape.apply_conv(x, layer)?;
            ids.push(w);
            if let Some(b) = b {
                ids.push(b);
            }
            Ok(y)
        };
        let a = conv(tape, input, &self.split_a, &mut param_ids)?;
        let b = conv(tape, input, &self.split_b, &mut param_ids)?;
        let t = conv(tape, a, &self.bottleneck1, &mut param_ids)?;
        let t = conv(tape, t, &self.bottleneck2, &mut param_ids)?;
        let a = tape.add(a, t)?;
        let cat = tape.concat_channels(&[a, b])?;
        let out = conv(tape, cat, &self.fuse, &mut param_ids)?;
        Ok((out, param_ids))
    }

    fn layers(&self) -> [&ConvLayer; 5] {
        [
            &self.split_a,
            &self.split_b,
            &self.bottleneck1,
            &self.bottleneck2,
            &self.fuse,
        ]
    }

    fn layers_mut(&mut self) -> [&mut ConvLayer; 5] {
        [
            &mut self.split_a,
            &mut self.split_b,
            &mut self.bottleneck1,
            &mut self.bottleneck2,
            &mut self.fuse,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(&mut layer.weights);
            if let Some(b) = layer.bias.as_mut() {
                out.push(b);
            }
        }
        out
    }

    pub fn conv_weight_count(&self) -> usize {
        self.layers().iter().map(|l| l.weights.len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }
}

/// Post-summation pipeline of one output branch: BN → PReLU → CSP.
#[derive(Debug, Clone)]
pub struct BranchPost {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub prelu_slope: Tensor,
    pub csp: CspBlock,
    pub bn_eps: f64,
}

impl BranchPost {
    pub fn init<R: Rng>(channels: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(BranchPost {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            prelu_slope: Tensor::filled(&[channels], 0.25),
            csp: CspBlock::init(channels, scale, rng)?,
            bn_eps: 1e-5,
        })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        input: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let mut param_ids = Vec::new();
        let gamma = tape.leaf(self.gamma.clone());
        let beta = tape.leaf(self.beta.clone());
        let slope = tape.leaf(self.prelu_slope.clone());
        param_ids.extend([gamma, beta, slope]);
        let x = tape.batchnorm(input, gamma, beta, self.bn_eps, None)?;
        let x = tape.prelu(x, slope)?;
        let (out, csp_ids) = self.csp.forward(tape, x)?;
        param_ids.extend(csp_ids);
        Ok((out, param_ids))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.gamma, &mut self.beta, &mut self.prelu_slope];
        out.extend(self.csp.params_mut());
        out
    }
}

/// One full CF layer: gOctConv fusion, then BN → PReLU → CSP per output
/// branch.
#[derive(Debug, Clone)]
pub struct CfLayer {
    pub goct: GoctConv,
    pub branches: Vec<BranchPost>,
}

impl CfLayer {
    pub fn init<R: Rng>(
        in_stages: &[StageSpec],
        out_stages: &[StageSpec],
        k: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let goct = GoctConv::init(in_stages, out_stages, k, scale, rng)?;
        let branches = out_stages
            .iter()
            .map(|os| BranchPost::init(os.channels, scale, rng))
            .collect::<Result<_>>()?;
        Ok(CfLayer { goct, branches })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        inputs: &[TensorId],
    ) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
        let (sums, mut param_ids) = self.goct.forward(tape, inputs)?;
        let mut outs = Vec::with_capacity(sums.len());
        for (sum, branch) in sums.iter().zip(&self.branches) {
            let (out, ids) = branch.forward(tape, *sum)?;
            param_ids.extend(ids);
            outs.push(out);
        }
        Ok((outs, param_ids))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.goct.params_mut();
        for branch in &mut self.branches {
            out.extend(branch.params_mut());
        }
        out
    }
}
