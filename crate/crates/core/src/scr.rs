//! Unsupervised snow-response network: a small all-convolutional net with
//! Peak Act after every layer, trained against an all-ones target with a
//! max-over-channels training head so individual channels specialize. The
//! 32-channel testing head provides the per-channel maps used for snow
//! coverage computation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, ConvLayer, GradTape, Tensor, TensorId};
use crate::ActivationKind;

pub const OUT_CHANNELS: usize = 32;

/// Thresholded single-channel snow map.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMap {
    pub w: usize,
    pub h: usize,
    pub data: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ScrModel {
    pub layers: Vec<ConvLayer>,
    pub selected_channel: Option<usize>,
    pub binarize_threshold: f64,
}

/// Loss weights: alpha·mean(1 − O) + beta·Σ|p|.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            alpha: 1.0,
            beta: 1e-4,
        }
    }
}

pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once the epoch loss drops to or below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 0.01,
            epochs: 100,
            seed: 0,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

#[derive(Debug)]
pub struct SnowMaps {
    /// Testing-head response of the selected channel, H×W.
    pub float_map: Tensor,
    pub binary: BinaryMap,
}

#[derive(Debug, Clone)]
pub struct ChannelSelection {
    pub channel: usize,
    pub scores: Vec<f64>,
    /// No channel separated the calibration sets; the argmax is still
    /// returned.
    pub all_nonpositive: bool,
}

/// 4 conv layers, 3×3 kernels, stride 1, pad 1, channels 3→16→32→32→32,
/// Peak Act after every conv. Weights uniform in [−0.1, 0.1] from the seed.
pub fn build_scr_model(seed: u64) -> ScrModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [3usize, 16, 32, 32, OUT_CHANNELS];
    let layers = widths
        .windows(2)
        .map(|w| ConvLayer::init_uniform(w[1], w[0], 3, 1, 1, 0.1, &mut rng))
        .collect();
    ScrModel {
        layers,
        selected_channel: None,
        binarize_threshold: 0.5,
    }
}

impl ScrModel {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn architecture_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| {
                format!(
                    "conv{k}x{k}:{cin}->{cout}",
                    k = l.kernel_size(),
                    cin = l.in_channels(),
                    cout = l.out_channels()
                )
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Forward pass to the testing head (N×32×H×W). Returns the output id and
    /// the (weight, bias) ids of every layer in order.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        input: TensorId,
    ) -> Result<(TensorId, Vec<(TensorId, Option<TensorId>)>)> {
        let mut x = input;
        let mut params = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, w, b) = tape.apply_conv(x, layer)?;
            x = tape.activation(ActivationKind::PeakAct, out);
            params.push((w, b));
        }
        Ok((x, params))
    }

    /// Training head: per-pixel max over the 32 channels.
    pub fn forward_training_head(
        &self,
        tape: &mut GradTape,
        input: TensorId,
    ) -> Result<(TensorId, Vec<(TensorId, Option<TensorId>)>)> {
        let (test, params) = self.forward(tape, input)?;
        Ok((tape.max_over_channels(test)?, params))
    }

    /// Testing-head maps for the selected channel plus its binarization.
    pub fn infer_snow_map(&self, image: &Tensor) -> Result<SnowMaps> {
        let channel = self.selected_channel.ok_or_else(|| {
            Error::InvalidArgument(
                "no snow channel selected; run channel selection or set one explicitly".into(),
            )
        })?;
        let maps = self.infer_all_channels(image)?;
        let (_, c, h, w) = maps.dims4()?;
        if channel >= c {
            return Err(Error::InvalidArgument(format!(
                "selected channel {} out of range 0..{}",
                channel, c
            )));
        }
        let plane = h * w;
        let data = maps.data()[channel * plane..(channel + 1) * plane].to_vec();
        let binary = BinaryMap {
            w,
            h,
            data: data.iter().map(|&v| v >= self.binarize_threshold).collect(),
        };
        Ok(SnowMaps {
            float_map: Tensor::from_vec(&[h, w], data)?,
            binary,
        })
    }

    /// Raw 32-channel testing-head output (1×32×H×W) for an image.
    pub fn infer_all_channels(&self, image: &Tensor) -> Result<Tensor> {
        let batched = as_batched(image)?;
        let mut tape = GradTape::new();
        let input = tape.leaf(batched);
        let (test, _) = self.forward(&mut tape, input)?;
        Ok(tape.value(test).clone())
    }
}

fn as_batched(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        &[c, h, w] => image.reshape(&[1, c, h, w]),
        &[1, _, _, _] => Ok(image.clone()),
        other => Err(Error::ShapeMismatch(format!(
            "expected C×H×W image, got {:?}",
            other
        ))),
    }
}

/// Eq-style loss on a training-head map: alpha·mean(1 − O) + beta·Σ|p| over
/// every weight and bias. The max over Peak Act outputs guarantees O ≤ 1, so
/// the signed residual is nonnegative.
pub fn scr_loss(
    tape: &mut GradTape,
    training_head: TensorId,
    params: &[(TensorId, Option<TensorId>)],
    spec: &LossSpec,
) -> Result<TensorId> {
    let neg = tape.scale(training_head, -1.0);
    let residual = tape.add_scalar(neg, 1.0);
    let mean = tape.mean_all(residual);
    let mut loss = tape.scale(mean, spec.alpha);
    if spec.beta != 0.0 {
        let mut reg: Option<TensorId> = None;
        for &(w, b) in params {
            let lw = tape.l1_norm(w);
            reg = Some(match reg {
                Some(r) => tape.add(r, lw)?,
                None => lw,
            });
            if let Some(b) = b {
                let lb = tape.l1_norm(b);
                reg = Some(tape.add(reg.unwrap(), lb)?);
            }
        }
        if let Some(r) = reg {
            let scaled = tape.scale(r, spec.beta);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

/// Per-image SGD over the image list, deterministic in the seed (the seed
/// drives the per-epoch visiting order). Aborts on a non-finite loss.
pub fn train_scr(
    model: &mut ScrModel,
    images: &[Tensor],
    spec: &LossSpec,
    opts: &TrainOptions,
) -> Result<TrainingLog> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let batched: Vec<Tensor> = images.iter().map(as_batched).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = TrainingLog::default();
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..batched.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let loss = train_step(model, &batched[idx], spec, opts.lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::Diverged {
                    epoch,
                    message: msg,
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("loss became {}", loss),
                });
            }
            epoch_loss += loss;
        }
        epoch_loss /= batched.len() as f64;
        log.epoch_losses.push(epoch_loss);
        if let Some(target) = opts.target_loss {
            if epoch_loss <= target {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok(log)
}

fn train_step(model: &mut ScrModel, image: &Tensor, spec: &LossSpec, lr: f64) -> Result<f64> {
    let mut tape = GradTape::new();
    let input = tape.leaf(image.clone());
    let (head, params) = model.forward_training_head(&mut tape, input)?;
    let loss = scr_loss(&mut tape, head, &params, spec)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    for (layer, &(w, b)) in model.layers.iter_mut().zip(&params) {
        let mut refs: Vec<&mut Tensor> = vec![&mut layer.weights];
        let mut gs: Vec<&Tensor> = vec![grads.grad(w)];
        if let (Some(bias), Some(bid)) = (layer.bias.as_mut(), b) {
            refs.push(bias);
            gs.push(grads.grad(bid));
        }
        crate::tensor::sgd_step(&mut refs, &gs, lr, 0.0);
    }
    Ok(loss_value)
}

/// Scores every channel by (mean binarized response on snow images) −
/// (mean binarized response on clean images) and selects the argmax, ties
/// toward the lowest index. The result is stored on the model.
pub fn select_snow_channel(
    model: &mut ScrModel,
    snow_calib: &[Tensor],
    clean_calib: &[Tensor],
) -> Result<ChannelSelection> {
    if snow_calib.is_empty() || clean_calib.is_empty() {
        return Err(Error::InvalidArgument(
            "both calibration sets must be non-empty".into(),
        ));
    }
    let snow = mean_binarized_response(model, snow_calib)?;
    let clean = mean_binarized_response(model, clean_calib)?;
    let scores: Vec<f64> = snow.iter().zip(&clean).map(|(s, c)| s - c).collect();
    let mut channel = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[channel] {
            channel = c;
        }
    }
    let all_nonpositive = scores.iter().all(|&s| s <= 0.0);
    model.selected_channel = Some(channel);
    Ok(ChannelSelection {
        channel,
        scores,
        all_nonpositive,
    })
}

fn mean_binarized_response(model: &ScrModel, images: &[Tensor]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; OUT_CHANNELS];
    for image in images {
        let maps = model.infer_all_channels(image)?;
        let (_, c, h, w) = maps.dims4()?;
        let plane = h * w;
        for (ci, a) in acc.iter_mut().enumerate().take(c) {
            let on = maps.data()[ci * plane..(ci + 1) * plane]
                .iter()
                .filter(|&&v| v >= model.binarize_threshold)
                .count();
            *a += on as f64 / plane as f64;
        }
    }
    for a in &mut acc {
        *a /= images.len() as f64;
    }
    Ok(acc)
}

/// Checkpoint layout: `layer<i>.weights.snft` / `layer<i>.bias.snft` in the
/// tensor binary format plus a `meta.txt` with the architecture string,
/// selected channel, and binarization threshold.
pub fn save_checkpoint(model: &ScrModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, layer) in model.layers.iter().enumerate() {
        let mut f = std::fs::File::create(dir.join(format!("layer{}.weights.snft", i)))?;
        write_tensor(&mut f, &layer.weights)?;
        if let Some(bias) = &layer.bias {
            let mut f = std::fs::File::create(dir.join(format!("layer{}.bias.snft", i)))?;
            write_tensor(&mut f, bias)?;
        }
    }
    let meta = format!(
        "architecture={}\nselected_channel={}\nbinarize_threshold={}\n",
        model.architecture_string(),
        model
            .selected_channel
            .map_or("none".to_string(), |c| c.to_string()),
        model.binarize_threshold,
    );
    std::fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ScrModel> {
    let meta = std::fs::read_to_string(dir.join("meta.txt"))?;
    let mut architecture = String::new();
    let mut selected_channel = None;
    let mut binarize_threshold = 0.5;
    for line in meta.lines() {
        if let Some((key, value)) = line.split_once('=') {
            match key {
                "architecture" => architecture = value.to_string(),
                "selected_channel" if value != "none" => {
                    selected_channel = Some(value.parse().map_err(|_| Error::Validation(
                        format!("bad selected_channel {:?} in checkpoint", value),
                    ))?);
                }
                "binarize_threshold" => {
                    binarize_threshold = value.parse().map_err(|_| Error::Validation(
                        format!("bad binarize_threshold {:?} in checkpoint", value),
                    ))?;
                }
                _ => {}
            }
        }
    }
    let num_layers = architecture.split(',').count();
    let mut layers = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        let mut f = std::fs::File::open(dir.join(format!("layer{}.weights.snft", i)))?;
        let weights = read_tensor(&mut f)?;
        let bias_path = dir.join(format!("layer{}.bias.snft", i));
        let bias = if bias_path.exists() {
            let mut f = std::fs::File::open(bias_path)?;
            Some(read_tensor(&mut f)?)
        } else {
            None
        };
        layers.push(ConvLayer::new(weights, bias, 1, 1)?);
    }
    Ok(ScrModel {
        layers,
        selected_channel,
        binarize_threshold,
    })
}
