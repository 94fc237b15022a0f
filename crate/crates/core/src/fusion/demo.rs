//! Desk-scale end-to-end exercise of a CF neck: a tiny three-stage conv
//! backbone feeds the neck, which regresses per-stage smoothed random target
//! maps under MSE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{sgd_step, ConvLayer, GradTape, ResizeMode, Tensor};

use super::{build_cf_neck, CfConfig};

pub struct DemoOptions {
    pub steps: usize,
    pub lr: f64,
    /// Base spatial resolution of the synthetic input.
    pub base_resolution: usize,
    /// Stop once the loss drops below this value.
    pub target_mse: Option<f64>,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            steps: 500,
            lr: 0.05,
            base_resolution: 16,
            target_mse: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DemoLog {
    pub step_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Runs the regression; deterministic in (config, seed, options). Aborts with
/// a diagnostic if the loss exceeds 10× its initial value.
pub fn overfit_demo(config: &CfConfig, seed: u64, opts: &DemoOptions) -> Result<DemoLog> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = opts.base_resolution;

    // Backbone: a conv chain producing one feature map per input stage.
    let mut backbone = Vec::with_capacity(config.in_stages.len());
    let mut prev_channels = 3;
    let mut prev_scale = 1;
    for stage in &config.in_stages {
        if stage.scale % prev_scale != 0 {
            return Err(Error::InvalidArgument(format!(
                "stage scale {} not a multiple of previous {}",
                stage.scale, prev_scale
            )));
        }
        let stride = stage.scale / prev_scale;
        backbone.push(ConvLayer::init_uniform(
            stage.channels,
            prev_channels,
            3,
            stride.max(1),
            1,
            0.3,
            &mut rng,
        ));
        prev_channels = stage.channels;
        prev_scale = stage.scale;
    }

    let mut neck = build_cf_neck(config, seed.wrapping_add(1))?;

    let input = Tensor::rand_uniform(&[1, 3, res, res], 0.0, 1.0, &mut rng);

    // Smoothed random targets: random at half resolution, replicated up.
    let mut targets = Vec::with_capacity(config.out_stages.len());
    for stage in &config.out_stages {
        let (h, w) = (res / stage.scale, res / stage.scale);
        let coarse = Tensor::rand_uniform(&[1, stage.channels, h / 2, w / 2], 0.0, 1.0, &mut rng);
        let mut tape = GradTape::new();
        let id = tape.leaf(coarse);
        let up = tape.resize(id, h, w, ResizeMode::Up)?;
        targets.push(tape.value(up).clone());
    }

    let mut log = DemoLog::default();
    let mut initial_loss = None;
    for step in 0..opts.steps {
        let mut tape = GradTape::new();
        let input_id = tape.leaf(input.clone());
        let mut stage_features = Vec::with_capacity(backbone.len());
        let mut backbone_ids = Vec::new();
        let mut x = input_id;
        for layer in &backbone {
            let (out, w, b) = tape.apply_conv(x, layer)?;
            backbone_ids.push(w);
            if let Some(b) = b {
                backbone_ids.push(b);
            }
            stage_features.push(out);
            x = out;
        }
        let (exits, neck_ids) = neck.forward(&mut tape, &stage_features)?;
        let mut loss = None;
        for (exit, target) in exits.iter().zip(&targets) {
            let mse = tape.mse_loss(*exit, target)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, mse)?,
                None => mse,
            });
        }
        let loss = loss.expect("at least one out stage");
        let n_stages = targets.len() as f64;
        let loss = tape.scale(loss, 1.0 / n_stages);
        let loss_value = tape.value(loss).item();
        let initial = *initial_loss.get_or_insert(loss_value);
        if !loss_value.is_finite() || loss_value > 10.0 * initial {
            return Err(Error::Diverged {
                epoch: step,
                message: format!("loss {} vs initial {}", loss_value, initial),
            });
        }
        log.step_losses.push(loss_value);
        if let Some(target) = opts.target_mse {
            if loss_value < target {
                log.stopped_early = true;
                break;
            }
        }
        let grads = tape.backward(loss)?;
        let mut params: Vec<&mut Tensor> = Vec::new();
        for layer in &mut backbone {
            params.push(&mut layer.weights);
            if let Some(b) = layer.bias.as_mut() {
                params.push(b);
            }
        }
        params.extend(neck.params_mut());
        let all_ids: Vec<_> = backbone_ids.iter().chain(&neck_ids).collect();
        assert_eq!(params.len(), all_ids.len(), "param/id order drift");
        let grad_refs: Vec<&Tensor> = all_ids.iter().map(|id| grads.grad(**id)).collect();
        sgd_step(&mut params, &grad_refs, opts.lr, 0.0);
    }
    Ok(log)
}
