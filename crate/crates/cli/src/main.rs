//! `snowfuse`: command-line frontend for the snow-response toolkit.
//!
//! One binary, subcommand style. Every command is deterministic given its
//! flags, seeds, and input files, and exits 0 only when its artifact was
//! fully produced.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use snowfuse_core::act::{self, ActivationKind};
use snowfuse_core::fusion::{
    build_cf_neck, build_fpn_panet_neck, count_params, max_path_length, overfit_demo,
    parse_cf_config_file, path_length, pca_cluster_distance, CfConfig, DemoOptions, NeckGraph,
    NodeKind,
};
use snowfuse_core::grading::{
    grade_image, scr_for_bbox, write_grading_report, GradingPolicy, GradingReport,
    ImageAggregate, LevelHistogram, PerImageRecord,
};
use snowfuse_core::io::{load_image, parse_coco, save_binary_map, save_image};
use snowfuse_core::scr::{
    build_scr_model, load_checkpoint, save_checkpoint, train_scr, LossSpec, ScrModel,
    TrainOptions,
};
use snowfuse_core::tensor::read_tensor;

#[derive(Parser)]
#[command(name = "snowfuse", version, about = "Snow-response training, grading, and Cross Fusion analysis")]
struct Cli {
    /// Worker threads for batched commands (falls back to SNOWFUSE_JOBS,
    /// then the core count).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregateArg {
    Max,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    PeakAct,
    Relu,
    LeakyRelu,
    Sigmoid,
}

#[derive(Subcommand)]
enum Command {
    /// Train the snow-response CNN on a directory of PPM/PGM images.
    TrainScr {
        /// Directory of training images (*.ppm, *.pgm).
        images_dir: PathBuf,
        /// Checkpoint output directory (also receives loss.csv).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop once the epoch loss drops to or below this value.
        #[arg(long)]
        target_loss: Option<f64>,
    },
    /// Run snow-map inference on one image.
    InferScr {
        /// Checkpoint directory written by train-scr.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image to analyse (PPM/PGM).
        #[arg(long)]
        image: PathBuf,
        /// Output directory for float_map.pgm, binary_map.pgm, scr.json.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the snow channel stored in the checkpoint.
        #[arg(long)]
        channel: Option<usize>,
        /// COCO annotation file; per-box SCRs are reported for the boxes of
        /// this image.
        #[arg(long)]
        coco: Option<PathBuf>,
    },
    /// Grade a COCO dataset by snow coverage rate.
    Grade {
        /// COCO annotation JSON.
        #[arg(long)]
        coco: PathBuf,
        #[arg(long)]
        images_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grading report output path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long)]
        t2: Option<f64>,
        #[arg(long)]
        t3: Option<f64>,
        /// Per-image aggregate over object SCRs.
        #[arg(long, value_enum, default_value = "max")]
        aggregate: AggregateArg,
        /// Override the snow channel stored in the checkpoint.
        #[arg(long)]
        channel: Option<usize>,
    },
    /// Compare a Cross Fusion neck against an FPN+PANet baseline.
    CfAnalyze {
        /// Neck configuration file (key = value text format).
        config: PathBuf,
        /// Optional JSON output path (the report also goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overfit a Cross Fusion neck to a synthetic target.
    CfDemo {
        /// Neck configuration file (key = value text format).
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Base spatial resolution of the synthetic input.
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        /// Stop once the MSE drops below this value.
        #[arg(long)]
        target_mse: Option<f64>,
        /// Optional CSV output (step,mse).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample an activation function and its gradient to CSV.
    ActDump {
        #[arg(long, value_enum, default_value = "peak-act")]
        kind: KindArg,
        /// Negative slope for leaky-relu.
        #[arg(long, default_value_t = 0.1)]
        slope: f64,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        max: f64,
        #[arg(long, default_value_t = 201)]
        samples: usize,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project C×H×W features to 2-D and report cluster distances.
    Pca {
        /// Feature tensor file (written by snowfuse-core's tensor format).
        #[arg(long)]
        features: PathBuf,
        /// Object mask as a PGM image (pixel ≥ 50% is object).
        #[arg(long)]
        mask: PathBuf,
        /// Optional JSON output path (the result also goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let jobs = resolve_jobs(cli.jobs)?;
    match cli.command {
        Command::TrainScr {
            images_dir,
            out,
            epochs,
            lr,
            seed,
            target_loss,
        } => cmd_train_scr(&images_dir, &out, epochs, lr, seed, target_loss),
        Command::InferScr {
            checkpoint,
            image,
            out_dir,
            channel,
            coco,
        } => cmd_infer_scr(&checkpoint, &image, &out_dir, channel, coco.as_deref()),
        Command::Grade {
            coco,
            images_dir,
            checkpoint,
            out,
            t1,
            t2,
            t3,
            aggregate,
            channel,
        } => {
            let mut policy = GradingPolicy::default();
            if let Some(v) = t1 {
                policy.t1 = v;
            }
            if let Some(v) = t2 {
                policy.t2 = v;
            }
            if let Some(v) = t3 {
                policy.t3 = v;
            }
            policy.image_aggregate = match aggregate {
                AggregateArg::Max => ImageAggregate::MaxObjectScr,
                AggregateArg::Mean => ImageAggregate::MeanObjectScr,
            };
            cmd_grade(&coco, &images_dir, &checkpoint, &out, &policy, channel, jobs)
        }
        Command::CfAnalyze { config, out } => cmd_cf_analyze(&config, out.as_deref()),
        Command::CfDemo {
            config,
            seed,
            steps,
            lr,
            resolution,
            target_mse,
            out,
        } => cmd_cf_demo(&config, seed, steps, lr, resolution, target_mse, out.as_deref()),
        Command::ActDump {
            kind,
            slope,
            min,
            max,
            samples,
            out,
        } => cmd_act_dump(kind, slope, min, max, samples, out.as_deref()),
        Command::Pca {
            features,
            mask,
            out,
        } => cmd_pca(&features, &mask, out.as_deref()),
    }
}

/// --jobs beats SNOWFUSE_JOBS beats the detected core count.
fn resolve_jobs(flag: Option<usize>) -> anyhow::Result<usize> {
    let jobs = match flag {
        Some(n) => n,
        None => match std::env::var("SNOWFUSE_JOBS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .with_context(|| format!("SNOWFUSE_JOBS must be a positive integer, got {:?}", v))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(jobs)
}

fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") | Some("pgm") => paths.push(path),
            _ => {}
        }
    }
    paths.sort();
    Ok(paths)
}

fn cmd_train_scr(
    images_dir: &Path,
    out: &Path,
    epochs: usize,
    lr: f64,
    seed: u64,
    target_loss: Option<f64>,
) -> anyhow::Result<()> {
    let paths = list_images(images_dir)?;
    if paths.is_empty() {
        bail!("no .ppm/.pgm images in {}", images_dir.display());
    }
    let images = paths
        .iter()
        .map(|p| load_image(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut model = build_scr_model(seed);
    let opts = TrainOptions {
        lr,
        epochs,
        seed,
        target_loss,
    };
    let log = train_scr(&mut model, &images, &LossSpec::default(), &opts)?;

    fs::create_dir_all(out)?;
    save_checkpoint(&model, out)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in log.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i, loss));
    }
    fs::write(out.join("loss.csv"), csv)?;

    match log.epoch_losses.last() {
        Some(loss) => println!(
            "trained {} epochs on {} images, final loss {:.6}",
            log.epoch_losses.len(),
            images.len(),
            loss
        ),
        None => println!("wrote untrained checkpoint (0 epochs)"),
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn load_model(checkpoint: &Path, channel: Option<usize>) -> anyhow::Result<ScrModel> {
    let mut model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if let Some(c) = channel {
        if c >= snowfuse_core::scr::OUT_CHANNELS {
            bail!(
                "--channel {} out of range (model has {} channels)",
                c,
                snowfuse_core::scr::OUT_CHANNELS
            );
        }
        model.selected_channel = Some(c);
    }
    if model.selected_channel.is_none() {
        bail!(
            "checkpoint has no snow channel selected; rerun channel selection \
             or pass --channel <0..{}>",
            snowfuse_core::scr::OUT_CHANNELS - 1
        );
    }
    Ok(model)
}

fn cmd_infer_scr(
    checkpoint: &Path,
    image: &Path,
    out_dir: &Path,
    channel: Option<usize>,
    coco: Option<&Path>,
) -> anyhow::Result<()> {
    let model = load_model(checkpoint, channel)?;
    let tensor = load_image(image).with_context(|| format!("loading {}", image.display()))?;
    let maps = model.infer_snow_map(&tensor)?;

    fs::create_dir_all(out_dir)?;
    save_image(&maps.float_map, &out_dir.join("float_map.pgm"))?;
    save_binary_map(
        &maps.binary.data,
        maps.binary.h,
        maps.binary.w,
        &out_dir.join("binary_map.pgm"),
    )?;

    let mut entries = Vec::new();
    if let Some(coco_path) = coco {
        let dataset = parse_coco(coco_path)?;
        let file_name = image
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| anyhow!("image path has no file name"))?;
        let record = dataset
            .images
            .iter()
            .find(|img| img.file_name == file_name)
            .ok_or_else(|| anyhow!("{} not listed in {}", file_name, coco_path.display()))?;
        for bbox in dataset.boxes_for_image(record.id) {
            let scr = scr_for_bbox(&maps.binary, bbox)?;
            entries.push(json!({
                "bbox": [bbox.x, bbox.y, bbox.w, bbox.h],
                "category_id": bbox.category_id,
                "scr": scr,
            }));
        }
    }
    let scr_json = serde_json::to_string_pretty(&json!({ "scrs": entries }))?;
    fs::write(out_dir.join("scr.json"), scr_json)?;
    println!(
        "wrote float_map.pgm, binary_map.pgm, scr.json ({} boxes) to {}",
        entries.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_grade(
    coco: &Path,
    images_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    policy: &GradingPolicy,
    channel: Option<usize>,
    jobs: usize,
) -> anyhow::Result<()> {
    policy.validate()?;
    let model = load_model(checkpoint, channel)?;
    let dataset = parse_coco(coco)?;
    dataset.validate()?;

    let mut images = dataset.images.clone();
    images.sort_by_key(|img| img.id);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")?;

    // One job per image; collect() preserves input order, so the merged
    // report is deterministic in image-id order regardless of --jobs.
    let results: Vec<(String, snowfuse_core::Result<PerImageRecord>)> = pool.install(|| {
        use rayon::prelude::*;
        images
            .par_iter()
            .map(|img| {
                let res = (|| {
                    let tensor = load_image(&images_dir.join(&img.file_name))?;
                    let maps = model.infer_snow_map(&tensor)?;
                    let mut scrs = Vec::new();
                    for bbox in dataset.boxes_for_image(img.id) {
                        scrs.push(scr_for_bbox(&maps.binary, bbox)?);
                    }
                    let grade = grade_image(&scrs, policy);
                    Ok(PerImageRecord {
                        id: img.id,
                        file_name: img.file_name.clone(),
                        scrs,
                        aggregate: grade.aggregate,
                        level: grade.level,
                        no_objects: grade.no_objects,
                    })
                })();
                (img.file_name.clone(), res)
            })
            .collect()
    });

    let mut report = GradingReport {
        policy: policy.clone(),
        per_image: Vec::new(),
        histogram: LevelHistogram::default(),
        skipped: Vec::new(),
    };
    for (file_name, res) in results {
        match res {
            Ok(record) => {
                report.histogram.bump(record.level);
                report.per_image.push(record);
            }
            Err(e) => {
                eprintln!("skipping {}: {}", file_name, e);
                report.skipped.push(file_name);
            }
        }
    }
    if !images.is_empty() && report.per_image.is_empty() {
        bail!("all {} images failed to grade", images.len());
    }

    write_grading_report(&report, out)?;
    let h = &report.histogram;
    println!(
        "graded {} images ({} skipped): easy {}, normal {}, difficult {}, particularly difficult {}",
        report.per_image.len(),
        report.skipped.len(),
        h.easy,
        h.normal,
        h.difficult,
        h.particularly_difficult
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn path_matrix(graph: &NeckGraph) -> anyhow::Result<Vec<Vec<usize>>> {
    let mut matrix = Vec::with_capacity(graph.in_stages.len());
    for s in 0..graph.in_stages.len() {
        let mut row = Vec::with_capacity(graph.exits.len());
        for t in 0..graph.exits.len() {
            row.push(path_length(graph, s, t)?);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

fn goct_weight_count(graph: &NeckGraph) -> usize {
    graph
        .nodes
        .iter()
        .filter_map(|node| match &node.kind {
            NodeKind::CfLayer(cf) => Some(cf.goct.conv_weight_count()),
            _ => None,
        })
        .sum()
}

fn neck_report(graph: &NeckGraph) -> anyhow::Result<serde_json::Value> {
    let (per_node, total) = count_params(graph);
    Ok(json!({
        "path_matrix": path_matrix(graph)?,
        "max_path": max_path_length(graph)?,
        "params": {
            "total": total.total(),
            "conv_weights": total.conv_weights,
            "biases": total.biases,
            "bn": total.bn,
            "prelu": total.prelu,
            "per_node": per_node
                .iter()
                .map(|(label, b)| json!({ "node": label, "total": b.total() }))
                .collect::<Vec<_>>(),
        },
    }))
}

fn cmd_cf_analyze(config: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = parse_cf_config_file(config)?;
    let cf = build_cf_neck(&cfg, 0)?;

    let cfg_k1 = CfConfig { k: 1, ..cfg.clone() };
    let cfg_k3 = CfConfig { k: 3, ..cfg.clone() };
    let cf_k1 = build_cf_neck(&cfg_k1, 0)?;
    let cf_k3 = build_cf_neck(&cfg_k3, 0)?;
    let goct_k1 = goct_weight_count(&cf_k1);
    let goct_k3 = goct_weight_count(&cf_k3);
    let ratio = goct_k3 as f64 / goct_k1 as f64;

    let baseline = build_fpn_panet_neck(&cfg.in_stages, 0)?;

    let report = json!({
        "config": {
            "n": cfg.n,
            "k": cfg.k,
            "in_stages": cfg.in_stages.iter().map(|s| json!([s.channels, s.scale])).collect::<Vec<_>>(),
            "out_stages": cfg.out_stages.iter().map(|s| json!([s.channels, s.scale])).collect::<Vec<_>>(),
        },
        "cf": neck_report(&cf)?,
        "baseline_fpn_panet": neck_report(&baseline)?,
        "goct_params": {
            "k1_conv_weights": goct_k1,
            "k3_conv_weights": goct_k3,
            "ratio": ratio,
            "ratio_is_k_squared": (ratio - 9.0).abs() < 1e-12,
        },
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{}", text);
    if let Some(path) = out {
        fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_cf_demo(
    config: &Path,
    seed: u64,
    steps: usize,
    lr: f64,
    resolution: usize,
    target_mse: Option<f64>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = parse_cf_config_file(config)?;
    let opts = DemoOptions {
        steps,
        lr,
        base_resolution: resolution,
        target_mse,
    };
    let log = overfit_demo(&cfg, seed, &opts)?;
    let mut csv = String::from("step,mse\n");
    for (i, mse) in log.step_losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i, mse));
    }
    if let Some(path) = out {
        fs::write(path, &csv)?;
    } else {
        print!("{}", csv);
    }
    match log.step_losses.last() {
        Some(mse) => println!(
            "{} steps, final mse {:.6}{}",
            log.step_losses.len(),
            mse,
            if log.stopped_early { " (early stop)" } else { "" }
        ),
        None => println!("0 steps requested"),
    }
    Ok(())
}

fn cmd_act_dump(
    kind: KindArg,
    slope: f64,
    min: f64,
    max: f64,
    samples: usize,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if samples < 2 {
        bail!("--samples must be at least 2");
    }
    if !(min < max) {
        bail!("--min must be below --max, got {} and {}", min, max);
    }
    let kind = match kind {
        KindArg::PeakAct => ActivationKind::PeakAct,
        KindArg::Relu => ActivationKind::ReLU,
        KindArg::LeakyRelu => ActivationKind::LeakyReLU(slope),
        KindArg::Sigmoid => ActivationKind::Sigmoid,
    };
    let rows = act::dump_activation_samples(kind, min, max, samples);
    let mut buf = Vec::new();
    act::write_samples_csv(&mut buf, &rows)?;
    match out {
        Some(path) => fs::write(path, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn cmd_pca(features: &Path, mask: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let mut file = fs::File::open(features)
        .with_context(|| format!("opening {}", features.display()))?;
    let tensor = read_tensor(&mut file)?;
    let mask_img = load_image(mask).with_context(|| format!("loading {}", mask.display()))?;
    let (h, w) = match mask_img.shape() {
        &[_, h, w] => (h, w),
        other => bail!("unexpected mask shape {:?}", other),
    };
    let mask_bits: Vec<bool> = mask_img.data()[..h * w].iter().map(|&v| v >= 0.5).collect();
    let result = pca_cluster_distance(&tensor, &mask_bits)?;
    let text = serde_json::to_string_pretty(&json!({
        "object_avg_dist": result.object_avg_dist,
        "background_avg_dist": result.background_avg_dist,
    }))?;
    println!("{}", text);
    if let Some(path) = out {
        fs::write(path, text)?;
    }
    Ok(())
}
