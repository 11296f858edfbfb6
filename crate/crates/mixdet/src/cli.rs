//! Command-line surface: data generation, training, evaluation, single
//! image inference, and checkpoint diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{load_config, AblationPreset, RunConfig};
use crate::data::{generate_dataset, load_dataset, load_image, save_dataset, Scene};
use crate::diffcore::{load_checkpoint, Tape};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalDetection, EvalGroundTruth, EvalReport};
use crate::inference::{detections_to_csv, extract_detections, Detection};
use crate::mixture::{
    mixture_box_loglik, mixture_full_loglik, underflow_ratio, DensityKind, MixtureModel, Precision,
};
use crate::network::{forward, Detector};
use crate::training::{sample_rois, train_loop, TrainConfig};

/// clap-facing mirror of [`DensityKind`], keeping the math module free of
/// CLI derives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DensityKindArg {
    Cauchy,
    Gaussian,
}

impl From<DensityKindArg> for DensityKind {
    fn from(arg: DensityKindArg) -> Self {
        match arg {
            DensityKindArg::Cauchy => DensityKind::Cauchy,
            DensityKindArg::Gaussian => DensityKind::Gaussian,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mixdet", about = "Mixture-density object detection on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val dataset splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training scene count.
        #[arg(long, default_value_t = 500)]
        train: usize,
        /// Validation scene count.
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector and write checkpoints plus metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (a split directory written by gen-data).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        distribution: Option<DensityKindArg>,
        #[arg(long, value_enum)]
        ablation: Option<AblationPreset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Detect objects in a single PNG image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recompute training diagnostics from a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, train, val, seed } => {
            let mut run = load_config(&config)?;
            if let Some(s) = seed {
                run.data.seed = s;
            }
            let counts = cmd_gen_data(&run, &out, train, val)?;
            println!("wrote {} train + {} val scenes to {}", counts.0, counts.1, out.display());
            Ok(())
        }
        Command::Train { config, data, out, distribution, ablation, epochs, seed } => {
            let mut run = load_config(&config)?;
            if let Some(d) = distribution {
                run.train.distribution = d.into();
            }
            if let Some(a) = ablation {
                a.apply(&mut run.train);
            }
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let history = cmd_train(&run.train, &data, &out)?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs; final loss_moc {:.4}, loss_mm {:.4}, fg ratio {:.3}",
                    history.len(),
                    last.loss_moc,
                    last.loss_mm,
                    last.foreground_ratio
                );
            } else {
                println!("trained 0 epochs (initial parameters saved)");
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, out, config } => {
            let train = optional_train_config(config.as_deref())?;
            let report = cmd_eval(&checkpoint, &data, out.as_deref(), &train)?;
            println!("ap {:.4}", report.ap);
            println!("ap50 {:.4}", report.ap50);
            Ok(())
        }
        Command::Infer { checkpoint, image, out, config } => {
            let train = optional_train_config(config.as_deref())?;
            let dets = cmd_infer(&checkpoint, &image, &train)?;
            let id = image.file_stem().map(|s| s.to_string_lossy().into_owned());
            let csv = detections_to_csv(&[(id.unwrap_or_else(|| "image".into()), dets)]);
            print!("{csv}");
            if let Some(path) = out {
                fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Diagnose { checkpoint, data, out, config } => {
            let train = optional_train_config(config.as_deref())?;
            let report = cmd_diagnose(&checkpoint, &data, &train)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}

fn optional_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => load_config(p)?.train,
        None => TrainConfig::default(),
    })
}

pub fn cmd_gen_data(run: &RunConfig, out: &Path, train: usize, val: usize) -> Result<(usize, usize)> {
    let train_scenes = generate_dataset(&run.data, train, "train");
    save_dataset(&train_scenes, &out.join("train"))?;
    let mut val_config = run.data.clone();
    val_config.seed = run.data.seed.wrapping_add(1);
    let val_scenes = generate_dataset(&val_config, val, "val");
    save_dataset(&val_scenes, &out.join("val"))?;
    Ok((train_scenes.len(), val_scenes.len()))
}

pub fn cmd_train(
    config: &TrainConfig,
    data: &Path,
    out: &Path,
) -> Result<Vec<crate::training::EpochDiagnostics>> {
    let dataset = load_dataset(data)?;
    let (_, history) = train_loop(&dataset, config, Some(out))?;
    Ok(history.epochs)
}

pub fn load_detector(checkpoint: &Path, config: &TrainConfig) -> Result<Detector<f64>> {
    let params = load_checkpoint::<f64>(checkpoint)?;
    let mut detector = Detector::new(config.head.clone(), 0);
    detector.load_named_params(&params).map_err(|e| match e {
        Error::Checkpoint { msg, .. } => {
            Error::Checkpoint { path: checkpoint.display().to_string(), msg }
        }
        other => other,
    })?;
    Ok(detector)
}

/// Run the detector over one scene and return its decoded mixture.
pub fn scene_model(detector: &Detector<f64>, scene: &Scene) -> MixtureModel<f64> {
    let mut tape: Tape<f64> = Tape::new();
    let fwd = forward(detector, &mut tape, &scene.image, false);
    fwd.to_mixture(&tape, detector.config.box_space())
}

pub fn detect_scene(
    detector: &Detector<f64>,
    scene: &Scene,
    config: &TrainConfig,
) -> Vec<Detection<f64>> {
    let model = scene_model(detector, scene);
    extract_detections(
        &model,
        config.pi_filter_threshold,
        config.score_threshold,
        config.nms_threshold,
    )
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
    config: &TrainConfig,
) -> Result<EvalReport> {
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no scenes under {}; AP is undefined",
            data.display()
        )));
    }
    let detector = load_detector(checkpoint, config)?;

    let mut det_rows = Vec::new();
    let mut eval_dets = Vec::new();
    let mut eval_gts = Vec::new();
    for scene in &dataset {
        let dets = detect_scene(&detector, scene, config);
        for d in &dets {
            eval_dets.push(EvalDetection { image_id: scene.image_id.clone(), det: *d });
        }
        for gt in &scene.annotations {
            eval_gts.push(EvalGroundTruth { image_id: scene.image_id.clone(), bbox: *gt });
        }
        det_rows.push((scene.image_id.clone(), dets));
    }
    let report = evaluate(&eval_dets, &eval_gts);

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let det_path = dir.join("detections.csv");
        fs::write(&det_path, detections_to_csv(&det_rows)).map_err(|e| Error::io(&det_path, e))?;
        let report_path = dir.join("report.csv");
        fs::write(&report_path, report.to_csv()).map_err(|e| Error::io(&report_path, e))?;
    }
    Ok(report)
}

pub fn cmd_infer(
    checkpoint: &Path,
    image: &Path,
    config: &TrainConfig,
) -> Result<Vec<Detection<f64>>> {
    let detector = load_detector(checkpoint, config)?;
    let tensor = load_image(image)?;
    let mut tape: Tape<f64> = Tape::new();
    let fwd = forward(&detector, &mut tape, &tensor, false);
    let model = fwd.to_mixture(&tape, detector.config.box_space());
    Ok(extract_detections(
        &model,
        config.pi_filter_threshold,
        config.score_threshold,
        config.nms_threshold,
    ))
}

/// Dataset-level diagnostics recomputed from a checkpoint: the training
/// metrics columns (as a single epoch-0 row) extended with single- and
/// double-precision underflow columns for both density families.
#[derive(Clone, Copy, Debug)]
pub struct DiagnoseReport {
    pub loss_moc: f64,
    pub loss_mm: f64,
    pub foreground_ratio: f64,
    pub underflow_cauchy: f64,
    pub underflow_gaussian: f64,
    pub underflow_cauchy_single: f64,
    pub underflow_gaussian_single: f64,
    pub underflow_cauchy_double: f64,
    pub underflow_gaussian_double: f64,
}

pub const DIAGNOSE_HEADER: &str = "epoch,loss_moc,loss_mm,foreground_ratio,underflow_cauchy,\
underflow_gaussian,underflow_cauchy_single,underflow_gaussian_single,underflow_cauchy_double,\
underflow_gaussian_double";

impl DiagnoseReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{}\n0,{},{},{},{},{},{},{},{},{}\n",
            DIAGNOSE_HEADER,
            self.loss_moc,
            self.loss_mm,
            self.foreground_ratio,
            self.underflow_cauchy,
            self.underflow_gaussian,
            self.underflow_cauchy_single,
            self.underflow_gaussian_single,
            self.underflow_cauchy_double,
            self.underflow_gaussian_double,
        )
    }
}

pub fn cmd_diagnose(
    checkpoint: &Path,
    data: &Path,
    config: &TrainConfig,
) -> Result<DiagnoseReport> {
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(format!("no scenes under {}", data.display())));
    }
    let detector = load_detector(checkpoint, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut moc_sum = 0.0;
    let mut moc_count = 0usize;
    let mut mm_sum = 0.0;
    let mut mm_count = 0usize;
    let mut fg = 0usize;
    let mut rois_total = 0usize;
    let mut uf = [[0.0f64; 3]; 2]; // [kind][precision]
    let mut uf_scenes = 0usize;

    let precisions = [Precision::Half, Precision::Single, Precision::Double];
    for scene in &dataset {
        let model = scene_model(&detector, scene);
        let n = if scene.annotations.is_empty() {
            config.empty_gt_rois
        } else {
            config.roi_multiplier * scene.annotations.len()
        };
        let rois = sample_rois(&model, &scene.annotations, n, config.iou_threshold, &mut rng);
        let background = model.background_class();
        fg += rois.entries.iter().filter(|e| e.class_id != background).count();
        rois_total += rois.len();

        for e in &rois.entries {
            mm_sum -= mixture_full_loglik(
                config.distribution,
                model.space.project(&e.bbox),
                e.class_id,
                &model,
            );
            mm_count += 1;
        }
        if !scene.annotations.is_empty() {
            for gt in &scene.annotations {
                moc_sum -=
                    mixture_box_loglik(config.distribution, model.space.project(gt), &model);
                moc_count += 1;
            }
            for (kind_idx, kind) in [DensityKind::Cauchy, DensityKind::Gaussian].iter().enumerate()
            {
                for (p_idx, precision) in precisions.iter().enumerate() {
                    uf[kind_idx][p_idx] +=
                        underflow_ratio(&scene.annotations, &model, *kind, *precision);
                }
            }
            uf_scenes += 1;
        }
    }

    let norm = |v: f64| if uf_scenes > 0 { v / uf_scenes as f64 } else { 0.0 };
    Ok(DiagnoseReport {
        loss_moc: if moc_count > 0 { moc_sum / moc_count as f64 } else { f64::NAN },
        loss_mm: mm_sum / mm_count as f64,
        foreground_ratio: fg as f64 / rois_total as f64,
        underflow_cauchy: norm(uf[0][0]),
        underflow_gaussian: norm(uf[1][0]),
        underflow_cauchy_single: norm(uf[0][1]),
        underflow_gaussian_single: norm(uf[1][1]),
        underflow_cauchy_double: norm(uf[0][2]),
        underflow_gaussian_double: norm(uf[1][2]),
    })
}
