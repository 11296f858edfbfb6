//! RoI sampling, the two likelihood losses with the stop-gradient rule,
//! the SGD loop, and per-epoch diagnostics.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::diffcore::{save_checkpoint, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::mixture::{sample_components, underflow_ratio, DensityKind, MixtureModel, Precision};
use crate::network::{forward, Detector, HeadConfig, TapedForward};
use crate::real::Real;

/// One sampled region of interest: a candidate box copied from a component
/// location, the class it was labeled with (background = C), and the index
/// of the component it was drawn from.
#[derive(Clone, Debug)]
pub struct RoiEntry<R = f64> {
    pub bbox: BBox<R>,
    pub class_id: usize,
    pub source_component: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RoiSet<R = f64> {
    pub entries: Vec<RoiEntry<R>>,
}

impl<R: Real> RoiSet<R> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the classification term in the total loss.
    pub alpha: f64,
    /// RoIs sampled per ground-truth box.
    pub roi_multiplier: usize,
    /// Minimum IoU against a ground truth for a foreground label.
    pub iou_threshold: f64,
    pub distribution: DensityKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Scenes whose gradients are averaged per parameter update.
    pub batch_size: usize,
    pub seed: u64,
    pub head: HeadConfig,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub pi_filter_threshold: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Background RoIs sampled when a scene has no ground truth.
    pub empty_gt_rois: usize,
    /// Periodic checkpoint interval in epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            roi_multiplier: 3,
            iou_threshold: 0.5,
            distribution: DensityKind::Cauchy,
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            head: HeadConfig::default(),
            nms_threshold: 0.5,
            score_threshold: 0.05,
            pi_filter_threshold: 0.1,
            grad_clip: 10.0,
            empty_gt_rois: 16,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("nms_threshold", self.nms_threshold),
            ("score_threshold", self.score_threshold),
            ("pi_filter_threshold", self.pi_filter_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.roi_multiplier == 0 || self.batch_size == 0 {
            return Err(Error::Config("roi_multiplier and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub loss_moc: f64,
    pub loss_mm: f64,
    pub foreground_ratio: f64,
    pub underflow_cauchy: f64,
    pub underflow_gaussian: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainDiagnostics {
    pub epochs: Vec<EpochDiagnostics>,
}

pub const METRICS_HEADER: &str =
    "epoch,loss_moc,loss_mm,foreground_ratio,underflow_cauchy,underflow_gaussian";

impl TrainDiagnostics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.loss_moc, e.loss_mm, e.foreground_ratio, e.underflow_cauchy,
                e.underflow_gaussian
            ));
        }
        out
    }
}

/// Draw n candidate boxes from the component locations using pi, and label
/// each with the class of the highest-IoU ground truth when that IoU
/// reaches the threshold, otherwise background. Duplicates are kept.
pub fn sample_rois<R: Real>(
    model: &MixtureModel<R>,
    gts: &[BBox<R>],
    n: usize,
    iou_threshold: R,
    rng: &mut impl Rng,
) -> RoiSet<R> {
    assert!(n >= 1, "need at least one RoI");
    let background = model.background_class();
    let entries = sample_components(&model.pi, n, rng)
        .into_iter()
        .map(|k| {
            let bbox = model.component_box(k);
            let best = gts
                .iter()
                .map(|gt| (iou(&bbox, gt), gt.class_id.expect("ground truth must be labeled")))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let class_id = match best {
                Some((overlap, class)) if overlap >= iou_threshold => class,
                _ => background,
            };
            RoiEntry { bbox, class_id, source_component: k }
        })
        .collect();
    RoiSet { entries }
}

pub fn foreground_ratio<R: Real>(rois: &RoiSet<R>, background: usize) -> f64 {
    assert!(!rois.is_empty(), "foreground_ratio needs a non-empty RoI set");
    let fg = rois.entries.iter().filter(|e| e.class_id != background).count();
    fg as f64 / rois.len() as f64
}

/// Location loss: negative mean mixture log-likelihood of the ground-truth
/// boxes under (pi, mu, gamma), class probabilities excluded. Gradients
/// flow into all three parameter groups.
pub fn loss_moc<R: Real>(
    tape: &mut Tape<R>,
    fwd: &TapedForward,
    gts: &[BBox<R>],
    model: &MixtureModel<R>,
    kind: DensityKind,
) -> Var {
    assert!(!gts.is_empty(), "loss_moc is undefined without ground truth");
    let targets: Vec<[R; 4]> = gts.iter().map(|b| model.space.project(b)).collect();
    tape.mixture_coord_nll(fwd.mu, fwd.gamma, fwd.pi, &targets, kind)
}

/// Classification loss: negative mean log-likelihood of the labeled RoIs
/// under the complete mixture. pi, mu and gamma enter through a stop
/// gradient, so only the class probabilities p learn from it.
pub fn loss_mm<R: Real>(
    tape: &mut Tape<R>,
    fwd: &TapedForward,
    rois: &RoiSet<R>,
    model: &MixtureModel<R>,
    kind: DensityKind,
) -> Var {
    assert!(!rois.is_empty(), "loss_mm needs at least one RoI");
    let targets: Vec<([R; 4], usize)> =
        rois.entries.iter().map(|e| (model.space.project(&e.bbox), e.class_id)).collect();
    let mu = tape.stop_gradient(fwd.mu);
    let gamma = tape.stop_gradient(fwd.gamma);
    let pi = tape.stop_gradient(fwd.pi);
    tape.mixture_full_nll(mu, gamma, pi, fwd.p, &targets, kind)
}

/// l_moc + alpha * l_mm. With no ground truth the location term is skipped.
pub fn total_loss<R: Real>(tape: &mut Tape<R>, l_moc: Option<Var>, l_mm: Var, alpha: R) -> Var {
    let weighted = tape.scale(l_mm, alpha);
    match l_moc {
        Some(moc) => tape.add(moc, weighted),
        None => weighted,
    }
}

/// Scale all gradients so the global L2 norm does not exceed `clip`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let norm: f64 =
        grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    /// Absent for scenes without ground truth.
    pub loss_moc: Option<f64>,
    pub loss_mm: f64,
    pub foreground: usize,
    pub num_rois: usize,
    pub grad_norm: f64,
}

struct SceneOutcome {
    grads: Vec<Vec<f64>>,
    metrics: StepMetrics,
    model: MixtureModel<f64>,
}

fn scene_grads(
    detector: &Detector<f64>,
    scene: &Scene,
    config: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SceneOutcome> {
    let mut tape: Tape<f64> = Tape::new();
    let fwd = forward(detector, &mut tape, &scene.image, true);
    let model = fwd.to_mixture(&tape, config.head.box_space());

    let gts = &scene.annotations;
    let n = if gts.is_empty() {
        config.empty_gt_rois
    } else {
        config.roi_multiplier * gts.len()
    };
    let rois = sample_rois(&model, gts, n, config.iou_threshold, rng);

    let moc = (!gts.is_empty())
        .then(|| loss_moc(&mut tape, &fwd, gts, &model, config.distribution));
    let mm = loss_mm(&mut tape, &fwd, &rois, &model, config.distribution);
    let loss = total_loss(&mut tape, moc, mm, config.alpha);

    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            scene_id: scene.image_id.clone(),
            step,
            detail: format!("total loss = {loss_value}"),
        });
    }

    let all = tape.backward(loss);
    let grads = fwd.param_vars.iter().map(|&v| all.get(v).to_vec()).collect();
    let background = model.background_class();
    let metrics = StepMetrics {
        loss_moc: moc.map(|v| tape.value(v).item()),
        loss_mm: tape.value(mm).item(),
        foreground: rois.entries.iter().filter(|e| e.class_id != background).count(),
        num_rois: rois.len(),
        grad_norm: 0.0,
    };
    Ok(SceneOutcome { grads, metrics, model })
}

/// One SGD step on a single scene: forward, RoI sampling, total loss,
/// backward, clipped update. Deterministic given the rng state.
pub fn train_step(
    detector: &mut Detector<f64>,
    scene: &Scene,
    config: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    let mut out = scene_grads(detector, scene, config, step, rng)?;
    out.metrics.grad_norm = clip_grad_norm(&mut out.grads, config.grad_clip);
    detector.sgd_step(&out.grads, config.learning_rate);
    Ok(out.metrics)
}

/// Full training run: per-epoch shuffle, batched gradient averaging,
/// per-epoch diagnostics (both density families evaluated at half
/// precision), periodic checkpoints when `out_dir` is given.
pub fn train_loop(
    dataset: &[Scene],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Detector<f64>, TrainDiagnostics)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training requires at least one scene".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut detector = Detector::new(config.head.clone(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261696e);
    let mut history = TrainDiagnostics::default();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        // Fisher-Yates on the shared stream keeps the run reproducible.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }

        let mut moc_sum = 0.0;
        let mut moc_count = 0usize;
        let mut mm_sum = 0.0;
        let mut fg = 0usize;
        let mut rois_total = 0usize;
        let mut uf_cauchy_sum = 0.0;
        let mut uf_gaussian_sum = 0.0;
        let mut uf_scenes = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let mut accum: Option<Vec<Vec<f64>>> = None;
            for &idx in chunk {
                let scene = &dataset[idx];
                step += 1;
                let outcome = scene_grads(&detector, scene, config, step, &mut rng)?;
                match &mut accum {
                    None => accum = Some(outcome.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&outcome.grads) {
                            for (av, gv) in a.iter_mut().zip(g) {
                                *av += gv;
                            }
                        }
                    }
                }
                if let Some(m) = outcome.metrics.loss_moc {
                    moc_sum += m;
                    moc_count += 1;
                }
                mm_sum += outcome.metrics.loss_mm;
                fg += outcome.metrics.foreground;
                rois_total += outcome.metrics.num_rois;
                if !scene.annotations.is_empty() {
                    uf_cauchy_sum += underflow_ratio(
                        &scene.annotations, &outcome.model, DensityKind::Cauchy, Precision::Half,
                    );
                    uf_gaussian_sum += underflow_ratio(
                        &scene.annotations, &outcome.model, DensityKind::Gaussian, Precision::Half,
                    );
                    uf_scenes += 1;
                }
            }
            let mut grads = accum.expect("non-empty chunk");
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            clip_grad_norm(&mut grads, config.grad_clip);
            detector.sgd_step(&grads, config.learning_rate);
        }

        history.epochs.push(EpochDiagnostics {
            epoch,
            loss_moc: if moc_count > 0 { moc_sum / moc_count as f64 } else { f64::NAN },
            loss_mm: mm_sum / dataset.len() as f64,
            foreground_ratio: fg as f64 / rois_total as f64,
            underflow_cauchy: if uf_scenes > 0 { uf_cauchy_sum / uf_scenes as f64 } else { 0.0 },
            underflow_gaussian: if uf_scenes > 0 {
                uf_gaussian_sum / uf_scenes as f64
            } else {
                0.0
            },
        });

        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint-epoch-{epoch}"));
                save_checkpoint(&path, &detector.named_params())?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint-final"), &detector.named_params())?;
        let metrics_path = dir.join("metrics.csv");
        fs::write(&metrics_path, history.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
    }
    Ok((detector, history))
}
