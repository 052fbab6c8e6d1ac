//! Task metrics of a surrogate model over a whole split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{coco_map_images, depth_sq_error, kitti_ap_moderate_images, ConfusionCounts, MetricReport};
use crate::annotate::{Box2D, Box3D, TaskAnnotation};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::Eye;
use crate::model::{task_loss, Detection, InputPlanes, LossTarget, SurrogateModel, TaskPrediction, SEG_CLASSES};
use crate::render::label;
use crate::scene::Task;

/// Image transform applied before inference, e.g. a defense. Receives the
/// sample, the eye, and the interleaved RGB image in [0, 1].
pub type InputTransform<'a> = dyn Fn(&Sample, Eye, Vec<f64>) -> Result<Vec<f64>> + Sync + 'a;

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::SemanticSegmentation => "mIoU",
        Task::Detection2D => "mAP",
        Task::MonocularDepth => "RMSE",
        Task::StereoDetection3D => "KITTI_AP_moderate",
    }
}

/// Whether larger metric values are better.
pub fn higher_is_better(task: Task) -> bool {
    task != Task::MonocularDepth
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub report: MetricReport,
    /// Mean full-image surrogate loss.
    pub mean_loss: f64,
}

pub fn split_fingerprint(ds: &Dataset) -> String {
    let json = serde_json::to_vec(&ds.manifest).expect("manifest serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Model input for a sample, optionally transformed per eye.
pub fn transformed_input(sample: &Sample, transform: Option<&InputTransform>) -> Result<InputPlanes> {
    let full = sample.full_rect();
    let image = |eye: Eye| -> Result<Vec<f64>> {
        let img = sample.image(eye);
        match transform {
            Some(t) => t(sample, eye, img),
            None => Ok(img),
        }
    };
    if sample.rgb_right.is_some() {
        let mut left = sample.frame_buffers(Eye::Left, full);
        left.rgb = image(Eye::Left)?;
        let mut right = sample.frame_buffers(Eye::Right, full);
        right.rgb = image(Eye::Right)?;
        Ok(InputPlanes::stereo(&left, &right))
    } else {
        Ok(InputPlanes::from_rgb(&image(Eye::Mono)?, full))
    }
}

enum PerSample {
    Semantic(ConfusionCounts),
    Boxes2D(Vec<Detection>, Vec<Box2D>),
    Depth(f64, usize),
    Boxes3D(Vec<Box3D>, Vec<Box3D>),
}

fn class_label(c: usize) -> String {
    label::NAMES.get(c).map_or_else(|| c.to_string(), |s| s.to_string())
}

/// Runs `model` on every sample of `ds` and pools the task metric.
pub fn evaluate_split(model: &SurrogateModel, ds: &Dataset, transform: Option<&InputTransform>) -> Result<SplitEvaluation> {
    if ds.task() != model.task {
        return Err(Error::TaskMismatch {
            expected: model.task,
            actual: ds.task(),
        });
    }
    if ds.is_empty() {
        return Err(Error::EmptySplit);
    }
    let per: Vec<(f64, PerSample)> = ds
        .samples
        .par_iter()
        .map(|s| -> Result<_> {
            let pred = model.forward(&transformed_input(s, transform)?)?;
            let loss = task_loss(&pred, &LossTarget::from_sample(s)?)?;
            let stats = match (&s.annotation, &pred) {
                (TaskAnnotation::Semantic(gt), p) => {
                    let mut c = ConfusionCounts::new(SEG_CLASSES);
                    c.add(&p.semantic_map().expect("segmentation prediction"), gt)?;
                    PerSample::Semantic(c)
                }
                (TaskAnnotation::Boxes2D(gt), TaskPrediction::Detection { detections, .. }) => {
                    PerSample::Boxes2D(detections.clone(), gt.clone())
                }
                (TaskAnnotation::Depth(gt), p) => {
                    let (sum, n) = depth_sq_error(&p.depth_map().expect("depth prediction"), gt)?;
                    PerSample::Depth(sum, n)
                }
                (TaskAnnotation::Boxes3D(gt), TaskPrediction::Stereo { boxes, .. }) => {
                    PerSample::Boxes3D(boxes.clone(), gt.clone())
                }
                (a, p) => {
                    return Err(Error::TaskMismatch {
                        expected: p.task(),
                        actual: a.task(),
                    })
                }
            };
            Ok((loss, stats))
        })
        .collect::<Result<_>>()?;
    let mean_loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let mut per_class = std::collections::BTreeMap::new();
    let value = match model.task {
        Task::SemanticSegmentation => {
            let mut total = ConfusionCounts::new(SEG_CLASSES);
            for (_, p) in &per {
                if let PerSample::Semantic(c) = p {
                    for k in 0..SEG_CLASSES {
                        total.intersection[k] += c.intersection[k];
                        total.union[k] += c.union[k];
                    }
                }
            }
            for (c, v) in total.per_class() {
                per_class.insert(class_label(c), v);
            }
            total.miou()
        }
        Task::Detection2D => {
            let images: Vec<(&[Detection], &[Box2D])> = per
                .iter()
                .filter_map(|(_, p)| match p {
                    PerSample::Boxes2D(d, g) => Some((d.as_slice(), g.as_slice())),
                    _ => None,
                })
                .collect();
            let (v, pc) = coco_map_images(&images);
            per_class.extend(pc.into_iter().map(|(c, v)| (c.kitti_name().to_string(), v)));
            v
        }
        Task::MonocularDepth => {
            let (mut sum, mut n) = (0.0, 0usize);
            for (_, p) in &per {
                if let PerSample::Depth(s, k) = p {
                    sum += s;
                    n += k;
                }
            }
            if n == 0 {
                return Err(Error::NoValidPixels);
            }
            (sum / n as f64).sqrt()
        }
        Task::StereoDetection3D => {
            let images: Vec<(&[Box3D], &[Box3D])> = per
                .iter()
                .filter_map(|(_, p)| match p {
                    PerSample::Boxes3D(d, g) => Some((d.as_slice(), g.as_slice())),
                    _ => None,
                })
                .collect();
            let (v, pc) = kitti_ap_moderate_images(&images);
            per_class.extend(pc.into_iter().map(|(c, v)| (c.kitti_name().to_string(), v)));
            v
        }
    };
    Ok(SplitEvaluation {
        report: MetricReport {
            metric: metric_name(model.task).into(),
            value,
            per_class,
            sample_count: ds.len(),
            split_fingerprint: split_fingerprint(ds),
        },
        mean_loss,
    })
}
