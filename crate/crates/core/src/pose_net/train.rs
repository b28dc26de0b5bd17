use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{crop_resize, normalize_pose, PoseNet, PoseNetArch, ANGLE_SCALE_DEG};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, HeadPose};
use crate::gray::GrayImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Jittered copies added per training sample (the original is kept).
    pub jitter_copies: usize,
    /// Uniform box jitter, as a fraction of the box size, for position and scale.
    pub jitter_fraction: f64,
    pub validation_fraction: f64,
    pub arch: PoseNetArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 40,
            patience: 8,
            seed: 0,
            jitter_copies: 2,
            jitter_fraction: 0.05,
            validation_fraction: 0.1,
            arch: PoseNetArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.patience < 1 || self.batch_size < 1 {
            return Err(Error::invalid("patience and batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        if !(0.0..0.5).contains(&self.jitter_fraction) {
            return Err(Error::invalid("jitter fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// One training example: an image, the face box, and its head pose.
#[derive(Debug, Clone, Copy)]
pub struct PoseSample<'a> {
    pub image: &'a GrayImage,
    pub bb: BoundingBox,
    pub pose: HeadPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained network.
    pub epoch: usize,
    /// RMSE in degrees over the un-jittered training crops, dropout off.
    pub train_rmse_deg: f64,
    pub val_rmse_deg: f64,
    /// Mean mini-batch loss seen during the epoch (dropout on).
    pub running_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_count: usize,
    pub val_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedPoseNet {
    pub net: PoseNet,
    pub history: TrainHistory,
    pub config: TrainConfig,
}

struct Crop {
    pixels: Vec<f64>,
    target: [f64; 3],
}

fn jitter_box(bb: &BoundingBox, frac: f64, rng: &mut impl Rng) -> Result<BoundingBox> {
    let mut u = || if frac > 0.0 { rng.gen_range(-frac..=frac) } else { 0.0 };
    let (dx, dy, ds) = (u(), u(), u());
    let c = bb.center();
    BoundingBox::from_center(
        nalgebra::Point2::new(c.x + dx * bb.w, c.y + dy * bb.h),
        bb.w * (1.0 + ds),
        bb.h * (1.0 + ds),
    )
}

fn make_crop(s: &PoseSample, bb: &BoundingBox, size: usize) -> Result<Crop> {
    Ok(Crop {
        pixels: crop_resize(s.image, bb, size)?.pixels().to_vec(),
        target: normalize_pose(&s.pose),
    })
}

fn rmse_deg(net: &PoseNet, crops: &[Crop], batch: usize) -> f64 {
    if crops.is_empty() {
        return f64::NAN;
    }
    let mut sq = 0.0;
    for chunk in crops.chunks(batch.max(1)) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|c| c.pixels.as_slice()).collect();
        for (out, c) in net.forward_batch(&inputs).iter().zip(chunk) {
            for k in 0..3 {
                sq += (out[k] - c.target[k]).powi(2);
            }
        }
    }
    (sq / (3 * crops.len()) as f64).sqrt() * ANGLE_SCALE_DEG
}

/// Trains a pose network with Nesterov's accelerated gradient.
///
/// The update evaluates the gradient at the lookahead point:
/// `v <- mu * v - lr * grad(theta + mu * v)`, `theta <- theta + v`.
pub fn train(dataset: &[PoseSample], cfg: &TrainConfig) -> Result<TrainedPoseNet> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::invalid("pose training needs at least 2 samples"));
    }
    for s in dataset {
        s.pose.validate()?;
    }
    let size = cfg.arch.input_size;

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut split_rng);
    let val_count = ((dataset.len() as f64 * cfg.validation_fraction).round() as usize)
        .clamp(usize::from(cfg.validation_fraction > 0.0), dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(val_count);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();

    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut originals = Vec::with_capacity(train_idx.len());
    let mut augmented = Vec::with_capacity(train_idx.len() * (1 + cfg.jitter_copies));
    for &i in &train_idx {
        let s = &dataset[i];
        originals.push(make_crop(s, &s.bb, size)?);
        augmented.push(make_crop(s, &s.bb, size)?);
        for _ in 0..cfg.jitter_copies {
            let bb = jitter_box(&s.bb, cfg.jitter_fraction, &mut aug_rng)?;
            augmented.push(make_crop(s, &bb, size)?);
        }
    }
    let val: Vec<Crop> = val_idx
        .iter()
        .map(|&i| make_crop(&dataset[i], &dataset[i].bb, size))
        .collect::<Result<_>>()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(3);
    let mut net = PoseNet::initialized(cfg.arch.clone(), &mut init_rng)?;
    let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    step_rng.set_stream(4);

    let eval_batch = 64;
    let first = EpochRecord {
        epoch: 0,
        train_rmse_deg: rmse_deg(&net, &originals, eval_batch),
        val_rmse_deg: rmse_deg(&net, &val, eval_batch),
        running_loss: None,
    };
    info!(
        "pose net: {} params, {} training crops, {} validation; epoch 0 train {:.3} val {:.3}",
        net.num_params(),
        augmented.len(),
        val.len(),
        first.train_rmse_deg,
        first.val_rmse_deg
    );
    let monitor = |r: &EpochRecord| if val.is_empty() { r.train_rmse_deg } else { r.val_rmse_deg };
    let mut best = (monitor(&first), 0, net.params().to_vec());
    let mut epochs = vec![first];

    let mut velocity = vec![0.0; net.num_params()];
    let mut lookahead = vec![0.0; net.num_params()];
    let mut batch_order: Vec<usize> = (0..augmented.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        batch_order.shuffle(&mut step_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in batch_order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| augmented[i].pixels.as_slice()).collect();
            let targets: Vec<[f64; 3]> = chunk.iter().map(|&i| augmented[i].target).collect();
            for ((l, p), v) in lookahead.iter_mut().zip(net.params()).zip(&velocity) {
                *l = p + cfg.momentum * v;
            }
            let (loss, grad) = net.loss_and_gradient_at(&lookahead, &inputs, &targets, Some(&mut step_rng));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            for ((p, v), g) in net.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
            loss_sum += loss;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            train_rmse_deg: rmse_deg(&net, &originals, eval_batch),
            val_rmse_deg: rmse_deg(&net, &val, eval_batch),
            running_loss: Some(loss_sum / batches.max(1) as f64),
        };
        info!(
            "pose net epoch {epoch}: loss {:.5} train {:.3} val {:.3}",
            record.running_loss.unwrap_or(f64::NAN), record.train_rmse_deg, record.val_rmse_deg
        );
        let score = monitor(&record);
        epochs.push(record);
        if score < best.0 {
            best = (score, epoch, net.params().to_vec());
        } else if epoch - best.1 >= cfg.patience {
            info!("pose net: early stop at epoch {epoch}, best epoch {}", best.1);
            break;
        }
    }

    let net = PoseNet::from_params(cfg.arch.clone(), best.2)?;
    Ok(TrainedPoseNet {
        net,
        history: TrainHistory {
            epochs,
            best_epoch: best.1,
            train_count: train_idx.len(),
            val_count: val.len(),
        },
        config: cfg.clone(),
    })
}
