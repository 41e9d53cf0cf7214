//! Batch assembly, augmentation, the optimization step and the training loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::data::{stream_rng, DatasetSplit, VolumeRecord};
use crate::error::{Error, Result};
use crate::geometry::{normalize_sdm, signed_distance_map, BinaryMask};
use crate::grid;
use crate::losses::{total_loss, ConsistencyMode, LossBreakdown, LossConfig, LossTargets};
use crate::network::{Network, NetworkConfig};
use crate::tensor::{sgd_step, Tape, Tensor};

pub const LOSS_CSV_SCHEMA: u32 = 1;

const STREAM_LABELED: u64 = 0x4c41_4245;
const STREAM_UNLABELED: u64 = 0x554e_4c42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub t_max: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub crop: Vec<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_step` steps.
    pub lr_step: usize,
    pub momentum: f64,
    /// Checkpoint every this many steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub augment_unlabeled: bool,
    /// Redraw labeled crops whose mask has no boundary instead of keeping sentinel targets.
    pub resample_degenerate: bool,
    pub deterministic: bool,
    pub loss: LossConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Published schedule: 6000 steps, lr 0.01 decayed by 0.1 every 2500 steps, 3D crops.
    pub fn paper() -> Self {
        TrainConfig {
            t_max: 6000,
            lr_step: 2500,
            crop: vec![112, 112, 80],
            network: NetworkConfig {
                spatial_rank: 3,
                ..NetworkConfig::default()
            },
            checkpoint_every: 1000,
            ..TrainConfig::desk()
        }
    }

    /// Small 2D schedule with the decay point rescaled to the same fraction of training.
    pub fn desk() -> Self {
        let t_max = 600;
        TrainConfig {
            seed: 0,
            t_max,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            crop: vec![64, 64],
            lr: 0.01,
            lr_decay: 0.1,
            lr_step: rescaled_decay_step(t_max),
            momentum: 0.9,
            checkpoint_every: 0,
            augment_unlabeled: true,
            resample_degenerate: false,
            deterministic: true,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
        }
    }

    /// Sets `t_max` and moves the decay step to the same fraction of training.
    pub fn with_t_max(mut self, t_max: usize) -> Self {
        self.t_max = t_max;
        self.lr_step = rescaled_decay_step(t_max);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if self.labeled_per_batch == 0 {
            return bad("labeled_per_batch must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_step == 0 {
            return bad(format!(
                "invalid schedule: lr {} decay {} every {}",
                self.lr, self.lr_decay, self.lr_step
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        self.loss.validate()?;
        self.network.validate()?;
        if self.crop.len() != self.network.spatial_rank {
            return bad(format!(
                "crop {:?} does not match spatial rank {}",
                self.crop, self.network.spatial_rank
            ));
        }
        let m = self.network.required_multiple();
        if self.crop.iter().any(|&e| e == 0 || e % m != 0) {
            return Err(Error::Divisibility {
                extents: self.crop.clone(),
                multiple: m,
            });
        }
        Ok(())
    }

    /// Unlabeled items per batch actually drawn; none when no consistency term uses them.
    pub fn effective_unlabeled(&self) -> usize {
        if self.loss.consistency == ConsistencyMode::None {
            0
        } else {
            self.unlabeled_per_batch
        }
    }

    /// `lr * lr_decay^floor(t / lr_step)`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_decay.powi((t / self.lr_step) as i32)
    }

    /// Ramp-up weight logged for step `t`; reaches `lambda_max` on the last step.
    pub fn lambda_at(&self, t: usize) -> f64 {
        crate::losses::ramp_up(t, self.ramp_horizon(), self.loss.lambda_max, self.loss.ramp_power)
    }

    fn ramp_horizon(&self) -> usize {
        self.t_max.saturating_sub(1)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn rescaled_decay_step(t_max: usize) -> usize {
    ((t_max * 2500 + 3000) / 6000).max(1)
}

/// Per-axis flips followed by `rot` quarter turns in the plane of axes 0 and 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flips: Vec<bool>,
    pub rot: u8,
}

impl AugmentDraw {
    pub fn identity(rank: usize) -> Self {
        AugmentDraw {
            flips: vec![false; rank],
            rot: 0,
        }
    }

    /// Odd quarter turns are only drawn when the in-plane extents are equal,
    /// so the output shape always matches the input.
    pub fn sample(rng: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        let flips = shape.iter().map(|_| rng.random_bool(0.5)).collect();
        let rot = if shape[0] == shape[1] {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        AugmentDraw { flips, rot }
    }
}

/// Applies `draw` to a row-major grid.
pub fn augment<T: Copy>(data: &[T], shape: &[usize], draw: &AugmentDraw) -> Result<Vec<T>> {
    if draw.flips.len() != shape.len() || shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "augment draw of rank {} for shape {shape:?}",
            draw.flips.len()
        )));
    }
    if draw.rot % 2 == 1 && shape[0] != shape[1] {
        return Err(Error::InvalidArgument(format!(
            "quarter turn needs equal in-plane extents, got {shape:?}"
        )));
    }
    let mut out = data.to_vec();
    for (axis, &f) in draw.flips.iter().enumerate() {
        if f {
            out = grid::flip(&out, shape, axis);
        }
    }
    for _ in 0..draw.rot % 4 {
        out = grid::rot90(&out, shape);
    }
    Ok(out)
}

/// Uniform random corner for a crop of `extents` inside `shape`.
pub fn random_crop(shape: &[usize], extents: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if shape.len() != extents.len() || shape.iter().zip(extents).any(|(s, e)| s < e) {
        return Err(Error::UndersizedVolume {
            volume: shape.to_vec(),
            crop: extents.to_vec(),
        });
    }
    Ok(shape
        .iter()
        .zip(extents)
        .map(|(s, e)| rng.random_range(0..=s - e))
        .collect())
}

/// A training batch; labeled items come first.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, crop...]`.
    pub images: Tensor,
    pub labeled: Vec<bool>,
    /// `[L, 1, crop...]`.
    pub masks: Tensor,
    /// Normalized signed distance targets `[L, 1, crop...]`.
    pub sdm: Tensor,
    /// Per labeled item: the crop mask has no boundary.
    pub degenerate: Vec<bool>,
}

impl Batch {
    pub fn labeled_count(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }

    pub fn targets(&self) -> LossTargets {
        LossTargets {
            labeled: self.labeled_count(),
            mask: self.masks.clone(),
            sdm: self.sdm.clone(),
        }
    }
}

fn crop_item(
    rec: &VolumeRecord,
    crop: &[usize],
    augment_it: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Option<BinaryMask>)> {
    let corner = random_crop(&rec.shape, crop, rng)?;
    let image = grid::crop(&rec.image, &rec.shape, &corner, crop);
    let mask = rec.mask.as_ref().map(|m| grid::crop(m.data(), &rec.shape, &corner, crop));
    let draw = if augment_it {
        AugmentDraw::sample(rng, crop)
    } else {
        AugmentDraw::identity(crop.len())
    };
    let image = augment(&image, crop, &draw)?;
    let mask = match mask {
        Some(m) => Some(BinaryMask::new(crop.to_vec(), augment(&m, crop, &draw)?)?),
        None => None,
    };
    Ok((image.into_iter().map(f64::from).collect(), mask))
}

/// Draws `labeled_per_batch` labeled and `effective_unlabeled()` unlabeled items
/// uniformly with replacement, crops and augments them, and computes SDM targets.
pub fn sample_batch(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    labeled_rng: &mut ChaCha8Rng,
    unlabeled_rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let n_unl = cfg.effective_unlabeled();
    if split.labeled.is_empty() {
        return Err(Error::InvalidArgument("labeled pool is empty".into()));
    }
    if n_unl > 0 && split.unlabeled.is_empty() {
        return Err(Error::InvalidArgument("unlabeled pool is empty".into()));
    }
    let crop = &cfg.crop;
    let voxels: usize = crop.iter().product();
    let mut images = Vec::with_capacity((cfg.labeled_per_batch + n_unl) * voxels);
    let mut masks = Vec::with_capacity(cfg.labeled_per_batch * voxels);
    let mut sdms = Vec::with_capacity(cfg.labeled_per_batch * voxels);
    let mut degenerate = Vec::with_capacity(cfg.labeled_per_batch);
    for _ in 0..cfg.labeled_per_batch {
        let mut tries = 0;
        let (img, mask, sdm) = loop {
            let rec = &split.labeled[labeled_rng.random_range(0..split.labeled.len())];
            let (img, mask) = crop_item(rec, crop, true, labeled_rng)?;
            let mask = mask.ok_or_else(|| {
                Error::InvalidArgument(format!("labeled case {} has no mask", rec.case_id))
            })?;
            let sdm = normalize_sdm(&signed_distance_map(&mask));
            tries += 1;
            if !sdm.degenerate || !cfg.resample_degenerate || tries >= 100 {
                break (img, mask, sdm);
            }
        };
        images.extend(img);
        masks.extend(mask.as_f64());
        sdms.extend_from_slice(&sdm.values);
        degenerate.push(sdm.degenerate);
    }
    for _ in 0..n_unl {
        let rec = &split.unlabeled[unlabeled_rng.random_range(0..split.unlabeled.len())];
        let (img, _) = crop_item(rec, crop, cfg.augment_unlabeled, unlabeled_rng)?;
        images.extend(img);
    }
    let b = cfg.labeled_per_batch + n_unl;
    let with_batch = |n: usize| {
        let mut s = vec![n, 1];
        s.extend_from_slice(crop);
        s
    };
    let mut labeled = vec![true; cfg.labeled_per_batch];
    labeled.resize(b, false);
    Ok(Batch {
        images: Tensor::new(with_batch(b), images)?,
        labeled,
        masks: Tensor::new(with_batch(cfg.labeled_per_batch), masks)?,
        sdm: Tensor::new(with_batch(cfg.labeled_per_batch), sdms)?,
        degenerate,
    })
}

/// The batch for step `t`; each step draws from its own RNG streams.
pub fn batch_for_step(split: &DatasetSplit, cfg: &TrainConfig, t: usize) -> Result<Batch> {
    let mut lr = stream_rng(cfg.seed, STREAM_LABELED, t as u64);
    let mut ur = stream_rng(cfg.seed, STREAM_UNLABELED, t as u64);
    sample_batch(split, cfg, &mut lr, &mut ur)
}

/// Loss breakdown of `batch` at step `t` without updating the network.
pub fn evaluate_losses(network: &Network, batch: &Batch, t: usize, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = network.register(&mut tape)?;
    let input = tape.constant(batch.images.clone())?;
    let out = network.forward(&mut tape, input, &params)?;
    let (_, br) = total_loss(&mut tape, &out, &batch.targets(), t, cfg.ramp_horizon(), &cfg.loss)?;
    Ok(br)
}

/// One forward/backward/SGD update. Returns the loss breakdown used for the update.
pub fn train_step(network: &mut Network, batch: &Batch, t: usize, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = network.register(&mut tape)?;
    let input = tape.constant(batch.images.clone())?;
    let out = network.forward(&mut tape, input, &params)?;
    let (loss, br) = total_loss(&mut tape, &out, &batch.targets(), t, cfg.ramp_horizon(), &cfg.loss)?;
    if let Some(term) = br.non_finite_term() {
        return Err(Error::NonFinite {
            op: format!("{term} at step {t}"),
        });
    }
    let mut grads = tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
        .collect::<Vec<_>>();
    sgd_step(network.parameters_mut(), &grads, cfg.lr_at(t), cfg.momentum)?;
    Ok(br)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub steps: usize,
    pub momentum: f64,
    pub final_losses: Option<LossBreakdown>,
    pub wall_seconds: f64,
    pub config_sha256: String,
    pub final_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Breakdowns of the steps run in this call.
    pub log: Vec<LossBreakdown>,
    pub summary: TrainSummary,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_FILE: &str = "losses.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

pub fn loss_csv_preamble() -> String {
    format!(
        "# schema_version={LOSS_CSV_SCHEMA}\n{}\n",
        LossBreakdown::CSV_HEADER
    )
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rewrites the loss log keeping the preamble and rows for steps before `start`.
fn prepare_loss_log(path: &Path, start: usize) -> Result<fs::File> {
    let mut text = loss_csv_preamble();
    if start > 0 {
        let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = old
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("step"))
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .is_some_and(|s| s < start)
            });
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
    }
    fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Runs steps `start..t_max`, where `start` comes from `resume` (0 otherwise).
///
/// With a run directory, writes the config snapshot, one loss row per step,
/// checkpoints at the configured cadence plus a final one, and a summary.
pub fn train_loop(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let snapshot = cfg.to_toml()?;
    let config_sha256 = sha256_hex(snapshot.as_bytes());
    let (mut network, start) = match resume {
        Some(ck) => {
            if ck.rng.seed != cfg.seed || ck.network.config() != &cfg.network {
                return Err(Error::Config(
                    "checkpoint seed or network config differs from the run config".into(),
                ));
            }
            (ck.network, ck.rng.step)
        }
        None => (Network::build(cfg.network.clone())?, 0),
    };
    if start > cfg.t_max {
        return Err(Error::Config(format!(
            "checkpoint step {start} is past t_max {}",
            cfg.t_max
        )));
    }
    let mut log_file = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(CONFIG_FILE);
            fs::write(&p, &snapshot).map_err(|e| Error::io(&p, e))?;
            Some(prepare_loss_log(&dir.join(LOSS_FILE), start)?)
        }
        None => None,
    };
    let clock = Instant::now();
    let mut log = Vec::with_capacity(cfg.t_max - start);
    for t in start..cfg.t_max {
        let batch = batch_for_step(split, cfg, t)?;
        let br = train_step(&mut network, &batch, t, cfg)?;
        if let (Some(f), Some(dir)) = (log_file.as_mut(), run_dir) {
            writeln!(f, "{}", br.csv_row(t)).map_err(|e| Error::io(dir.join(LOSS_FILE), e))?;
            let done = t + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let rng = RngState { seed: cfg.seed, step: done };
                save_checkpoint(&checkpoint_path(dir, done), &network, rng)?;
            }
        }
        log.push(br);
    }
    let mut final_checkpoint = None;
    if let Some(dir) = run_dir {
        let p = dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
        let rng = RngState {
            seed: cfg.seed,
            step: cfg.t_max,
        };
        save_checkpoint(&p, &network, rng)?;
        final_checkpoint = Some(p);
    }
    let summary = TrainSummary {
        seed: cfg.seed,
        steps: cfg.t_max,
        momentum: cfg.momentum,
        final_losses: log.last().cloned(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        config_sha256,
        final_checkpoint,
    };
    if let Some(dir) = run_dir {
        let p = dir.join(SUMMARY_FILE);
        fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        network,
        log,
        summary,
    })
}
