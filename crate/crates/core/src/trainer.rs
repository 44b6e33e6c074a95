//! Dataset splitting, the training loop and binarising inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_pair, AugmentPolicy};
use crate::error::{Error, Result};
use crate::loss::{combined_loss_logits, sigmoid, LossConfig};
use crate::nn::unet::DIVISOR;
use crate::nn::{Adam, Checkpoint, ModelConfig, ResUNet, Tensor, TrainingMeta};
use crate::scalar::Scalar;
use crate::volumes::{linear_index, voxel_count, Dims, ImageVolume, LabelMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the non-test pool held out for model selection.
    pub validation_fraction: f64,
    pub augment: AugmentPolicy,
    pub loss: LossConfig,
    /// Start the output layer at the training-set foreground rate unless the
    /// model config fixes `output_bias`.
    pub prior_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 60,
            seed: 0,
            validation_fraction: 1.0 / 6.0,
            augment: AugmentPolicy::default(),
            loss: LossConfig::default(),
            prior_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::domain("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::domain("validation_fraction must lie in [0, 1)"));
        }
        self.augment.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_val: Vec<String>,
    pub test: Vec<String>,
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Seeded shuffle, then the first `round(test_fraction · n)` (at least 1) cases
/// become the test set.
pub fn split_dataset(case_ids: &[String], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let n = case_ids.len();
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 cases to split, got {n}")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::domain(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let order = shuffled(case_ids, seed);
    Ok(DatasetSplit { test: order[..n_test].to_vec(), train_val: order[n_test..].to_vec() })
}

/// One labelled training volume.
#[derive(Clone, Debug)]
pub struct TrainingCase<T> {
    pub id: String,
    pub volume: ImageVolume<T>,
    pub mask: LabelMask,
}

/// Per-epoch progress passed to the training observer.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for each (run seed, epoch, case) triple.
pub fn stream_seed(seed: u64, epoch: usize, case: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ case as u64)
}

/// Mirror index into `0..n` for any integer position (period `2n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Smallest multiple of 16 per axis that holds `dims`.
pub fn padded_dims(dims: Dims) -> Dims {
    dims.map(|d| d.div_ceil(DIVISOR).max(1) * DIVISOR)
}

/// Reflect-pads `data` on the high end of each axis up to `target`.
pub fn reflect_pad<V: Copy>(data: &[V], dims: Dims, target: Dims) -> Vec<V> {
    let mut out = Vec::with_capacity(voxel_count(target));
    for z in 0..target[2] {
        let sz = reflect(z as isize, dims[2]);
        for y in 0..target[1] {
            let sy = reflect(y as isize, dims[1]);
            for x in 0..target[0] {
                out.push(data[linear_index(dims, reflect(x as isize, dims[0]), sy, sz)]);
            }
        }
    }
    out
}

/// Inverse of [`reflect_pad`]: keeps the low corner of size `dims`.
pub fn crop<V: Copy>(data: &[V], padded: Dims, dims: Dims) -> Vec<V> {
    let mut out = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let row = linear_index(padded, 0, y, z);
            out.extend_from_slice(&data[row..row + dims[0]]);
        }
    }
    out
}

/// Normalised, padded network input and target for one case.
fn prepare<T: Scalar>(volume: &ImageVolume<T>, mask: Option<&LabelMask>, target: Dims) -> (Vec<T>, Vec<T>) {
    let norm = volume.normalized();
    let x = reflect_pad(norm.data(), volume.dims(), target);
    let y = match mask {
        Some(m) => reflect_pad(m.data(), m.dims(), target).into_iter().map(|b| T::lit(f64::from(b))).collect(),
        None => Vec::new(),
    };
    (x, y)
}

fn batch_tensor<T: Scalar>(parts: &[(Vec<T>, Vec<T>)], dims: Dims) -> Result<(Tensor<T>, Vec<T>)> {
    let mut x = Vec::with_capacity(parts.len() * voxel_count(dims));
    let mut y = Vec::with_capacity(x.capacity());
    for (a, b) in parts {
        x.extend_from_slice(a);
        y.extend_from_slice(b);
    }
    Ok((Tensor::from_vec(x, parts.len(), 1, dims)?, y))
}

/// Mean evaluation-mode loss over cases, without augmentation.
fn eval_loss<T: Scalar>(
    model: &ResUNet<T>,
    prepared: &[(Vec<T>, Vec<T>)],
    dims: Dims,
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in prepared {
        let (x, y) = batch_tensor(std::slice::from_ref(p), dims)?;
        let logits = model.infer(&x)?;
        total += combined_loss_logits(&logits.data, &y, loss)?.0.as_f64();
    }
    Ok(total / prepared.len() as f64)
}

/// Log-odds of the pooled foreground rate, with the rate clamped to
/// `[1e-4, 0.5]` so empty or dense masks still give a usable start.
pub fn prior_logit<'a>(masks: impl IntoIterator<Item = &'a LabelMask>) -> f64 {
    let (mut fg, mut total) = (0usize, 0usize);
    for m in masks {
        fg += m.count();
        total += voxel_count(m.dims());
    }
    let p = (fg as f64 / total.max(1) as f64).clamp(1e-4, 0.5);
    (p / (1.0 - p)).ln()
}

pub fn train<T: Scalar>(cases: &[TrainingCase<T>], cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Checkpoint<T>> {
    train_with_observer(cases, cfg, model_cfg, |_| {})
}

/// Trains from scratch and returns the weights with the best validation loss.
///
/// A held-out validation subset of size `round(validation_fraction · n)` is
/// drawn with the run seed; when it would be empty (or leave no training
/// case) the evaluation-mode loss on the training cases is used instead.
pub fn train_with_observer<T: Scalar>(
    cases: &[TrainingCase<T>],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut observer: impl FnMut(&EpochStats),
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::domain("no training cases"));
    }
    for c in cases {
        if !c.volume.is_aligned_with(&c.mask) {
            return Err(Error::domain(format!("case {}: volume and mask are not aligned", c.id)));
        }
    }
    let dims = padded_dims(cases.iter().fold([1, 1, 1], |acc, c| {
        let d = c.volume.dims();
        [acc[0].max(d[0]), acc[1].max(d[1]), acc[2].max(d[2])]
    }));

    let n = cases.len();
    let n_val = (cfg.validation_fraction * n as f64).round() as usize;
    let order = shuffled(&(0..n).collect::<Vec<_>>(), splitmix(cfg.seed ^ 0x5eed));
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) = if n_val == 0 || n_val >= n {
        (Vec::new(), (0..n).collect())
    } else {
        let (v, t) = order.split_at(n_val);
        let (mut v, mut t) = (v.to_vec(), t.to_vec());
        v.sort_unstable();
        t.sort_unstable();
        (v, t)
    };
    let selection_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let selection: Vec<(Vec<T>, Vec<T>)> =
        selection_idx.iter().map(|&i| prepare(&cases[i].volume, Some(&cases[i].mask), dims)).collect();
    let clean_train: Vec<(Vec<T>, Vec<T>)> = if cfg.augment.p_each == 0.0 {
        train_idx.iter().map(|&i| prepare(&cases[i].volume, Some(&cases[i].mask), dims)).collect()
    } else {
        Vec::new()
    };

    let mut model_cfg = model_cfg.clone();
    if cfg.prior_bias && model_cfg.output_bias.is_none() {
        model_cfg.output_bias = Some(prior_logit(train_idx.iter().map(|&i| &cases[i].mask)));
    }
    let mut model = ResUNet::<T>::new(&model_cfg)?;
    let mut opt = Adam::<T>::new(cfg.learning_rate);
    let mut meta = TrainingMeta { seed: cfg.seed, ..Default::default() };
    let mut best: Option<(f64, ResUNet<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, usize::MAX)));
        let mut batch_losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(Vec<T>, Vec<T>)> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment.p_each == 0.0 {
                        let k = train_idx.iter().position(|&t| t == i).expect("training index");
                        return Ok(clean_train[k].clone());
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, i));
                    let (v, m) = augment_pair(&cases[i].volume, &cases[i].mask, &cfg.augment, &mut rng)?;
                    Ok(prepare(&v, Some(&m), dims))
                })
                .collect::<Result<_>>()?;
            let (x, y) = batch_tensor(&parts, dims)?;
            let logits = model.forward(&x)?;
            let (loss, grad) = combined_loss_logits(&logits.data, &y, &cfg.loss)?;
            let loss = loss.as_f64();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, value: loss });
            }
            model.backward(&Tensor::from_vec(grad, logits.n, logits.c, logits.dims)?);
            opt.step(model.params_mut().into_iter().map(|(_, p)| p));
            model.zero_grad();
            batch_losses.push(loss);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_loss = eval_loss(&model, &selection, dims, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, value: val_loss });
        }
        meta.train_losses.push(train_loss);
        meta.val_losses.push(val_loss);
        meta.epochs_run = epoch;
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, model.clone()));
            meta.best_epoch = epoch;
        }
        observer(&EpochStats { epoch, train_loss, val_loss, improved });
    }
    meta.final_train_loss = meta.train_losses.last().copied();
    meta.final_val_loss = meta.val_losses.last().copied();
    let (_, model) = best.expect("at least one epoch");
    Ok(Checkpoint::new(model, meta))
}

/// Foreground probabilities on the volume's own grid.
pub fn predict_proba<T: Scalar>(model: &ResUNet<T>, volume: &ImageVolume<T>) -> Result<Vec<T>> {
    let dims = volume.dims();
    let target = padded_dims(dims);
    let (x, _) = prepare(volume, None, target);
    let logits = model.infer(&Tensor::from_vec(x, 1, 1, target)?)?;
    Ok(crop(&logits.data, target, dims).into_iter().map(sigmoid).collect())
}

/// Binary mask: probability ≥ 0.5 is foreground.
pub fn predict<T: Scalar>(model: &ResUNet<T>, volume: &ImageVolume<T>) -> Result<LabelMask> {
    let probs = predict_proba(model, volume)?;
    let half = T::lit(0.5);
    Ok(LabelMask::zeros_like(volume).from_fn_like(|i| probs[i] >= half))
}
