//! Training signals: normal consistency, self-similarity alignment, circle
//! loss, the weighted total, the warm-up ramp and a kernel MMD estimate.
//!
//! Reductions run sequentially in index order so results are bit-stable.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::geometry::{NormalField, Vec3};

/// Row-norm tolerance for inputs that must be unit-normalised.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// `1 - mean(pred . target)` over jointly valid entries, with the gradient
/// with respect to each predicted normal (zero for excluded entries).
pub fn normal_consistency_loss(predicted: &NormalField, target: &NormalField) -> Result<(f64, Vec<Vec3>)> {
    if predicted.len() != target.len() {
        return Err(Error::LengthMismatch(predicted.len(), target.len()));
    }
    let joint: Vec<usize> = (0..predicted.len())
        .filter(|&i| predicted.valid_mask()[i] && target.valid_mask()[i])
        .collect();
    if joint.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let count = joint.len() as f64;
    let mut dot_sum = 0.0;
    let mut grad = vec![Vec3::zeros(); predicted.len()];
    for &i in &joint {
        let t = target.normals()[i];
        dot_sum += predicted.normals()[i].dot(&t);
        grad[i] = -t / count;
    }
    Ok((1.0 - dot_sum / count, grad))
}

/// Raw-vector form of [`normal_consistency_loss`] without unit checks, for
/// callers that perturb predictions off the sphere.
pub fn normal_consistency_raw(predicted: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::LengthMismatch(predicted.len(), target.len()));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let dot_sum: f64 = predicted.iter().zip(target).map(|(p, t)| p.dot(t)).sum();
    Ok(1.0 - dot_sum / predicted.len() as f64)
}

/// `S = F Fᵀ` for row-normalised features.
pub fn self_similarity(features: &FeatureField) -> Result<DMatrix<f64>> {
    features.check_normalized(NORMALIZATION_TOL)?;
    Ok(gram(features.matrix()))
}

fn gram(f: &DMatrix<f64>) -> DMatrix<f64> {
    f * f.transpose()
}

/// Result of [`gdc_loss`].
#[derive(Debug, Clone)]
pub struct GdcLoss {
    pub value: f64,
    pub grad_image: DMatrix<f64>,
    pub grad_cloud: DMatrix<f64>,
}

/// Squared Frobenius distance between the self-similarity matrices of two
/// matched feature sets, with gradients of the unconstrained composition.
pub fn gdc_loss(f_img: &FeatureField, f_cloud: &FeatureField) -> Result<GdcLoss> {
    if f_img.matrix().shape() != f_cloud.matrix().shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            f_img.matrix().shape(),
            f_cloud.matrix().shape()
        )));
    }
    f_img.check_normalized(NORMALIZATION_TOL)?;
    f_cloud.check_normalized(NORMALIZATION_TOL)?;
    Ok(gdc_loss_raw(f_img.matrix(), f_cloud.matrix()))
}

/// [`gdc_loss`] on raw matrices, skipping shape and normalisation checks.
pub fn gdc_loss_raw(f_img: &DMatrix<f64>, f_cloud: &DMatrix<f64>) -> GdcLoss {
    let diff = gram(f_img) - gram(f_cloud);
    let value = diff.iter().map(|d| d * d).sum();
    GdcLoss {
        value,
        grad_image: &diff * f_img * 4.0,
        grad_cloud: &diff * f_cloud * -4.0,
    }
}

/// Per-pair scaling of the circle-loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairScale {
    Uniform(f64),
    PerPair(Vec<f64>),
}

impl PairScale {
    fn get(&self, i: usize) -> f64 {
        match self {
            PairScale::Uniform(v) => *v,
            PairScale::PerPair(v) => v[i],
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        match self {
            PairScale::PerPair(v) if v.len() != n => Err(Error::LengthMismatch(n, v.len())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleLossConfig {
    pub gamma: f64,
    pub delta_p: f64,
    pub delta_n: f64,
    pub lambda_p: PairScale,
    pub lambda_n: PairScale,
}

impl Default for CircleLossConfig {
    fn default() -> Self {
        Self {
            gamma: 24.0,
            delta_p: 0.1,
            delta_n: 1.4,
            lambda_p: PairScale::Uniform(1.0),
            lambda_n: PairScale::Uniform(1.0),
        }
    }
}

impl CircleLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("gamma must be positive".into()));
        }
        if !(self.delta_p < self.delta_n) {
            return Err(Error::InvalidArgument("delta_p must be below delta_n".into()));
        }
        Ok(())
    }
}

/// Exponents `beta_p (d - Δp)` and `beta_n (Δn - d)` of the circle loss. The
/// adaptive weights are clamped at zero, so pairs already past their margin
/// contribute a constant `e^0`.
pub fn circle_exponents(distances_pos: &[f64], distances_neg: &[f64], cfg: &CircleLossConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    cfg.lambda_p.check_len(distances_pos.len())?;
    cfg.lambda_n.check_len(distances_neg.len())?;
    let pos = distances_pos
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let beta = cfg.gamma * cfg.lambda_p.get(j) * (d - cfg.delta_p).max(0.0);
            beta * (d - cfg.delta_p)
        })
        .collect();
    let neg = distances_neg
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let beta = cfg.gamma * cfg.lambda_n.get(k) * (cfg.delta_n - d).max(0.0);
            beta * (cfg.delta_n - d)
        })
        .collect();
    Ok((pos, neg))
}

/// Circle loss for one anchor, evaluated as `softplus(lse_p + lse_n) / γ`.
/// Either set being empty gives zero.
pub fn circle_loss(distances_pos: &[f64], distances_neg: &[f64], cfg: &CircleLossConfig) -> Result<f64> {
    if distances_pos.is_empty() || distances_neg.is_empty() {
        cfg.validate()?;
        return Ok(0.0);
    }
    let (pos, neg) = circle_exponents(distances_pos, distances_neg, cfg)?;
    Ok(softplus(log_sum_exp(&pos) + log_sum_exp(&neg)) / cfg.gamma)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn total_loss(l_match: f64, l_normal: f64, l_gdc: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_match + w.lambda2 * l_normal + w.lambda3 * l_gdc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSchedule {
    pub start_epoch: u32,
    pub end_epoch: u32,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        Self {
            start_epoch: 10,
            end_epoch: 20,
        }
    }
}

impl WarmupSchedule {
    pub fn new(start_epoch: u32, end_epoch: u32) -> Result<Self> {
        if start_epoch > end_epoch {
            return Err(Error::InvalidArgument(format!(
                "warm-up start {start_epoch} after end {end_epoch}"
            )));
        }
        Ok(Self {
            start_epoch,
            end_epoch,
        })
    }
}

/// Linear ramp from 0 at `start_epoch` to 1 at `end_epoch`.
pub fn warmup_weight(epoch: u32, s: &WarmupSchedule) -> f64 {
    if epoch >= s.end_epoch {
        1.0
    } else if epoch < s.start_epoch {
        0.0
    } else {
        f64::from(epoch - s.start_epoch) / f64::from(s.end_epoch - s.start_epoch)
    }
}

/// Plug-in estimate of squared MMD with a Gaussian kernel, clamped at zero.
pub fn mmd(sample_a: &FeatureField, sample_b: &FeatureField, bandwidth: f64) -> Result<f64> {
    if sample_a.rows() == 0 || sample_b.rows() == 0 {
        return Err(Error::EmptySample);
    }
    if sample_a.channels() != sample_b.channels() {
        return Err(Error::ChannelMismatch(sample_a.channels(), sample_b.channels()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument("bandwidth must be positive".into()));
    }
    let (a, b) = (sample_a.matrix(), sample_b.matrix());
    let denom = 2.0 * bandwidth * bandwidth;
    let mean_kernel = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        let mut s = 0.0;
        for i in 0..x.nrows() {
            for j in 0..y.nrows() {
                let d2 = (x.row(i) - y.row(j)).norm_squared();
                s += (-d2 / denom).exp();
            }
        }
        s / (x.nrows() * y.nrows()) as f64
    };
    let v = mean_kernel(a, a) - 2.0 * mean_kernel(a, b) + mean_kernel(b, b);
    Ok(v.max(0.0))
}

/// Median pairwise distance of the pooled samples; falls back to 1 when all
/// points coincide.
pub fn median_bandwidth(sample_a: &FeatureField, sample_b: &FeatureField) -> Result<f64> {
    if sample_a.channels() != sample_b.channels() {
        return Err(Error::ChannelMismatch(sample_a.channels(), sample_b.channels()));
    }
    let rows: Vec<_> = sample_a
        .matrix()
        .row_iter()
        .chain(sample_b.matrix().row_iter())
        .collect();
    if rows.len() < 2 {
        return Err(Error::EmptySample);
    }
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push((rows[i] - rows[j]).norm());
        }
    }
    d.sort_by(f64::total_cmp);
    let median = d[d.len() / 2];
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// [`mmd`] with the median-heuristic bandwidth.
pub fn mmd_median(sample_a: &FeatureField, sample_b: &FeatureField) -> Result<f64> {
    let bw = median_bandwidth(sample_a, sample_b)?;
    mmd(sample_a, sample_b, bw)
}

/// One loss evaluation as reported by the command-line tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub name: String,
    pub value: f64,
    pub epoch: u32,
    pub weight: f64,
}
