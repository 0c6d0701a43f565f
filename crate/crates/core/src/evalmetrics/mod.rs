//! Desk-scale evaluation: adjacent-view perceptual distance, prior score
//! consistency, classifier retrieval precision and run-cost comparison.

mod bench;
mod classifier;
mod features;

pub use bench::{bench_report, reference_rows, BenchReport, BenchRow, ReferenceRow, REFERENCE_SCALE};
pub use classifier::{
    azimuth_bin, azimuth_bin_center, ClassPredictor, ClassifierConfig, ClassifierInfo, HeadAccuracy, ViewClassifier,
};
pub use features::{FeatureExtractor, FEATURE_CHANNELS, FEATURE_SEED};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conddiffusion::{forward_noise, Condition, EpsPredictor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::quatpose::uniform_hemisphere_poses;
use crate::radiancefield::{render_image_values, RadianceGrid, RenderSettings};
use crate::scalar::Scalar;

/// Mean perceptual distance between consecutive frames of a turntable.
pub fn a_lpips_proxy(frames: &[Image]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::InvalidInput("adjacent-view distance needs at least 2 frames".into()));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    if frames.iter().any(|f| f.height != h || f.width != w) {
        return Err(Error::ShapeMismatch("turntable frames differ in size".into()));
    }
    let fx = FeatureExtractor::standard();
    let feats: Vec<_> = frames.par_iter().map(|f| fx.features(f)).collect();
    // Summed in sorted order so reversing the sequence gives the same bits.
    let mut d: Vec<f64> = feats.windows(2).map(|p| fx.distance(&p[0], &p[1])).collect();
    d.sort_by(f64::total_cmp);
    let total: f64 = d.iter().sum();
    Ok(total / (frames.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Hemisphere poses, evenly spaced in azimuth.
    pub views: usize,
    /// Evaluation timestep as a fraction of the schedule length.
    pub t_fraction: f64,
    pub trials: usize,
    pub elevation_deg: f64,
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { views: 8, t_fraction: 0.25, trials: 8, elevation_deg: 25.0, seed: 0 }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 || self.trials == 0 {
            return Err(Error::InvalidConfig("score consistency needs at least 2 views and 1 trial".into()));
        }
        if !(self.t_fraction > 0.0 && self.t_fraction <= 1.0) {
            return Err(Error::InvalidConfig("t_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn timestep(&self, timesteps: usize) -> usize {
        ((self.t_fraction * timesteps as f64).round() as usize).clamp(1, timesteps)
    }
}

/// Mean squared noise-prediction residual of the prior over renders of
/// `grid` from hemisphere poses; lower means every view looks like data to
/// the prior.
pub fn score_consistency<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    grid: &RadianceGrid<S>,
    model: &P,
    class: Option<usize>,
    config: &ScoreConfig,
    settings: &RenderSettings,
) -> Result<f64> {
    config.validate()?;
    let radius = (settings.near + settings.far) / 2.0;
    let poses = uniform_hemisphere_poses(config.views, config.elevation_deg.to_radians(), radius)?;
    let t = config.timestep(model.schedule().timesteps());
    let p = model.image_len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x_t = Vec::with_capacity(config.views * config.trials * p);
    let mut eps_all = Vec::with_capacity(x_t.capacity());
    let mut conds = Vec::with_capacity(config.views * config.trials);
    for pose in &poses {
        let pose_s = pose.cast::<S>();
        let x0: Vec<S> = render_image_values(grid, &pose_s, settings, config.seed)?.to_signed().into_iter().map(S::from_f64_lossy).collect();
        if x0.len() != p {
            return Err(Error::ShapeMismatch(format!("render has {} values, prior expects {p}", x0.len())));
        }
        for _ in 0..config.trials {
            let eps: Vec<S> = (0..p).map(|_| S::from_f64_lossy(StandardNormal.sample(&mut rng))).collect();
            x_t.extend(forward_noise(&x0, t, &eps, model.schedule())?);
            eps_all.extend(eps);
            conds.push(Condition { class, orientation: pose_s.orientation });
        }
    }
    let ts = vec![t; conds.len()];
    let eps_hat = model.predict_eps(&x_t, &ts, &conds)?;
    let sq: f64 = eps_hat.iter().zip(&eps_all).map(|(&a, &b)| (a - b).to_f64_lossy().powi(2)).sum();
    Ok(sq / eps_all.len() as f64)
}

/// Fraction of images whose predicted class equals the intended one.
pub fn r_precision_proxy<C: ClassPredictor + ?Sized>(images: &[Image], intended: &[usize], classifier: &C) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidInput("retrieval precision needs at least one image".into()));
    }
    if images.len() != intended.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} labels", images.len(), intended.len())));
    }
    let mut hits = 0usize;
    for (img, &c) in images.iter().zip(intended) {
        if classifier.predict_class(img)? == c {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub class_id: usize,
    pub a_lpips_proxy: f64,
    pub score_consistency: f64,
    pub r_precision: f64,
}

/// Metric summary written next to run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub a_lpips_proxy: f64,
    pub score_consistency: f64,
    pub r_precision: f64,
    pub per_prompt: Vec<PromptMetrics>,
    pub config: serde_json::Value,
}

pub const METRIC_SCHEMA_VERSION: u32 = 1;

/// JSON schema of [`MetricReport`].
pub const METRIC_REPORT_SCHEMA: &str = include_str!("metric_report.schema.json");

impl MetricReport {
    /// Averages per-prompt rows into the headline numbers.
    pub fn from_prompts(per_prompt: Vec<PromptMetrics>, config: serde_json::Value) -> Result<Self> {
        if per_prompt.is_empty() {
            return Err(Error::InvalidInput("metric report needs at least one prompt".into()));
        }
        let n = per_prompt.len() as f64;
        let mean = |f: fn(&PromptMetrics) -> f64| per_prompt.iter().map(f).sum::<f64>() / n;
        let report = Self {
            schema_version: METRIC_SCHEMA_VERSION,
            a_lpips_proxy: mean(|p| p.a_lpips_proxy),
            score_consistency: mean(|p| p.score_consistency),
            r_precision: mean(|p| p.r_precision),
            per_prompt,
            config,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.per_prompt.iter().flat_map(|p| [p.a_lpips_proxy, p.score_consistency, p.r_precision]);
        let all: Vec<f64> = [self.a_lpips_proxy, self.score_consistency, self.r_precision].into_iter().chain(rows).collect();
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("metric values must be finite and non-negative".into()));
        }
        if self.r_precision > 1.0 || self.per_prompt.iter().any(|p| p.r_precision > 1.0) {
            return Err(Error::InvalidInput("retrieval precision above 1".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "a_lpips_proxy      {:.6}\nscore_consistency  {:.6}\nr_precision        {:.4}\n\n{:>5}  {:>12}  {:>12}  {:>11}\n",
            self.a_lpips_proxy, self.score_consistency, self.r_precision, "class", "a_lpips", "score", "r_precision"
        );
        for p in &self.per_prompt {
            s += &format!("{:>5}  {:>12.6}  {:>12.6}  {:>11.4}\n", p.class_id, p.a_lpips_proxy, p.score_consistency, p.r_precision);
        }
        s
    }
}
