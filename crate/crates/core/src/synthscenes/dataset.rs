use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_view, RenderOptions, SceneSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::quatpose::{pose_from_spherical, poses_from_json, poses_to_json, CameraPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub scenes_per_class: usize,
    pub views: usize,
    pub resolution: usize,
    pub seed: u64,
    pub camera_radius: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: NUM_CLASSES,
            scenes_per_class: 4,
            views: 16,
            resolution: 16,
            seed: 0,
            camera_radius: 2.0,
            elevation_min_deg: 10.0,
            elevation_max_deg: 40.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.scenes_per_class == 0 || self.views == 0 {
            return Err(Error::InvalidConfig("dataset counts must be at least 1".into()));
        }
        if self.classes > NUM_CLASSES {
            return Err(Error::InvalidConfig(format!("at most {NUM_CLASSES} classes are defined")));
        }
        if self.resolution < 8 {
            return Err(Error::InvalidConfig("resolution must be at least 8".into()));
        }
        if !(self.camera_radius > 1.0) {
            return Err(Error::CameraInsideScene { radius: self.camera_radius });
        }
        if !(self.elevation_min_deg <= self.elevation_max_deg && self.elevation_max_deg < 90.0 && self.elevation_min_deg > -90.0) {
            return Err(Error::InvalidConfig("elevation range must be ordered and inside (-90, 90) degrees".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.classes * self.scenes_per_class * self.views
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub frames: usize,
    pub scenes: Vec<SceneSpec>,
}

/// Frames ordered by `(scene, view)` with aligned poses and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub manifest: Manifest,
    pub frames: Vec<Image>,
    pub poses: Vec<CameraPose<f64>>,
    pub labels: Vec<usize>,
}

fn random_jitter(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

fn random_elevation(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> f64 {
    if cfg.elevation_max_deg > cfg.elevation_min_deg {
        rng.random_range(cfg.elevation_min_deg..cfg.elevation_max_deg).to_radians()
    } else {
        cfg.elevation_min_deg.to_radians()
    }
}

/// Renders the multi-view dataset described by `cfg`. Deterministic in
/// `cfg.seed` regardless of how many worker threads render frames.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<MultiViewDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.classes * cfg.scenes_per_class);
    let mut poses = Vec::with_capacity(cfg.frame_count());
    let mut labels = Vec::with_capacity(cfg.frame_count());
    let mut jobs = Vec::with_capacity(cfg.frame_count());
    for class_id in 0..cfg.classes {
        for _ in 0..cfg.scenes_per_class {
            let scene_index = scenes.len();
            scenes.push(SceneSpec::for_class(class_id, random_jitter(&mut rng))?);
            for v in 0..cfg.views {
                let az = std::f64::consts::TAU * v as f64 / cfg.views as f64;
                let pose = pose_from_spherical(az, random_elevation(&mut rng, cfg), cfg.camera_radius)?;
                poses.push(pose);
                labels.push(class_id);
                jobs.push(scene_index);
            }
        }
    }
    let res = cfg.resolution;
    let opts = RenderOptions::default();
    let frames = jobs
        .par_iter()
        .zip(poses.par_iter())
        .map(|(&s, pose)| render_view(&scenes[s], pose, res, res, &opts).quantized())
        .collect();
    Ok(MultiViewDataset {
        manifest: Manifest { config: cfg.clone(), frames: cfg.frame_count(), scenes },
        frames,
        poses,
        labels,
    })
}

pub fn frame_file_name(scene: usize, view: usize) -> String {
    format!("frame_{scene:04}_{view:03}.ppm")
}

impl MultiViewDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn views_per_scene(&self) -> usize {
        self.manifest.config.views
    }

    /// Index of the scene that produced frame `i`.
    pub fn scene_of(&self, i: usize) -> usize {
        i / self.views_per_scene()
    }

    /// Frame indices belonging to scene `s`.
    pub fn scene_frames(&self, s: usize) -> std::ops::Range<usize> {
        let v = self.views_per_scene();
        s * v..(s + 1) * v
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write("manifest.json", manifest)?;
        write("poses.json", poses_to_json(&self.poses))?;
        write("labels.json", serde_json::to_string(&self.labels).expect("labels serialize"))?;
        for (i, frame) in self.frames.iter().enumerate() {
            let (s, v) = (self.scene_of(i), i % self.views_per_scene());
            frame.write_ppm(&dir.join(frame_file_name(s, v)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest: Manifest =
            serde_json::from_str(&read("manifest.json")?).map_err(|e| Error::format(dir.join("manifest.json"), e.to_string()))?;
        let poses = poses_from_json(&read("poses.json")?)?;
        let labels: Vec<usize> =
            serde_json::from_str(&read("labels.json")?).map_err(|e| Error::format(dir.join("labels.json"), e.to_string()))?;
        let n = manifest.frames;
        if poses.len() != n || labels.len() != n || manifest.config.frame_count() != n {
            return Err(Error::format(dir, "frame, pose and label counts disagree"));
        }
        let views = manifest.config.views;
        let frames = (0..n)
            .map(|i| Image::read_ppm(&dir.join(frame_file_name(i / views, i % views))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, frames, poses, labels })
    }
}

/// Freshly sampled scene view with its labels, used to fit the view classifier.
#[derive(Debug, Clone)]
pub struct LabeledView {
    pub image: Image,
    pub class_id: usize,
    pub pose: CameraPose<f64>,
}

/// How [`sample_labeled_views`] draws camera azimuths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AzimuthSampling {
    Uniform,
    /// Center of a random bin out of `bins`, plus uniform jitter of at most
    /// `jitter_deg` degrees.
    BinCenters { bins: usize, jitter_deg: f64 },
}

impl AzimuthSampling {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            AzimuthSampling::Uniform => rng.random_range(0.0..std::f64::consts::TAU),
            AzimuthSampling::BinCenters { bins, jitter_deg } => {
                let width = 360.0 / bins as f64;
                let b = rng.random_range(0..bins);
                let jitter = if jitter_deg > 0.0 { rng.random_range(-jitter_deg..jitter_deg) } else { 0.0 };
                ((b as f64 + 0.5) * width + jitter).rem_euclid(360.0).to_radians()
            }
        }
    }
}

/// `per_class` random views of random scenes of every class, elevation
/// inside the configured band.
pub fn sample_labeled_views(cfg: &DatasetConfig, per_class: usize, azimuths: AzimuthSampling, seed: u64) -> Result<Vec<LabeledView>> {
    if let AzimuthSampling::BinCenters { bins: 0, .. } = azimuths {
        return Err(Error::InvalidConfig("azimuth sampling needs at least one bin".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(per_class * cfg.classes);
    for class_id in 0..cfg.classes {
        for _ in 0..per_class {
            let scene = SceneSpec::for_class(class_id, random_jitter(&mut rng))?;
            let az = azimuths.draw(&mut rng);
            let pose = pose_from_spherical(az, random_elevation(&mut rng, cfg), cfg.camera_radius)?;
            jobs.push((scene, pose));
        }
    }
    let res = cfg.resolution;
    let opts = RenderOptions::default();
    Ok(jobs
        .into_par_iter()
        .map(|(scene, pose)| LabeledView {
            image: render_view(&scene, &pose, res, res, &opts).quantized(),
            class_id: scene.class_id,
            pose,
        })
        .collect())
}
