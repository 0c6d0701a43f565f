use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthscenes::{sample_labeled_views, AzimuthSampling, DatasetConfig, LabeledView};
use crate::tensorgrad::{load_checkpoint, save_checkpoint, Adam, AdamConfig, ParamSet, Tape, Tensor, Var};

/// Something that assigns a class id to an image.
pub trait ClassPredictor {
    fn predict_class(&self, image: &Image) -> Result<usize>;
}

/// Bin of `azimuth` (radians) among `bins` equal sectors starting at 0.
pub fn azimuth_bin(azimuth: f64, bins: usize) -> usize {
    let a = azimuth.rem_euclid(std::f64::consts::TAU);
    ((a / std::f64::consts::TAU * bins as f64).floor() as usize).min(bins - 1)
}

/// Center of azimuth bin `b`, radians.
pub fn azimuth_bin_center(b: usize, bins: usize) -> f64 {
    (b as f64 + 0.5) * std::f64::consts::TAU / bins as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub azimuth_bins: usize,
    pub train_per_class: usize,
    pub holdout_per_class: usize,
    /// Training views sit within this many degrees of a bin center.
    pub jitter_deg: f64,
    /// Std of Gaussian pixel noise added to training inputs in `[-1, 1]`.
    pub input_noise: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_accuracy: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            azimuth_bins: 8,
            train_per_class: 400,
            holdout_per_class: 100,
            jitter_deg: 15.0,
            input_noise: 0.05,
            steps: 3000,
            batch_size: 64,
            lr: 2e-3,
            min_accuracy: 0.95,
            max_attempts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub class: f64,
    pub azimuth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierInfo {
    pub config: ClassifierConfig,
    pub dataset: DatasetConfig,
    pub classes: usize,
    pub image_len: usize,
    /// Seed of the accepted attempt.
    pub train_seed: u64,
    pub attempts: usize,
    pub heldout: HeadAccuracy,
}

/// Oracle MLP predicting class and azimuth bin from a rendered view.
#[derive(Debug, Clone)]
pub struct ViewClassifier {
    pub info: ClassifierInfo,
    params: ParamSet<f64>,
}

struct Views {
    inputs: Vec<f64>,
    classes: Vec<usize>,
    bins: Vec<usize>,
}

fn views(list: &[LabeledView], bins: usize) -> Views {
    Views {
        inputs: list.iter().flat_map(|v| v.image.to_signed()).collect(),
        classes: list.iter().map(|v| v.class_id).collect(),
        bins: list.iter().map(|v| azimuth_bin(v.pose.azimuth(), bins)).collect(),
    }
}

fn init_params(p: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut params = ParamSet::new();
    let mut dense = |params: &mut ParamSet<f64>, name: &str, fan_in: usize, fan_out: usize| {
        let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
        let w = (0..fan_in * fan_out).map(|_| n.sample(rng)).collect();
        params.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("shape").with_grad());
        params.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]).with_grad());
    };
    dense(&mut params, "l0", p, hidden);
    dense(&mut params, "l1", hidden, hidden);
    dense(&mut params, "head", hidden, out);
    params
}

fn logits(tape: &mut Tape<f64>, vars: &[Var], x: Vec<f64>, n: usize, p: usize) -> Result<Var> {
    let x = tape.constant(Tensor::new(vec![n, p], x)?);
    let mut h = x;
    for layer in 0..2 {
        let a = tape.matmul(h, vars[2 * layer])?;
        let a = tape.add(a, vars[2 * layer + 1])?;
        h = tape.silu(a);
    }
    let o = tape.matmul(h, vars[4])?;
    tape.add(o, vars[5])
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

impl ViewClassifier {
    /// Trains on fresh labeled renders and checks both heads on a held-out
    /// set. An attempt below `min_accuracy` is discarded and retried with
    /// the next seed; after `max_attempts` failures the error reports the
    /// best accuracy seen.
    pub fn train(dataset: &DatasetConfig, config: &ClassifierConfig) -> Result<Self> {
        if config.azimuth_bins == 0 || config.hidden == 0 || config.batch_size == 0 || config.max_attempts == 0 {
            return Err(Error::InvalidConfig("classifier sizes must be at least 1".into()));
        }
        let sampling = AzimuthSampling::BinCenters { bins: config.azimuth_bins, jitter_deg: config.jitter_deg };
        let mut best = HeadAccuracy { class: 0.0, azimuth: 0.0 };
        for attempt in 0..config.max_attempts {
            let seed = config.seed + attempt as u64;
            let train = views(&sample_labeled_views(dataset, config.train_per_class, sampling, 2 * seed + 1_000_003)?, config.azimuth_bins);
            let held = views(&sample_labeled_views(dataset, config.holdout_per_class, sampling, 2 * seed + 1_000_004)?, config.azimuth_bins);
            let image_len = 3 * dataset.resolution * dataset.resolution;
            let mut clf = Self::fit(dataset, config, &train, image_len, seed)?;
            let acc = clf.accuracy_on(&held)?;
            clf.info.attempts = attempt + 1;
            clf.info.heldout = acc;
            if acc.class >= config.min_accuracy && acc.azimuth >= config.min_accuracy {
                return Ok(clf);
            }
            if acc.class.min(acc.azimuth) > best.class.min(best.azimuth) {
                best = acc;
            }
        }
        Err(Error::InvalidInput(format!(
            "view classifier did not reach {:.0}% held-out accuracy (best class {:.3}, azimuth {:.3})",
            config.min_accuracy * 100.0,
            best.class,
            best.azimuth
        )))
    }

    fn fit(dataset: &DatasetConfig, config: &ClassifierConfig, data: &Views, image_len: usize, seed: u64) -> Result<Self> {
        let classes = dataset.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(image_len, config.hidden, classes + config.azimuth_bins, &mut rng);
        let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &params);
        let noise = Normal::new(0.0, config.input_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let n = data.classes.len();
        let b = config.batch_size;
        for step in 0..config.steps {
            adam.config.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
            let mut x = Vec::with_capacity(b * image_len);
            for &i in &idx {
                x.extend(data.inputs[i * image_len..(i + 1) * image_len].iter().map(|&v| v + noise.sample(&mut rng)));
            }
            let cls: Vec<usize> = idx.iter().map(|&i| data.classes[i]).collect();
            let bins: Vec<usize> = idx.iter().map(|&i| data.bins[i]).collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let out = logits(&mut tape, &vars, x, b, image_len)?;
            let lc = tape.slice_cols(out, 0, classes)?;
            let la = tape.slice_cols(out, classes, classes + config.azimuth_bins)?;
            let lc = tape.cross_entropy(lc, &cls)?;
            let la = tape.cross_entropy(la, &bins)?;
            let loss = tape.add(lc, la)?;
            if !tape.value(loss).data()[0].is_finite() {
                return Err(Error::Diverged("view classifier loss became non-finite".into()));
            }
            let mut grads = tape.backward(loss)?;
            let g = params.collect_grads(&vars, &mut grads);
            adam.update(&mut params, &g)?;
        }
        Ok(Self {
            info: ClassifierInfo {
                config: config.clone(),
                dataset: dataset.clone(),
                classes,
                image_len,
                train_seed: seed,
                attempts: 1,
                heldout: HeadAccuracy { class: 0.0, azimuth: 0.0 },
            },
            params,
        })
    }

    fn accuracy_on(&self, data: &Views) -> Result<HeadAccuracy> {
        let preds = self.predict_signed(&data.inputs)?;
        let n = data.classes.len() as f64;
        let class = preds.iter().zip(&data.classes).filter(|(p, &c)| p.0 == c).count() as f64 / n;
        let azimuth = preds.iter().zip(&data.bins).filter(|(p, &b)| p.1 == b).count() as f64 / n;
        Ok(HeadAccuracy { class, azimuth })
    }

    /// `(class, azimuth bin)` for images flattened in `[-1, 1]`.
    pub fn predict_signed(&self, inputs: &[f64]) -> Result<Vec<(usize, usize)>> {
        let p = self.info.image_len;
        if inputs.len() % p != 0 {
            return Err(Error::ShapeMismatch(format!("classifier expects multiples of {p} values, got {}", inputs.len())));
        }
        let n = inputs.len() / p;
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let out = logits(&mut tape, &vars, inputs.to_vec(), n, p)?;
        let k = self.info.classes;
        let width = k + self.info.config.azimuth_bins;
        Ok(tape.value(out).data().chunks(width).map(|row| (argmax(&row[..k]), argmax(&row[k..]))).collect())
    }

    /// `(class, azimuth bin)` per image.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<(usize, usize)>> {
        let inputs: Vec<f64> = images.iter().flat_map(|im| im.to_signed()).collect();
        self.predict_signed(&inputs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(path, &self.params)?;
        let side = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.info).expect("classifier info serializes");
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let info: ClassifierInfo = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let params = load_checkpoint::<f64>(path)?;
        let want = [
            vec![info.image_len, info.config.hidden],
            vec![info.config.hidden],
            vec![info.config.hidden, info.config.hidden],
            vec![info.config.hidden],
            vec![info.config.hidden, info.classes + info.config.azimuth_bins],
            vec![info.classes + info.config.azimuth_bins],
        ];
        if params.len() != want.len() || params.tensors().iter().zip(&want).any(|(t, w)| t.shape() != w.as_slice()) {
            return Err(Error::format(path, "classifier weights do not match their sidecar"));
        }
        Ok(Self { info, params })
    }
}

impl ClassPredictor for ViewClassifier {
    fn predict_class(&self, image: &Image) -> Result<usize> {
        Ok(self.predict(std::slice::from_ref(image))?[0].0)
    }
}
