use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{Condition, EpsPredictor};
use super::schedule::{cfg_eps, ddim_step, NoiseSchedule};
use crate::error::Result;
use crate::image::Image;
use crate::quatpose::Quaternion;
use crate::scalar::Scalar;

/// Wraps a predictor and counts per-image forward evaluations.
#[derive(Debug)]
pub struct CountingPredictor<P> {
    pub inner: P,
    forwards: AtomicU64,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, forwards: AtomicU64::new(0) }
    }

    pub fn forward_evals(&self) -> u64 {
        self.forwards.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.forwards.store(0, Ordering::SeqCst);
    }
}

impl<S: Scalar, P: EpsPredictor<S>> EpsPredictor<S> for CountingPredictor<P> {
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    fn predict_eps(&self, x_t: &[S], t: &[usize], conds: &[Condition<S>]) -> Result<Vec<S>> {
        self.forwards.fetch_add(conds.len() as u64, Ordering::SeqCst);
        self.inner.predict_eps(x_t, t, conds)
    }
}

impl<S: Scalar, P: EpsPredictor<S> + ?Sized> EpsPredictor<S> for &P {
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }

    fn resolution(&self) -> usize {
        (**self).resolution()
    }

    fn predict_eps(&self, x_t: &[S], t: &[usize], conds: &[Condition<S>]) -> Result<Vec<S>> {
        (**self).predict_eps(x_t, t, conds)
    }
}

/// Guided noise estimate for a batch: conditional and null-class queries are
/// evaluated in one call (two forward evaluations per image), then combined.
/// With `scale == 1` only the conditional branch is evaluated.
pub fn guided_eps<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    model: &P,
    x_t: &[S],
    t: &[usize],
    conds: &[Condition<S>],
    scale: S,
) -> Result<Vec<S>> {
    if scale == S::one() {
        return model.predict_eps(x_t, t, conds);
    }
    let n = conds.len();
    let p = x_t.len() / n.max(1);
    let mut xs = Vec::with_capacity(2 * x_t.len());
    xs.extend_from_slice(x_t);
    xs.extend_from_slice(x_t);
    let ts: Vec<usize> = t.iter().chain(t).copied().collect();
    let cs: Vec<Condition<S>> = conds.iter().copied().chain(conds.iter().map(|c| c.without_class())).collect();
    let both = model.predict_eps(&xs, &ts, &cs)?;
    let (cond, uncond) = both.split_at(n * p);
    Ok(cfg_eps(cond, uncond, scale))
}

/// One image to generate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRequest<S> {
    pub class: Option<usize>,
    pub orientation: Quaternion<S>,
    pub seed: u64,
}

/// Standard normal starting noise, reproducible from `seed`.
pub fn initial_noise<S: Scalar>(len: usize, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| S::from_f64_lossy(StandardNormal.sample(&mut rng))).collect()
}

/// Deterministic guided DDIM sampling of a batch. Returns images in `[0, 1]`.
pub fn sample_batch<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    model: &P,
    requests: &[SampleRequest<S>],
    steps: usize,
    guidance: f64,
) -> Result<Vec<Image>> {
    let raw = sample_signed(model, requests, steps, guidance)?;
    let res = model.resolution();
    let p = model.image_len();
    raw.chunks(p)
        .map(|x| {
            let v: Vec<f64> = x.iter().map(|s| s.to_f64_lossy()).collect();
            Image::from_signed(res, res, &v)
        })
        .collect()
}

/// Like [`sample_batch`] but returns the raw endpoints in `[-1, 1]` units,
/// concatenated, before clamping.
pub fn sample_signed<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    model: &P,
    requests: &[SampleRequest<S>],
    steps: usize,
    guidance: f64,
) -> Result<Vec<S>> {
    let p = model.image_len();
    let schedule = model.schedule();
    let ts = schedule.uniform_subsequence(steps)?;
    let mut x: Vec<S> = requests.iter().flat_map(|r| initial_noise::<S>(p, r.seed)).collect();
    let conds: Vec<Condition<S>> = requests.iter().map(|r| Condition { class: r.class, orientation: r.orientation }).collect();
    let scale = S::from_f64_lossy(guidance);
    for w in ts.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let tv = vec![t; requests.len()];
        let eps = guided_eps(model, &x, &tv, &conds, scale)?;
        let mut next = Vec::with_capacity(x.len());
        for (xi, ei) in x.chunks(p).zip(eps.chunks(p)) {
            next.extend(ddim_step(xi, t, t_next, ei, schedule)?);
        }
        x = next;
    }
    Ok(x)
}

/// Single-image convenience wrapper.
pub fn sample<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    model: &P,
    class: Option<usize>,
    orientation: Quaternion<S>,
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Image> {
    Ok(sample_batch(model, &[SampleRequest { class, orientation, seed }], steps, guidance)?.remove(0))
}
