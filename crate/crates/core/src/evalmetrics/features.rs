use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// Channel widths of the three convolution layers.
pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const FEATURE_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
struct Conv3 {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`
    w: Vec<f64>,
}

impl Conv3 {
    /// Same-padded 3x3 convolution, ReLU, then 2x2 average pooling.
    fn apply(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let mut y = vec![0.0; self.cout * h * w];
        for o in 0..self.cout {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for i in 0..self.cin {
                        for dr in 0..3 {
                            let rr = r as isize + dr as isize - 1;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for dc in 0..3 {
                                let cc = c as isize + dc as isize - 1;
                                if cc < 0 || cc >= w as isize {
                                    continue;
                                }
                                acc += self.w[((o * self.cin + i) * 3 + dr) * 3 + dc] * x[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                    y[(o * h + r) * w + c] = acc.max(0.0);
                }
            }
        }
        let (ph, pw) = ((h / 2).max(1), (w / 2).max(1));
        let mut pooled = vec![0.0; self.cout * ph * pw];
        for o in 0..self.cout {
            for r in 0..ph {
                for c in 0..pw {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for rr in 2 * r..(2 * r + 2).min(h) {
                        for cc in 2 * c..(2 * c + 2).min(w) {
                            acc += y[(o * h + rr) * w + cc];
                            cnt += 1.0;
                        }
                    }
                    pooled[(o * ph + r) * pw + c] = acc / cnt;
                }
            }
        }
        (pooled, ph, pw)
    }
}

/// Frozen random convolutional feature stack standing in for a pretrained
/// perceptual network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Conv3>,
}

impl FeatureExtractor {
    /// Weights uniform in `±sqrt(3 / fan_in)` from a ChaCha8 stream, so the
    /// draw uses no transcendental functions and is identical everywhere.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut layers = Vec::new();
        for &cout in &FEATURE_CHANNELS {
            let bound = (3.0 / (9 * cin) as f64).sqrt();
            let w = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(Conv3 { cin, cout, w });
            cin = cout;
        }
        Self { layers }
    }

    /// The shared seed-0 extractor.
    pub fn standard() -> &'static Self {
        static STD: OnceLock<FeatureExtractor> = OnceLock::new();
        STD.get_or_init(|| Self::seeded(FEATURE_SEED))
    }

    /// Per-layer feature maps `[channels][h][w]` with every spatial feature
    /// vector scaled to unit length (zero vectors stay zero).
    pub fn features(&self, image: &Image) -> Vec<Vec<f64>> {
        let (mut h, mut w) = (image.height, image.width);
        let mut x = vec![0.0; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                let px = image.pixel(r, c);
                for ch in 0..3 {
                    x[(ch * h + r) * w + c] = 2.0 * px[ch] - 1.0;
                }
            }
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, nh, nw) = layer.apply(&x, h, w);
            let mut normed = y.clone();
            for s in 0..nh * nw {
                let norm = (0..layer.cout).map(|o| y[o * nh * nw + s].powi(2)).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for o in 0..layer.cout {
                        normed[o * nh * nw + s] /= norm;
                    }
                }
            }
            out.push(normed);
            x = y;
            h = nh;
            w = nw;
        }
        out
    }

    /// Sum over layers of the spatially averaged squared distance between
    /// normalized feature vectors.
    pub fn distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.layers)
            .map(|((fa, fb), layer)| {
                let spatial = fa.len() / layer.cout;
                fa.iter().zip(fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / spatial as f64
            })
            .sum()
    }
}
