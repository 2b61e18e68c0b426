//! Convolutional image encoder producing pixel-aligned features.
//!
//! Four 3x3 ReLU conv blocks with strides 2, 2, 1, 1 (channels 16, 32, 32, 32
//! by default). The last two blocks run at stride 4 and are concatenated and
//! mixed by a 1x1 conv into `feature_dim` channels. Inputs are normalized with
//! per-channel statistics stored alongside the weights.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::imagebuf::Image;

pub const STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub feature_dim: usize,
    /// Start the 1x1 output conv at zero.
    pub zero_head: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 32, 32],
            feature_dim: 32,
            zero_head: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<(ParamId, ParamId, usize)>,
    head: (ParamId, ParamId),
    mean: ParamId,
    std: ParamId,
    pub feature_dim: usize,
}

/// Encoder output for a batch of images: `map [n, h_f, w_f, C_f]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub map: Var,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Input size the map was computed from.
    pub image_height: usize,
    pub image_width: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let strides = [2, 2, 1, 1];
        let mut cin = 3;
        let mut blocks = Vec::new();
        for (i, (&c, &s)) in cfg.channels.iter().zip(&strides).enumerate() {
            let w = store.add_he(
                &format!("{name}.block{i}.weight"),
                &[3, 3, cin, c],
                9 * cin,
                rng,
            );
            let b = store.add_zeros(&format!("{name}.block{i}.bias"), &[c]);
            blocks.push((w, b, s));
            cin = c;
        }
        let cat = cfg.channels[2] + cfg.channels[3];
        let hw = if cfg.zero_head {
            store.add_zeros(
                &format!("{name}.head.weight"),
                &[1, 1, cat, cfg.feature_dim],
            )
        } else {
            store.add_he(
                &format!("{name}.head.weight"),
                &[1, 1, cat, cfg.feature_dim],
                cat,
                rng,
            )
        };
        let hb = store.add_zeros(&format!("{name}.head.bias"), &[cfg.feature_dim]);
        let mean = store.add_zeros(&format!("{name}.input_mean"), &[3]);
        let std = store.add(format!("{name}.input_std"), Tensor::full(&[3], 1.0));
        Encoder {
            blocks,
            head: (hw, hb),
            mean,
            std,
            feature_dim: cfg.feature_dim,
        }
    }

    /// Stores per-channel mean and standard deviation over `images`.
    pub fn set_normalization(&self, store: &mut ParamStore, images: &[&Image]) {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0.0;
        for img in images {
            for px in img.data.chunks(3) {
                for c in 0..3 {
                    sum[c] += px[c];
                    sq[c] += px[c] * px[c];
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = (0..3)
            .map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3))
            .collect();
        store.get_mut(self.mean).value = Tensor::from_vec(mean);
        store.get_mut(self.std).value = Tensor::from_vec(std);
    }

    /// Normalized NHWC input, zero-padded so each side is a multiple of the stride.
    pub fn input_tensor(&self, store: &ParamStore, images: &[&Image]) -> Tensor {
        let (w, h) = (images[0].width, images[0].height);
        let (pw, ph) = (w.div_ceil(STRIDE) * STRIDE, h.div_ceil(STRIDE) * STRIDE);
        let mean = store.value(self.mean).data().to_vec();
        let std = store.value(self.std).data().to_vec();
        let mut data = vec![0.0; images.len() * ph * pw * 3];
        for (n, img) in images.iter().enumerate() {
            assert!(
                img.width == w && img.height == h,
                "encoder: images in a batch must share a size"
            );
            for y in 0..h {
                for x in 0..w {
                    let px = img.get(x, y);
                    let o = ((n * ph + y) * pw + x) * 3;
                    for c in 0..3 {
                        data[o + c] = (px[c] - mean[c]) / std[c];
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), ph, pw, 3], data)
    }

    pub fn encode(&self, tape: &Tape, store: &ParamStore, images: &[&Image]) -> FeatureMap {
        let x = tape.constant(self.input_tensor(store, images));
        let mut h = x;
        let mut taps = Vec::new();
        for &(w, b, s) in &self.blocks {
            h = tape.relu(tape.conv2d(h, tape.param(store, w), tape.param(store, b), s, 1));
            taps.push(h);
        }
        let cat = tape.concat(&[taps[2], taps[3]]);
        let map = tape.conv2d(
            cat,
            tape.param(store, self.head.0),
            tape.param(store, self.head.1),
            1,
            0,
        );
        let s = tape.shape(map);
        FeatureMap {
            map,
            images: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
            image_height: images[0].height,
            image_width: images[0].width,
        }
    }
}

impl FeatureMap {
    /// Bilinear feature lookup at pixel coordinates `uv [m, 2]` in image
    /// `batch[i]`. Feature node `(i, j)` sits at pixel `((i + 0.5) s, (j + 0.5) s)`.
    /// Points outside the image (or flagged unprojectable in `valid`) get zero
    /// features; the returned flags mark them.
    pub fn sample(
        &self,
        tape: &Tape,
        uv: Var,
        batch: &[usize],
        valid: &[bool],
    ) -> (Var, Vec<bool>) {
        let uvv = tape.value(uv);
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        let inside: Vec<bool> = (0..batch.len())
            .map(|i| {
                let (u, v) = (uvv.data()[2 * i], uvv.data()[2 * i + 1]);
                valid[i] && u >= 0.0 && v >= 0.0 && u < w && v < h
            })
            .collect();
        let grid = tape.affine(uv, 1.0 / STRIDE as f64, -0.5);
        let out = tape.sample2d(self.map, grid, batch, &inside);
        (out, inside.iter().map(|&b| !b).collect())
    }
}

/// [`FeatureMap::sample`] for a single pixel of image 0; returns the feature
/// vector and the out-of-image flag.
pub fn sample_pixel_feature(tape: &Tape, fmap: &FeatureMap, u: f64, v: f64) -> (Vec<f64>, bool) {
    let uv = tape.constant(Tensor::matrix(1, 2, vec![u, v]));
    let (f, out) = fmap.sample(tape, uv, &[0], &[true]);
    (tape.value(f).data().to_vec(), out[0])
}
