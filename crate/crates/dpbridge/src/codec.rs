//! Fixed linear image codec: block-average encode, nearest-upsample decode.
//!
//! Stands in for a learned autoencoder. The pair loses high-frequency detail
//! (decode∘encode is the block-constant projection), which gives the
//! image-consistency loss something real to recover, and the encoder is
//! RMS-calibrated so white-noise images map to unit-variance latents —
//! the marginal the normalization step assumes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Seed of the calibration stream. Fixed so every run (and every checkpoint
/// produced at the same geometry) shares one scale.
pub const CALIBRATION_SEED: u64 = 0xC0DEC;
/// White-noise images drawn during calibration.
pub const CALIBRATION_IMAGES: usize = 10_000;

/// Linear encoder/decoder between `H x W x C` images and
/// `H/f x W/f x C` latents.
#[derive(Debug, Clone)]
pub struct LinearCodec {
    height: usize,
    width: usize,
    channels: usize,
    factor: usize,
    scale: f64,
}

impl LinearCodec {
    /// Calibrated codec on the fixed calibration stream.
    pub fn calibrated_default(
        height: usize,
        width: usize,
        channels: usize,
        factor: usize,
    ) -> Result<Self> {
        let mut rng = Rng::with_stream(CALIBRATION_SEED, crate::rng::streams::CODEC_CALIBRATION);
        Self::calibrated(height, width, channels, factor, &mut rng, CALIBRATION_IMAGES)
    }
    /// Build a codec and calibrate the RMS scale from `n_cal` seeded
    /// white-noise images so that `encode` preserves unit variance.
    pub fn calibrated(
        height: usize,
        width: usize,
        channels: usize,
        factor: usize,
        rng: &mut Rng,
        n_cal: usize,
    ) -> Result<Self> {
        let mut codec = Self::with_scale(height, width, channels, factor, 1.0)?;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..n_cal {
            let img = Tensor::randn(rng, &[height, width, channels])?;
            let lat = codec.encode(&img)?;
            sum_sq += lat.data().iter().map(|v| v * v).sum::<f64>();
            count += lat.len();
        }
        let rms = (sum_sq / count as f64).sqrt();
        if rms <= 0.0 {
            return Err(Error::InvalidArgument("codec calibration collapsed".into()));
        }
        codec.scale = 1.0 / rms;
        Ok(codec)
    }

    /// Build a codec with a known scale (e.g. loaded from a checkpoint).
    pub fn with_scale(
        height: usize,
        width: usize,
        channels: usize,
        factor: usize,
        scale: f64,
    ) -> Result<Self> {
        if factor == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("zero codec dimension".into()));
        }
        if height % factor != 0 || width % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} not divisible by factor {factor}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!("bad codec scale {scale}")));
        }
        Ok(LinearCodec {
            height,
            width,
            channels,
            factor,
            scale,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.height / self.factor,
            self.width / self.factor,
            self.channels,
        ]
    }

    pub fn latent_len(&self) -> usize {
        let [h, w, c] = self.latent_shape();
        h * w * c
    }

    fn check_shape(&self, t: &Tensor, want: [usize; 3], what: &str) -> Result<()> {
        if t.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "{what}: got {:?}, want {:?}",
                t.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Block-average downsample, scaled to unit RMS on white noise.
    pub fn encode(&self, img: &Tensor) -> Result<Tensor> {
        self.check_shape(img, self.image_shape(), "encode")?;
        let [lh, lw, c] = self.latent_shape();
        let f = self.factor;
        let inv_area = 1.0 / (f * f) as f64;
        let mut out = Tensor::zeros(&[lh, lw, c])?;
        for i in 0..lh {
            for j in 0..lw {
                for k in 0..c {
                    let mut acc = 0.0;
                    for di in 0..f {
                        for dj in 0..f {
                            acc += img.at3(i * f + di, j * f + dj, k);
                        }
                    }
                    let idx = out.idx3(i, j, k);
                    out.data_mut()[idx] = acc * inv_area * self.scale;
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbor upsample, undoing the encode scale.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.check_shape(latent, self.latent_shape(), "decode")?;
        let [h, w, c] = self.image_shape();
        let f = self.factor;
        let inv_scale = 1.0 / self.scale;
        let mut out = Tensor::zeros(&[h, w, c])?;
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let idx = out.idx3(i, j, k);
                    out.data_mut()[idx] = latent.at3(i / f, j / f, k) * inv_scale;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of `decode` applied to an image-shaped cotangent: block sum
    /// scaled by `1/scale`. This is the exact vector-Jacobian product the
    /// image-consistency gradient needs.
    pub fn decode_vjp(&self, upstream: &Tensor) -> Result<Tensor> {
        self.check_shape(upstream, self.image_shape(), "decode_vjp")?;
        let [lh, lw, c] = self.latent_shape();
        let f = self.factor;
        let inv_scale = 1.0 / self.scale;
        let mut out = Tensor::zeros(&[lh, lw, c])?;
        for i in 0..lh {
            for j in 0..lw {
                for k in 0..c {
                    let mut acc = 0.0;
                    for di in 0..f {
                        for dj in 0..f {
                            acc += upstream.at3(i * f + di, j * f + dj, k);
                        }
                    }
                    let idx = out.idx3(i, j, k);
                    out.data_mut()[idx] = acc * inv_scale;
                }
            }
        }
        Ok(out)
    }
}
