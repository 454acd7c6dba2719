//! Image formation: PSF convolution, camera response, sensor noise.
//!
//! Convolution is circular and computed in the frequency domain, matching the
//! Wiener attack math exactly. Noise is additive Gaussian drawn from a seeded
//! stream; video frames use independent substreams derived from
//! `(rng_seed, frame index)` so frame-parallel rendering stays deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::fft2::{fft2, ifft2};
use crate::optics::{PsfStack, CHANNELS};
use crate::par;
use crate::tensor::{CTensor, Tensor};
use crate::{Error, Result};

/// H x W x 3 image with channel-major storage, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    planes: Vec<f64>, // 3 * height * width, channel-major
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, planes: Vec<f64>) -> Result<Self> {
        if planes.len() != CHANNELS * height * width {
            return Err(Error::shape("image plane buffer has the wrong length"));
        }
        if !planes.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must be finite and in [0,1]"));
        }
        Ok(ImageTensor {
            height,
            width,
            planes,
        })
    }

    /// Builds an image from arbitrary finite data by clamping into [0, 1].
    pub fn from_raw_clamped(height: usize, width: usize, mut planes: Vec<f64>) -> Result<Self> {
        if planes.len() != CHANNELS * height * width {
            return Err(Error::shape("image plane buffer has the wrong length"));
        }
        for v in &mut planes {
            if !v.is_finite() {
                return Err(Error::numerical("image values must be finite"));
            }
            *v = clamp01(*v);
        }
        Ok(ImageTensor {
            height,
            width,
            planes,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            height,
            width,
            planes: vec![clamp01(value); CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.planes[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.planes[c * n..(c + 1) * n]
    }

    pub fn planes(&self) -> &[f64] {
        &self.planes
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.planes[c * self.height * self.width + r * self.width + col]
    }

    /// Channel-major [3, H, W] tensor view (copies).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[CHANNELS, self.height, self.width], self.planes.clone())
            .expect("consistent size")
    }
}

/// Frame sequence with uniform geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Vec<ImageTensor>,
    frame_rate: f64,
}

impl VideoTensor {
    pub fn new(frames: Vec<ImageTensor>, frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("video needs at least one frame"));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if !frames.iter().all(|f| f.height() == h && f.width() == w) {
            return Err(Error::shape("video frames must share dimensions"));
        }
        Ok(VideoTensor { frames, frame_rate })
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &ImageTensor {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

/// Sensor noise and linear response parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    /// Std-dev of additive Gaussian noise in [0,1] intensity units.
    pub noise_sigma: f64,
    pub response_gain: f64,
    pub response_offset: f64,
    pub rng_seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            noise_sigma: 0.01,
            response_gain: 1.0,
            response_offset: 0.0,
            rng_seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be finite and >= 0"));
        }
        if !self.response_gain.is_finite() || !self.response_offset.is_finite() {
            return Err(Error::invalid("camera response must be finite"));
        }
        Ok(())
    }

    pub fn noiseless(self) -> Self {
        SensorConfig {
            noise_sigma: 0.0,
            ..self
        }
    }
}

#[inline]
pub fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Embeds a small kernel into an H x W field with the kernel center wrapped
/// to index (0,0), ready for circular frequency-domain convolution.
pub fn embed_kernel(kernel: &Tensor, height: usize, width: usize) -> Tensor {
    let s = kernel.dims()[0];
    let half = (s / 2) as isize;
    let mut out = vec![0.0; height * width];
    for r in 0..s {
        for c in 0..s {
            let rr = (r as isize - half).rem_euclid(height as isize) as usize;
            let cc = (c as isize - half).rem_euclid(width as isize) as usize;
            out[rr * width + cc] += kernel.at2(r, c);
        }
    }
    Tensor::from_vec(&[height, width], out).expect("sized above")
}

/// Unitary FFT of an embedded kernel.
pub fn kernel_spectrum(kernel: &Tensor, height: usize, width: usize) -> CTensor {
    fft2(&CTensor::from_real(&embed_kernel(kernel, height, width)))
}

/// Circular convolution of a real plane with a precomputed kernel spectrum.
/// With unitary transforms the product picks up a sqrt(H*W) factor.
pub fn convolve_plane_spectrum(plane: &Tensor, khat: &CTensor) -> Tensor {
    let dims = plane.dims();
    let xhat = fft2(&CTensor::from_real(plane));
    let mut prod = Vec::with_capacity(xhat.len());
    for (x, k) in xhat.data().iter().zip(khat.data()) {
        prod.push(x * k);
    }
    let back = ifft2(&CTensor::from_vec(dims, prod).expect("same dims"));
    let scale = ((dims[0] * dims[1]) as f64).sqrt();
    let mut out = back.real_part();
    out.scale_in_place(scale);
    out
}

/// Per-channel circular convolution with the PSF stack (pre-clamp output).
pub fn convolve(image: &ImageTensor, psf: &PsfStack) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if psf.size() > h || psf.size() > w {
        return Err(Error::shape(format!(
            "kernel {} exceeds image {}x{}",
            psf.size(),
            h,
            w
        )));
    }
    let mut planes = Vec::with_capacity(CHANNELS * h * w);
    for ch in 0..CHANNELS {
        let khat = kernel_spectrum(psf.kernel(ch), h, w);
        let plane = Tensor::from_vec(&[h, w], image.channel(ch).to_vec())?;
        planes.extend_from_slice(convolve_plane_spectrum(&plane, &khat).data());
    }
    // pre-clamp by contract, but convolution of in-range data with a unit-sum
    // nonnegative kernel only leaves [0,1] by roundoff
    ImageTensor::from_raw_clamped(h, w, planes)
}

/// Gaussian noise plane for one frame substream; channel-major sample order.
pub fn noise_planes(
    height: usize,
    width: usize,
    sigma: f64,
    seed: u64,
    stream: u64,
) -> Vec<f64> {
    let n = CHANNELS * height * width;
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

fn acquire_with_stream(
    image: &ImageTensor,
    psf: &PsfStack,
    cfg: &SensorConfig,
    stream: u64,
) -> Result<ImageTensor> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    if psf.size() > h || psf.size() > w {
        return Err(Error::shape(format!(
            "kernel {} exceeds image {}x{}",
            psf.size(),
            h,
            w
        )));
    }
    let noise = noise_planes(h, w, cfg.noise_sigma, cfg.rng_seed, stream);
    let mut planes = Vec::with_capacity(CHANNELS * h * w);
    for ch in 0..CHANNELS {
        let khat = kernel_spectrum(psf.kernel(ch), h, w);
        let plane = Tensor::from_vec(&[h, w], image.channel(ch).to_vec())?;
        let blurred = convolve_plane_spectrum(&plane, &khat);
        let base = ch * h * w;
        for (i, &v) in blurred.data().iter().enumerate() {
            let with_response = cfg.response_gain * v + cfg.response_offset;
            planes.push(clamp01(with_response + noise[base + i]));
        }
    }
    ImageTensor::new(h, w, planes)
}

/// `Y = clamp(gain * (H conv X) + offset + eta, 0, 1)`.
pub fn acquire(image: &ImageTensor, psf: &PsfStack, cfg: &SensorConfig) -> Result<ImageTensor> {
    acquire_with_stream(image, psf, cfg, 0)
}

/// Framewise acquisition with per-frame noise substream `t`.
pub fn acquire_video(video: &VideoTensor, psf: &PsfStack, cfg: &SensorConfig) -> Result<VideoTensor> {
    cfg.validate()?;
    let frames = par::map_range(video.len(), |t| {
        acquire_with_stream(video.frame(t), psf, cfg, t as u64)
    });
    let frames = frames.into_iter().collect::<Result<Vec<_>>>()?;
    VideoTensor::new(frames, video.frame_rate())
}
