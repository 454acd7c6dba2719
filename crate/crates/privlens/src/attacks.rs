//! Post-training privacy evaluation: fresh-adversary attribute attacks,
//! Wiener deconvolution reconstruction, and the low-resolution / defocus
//! baseline cameras.

use num_complex::Complex64;

use crate::fft2::{fft2, ifft2};
use crate::metrics;
use crate::optics::{OpticsConfig, PsfStack, CHANNELS};
use crate::par;
use crate::sensor::{
    acquire_video, clamp01, kernel_spectrum, ImageTensor, SensorConfig, VideoTensor,
};
use crate::synthdata::{Dataset, LabeledClip, N_ATTRIBUTES};
use crate::tensor::Tensor;
use crate::trainer::{
    adversary_cmap, mix_seed, train_adversary_sgd, train_classifier_sgd, TrainConfig,
};
use crate::zernike::{build_basis, compose_mask, PupilGrid, ZernikeCoefficients};
use crate::{Error, Result};

/// A camera/post-processing operator attackers see the world through.
pub trait Distortion: Sync {
    fn name(&self) -> String;
    fn distort(&self, clip: &LabeledClip) -> Result<VideoTensor>;
}

/// The learned (or fixed) lens followed by the sensor model; per-clip noise
/// streams derive from the attack seed and the clip id.
pub struct LensDistortion {
    pub psf: PsfStack,
    pub sensor: SensorConfig,
    pub seed: u64,
}

impl Distortion for LensDistortion {
    fn name(&self) -> String {
        "lens".into()
    }

    fn distort(&self, clip: &LabeledClip) -> Result<VideoTensor> {
        let sensor = SensorConfig {
            rng_seed: mix_seed(&[self.seed, clip.id]),
            ..self.sensor.clone()
        };
        acquire_video(&clip.video, &self.psf, &sensor)
    }
}

/// Pass-through camera (the no-privacy row).
pub struct IdentityDistortion;

impl Distortion for IdentityDistortion {
    fn name(&self) -> String {
        "no-privacy".into()
    }

    fn distort(&self, clip: &LabeledClip) -> Result<VideoTensor> {
        Ok(clip.video.clone())
    }
}

/// Box-downsample to `side x side`, then nearest-neighbor upsample back.
pub fn baseline_lowres(video: &VideoTensor, side: usize) -> Result<VideoTensor> {
    let (h, w) = (video.height(), video.width());
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(Error::invalid(format!(
            "lowres side {side} must divide frame dims {h}x{w}"
        )));
    }
    let (bh, bw) = (h / side, w / side);
    let frames = video
        .frames()
        .iter()
        .map(|frame| {
            let mut planes = vec![0.0; CHANNELS * h * w];
            for ch in 0..CHANNELS {
                for br in 0..side {
                    for bc in 0..side {
                        let mut acc = 0.0;
                        for r in 0..bh {
                            for c in 0..bw {
                                acc += frame.at(ch, br * bh + r, bc * bw + c);
                            }
                        }
                        let mean = acc / (bh * bw) as f64;
                        for r in 0..bh {
                            for c in 0..bw {
                                planes[(ch * h + br * bh + r) * w + bc * bw + c] = mean;
                            }
                        }
                    }
                }
            }
            ImageTensor::new(h, w, planes)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoTensor::new(frames, video.frame_rate())
}

/// Low-resolution camera baseline.
pub struct LowresDistortion {
    pub side: usize,
}

impl Distortion for LowresDistortion {
    fn name(&self) -> String {
        format!("lowres-{}", self.side)
    }

    fn distort(&self, clip: &LabeledClip) -> Result<VideoTensor> {
        baseline_lowres(&clip.video, self.side)
    }
}

/// Defocus camera: a pure Z4 mask of the given strength (micrometers OPD)
/// rendered through the same optics pipeline.
pub fn baseline_defocus(
    strength: f64,
    n_samples: usize,
    cfg: &OpticsConfig,
) -> Result<PsfStack> {
    let grid = PupilGrid::new(n_samples, cfg.aperture_diameter)?;
    let basis = build_basis(&grid, 4)?;
    let mut alpha = vec![0.0; 4];
    alpha[3] = strength;
    let mask = compose_mask(&basis, &ZernikeCoefficients::new(alpha)?)?;
    crate::optics::psf_stack(&mask, cfg)
}

/// Outcome of the fresh-adversary protocol.
#[derive(Debug, Clone)]
pub struct AttackReport {
    /// C-MAP per adversary, in seed order.
    pub per_adversary_cmap: Vec<f64>,
    /// Convergence flag per adversary (training loss plateaued or vanished).
    pub converged: Vec<bool>,
    /// The reported A_A: the strongest adversary's C-MAP.
    pub best_cmap: f64,
    /// Per-attribute APs of the strongest adversary.
    pub best_per_attribute: Vec<f64>,
    /// Null-hypothesis APs: attribute prevalences on the test labels.
    pub prevalence_ap: Vec<f64>,
}

impl AttackReport {
    pub fn chance_level(&self) -> f64 {
        self.prevalence_ap.iter().sum::<f64>() / self.prevalence_ap.len() as f64
    }
}

/// Trains `k` fresh adversaries (varying widths and seeds, all from random
/// initialization) on the distorted training clips and reports the best
/// test C-MAP, per the attack protocol.
pub fn fresh_adversary_attack(
    distortion: &dyn Distortion,
    dataset: &Dataset,
    k: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<AttackReport> {
    if k == 0 {
        return Err(Error::invalid("need at least one adversary"));
    }
    let private_train = par::map_slice(&dataset.train, |c| distortion.distort(c));
    let private_train = private_train.into_iter().collect::<Result<Vec<_>>>()?;
    let private_test = par::map_slice(&dataset.test, |c| distortion.distort(c));
    let private_test = private_test.into_iter().collect::<Result<Vec<_>>>()?;

    let base_width = cfg.model_width;
    let widths: Vec<usize> = (0..k)
        .map(|i| match i % 3 {
            0 => base_width,
            1 => base_width + 4,
            _ => base_width.saturating_sub(4).max(4),
        })
        .collect();

    let trained = par::map_range(k, |i| {
        let adv_seed = mix_seed(&[seed, i as u64]);
        let fresh = crate::models::AdversaryA::init(widths[i], N_ATTRIBUTES, adv_seed);
        let (model, history) = train_adversary_sgd(
            fresh,
            &dataset.train,
            &private_train,
            cfg.attack_lr,
            cfg.attack_epochs,
            cfg.batch,
            mix_seed(&[seed, i as u64, 1]),
        );
        (model, history)
    });

    let mut per_adversary_cmap = Vec::with_capacity(k);
    let mut converged = Vec::with_capacity(k);
    let mut best_idx = 0usize;
    let mut per_attribute_all = Vec::with_capacity(k);
    for (i, (model, history)) in trained.iter().enumerate() {
        let (per_attr, cmap) = adversary_cmap(model, &dataset.test, &private_test);
        let cmap = cmap.ok_or_else(|| Error::numerical("attack C-MAP undefined"))?;
        per_adversary_cmap.push(cmap);
        converged.push(adversary_converged(history));
        per_attribute_all.push(per_attr);
        if cmap > per_adversary_cmap[best_idx] {
            best_idx = i;
        }
    }
    let best_per_attribute = per_attribute_all[best_idx]
        .iter()
        .map(|ap| ap.unwrap_or(f64::NAN))
        .collect();

    let n_test = dataset.test.len() as f64;
    let prevalence_ap = (0..N_ATTRIBUTES)
        .map(|m| {
            dataset
                .test
                .iter()
                .filter(|c| c.spec.attributes[m])
                .count() as f64
                / n_test
        })
        .collect();

    Ok(AttackReport {
        best_cmap: per_adversary_cmap[best_idx],
        per_adversary_cmap,
        converged,
        best_per_attribute,
        prevalence_ap,
    })
}

fn adversary_converged(history: &[f64]) -> bool {
    match history.len() {
        0 => false,
        1 => history[0] < 0.02,
        n => {
            let last = history[n - 1];
            let prev = history[n - 2];
            last < 0.02 || (last - prev).abs() / prev.abs().max(1e-9) < 0.05
        }
    }
}

/// Per-channel Wiener deconvolution with the circular-convolution forward
/// model: `X = IDFT(conj(H) Y / (|H|^2 + K))`, clamped to [0,1].
pub fn wiener_deconvolve(y: &ImageTensor, psf: &PsfStack, k_reg: f64) -> Result<ImageTensor> {
    if k_reg < 0.0 || !k_reg.is_finite() {
        return Err(Error::invalid("regularization K must be finite and >= 0"));
    }
    let (h, w) = (y.height(), y.width());
    if psf.size() > h || psf.size() > w {
        return Err(Error::shape("kernel larger than image"));
    }
    let root_n = ((h * w) as f64).sqrt();
    let mut planes = Vec::with_capacity(CHANNELS * h * w);
    for ch in 0..CHANNELS {
        // frequency response of the circular convolution (unitary FFT of the
        // embedded kernel scales by sqrt(N))
        let mut h_hat = kernel_spectrum(psf.kernel(ch), h, w);
        for v in h_hat.data_mut() {
            *v *= root_n;
        }
        if k_reg == 0.0 {
            let min_power = h_hat
                .data()
                .iter()
                .map(|c| c.norm_sqr())
                .fold(f64::INFINITY, f64::min);
            if min_power < 1e-12 {
                return Err(Error::numerical(
                    "K = 0 with vanishing kernel frequencies: deconvolution is ill-posed",
                ));
            }
        }
        let y_plane = Tensor::from_vec(&[h, w], y.channel(ch).to_vec())?;
        let y_hat = fft2(&crate::tensor::CTensor::from_real(&y_plane));
        let data: Vec<Complex64> = y_hat
            .data()
            .iter()
            .zip(h_hat.data())
            .map(|(yv, hv)| hv.conj() * yv / (hv.norm_sqr() + k_reg))
            .collect();
        let x_hat = crate::tensor::CTensor::from_vec(&[h, w], data)?;
        let x = ifft2(&x_hat);
        planes.extend(x.data().iter().map(|c| clamp01(c.re)));
    }
    ImageTensor::new(h, w, planes)
}

/// Frame-wise Wiener deconvolution.
pub fn wiener_deconvolve_video(
    y: &VideoTensor,
    psf: &PsfStack,
    k_reg: f64,
) -> Result<VideoTensor> {
    let frames = par::map_range(y.len(), |t| wiener_deconvolve(y.frame(t), psf, k_reg));
    VideoTensor::new(
        frames.into_iter().collect::<Result<Vec<_>>>()?,
        y.frame_rate(),
    )
}

/// Reconstruction-attack outcome for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub ssim_distorted: f64,
    pub ssim_reconstructed: f64,
    pub k_used: f64,
}

/// Sweeps the regularization constant and reports the attacker-best
/// reconstruction quality next to the distorted baseline.
pub fn reconstruction_attack(
    clean: &VideoTensor,
    private: &VideoTensor,
    psf: &PsfStack,
    k_sweep: &[f64],
) -> Result<ReconstructionReport> {
    if k_sweep.is_empty() {
        return Err(Error::invalid("empty regularization sweep"));
    }
    let ssim_distorted = metrics::video_ssim(clean, private)?;
    let mut best = (f64::NEG_INFINITY, k_sweep[0]);
    for &k in k_sweep {
        let recon = wiener_deconvolve_video(private, psf, k)?;
        let s = metrics::video_ssim(clean, &recon)?;
        if s > best.0 {
            best = (s, k);
        }
    }
    Ok(ReconstructionReport {
        ssim_distorted,
        ssim_reconstructed: best.0,
        k_used: best.1,
    })
}

/// Default sweep used when the attacker tunes K.
pub fn default_k_sweep() -> Vec<f64> {
    vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
}

/// One row of the method-comparison table.
#[derive(Debug, Clone)]
pub struct MethodRow {
    pub name: String,
    pub ssim: f64,
    pub a_c: f64,
    pub a_a: f64,
    pub p: Option<f64>,
}

/// Method comparison mirroring the SSIM / A_C / A_A / P table layout.
#[derive(Debug, Clone)]
pub struct MethodTable {
    pub rows: Vec<MethodRow>,
}

impl MethodTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,ssim,a_c,a_a,p\n");
        for r in &self.rows {
            let p = r.p.map(|v| format!("{v:.4}")).unwrap_or_else(|| "nan".into());
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{}\n",
                r.name, r.ssim, r.a_c, r.a_a, p
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8}\n",
            "method", "SSIM v", "A_C ^", "A_A v", "P ^"
        ));
        for r in &self.rows {
            let p = r.p.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
            out.push_str(&format!(
                "{:<16} {:>8.3} {:>8.3} {:>8.3} {:>8}\n",
                r.name, r.ssim, r.a_c, r.a_a, p
            ));
        }
        out
    }
}

/// Retrains the toy classifier per distortion method, runs the fresh
/// adversary attack per method, and tabulates SSIM / A_C / A_A / P.
pub fn compare_methods(
    dataset: &Dataset,
    methods: &[&dyn Distortion],
    cfg: &TrainConfig,
    k_adversaries: usize,
) -> Result<MethodTable> {
    let mut rows = Vec::with_capacity(methods.len());
    for (mi, method) in methods.iter().enumerate() {
        let private_train = par::map_slice(&dataset.train, |c| method.distort(c));
        let private_train = private_train.into_iter().collect::<Result<Vec<_>>>()?;
        let private_test = par::map_slice(&dataset.test, |c| method.distort(c));
        let private_test = private_test.into_iter().collect::<Result<Vec<_>>>()?;

        let ssim_vals = par::map_range(dataset.test.len(), |i| {
            metrics::video_ssim(&dataset.test[i].video, &private_test[i])
        });
        let ssim_vals = ssim_vals.into_iter().collect::<Result<Vec<_>>>()?;
        let ssim = ssim_vals.iter().sum::<f64>() / ssim_vals.len() as f64;

        let c0 = crate::models::ClassifierC::init(
            cfg.model_width,
            crate::synthdata::N_ACTIONS,
            mix_seed(&[cfg.seed, 100 + mi as u64]),
        );
        let (classifier, _) = train_classifier_sgd(
            c0,
            &dataset.train,
            &private_train,
            cfg.pretrain_lr_model,
            cfg.pretrain_epochs,
            cfg.batch,
            mix_seed(&[cfg.seed, 200 + mi as u64]),
            0.995,
        );
        let a_c = crate::trainer::classifier_accuracy(&classifier, &dataset.test, &private_test);

        let attack = fresh_adversary_attack(
            *method,
            dataset,
            k_adversaries,
            mix_seed(&[cfg.seed, 300 + mi as u64]),
            cfg,
        )?;
        let a_a = attack.best_cmap;
        rows.push(MethodRow {
            name: method.name(),
            ssim,
            a_c,
            a_a,
            p: metrics::harmonic_p(a_c, a_a).ok(),
        });
    }
    Ok(MethodTable { rows })
}
