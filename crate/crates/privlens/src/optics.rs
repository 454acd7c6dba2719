//! Per-channel point spread functions from a phase mask.
//!
//! The pupil field is `W * t_L * t_phi` with a unit plane wave `W` inside the
//! aperture, `t_L = exp(-i k (u^2+v^2) / (2 z))` carrying the wavefront
//! curvature and `t_phi = exp(-i k phi)` the mask delay. Propagation to the
//! sensor multiplies the spectrum by the angular-spectrum transfer function
//! over `propagation_distance` (evanescent frequencies zeroed); the intensity
//! is center-cropped to the kernel size and normalized to unit sum.

use num_complex::Complex64;

use crate::fft2::{fft2, fft_freq, ifft2};
use crate::par;
use crate::tensor::{CTensor, Tensor};
use crate::zernike::{PhaseMask, PupilGrid};
use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// Imaging geometry and sampling for PSF synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticsConfig {
    /// Per-channel wavelengths in meters (R, G, B).
    pub wavelengths: [f64; CHANNELS],
    /// Object distance z in meters (may be infinite for collimated input).
    pub object_distance: f64,
    /// Pupil-to-sensor propagation distance in meters.
    pub propagation_distance: f64,
    /// Aperture diameter in meters.
    pub aperture_diameter: f64,
    /// Output kernel side length, odd.
    pub psf_size: usize,
    /// Sensor pixel pitch in meters (recorded in provenance; the kernel is
    /// sampled at the pupil-grid pitch).
    pub sensor_pitch: f64,
}

impl Default for OpticsConfig {
    /// Tabletop defaults with the system in focus at zero aberration: the
    /// `t_L` curvature matches the propagation distance, so an all-zero mask
    /// renders a near-delta kernel. The throw is chosen so the pupil chirp
    /// stays sampled on a 512-point grid (see [`OpticsConfig::validate_sampling`]).
    fn default() -> Self {
        OpticsConfig {
            wavelengths: [640e-9, 550e-9, 460e-9],
            object_distance: 0.1,
            propagation_distance: 0.1,
            aperture_diameter: 5e-3,
            psf_size: 65,
            sensor_pitch: 5e-6,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self, grid: &PupilGrid) -> Result<()> {
        if !(self.object_distance > 0.0) {
            return Err(Error::invalid("object distance must be positive"));
        }
        if !(self.propagation_distance > 0.0) || !self.propagation_distance.is_finite() {
            return Err(Error::invalid("propagation distance must be positive and finite"));
        }
        for &w in &self.wavelengths {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::invalid("wavelengths must be positive"));
            }
        }
        if self.psf_size % 2 == 0 || self.psf_size == 0 {
            return Err(Error::invalid("psf_size must be odd"));
        }
        if self.psf_size > grid.n_samples() {
            return Err(Error::invalid(format!(
                "psf_size {} exceeds grid samples {}",
                self.psf_size,
                grid.n_samples()
            )));
        }
        if (self.aperture_diameter - grid.aperture_diameter()).abs()
            > 1e-12 * self.aperture_diameter
        {
            return Err(Error::invalid("config aperture does not match grid aperture"));
        }
        Ok(())
    }

    /// Guards the propagation path against gross aliasing of the pupil
    /// curvature: the per-sample phase step of `t_L` at the aperture edge,
    /// `k R pitch / z`, must stay near the Nyquist limit for every channel.
    pub fn validate_sampling(&self, grid: &PupilGrid) -> Result<()> {
        if !self.object_distance.is_finite() {
            return Ok(());
        }
        let radius = self.aperture_diameter / 2.0;
        for (ch, _) in self.wavelengths.iter().enumerate() {
            let step = self.wavenumber(ch) * radius * grid.pitch() / self.object_distance;
            if step > 1.3 * std::f64::consts::PI {
                return Err(Error::invalid(format!(
                    "pupil curvature undersampled (edge phase step {:.2} rad/sample on                      channel {ch}); increase n_samples or the object distance",
                    step
                )));
            }
        }
        Ok(())
    }

    pub fn wavenumber(&self, channel: usize) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelengths[channel]
    }
}

/// Complex amplitudes on the pupil grid.
#[derive(Debug, Clone)]
pub struct ComplexField {
    grid: PupilGrid,
    field: CTensor,
}

impl ComplexField {
    pub fn grid(&self) -> &PupilGrid {
        &self.grid
    }

    pub fn field(&self) -> &CTensor {
        &self.field
    }
}

/// Constant pupil factor `W * t_L` for a channel (no mask contribution).
pub fn pupil_constant(grid: &PupilGrid, cfg: &OpticsConfig, channel: usize) -> CTensor {
    let n = grid.n_samples();
    let k = cfg.wavenumber(channel);
    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            if grid.in_disk(r, c) {
                let u = grid.coord(c);
                let v = grid.coord(r);
                let phase = if cfg.object_distance.is_finite() {
                    -k * (u * u + v * v) / (2.0 * cfg.object_distance)
                } else {
                    0.0
                };
                data[r * n + c] = Complex64::from_polar(1.0, phase);
            }
        }
    }
    CTensor::from_vec(&[n, n], data).expect("sized above")
}

/// Angular-spectrum transfer function over the propagation distance, laid out
/// on the standard DFT frequency grid with evanescent components zeroed.
pub fn transfer_function(grid: &PupilGrid, cfg: &OpticsConfig, channel: usize) -> CTensor {
    let n = grid.n_samples();
    let lambda = cfg.wavelengths[channel];
    let k = cfg.wavenumber(channel);
    let d = cfg.propagation_distance;
    let pitch = grid.pitch();
    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for r in 0..n {
        let fv = fft_freq(r, n, pitch);
        for c in 0..n {
            let fu = fft_freq(c, n, pitch);
            let arg = 1.0 - (lambda * fu).powi(2) - (lambda * fv).powi(2);
            if arg > 0.0 {
                data[r * n + c] = Complex64::from_polar(1.0, k * d * arg.sqrt());
            }
        }
    }
    CTensor::from_vec(&[n, n], data).expect("sized above")
}

/// Converts a phase mask (micrometers of OPD) to `t_phi = exp(-i k phi)` and
/// applies the constant pupil factor.
pub fn pupil_field(mask: &PhaseMask, cfg: &OpticsConfig, channel: usize) -> Result<ComplexField> {
    cfg.validate(mask.grid())?;
    let constant = pupil_constant(mask.grid(), cfg, channel);
    // phase scale per micrometer of OPD; shared verbatim with the autodiff
    // graph so both paths produce bit-identical fields
    let s = -cfg.wavenumber(channel) * 1e-6;
    let n = mask.grid().n_samples();
    let mut data = constant.data().to_vec();
    for (value, &phi_um) in data.iter_mut().zip(mask.phi().data()) {
        if value.re != 0.0 || value.im != 0.0 {
            *value *= Complex64::from_polar(1.0, s * phi_um);
        }
    }
    Ok(ComplexField {
        grid: mask.grid().clone(),
        field: CTensor::from_vec(&[n, n], data).expect("sized above"),
    })
}

/// Sensor-plane intensity before cropping and normalization.
pub fn psf_full_intensity(mask: &PhaseMask, cfg: &OpticsConfig, channel: usize) -> Result<Tensor> {
    cfg.validate_sampling(mask.grid())?;
    let field = pupil_field(mask, cfg, channel)?;
    let spectrum = fft2(field.field());
    let transfer = transfer_function(mask.grid(), cfg, channel);
    let mut prop = spectrum.data().to_vec();
    for (s, t) in prop.iter_mut().zip(transfer.data()) {
        *s *= t;
    }
    let n = mask.grid().n_samples();
    let sensor = ifft2(&CTensor::from_vec(&[n, n], prop).expect("sized above"));
    let inten: Vec<f64> = sensor.data().iter().map(|c| c.norm_sqr()).collect();
    Tensor::from_vec(&[n, n], inten)
}

/// Center crop of a square tensor to `size` x `size` (both odd-centered:
/// the crop is anchored on the sample at index n/2).
pub fn crop_center(full: &Tensor, size: usize) -> Tensor {
    let n = full.dims()[0];
    let half = (size - 1) / 2;
    let start = n / 2 - half;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = full.at2(start + r, start + c);
        }
    }
    Tensor::from_vec(&[size, size], out).expect("sized above")
}

/// Warning emitted when the kernel crop captures almost no energy.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfDiagnostic {
    pub channel: usize,
    pub in_crop_fraction: f64,
}

const CROP_UNDERFLOW_FRACTION: f64 = 1e-3;

/// Discretized PSF for one channel: unit-sum kernel plus an optional
/// crop-underflow diagnostic.
pub fn psf(
    mask: &PhaseMask,
    cfg: &OpticsConfig,
    channel: usize,
) -> Result<(Tensor, Option<PsfDiagnostic>)> {
    let full = psf_full_intensity(mask, cfg, channel)?;
    let total = full.sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::numerical("psf has no energy on the grid"));
    }
    let mut kernel = crop_center(&full, cfg.psf_size);
    let in_crop = kernel.sum();
    let diagnostic = if in_crop < CROP_UNDERFLOW_FRACTION * total {
        Some(PsfDiagnostic {
            channel,
            in_crop_fraction: in_crop / total,
        })
    } else {
        None
    };
    if !(in_crop > 0.0) {
        return Err(Error::numerical("psf crop has zero energy"));
    }
    kernel.scale_in_place(1.0 / in_crop);
    Ok((kernel, diagnostic))
}

/// Per-channel PSF kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfStack {
    kernels: Vec<Tensor>,
    diagnostics: Vec<PsfDiagnostic>,
}

impl PsfStack {
    pub fn new(kernels: Vec<Tensor>) -> Result<Self> {
        if kernels.len() != CHANNELS {
            return Err(Error::shape("psf stack needs exactly 3 kernels"));
        }
        for k in &kernels {
            if k.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::numerical("psf kernel entries must be finite and >= 0"));
            }
            if (k.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::numerical("psf kernel must sum to 1 within 1e-6"));
            }
        }
        Ok(PsfStack {
            kernels,
            diagnostics: Vec::new(),
        })
    }

    pub fn kernel(&self, channel: usize) -> &Tensor {
        &self.kernels[channel]
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn size(&self) -> usize {
        self.kernels[0].dims()[0]
    }

    pub fn diagnostics(&self) -> &[PsfDiagnostic] {
        &self.diagnostics
    }

    /// A single-pixel identity kernel, handy for tests and baselines.
    pub fn delta(size: usize) -> Self {
        let mut kernels = Vec::with_capacity(CHANNELS);
        for _ in 0..CHANNELS {
            let mut data = vec![0.0; size * size];
            data[(size / 2) * size + size / 2] = 1.0;
            kernels.push(Tensor::from_vec(&[size, size], data).expect("sized above"));
        }
        PsfStack {
            kernels,
            diagnostics: Vec::new(),
        }
    }
}

/// Renders the PSF for every channel at its own wavelength.
pub fn psf_stack(mask: &PhaseMask, cfg: &OpticsConfig) -> Result<PsfStack> {
    cfg.validate(mask.grid())?;
    let rendered = par::map_range(CHANNELS, |ch| psf(mask, cfg, ch));
    let mut kernels = Vec::with_capacity(CHANNELS);
    let mut diagnostics = Vec::new();
    for item in rendered {
        let (kernel, diag) = item?;
        kernels.push(kernel);
        if let Some(d) = diag {
            diagnostics.push(d);
        }
    }
    Ok(PsfStack {
        kernels,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zernike::{
        build_basis, compose_mask, hardware_lens_q15, ZernikeCoefficients,
    };
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn zero_mask(n: usize) -> PhaseMask {
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        PhaseMask::new(grid.clone(), Tensor::zeros(&[n, n])).unwrap()
    }

    fn small_cfg(psf_size: usize) -> OpticsConfig {
        OpticsConfig {
            psf_size,
            ..OpticsConfig::default()
        }
    }

    /// In-focus config with the throw scaled to the grid so the pupil chirp
    /// stays sampled.
    fn focused_cfg(n_samples: usize, psf_size: usize) -> OpticsConfig {
        let z = match n_samples {
            n if n >= 512 => 0.1,
            n if n >= 256 => 0.2,
            n if n >= 128 => 0.4,
            n if n >= 64 => 0.75,
            _ => 1.6,
        };
        OpticsConfig {
            object_distance: z,
            propagation_distance: z,
            psf_size,
            ..OpticsConfig::default()
        }
    }

    #[test]
    fn flat_mask_infinite_z_gives_binary_aperture() {
        let mask = zero_mask(32);
        let cfg = OpticsConfig {
            object_distance: f64::INFINITY,
            ..small_cfg(9)
        };
        let field = pupil_field(&mask, &cfg, 1).unwrap();
        let n = 32;
        for r in 0..n {
            for c in 0..n {
                let v = field.field().data()[r * n + c];
                if mask.grid().in_disk(r, c) {
                    assert!((v.re - 1.0).abs() < 1e-15 && v.im.abs() < 1e-15);
                } else {
                    assert_eq!(v, num_complex::Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn flat_mask_finite_z_carries_quadratic_phase() {
        let mask = zero_mask(32);
        let cfg = small_cfg(9);
        let ch = 0;
        let field = pupil_field(&mask, &cfg, ch).unwrap();
        let k = cfg.wavenumber(ch);
        let grid = mask.grid();
        let n = 32;
        for r in 0..n {
            for c in 0..n {
                if grid.in_disk(r, c) {
                    let u = grid.coord(c);
                    let v = grid.coord(r);
                    let expect = -k * (u * u + v * v) / (2.0 * cfg.object_distance);
                    let got = field.field().data()[r * n + c];
                    assert!((got.norm() - 1.0).abs() < 1e-12);
                    let diff = (got.arg() - expect).rem_euclid(2.0 * std::f64::consts::PI);
                    let diff = diff.min(2.0 * std::f64::consts::PI - diff);
                    assert!(diff < 1e-9, "phase mismatch {diff} at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn constant_phase_offset_multiplies_field_by_global_phase() {
        let n = 32;
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        let cfg = small_cfg(9);
        let c_um = 0.37;
        let base = PhaseMask::new(grid.clone(), Tensor::zeros(&[n, n])).unwrap();
        // constant inside the disk only; off-disk samples carry no field
        let mut shifted_phi = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                if grid.in_disk(r, c) {
                    shifted_phi[r * n + c] = c_um;
                }
            }
        }
        let shifted =
            PhaseMask::new(grid.clone(), Tensor::from_vec(&[n, n], shifted_phi).unwrap()).unwrap();
        let ch = 2;
        let f0 = pupil_field(&base, &cfg, ch).unwrap();
        let f1 = pupil_field(&shifted, &cfg, ch).unwrap();
        let k = cfg.wavenumber(ch);
        let rot = num_complex::Complex64::from_polar(1.0, -k * c_um * 1e-6);
        for (a, b) in f0.field().data().iter().zip(f1.field().data()) {
            assert!((a * rot - b).norm() < 1e-12);
        }
    }

    #[test]
    fn kernels_sum_to_one() {
        let n = 64;
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        let basis = build_basis(&grid, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alpha = ZernikeCoefficients::new(
            (0..15).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let mask = compose_mask(&basis, &alpha).unwrap();
        let stack = psf_stack(&mask, &focused_cfg(n, 33)).unwrap();
        for ch in 0..CHANNELS {
            assert!((stack.kernel(ch).sum() - 1.0).abs() < 1e-6);
            assert!(stack.kernel(ch).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_aberration_kernel_is_centrosymmetric() {
        let mask = zero_mask(64);
        let cfg = focused_cfg(64, 21);
        let (kernel, _) = psf(&mask, &cfg, 1).unwrap();
        let s = cfg.psf_size;
        let peak = kernel.max_abs();
        for r in 0..s {
            for c in 0..s {
                let sym = kernel.at2(s - 1 - r, s - 1 - c);
                assert!(
                    (kernel.at2(r, c) - sym).abs() <= 1e-10 * peak,
                    "asymmetry at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn global_phase_invariance() {
        let n = 64;
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        let basis = build_basis(&grid, 6).unwrap();
        let alpha = ZernikeCoefficients::new(vec![0.0, 0.1, -0.2, 0.3, 0.05, -0.12]).unwrap();
        let mask = compose_mask(&basis, &alpha).unwrap();
        let cfg = focused_cfg(n, 21);

        let mut shifted_phi = mask.phi().clone();
        for v in shifted_phi.data_mut() {
            *v += 1.234;
        }
        let shifted = PhaseMask::new(grid.clone(), shifted_phi).unwrap();

        let (k0, _) = psf(&mask, &cfg, 0).unwrap();
        let (k1, _) = psf(&shifted, &cfg, 0).unwrap();
        let peak = k0.max_abs();
        for (a, b) in k0.data().iter().zip(k1.data()) {
            assert!((a - b).abs() <= 1e-10 * peak);
        }
    }

    #[test]
    fn parseval_energy_bookkeeping() {
        let n = 64;
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        let basis = build_basis(&grid, 8).unwrap();
        let alpha =
            ZernikeCoefficients::new(vec![0.0, 0.2, -0.1, 0.4, -0.3, 0.15, 0.07, -0.22]).unwrap();
        let mask = compose_mask(&basis, &alpha).unwrap();
        let cfg = focused_cfg(n, 21);
        let field = pupil_field(&mask, &cfg, 1).unwrap();
        let pupil_energy = field.field().norm_sqr_sum();
        let full = psf_full_intensity(&mask, &cfg, 1).unwrap();
        assert!((full.sum() - pupil_energy).abs() / pupil_energy < 1e-6);
    }

    #[test]
    fn zero_aberration_maximizes_center_pixel() {
        let n = 128;
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        let basis = build_basis(&grid, 15).unwrap();
        let cfg = focused_cfg(n, 33);
        let center = |stack_kernel: &Tensor| {
            let s = cfg.psf_size;
            stack_kernel.at2(s / 2, s / 2)
        };
        let zero = compose_mask(&basis, &ZernikeCoefficients::zeros(15)).unwrap();
        let (zero_kernel, _) = psf(&zero, &cfg, 1).unwrap();
        let zero_center = center(&zero_kernel);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for draw in 0..20 {
            let raw: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha =
                ZernikeCoefficients::new(raw.into_iter().map(|v| v / norm).collect()).unwrap();
            let mask = compose_mask(&basis, &alpha).unwrap();
            let (kernel, _) = psf(&mask, &cfg, 1).unwrap();
            assert!(
                center(&kernel) < zero_center,
                "draw {draw} beat the diffraction-limited center"
            );
        }
    }

    #[test]
    fn stack_with_identical_wavelengths_and_flat_mask_is_uniform() {
        let mask = zero_mask(32);
        let cfg = OpticsConfig {
            wavelengths: [550e-9; 3],
            ..focused_cfg(32, 9)
        };
        let stack = psf_stack(&mask, &cfg).unwrap();
        assert_eq!(stack.kernel(0), stack.kernel(1));
        assert_eq!(stack.kernel(1), stack.kernel(2));
    }

    #[test]
    fn hardware_lens_is_not_impulsive() {
        let n = 256;
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        let basis = build_basis(&grid, 15).unwrap();
        let mask = compose_mask(&basis, &hardware_lens_q15()).unwrap();
        let stack = psf_stack(&mask, &focused_cfg(n, 65)).unwrap();
        for ch in 0..CHANNELS {
            let k = stack.kernel(ch);
            let s = stack.size();
            assert!(
                k.at2(s / 2, s / 2) < 0.5,
                "channel {ch} concentrated in the center pixel"
            );
        }
        // channels differ once the mask is non-flat
        assert_ne!(stack.kernel(0), stack.kernel(1));
    }

    #[test]
    fn rendering_is_deterministic() {
        let n = 64;
        let grid = PupilGrid::new(n, 5e-3).unwrap();
        let basis = build_basis(&grid, 15).unwrap();
        let mask = compose_mask(&basis, &hardware_lens_q15()).unwrap();
        let cfg = focused_cfg(n, 21);
        let a = psf_stack(&mask, &cfg).unwrap();
        let b = psf_stack(&mask, &cfg).unwrap();
        for ch in 0..CHANNELS {
            assert_eq!(a.kernel(ch).data(), b.kernel(ch).data());
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let grid = PupilGrid::new(32, 5e-3).unwrap();
        let mut cfg = small_cfg(9);
        cfg.object_distance = 0.0;
        assert!(cfg.validate(&grid).is_err());
        let mut cfg = small_cfg(10);
        cfg.psf_size = 10;
        assert!(cfg.validate(&grid).is_err());
        let cfg = small_cfg(65);
        assert!(cfg.validate(&grid).is_err(), "psf larger than grid");

        // grossly undersampled pupil curvature is rejected on the psf path
        let grid = PupilGrid::new(64, 5e-3).unwrap();
        let mask = PhaseMask::new(grid.clone(), Tensor::zeros(&[64, 64])).unwrap();
        let cfg = OpticsConfig {
            object_distance: 0.05,
            propagation_distance: 0.05,
            psf_size: 9,
            ..OpticsConfig::default()
        };
        assert!(cfg.validate_sampling(&grid).is_err());
        assert!(psf(&mask, &cfg, 1).is_err());
        // and fine at a properly focused throw
        assert!(focused_cfg(64, 9).validate_sampling(&grid).is_ok());
    }
}
