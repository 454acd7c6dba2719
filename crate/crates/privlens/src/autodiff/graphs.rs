//! Differentiable composites of the recorded primitives: PSF synthesis,
//! sensor acquisition, and the SSIM loss. Each mirrors its plain counterpart
//! operation for operation, so forward values agree with `optics::psf` and
//! `sensor::acquire` bit for bit.

use std::sync::Arc;

use super::{NodeId, Tape};
use crate::metrics::{gaussian_window_1d, SSIM_C1, SSIM_C2};
use crate::optics::{pupil_constant, transfer_function, OpticsConfig, CHANNELS};
use crate::tensor::{CTensor, Tensor};
use crate::zernike::ZernikeBasis;
use crate::Result;

/// Handles into a recorded PSF synthesis subgraph.
pub struct PsfGraph {
    pub alpha: NodeId,
    pub phi: NodeId,
    /// Unit-sum kernel nodes per channel.
    pub kernels: [NodeId; CHANNELS],
    /// Pre-normalization sensor-plane intensity per channel.
    pub full_intensity: [NodeId; CHANNELS],
}

/// Records `alpha -> phase mask -> per-channel unit-sum PSF kernels`.
pub fn psf_kernel_graph(
    tape: &mut Tape,
    alpha: NodeId,
    basis: &Arc<ZernikeBasis>,
    cfg: &OpticsConfig,
) -> Result<PsfGraph> {
    cfg.validate(basis.grid())?;
    let grid = basis.grid().clone();
    let phi = tape.basis_combine(alpha, basis.clone());
    let mut kernels = Vec::with_capacity(CHANNELS);
    let mut full = Vec::with_capacity(CHANNELS);
    for ch in 0..CHANNELS {
        let s = -cfg.wavenumber(ch) * 1e-6;
        let t_phi = tape.phase_exp(phi, s);
        let field = tape.cmul_const(t_phi, Arc::new(pupil_constant(&grid, cfg, ch)));
        let spectrum = tape.dft2(field);
        let propagated = tape.cmul_const(spectrum, Arc::new(transfer_function(&grid, cfg, ch)));
        let sensor_field = tape.idft2(propagated);
        let intensity = tape.magnitude_sq(sensor_field);
        let cropped = tape.crop_center(intensity, cfg.psf_size);
        let total = tape.sum(cropped);
        kernels.push(tape.div_by_scalar(cropped, total));
        full.push(intensity);
    }
    Ok(PsfGraph {
        alpha,
        phi,
        kernels: [kernels[0], kernels[1], kernels[2]],
        full_intensity: [full[0], full[1], full[2]],
    })
}

/// Records one private frame: circular convolution with the (differentiable)
/// kernels, linear camera response, constant noise addition, clamp.
///
/// `clean_spectra` are the unitary FFTs of the clean frame channels;
/// `noise` holds one plane per channel (zeros when sigma = 0).
#[allow(clippy::too_many_arguments)]
pub fn acquire_frame_graph(
    tape: &mut Tape,
    clean_spectra: &[Arc<CTensor>; CHANNELS],
    kernels: &[NodeId; CHANNELS],
    height: usize,
    width: usize,
    gain: f64,
    offset: f64,
    noise: &[Arc<Tensor>; CHANNELS],
) -> [NodeId; CHANNELS] {
    let scale = ((height * width) as f64).sqrt();
    let mut out = Vec::with_capacity(CHANNELS);
    for ch in 0..CHANNELS {
        let embedded = tape.embed_wrap(kernels[ch], height, width);
        let k_complex = tape.complex_from_real(embedded);
        let k_hat = tape.dft2(k_complex);
        let product = tape.cmul_const(k_hat, clean_spectra[ch].clone());
        let back = tape.idft2(product);
        let re = tape.real_part(back);
        let blurred = tape.scale(re, scale);
        let with_gain = tape.scale(blurred, gain);
        let with_offset = tape.offset(with_gain, offset);
        let noisy = tape.add_const(with_offset, noise[ch].clone());
        out.push(tape.clamp01(noisy));
    }
    [out[0], out[1], out[2]]
}

fn ssim_channel_graph(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    window: &Arc<Vec<f64>>,
) -> NodeId {
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let xy = tape.mul(x, y);
    let mu_x = tape.window_filter(x, window.clone());
    let mu_y = tape.window_filter(y, window.clone());
    let m_xx = tape.window_filter(xx, window.clone());
    let m_yy = tape.window_filter(yy, window.clone());
    let m_xy = tape.window_filter(xy, window.clone());
    let mu_x2 = tape.mul(mu_x, mu_x);
    let mu_y2 = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let sx = tape.sub(m_xx, mu_x2);
    let sy = tape.sub(m_yy, mu_y2);
    let sxy = tape.sub(m_xy, mu_xy);
    let mu_term = tape.scale(mu_xy, 2.0);
    let mu_term = tape.offset(mu_term, SSIM_C1);
    let s_term = tape.scale(sxy, 2.0);
    let s_term = tape.offset(s_term, SSIM_C2);
    let num = tape.mul(mu_term, s_term);
    let mu_sq = tape.add(mu_x2, mu_y2);
    let mu_sq = tape.offset(mu_sq, SSIM_C1);
    let s_sq = tape.add(sx, sy);
    let s_sq = tape.offset(s_sq, SSIM_C2);
    let den = tape.mul(mu_sq, s_sq);
    let map = tape.div(num, den);
    tape.mean(map)
}

/// SSIM between two images given as per-channel [H,W] nodes; mean over
/// channels and valid 11x11 Gaussian window positions.
pub fn ssim_image_graph(
    tape: &mut Tape,
    x_channels: &[NodeId; CHANNELS],
    y_channels: &[NodeId; CHANNELS],
) -> NodeId {
    let window = Arc::new(gaussian_window_1d().to_vec());
    let per_channel: Vec<NodeId> = (0..CHANNELS)
        .map(|ch| ssim_channel_graph(tape, x_channels[ch], y_channels[ch], &window))
        .collect();
    let total = tape.add_n(&per_channel);
    tape.scale(total, 1.0 / CHANNELS as f64)
}
