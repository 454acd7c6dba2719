//! Scalar losses and evaluation metrics.
//!
//! SSIM is single-scale with an 11x11 Gaussian window (sigma 1.5) and the
//! reference constants C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range,
//! averaged over valid window positions and channels. Degenerate windows
//! (both images constant) evaluate to 1 through the stabilizing constants.

use serde::{Deserialize, Serialize};

use crate::optics::CHANNELS;
use crate::par;
use crate::sensor::{ImageTensor, VideoTensor};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian window used by both the metric and the training
/// loss so their values agree exactly.
pub fn gaussian_window_1d() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - center;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode filtering with a symmetric 1D window: rows first,
/// then columns. Output is (h-k+1) x (w-k+1).
pub fn separable_valid_filter(plane: &[f64], h: usize, w: usize, window: &[f64]) -> Vec<f64> {
    let k = window.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for oc in 0..ow {
            let mut acc = 0.0;
            for (i, &wi) in window.iter().enumerate() {
                acc += wi * plane[r * w + oc + i];
            }
            rows[r * ow + oc] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for or in 0..oh {
        for oc in 0..ow {
            let mut acc = 0.0;
            for (i, &wi) in window.iter().enumerate() {
                acc += wi * rows[(or + i) * ow + oc];
            }
            out[or * ow + oc] = acc;
        }
    }
    out
}

fn ssim_channel(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let window = gaussian_window_1d();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let mu_x = separable_valid_filter(x, h, w, &window);
    let mu_y = separable_valid_filter(y, h, w, &window);
    let m_xx = separable_valid_filter(&xx, h, w, &window);
    let m_yy = separable_valid_filter(&yy, h, w, &window);
    let m_xy = separable_valid_filter(&xy, h, w, &window);
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let sx = m_xx[i] - mu_x[i] * mu_x[i];
        let sy = m_yy[i] - mu_y[i] * mu_y[i];
        let sxy = m_xy[i] - mu_x[i] * mu_y[i];
        let num = (2.0 * (mu_x[i] * mu_y[i]) + SSIM_C1) * (2.0 * sxy + SSIM_C2);
        let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1) * (sx + sy + SSIM_C2);
        acc += num / den;
    }
    acc / mu_x.len() as f64
}

/// Mean SSIM over channels and valid window positions; symmetric in its
/// arguments and 1 exactly for identical inputs.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::shape("ssim inputs must share dimensions"));
    }
    if x.height() < SSIM_WINDOW || x.width() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images at least {SSIM_WINDOW} pixels on a side"
        )));
    }
    let mut acc = 0.0;
    for ch in 0..CHANNELS {
        acc += ssim_channel(x.channel(ch), y.channel(ch), x.height(), x.width());
    }
    Ok(acc / CHANNELS as f64)
}

/// Mean of framewise SSIM values.
pub fn video_ssim(vx: &VideoTensor, vy: &VideoTensor) -> Result<f64> {
    if vx.len() != vy.len() {
        return Err(Error::shape("videos must have the same frame count"));
    }
    let per_frame = par::map_range(vx.len(), |t| ssim(vx.frame(t), vy.frame(t)));
    let per_frame = per_frame.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Per-frame embeddings, row-major T x D.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    t: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingSequence {
    pub fn new(t: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != t * d {
            return Err(Error::shape("embedding buffer has the wrong length"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("embeddings must be finite"));
        }
        Ok(EmbeddingSequence { t, d, data })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Temporal similarity matrix: symmetric, zero diagonal, entries <= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tsm {
    t: usize,
    data: Vec<f64>,
}

impl Tsm {
    pub fn from_raw(t: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != t * t {
            return Err(Error::shape("tsm buffer has the wrong length"));
        }
        for i in 0..t {
            if data[i * t + i] != 0.0 {
                return Err(Error::invalid("tsm diagonal must be zero"));
            }
            for j in 0..t {
                let v = data[i * t + j];
                if !v.is_finite() || v > 0.0 {
                    return Err(Error::invalid("tsm entries must be finite and <= 0"));
                }
                if v != data[j * t + i] {
                    return Err(Error::invalid("tsm must be symmetric"));
                }
            }
        }
        Ok(Tsm { t, data })
    }

    pub fn size(&self) -> usize {
        self.t
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.t + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `tsm[i][j] = -||e_i - e_j||^2`.
pub fn tsm(e: &EmbeddingSequence) -> Tsm {
    let t = e.len();
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            let d2: f64 = e
                .frame(i)
                .iter()
                .zip(e.frame(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            data[i * t + j] = -d2;
            data[j * t + i] = -d2;
        }
    }
    Tsm { t, data }
}

/// Mean squared elementwise difference between two TSMs.
pub fn tsm_loss(a: &Tsm, b: &Tsm) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::shape("tsm sizes differ"));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Softmax cross-entropy for the action head.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("logits must be finite"));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Independent per-attribute sigmoid cross-entropy, averaged over attributes.
pub fn sigmoid_ce(logits: &[f64], targets: &[bool]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape("logit/target length mismatch"));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("logits must be finite"));
    }
    let mut acc = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let t = if t { 1.0 } else { 0.0 };
        acc += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    }
    Ok(acc / logits.len() as f64)
}

/// Harmonic mean of utility `a_c` and privacy `1 - a_a`.
pub fn harmonic_p(a_c: f64, a_a: f64) -> Result<f64> {
    if !(a_c > 0.0 && a_c <= 1.0) || !(0.0..1.0).contains(&a_a) {
        return Err(Error::numerical(format!(
            "harmonic P undefined for a_c={a_c}, a_a={a_a}"
        )));
    }
    Ok(2.0 * a_c * (1.0 - a_a) / ((1.0 - a_a) + a_c))
}

/// Average precision: area under the precision-recall curve with step
/// interpolation at each positive. Ties rank by their original index.
/// Returns `None` when there is no positive label.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "score/label length mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
            ap += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Some(ap / n_pos as f64)
}

/// Unweighted mean of the defined per-attribute APs; attributes whose AP is
/// undefined (no positives) are excluded by the caller upstream.
pub fn c_map(per_attribute: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_attribute.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Evaluation summary combining utility, privacy, and distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Action classification accuracy.
    pub a_c: f64,
    /// Best-adversary C-MAP.
    pub a_a: f64,
    /// Mean SSIM of private vs clean video.
    pub ssim_mean: f64,
    /// Harmonic privacy/utility score; `None` outside the valid domain.
    pub p: Option<f64>,
    pub per_attribute_ap: Vec<f64>,
}

impl EvalReport {
    pub fn new(a_c: f64, a_a: f64, ssim_mean: f64, per_attribute_ap: Vec<f64>) -> Self {
        EvalReport {
            a_c,
            a_a,
            ssim_mean,
            p: harmonic_p(a_c, a_a).ok(),
            per_attribute_ap,
        }
    }

    /// Flat key-value rendering for the text report.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("a_c = {:.6}\n", self.a_c));
        out.push_str(&format!("a_a = {:.6}\n", self.a_a));
        out.push_str(&format!("ssim_mean = {:.6}\n", self.ssim_mean));
        match self.p {
            Some(p) => out.push_str(&format!("p = {:.6}\n", p)),
            None => out.push_str("p = undefined\n"),
        }
        for (i, ap) in self.per_attribute_ap.iter().enumerate() {
            out.push_str(&format!("ap_attr_{i} = {ap:.6}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = (0..CHANNELS * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageTensor::new(h, w, planes).unwrap()
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let x = random_image(16, 16, 1);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = random_image(16, 16, 2);
        let y = random_image(16, 16, 3);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
    }

    #[test]
    fn ssim_constant_offset_matches_closed_form() {
        let x = ImageTensor::constant(16, 16, 0.5);
        let y = ImageTensor::constant(16, 16, 0.6);
        // constant patches: sigma terms vanish, means survive
        let expected = ((2.0 * 0.5 * 0.6 + SSIM_C1) * SSIM_C2)
            / ((0.25 + 0.36 + SSIM_C1) * SSIM_C2);
        let got = ssim(&x, &y).unwrap();
        assert!((got - expected).abs() < 1e-9, "got {got}, expected {expected}");
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_rejects_mismatched_or_tiny_images() {
        let x = random_image(16, 16, 4);
        let y = random_image(16, 12, 5);
        assert!(ssim(&x, &y).is_err());
        let small = random_image(8, 8, 6);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_bounded_on_random_pairs() {
        for seed in 0..50 {
            let x = random_image(14, 14, 100 + seed);
            let y = random_image(14, 14, 200 + seed);
            let v = ssim(&x, &y).unwrap();
            assert!((-1.0..=1.0).contains(&v), "ssim {v} out of range");
        }
    }

    #[test]
    fn video_ssim_is_frame_mean_and_monotone() {
        let a = random_image(16, 16, 7);
        let b = random_image(16, 16, 8);
        let va = VideoTensor::new(vec![a.clone(), a.clone()], 10.0).unwrap();
        let vb = VideoTensor::new(vec![a.clone(), b.clone()], 10.0).unwrap();
        let expect = (ssim(&a, &a).unwrap() + ssim(&a, &b).unwrap()) / 2.0;
        assert!((video_ssim(&va, &vb).unwrap() - expect).abs() < 1e-15);
        assert_eq!(video_ssim(&va, &va).unwrap(), 1.0);
        // replacing a frame pair by a lower-SSIM pair cannot raise the mean
        assert!(video_ssim(&va, &vb).unwrap() <= video_ssim(&va, &va).unwrap());
    }

    #[test]
    fn tsm_formula_and_invariants() {
        let constant = EmbeddingSequence::new(4, 3, vec![0.5; 12]).unwrap();
        assert!(tsm(&constant).data().iter().all(|&v| v == 0.0));

        let e = EmbeddingSequence::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let m = tsm(&e);
        assert_eq!(m.at(0, 1), -1.0);
        assert_eq!(m.at(1, 0), -1.0);
        assert_eq!(m.at(0, 0), 0.0);

        // permuting frames permutes rows and columns
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = EmbeddingSequence::new(5, 4, data.clone()).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted_data: Vec<f64> = perm
            .iter()
            .flat_map(|&i| data[i * 4..(i + 1) * 4].to_vec())
            .collect();
        let ep = EmbeddingSequence::new(5, 4, permuted_data).unwrap();
        let m = tsm(&e);
        let mp = tsm(&ep);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(mp.at(i, j), m.at(perm[i], perm[j]));
            }
        }
        // type invariants hold on random embeddings
        assert!(Tsm::from_raw(5, m.data().to_vec()).is_ok());
    }

    #[test]
    fn tsm_loss_values() {
        let zero = Tsm::from_raw(2, vec![0.0; 4]).unwrap();
        let single = Tsm::from_raw(2, vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        assert_eq!(tsm_loss(&zero, &zero).unwrap(), 0.0);
        assert_eq!(tsm_loss(&zero, &single).unwrap(), 0.5);
        assert_eq!(
            tsm_loss(&zero, &single).unwrap(),
            tsm_loss(&single, &zero).unwrap()
        );
        let bigger = Tsm::from_raw(3, vec![0.0; 9]).unwrap();
        assert!(tsm_loss(&zero, &bigger).is_err());
    }

    #[test]
    fn softmax_ce_reference_values() {
        let k = 5;
        let uniform = vec![0.7; k];
        assert!((softmax_ce(&uniform, 2).unwrap() - (k as f64).ln()).abs() < 1e-12);

        // margin drives the loss to zero
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = vec![margin, 0.0];
            let ce = softmax_ce(&logits, 0).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-20);

        let logits = vec![3.0f64.ln(), 0.0];
        let expected = -(3.0f64 / 4.0).ln();
        assert!((softmax_ce(&logits, 0).unwrap() - expected).abs() < 1e-12);

        assert!(softmax_ce(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn sigmoid_ce_reference_values() {
        // zero logits: -ln(1/2) per attribute regardless of target
        let v = sigmoid_ce(&[0.0, 0.0, 0.0], &[true, false, true]).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
        // strongly correct logits vanish
        let v = sigmoid_ce(&[30.0, -30.0], &[true, false]).unwrap();
        assert!(v < 1e-12);
        assert!(sigmoid_ce(&[0.0], &[true, false]).is_err());
    }

    #[test]
    fn harmonic_p_reproduces_reported_rows() {
        assert!((harmonic_p(0.738, 0.665).unwrap() - 0.461).abs() < 5e-4);
        assert!((harmonic_p(0.633, 0.689).unwrap() - 0.417).abs() < 5e-4);
        // equal operands collapse to the common value
        for c in [0.2, 0.5, 0.9] {
            assert!((harmonic_p(c, 1.0 - c).unwrap() - c).abs() < 1e-12);
        }
        assert!(harmonic_p(0.0, 0.5).is_err());
        assert!(harmonic_p(0.5, 1.0).is_err());
    }

    #[test]
    fn harmonic_p_monotonicity() {
        let mut prev = 0.0;
        for a_c in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let p = harmonic_p(a_c, 0.4).unwrap();
            assert!(p > prev);
            prev = p;
        }
        let mut prev = 1.0;
        for a_a in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let p = harmonic_p(0.8, a_a).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn average_precision_identities() {
        // perfect ranking
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);

        // single positive ranked k-th of N
        for k in 1..=5usize {
            let n = 6;
            let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 * 0.1).collect();
            let labels: Vec<bool> = (0..n).map(|i| i == k - 1).collect();
            assert!(
                (average_precision(&scores, &labels).unwrap() - 1.0 / k as f64).abs() < 1e-15
            );
        }

        // all-negative labels are undefined
        assert!(average_precision(&[0.3, 0.2], &[false, false]).is_none());
        assert_eq!(c_map(&[Some(0.5), None, Some(0.7)]), Some(0.6));
        assert_eq!(c_map(&[None, None]), None);
    }

    #[test]
    fn average_precision_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let n = 50;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if !labels.iter().any(|&l| l) {
                continue;
            }
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).tanh()).collect();
            let a = average_precision(&scores, &labels).unwrap();
            let b = average_precision(&transformed, &labels).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_classifier_ap_approaches_prevalence() {
        // the null-hypothesis APs reported for the five attributes track
        // their prevalences; random scores reproduce that behavior
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &prevalence in &[0.95, 0.71, 0.97, 0.58, 0.17] {
            let n = 4000;
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(prevalence)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let ap = average_precision(&scores, &labels).unwrap();
            assert!(
                (ap - prevalence).abs() < 0.05,
                "ap {ap} far from prevalence {prevalence}"
            );
        }
    }

    #[test]
    fn eval_report_is_consistent_and_serializable() {
        let report = EvalReport::new(0.9, 0.55, 0.62, vec![0.5, 0.6, 0.4, 0.55, 0.5]);
        let p = report.p.unwrap();
        assert!((p - harmonic_p(0.9, 0.55).unwrap()).abs() < 1e-9);
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(report.to_kv_text().contains("a_c = 0.900000"));
    }
}
