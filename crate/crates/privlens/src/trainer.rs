//! Pretraining initialization and the three-player adversarial loop.
//!
//! Each batch renders private videos once through the current lens, then
//! updates, in order: theta_o on `L(O) + gamma1 L(C) - gamma2 L(A)` with the
//! network parameters frozen, theta_c on `L(C)` (cross-entropy plus the TSM
//! term), and theta_a on `L(A)`; the other two players' parameters are
//! bit-untouched during each sub-step. All randomness derives from the run
//! seed, and batch items are processed data-parallel with a fixed reduction
//! order, so a fixed seed reproduces parameters bit for bit.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attacks::{fresh_adversary_attack, AttackReport, LensDistortion};
use crate::autodiff::{acquire_frame_graph, psf_kernel_graph, ssim_image_graph, NodeId, Tape};
use crate::fft2::fft2;
use crate::metrics::{self, EvalReport, Tsm};
use crate::models::{
    forward_a, forward_a_graph, forward_c, forward_c_graph, AdversaryA, ClassifierC,
    ReferenceTsmCache,
};
use crate::optics::{psf_stack, OpticsConfig, PsfStack, CHANNELS};
use crate::par;
use crate::sensor::{acquire_video, noise_planes, SensorConfig, VideoTensor};
use crate::synthdata::{Dataset, LabeledClip, N_ACTIONS, N_ATTRIBUTES};
use crate::tensor::{CTensor, Tensor};
use crate::zernike::{build_basis, compose_mask, PupilGrid, ZernikeBasis, ZernikeCoefficients};
use crate::{Error, Result};

/// Learning-rate decay semantics after the trigger epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// Multiply by the decay factor every epoch from the trigger onward.
    PerEpoch,
    /// Apply the decay factor once at the trigger epoch.
    OneShot,
}

/// Hyperparameters of the adversarial run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta_o: f64,
    pub beta_c: f64,
    pub beta_a: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub decay_mode: DecayMode,
    pub seed: u64,
    /// Keep the TSM term in L(C) (ablation switch).
    pub use_tsm: bool,
    /// Run the adversarial game; false reproduces the non-adversarial
    /// configuration (gamma2 treated as 0, theta_a never updated).
    pub adversarial: bool,
    pub q: usize,
    pub model_width: usize,
    pub optics_n_samples: usize,
    pub optics: OpticsConfig,
    pub sensor: SensorConfig,
    pub pretrain_lr_model: f64,
    pub pretrain_epochs: usize,
    pub pretrain_ssim_floor: f64,
    pub alpha_init_std: f64,
    pub attack_adversaries: usize,
    pub attack_epochs: usize,
    pub attack_lr: f64,
}

impl TrainConfig {
    /// Desk-scale defaults: reported hyperparameters for the adversarial
    /// loop, small optics grid, noise-free sensor.
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            beta_o: 3e-3,
            beta_c: 1e-4,
            beta_a: 1e-4,
            gamma1: 0.7,
            gamma2: 0.3,
            epochs: 50,
            batch: 8,
            decay_epoch: 25,
            decay_factor: 0.1,
            decay_mode: DecayMode::PerEpoch,
            seed,
            use_tsm: true,
            adversarial: true,
            q: 15,
            model_width: 12,
            optics_n_samples: 64,
            optics: OpticsConfig {
                psf_size: 13,
                // in focus at zero aberration on the 64-sample grid, with
                // the pupil chirp properly sampled; at this throw a few
                // tenths of a micrometer of aberration blur several pixels
                object_distance: 0.75,
                propagation_distance: 0.75,
                ..OpticsConfig::default()
            },
            sensor: SensorConfig {
                noise_sigma: 0.0,
                response_gain: 1.0,
                response_offset: 0.0,
                rng_seed: 0,
            },
            pretrain_lr_model: 0.05,
            pretrain_epochs: 80,
            pretrain_ssim_floor: 0.98,
            alpha_init_std: 0.08,
            attack_adversaries: 5,
            attack_epochs: 40,
            attack_lr: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_o >= 0.0 && self.beta_c >= 0.0 && self.beta_a >= 0.0) {
            return Err(Error::invalid("learning rates must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma1) || !(0.0..=1.0).contains(&self.gamma2) {
            return Err(Error::invalid("gamma weights must lie in [0,1]"));
        }
        if self.batch == 0 || self.q == 0 {
            return Err(Error::invalid("batch and q must be positive"));
        }
        self.sensor.validate()
    }
}

/// Clean-data ceilings established during pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBounds {
    pub a_c: f64,
    pub a_a: f64,
}

/// One telemetry row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub l_o: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub ssim: f64,
    pub a_c: f64,
    pub a_a: f64,
    pub p: Option<f64>,
}

/// Parameters and bookkeeping of one run.
#[derive(Clone)]
pub struct TrainState {
    pub alpha: ZernikeCoefficients,
    pub classifier: ClassifierC,
    pub adversary: AdversaryA,
    pub epoch: usize,
    pub telemetry: Vec<EpochTelemetry>,
    pub bounds: UpperBounds,
    pub basis: Arc<ZernikeBasis>,
    /// Reference TSMs of clean train clips under the frozen pretrained C.
    pub tsm_refs: Vec<Arc<Tsm>>,
}

/// Learning rates for (theta_o, theta_c, theta_a) at a 0-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> (f64, f64, f64) {
    let factor = if epoch < cfg.decay_epoch {
        1.0
    } else {
        match cfg.decay_mode {
            DecayMode::PerEpoch => cfg
                .decay_factor
                .powi((epoch - cfg.decay_epoch + 1) as i32),
            DecayMode::OneShot => cfg.decay_factor,
        }
    };
    (
        cfg.beta_o * factor,
        cfg.beta_c * factor,
        cfg.beta_a * factor,
    )
}

// seed-mixing tags
const TAG_ALPHA_INIT: u64 = 1;
const TAG_CLASSIFIER_INIT: u64 = 2;
const TAG_ADVERSARY_INIT: u64 = 3;
const TAG_SHUFFLE: u64 = 4;
const TAG_NOISE: u64 = 5;
const TAG_EVAL_NOISE: u64 = 6;
const TAG_ATTACK: u64 = 7;

/// splitmix64-style deterministic seed derivation.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn grid_for(cfg: &TrainConfig) -> Result<PupilGrid> {
    PupilGrid::new(cfg.optics_n_samples, cfg.optics.aperture_diameter)
}

fn sgd_apply(tensors: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (t, g) in tensors.iter_mut().zip(grads) {
        t.axpy_in_place(-lr, g);
    }
}

/// Momentum used by the pretraining and attack loops (the adversarial
/// schedule itself applies plain SGD).
const PRETRAIN_MOMENTUM: f64 = 0.9;

fn sgd_momentum_apply(
    tensors: &mut [&mut Tensor],
    velocity: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
) {
    if lr == 0.0 {
        return;
    }
    for ((t, v), g) in tensors.iter_mut().zip(velocity).zip(grads) {
        v.scale_in_place(PRETRAIN_MOMENTUM);
        v.add_in_place(g);
        t.axpy_in_place(-lr, v);
    }
}

fn grads_or_zeros(tape: &Tape, leaves: &[NodeId]) -> Vec<Tensor> {
    leaves
        .iter()
        .map(|&l| match tape.grad(l) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(l).dims()),
        })
        .collect()
}

fn mean_in_place(acc: &mut [Tensor], others: Vec<Vec<Tensor>>, scale: f64) {
    for grads in others {
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.add_in_place(g);
        }
    }
    for a in acc.iter_mut() {
        a.scale_in_place(scale);
    }
}

fn attribute_targets(clip: &LabeledClip) -> Arc<Vec<f64>> {
    Arc::new(
        clip.spec
            .attributes
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Per-clip gradient bundle from the shared batch tape.
struct ClipStep {
    kernel_grads: Vec<Tensor>,
    c_grads: Vec<Tensor>,
    a_grads: Vec<Tensor>,
    l_o: f64,
    l_c: f64,
    l_a: f64,
}

/// Builds the per-clip graph (acquisition, SSIM, C with TSM, A) and extracts
/// the three gradient sets by replaying backward from each loss.
#[allow(clippy::too_many_arguments)]
fn clip_step(
    clip: &LabeledClip,
    tsm_ref: &Tsm,
    kernels: &[Tensor],
    cfg: &TrainConfig,
    classifier: &ClassifierC,
    adversary: &AdversaryA,
    epoch: usize,
    gamma2_eff: f64,
) -> Result<ClipStep> {
    let (h, w) = (clip.video.height(), clip.video.width());
    let t_frames = clip.video.len();
    let mut tape = Tape::new();
    let kernel_leaves: [NodeId; CHANNELS] =
        std::array::from_fn(|ch| tape.leaf(kernels[ch].clone()));

    let noise_seed = mix_seed(&[cfg.seed, TAG_NOISE, epoch as u64, clip.id]);
    let mut ssim_terms = Vec::with_capacity(t_frames);
    let mut private_frames = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let frame = clip.video.frame(t);
        let spectra: [Arc<CTensor>; CHANNELS] = std::array::from_fn(|ch| {
            Arc::new(fft2(&CTensor::from_real(
                &Tensor::from_vec(&[h, w], frame.channel(ch).to_vec()).expect("sized"),
            )))
        });
        let noise_flat = noise_planes(h, w, cfg.sensor.noise_sigma, noise_seed, t as u64);
        let noise: [Arc<Tensor>; CHANNELS] = std::array::from_fn(|ch| {
            Arc::new(
                Tensor::from_vec(&[h, w], noise_flat[ch * h * w..(ch + 1) * h * w].to_vec())
                    .expect("sized"),
            )
        });
        let private = acquire_frame_graph(
            &mut tape,
            &spectra,
            &kernel_leaves,
            h,
            w,
            cfg.sensor.response_gain,
            cfg.sensor.response_offset,
            &noise,
        );
        let clean: [NodeId; CHANNELS] = std::array::from_fn(|ch| {
            tape.leaf(Tensor::from_vec(&[h, w], frame.channel(ch).to_vec()).expect("sized"))
        });
        ssim_terms.push(ssim_image_graph(&mut tape, &clean, &private));
        private_frames.push(tape.stack(&[private[0], private[1], private[2]]));
    }
    let ssim_sum = tape.add_n(&ssim_terms);
    let l_o = tape.scale(ssim_sum, 1.0 / t_frames as f64);

    let c_graph = forward_c_graph(&mut tape, classifier, &private_frames);
    let ce_c = tape.softmax_ce(c_graph.logits, clip.spec.action.index());
    let l_c = if cfg.use_tsm {
        let mut terms = Vec::new();
        for i in 0..t_frames {
            for j in (i + 1)..t_frames {
                let d = tape.squared_distance(c_graph.embeddings[i], c_graph.embeddings[j]);
                let off = tape.offset(d, tsm_ref.at(i, j));
                terms.push(tape.mul(off, off));
            }
        }
        let tsm_sum = tape.add_n(&terms);
        let l_tsm = tape.scale(tsm_sum, 2.0 / (t_frames * t_frames) as f64);
        tape.add(ce_c, l_tsm)
    } else {
        ce_c
    };

    let a_graph = forward_a_graph(&mut tape, adversary, &private_frames);
    let l_a = tape.sigmoid_ce(a_graph.logits, attribute_targets(clip));

    let weighted_c = tape.scale(l_c, cfg.gamma1);
    let weighted_a = tape.scale(l_a, -gamma2_eff);
    let combined = tape.add_n(&[l_o, weighted_c, weighted_a]);

    let values = (
        tape.scalar_value(l_o),
        tape.scalar_value(l_c),
        tape.scalar_value(l_a),
    );
    if !values.0.is_finite() {
        return Err(Error::numerical(format!(
            "L(O) non-finite at epoch {epoch}, clip {}",
            clip.id
        )));
    }
    if !values.1.is_finite() {
        return Err(Error::numerical(format!(
            "L(C) non-finite at epoch {epoch}, clip {}",
            clip.id
        )));
    }
    if !values.2.is_finite() {
        return Err(Error::numerical(format!(
            "L(A) non-finite at epoch {epoch}, clip {}",
            clip.id
        )));
    }

    tape.backward(combined)?;
    let kernel_grads = grads_or_zeros(&tape, &kernel_leaves);
    tape.zero_grads();
    tape.backward(l_c)?;
    let c_grads = grads_or_zeros(&tape, &c_graph.leaves);
    tape.zero_grads();
    tape.backward(l_a)?;
    let a_grads = grads_or_zeros(&tape, &a_graph.leaves);

    Ok(ClipStep {
        kernel_grads,
        c_grads,
        a_grads,
        l_o: values.0,
        l_c: values.1,
        l_a: values.2,
    })
}

/// One full pass over the training set following the three-step update
/// order; returns batch-averaged loss components.
pub fn adversarial_epoch(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let epoch = state.epoch;
    let (beta_o, beta_c, beta_a) = lr_schedule(epoch, cfg);
    let gamma2_eff = if cfg.adversarial { cfg.gamma2 } else { 0.0 };

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_SHUFFLE, epoch as u64]));
    order.shuffle(&mut rng);

    let mut sums = (0.0, 0.0, 0.0);
    let mut n_batches = 0usize;
    for batch in order.chunks(cfg.batch) {
        // (1)+(2): render private videos differentiably and take the
        // theta_o step with theta_c, theta_a frozen
        let mut psf_tape = Tape::new();
        let alpha_leaf =
            psf_tape.leaf(Tensor::from_vec(&[cfg.q], state.alpha.alpha().to_vec())?);
        let psf_graph = psf_kernel_graph(&mut psf_tape, alpha_leaf, &state.basis, &cfg.optics)?;
        let kernels: Vec<Tensor> = (0..CHANNELS)
            .map(|ch| psf_tape.value(psf_graph.kernels[ch]).clone())
            .collect();

        let steps = par::map_slice(batch, |&idx| {
            clip_step(
                &dataset.train[idx],
                &state.tsm_refs[idx],
                &kernels,
                cfg,
                &state.classifier,
                &state.adversary,
                epoch,
                gamma2_eff,
            )
        });
        let steps = steps.into_iter().collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;

        // chain the batch-mean kernel cotangents through the PSF tape
        let mut kernel_seed: Vec<Tensor> = (0..CHANNELS)
            .map(|ch| Tensor::zeros(kernels[ch].dims()))
            .collect();
        for step in &steps {
            for (acc, g) in kernel_seed.iter_mut().zip(&step.kernel_grads) {
                acc.add_in_place(g);
            }
        }
        for acc in &mut kernel_seed {
            acc.scale_in_place(scale);
        }
        let seeds: Vec<(NodeId, Tensor)> = psf_graph
            .kernels
            .iter()
            .cloned()
            .zip(kernel_seed)
            .collect();
        psf_tape.backward_multi(&seeds)?;
        let alpha_grad = psf_tape
            .grad(alpha_leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[cfg.q]));
        if beta_o != 0.0 {
            for (a, g) in state
                .alpha
                .alpha_mut()
                .iter_mut()
                .zip(alpha_grad.data())
            {
                *a -= beta_o * g;
            }
        }

        // (3): theta_c step on L(C) with the pre-rendered private videos
        let mut c_acc: Vec<Tensor> = steps[0]
            .c_grads
            .iter()
            .map(|g| Tensor::zeros(g.dims()))
            .collect();
        mean_in_place(
            &mut c_acc,
            steps.iter().map(|s| s.c_grads.clone()).collect(),
            scale,
        );
        sgd_apply(&mut state.classifier.tensors_mut(), &c_acc, beta_c);

        // (4): theta_a step on L(A), skipped in the non-adversarial ablation
        if cfg.adversarial {
            let mut a_acc: Vec<Tensor> = steps[0]
                .a_grads
                .iter()
                .map(|g| Tensor::zeros(g.dims()))
                .collect();
            mean_in_place(
                &mut a_acc,
                steps.iter().map(|s| s.a_grads.clone()).collect(),
                scale,
            );
            sgd_apply(&mut state.adversary.tensors_mut(), &a_acc, beta_a);
        }

        for step in &steps {
            sums.0 += step.l_o * scale;
            sums.1 += step.l_c * scale;
            sums.2 += step.l_a * scale;
        }
        n_batches += 1;
    }
    state.epoch += 1;
    let n = n_batches as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// End-to-end objective `L(O) + gamma1 L(C) - gamma2 L(A)` for one clip as a
/// function of the lens coefficients, with its gradient chained through the
/// PSF synthesis tape. The gradient-check harness drives this against
/// central finite differences.
pub fn lens_objective_grad(
    cfg: &TrainConfig,
    basis: &Arc<ZernikeBasis>,
    alpha: &[f64],
    clip: &LabeledClip,
    tsm_ref: &Tsm,
    classifier: &ClassifierC,
    adversary: &AdversaryA,
) -> Result<(f64, Vec<f64>)> {
    let mut psf_tape = Tape::new();
    let alpha_leaf = psf_tape.leaf(Tensor::from_vec(&[alpha.len()], alpha.to_vec())?);
    let graph = psf_kernel_graph(&mut psf_tape, alpha_leaf, basis, &cfg.optics)?;
    let kernels: Vec<Tensor> = (0..CHANNELS)
        .map(|ch| psf_tape.value(graph.kernels[ch]).clone())
        .collect();
    let step = clip_step(
        clip,
        tsm_ref,
        &kernels,
        cfg,
        classifier,
        adversary,
        0,
        cfg.gamma2,
    )?;
    let value = step.l_o + cfg.gamma1 * step.l_c - cfg.gamma2 * step.l_a;
    let seeds: Vec<(NodeId, Tensor)> = graph
        .kernels
        .iter()
        .cloned()
        .zip(step.kernel_grads)
        .collect();
    psf_tape.backward_multi(&seeds)?;
    let grad = psf_tape
        .grad(alpha_leaf)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; alpha.len()]);
    Ok((value, grad))
}

/// Renders the private version of a set of clips under the current lens
/// (deterministic per-clip noise streams).
pub fn render_private(
    clips: &[LabeledClip],
    psf: &PsfStack,
    cfg: &TrainConfig,
) -> Result<Vec<VideoTensor>> {
    let rendered = par::map_slice(clips, |clip| {
        let sensor = SensorConfig {
            rng_seed: mix_seed(&[cfg.seed, TAG_EVAL_NOISE, clip.id]),
            ..cfg.sensor.clone()
        };
        acquire_video(&clip.video, psf, &sensor)
    });
    rendered.into_iter().collect()
}

/// Action accuracy of C over pre-rendered videos.
pub fn classifier_accuracy(
    c: &ClassifierC,
    clips: &[LabeledClip],
    videos: &[VideoTensor],
) -> f64 {
    let hits = par::map_range(clips.len(), |i| {
        let (logits, _) = forward_c(c, &videos[i]);
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(k, _)| k)
            .expect("non-empty logits");
        (pred == clips[i].spec.action.index()) as usize
    });
    hits.iter().sum::<usize>() as f64 / clips.len() as f64
}

/// Per-attribute APs and C-MAP of A over pre-rendered videos.
pub fn adversary_cmap(
    a: &AdversaryA,
    clips: &[LabeledClip],
    videos: &[VideoTensor],
) -> (Vec<Option<f64>>, Option<f64>) {
    let scores: Vec<Vec<f64>> = par::map_range(clips.len(), |i| forward_a(a, &videos[i]));
    let mut per_attribute = Vec::with_capacity(N_ATTRIBUTES);
    for m in 0..N_ATTRIBUTES {
        let s: Vec<f64> = scores.iter().map(|v| v[m]).collect();
        let labels: Vec<bool> = clips.iter().map(|c| c.spec.attributes[m]).collect();
        per_attribute.push(metrics::average_precision(&s, &labels));
    }
    let cmap = metrics::c_map(&per_attribute);
    (per_attribute, cmap)
}

/// SGD training of a classifier on fixed videos; returns final train
/// accuracy alongside the model.
pub fn train_classifier_sgd(
    mut c: ClassifierC,
    clips: &[LabeledClip],
    videos: &[VideoTensor],
    lr: f64,
    epochs: usize,
    batch: usize,
    seed: u64,
    target_accuracy: f64,
) -> (ClassifierC, f64) {
    let mut accuracy = 0.0;
    let mut velocity: Vec<Tensor> = c.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        for chunk in order.chunks(batch) {
            let grads_and_hits = par::map_slice(chunk, |&idx| {
                let mut tape = Tape::new();
                let frames: Vec<NodeId> = videos[idx]
                    .frames()
                    .iter()
                    .map(|f| tape.leaf(f.to_tensor()))
                    .collect();
                let graph = forward_c_graph(&mut tape, &c, &frames);
                let label = clips[idx].spec.action.index();
                let loss = tape.softmax_ce(graph.logits, label);
                tape.backward(loss).expect("scalar loss");
                let logits = tape.value(graph.logits).data();
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(k, _)| k)
                    .expect("non-empty");
                (grads_or_zeros(&tape, &graph.leaves), (pred == label) as usize)
            });
            let scale = 1.0 / chunk.len() as f64;
            let mut acc: Vec<Tensor> = grads_and_hits[0]
                .0
                .iter()
                .map(|g| Tensor::zeros(g.dims()))
                .collect();
            for (g, hit) in &grads_and_hits {
                for (a, gg) in acc.iter_mut().zip(g) {
                    a.add_in_place(gg);
                }
                correct += hit;
            }
            for a in &mut acc {
                a.scale_in_place(scale);
            }
            sgd_momentum_apply(&mut c.tensors_mut(), &mut velocity, &acc, lr);
        }
        accuracy = correct as f64 / clips.len() as f64;
        if epoch >= 4 && accuracy >= target_accuracy {
            break;
        }
    }
    (c, accuracy)
}

/// SGD training of an adversary on fixed videos; returns the per-epoch mean
/// training loss history (convergence indicator).
pub fn train_adversary_sgd(
    mut a: AdversaryA,
    clips: &[LabeledClip],
    videos: &[VideoTensor],
    lr: f64,
    epochs: usize,
    batch: usize,
    seed: u64,
) -> (AdversaryA, Vec<f64>) {
    let mut history = Vec::with_capacity(epochs);
    let mut velocity: Vec<Tensor> = a.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let grads = par::map_slice(chunk, |&idx| {
                let mut tape = Tape::new();
                let frames: Vec<NodeId> = videos[idx]
                    .frames()
                    .iter()
                    .map(|f| tape.leaf(f.to_tensor()))
                    .collect();
                let graph = forward_a_graph(&mut tape, &a, &frames);
                let loss = tape.sigmoid_ce(graph.logits, attribute_targets(&clips[idx]));
                tape.backward(loss).expect("scalar loss");
                (grads_or_zeros(&tape, &graph.leaves), tape.scalar_value(loss))
            });
            let scale = 1.0 / chunk.len() as f64;
            let mut acc: Vec<Tensor> = grads[0]
                .0
                .iter()
                .map(|g| Tensor::zeros(g.dims()))
                .collect();
            for (g, l) in &grads {
                for (a, gg) in acc.iter_mut().zip(g) {
                    a.add_in_place(gg);
                }
                loss_sum += l;
            }
            for acc_t in &mut acc {
                acc_t.scale_in_place(scale);
            }
            sgd_momentum_apply(&mut a.tensors_mut(), &mut velocity, &acc, lr);
        }
        let epoch_loss = loss_sum / clips.len() as f64;
        history.push(epoch_loss);
        if epoch >= 4 && epoch_loss < 0.02 {
            break;
        }
    }
    (a, history)
}

/// Optics pretraining: small random coefficients, SGD ascent on SSIM until
/// near-identity imaging.
fn pretrain_optics(
    cfg: &TrainConfig,
    dataset: &Dataset,
    basis: &Arc<ZernikeBasis>,
) -> Result<ZernikeCoefficients> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_ALPHA_INIT]));
    let normal = Normal::new(0.0, cfg.alpha_init_std).expect("finite std");
    let mut alpha =
        ZernikeCoefficients::new((0..cfg.q).map(|_| normal.sample(&mut rng)).collect())?;

    let subset: Vec<&LabeledClip> = dataset.train.iter().take(64).collect();
    let measure = |alpha: &ZernikeCoefficients| -> Result<f64> {
        let mask = compose_mask(basis, alpha)?;
        let psf = psf_stack(&mask, &cfg.optics)?;
        let vals = par::map_slice(&subset, |clip| {
            let sensor = SensorConfig {
                rng_seed: mix_seed(&[cfg.seed, TAG_EVAL_NOISE, clip.id]),
                ..cfg.sensor.clone()
            };
            let private = acquire_video(&clip.video, &psf, &sensor)?;
            metrics::video_ssim(&clip.video, &private)
        });
        let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };

    let mut current = measure(&alpha)?;
    for epoch in 0..cfg.pretrain_epochs {
        if current >= cfg.pretrain_ssim_floor + 0.005 {
            break;
        }
        for chunk in subset.chunks(cfg.batch) {
            let mut psf_tape = Tape::new();
            let alpha_leaf = psf_tape.leaf(Tensor::from_vec(&[cfg.q], alpha.alpha().to_vec())?);
            let graph = psf_kernel_graph(&mut psf_tape, alpha_leaf, basis, &cfg.optics)?;
            let kernels: Vec<Tensor> = (0..CHANNELS)
                .map(|ch| psf_tape.value(graph.kernels[ch]).clone())
                .collect();
            let grads = par::map_slice(chunk, |clip| {
                let (h, w) = (clip.video.height(), clip.video.width());
                let mut tape = Tape::new();
                let kernel_leaves: [NodeId; CHANNELS] =
                    std::array::from_fn(|ch| tape.leaf(kernels[ch].clone()));
                let noise_seed = mix_seed(&[cfg.seed, TAG_NOISE, epoch as u64, clip.id]);
                let mut terms = Vec::new();
                for t in 0..clip.video.len() {
                    let frame = clip.video.frame(t);
                    let spectra: [Arc<CTensor>; CHANNELS] = std::array::from_fn(|ch| {
                        Arc::new(fft2(&CTensor::from_real(
                            &Tensor::from_vec(&[h, w], frame.channel(ch).to_vec())
                                .expect("sized"),
                        )))
                    });
                    let noise_flat =
                        noise_planes(h, w, cfg.sensor.noise_sigma, noise_seed, t as u64);
                    let noise: [Arc<Tensor>; CHANNELS] = std::array::from_fn(|ch| {
                        Arc::new(
                            Tensor::from_vec(
                                &[h, w],
                                noise_flat[ch * h * w..(ch + 1) * h * w].to_vec(),
                            )
                            .expect("sized"),
                        )
                    });
                    let private = acquire_frame_graph(
                        &mut tape,
                        &spectra,
                        &kernel_leaves,
                        h,
                        w,
                        cfg.sensor.response_gain,
                        cfg.sensor.response_offset,
                        &noise,
                    );
                    let clean: [NodeId; CHANNELS] = std::array::from_fn(|ch| {
                        tape.leaf(
                            Tensor::from_vec(&[h, w], frame.channel(ch).to_vec()).expect("sized"),
                        )
                    });
                    terms.push(ssim_image_graph(&mut tape, &clean, &private));
                }
                let ssim_sum = tape.add_n(&terms);
                let mean_ssim = tape.scale(ssim_sum, 1.0 / clip.video.len() as f64);
                // maximize SSIM = minimize 1 - SSIM
                let loss = tape.scale(mean_ssim, -1.0);
                tape.backward(loss).expect("scalar");
                grads_or_zeros(&tape, &kernel_leaves)
            });
            let scale = 1.0 / chunk.len() as f64;
            let mut seed_acc: Vec<Tensor> = (0..CHANNELS)
                .map(|ch| Tensor::zeros(kernels[ch].dims()))
                .collect();
            for g in grads {
                for (a, gg) in seed_acc.iter_mut().zip(&g) {
                    a.add_in_place(gg);
                }
            }
            for a in &mut seed_acc {
                a.scale_in_place(scale);
            }
            let seeds: Vec<(NodeId, Tensor)> =
                graph.kernels.iter().cloned().zip(seed_acc).collect();
            psf_tape.backward_multi(&seeds)?;
            if let Some(g) = psf_tape.grad(alpha_leaf) {
                for (a, gv) in alpha.alpha_mut().iter_mut().zip(g.data()) {
                    *a -= cfg.beta_o * gv;
                }
            }
        }
        current = measure(&alpha)?;
    }
    if current < cfg.pretrain_ssim_floor {
        return Err(Error::numerical(format!(
            "optics pretraining stalled: video_ssim {current:.4} < {:.2} \
             (alpha norm {:.4}, q {})",
            cfg.pretrain_ssim_floor,
            alpha.norm(),
            cfg.q
        )));
    }
    Ok(alpha)
}

/// Trains each component separately without privacy concern and records the
/// clean upper bounds.
pub fn pretrain(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainState> {
    cfg.validate()?;
    let grid = grid_for(cfg)?;
    let basis = Arc::new(build_basis(&grid, cfg.q)?);

    // optics: near-identity imaging
    let alpha = pretrain_optics(cfg, dataset, &basis)?;

    // HAR network on clean clips
    let clean_train: Vec<VideoTensor> =
        dataset.train.iter().map(|c| c.video.clone()).collect();
    let clean_test: Vec<VideoTensor> = dataset.test.iter().map(|c| c.video.clone()).collect();
    let c0 = ClassifierC::init(
        cfg.model_width,
        N_ACTIONS,
        mix_seed(&[cfg.seed, TAG_CLASSIFIER_INIT]),
    );
    let (classifier, _) = train_classifier_sgd(
        c0,
        &dataset.train,
        &clean_train,
        cfg.pretrain_lr_model,
        cfg.pretrain_epochs,
        cfg.batch,
        mix_seed(&[cfg.seed, 21]),
        0.995,
    );
    let clean_a_c = classifier_accuracy(&classifier, &dataset.test, &clean_test);

    // attribute estimator on clean clips
    let a0 = AdversaryA::init(
        cfg.model_width,
        N_ATTRIBUTES,
        mix_seed(&[cfg.seed, TAG_ADVERSARY_INIT]),
    );
    let (adversary, _) = train_adversary_sgd(
        a0,
        &dataset.train,
        &clean_train,
        cfg.pretrain_lr_model,
        cfg.pretrain_epochs,
        cfg.batch,
        mix_seed(&[cfg.seed, 22]),
    );
    let (_, clean_cmap) = adversary_cmap(&adversary, &dataset.test, &clean_test);
    let clean_a_a = clean_cmap.ok_or_else(|| Error::numerical("clean C-MAP undefined"))?;

    // reference TSMs from the frozen pretrained classifier
    let mut cache = ReferenceTsmCache::new(classifier.clone());
    let tsm_refs: Vec<Arc<Tsm>> = dataset
        .train
        .iter()
        .map(|clip| cache.get_or_compute(clip.id, &clip.video))
        .collect();

    Ok(TrainState {
        alpha,
        classifier,
        adversary,
        epoch: 0,
        telemetry: Vec::new(),
        bounds: UpperBounds {
            a_c: clean_a_c,
            a_a: clean_a_a,
        },
        basis,
        tsm_refs,
    })
}

/// Pretraining, the full adversarial schedule, per-epoch telemetry, and the
/// final held-out evaluation with a fresh-adversary attack.
pub struct RunOutcome {
    pub state: TrainState,
    pub report: EvalReport,
    pub attack: AttackReport,
}

pub fn run(cfg: &TrainConfig, dataset: &Dataset) -> Result<RunOutcome> {
    let state = pretrain(cfg, dataset)?;
    run_with_state(cfg, dataset, state)
}

/// The adversarial schedule and final evaluation, starting from an already
/// pretrained state (lets ablation configs share one pretraining pass).
pub fn run_with_state(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut state: TrainState,
) -> Result<RunOutcome> {
    for _ in 0..cfg.epochs {
        let (l_o, l_c, l_a) = adversarial_epoch(&mut state, dataset, cfg)?;
        let mask = compose_mask(&state.basis, &state.alpha)?;
        let psf = psf_stack(&mask, &cfg.optics)?;
        let private_test = render_private(&dataset.test, &psf, cfg)?;
        let ssim_vals = par::map_range(dataset.test.len(), |i| {
            metrics::video_ssim(&dataset.test[i].video, &private_test[i])
        });
        let ssim_vals = ssim_vals.into_iter().collect::<Result<Vec<_>>>()?;
        let ssim = ssim_vals.iter().sum::<f64>() / ssim_vals.len() as f64;
        let a_c = classifier_accuracy(&state.classifier, &dataset.test, &private_test);
        let (_, cmap) = adversary_cmap(&state.adversary, &dataset.test, &private_test);
        let a_a = cmap.unwrap_or(f64::NAN);
        let p = metrics::harmonic_p(a_c, a_a).ok();
        state.telemetry.push(EpochTelemetry {
            epoch: state.epoch - 1,
            l_o,
            l_c,
            l_a,
            ssim,
            a_c,
            a_a,
            p,
        });
    }

    // held-out evaluation with freshly trained attackers
    let mask = compose_mask(&state.basis, &state.alpha)?;
    let psf = psf_stack(&mask, &cfg.optics)?;
    let private_test = render_private(&dataset.test, &psf, cfg)?;
    let a_c = classifier_accuracy(&state.classifier, &dataset.test, &private_test);
    let ssim_vals = par::map_range(dataset.test.len(), |i| {
        metrics::video_ssim(&dataset.test[i].video, &private_test[i])
    });
    let ssim_vals = ssim_vals.into_iter().collect::<Result<Vec<_>>>()?;
    let ssim = ssim_vals.iter().sum::<f64>() / ssim_vals.len() as f64;

    let distortion = LensDistortion {
        psf,
        sensor: cfg.sensor.clone(),
        seed: mix_seed(&[cfg.seed, TAG_ATTACK]),
    };
    let attack = fresh_adversary_attack(
        &distortion,
        dataset,
        cfg.attack_adversaries,
        mix_seed(&[cfg.seed, TAG_ATTACK, 1]),
        cfg,
    )?;
    let report = EvalReport::new(
        a_c,
        attack.best_cmap,
        ssim,
        attack.best_per_attribute.clone(),
    );
    Ok(RunOutcome {
        state,
        report,
        attack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_dataset;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            optics_n_samples: 32,
            optics: OpticsConfig {
                psf_size: 9,
                // 32-sample pupil needs a long throw to stay focused
                object_distance: 1.6,
                propagation_distance: 1.6,
                ..OpticsConfig::default()
            },
            q: 6,
            model_width: 4,
            pretrain_epochs: 2,
            pretrain_ssim_floor: 0.0,
            alpha_init_std: 0.02,
            epochs: 1,
            attack_adversaries: 2,
            attack_epochs: 2,
            ..TrainConfig::desk_default(seed)
        }
    }

    fn tiny_state(cfg: &TrainConfig, dataset: &Dataset) -> TrainState {
        let grid = grid_for(cfg).unwrap();
        let basis = Arc::new(build_basis(&grid, cfg.q).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_ALPHA_INIT]));
        let normal = Normal::new(0.0, cfg.alpha_init_std).unwrap();
        let alpha =
            ZernikeCoefficients::new((0..cfg.q).map(|_| normal.sample(&mut rng)).collect())
                .unwrap();
        let classifier = ClassifierC::init(cfg.model_width, N_ACTIONS, 11);
        let adversary = AdversaryA::init(cfg.model_width, N_ATTRIBUTES, 12);
        let mut cache = ReferenceTsmCache::new(classifier.clone());
        let tsm_refs = dataset
            .train
            .iter()
            .map(|clip| cache.get_or_compute(clip.id, &clip.video))
            .collect();
        TrainState {
            alpha,
            classifier,
            adversary,
            epoch: 0,
            telemetry: Vec::new(),
            bounds: UpperBounds { a_c: 1.0, a_a: 1.0 },
            basis,
            tsm_refs,
        }
    }

    #[test]
    fn schedule_follows_the_decay_rule() {
        let cfg = TrainConfig::desk_default(0);
        assert_eq!(lr_schedule(0, &cfg), (3e-3, 1e-4, 1e-4));
        assert_eq!(lr_schedule(24, &cfg), (3e-3, 1e-4, 1e-4));
        let (b_o, b_c, b_a) = lr_schedule(25, &cfg);
        assert!((b_o - 3e-4).abs() < 1e-18);
        assert!((b_c - 1e-5).abs() < 1e-19);
        assert!((b_a - 1e-5).abs() < 1e-19);
        let (b_o, _, _) = lr_schedule(26, &cfg);
        assert!((b_o - 3e-5).abs() < 1e-19);

        let one_shot = TrainConfig {
            decay_mode: DecayMode::OneShot,
            ..cfg
        };
        let (b_o, _, _) = lr_schedule(40, &one_shot);
        assert!((b_o - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_learning_rates_leave_parameters_bit_identical() {
        let dataset = make_dataset(24, 8, 3).unwrap();
        let cfg = TrainConfig {
            beta_o: 0.0,
            beta_c: 0.0,
            beta_a: 0.0,
            ..tiny_cfg(3)
        };
        let mut state = tiny_state(&cfg, &dataset);
        let alpha_before = state.alpha.clone();
        let c_before = state.classifier.clone();
        let a_before = state.adversary.clone();
        adversarial_epoch(&mut state, &dataset, &cfg).unwrap();
        assert_eq!(state.alpha, alpha_before);
        assert_eq!(state.classifier, c_before);
        assert_eq!(state.adversary, a_before);
    }

    #[test]
    fn each_substep_freezes_the_other_players() {
        let dataset = make_dataset(24, 8, 4).unwrap();
        // only the optics learns: networks must stay bit-identical
        let cfg = TrainConfig {
            beta_c: 0.0,
            beta_a: 0.0,
            ..tiny_cfg(4)
        };
        let mut state = tiny_state(&cfg, &dataset);
        let c_before = state.classifier.clone();
        let a_before = state.adversary.clone();
        let alpha_before = state.alpha.clone();
        adversarial_epoch(&mut state, &dataset, &cfg).unwrap();
        assert_eq!(state.classifier, c_before);
        assert_eq!(state.adversary, a_before);
        assert_ne!(state.alpha, alpha_before, "optics should move");

        // only the classifier learns
        let cfg = TrainConfig {
            beta_o: 0.0,
            beta_a: 0.0,
            ..tiny_cfg(4)
        };
        let mut state = tiny_state(&cfg, &dataset);
        let alpha_before = state.alpha.clone();
        let a_before = state.adversary.clone();
        let c_before = state.classifier.clone();
        adversarial_epoch(&mut state, &dataset, &cfg).unwrap();
        assert_eq!(state.alpha, alpha_before);
        assert_eq!(state.adversary, a_before);
        assert_ne!(state.classifier, c_before, "classifier should move");

        // only the adversary learns
        let cfg = TrainConfig {
            beta_o: 0.0,
            beta_c: 0.0,
            ..tiny_cfg(4)
        };
        let mut state = tiny_state(&cfg, &dataset);
        let alpha_before = state.alpha.clone();
        let c_before = state.classifier.clone();
        let a_before = state.adversary.clone();
        adversarial_epoch(&mut state, &dataset, &cfg).unwrap();
        assert_eq!(state.alpha, alpha_before);
        assert_eq!(state.classifier, c_before);
        assert_ne!(state.adversary, a_before, "adversary should move");
    }

    #[test]
    fn epochs_are_bit_deterministic() {
        let dataset = make_dataset(24, 8, 5).unwrap();
        let cfg = tiny_cfg(5);
        let mut s1 = tiny_state(&cfg, &dataset);
        let mut s2 = tiny_state(&cfg, &dataset);
        adversarial_epoch(&mut s1, &dataset, &cfg).unwrap();
        adversarial_epoch(&mut s2, &dataset, &cfg).unwrap();
        assert_eq!(s1.alpha, s2.alpha);
        assert_eq!(s1.classifier, s2.classifier);
        assert_eq!(s1.adversary, s2.adversary);
    }

    #[test]
    fn single_optics_step_descends_the_ssim_loss() {
        // gamma1 = gamma2 = 0: a small enough theta_o step cannot increase
        // the batch L(O)
        let dataset = make_dataset(24, 8, 6).unwrap();
        let base = tiny_cfg(6);

        let measure = |state: &TrainState, cfg: &TrainConfig| -> f64 {
            let mask = compose_mask(&state.basis, &state.alpha).unwrap();
            let psf = psf_stack(&mask, &cfg.optics).unwrap();
            let subset: Vec<LabeledClip> = dataset.train.iter().take(8).cloned().collect();
            let private = render_private(&subset, &psf, cfg).unwrap();
            let vals: Vec<f64> = subset
                .iter()
                .zip(&private)
                .map(|(c, p)| metrics::video_ssim(&c.video, p).unwrap())
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };

        let mut found_descent = false;
        for beta in [3e-3, 3e-4, 3e-5] {
            let cfg = TrainConfig {
                gamma1: 0.0,
                gamma2: 0.0,
                beta_c: 0.0,
                beta_a: 0.0,
                beta_o: beta,
                alpha_init_std: 0.25,
                ..base.clone()
            };
            let mut state = tiny_state(&cfg, &dataset);
            let before = measure(&state, &cfg);
            adversarial_epoch(&mut state, &dataset, &cfg).unwrap();
            let after = measure(&state, &cfg);
            if after <= before + 1e-9 {
                found_descent = true;
                break;
            }
        }
        assert!(found_descent, "no step size decreased L(O)");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::desk_default(0);
        cfg.gamma1 = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk_default(0);
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
    }
}
