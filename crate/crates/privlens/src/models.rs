//! Toy differentiable networks: the action classifier C and the attribute
//! estimator A. Both use a per-frame encoder: two strided conv layers, relu,
//! and a 2x2 regional mean-pool flattened to a 32-dim embedding. Regional
//! (rather than global) pooling keeps coarse sprite position in the
//! embedding; a fully translation-invariant embedding would collapse the
//! temporal similarity structure the TSM loss relies on. C mean-pools
//! embeddings over time into a linear action head; A scores attributes per
//! frame and takes the temporal max, matching per-frame attribute labels.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};
use crate::metrics::{tsm, EmbeddingSequence, Tsm};
use crate::sensor::VideoTensor;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Embedding dimension produced by the per-frame encoder.
pub const EMBED_DIM: usize = 32;
/// Spatial pooling grid; conv2 emits EMBED_DIM / POOL_GRID^2 channels.
pub const POOL_GRID: usize = 2;
const CONV2_OUT: usize = EMBED_DIM / (POOL_GRID * POOL_GRID);
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

fn init_tensor(dims: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    if std == 0.0 {
        return Tensor::zeros(dims);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(dims, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
}

/// Two conv layers + relu + global mean-pool; shared by both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub conv1: Tensor, // [width, 3, 3, 3]
    pub bias1: Tensor, // [width]
    pub conv2: Tensor, // [CONV2_OUT, width, 3, 3]
    pub bias2: Tensor, // [CONV2_OUT]
}

impl ConvEncoder {
    pub fn init(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan1 = 3 * KERNEL * KERNEL;
        let fan2 = width * KERNEL * KERNEL;
        ConvEncoder {
            conv1: init_tensor(&[width, 3, KERNEL, KERNEL], (2.0 / fan1 as f64).sqrt(), rng),
            bias1: Tensor::zeros(&[width]),
            conv2: init_tensor(
                &[CONV2_OUT, width, KERNEL, KERNEL],
                (2.0 / fan2 as f64).sqrt(),
                rng,
            ),
            bias2: Tensor::zeros(&[CONV2_OUT]),
        }
    }

    pub fn width(&self) -> usize {
        self.conv1.dims()[0]
    }
}

/// Node handles for one encoder's parameters on a tape.
pub struct EncoderLeaves {
    pub conv1: NodeId,
    pub bias1: NodeId,
    pub conv2: NodeId,
    pub bias2: NodeId,
}

fn encoder_leaves(tape: &mut Tape, enc: &ConvEncoder) -> EncoderLeaves {
    EncoderLeaves {
        conv1: tape.leaf(enc.conv1.clone()),
        bias1: tape.leaf(enc.bias1.clone()),
        conv2: tape.leaf(enc.conv2.clone()),
        bias2: tape.leaf(enc.bias2.clone()),
    }
}

/// `[3,h,w] frame -> [EMBED_DIM]` embedding.
pub fn encode_frame_graph(tape: &mut Tape, leaves: &EncoderLeaves, frame: NodeId) -> NodeId {
    let x = tape.conv2d(frame, leaves.conv1, STRIDE, PAD);
    let x = tape.bias_add(x, leaves.bias1);
    let x = tape.relu(x);
    let x = tape.conv2d(x, leaves.conv2, STRIDE, PAD);
    let x = tape.bias_add(x, leaves.bias2);
    let x = tape.relu(x);
    tape.region_mean_pool(x, POOL_GRID)
}

/// Action classifier with parameters theta_c.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierC {
    pub encoder: ConvEncoder,
    pub head_w: Tensor, // [k_classes, EMBED_DIM]
    pub head_b: Tensor, // [k_classes]
}

impl ClassifierC {
    pub fn init(width: usize, k_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClassifierC {
            encoder: ConvEncoder::init(width, &mut rng),
            head_w: init_tensor(
                &[k_classes, EMBED_DIM],
                (1.0 / EMBED_DIM as f64).sqrt(),
                &mut rng,
            ),
            head_b: Tensor::zeros(&[k_classes]),
        }
    }

    pub fn zeros(width: usize, k_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Self::init(width, k_classes, 0);
        c.encoder.conv1 = init_tensor(c.encoder.conv1.dims(), 0.0, &mut rng);
        c.encoder.conv2 = init_tensor(c.encoder.conv2.dims(), 0.0, &mut rng);
        c.head_w = Tensor::zeros(c.head_w.dims());
        c
    }

    pub fn k_classes(&self) -> usize {
        self.head_w.dims()[0]
    }

    /// Parameter tensors in checkpoint order.
    pub fn layer_names() -> [&'static str; 6] {
        ["conv1", "bias1", "conv2", "bias2", "head_w", "head_b"]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.encoder.conv1,
            &self.encoder.bias1,
            &self.encoder.conv2,
            &self.encoder.bias2,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.encoder.conv1,
            &mut self.encoder.bias1,
            &mut self.encoder.conv2,
            &mut self.encoder.bias2,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 6 {
            return Err(Error::shape("classifier checkpoint needs 6 tensors"));
        }
        let mut it = tensors.into_iter();
        Ok(ClassifierC {
            encoder: ConvEncoder {
                conv1: it.next().unwrap(),
                bias1: it.next().unwrap(),
                conv2: it.next().unwrap(),
                bias2: it.next().unwrap(),
            },
            head_w: it.next().unwrap(),
            head_b: it.next().unwrap(),
        })
    }
}

/// Handles for C's forward pass on a tape.
pub struct CGraph {
    pub leaves: Vec<NodeId>,
    pub logits: NodeId,
    pub embeddings: Vec<NodeId>,
}

/// Records C's forward pass over per-frame `[3,h,w]` nodes.
pub fn forward_c_graph(tape: &mut Tape, c: &ClassifierC, frames: &[NodeId]) -> CGraph {
    let enc = encoder_leaves(tape, &c.encoder);
    let head_w = tape.leaf(c.head_w.clone());
    let head_b = tape.leaf(c.head_b.clone());
    let embeddings: Vec<NodeId> = frames
        .iter()
        .map(|&f| encode_frame_graph(tape, &enc, f))
        .collect();
    let pooled_sum = tape.add_n(&embeddings);
    let pooled = tape.scale(pooled_sum, 1.0 / frames.len() as f64);
    let projected = tape.matmul(head_w, pooled);
    let logits = tape.add(projected, head_b);
    CGraph {
        leaves: vec![enc.conv1, enc.bias1, enc.conv2, enc.bias2, head_w, head_b],
        logits,
        embeddings,
    }
}

/// Attribute estimator with parameters theta_a.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryA {
    pub encoder: ConvEncoder,
    pub head_w: Tensor, // [m_attributes, EMBED_DIM]
    pub head_b: Tensor, // [m_attributes]
}

impl AdversaryA {
    pub fn init(width: usize, m_attributes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AdversaryA {
            encoder: ConvEncoder::init(width, &mut rng),
            head_w: init_tensor(
                &[m_attributes, EMBED_DIM],
                (1.0 / EMBED_DIM as f64).sqrt(),
                &mut rng,
            ),
            head_b: Tensor::zeros(&[m_attributes]),
        }
    }

    pub fn m_attributes(&self) -> usize {
        self.head_w.dims()[0]
    }

    pub fn layer_names() -> [&'static str; 6] {
        ["conv1", "bias1", "conv2", "bias2", "head_w", "head_b"]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.encoder.conv1,
            &self.encoder.bias1,
            &self.encoder.conv2,
            &self.encoder.bias2,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.encoder.conv1,
            &mut self.encoder.bias1,
            &mut self.encoder.conv2,
            &mut self.encoder.bias2,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 6 {
            return Err(Error::shape("adversary checkpoint needs 6 tensors"));
        }
        let mut it = tensors.into_iter();
        Ok(AdversaryA {
            encoder: ConvEncoder {
                conv1: it.next().unwrap(),
                bias1: it.next().unwrap(),
                conv2: it.next().unwrap(),
                bias2: it.next().unwrap(),
            },
            head_w: it.next().unwrap(),
            head_b: it.next().unwrap(),
        })
    }
}

/// Handles for A's forward pass on a tape.
pub struct AGraph {
    pub leaves: Vec<NodeId>,
    pub logits: NodeId,
}

/// Records A's forward pass: per-frame attribute logits, temporal max.
pub fn forward_a_graph(tape: &mut Tape, a: &AdversaryA, frames: &[NodeId]) -> AGraph {
    let enc = encoder_leaves(tape, &a.encoder);
    let head_w = tape.leaf(a.head_w.clone());
    let head_b = tape.leaf(a.head_b.clone());
    let frame_logits: Vec<NodeId> = frames
        .iter()
        .map(|&f| {
            let e = encode_frame_graph(tape, &enc, f);
            let projected = tape.matmul(head_w, e);
            tape.add(projected, head_b)
        })
        .collect();
    let logits = tape.max_rows(&frame_logits);
    AGraph {
        leaves: vec![enc.conv1, enc.bias1, enc.conv2, enc.bias2, head_w, head_b],
        logits,
    }
}

fn frame_leaves(tape: &mut Tape, video: &VideoTensor) -> Vec<NodeId> {
    video
        .frames()
        .iter()
        .map(|f| tape.leaf(f.to_tensor()))
        .collect()
}

/// Value-level forward of C: action logits plus per-frame embeddings.
pub fn forward_c(c: &ClassifierC, video: &VideoTensor) -> (Vec<f64>, EmbeddingSequence) {
    let mut tape = Tape::new();
    let frames = frame_leaves(&mut tape, video);
    let graph = forward_c_graph(&mut tape, c, &frames);
    let logits = tape.value(graph.logits).data().to_vec();
    let mut emb = Vec::with_capacity(video.len() * EMBED_DIM);
    for &e in &graph.embeddings {
        emb.extend_from_slice(tape.value(e).data());
    }
    let embeddings =
        EmbeddingSequence::new(video.len(), EMBED_DIM, emb).expect("finite embeddings");
    (logits, embeddings)
}

/// Value-level forward of A: one logit per binary attribute.
pub fn forward_a(a: &AdversaryA, video: &VideoTensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let frames = frame_leaves(&mut tape, video);
    let graph = forward_a_graph(&mut tape, a, &frames);
    tape.value(graph.logits).data().to_vec()
}

/// Reference TSMs from a frozen pretrained classifier on clean clips,
/// cached per clip id.
pub struct ReferenceTsmCache {
    classifier: ClassifierC,
    cache: HashMap<u64, Arc<Tsm>>,
}

impl ReferenceTsmCache {
    pub fn new(pretrained: ClassifierC) -> Self {
        ReferenceTsmCache {
            classifier: pretrained,
            cache: HashMap::new(),
        }
    }

    pub fn classifier(&self) -> &ClassifierC {
        &self.classifier
    }

    pub fn get_or_compute(&mut self, clip_id: u64, clean: &VideoTensor) -> Arc<Tsm> {
        if let Some(hit) = self.cache.get(&clip_id) {
            return hit.clone();
        }
        let computed = Arc::new(reference_tsm(clean, &self.classifier));
        self.cache.insert(clip_id, computed.clone());
        computed
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

/// TSM of a clean clip under a frozen classifier.
pub fn reference_tsm(clean: &VideoTensor, pretrained_c: &ClassifierC) -> Tsm {
    let (_, embeddings) = forward_c(pretrained_c, clean);
    tsm(&embeddings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::sensor::ImageTensor;
    use rand::Rng;

    fn random_video(t: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| {
                let planes = (0..3 * h * w).map(|_| rng.gen_range(0.1..0.9)).collect();
                ImageTensor::new(h, w, planes).unwrap()
            })
            .collect();
        VideoTensor::new(frames, 10.0).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits_and_uniform_softmax() {
        let c = ClassifierC::zeros(4, 4);
        let video = random_video(3, 16, 16, 1);
        let (logits, _) = forward_c(&c, &video);
        assert!(logits.iter().all(|&v| v == 0.0));
        let ce = crate::metrics::softmax_ce(&logits, 1).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_video_has_identical_embeddings_and_zero_tsm() {
        let c = ClassifierC::init(4, 4, 7);
        let frame = random_video(1, 16, 16, 2).frames()[0].clone();
        let video = VideoTensor::new(vec![frame; 5], 10.0).unwrap();
        let (_, emb) = forward_c(&c, &video);
        for t in 1..5 {
            assert_eq!(emb.frame(t), emb.frame(0));
        }
        let m = tsm(&emb);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adversary_zero_weights_and_single_frame_identity() {
        let mut a = AdversaryA::init(4, 5, 3);
        a.encoder.conv1 = Tensor::zeros(a.encoder.conv1.dims());
        a.encoder.conv2 = Tensor::zeros(a.encoder.conv2.dims());
        a.head_w = Tensor::zeros(a.head_w.dims());
        let video = random_video(4, 16, 16, 4);
        let logits = forward_a(&a, &video);
        assert!(logits.iter().all(|&v| v == 0.0));
        // probability 0.5 per attribute at zero logits
        assert!(logits
            .iter()
            .all(|&v| (1.0 / (1.0 + (-v).exp()) - 0.5).abs() < 1e-15));

        // single-frame aggregation is the identity
        let a = AdversaryA::init(4, 5, 5);
        let single = random_video(1, 16, 16, 6);
        let max_logits = forward_a(&a, &single);
        let mut tape = Tape::new();
        let frames = frame_leaves(&mut tape, &single);
        let enc = encoder_leaves(&mut tape, &a.encoder);
        let head_w = tape.leaf(a.head_w.clone());
        let head_b = tape.leaf(a.head_b.clone());
        let e = encode_frame_graph(&mut tape, &enc, frames[0]);
        let proj = tape.matmul(head_w, e);
        let frame_logits = tape.add(proj, head_b);
        assert_eq!(max_logits, tape.value(frame_logits).data());
    }

    #[test]
    fn forward_is_deterministic_and_parameter_continuous() {
        let c = ClassifierC::init(6, 4, 11);
        let video = random_video(4, 16, 16, 12);
        let (l1, _) = forward_c(&c, &video);
        let (l2, _) = forward_c(&c, &video);
        assert_eq!(l1, l2);

        let mut perturbed = c.clone();
        let eps = 1e-6;
        for t in perturbed.tensors_mut() {
            for v in t.data_mut() {
                *v += eps;
            }
        }
        let (l3, _) = forward_c(&perturbed, &video);
        let max_change = l1
            .iter()
            .zip(&l3)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_change < 1e-2, "logit jump {max_change} for eps {eps}");
        assert!(max_change > 0.0);
    }

    #[test]
    fn classifier_gradients_match_finite_differences_on_8x8() {
        let c = ClassifierC::init(3, 4, 20);
        let video = random_video(2, 8, 8, 21);
        let label = 2usize;

        let run = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut model = c.clone();
            let mut offset = 0;
            for t in model.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
            let mut tape = Tape::new();
            let frames = frame_leaves(&mut tape, &video);
            let graph = forward_c_graph(&mut tape, &model, &frames);
            let loss = tape.softmax_ce(graph.logits, label);
            tape.backward(loss).unwrap();
            let mut grad = Vec::new();
            for &leaf in &graph.leaves {
                grad.extend_from_slice(tape.grad(leaf).unwrap().data());
            }
            (tape.scalar_value(loss), grad)
        };

        let flat: Vec<f64> = c.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let (_, analytic) = run(&flat);
        let f = |x: &[f64]| -> crate::Result<f64> { Ok(run(x).0) };
        let worst = grad_check(f, &flat, &analytic, 1e-4).unwrap();
        assert!(worst < 1e-4, "classifier gradient error {worst}");
    }

    #[test]
    fn adversary_gradients_match_finite_differences_on_8x8() {
        let a = AdversaryA::init(3, 5, 30);
        let video = random_video(2, 8, 8, 31);
        let targets = Arc::new(vec![1.0, 0.0, 1.0, 0.0, 1.0]);

        let run = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut model = a.clone();
            let mut offset = 0;
            for t in model.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
            let mut tape = Tape::new();
            let frames = frame_leaves(&mut tape, &video);
            let graph = forward_a_graph(&mut tape, &model, &frames);
            let loss = tape.sigmoid_ce(graph.logits, targets.clone());
            tape.backward(loss).unwrap();
            let mut grad = Vec::new();
            for &leaf in &graph.leaves {
                grad.extend_from_slice(tape.grad(leaf).unwrap().data());
            }
            (tape.scalar_value(loss), grad)
        };

        let flat: Vec<f64> = a.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let (_, analytic) = run(&flat);
        let f = |x: &[f64]| -> crate::Result<f64> { Ok(run(x).0) };
        let worst = grad_check(f, &flat, &analytic, 1e-4).unwrap();
        assert!(worst < 1e-4, "adversary gradient error {worst}");
    }

    #[test]
    fn reference_tsm_static_and_periodic_structure() {
        let c = ClassifierC::init(4, 4, 40);
        // static clip: zero matrix
        let frame = random_video(1, 16, 16, 41).frames()[0].clone();
        let static_clip = VideoTensor::new(vec![frame; 4], 10.0).unwrap();
        let m = reference_tsm(&static_clip, &c);
        assert!(m.data().iter().all(|&v| v == 0.0));

        // alternating frames: zero on even offsets, negative on odd offsets
        let a = random_video(1, 16, 16, 42).frames()[0].clone();
        let b = random_video(1, 16, 16, 43).frames()[0].clone();
        let periodic = VideoTensor::new(vec![a.clone(), b.clone(), a, b], 10.0).unwrap();
        let m = reference_tsm(&periodic, &c);
        for i in 0..4 {
            for j in 0..4 {
                if (i as i64 - j as i64).rem_euclid(2) == 0 {
                    assert_eq!(m.at(i, j), 0.0);
                } else {
                    assert!(m.at(i, j) < 0.0);
                }
            }
        }

        // cache returns the identical matrix
        let mut cache = ReferenceTsmCache::new(c);
        let first = cache.get_or_compute(7, &periodic);
        let second = cache.get_or_compute(7, &periodic);
        assert_eq!(first.data(), second.data());
        assert_eq!(cache.len(), 1);
    }
}
