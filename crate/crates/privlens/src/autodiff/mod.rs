//! Reverse-mode differentiation tape.
//!
//! Nodes hold real or complex tensors; recording an operation stores its
//! forward value and enough structure to replay the adjoint. Complex nodes
//! carry Wirtinger-style adjoints laid out as `dL/dRe + i dL/dIm`, so linear
//! complex maps pull back through their conjugate transpose (the DFT adjoint
//! is the inverse transform) and `|z|^2` pulls back as `2 g z`.
//!
//! Shape errors are raised at record time (the builders panic with a
//! descriptive message). One tape serves one training sub-step; independent
//! steps use independent tapes.

mod check;
mod graphs;

pub use check::{adjoint_dot_error, grad_check};
pub use graphs::{acquire_frame_graph, psf_kernel_graph, ssim_image_graph, PsfGraph};

use std::sync::Arc;

use num_complex::Complex64;

use crate::fft2::{fft2, ifft2};
use crate::optics::crop_center;
use crate::tensor::{CTensor, Tensor};
use crate::zernike::ZernikeBasis;
use crate::{Error, Result};

/// Gradient of `clamp(x, 0, 1)` passes only strictly inside the epsilon
/// interior of the unit interval (straight-through), zero elsewhere.
pub const CLAMP_INTERIOR_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub enum Payload {
    R(Tensor),
    C(CTensor),
}

impl Payload {
    fn zeros_like(&self) -> Payload {
        match self {
            Payload::R(t) => Payload::R(Tensor::zeros(t.dims())),
            Payload::C(t) => Payload::C(CTensor::zeros(t.dims())),
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    AddConst(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    DivByScalar { x: NodeId, s: NodeId },
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Clamp01(NodeId),
    BasisCombine(NodeId, Arc<ZernikeBasis>),
    PhaseExp(NodeId, f64),
    CmulConst(NodeId, Arc<CTensor>),
    Dft2(NodeId),
    Idft2(NodeId),
    ComplexFromReal(NodeId),
    RealPart(NodeId),
    MagnitudeSq(NodeId),
    EmbedWrap { k: NodeId, h: usize, w: usize },
    CropCenter(NodeId, usize),
    WindowFilter(NodeId, Arc<Vec<f64>>),
    Conv2dSpatial {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    BiasAdd(NodeId, NodeId),
    SpatialMean(NodeId),
    RegionMeanPool { x: NodeId, grid: usize },
    Stack(Vec<NodeId>),
    MaxRows(Vec<NodeId>),
    SoftmaxCe(NodeId, usize),
    SigmoidCe(NodeId, Arc<Vec<f64>>),
    SquaredDistance(NodeId, NodeId),
}

struct Node {
    value: Payload,
    grad: Option<Payload>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Payload, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Payload::R(t) => t,
            Payload::C(_) => panic!("node {} is complex", id.0),
        }
    }

    pub fn cvalue(&self, id: NodeId) -> &CTensor {
        match &self.nodes[id.0].value {
            Payload::C(t) => t,
            Payload::R(_) => panic!("node {} is real", id.0),
        }
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert!(t.len() == 1, "node {} is not a scalar", id.0);
        t.data()[0]
    }

    /// Accumulated real gradient of a node (after `backward`).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].grad {
            Some(Payload::R(t)) => Some(t),
            Some(Payload::C(_)) => panic!("node {} has a complex gradient", id.0),
            None => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Payload::R(value), Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn leaf_complex(&mut self, value: CTensor) -> NodeId {
        self.push(Payload::C(value), Op::Leaf)
    }

    // ---- elementwise real -------------------------------------------

    fn same_dims(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.value(a).dims(),
            self.value(b).dims(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_dims(a, b, "add");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Add(a, b),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_dims(a, b, "sub");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Sub(a, b),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_dims(a, b, "mul");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Mul(a, b),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_dims(a, b, "div");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Div(a, b),
        )
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "add_n needs at least one term");
        let dims = self.value(terms[0]).dims().to_vec();
        for &t in terms {
            assert_eq!(self.value(t).dims(), dims.as_slice(), "add_n shape mismatch");
        }
        let mut acc = Tensor::zeros(&dims);
        for &t in terms {
            acc.add_in_place(self.value(t));
        }
        self.push(Payload::R(acc), Op::AddN(terms.to_vec()))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| -x).collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Neg(a),
        )
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Scale(a, s),
        )
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Offset(a),
        )
    }

    pub fn add_const(&mut self, a: NodeId, c: Arc<Tensor>) -> NodeId {
        assert_eq!(self.value(a).dims(), c.dims(), "add_const shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x + y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::AddConst(a),
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(Payload::R(Tensor::scalar(v)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = t.sum() / t.len() as f64;
        self.push(Payload::R(Tensor::scalar(v)), Op::Mean(a))
    }

    /// `x * (1/s)` for a scalar node `s`; matches the optics normalization
    /// (multiply by reciprocal) bit for bit.
    pub fn div_by_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert!(self.value(s).len() == 1, "div_by_scalar needs a scalar");
        let inv = 1.0 / self.scalar_value(s);
        let data = self.value(x).data().iter().map(|v| v * inv).collect();
        let dims = self.value(x).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::DivByScalar { x, s },
        )
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        assert_eq!(ad.len(), 2, "matmul lhs must be rank 2");
        let (m, k) = (ad[0], ad[1]);
        let (n, out_dims) = match bd.len() {
            2 => {
                assert_eq!(bd[0], k, "matmul inner dims differ");
                (bd[1], vec![m, bd[1]])
            }
            1 => {
                assert_eq!(bd[0], k, "matmul inner dims differ");
                (1, vec![m])
            }
            _ => panic!("matmul rhs must be rank 1 or 2"),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        self.push(
            Payload::R(Tensor::from_vec(&out_dims, out).expect("sized above")),
            Op::Matmul(a, b),
        )
    }

    // ---- nonlinearities ----------------------------------------------

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Relu(a),
        )
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| crate::sensor::clamp01(x))
            .collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::Clamp01(a),
        )
    }

    // ---- optics chain --------------------------------------------------

    /// `phi = sum_j alpha_j Z_j` for a coefficient vector node.
    pub fn basis_combine(&mut self, alpha: NodeId, basis: Arc<ZernikeBasis>) -> NodeId {
        let q = basis.q();
        assert_eq!(self.value(alpha).dims(), [q], "alpha length != basis q");
        let n = basis.grid().n_samples();
        let mut phi = Tensor::zeros(&[n, n]);
        for (a, map) in self.value(alpha).data().iter().zip(basis.maps()) {
            phi.axpy_in_place(*a, map);
        }
        self.push(Payload::R(phi), Op::BasisCombine(alpha, basis))
    }

    /// `exp(i * s * x)` elementwise, real -> complex.
    pub fn phase_exp(&mut self, a: NodeId, s: f64) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| Complex64::from_polar(1.0, s * x))
            .collect();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Payload::C(CTensor::from_vec(&dims, data).expect("same dims")),
            Op::PhaseExp(a, s),
        )
    }

    pub fn cmul_const(&mut self, z: NodeId, c: Arc<CTensor>) -> NodeId {
        assert_eq!(self.cvalue(z).dims(), c.dims(), "cmul_const shape mismatch");
        let data = self
            .cvalue(z)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        let dims = self.cvalue(z).dims().to_vec();
        self.push(
            Payload::C(CTensor::from_vec(&dims, data).expect("same dims")),
            Op::CmulConst(z, c),
        )
    }

    pub fn dft2(&mut self, z: NodeId) -> NodeId {
        let out = fft2(self.cvalue(z));
        self.push(Payload::C(out), Op::Dft2(z))
    }

    pub fn idft2(&mut self, z: NodeId) -> NodeId {
        let out = ifft2(self.cvalue(z));
        self.push(Payload::C(out), Op::Idft2(z))
    }

    pub fn complex_from_real(&mut self, a: NodeId) -> NodeId {
        let out = CTensor::from_real(self.value(a));
        self.push(Payload::C(out), Op::ComplexFromReal(a))
    }

    pub fn real_part(&mut self, z: NodeId) -> NodeId {
        let out = self.cvalue(z).real_part();
        self.push(Payload::R(out), Op::RealPart(z))
    }

    pub fn magnitude_sq(&mut self, z: NodeId) -> NodeId {
        let data = self.cvalue(z).data().iter().map(|c| c.norm_sqr()).collect();
        let dims = self.cvalue(z).dims().to_vec();
        self.push(
            Payload::R(Tensor::from_vec(&dims, data).expect("same dims")),
            Op::MagnitudeSq(z),
        )
    }

    /// Embeds a small kernel in an `h x w` field with its center wrapped to
    /// (0,0); the layout expected by circular frequency-domain convolution.
    pub fn embed_wrap(&mut self, k: NodeId, h: usize, w: usize) -> NodeId {
        let kd = self.value(k).dims().to_vec();
        assert_eq!(kd.len(), 2, "embed_wrap expects a rank-2 kernel");
        assert!(kd[0] <= h && kd[1] <= w, "kernel larger than field");
        let out = crate::sensor::embed_kernel(self.value(k), h, w);
        self.push(Payload::R(out), Op::EmbedWrap { k, h, w })
    }

    pub fn crop_center(&mut self, a: NodeId, size: usize) -> NodeId {
        let dims = self.value(a).dims();
        assert_eq!(dims.len(), 2, "crop_center expects rank 2");
        assert!(size <= dims[0] && size % 2 == 1, "bad crop size");
        let out = crop_center(self.value(a), size);
        self.push(Payload::R(out), Op::CropCenter(a, size))
    }

    /// Separable valid filtering with a symmetric window (SSIM windows).
    pub fn window_filter(&mut self, a: NodeId, window: Arc<Vec<f64>>) -> NodeId {
        let dims = self.value(a).dims().to_vec();
        assert_eq!(dims.len(), 2, "window_filter expects rank 2");
        let k = window.len();
        assert!(dims[0] >= k && dims[1] >= k, "image smaller than window");
        let out = crate::metrics::separable_valid_filter(
            self.value(a).data(),
            dims[0],
            dims[1],
            &window,
        );
        let out_dims = [dims[0] - k + 1, dims[1] - k + 1];
        self.push(
            Payload::R(Tensor::from_vec(&out_dims, out).expect("sized above")),
            Op::WindowFilter(a, window),
        )
    }

    /// Zero-padded strided spatial convolution:
    /// input `[cin, h, w]`, kernel `[cout, cin, k, k]` -> `[cout, oh, ow]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> NodeId {
        let id = self.value(input).dims().to_vec();
        let kd = self.value(kernel).dims().to_vec();
        assert_eq!(id.len(), 3, "conv2d input must be [cin,h,w]");
        assert_eq!(kd.len(), 4, "conv2d kernel must be [cout,cin,k,k]");
        assert_eq!(id[0], kd[1], "conv2d channel mismatch");
        assert_eq!(kd[2], kd[3], "conv2d kernel must be square");
        let (cin, h, w) = (id[0], id[1], id[2]);
        let (cout, k) = (kd[0], kd[2]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel too large");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let x = self.value(input).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; cout * oh * ow];
        // phase-split the input along columns so the inner loops walk
        // contiguous slices regardless of the stride
        let (phases, pw) = split_phases(x, cin, h, w, stride);
        for co in 0..cout {
            for ci in 0..cin {
                for i in 0..k {
                    for j in 0..k {
                        let kval = kv[((co * cin + ci) * k + i) * k + j];
                        if kval == 0.0 {
                            continue;
                        }
                        let (oc_lo, oc_hi) = valid_range(ow, w, stride, pad, j);
                        if oc_lo >= oc_hi {
                            continue;
                        }
                        let off = j as isize - pad as isize;
                        let p = off.rem_euclid(stride as isize) as usize;
                        let q = (off - p as isize) / stride as isize;
                        let tw = pw[p];
                        let ph = &phases[p];
                        for or in 0..oh {
                            let r = (or * stride + i) as isize - pad as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let prow = ((ci * h + r as usize) * tw) as isize;
                            let src_lo = (prow + oc_lo as isize + q) as usize;
                            let src_hi = (prow + oc_hi as isize + q) as usize;
                            let orow = (co * oh + or) * ow;
                            let dst = &mut out[orow + oc_lo..orow + oc_hi];
                            let src = &ph[src_lo..src_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += kval * s;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Payload::R(Tensor::from_vec(&[cout, oh, ow], out).expect("sized above")),
            Op::Conv2dSpatial {
                input,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// `[c,h,w] + [c]` broadcast over the spatial dims.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 3, "bias_add input must be [c,h,w]");
        assert_eq!(self.value(b).dims(), [xd[0]], "bias length mismatch");
        let hw = xd[1] * xd[2];
        let bv = self.value(b).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i / hw])
            .collect();
        self.push(
            Payload::R(Tensor::from_vec(&xd, data).expect("same dims")),
            Op::BiasAdd(x, b),
        )
    }

    /// `[c,h,w] -> [c]`, mean over the spatial dims.
    pub fn spatial_mean(&mut self, x: NodeId) -> NodeId {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 3, "spatial_mean input must be [c,h,w]");
        let hw = (xd[1] * xd[2]) as f64;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..xd[0])
            .map(|c| {
                xv[c * xd[1] * xd[2]..(c + 1) * xd[1] * xd[2]]
                    .iter()
                    .sum::<f64>()
                    / hw
            })
            .collect();
        self.push(
            Payload::R(Tensor::from_vec(&[xd[0]], out).expect("sized above")),
            Op::SpatialMean(x),
        )
    }

    /// `[c,h,w] -> [c*grid*grid]`: mean over each cell of a grid x grid
    /// partition of the spatial dims, flattened channel-major.
    pub fn region_mean_pool(&mut self, x: NodeId, grid: usize) -> NodeId {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 3, "region_mean_pool input must be [c,h,w]");
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        assert!(
            grid >= 1 && h % grid == 0 && w % grid == 0,
            "spatial dims must divide the pooling grid"
        );
        let (rh, rw) = (h / grid, w / grid);
        let cell = (rh * rw) as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * grid * grid];
        for ch in 0..c {
            for gr in 0..grid {
                for gc in 0..grid {
                    let mut acc = 0.0;
                    for r in 0..rh {
                        for col in 0..rw {
                            acc += xv[(ch * h + gr * rh + r) * w + gc * rw + col];
                        }
                    }
                    out[(ch * grid + gr) * grid + gc] = acc / cell;
                }
            }
        }
        let len = c * grid * grid;
        self.push(
            Payload::R(Tensor::from_vec(&[len], out).expect("sized above")),
            Op::RegionMeanPool { x, grid },
        )
    }

    /// Stacks k same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack needs at least one part");
        let dims = self.value(parts[0]).dims().to_vec();
        let mut out_dims = vec![parts.len()];
        out_dims.extend_from_slice(&dims);
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).dims(), dims.as_slice(), "stack shape mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Payload::R(Tensor::from_vec(&out_dims, data).expect("sized above")),
            Op::Stack(parts.to_vec()),
        )
    }

    /// Elementwise max over k same-shape vectors (temporal max aggregation).
    /// Ties route the gradient to the earliest operand.
    pub fn max_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "max_rows needs at least one part");
        let dims = self.value(parts[0]).dims().to_vec();
        for &p in parts {
            assert_eq!(self.value(p).dims(), dims.as_slice(), "max_rows shape mismatch");
        }
        let mut out = self.value(parts[0]).data().to_vec();
        for &p in &parts[1..] {
            for (o, &v) in out.iter_mut().zip(self.value(p).data()) {
                if v > *o {
                    *o = v;
                }
            }
        }
        self.push(
            Payload::R(Tensor::from_vec(&dims, out).expect("same dims")),
            Op::MaxRows(parts.to_vec()),
        )
    }

    // ---- losses --------------------------------------------------------

    pub fn softmax_ce(&mut self, logits: NodeId, label: usize) -> NodeId {
        let v = crate::metrics::softmax_ce(self.value(logits).data(), label)
            .expect("finite logits and valid label at record time");
        self.push(Payload::R(Tensor::scalar(v)), Op::SoftmaxCe(logits, label))
    }

    pub fn sigmoid_ce(&mut self, logits: NodeId, targets: Arc<Vec<f64>>) -> NodeId {
        let lv = self.value(logits).data();
        assert_eq!(lv.len(), targets.len(), "sigmoid_ce target mismatch");
        let bools: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
        let v = crate::metrics::sigmoid_ce(lv, &bools).expect("finite logits");
        self.push(Payload::R(Tensor::scalar(v)), Op::SigmoidCe(logits, targets))
    }

    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_dims(a, b, "squared_distance");
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Payload::R(Tensor::scalar(v)), Op::SquaredDistance(a, b))
    }

    // ---- backward ------------------------------------------------------

    fn accumulate_real(&mut self, id: NodeId, delta: &Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(Payload::R(g)) => g.add_in_place(delta),
            None => node.grad = Some(Payload::R(delta.clone())),
            Some(Payload::C(_)) => unreachable!("real node with complex grad"),
        }
    }

    fn accumulate_complex(&mut self, id: NodeId, delta: &CTensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(Payload::C(g)) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(Payload::C(delta.clone())),
            Some(Payload::R(_)) => unreachable!("complex node with real grad"),
        }
    }

    /// Backpropagates from a scalar loss node with seed 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward before forward: unknown node"));
        }
        match &self.nodes[loss.0].value {
            Payload::R(t) if t.len() == 1 => {}
            _ => return Err(Error::invalid("loss node must be a real scalar")),
        }
        self.backward_multi(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backpropagates from explicitly seeded real nodes (vector-Jacobian
    /// chaining across tapes).
    pub fn backward_multi(&mut self, seeds: &[(NodeId, Tensor)]) -> Result<()> {
        if seeds.is_empty() {
            return Err(Error::invalid("backward needs at least one seed"));
        }
        let mut top = 0usize;
        for (id, seed) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(Error::invalid("seed node out of range"));
            }
            if self.value(*id).dims() != seed.dims() {
                return Err(Error::shape("seed shape mismatch"));
            }
            self.accumulate_real(*id, seed);
            top = top.max(id.0);
        }
        for i in (0..=top).rev() {
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.apply_adjoint(NodeId(i), &op, &grad);
        }
        Ok(())
    }

    fn apply_adjoint(&mut self, id: NodeId, op: &Op, grad: &Payload) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = real(grad).clone();
                self.accumulate_real(*a, &g);
                self.accumulate_real(*b, &g);
            }
            Op::Sub(a, b) => {
                let g = real(grad).clone();
                self.accumulate_real(*a, &g);
                let mut neg = g;
                neg.scale_in_place(-1.0);
                self.accumulate_real(*b, &neg);
            }
            Op::Mul(a, b) => {
                let g = real(grad);
                let da = elementwise(g, self.value(*b), |x, y| x * y);
                let db = elementwise(g, self.value(*a), |x, y| x * y);
                self.accumulate_real(*a, &da);
                self.accumulate_real(*b, &db);
            }
            Op::Div(a, b) => {
                let g = real(grad);
                let bv = self.value(*b).clone();
                let yv = self.value(id).clone();
                let da = elementwise(g, &bv, |x, y| x / y);
                let mut db = elementwise(g, &yv, |x, y| x * y);
                for (v, b) in db.data_mut().iter_mut().zip(bv.data()) {
                    *v = -*v / b;
                }
                self.accumulate_real(*a, &da);
                self.accumulate_real(*b, &db);
            }
            Op::AddN(terms) => {
                let g = real(grad).clone();
                for &t in terms {
                    self.accumulate_real(t, &g);
                }
            }
            Op::Neg(a) => {
                let mut g = real(grad).clone();
                g.scale_in_place(-1.0);
                self.accumulate_real(*a, &g);
            }
            Op::Scale(a, s) => {
                let mut g = real(grad).clone();
                g.scale_in_place(*s);
                self.accumulate_real(*a, &g);
            }
            Op::Offset(a) => {
                let g = real(grad).clone();
                self.accumulate_real(*a, &g);
            }
            Op::AddConst(a) => {
                let g = real(grad).clone();
                self.accumulate_real(*a, &g);
            }
            Op::Sum(a) => {
                let g = real(grad).as_scalar();
                let dims = self.value_dims(*a);
                let mut d = Tensor::zeros(&dims);
                for v in d.data_mut() {
                    *v = g;
                }
                self.accumulate_real(*a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let g = real(grad).as_scalar() / n;
                let dims = self.value_dims(*a);
                let mut d = Tensor::zeros(&dims);
                for v in d.data_mut() {
                    *v = g;
                }
                self.accumulate_real(*a, &d);
            }
            Op::DivByScalar { x, s } => {
                let g = real(grad);
                let sv = self.scalar_value(*s);
                let inv = 1.0 / sv;
                let mut dx = g.clone();
                dx.scale_in_place(inv);
                // d/ds (x/s) = -x/s^2 = -y/s
                let ds = -inv * g.dot(self.value(id));
                self.accumulate_real(*x, &dx);
                self.accumulate_real(*s, &Tensor::scalar(ds));
            }
            Op::Matmul(a, b) => {
                let g = real(grad);
                let ad = self.value(*a).dims().to_vec();
                let bd = self.value(*b).dims().to_vec();
                let (m, k) = (ad[0], ad[1]);
                let n = if bd.len() == 2 { bd[1] } else { 1 };
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let gv = g.data().to_vec();
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gv[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += av[i * k + p] * gv[i * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                self.accumulate_real(*a, &Tensor::from_vec(&ad, da).expect("sized"));
                self.accumulate_real(*b, &Tensor::from_vec(&bd, db).expect("sized"));
            }
            Op::Relu(a) => {
                let g = real(grad);
                let d = elementwise(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate_real(*a, &d);
            }
            Op::Clamp01(a) => {
                let g = real(grad);
                let d = elementwise(g, self.value(*a), |gv, x| {
                    if x > CLAMP_INTERIOR_EPS && x < 1.0 - CLAMP_INTERIOR_EPS {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate_real(*a, &d);
            }
            Op::BasisCombine(alpha, basis) => {
                let g = real(grad);
                let mut d = vec![0.0; basis.q()];
                for (j, map) in basis.maps().iter().enumerate() {
                    d[j] = g.dot(map);
                }
                let q = basis.q();
                self.accumulate_real(*alpha, &Tensor::from_vec(&[q], d).expect("sized"));
            }
            Op::PhaseExp(a, s) => {
                // y = exp(i s x): dL/dx = s * Im(conj(y) * g)
                let g = complex(grad);
                let y = self.cvalue(id).clone();
                let data: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(yv, gv)| s * (yv.conj() * gv).im)
                    .collect();
                let dims = self.value_dims(*a);
                self.accumulate_real(*a, &Tensor::from_vec(&dims, data).expect("sized"));
            }
            Op::CmulConst(z, c) => {
                let g = complex(grad);
                let data: Vec<Complex64> = g
                    .data()
                    .iter()
                    .zip(c.data())
                    .map(|(gv, cv)| gv * cv.conj())
                    .collect();
                let dims = g.dims().to_vec();
                self.accumulate_complex(*z, &CTensor::from_vec(&dims, data).expect("sized"));
            }
            Op::Dft2(z) => {
                let d = ifft2(complex(grad));
                self.accumulate_complex(*z, &d);
            }
            Op::Idft2(z) => {
                let d = fft2(complex(grad));
                self.accumulate_complex(*z, &d);
            }
            Op::ComplexFromReal(a) => {
                let g = complex(grad);
                let dims = g.dims().to_vec();
                let data: Vec<f64> = g.data().iter().map(|c| c.re).collect();
                self.accumulate_real(*a, &Tensor::from_vec(&dims, data).expect("sized"));
            }
            Op::RealPart(z) => {
                let g = real(grad);
                let data: Vec<Complex64> =
                    g.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
                let dims = g.dims().to_vec();
                self.accumulate_complex(*z, &CTensor::from_vec(&dims, data).expect("sized"));
            }
            Op::MagnitudeSq(z) => {
                // m = |z|^2: dL/dz = 2 g z (real-pair convention)
                let g = real(grad);
                let zv = self.cvalue(*z).clone();
                let data: Vec<Complex64> = zv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(z, &gv)| 2.0 * gv * z)
                    .collect();
                let dims = zv.dims().to_vec();
                self.accumulate_complex(*z, &CTensor::from_vec(&dims, data).expect("sized"));
            }
            Op::EmbedWrap { k, h, w } => {
                let g = real(grad);
                let kd = self.value(*k).dims().to_vec();
                let (s0, s1) = (kd[0], kd[1]);
                let half = (s0 / 2) as isize;
                let mut d = vec![0.0; s0 * s1];
                for r in 0..s0 {
                    for c in 0..s1 {
                        let rr = (r as isize - half).rem_euclid(*h as isize) as usize;
                        let cc = (c as isize - half).rem_euclid(*w as isize) as usize;
                        d[r * s1 + c] += g.at2(rr, cc);
                    }
                }
                self.accumulate_real(*k, &Tensor::from_vec(&kd, d).expect("sized"));
            }
            Op::CropCenter(a, size) => {
                let g = real(grad);
                let n = self.value(*a).dims()[0];
                let half = (size - 1) / 2;
                let start = n / 2 - half;
                let mut d = Tensor::zeros(&[n, n]);
                for r in 0..*size {
                    for c in 0..*size {
                        d.data_mut()[(start + r) * n + (start + c)] = g.at2(r, c);
                    }
                }
                self.accumulate_real(*a, &d);
            }
            Op::WindowFilter(a, window) => {
                let g = real(grad);
                let ad = self.value(*a).dims().to_vec();
                let (h, w) = (ad[0], ad[1]);
                let k = window.len();
                let (oh, ow) = (h - k + 1, w - k + 1);
                // transpose of the separable pass: scatter columns, then rows
                let mut tmp = vec![0.0; h * ow];
                for or in 0..oh {
                    for oc in 0..ow {
                        let gv = g.at2(or, oc);
                        for (i, &wi) in window.iter().enumerate() {
                            tmp[(or + i) * ow + oc] += wi * gv;
                        }
                    }
                }
                let mut d = vec![0.0; h * w];
                for r in 0..h {
                    for oc in 0..ow {
                        let tv = tmp[r * ow + oc];
                        for (i, &wi) in window.iter().enumerate() {
                            d[r * w + oc + i] += wi * tv;
                        }
                    }
                }
                self.accumulate_real(*a, &Tensor::from_vec(&ad, d).expect("sized"));
            }
            Op::Conv2dSpatial {
                input,
                kernel,
                stride,
                pad,
            } => {
                let g = real(grad);
                let idims = self.value(*input).dims().to_vec();
                let kdims = self.value(*kernel).dims().to_vec();
                let (cin, h, w) = (idims[0], idims[1], idims[2]);
                let (cout, k) = (kdims[0], kdims[2]);
                let gd = g.dims();
                let (oh, ow) = (gd[1], gd[2]);
                let xv = self.value(*input).data().to_vec();
                let kv = self.value(*kernel).data().to_vec();
                let gv = g.data();
                let mut dk = vec![0.0; cout * cin * k * k];
                let (phases, pw) = split_phases(&xv, cin, h, w, *stride);
                let mut dphases: Vec<Vec<f64>> =
                    phases.iter().map(|ph| vec![0.0; ph.len()]).collect();
                for co in 0..cout {
                    for ci in 0..cin {
                        for i in 0..k {
                            for j in 0..k {
                                let ki = ((co * cin + ci) * k + i) * k + j;
                                let kval = kv[ki];
                                let (oc_lo, oc_hi) = valid_range(ow, w, *stride, *pad, j);
                                if oc_lo >= oc_hi {
                                    continue;
                                }
                                let off = j as isize - *pad as isize;
                                let p = off.rem_euclid(*stride as isize) as usize;
                                let q = (off - p as isize) / *stride as isize;
                                let tw = pw[p];
                                let mut dk_acc = 0.0;
                                for or in 0..oh {
                                    let r = (or * stride + i) as isize - *pad as isize;
                                    if r < 0 || r >= h as isize {
                                        continue;
                                    }
                                    let prow = ((ci * h + r as usize) * tw) as isize;
                                    let src_lo = (prow + oc_lo as isize + q) as usize;
                                    let src_hi = (prow + oc_hi as isize + q) as usize;
                                    let grow = (co * oh + or) * ow;
                                    let gs = &gv[grow + oc_lo..grow + oc_hi];
                                    let xs = &phases[p][src_lo..src_hi];
                                    let ds = &mut dphases[p][src_lo..src_hi];
                                    for ((d, &gvv), &xsv) in
                                        ds.iter_mut().zip(gs).zip(xs)
                                    {
                                        *d += kval * gvv;
                                        dk_acc += xsv * gvv;
                                    }
                                }
                                dk[ki] += dk_acc;
                            }
                        }
                    }
                }
                // interleave the phase gradients back into the input layout
                let mut dx = vec![0.0; cin * h * w];
                for (p, dph) in dphases.iter().enumerate() {
                    let tw = pw[p];
                    for cih in 0..cin * h {
                        let xrow = cih * w;
                        let prow = cih * tw;
                        for t in 0..tw {
                            dx[xrow + t * stride + p] += dph[prow + t];
                        }
                    }
                }
                self.accumulate_real(*input, &Tensor::from_vec(&idims, dx).expect("sized"));
                self.accumulate_real(*kernel, &Tensor::from_vec(&kdims, dk).expect("sized"));
            }
            Op::BiasAdd(x, b) => {
                let g = real(grad).clone();
                let xd = self.value(*x).dims().to_vec();
                let hw = xd[1] * xd[2];
                let db: Vec<f64> = (0..xd[0])
                    .map(|c| g.data()[c * hw..(c + 1) * hw].iter().sum())
                    .collect();
                self.accumulate_real(*x, &g);
                self.accumulate_real(*b, &Tensor::from_vec(&[xd[0]], db).expect("sized"));
            }
            Op::SpatialMean(x) => {
                let g = real(grad);
                let xd = self.value(*x).dims().to_vec();
                let hw = xd[1] * xd[2];
                let mut d = vec![0.0; xd[0] * hw];
                for c in 0..xd[0] {
                    let gv = g.data()[c] / hw as f64;
                    for v in &mut d[c * hw..(c + 1) * hw] {
                        *v = gv;
                    }
                }
                self.accumulate_real(*x, &Tensor::from_vec(&xd, d).expect("sized"));
            }
            Op::RegionMeanPool { x, grid } => {
                let g = real(grad);
                let xd = self.value(*x).dims().to_vec();
                let (c, h, w) = (xd[0], xd[1], xd[2]);
                let (rh, rw) = (h / grid, w / grid);
                let cell = (rh * rw) as f64;
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for gr in 0..*grid {
                        for gc in 0..*grid {
                            let gv = g.data()[(ch * grid + gr) * grid + gc] / cell;
                            for r in 0..rh {
                                for col in 0..rw {
                                    d[(ch * h + gr * rh + r) * w + gc * rw + col] = gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate_real(*x, &Tensor::from_vec(&xd, d).expect("sized"));
            }
            Op::Stack(parts) => {
                let g = real(grad);
                let part_len = self.value(parts[0]).len();
                let part_dims = self.value(parts[0]).dims().to_vec();
                let slices: Vec<Tensor> = (0..parts.len())
                    .map(|i| {
                        let slice = g.data()[i * part_len..(i + 1) * part_len].to_vec();
                        Tensor::from_vec(&part_dims, slice).expect("sized")
                    })
                    .collect();
                for (&p, d) in parts.iter().zip(&slices) {
                    self.accumulate_real(p, d);
                }
            }
            Op::MaxRows(parts) => {
                let g = real(grad);
                let dims = self.value(parts[0]).dims().to_vec();
                let n = g.len();
                // recompute argmax with first-wins ties
                let mut arg = vec![0usize; n];
                let mut best = self.value(parts[0]).data().to_vec();
                for (pi, &p) in parts.iter().enumerate().skip(1) {
                    for (e, &v) in self.value(p).data().iter().enumerate() {
                        if v > best[e] {
                            best[e] = v;
                            arg[e] = pi;
                        }
                    }
                }
                let gv = g.data().to_vec();
                for (pi, &p) in parts.iter().enumerate() {
                    let d: Vec<f64> = (0..n)
                        .map(|e| if arg[e] == pi { gv[e] } else { 0.0 })
                        .collect();
                    self.accumulate_real(p, &Tensor::from_vec(&dims, d).expect("sized"));
                }
            }
            Op::SoftmaxCe(logits, label) => {
                let g = real(grad).as_scalar();
                let lv = self.value(*logits).data();
                let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = lv.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let d: Vec<f64> = exps
                    .iter()
                    .enumerate()
                    .map(|(i, e)| g * (e / z - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                let dims = self.value(*logits).dims().to_vec();
                self.accumulate_real(*logits, &Tensor::from_vec(&dims, d).expect("sized"));
            }
            Op::SigmoidCe(logits, targets) => {
                let g = real(grad).as_scalar();
                let lv = self.value(*logits).data();
                let m = lv.len() as f64;
                let d: Vec<f64> = lv
                    .iter()
                    .zip(targets.iter())
                    .map(|(&x, &t)| {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        g * (sig - t) / m
                    })
                    .collect();
                let dims = self.value(*logits).dims().to_vec();
                self.accumulate_real(*logits, &Tensor::from_vec(&dims, d).expect("sized"));
            }
            Op::SquaredDistance(a, b) => {
                let g = real(grad).as_scalar();
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| 2.0 * g * (x - y))
                    .collect();
                let dims = self.value(*a).dims().to_vec();
                let da = Tensor::from_vec(&dims, diff).expect("sized");
                let mut db = da.clone();
                db.scale_in_place(-1.0);
                self.accumulate_real(*a, &da);
                self.accumulate_real(*b, &db);
            }
        }
    }

    fn value_dims(&self, id: NodeId) -> Vec<usize> {
        match &self.nodes[id.0].value {
            Payload::R(t) => t.dims().to_vec(),
            Payload::C(t) => t.dims().to_vec(),
        }
    }

    /// Zero-filled payload with a node's shape, useful for assembling seeds.
    pub fn zeros_like_value(&self, id: NodeId) -> Payload {
        self.nodes[id.0].value.zeros_like()
    }
}

fn real(p: &Payload) -> &Tensor {
    match p {
        Payload::R(t) => t,
        Payload::C(_) => unreachable!("expected real gradient"),
    }
}

fn complex(p: &Payload) -> &CTensor {
    match p {
        Payload::C(t) => t,
        Payload::R(_) => unreachable!("expected complex gradient"),
    }
}

/// Splits input columns by phase modulo the stride: `phases[p]` holds
/// `x[.., t*stride + p]` contiguously, one row of width `pw[p]` per input
/// row. Strided convolutions then reduce to contiguous slice walks.
fn split_phases(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut phases = Vec::with_capacity(stride);
    let mut widths = Vec::with_capacity(stride);
    for p in 0..stride {
        let tw = if p < w { (w - 1 - p) / stride + 1 } else { 0 };
        let mut buf = vec![0.0; cin * h * tw];
        for cih in 0..cin * h {
            let xrow = cih * w;
            let brow = cih * tw;
            for t in 0..tw {
                buf[brow + t] = x[xrow + t * stride + p];
            }
        }
        phases.push(buf);
        widths.push(tw);
    }
    (phases, widths)
}

/// Output columns for which `oc*stride + j - pad` lands inside `[0, w)`.
#[inline]
fn valid_range(ow: usize, w: usize, stride: usize, pad: usize, j: usize) -> (usize, usize) {
    let lo = if j >= pad {
        0
    } else {
        (pad - j).div_ceil(stride)
    };
    let hi = ((w - 1 + pad - j) / stride + 1).min(ow);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.dims(), data).expect("same dims")
}
