//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The op set is exactly what the translation networks and losses need:
//! convolution, a few normalizations, channel-wise affines, pointwise
//! nonlinearities and reductions. Nodes are appended in forward order, so a
//! single reverse sweep visits children before parents; gradients only flow
//! into nodes reachable from differentiable leaves, and [`Tape::detach`]
//! provides exact stop-gradients.
//!
//! Everything is deterministic: node order, parameter gradient accumulation
//! and the reverse sweep are all index-ordered, so repeated runs produce
//! bitwise-identical results.

pub mod check;
mod conv;

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn, Slice};

use crate::num::Scalar;

pub use conv::{conv2d_backward, conv2d_forward, conv_out_len};

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Stable node index; useful for asserting that two computations share
    /// the exact same upstream node.
    pub fn id(self) -> usize {
        self.0
    }
}

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn raw(self) -> usize {
        self.0
    }
}

struct ParamEntry<T> {
    name: String,
    value: ArrayD<T>,
    trainable: bool,
}

/// Named parameter storage shared by all networks of a model.
///
/// Parameter identity is the `ParamId`: two network roles that should share
/// weights hold the same ids, so sharing is structural rather than a runtime
/// copy.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a tensor under a unique name. Panics on duplicates, which
    /// are construction bugs.
    pub fn register(&mut self, name: &str, value: ArrayD<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

enum Op<T> {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Ln(Var),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    ClampMin(Var, T),
    MeanAll(Var),
    SumAll(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    MaskedInstanceNorm {
        x: Var,
        mask: Array2<T>,
        inv_std: Vec<T>,
        n_valid: T,
    },
    LayerNorm {
        x: Var,
        inv_std: T,
    },
    MulChannel {
        x: Var,
        scale: Var,
    },
    AddChannel {
        x: Var,
        bias: Var,
    },
    WeightedChannelSum {
        x: Var,
        weights: Vec<T>,
    },
    Concat0(Var, Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one [`Tape::backward`] sweep.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the swept scalar with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Append-only computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: Vec<(ParamId, Var)>,
    param_cache: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        let value = &self.nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar_value on non-scalar node");
        *value.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input data.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// 0-dim constant.
    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Differentiable leaf that is not a registered parameter (used for
    /// gradient checks on inputs).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Materializes a parameter as a leaf, cloning its current value.
    ///
    /// Repeated requests for the same id return the same node until
    /// [`Tape::clear_param_cache`] is called, so each parameter appears once
    /// per phase and its gradient accumulates across every use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Leaf,
            store.is_trainable(id),
        );
        self.nodes[v.0].param = Some(id);
        self.param_nodes.push((id, v));
        self.param_cache.insert(id, v);
        v
    }

    /// Forgets materialized parameter leaves so the next `param` call reads
    /// fresh values (after an in-step optimizer update).
    pub fn clear_param_cache(&mut self) {
        self.param_cache.clear();
    }

    /// Identity with a severed gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Detach, false)
    }

    // ---- elementwise arithmetic ----

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a, c), ng)
    }

    // ---- pointwise nonlinearities ----

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.ln());
        let ng = self.ng(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.abs());
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(T::zero()));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    /// `ln(1 + exp(x))`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(floor));
        let ng = self.ng(a);
        self.push(value, Op::ClampMin(a, floor), ng)
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let n = T::of_usize(va.len());
        let value = ArrayD::from_elem(IxDyn(&[]), va.iter().copied().sum::<T>() / n);
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let value = ArrayD::from_elem(IxDyn(&[]), va.iter().copied().sum::<T>());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    // ---- linear algebra ----

    /// `y = w · x + b` for a rank-1 `x` `[I]`, `w` `[O, I]`, `b` `[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("linear input must be rank 1");
        let vw = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight must be rank 2");
        let vb = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("linear bias must be rank 1");
        assert_eq!(vw.dim().1, vx.dim(), "linear weight/input dim mismatch");
        assert_eq!(vw.dim().0, vb.dim(), "linear weight/bias dim mismatch");
        let value = (vw.dot(&vx) + vb).into_dyn();
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    /// Zero-padded 2-D convolution: `x` `[C, H, W]`, `w` `[O, C, kh, kw]`,
    /// `b` `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv input must be rank 3");
        let vw = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv kernel must be rank 4");
        let vb = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias must be rank 1");
        let value = conv2d_forward(
            &vx,
            &vw,
            vb.as_slice().expect("bias is standard layout"),
            stride,
            pad,
        )
        .into_dyn();
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    // ---- resampling ----

    /// Nearest-neighbor 2x upsampling of `[C, H, W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("upsample input must be rank 3");
        let (c, h, w) = vx.dim();
        let mut out = ndarray::Array3::<T>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..h {
                let src = vx.slice(ndarray::s![ci, y, ..]);
                let src = src.as_slice().expect("standard layout");
                for dy in 0..2 {
                    let mut dst = out.slice_mut(ndarray::s![ci, 2 * y + dy, ..]);
                    let dst = dst.as_slice_mut().unwrap();
                    for x_ in 0..w {
                        dst[2 * x_] = src[x_];
                        dst[2 * x_ + 1] = src[x_];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::UpsampleNearest2(x), ng)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("pool input must be rank 3");
        let (c, h, w) = vx.dim();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 requires even spatial dims, got {h}x{w}"
        );
        let quarter = T::of_f64(0.25);
        let mut out = ndarray::Array3::<T>::zeros((c, h / 2, w / 2));
        for ci in 0..c {
            for y in 0..h / 2 {
                let r0 = vx.slice(ndarray::s![ci, 2 * y, ..]);
                let r0 = r0.as_slice().expect("standard layout");
                let r1 = vx.slice(ndarray::s![ci, 2 * y + 1, ..]);
                let r1 = r1.as_slice().expect("standard layout");
                let mut dst = out.slice_mut(ndarray::s![ci, y, ..]);
                let dst = dst.as_slice_mut().unwrap();
                for x_ in 0..w / 2 {
                    dst[x_] =
                        (r0[2 * x_] + r0[2 * x_ + 1] + r1[2 * x_] + r1[2 * x_ + 1]) * quarter;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::AvgPool2(x), ng)
    }

    /// Spatial mean per channel: `[C, H, W]` → `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("pool input must be rank 3");
        let (_, h, w) = vx.dim();
        let n = T::of_usize(h * w);
        let value = Array1::from_iter(
            vx.axis_iter(Axis(0))
                .map(|plane| plane.iter().copied().sum::<T>() / n),
        )
        .into_dyn();
        let ng = self.ng(x);
        self.push(value, Op::GlobalAvgPool(x), ng)
    }

    // ---- normalizations ----

    /// Per-channel normalization over the spatial dims (population variance).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("instance_norm input must be rank 3");
        let (c, h, w) = vx.dim();
        let n = T::of_usize(h * w);
        let mut out = vx.to_owned();
        let mut inv_std = Vec::with_capacity(c);
        for mut plane in out.axis_iter_mut(Axis(0)) {
            let mean = plane.iter().copied().sum::<T>() / n;
            let var = plane
                .iter()
                .map(|&v| {
                    let d = v - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            plane.mapv_inplace(|v| (v - mean) * inv);
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Instance norm with statistics restricted to mask-valid pixels; output
    /// is zero outside the mask. An all-zero mask yields an all-zero output
    /// with no gradient.
    pub fn masked_instance_norm(&mut self, x: Var, mask: &Array2<T>, eps: T) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("masked_instance_norm input must be rank 3");
        let (c, h, w) = vx.dim();
        assert_eq!(
            (h, w),
            mask.dim(),
            "masked_instance_norm mask shape mismatch"
        );
        let n_valid = mask.iter().copied().sum::<T>();
        let mut out = ndarray::Array3::<T>::zeros((c, h, w));
        let mut inv_std = vec![T::zero(); c];
        if n_valid > T::zero() {
            for (ci, plane) in vx.axis_iter(Axis(0)).enumerate() {
                let mut mean = T::zero();
                for (v, m) in plane.iter().zip(mask.iter()) {
                    mean += *v * *m;
                }
                mean = mean / n_valid;
                let mut var = T::zero();
                for (v, m) in plane.iter().zip(mask.iter()) {
                    let d = (*v - mean) * *m;
                    var += d * d;
                }
                var = var / n_valid;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[ci] = inv;
                let mut dst = out.index_axis_mut(Axis(0), ci);
                for ((d, v), m) in dst.iter_mut().zip(plane.iter()).zip(mask.iter()) {
                    *d = (*v - mean) * inv * *m;
                }
            }
        }
        let ng = self.ng(x) && n_valid > T::zero();
        self.push(
            out.into_dyn(),
            Op::MaskedInstanceNorm {
                x,
                mask: mask.clone(),
                inv_std,
                n_valid,
            },
            ng,
        )
    }

    /// Normalization over the entire tensor (one group).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = T::of_usize(vx.len());
        let mean = vx.iter().copied().sum::<T>() / n;
        let var = vx
            .iter()
            .map(|&v| {
                let d = v - mean;
                d * d
            })
            .sum::<T>()
            / n;
        let inv_std = T::one() / (var + eps).sqrt();
        let value = vx.mapv(|v| (v - mean) * inv_std);
        let ng = self.ng(x);
        self.push(value, Op::LayerNorm { x, inv_std }, ng)
    }

    // ---- channel-wise affine ----

    /// Multiplies each channel of `x` `[C, H, W]` by `scale[c]`.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("mul_channel input must be rank 3");
        let vs = self.nodes[scale.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("mul_channel scale must be rank 1");
        assert_eq!(vx.dim().0, vs.dim(), "mul_channel channel count mismatch");
        let mut out = vx.to_owned();
        for (mut plane, &s) in out.axis_iter_mut(Axis(0)).zip(vs.iter()) {
            plane.mapv_inplace(|v| v * s);
        }
        let ng = self.ng(x) || self.ng(scale);
        self.push(out.into_dyn(), Op::MulChannel { x, scale }, ng)
    }

    /// Adds `bias[c]` to each channel of `x` `[C, H, W]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("add_channel input must be rank 3");
        let vb = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("add_channel bias must be rank 1");
        assert_eq!(vx.dim().0, vb.dim(), "add_channel channel count mismatch");
        let mut out = vx.to_owned();
        for (mut plane, &b) in out.axis_iter_mut(Axis(0)).zip(vb.iter()) {
            plane.mapv_inplace(|v| v + b);
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out.into_dyn(), Op::AddChannel { x, bias }, ng)
    }

    /// Fixed-weight channel reduction `[C, H, W]` → `[1, H, W]`.
    pub fn weighted_channel_sum(&mut self, x: Var, weights: Vec<T>) -> Var {
        let vx = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("weighted_channel_sum input must be rank 3");
        let (c, h, w) = vx.dim();
        assert_eq!(c, weights.len(), "weighted_channel_sum weight count");
        let mut out = ndarray::Array3::<T>::zeros((1, h, w));
        {
            let mut dst = out.index_axis_mut(Axis(0), 0);
            for (plane, &wc) in vx.axis_iter(Axis(0)).zip(weights.iter()) {
                dst.zip_mut_with(&plane, |o, &v| *o += wc * v);
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::WeightedChannelSum { x, weights }, ng)
    }

    // ---- shape surgery ----

    /// Concatenates two tensors along axis 0 (channels for rank-3 tensors).
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = ndarray::concatenate(Axis(0), &[va.view(), vb.view()])
            .expect("concat0 operand shapes incompatible");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Concat0(a, b), ng)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert!(
            start + len <= vx.shape()[axis],
            "narrow [{start}, {start}+{len}) out of bounds on axis {axis} of {:?}",
            vx.shape()
        );
        let value = vx
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ng = self.ng(x);
        self.push(value, Op::Narrow { x, axis, start, len }, ng)
    }

    // ---- reverse sweep ----

    /// Reverse-accumulates gradients of the scalar `loss` over the tape.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward target must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn deposit(&self, grads: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let node = &self.nodes[id];
        if !node.needs_grad {
            return;
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.deposit(grads, *a, g.clone());
                self.deposit(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.deposit(grads, *a, g.clone());
                self.deposit(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.deposit(grads, *a, g * &self.nodes[b.0].value);
                self.deposit(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let vb = &self.nodes[b.0].value;
                self.deposit(grads, *a, g / vb);
                // d(a/b)/db = -a/b^2 = -y/b
                self.deposit(grads, *b, -(g * y) / vb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.deposit(grads, *a, g.mapv(|v| v * c));
            }
            Op::AddScalar(a, _) => self.deposit(grads, *a, g.clone()),
            Op::Ln(a) => {
                self.deposit(grads, *a, g / &self.nodes[a.0].value);
            }
            Op::Abs(a) => {
                let va = &self.nodes[a.0].value;
                let mut d = g.clone();
                d.zip_mut_with(va, |gv, &xv| {
                    *gv = if xv > T::zero() {
                        *gv
                    } else if xv < T::zero() {
                        -*gv
                    } else {
                        T::zero()
                    }
                });
                self.deposit(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv = *gv * yv * (T::one() - yv));
                self.deposit(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| {
                    if yv <= T::zero() {
                        *gv = T::zero()
                    }
                });
                self.deposit(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let va = &self.nodes[a.0].value;
                let mut d = g.clone();
                d.zip_mut_with(va, |gv, &xv| {
                    if xv <= T::zero() {
                        *gv = *gv * slope
                    }
                });
                self.deposit(grads, *a, d);
            }
            Op::Softplus(a) => {
                let va = &self.nodes[a.0].value;
                let mut d = g.clone();
                d.zip_mut_with(va, |gv, &xv| *gv = *gv * stable_sigmoid(xv));
                self.deposit(grads, *a, d);
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let va = &self.nodes[a.0].value;
                let mut d = g.clone();
                d.zip_mut_with(va, |gv, &xv| {
                    if xv < floor {
                        *gv = T::zero()
                    }
                });
                self.deposit(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let va = &self.nodes[a.0].value;
                let gv = *g.iter().next().unwrap() / T::of_usize(va.len());
                self.deposit(grads, *a, ArrayD::from_elem(va.raw_dim(), gv));
            }
            Op::SumAll(a) => {
                let va = &self.nodes[a.0].value;
                let gv = *g.iter().next().unwrap();
                self.deposit(grads, *a, ArrayD::from_elem(va.raw_dim(), gv));
            }
            Op::Linear { x, w, b } => {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let vx = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let vw = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                if self.nodes[x.0].needs_grad {
                    self.deposit(grads, *x, vw.t().dot(&g1).into_dyn());
                }
                if self.nodes[w.0].needs_grad {
                    let gw = g1
                        .insert_axis(Axis(1))
                        .dot(&vx.insert_axis(Axis(0)));
                    self.deposit(grads, *w, gw.into_dyn());
                }
                self.deposit(grads, *b, g.clone());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let vx = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let vw = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let (gx, gw, gb) = conv2d_backward(&vx, &vw, &go, *stride, *pad);
                self.deposit(grads, *x, gx.into_dyn());
                self.deposit(grads, *w, gw.into_dyn());
                self.deposit(grads, *b, gb.into_dyn());
            }
            Op::UpsampleNearest2(a) => {
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h2, w2) = go.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = ndarray::Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    for yy in 0..h2 {
                        let src = go.slice(ndarray::s![ci, yy, ..]);
                        let src = src.as_slice().unwrap();
                        let mut dst = gx.slice_mut(ndarray::s![ci, yy / 2, ..]);
                        let dst = dst.as_slice_mut().unwrap();
                        for xx in 0..w2 {
                            dst[xx / 2] += src[xx];
                        }
                    }
                }
                self.deposit(grads, *a, gx.into_dyn());
            }
            Op::AvgPool2(a) => {
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c, ho, wo) = go.dim();
                let quarter = T::of_f64(0.25);
                let mut gx = ndarray::Array3::<T>::zeros((c, ho * 2, wo * 2));
                for ci in 0..c {
                    for y in 0..ho {
                        let src = go.slice(ndarray::s![ci, y, ..]);
                        let src = src.as_slice().unwrap();
                        for dy in 0..2 {
                            let mut dst = gx.slice_mut(ndarray::s![ci, 2 * y + dy, ..]);
                            let dst = dst.as_slice_mut().unwrap();
                            for x_ in 0..wo {
                                let gv = src[x_] * quarter;
                                dst[2 * x_] += gv;
                                dst[2 * x_ + 1] += gv;
                            }
                        }
                    }
                }
                self.deposit(grads, *a, gx.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let va = self.nodes[a.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let (c, h, w) = va.dim();
                let n = T::of_usize(h * w);
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut gx = ndarray::Array3::<T>::zeros((c, h, w));
                for (mut plane, &gv) in gx.axis_iter_mut(Axis(0)).zip(g1.iter()) {
                    plane.fill(gv / n);
                }
                self.deposit(grads, *a, gx.into_dyn());
            }
            Op::InstanceNorm { x, inv_std } => {
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let yv = y.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = go.dim();
                let n = T::of_usize(h * w);
                let mut gx = ndarray::Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    let gp = go.index_axis(Axis(0), ci);
                    let yp = yv.index_axis(Axis(0), ci);
                    let m1 = gp.iter().copied().sum::<T>() / n;
                    let m2 = gp.iter().zip(yp.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let inv = inv_std[ci];
                    let mut dst = gx.index_axis_mut(Axis(0), ci);
                    for ((d, &gv), &yvv) in dst.iter_mut().zip(gp.iter()).zip(yp.iter()) {
                        *d = inv * (gv - m1 - yvv * m2);
                    }
                }
                self.deposit(grads, *x, gx.into_dyn());
            }
            Op::MaskedInstanceNorm {
                x,
                mask,
                inv_std,
                n_valid,
            } => {
                if *n_valid <= T::zero() {
                    return;
                }
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let yv = y.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = go.dim();
                let mut gx = ndarray::Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    let gp = go.index_axis(Axis(0), ci);
                    let yp = yv.index_axis(Axis(0), ci);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for ((&gv, &yvv), &m) in gp.iter().zip(yp.iter()).zip(mask.iter()) {
                        s1 += gv * m;
                        s2 += gv * yvv * m;
                    }
                    let m1 = s1 / *n_valid;
                    let m2 = s2 / *n_valid;
                    let inv = inv_std[ci];
                    let mut dst = gx.index_axis_mut(Axis(0), ci);
                    for (((d, &gv), &yvv), &m) in
                        dst.iter_mut().zip(gp.iter()).zip(yp.iter()).zip(mask.iter())
                    {
                        *d = m * inv * (gv - m1 - yvv * m2);
                    }
                }
                self.deposit(grads, *x, gx.into_dyn());
            }
            Op::LayerNorm { x, inv_std } => {
                let n = T::of_usize(y.len());
                let m1 = g.iter().copied().sum::<T>() / n;
                let m2 = g.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                let inv = *inv_std;
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &yvv| *gv = inv * (*gv - m1 - yvv * m2));
                self.deposit(grads, *x, gx);
            }
            Op::MulChannel { x, scale } => {
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let vs = self.nodes[scale.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                if self.nodes[x.0].needs_grad {
                    let mut gx = go.to_owned();
                    for (mut plane, &s) in gx.axis_iter_mut(Axis(0)).zip(vs.iter()) {
                        plane.mapv_inplace(|v| v * s);
                    }
                    self.deposit(grads, *x, gx.into_dyn());
                }
                if self.nodes[scale.0].needs_grad {
                    let vx = self.nodes[x.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap();
                    let gs = Array1::from_iter(
                        go.axis_iter(Axis(0))
                            .zip(vx.axis_iter(Axis(0)))
                            .map(|(gp, xp)| {
                                gp.iter().zip(xp.iter()).map(|(&a, &b)| a * b).sum::<T>()
                            }),
                    );
                    self.deposit(grads, *scale, gs.into_dyn());
                }
            }
            Op::AddChannel { x, bias } => {
                self.deposit(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let go = g.view().into_dimensionality::<Ix3>().unwrap();
                    let gb = Array1::from_iter(
                        go.axis_iter(Axis(0))
                            .map(|plane| plane.iter().copied().sum::<T>()),
                    );
                    self.deposit(grads, *bias, gb.into_dyn());
                }
            }
            Op::WeightedChannelSum { x, weights } => {
                let go = g.view().into_dimensionality::<Ix3>().unwrap();
                let (_, h, w) = go.dim();
                let gplane = go.index_axis(Axis(0), 0);
                let mut gx = ndarray::Array3::<T>::zeros((weights.len(), h, w));
                for (mut plane, &wc) in gx.axis_iter_mut(Axis(0)).zip(weights.iter()) {
                    plane.zip_mut_with(&gplane, |d, &gv| *d = wc * gv);
                }
                self.deposit(grads, *x, gx.into_dyn());
            }
            Op::Concat0(a, b) => {
                let na = self.nodes[a.0].value.shape()[0];
                let nb = self.nodes[b.0].value.shape()[0];
                let ga = g.slice_axis(Axis(0), Slice::from(0..na)).to_owned();
                let gb = g.slice_axis(Axis(0), Slice::from(na..na + nb)).to_owned();
                self.deposit(grads, *a, ga);
                self.deposit(grads, *b, gb);
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                let vx = &self.nodes[x.0].value;
                let mut gx = ArrayD::zeros(vx.raw_dim());
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                self.deposit(grads, *x, gx);
            }
        }
    }

    /// Sums gradients per parameter across every leaf instance of that
    /// parameter, in deterministic id order. Frozen and unused parameters
    /// are absent from the result.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<ParamId, ArrayD<T>> {
        let mut out: BTreeMap<ParamId, ArrayD<T>> = BTreeMap::new();
        for &(pid, var) in &self.param_nodes {
            if let Some(g) = grads.wrt(var) {
                match out.get_mut(&pid) {
                    Some(acc) => *acc += g,
                    None => {
                        out.insert(pid, g.clone());
                    }
                }
            }
        }
        out
    }
}

/// Numerically stable logistic function.
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
