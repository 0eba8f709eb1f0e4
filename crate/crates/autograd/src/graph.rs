//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Nodes are
//! created in topological order, so the backward pass is a single reverse
//! sweep. Gradients are only propagated into nodes that (transitively)
//! depend on a [`Graph::param`] leaf.

use crate::kernels::{box3_count, box3_sum, col2im_add, im2col, ConvGeom};
use crate::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumPerItem(Var),
    MeanPerItem(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool3(Var),
    Upsample2(Var),
    ConcatChannels(Vec<Var>),
    GlobalAvgPool(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        exclude_diag: bool,
    },
    ApplyMask {
        x: Var,
        m: Var,
    },
    Reshape(Var),
    AddN(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// An append-only computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `[B, C, H*W]` view dims of a 4d or 2d (`H = W = 1`) tensor.
fn bchw(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => panic!("expected a 2d or 4d tensor, got {shape:?}"),
    }
}

fn shape4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected [B, C, H, W], got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn shape2(shape: &[usize]) -> [usize; 2] {
    assert_eq!(shape.len(), 2, "expected a matrix, got {shape:?}");
    [shape[0], shape[1]]
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so non-finite activations stay detectable downstream.
        let v = self.value(a).map(|x| if x > T::zero() || x.is_nan() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    fn per_item(&self, a: Var, mean: bool) -> Tensor<T> {
        let t = self.value(a);
        let b = t.shape()[0];
        let per = t.numel() / b;
        let denom = if mean { T::from_f64(per as f64) } else { T::one() };
        Tensor::from_fn([b], |i| t.item_slice(i).iter().copied().sum::<T>() / denom)
    }

    /// `[B, ...] -> [B]` sums.
    pub fn sum_per_item(&mut self, a: Var) -> Var {
        let v = self.per_item(a, false);
        self.push(v, Op::SumPerItem(a), &[a])
    }

    /// `[B, ...] -> [B]` means.
    pub fn mean_per_item(&mut self, a: Var) -> Var {
        let v = self.per_item(a, true);
        self.push(v, Op::MeanPerItem(a), &[a])
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let [m, k] = shape2(self.value(a).shape());
        let [k2, n] = shape2(self.value(b).shape());
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let [m, k] = shape2(self.value(a).shape());
        let [n, k2] = shape2(self.value(b).shape());
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let [m, n] = shape2(self.value(a).shape());
        assert_eq!(self.value(bias).shape(), &[n], "bias shape");
        let mut out = self.value(a).clone();
        let bd = self.value(bias).data();
        for r in 0..m {
            for (o, &b) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(bd) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowBias(a, bias), &[a, bias])
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, k, k]`, plus
    /// optional per-channel bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [bn, c, h, wd] = shape4(self.value(x).shape());
        let [o, c2, k, k2] = shape4(self.value(w).shape());
        assert_eq!(c, c2, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let (kk, p) = (geom.rows(), geom.cols());
        let mut out = Tensor::zeros([bn, o, geom.out_h, geom.out_w]);
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for i in 0..bn {
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let src: &[T] = if geom.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &geom, &mut col);
                    &col
                };
                T::gemm(
                    o,
                    kk,
                    p,
                    T::one(),
                    wv,
                    kk as isize,
                    1,
                    src,
                    p as isize,
                    1,
                    T::zero(),
                    &mut od[i * o * p..(i + 1) * o * p],
                    p as isize,
                    1,
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), o, "conv2d bias shape");
                for chunk in od.chunks_mut(p).enumerate() {
                    let bias = bv[chunk.0 % o];
                    chunk.1.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        )
    }

    /// Batch normalization over `[B, C, H, W]` or `[B, C]` using batch statistics.
    ///
    /// Returns the output and the batch statistics so callers can maintain
    /// running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<T>) {
        let (bn, c, hw) = bchw(self.value(x).shape());
        let count = bn * hw;
        assert!(count > 1, "batch norm needs more than one value per channel");
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..bn {
            for ch in 0..c {
                let s = &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                mean[ch] += s.iter().copied().sum::<T>();
            }
        }
        let n = T::from_f64(count as f64);
        mean.iter_mut().for_each(|m| *m /= n);
        for i in 0..bn {
            for ch in 0..c {
                let s = &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Var {
        let eps = T::from_f64(eps);
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        )
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Tensor<T> {
        let (bn, c, hw) = bchw(self.value(x).shape());
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), c, "batch norm gamma shape");
        assert_eq!(bv.len(), c, "batch norm beta shape");
        let mut out = self.value(x).clone();
        for i in 0..bn {
            for ch in 0..c {
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - mean[ch] * scale;
                out.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = shape4(self.value(x).shape());
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros([bn, c, oh, ow]);
        let mut argmax = vec![0u32; bn * c * oh * ow];
        for plane in 0..bn * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out.data_mut()[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Stride-1 3x3 average pooling over the last two axes, same output size.
    /// Border pixels average only over their in-bounds neighbours.
    pub fn avg_pool3(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let nd = t.ndim();
        assert!(nd >= 2, "avg_pool3 needs at least 2 dims");
        let (h, w) = (t.shape()[nd - 2], t.shape()[nd - 1]);
        let mut out = Tensor::zeros(t.shape());
        let mut tmp = Vec::new();
        for (src, dst) in t.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
            box3_sum(src, h, w, dst, &mut tmp);
            for i in 0..h {
                for j in 0..w {
                    dst[i * w + j] /= T::from_f64(box3_count(i, j, h, w) as f64);
                }
            }
        }
        self.push(out, Op::AvgPool3(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = shape4(self.value(x).shape());
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([bn, c, oh, ow]);
        for plane in 0..bn * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Concatenate `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let [bn, _, h, w] = shape4(self.value(xs[0]).shape());
        let chans: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let [b2, c, h2, w2] = shape4(self.value(v).shape());
                assert_eq!((b2, h2, w2), (bn, h, w), "concat_channels shape mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(bn * total * h * w);
        for i in 0..bn {
            for (&v, &c) in xs.iter().zip(&chans) {
                data.extend_from_slice(&self.value(v).data()[i * c * h * w..(i + 1) * c * h * w]);
            }
        }
        let out = Tensor::new([bn, total, h, w], data);
        self.push(out, Op::ConcatChannels(xs.to_vec()), xs)
    }

    /// `[B, C, H, W] -> [B, C]` spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = shape4(self.value(x).shape());
        let hw = h * w;
        let denom = T::from_f64(hw as f64);
        let xv = self.value(x).data();
        let out = Tensor::from_fn([bn, c], |i| xv[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / denom);
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    /// Scale every row of a matrix to unit L2 norm.
    ///
    /// Panics on a zero row; callers validate beforehand.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let [m, n] = shape2(self.value(x).shape());
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            assert!(norm > T::zero(), "l2_normalize_rows on a zero row");
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let n = shape2(self.value(xs[0]).shape())[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let [m, n2] = shape2(self.value(v).shape());
            assert_eq!(n, n2, "concat_rows column mismatch");
            rows += m;
            data.extend_from_slice(self.value(v).data());
        }
        let out = Tensor::new([rows, n], data);
        self.push(out, Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Per-row softmax cross-entropy `lse(logits[r]) - logits[r, target[r]]`.
    ///
    /// With `exclude_diag`, column `r` is left out of row `r`'s normalizer
    /// (and must not be the target).
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], exclude_diag: bool) -> Var {
        let [m, n] = shape2(self.value(logits).shape());
        assert_eq!(targets.len(), m, "one target per row");
        let lv = self.value(logits).data();
        let mut out = Vec::with_capacity(m);
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < n, "target out of range");
            assert!(!(exclude_diag && t == r), "target excluded from its own row");
            let row = &lv[r * n..(r + 1) * n];
            let lse = row_lse(row, exclude_diag.then_some(r));
            out.push(lse - row[t]);
        }
        let out = Tensor::new([m], out);
        self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                exclude_diag,
            },
            &[logits],
        )
    }

    /// `x * (1 - m)` for `x: [B, C, H, W]` and `m: [B, H, W]`, broadcast over channels.
    pub fn apply_mask(&mut self, x: Var, m: Var) -> Var {
        let [bn, c, h, w] = shape4(self.value(x).shape());
        assert_eq!(self.value(m).shape(), &[bn, h, w], "mask shape mismatch");
        let hw = h * w;
        let mut out = self.value(x).clone();
        let mv = self.value(m).data();
        for i in 0..bn {
            let keep = &mv[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let dst = &mut out.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (d, &mm) in dst.iter_mut().zip(keep) {
                    *d *= T::one() - mm;
                }
            }
        }
        self.push(out, Op::ApplyMask { x, m }, &[x, m])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut out = self.value(xs[0]).clone();
        for &v in &xs[1..] {
            assert_eq!(self.value(v).shape(), out.shape(), "add_n shape mismatch");
            out.add_assign(self.value(v));
        }
        self.push(out, Op::AddN(xs.to_vec()), xs)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || zip(g, self.value(*b), |x, y| x * y));
                self.accum(grads, *b, || zip(g, self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => self.accum(grads, *a, || g.map(|v| v * *c)),
            Op::AddScalar(a) => self.accum(grads, *a, || g.clone()),
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                self.accum(grads, *a, || zip(g, self.value(*a), |x, y| two * x * y));
            }
            Op::Relu(a) => self.accum(grads, *a, || {
                zip(g, self.value(*a), |x, y| if y > T::zero() { x } else { T::zero() })
            }),
            Op::Sigmoid(a) => {
                self.accum(grads, *a, || zip(g, &node.value, |x, s| x * s * (T::one() - s)))
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, || Tensor::full(self.value(*a).shape(), gv))
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item() / T::from_f64(t.numel() as f64);
                self.accum(grads, *a, || Tensor::full(t.shape(), gv))
            }
            Op::SumPerItem(a) | Op::MeanPerItem(a) => {
                let t = self.value(*a);
                let per = t.numel() / t.shape()[0];
                let denom = if matches!(node.op, Op::MeanPerItem(_)) {
                    T::from_f64(per as f64)
                } else {
                    T::one()
                };
                self.accum(grads, *a, || Tensor::from_fn(t.shape(), |i| g.data()[i / per] / denom))
            }
            Op::MatMul(a, b) => {
                let [m, k] = shape2(self.value(*a).shape());
                let n = shape2(self.value(*b).shape())[1];
                if self.needs(*a) {
                    // ga = g * b^T
                    let mut ga = Tensor::zeros([m, k]);
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, self.value(*b).data(), 1, n as isize, T::zero(), ga.data_mut(), k as isize, 1);
                    add_into(grads, *a, ga);
                }
                if self.needs(*b) {
                    // gb = a^T * g
                    let mut gb = Tensor::zeros([k, n]);
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), gb.data_mut(), n as isize, 1);
                    add_into(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let [m, k] = shape2(self.value(*a).shape());
                let n = shape2(self.value(*b).shape())[0];
                if self.needs(*a) {
                    // ga = g * b
                    let mut ga = Tensor::zeros([m, k]);
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, self.value(*b).data(), k as isize, 1, T::zero(), ga.data_mut(), k as isize, 1);
                    add_into(grads, *a, ga);
                }
                if self.needs(*b) {
                    // gb = g^T * a
                    let mut gb = Tensor::zeros([n, k]);
                    T::gemm(n, m, k, T::one(), g.data(), 1, n as isize, self.value(*a).data(), k as isize, 1, T::zero(), gb.data_mut(), k as isize, 1);
                    add_into(grads, *b, gb);
                }
            }
            Op::AddRowBias(a, bias) => {
                self.accum(grads, *a, || g.clone());
                if self.needs(*bias) {
                    let [m, n] = shape2(g.shape());
                    let mut gb = Tensor::zeros([n]);
                    for r in 0..m {
                        for (o, &v) in gb.data_mut().iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    add_into(grads, *bias, gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(g, *x, *w, *b, *stride, *pad, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (bn, c, hw) = bchw(self.value(*x).shape());
                let xv = self.value(*x).data();
                let gv = g.data();
                let gam = self.value(*gamma).data();
                // per-channel sums of g and g * xhat
                let mut sg = vec![T::zero(); c];
                let mut sgx = vec![T::zero(); c];
                for i in 0..bn {
                    for ch in 0..c {
                        let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                        for (&gg, &xx) in gv[r.clone()].iter().zip(&xv[r]) {
                            sg[ch] += gg;
                            sgx[ch] += gg * (xx - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if self.needs(*x) {
                    let n = T::from_f64((bn * hw) as f64);
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for i in 0..bn {
                        for ch in 0..c {
                            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                            let k = gam[ch] * inv_std[ch];
                            let dst = &mut gx.data_mut()[r.clone()];
                            for ((d, &gg), &xx) in dst.iter_mut().zip(&gv[r.clone()]).zip(&xv[r]) {
                                *d = if *batch_stats {
                                    let xhat = (xx - mean[ch]) * inv_std[ch];
                                    k * (gg - sg[ch] / n - xhat * sgx[ch] / n)
                                } else {
                                    k * gg
                                };
                            }
                        }
                    }
                    add_into(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    add_into(grads, *gamma, Tensor::new([c], sgx));
                }
                if self.needs(*beta) {
                    add_into(grads, *beta, Tensor::new([c], sg));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let [_, _, h, w] = shape4(self.value(*x).shape());
                    let per_out = (h / 2) * (w / 2);
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (o, (&gg, &src)) in g.data().iter().zip(argmax).enumerate() {
                        let plane = o / per_out;
                        gx.data_mut()[plane * h * w + src as usize] += gg;
                    }
                    add_into(grads, *x, gx);
                }
            }
            Op::AvgPool3(x) => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let nd = t.ndim();
                    let (h, w) = (t.shape()[nd - 2], t.shape()[nd - 1]);
                    let mut gx = Tensor::zeros(t.shape());
                    let mut scaled = vec![T::zero(); h * w];
                    let mut tmp = Vec::new();
                    for (src, dst) in g.data().chunks(h * w).zip(gx.data_mut().chunks_mut(h * w)) {
                        for i in 0..h {
                            for j in 0..w {
                                scaled[i * w + j] = src[i * w + j] / T::from_f64(box3_count(i, j, h, w) as f64);
                            }
                        }
                        box3_sum(&scaled, h, w, dst, &mut tmp);
                    }
                    add_into(grads, *x, gx);
                }
            }
            Op::Upsample2(x) => {
                if self.needs(*x) {
                    let [bn, c, h, w] = shape4(self.value(*x).shape());
                    let ow = 2 * w;
                    let mut gx = Tensor::zeros([bn, c, h, w]);
                    for plane in 0..bn * c {
                        let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
                        for i in 0..2 * h {
                            for j in 0..ow {
                                dst[(i / 2) * w + j / 2] += src[i * ow + j];
                            }
                        }
                    }
                    add_into(grads, *x, gx);
                }
            }
            Op::ConcatChannels(xs) => {
                let [bn, total, h, w] = shape4(g.shape());
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(bn * c * hw);
                        for i in 0..bn {
                            let start = (i * total + offset) * hw;
                            gv.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        add_into(grads, v, Tensor::new([bn, c, h, w], gv));
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let t = self.value(*x);
                let [_, _, h, w] = shape4(t.shape());
                let hw = h * w;
                let denom = T::from_f64(hw as f64);
                self.accum(grads, *x, || Tensor::from_fn(t.shape(), |i| g.data()[i / hw] / denom))
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.needs(*x) {
                    let [m, n] = shape2(node.value.shape());
                    let y = node.value.data();
                    let mut gx = Tensor::zeros([m, n]);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gg), &yy) in gx.data_mut()[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *d = (gg - yy * dot) / norms[r];
                        }
                    }
                    add_into(grads, *x, gx);
                }
            }
            Op::ConcatRows(xs) => {
                let n = shape2(g.shape())[1];
                let mut row = 0;
                for &v in xs {
                    let m = self.value(v).shape()[0];
                    if self.needs(v) {
                        let part = g.data()[row * n..(row + m) * n].to_vec();
                        add_into(grads, v, Tensor::new([m, n], part));
                    }
                    row += m;
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                exclude_diag,
            } => {
                if self.needs(*logits) {
                    let [m, n] = shape2(self.value(*logits).shape());
                    let lv = self.value(*logits).data();
                    let mut gl = Tensor::zeros([m, n]);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * n..(r + 1) * n];
                        let skip = exclude_diag.then_some(r);
                        let lse = row_lse(row, skip);
                        let gr = g.data()[r];
                        let dst = &mut gl.data_mut()[r * n..(r + 1) * n];
                        for c in 0..n {
                            if Some(c) == skip {
                                continue;
                            }
                            dst[c] = gr * (row[c] - lse).exp();
                        }
                        dst[t] -= gr;
                    }
                    add_into(grads, *logits, gl);
                }
            }
            Op::ApplyMask { x, m } => {
                let [bn, c, h, w] = shape4(self.value(*x).shape());
                let hw = h * w;
                let mv = self.value(*m).data();
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for i in 0..bn {
                        for ch in 0..c {
                            let dst = &mut gx.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            for (d, &mm) in dst.iter_mut().zip(&mv[i * hw..(i + 1) * hw]) {
                                *d *= T::one() - mm;
                            }
                        }
                    }
                    add_into(grads, *x, gx);
                }
                if self.needs(*m) {
                    let xv = self.value(*x).data();
                    let mut gm = Tensor::zeros([bn, h, w]);
                    for i in 0..bn {
                        let dst = &mut gm.data_mut()[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                            for ((d, &gg), &xx) in dst.iter_mut().zip(&g.data()[r.clone()]).zip(&xv[r]) {
                                *d -= gg * xx;
                            }
                        }
                    }
                    add_into(grads, *m, gm);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, || g.clone().reshape(shape))
            }
            Op::AddN(xs) => {
                for &v in xs {
                    self.accum(grads, v, || g.clone());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let [bn, c, h, wd] = shape4(self.value(x).shape());
        let [o, _, k, _] = shape4(self.value(w).shape());
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let (kk, p) = (geom.rows(), geom.cols());
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let mut gw = need_w.then(|| Tensor::zeros(self.value(w).shape()));
        let mut gx = need_x.then(|| Tensor::zeros(self.value(x).shape()));
        let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { kk * p }];
        let mut gcol = vec![T::zero(); if need_x && !geom.is_pointwise() { kk * p } else { 0 }];
        let img = c * h * wd;
        for i in 0..bn {
            let gi = &gd[i * o * p..(i + 1) * o * p];
            if let Some(gw) = gw.as_mut() {
                let xi = &xv[i * img..(i + 1) * img];
                let src: &[T] = if geom.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &geom, &mut col);
                    &col
                };
                // gw += g_i * col^T
                T::gemm(o, p, kk, T::one(), gi, p as isize, 1, src, 1, p as isize, T::one(), gw.data_mut(), kk as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[i * img..(i + 1) * img];
                if geom.is_pointwise() {
                    // gx_i = w^T * g_i
                    T::gemm(kk, o, p, T::one(), wv, 1, kk as isize, gi, p as isize, 1, T::zero(), dst, p as isize, 1);
                } else {
                    T::gemm(kk, o, p, T::one(), wv, 1, kk as isize, gi, p as isize, 1, T::zero(), &mut gcol, p as isize, 1);
                    col2im_add(&gcol, &geom, dst);
                }
            }
        }
        if let Some(gw) = gw {
            add_into(grads, w, gw);
        }
        if let Some(gx) = gx {
            add_into(grads, x, gx);
        }
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let mut gb = Tensor::zeros([o]);
            for (idx, chunk) in gd.chunks(p).enumerate() {
                gb.data_mut()[idx % o] += chunk.iter().copied().sum::<T>();
            }
            add_into(grads, b, gb);
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.needs(v) {
            add_into(grads, v, f());
        }
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

fn row_lse<T: Scalar>(row: &[T], skip: Option<usize>) -> T {
    let mut max = T::neg_infinity();
    for (c, &v) in row.iter().enumerate() {
        if Some(c) != skip && v > max {
            max = v;
        }
    }
    let s: T = row
        .iter()
        .enumerate()
        .filter(|(c, _)| Some(*c) != skip)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + s.ln()
}
