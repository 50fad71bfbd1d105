//! Reverse-mode autodiff on a flat tape of eagerly evaluated ops.
//!
//! Values are f64 `ArrayD` tensors in standard layout; batched image tensors
//! use `[N, C, H, W]`, vectors `[N, F]`, scalars shape `[1]`. Forward values
//! are computed at node-creation time; `backward` walks the tape once in
//! reverse. One tape is built per optimization phase per step and dropped
//! afterwards, so caches (conv im2col matrices) live inside the ops.
//!
//! Shape contracts are programmer obligations: violations panic rather than
//! returning errors, since graphs are constructed by this crate only.
//!
//! Matrix products go through `ndarray::dot` (single-threaded, fixed
//! reduction order), which keeps whole training runs bit-reproducible.

use crate::geometry::{self, TransformSpec};
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddScalar(VarId),
    MulScalar(VarId, f64),
    Sum(VarId),
    Mean(VarId),
    Abs(VarId),
    Square(VarId),
    Elu(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    ConvT2x2 {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    GlobalAvgPool(VarId),
    ChannelScaleShift {
        x: VarId,
        scale: VarId,
        shift: VarId,
    },
    PermuteBatchHW {
        x: VarId,
        transforms: Vec<TransformSpec>,
    },
    SoftmaxCh(VarId),
    SliceBatch {
        x: VarId,
        start: usize,
        len: usize,
    },
    RepeatBatch {
        x: VarId,
        times: usize,
    },
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    RowDot(VarId, VarId),
    PsnrFromMse {
        mse: VarId,
        max_value: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn wrt(&self, id: VarId) -> Option<&ArrayD<f64>> {
        self.g[id.0].as_ref()
    }
}

fn slice_of(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("tape tensors are standard layout")
}

fn as2(a: &ArrayD<f64>, r: usize, c: usize) -> ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((r, c))
        .expect("contiguous reshape")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        slice_of(v)[0]
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn leaf(&mut self, v: ArrayD<f64>) -> VarId {
        let v = if v.is_standard_layout() {
            v
        } else {
            v.as_standard_layout().to_owned()
        };
        self.push(v, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> VarId {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn binary_elementwise(
        &mut self,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let out: Vec<f64> = slice_of(va)
            .iter()
            .zip(slice_of(vb))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = ArrayD::from_shape_vec(va.raw_dim(), out).unwrap();
        self.push(out, op)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let v = &self.nodes[a.0].value;
        let s = v.sum() / v.len() as f64;
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Mean(a))
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn elu(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(v, Op::Elu(a))
    }

    /// 2-D convolution, square kernel, zero padding, floor output size.
    /// x [N,Ci,H,W], w [Co,Ci,k,k], b [Co] -> [N,Co,Ho,Wo].
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, ci, h, wd) = shape4(xv);
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight must be 4-d");
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv in-channel mismatch");
        assert_eq!(ws[3], k, "conv kernel must be square");
        assert_eq!(bv.len(), co, "conv bias length");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let cols = im2col(xv, k, stride, pad, ho, wo);
        let w2 = as2(wv, co, ci * k * k);
        let out2 = w2.dot(&cols);
        let bs = slice_of(bv);
        let out2 = out2.as_standard_layout();
        let o2 = out2.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(n * co * ho * wo);
        for ni in 0..n {
            for c in 0..co {
                let bias = bs[c];
                let row = &o2[c * (n * ho * wo)..];
                for p in 0..ho * wo {
                    out.push(row[ni * ho * wo + p] + bias);
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, co, ho, wo]), out).unwrap();
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Transposed convolution, kernel 2, stride 2 (exact 2x upsampling).
    /// x [N,Ci,H,W], w [Ci,Co,2,2], b [Co] -> [N,Co,2H,2W].
    pub fn conv_transpose_2x2(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, ci, h, wd) = shape4(xv);
        let ws = wv.shape();
        assert_eq!(ws, [ci, ws[1], 2, 2], "convT weight must be [Ci,Co,2,2]");
        let co = ws[1];
        assert_eq!(bv.len(), co, "convT bias length");

        let x2 = gather_nhwc(xv);
        let w2 = as2(wv, ci, co * 4);
        let y2 = x2.dot(&w2);
        let y2 = y2.as_standard_layout();
        let y2s = y2.as_slice().expect("standard layout");
        let (oh, ow) = (2 * h, 2 * wd);
        let bs = slice_of(bv);
        let mut out = vec![0.0; n * co * oh * ow];
        for ni in 0..n {
            for i in 0..h {
                for j in 0..wd {
                    let row = &y2s[((ni * h + i) * wd + j) * co * 4..][..co * 4];
                    for c in 0..co {
                        let base = ((ni * co + c) * oh + 2 * i) * ow + 2 * j;
                        out[base] += row[c * 4] + bs[c];
                        out[base + 1] += row[c * 4 + 1] + bs[c];
                        out[base + ow] += row[c * 4 + 2] + bs[c];
                        out[base + ow + 1] += row[c * 4 + 3] + bs[c];
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, co, oh, ow]), out).unwrap();
        self.push(out, Op::ConvT2x2 { x, w, b })
    }

    /// x [N,F], w [F,O], b [O] -> [N,O].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, f) = shape2(xv);
        let (wf, o) = shape2(wv);
        assert_eq!(f, wf, "linear feature dims");
        assert_eq!(bv.len(), o, "linear bias length");
        let y = as2(xv, n, f).dot(&as2(wv, f, o));
        let bs = slice_of(bv);
        let mut out = if y.is_standard_layout() {
            y.into_raw_vec_and_offset().0
        } else {
            y.iter().cloned().collect()
        };
        for ni in 0..n {
            for c in 0..o {
                out[ni * o + c] += bs[c];
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, o]), out).unwrap();
        self.push(out, Op::Linear { x, w, b })
    }

    /// x [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = shape4(xv);
        let xs = slice_of(xv);
        let inv = 1.0 / (h * w) as f64;
        let mut out = Vec::with_capacity(n * c);
        for nc in 0..n * c {
            let s: f64 = xs[nc * h * w..(nc + 1) * h * w].iter().sum();
            out.push(s * inv);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c]), out).unwrap();
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// out[n,c,h,w] = x[n,c,h,w] * (1 + scale[n,c]) + shift[n,c].
    pub fn channel_scale_shift(&mut self, x: VarId, scale: VarId, shift: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[scale.0].value;
        let tv = &self.nodes[shift.0].value;
        let (n, c, h, w) = shape4(xv);
        assert_eq!(sv.shape(), [n, c], "scale shape");
        assert_eq!(tv.shape(), [n, c], "shift shape");
        let (xs, ss, ts) = (slice_of(xv), slice_of(sv), slice_of(tv));
        let mut out = Vec::with_capacity(xs.len());
        for nc in 0..n * c {
            let (a, b) = (1.0 + ss[nc], ts[nc]);
            for &v in &xs[nc * h * w..(nc + 1) * h * w] {
                out.push(v * a + b);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.push(out, Op::ChannelScaleShift { x, scale, shift })
    }

    /// Applies transforms[i] to batch element i over the trailing two dims.
    pub fn permute_batch_hw(&mut self, x: VarId, transforms: Vec<TransformSpec>) -> VarId {
        let xv = &self.nodes[x.0].value;
        assert!(xv.ndim() >= 3, "permute_batch_hw needs [N,...,H,W]");
        assert_eq!(xv.shape()[0], transforms.len(), "one transform per batch element");
        let out = apply_per_element(xv, &transforms);
        self.push(out, Op::PermuteBatchHW { x, transforms })
    }

    /// Softmax over dim 1 of [N,K,H,W].
    pub fn softmax_channels(&mut self, x: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let (n, k, h, w) = shape4(xv);
        let xs = slice_of(xv);
        let hw = h * w;
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(xs[(ni * k + c) * hw + p]);
                }
                let mut z = 0.0;
                for c in 0..k {
                    let e = (xs[(ni * k + c) * hw + p] - m).exp();
                    out[(ni * k + c) * hw + p] = e;
                    z += e;
                }
                for c in 0..k {
                    out[(ni * k + c) * hw + p] /= z;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, k, h, w]), out).unwrap();
        self.push(out, Op::SoftmaxCh(x))
    }

    /// Rows start..start+len along axis 0.
    pub fn slice_batch(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = &self.nodes[x.0].value;
        assert!(start + len <= xv.shape()[0], "slice_batch out of range");
        let out = xv
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        self.push(out, Op::SliceBatch { x, start, len })
    }

    /// Tiles x `times` along axis 0: out[t*B + b] = x[b].
    pub fn repeat_batch(&mut self, x: VarId, times: usize) -> VarId {
        assert!(times >= 1);
        let xv = &self.nodes[x.0].value;
        let views: Vec<_> = (0..times).map(|_| xv.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("same shapes");
        self.push(out, Op::RepeatBatch { x, times })
    }

    /// Columns start..start+len of [N,F].
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = &self.nodes[x.0].value;
        let (_, f) = shape2(xv);
        assert!(start + len <= f, "slice_cols out of range");
        let out = xv
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        self.push(out, Op::SliceCols { x, start, len })
    }

    /// Per-row inner product of two [N,F] arrays -> [N].
    pub fn row_dot(&mut self, a: VarId, b: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.shape(), vb.shape(), "row_dot shapes");
        let (n, f) = shape2(va);
        let (sa, sb) = (slice_of(va), slice_of(vb));
        let mut out = Vec::with_capacity(n);
        for ni in 0..n {
            let mut s = 0.0;
            for fi in 0..f {
                s += sa[ni * f + fi] * sb[ni * f + fi];
            }
            out.push(s);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n]), out).unwrap();
        self.push(out, Op::RowDot(a, b))
    }

    /// PSNR in dB from a scalar MSE node; capped at 100 dB (zero gradient
    /// past the cap).
    pub fn psnr_from_mse(&mut self, mse: VarId, max_value: f64) -> VarId {
        let m = self.scalar_value(mse);
        assert!(max_value > 0.0);
        let cap_mse = max_value * max_value * 1e-10;
        let p = if m <= cap_mse {
            100.0
        } else {
            (10.0 * (max_value * max_value / m).log10()).min(100.0)
        };
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), p),
            Op::PsnrFromMse { mse, max_value },
        )
    }

    pub fn backward(&self, root: VarId) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut g: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut g);
            g[idx] = Some(gout);
        }
        Grads { g }
    }

    fn backprop_node(&self, idx: usize, gout: &ArrayD<f64>, g: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, gout.clone());
                acc(g, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, gout.clone());
                acc(g, *b, gout.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                acc(g, *a, gout * vb);
                acc(g, *b, gout * va);
            }
            Op::Div(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                acc(g, *a, gout / vb);
                let db = gout * va;
                acc(g, *b, -(db / (vb * vb)));
            }
            Op::AddScalar(a) => acc(g, *a, gout.clone()),
            Op::MulScalar(a, c) => acc(g, *a, gout.mapv(|v| v * c)),
            Op::Sum(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                acc(g, *a, ArrayD::from_elem(shape, slice_of(gout)[0]));
            }
            Op::Mean(a) => {
                let va = &self.nodes[a.0].value;
                let v = slice_of(gout)[0] / va.len() as f64;
                acc(g, *a, ArrayD::from_elem(va.raw_dim(), v));
            }
            Op::Abs(a) => {
                let va = &self.nodes[a.0].value;
                let mut d = va.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                d *= gout;
                acc(g, *a, d);
            }
            Op::Square(a) => {
                let va = &self.nodes[a.0].value;
                let mut d = va.mapv(|x| 2.0 * x);
                d *= gout;
                acc(g, *a, d);
            }
            Op::Elu(a) => {
                // value + 1 equals exp(x) on the negative branch.
                let mut d = node.value.mapv(|y| if y > 0.0 { 1.0 } else { y + 1.0 });
                d *= gout;
                acc(g, *a, d);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, ci, h, wd) = shape4(xv);
                let ws = wv.shape();
                let (co, k) = (ws[0], ws[2]);
                let (_, _, ho, wo) = shape4(&node.value);

                // gout [N,Co,Ho,Wo] -> g2 [Co, N*Ho*Wo], matching cols layout.
                let gs = slice_of(gout);
                let mut g2v = vec![0.0; co * n * ho * wo];
                for ni in 0..n {
                    for c in 0..co {
                        let src = &gs[(ni * co + c) * ho * wo..][..ho * wo];
                        g2v[c * n * ho * wo + ni * ho * wo..][..ho * wo].copy_from_slice(src);
                    }
                }
                let g2 = Array2::from_shape_vec((co, n * ho * wo), g2v).unwrap();

                let db: Vec<f64> = (0..co).map(|c| g2.row(c).sum()).collect();
                acc(g, *b, ArrayD::from_shape_vec(IxDyn(&[co]), db).unwrap());

                let dw2 = g2.dot(&cols.t());
                acc(g, *w, reshape_dyn(dw2, &[co, ci, k, k]));

                let w2 = as2(wv, co, ci * k * k);
                let dcols = w2.t().dot(&g2);
                let dx = col2im(&dcols, n, ci, h, wd, k, *stride, *pad, ho, wo);
                acc(g, *x, dx);
            }
            Op::ConvT2x2 { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, ci, h, wd) = shape4(xv);
                let co = wv.shape()[1];
                let (oh, ow) = (2 * h, 2 * wd);

                // Gather gout into [N*H*W, Co*4] rows matching the forward.
                let gs = slice_of(gout);
                let mut gy2v = vec![0.0; n * h * wd * co * 4];
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..wd {
                            let row = &mut gy2v[((ni * h + i) * wd + j) * co * 4..][..co * 4];
                            for c in 0..co {
                                let base = ((ni * co + c) * oh + 2 * i) * ow + 2 * j;
                                row[c * 4] = gs[base];
                                row[c * 4 + 1] = gs[base + 1];
                                row[c * 4 + 2] = gs[base + ow];
                                row[c * 4 + 3] = gs[base + ow + 1];
                            }
                        }
                    }
                }
                let gy2 = Array2::from_shape_vec((n * h * wd, co * 4), gy2v).unwrap();

                let mut db = vec![0.0; co];
                for row in gy2.rows() {
                    for c in 0..co {
                        db[c] += row[c * 4] + row[c * 4 + 1] + row[c * 4 + 2] + row[c * 4 + 3];
                    }
                }
                acc(g, *b, ArrayD::from_shape_vec(IxDyn(&[co]), db).unwrap());

                let x2 = gather_nhwc(xv);
                let dw2 = x2.t().dot(&gy2);
                acc(g, *w, reshape_dyn(dw2, &[ci, co, 2, 2]));

                let w2 = as2(wv, ci, co * 4);
                let dx2 = gy2.dot(&w2.t());
                let dx2 = dx2.as_standard_layout();
                let dx2s = dx2.as_slice().unwrap();
                let mut dx = vec![0.0; n * ci * h * wd];
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..wd {
                            let row = &dx2s[((ni * h + i) * wd + j) * ci..][..ci];
                            for c in 0..ci {
                                dx[((ni * ci + c) * h + i) * wd + j] = row[c];
                            }
                        }
                    }
                }
                acc(
                    g,
                    *x,
                    ArrayD::from_shape_vec(IxDyn(&[n, ci, h, wd]), dx).unwrap(),
                );
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, f) = shape2(xv);
                let (_, o) = shape2(wv);
                let g2 = as2(gout, n, o);
                let db = g2.sum_axis(Axis(0));
                acc(g, *b, db.into_dyn());
                let dw = as2(xv, n, f).t().dot(&g2);
                acc(g, *w, dw.into_dyn());
                let dx = g2.dot(&as2(wv, f, o).t());
                acc(g, *x, dx.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.nodes[x.0].value;
                let (n, c, h, w) = shape4(xv);
                let gs = slice_of(gout);
                let inv = 1.0 / (h * w) as f64;
                let mut dx = Vec::with_capacity(n * c * h * w);
                for nc in 0..n * c {
                    let v = gs[nc] * inv;
                    dx.extend(std::iter::repeat(v).take(h * w));
                }
                acc(
                    g,
                    *x,
                    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
                );
            }
            Op::ChannelScaleShift { x, scale, shift } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[scale.0].value;
                let (n, c, h, w) = shape4(xv);
                let hw = h * w;
                let (xs, ss, gs) = (slice_of(xv), slice_of(sv), slice_of(gout));
                let mut dx = Vec::with_capacity(xs.len());
                let mut ds = Vec::with_capacity(n * c);
                let mut dt = Vec::with_capacity(n * c);
                for nc in 0..n * c {
                    let a = 1.0 + ss[nc];
                    let mut s_acc = 0.0;
                    let mut t_acc = 0.0;
                    for p in 0..hw {
                        let gv = gs[nc * hw + p];
                        dx.push(gv * a);
                        s_acc += gv * xs[nc * hw + p];
                        t_acc += gv;
                    }
                    ds.push(s_acc);
                    dt.push(t_acc);
                }
                acc(
                    g,
                    *x,
                    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
                );
                acc(g, *scale, ArrayD::from_shape_vec(IxDyn(&[n, c]), ds).unwrap());
                acc(g, *shift, ArrayD::from_shape_vec(IxDyn(&[n, c]), dt).unwrap());
            }
            Op::PermuteBatchHW { x, transforms } => {
                let inv: Vec<TransformSpec> =
                    transforms.iter().map(geometry::invert).collect();
                acc(g, *x, apply_per_element(gout, &inv));
            }
            Op::SoftmaxCh(x) => {
                let p = &node.value;
                let (n, k, h, w) = shape4(p);
                let hw = h * w;
                let (ps, gs) = (slice_of(p), slice_of(gout));
                let mut dx = vec![0.0; ps.len()];
                for ni in 0..n {
                    for pos in 0..hw {
                        let mut dot = 0.0;
                        for c in 0..k {
                            let i = (ni * k + c) * hw + pos;
                            dot += gs[i] * ps[i];
                        }
                        for c in 0..k {
                            let i = (ni * k + c) * hw + pos;
                            dx[i] = ps[i] * (gs[i] - dot);
                        }
                    }
                }
                acc(
                    g,
                    *x,
                    ArrayD::from_shape_vec(IxDyn(&[n, k, h, w]), dx).unwrap(),
                );
            }
            Op::SliceBatch { x, start, len } => {
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                dx.slice_axis_mut(Axis(0), Slice::from(*start..start + len))
                    .assign(gout);
                acc(g, *x, dx);
            }
            Op::RepeatBatch { x, times } => {
                let b = self.nodes[x.0].value.shape()[0];
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                for t in 0..*times {
                    dx += &gout.slice_axis(Axis(0), Slice::from(t * b..(t + 1) * b));
                }
                acc(g, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                dx.slice_axis_mut(Axis(1), Slice::from(*start..start + len))
                    .assign(gout);
                acc(g, *x, dx);
            }
            Op::RowDot(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (n, f) = shape2(va);
                let gs = slice_of(gout);
                let (sa, sb) = (slice_of(va), slice_of(vb));
                let mut da = Vec::with_capacity(n * f);
                let mut db = Vec::with_capacity(n * f);
                for ni in 0..n {
                    for fi in 0..f {
                        da.push(gs[ni] * sb[ni * f + fi]);
                        db.push(gs[ni] * sa[ni * f + fi]);
                    }
                }
                acc(g, *a, ArrayD::from_shape_vec(IxDyn(&[n, f]), da).unwrap());
                acc(g, *b, ArrayD::from_shape_vec(IxDyn(&[n, f]), db).unwrap());
            }
            Op::PsnrFromMse { mse, max_value } => {
                let m = self.scalar_value(*mse);
                let cap_mse = max_value * max_value * 1e-10;
                let d = if m <= cap_mse {
                    0.0
                } else {
                    -10.0 / (m * std::f64::consts::LN_10)
                };
                acc(
                    g,
                    *mse,
                    ArrayD::from_elem(IxDyn(&[1]), slice_of(gout)[0] * d),
                );
            }
        }
    }
}

fn acc(g: &mut [Option<ArrayD<f64>>], id: VarId, delta: ArrayD<f64>) {
    match &mut g[id.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Owned 2-d result -> dyn shape, tolerating whatever layout `dot` produced.
fn reshape_dyn(a: Array2<f64>, shape: &[usize]) -> ArrayD<f64> {
    let v = if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().cloned().collect()
    };
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

fn shape4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn shape2(a: &ArrayD<f64>) -> (usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 2, "expected 2-d tensor, got {s:?}");
    (s[0], s[1])
}

/// x [N,C,H,W] -> cols [C*k*k, N*Ho*Wo]; zero padding outside the canvas.
fn im2col(x: &ArrayD<f64>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (n, c, h, w) = shape4(x);
    let xs = slice_of(x);
    let mut cols = vec![0.0; c * k * k * n * ho * wo];
    let row_len = n * ho * wo;
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let r = (ci * k + u) * k + v;
                let dst = &mut cols[r * row_len..(r + 1) * row_len];
                for ni in 0..n {
                    for i in 0..ho {
                        let si = (i * stride + u) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src_row = &xs[((ni * c + ci) * h + si as usize) * w..][..w];
                        let out_row = &mut dst[ni * ho * wo + i * wo..][..wo];
                        for (j, o) in out_row.iter_mut().enumerate() {
                            let sj = (j * stride + v) as isize - pad as isize;
                            if sj >= 0 && sj < w as isize {
                                *o = src_row[sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, row_len), cols).unwrap()
}

/// Scatter-add inverse of im2col.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<f64> {
    let dcols = dcols.as_standard_layout();
    let ds = dcols.as_slice().expect("standard layout");
    let row_len = n * ho * wo;
    let mut dx = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let r = (ci * k + u) * k + v;
                let src = &ds[r * row_len..(r + 1) * row_len];
                for ni in 0..n {
                    for i in 0..ho {
                        let si = (i * stride + u) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let dst_row =
                            &mut dx[((ni * c + ci) * h + si as usize) * w..][..w];
                        let src_row = &src[ni * ho * wo + i * wo..][..wo];
                        for (j, &sv) in src_row.iter().enumerate() {
                            let sj = (j * stride + v) as isize - pad as isize;
                            if sj >= 0 && sj < w as isize {
                                dst_row[sj as usize] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()
}

/// x [N,C,H,W] -> [N*H*W, C] gather (rows ordered n-major, then i, then j).
fn gather_nhwc(x: &ArrayD<f64>) -> Array2<f64> {
    let (n, c, h, w) = shape4(x);
    let xs = slice_of(x);
    let mut out = vec![0.0; n * h * w * c];
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((ni * h + i) * w + j) * c + ci] = xs[((ni * c + ci) * h + i) * w + j];
                }
            }
        }
    }
    Array2::from_shape_vec((n * h * w, c), out).unwrap()
}

fn apply_per_element(x: &ArrayD<f64>, ts: &[TransformSpec]) -> ArrayD<f64> {
    let mut out = x.clone();
    for (n, t) in ts.iter().enumerate() {
        if t.is_identity() {
            continue;
        }
        let sl = x.index_axis(Axis(0), n).to_owned();
        let tr = geometry::apply_transform(t, &sl)
            .expect("config guarantees square spatial dims");
        out.index_axis_mut(Axis(0), n).assign(&tr);
    }
    out
}
