//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Parameters are bound
//! by name from a [`ParamStore`]; gradients come back keyed by the same names.

use std::collections::BTreeMap;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Softplus(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelScale {
        x: Var,
        gamma: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ResizeNearest(Var),
    ResizeBilinear(Var),
    Concat(Vec<Var>),
    Select {
        raw: Var,
        known: Var,
        mask: Tensor,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
    Blur {
        x: Var,
        kernel: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter. Frozen bindings still propagate gradients
    /// through downstream ops but never accumulate a gradient of their own.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        let value = store.get(name).clone();
        let v = self.push(value, Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some(name.to_string());
        }
        v
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    // ---- layers ------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = xv.dims4();
        let (cout, wcin, kh, kw) = wv.dims4();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let k = cin * kh * kw;
        let hw = ho * wo;
        let xin = h * wd * cin;
        let mut out = vec![0.0; n * cout * hw];
        if geo.is_pointwise() {
            for s in 0..n {
                let xs = &xv.data()[s * xin..(s + 1) * xin];
                gemm(cout, k, hw, wv.data(), (k, 1), xs, (hw, 1), &mut out[s * cout * hw..(s + 1) * cout * hw], 0.0);
            }
        } else {
            let rows = geo.chunk_rows(k);
            let mut cols = vec![0.0; k * rows * wo];
            for s in 0..n {
                let xs = &xv.data()[s * xin..(s + 1) * xin];
                let os = &mut out[s * cout * hw..(s + 1) * cout * hw];
                for oy0 in (0..ho).step_by(rows) {
                    let oy1 = (oy0 + rows).min(ho);
                    let m = (oy1 - oy0) * wo;
                    im2col(xs, &geo, oy0, oy1, &mut cols[..k * m]);
                    gemm_ldc(cout, k, m, wv.data(), (k, 1), &cols[..k * m], (m, 1), &mut os[oy0 * wo..], hw, 0.0);
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for c in 0..cout {
                    let base = (s * cout + c) * hw;
                    for o in &mut out[base..base + hw] {
                        *o += bv[c];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[n, cout, ho, wo], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `x`: `[N, in]`, `w`: `[out, in]`, `b`: `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, fin) = self.value(x).dims2();
        let (fout, win) = self.value(w).dims2();
        assert_eq!(fin, win, "linear input mismatch");
        let mut out = vec![0.0; n * fout];
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            (fin, 1),
            self.value(w).data(),
            (1, fin),
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&[n, fout], out), Op::Linear { x, w, b }, rg)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::InstanceNorm { x, inv_std },
            rg,
        )
    }

    /// Batch normalization with batch statistics and a per-channel affine.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut xhat = xv.data().to_vec();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                mean += xv.data()[base..base + hw].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                var += xv.data()[base..base + hw]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for v in &mut xhat[base..base + hw] {
                    *v = (*v - mean) * is;
                }
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = xhat.clone();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for v in &mut out[base..base + hw] {
                    *v = *v * g[ch] + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let xhat = Tensor::from_vec(&[n, c, h, w], xhat);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// `y[n,c] = x[n,c] * scale[n,c] + shift[n,c]`, with `scale`/`shift` shaped `[N, C]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(self.value(scale).shape(), &[n, c]);
        assert_eq!(self.value(shift).shape(), &[n, c]);
        let hw = h * w;
        let sv = self.value(scale).data();
        let bv = self.value(shift).data();
        let mut out = xv.data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            for v in plane.iter_mut() {
                *v = *v * sv[i] + bv[i];
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::Modulate { x, scale, shift },
            rg,
        )
    }

    /// Per-channel multiplier, `gamma` shaped `[C]`.
    pub fn channel_scale(&mut self, x: Var, gamma: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(self.value(gamma).shape(), &[c]);
        let hw = h * w;
        let g = self.value(gamma).data();
        let mut out = xv.data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let gc = g[i % c];
            for v in plane.iter_mut() {
                *v *= gc;
            }
        }
        let rg = self.rg(x) || self.rg(gamma);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::ChannelScale { x, gamma },
            rg,
        )
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::Upsample2(x), rg)
    }

    /// Nearest resize to an arbitrary size (`src = floor(dst * in / out)`).
    pub fn resize_nearest(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let ys: Vec<usize> = (0..ho).map(|i| i * h / ho).collect();
        let xs: Vec<usize> = (0..wo).map(|j| j * w / wo).collect();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &sy) in ys.iter().enumerate() {
                for (ox, &sx) in xs.iter().enumerate() {
                    dst[oy * wo + ox] = src[sy * w + sx];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::ResizeNearest(x), rg)
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let ay = bilinear_axis(h, ho);
        let ax = bilinear_axis(w, wo);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::ResizeBilinear(x), rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let chans: Vec<usize> = parts.iter().map(|&p| self.value(p).dims4().1).collect();
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![0.0; n * ctot * hw];
        for s in 0..n {
            let mut off = 0;
            for (&p, &cp) in parts.iter().zip(&chans) {
                let pv = self.value(p);
                assert_eq!(pv.dims4().2, h);
                assert_eq!(pv.dims4().3, w);
                let src = &pv.data()[s * cp * hw..(s + 1) * cp * hw];
                out[(s * ctot + off) * hw..(s * ctot + off + cp) * hw].copy_from_slice(src);
                off += cp;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(&[n, ctot, h, w], out),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Picks `known` where `mask == 1` and `raw` elsewhere. `mask` is `[N, 1, H, W]`
    /// and broadcasts over channels. Known values are copied, never recomputed.
    pub fn select(&mut self, raw: Var, known: Var, mask: Tensor) -> Var {
        let rv = self.value(raw);
        let kv = self.value(known);
        assert_eq!(rv.shape(), kv.shape());
        let (n, c, h, w) = rv.dims4();
        assert_eq!(mask.shape(), &[n, 1, h, w]);
        let hw = h * w;
        let mut out = rv.data().to_vec();
        for s in 0..n {
            let m = &mask.data()[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for (i, &mi) in m.iter().enumerate() {
                    if mi == 1.0 {
                        out[base + i] = kv.data()[base + i];
                    }
                }
            }
        }
        let rg = self.rg(raw) || self.rg(known);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::Select { raw, known, mask },
            rg,
        )
    }

    /// `w / sigma` with `sigma = uᵀ W v` for the weight viewed as `[out, rest]`.
    /// `u` and `v` are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: Vec<f64>, v: Vec<f64>) -> Var {
        let wv = self.value(w);
        let rows = wv.shape()[0];
        let cols = wv.len() / rows;
        assert_eq!(u.len(), rows);
        assert_eq!(v.len(), cols);
        let sigma = bilinear_form(wv.data(), rows, cols, &u, &v).max(SIGMA_FLOOR);
        let value = wv.map(|x| x / sigma);
        let rg = self.rg(w);
        self.push(value, Op::SpectralNorm { w, u, v, sigma }, rg)
    }

    /// Separable blur with a normalized 1-D kernel of odd length, edge-clamped.
    pub fn blur(&mut self, x: Var, kernel: Vec<f64>) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut tmp = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let t = &mut tmp[p * h * w..(p + 1) * h * w];
            blur_rows(src, t, h, w, &kernel);
            let o = &mut out[p * h * w..(p + 1) * h * w];
            blur_cols(t, o, h, w, &kernel);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::Blur { x, kernel }, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Sums gradients of every trainable parameter binding by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) else {
                continue;
            };
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(grads, *a, g.map(|v| v * k));
            }
            Op::MulConst(a, c) => {
                self.acc(grads, *a, g.zip_map(c, |x, y| x * y));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.item() / n;
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g.zip_map(self.value(*a), |gv, x| if x >= 0.0 { gv } else { gv * slope });
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x));
                self.acc(grads, *a, d);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_conv(g, *x, *w, *b, *stride, *pad, grads),
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2();
                let fout = self.value(*w).dims2().0;
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * fin];
                    gemm(
                        n,
                        fout,
                        fin,
                        g.data(),
                        (fout, 1),
                        self.value(*w).data(),
                        (fin, 1),
                        &mut dx,
                        0.0,
                    );
                    self.acc(grads, *x, Tensor::from_vec(&[n, fin], dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        n,
                        fin,
                        g.data(),
                        (1, fout),
                        self.value(*x).data(),
                        (fin, 1),
                        &mut dw,
                        0.0,
                    );
                    self.acc(grads, *w, Tensor::from_vec(&[fout, fin], dw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; fout];
                        for row in g.data().chunks(fout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, Tensor::from_vec(&[fout], db));
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let gp = &g.data()[p * hw..(p + 1) * hw];
                    let yp = &y.data()[p * hw..(p + 1) * hw];
                    let mg = gp.iter().sum::<f64>() / hw as f64;
                    let mgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for k in 0..hw {
                        dx[p * hw + k] = inv_std[p] * (gp[k] - mg - yp[k] * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = xhat.dims4();
                let hw = h * w;
                let count = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for k in base..base + hw {
                            dbeta[ch] += g.data()[k];
                            dgamma[ch] += g.data()[k] * xhat.data()[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * c * hw];
                    for ch in 0..c {
                        // sums of dxhat and dxhat*xhat over the channel
                        let m1 = dbeta[ch] * gam[ch] / count;
                        let m2 = dgamma[ch] * gam[ch] / count;
                        for s in 0..n {
                            let base = (s * c + ch) * hw;
                            for k in base..base + hw {
                                let dxh = g.data()[k] * gam[ch];
                                dx[k] = inv_std[ch] * (dxh - m1 - xhat.data()[k] * m2);
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::Modulate { x, scale, shift } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let sv = self.value(*scale).data();
                if self.rg(*x) {
                    let mut dx = g.data().to_vec();
                    for (p, plane) in dx.chunks_mut(hw).enumerate() {
                        for v in plane.iter_mut() {
                            *v *= sv[p];
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                let mut ds = vec![0.0; n * c];
                let mut db = vec![0.0; n * c];
                for p in 0..n * c {
                    let gp = &g.data()[p * hw..(p + 1) * hw];
                    let xp = &xv.data()[p * hw..(p + 1) * hw];
                    ds[p] = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
                    db[p] = gp.iter().sum();
                }
                self.acc(grads, *scale, Tensor::from_vec(&[n, c], ds));
                self.acc(grads, *shift, Tensor::from_vec(&[n, c], db));
            }
            Op::ChannelScale { x, gamma } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = g.data().to_vec();
                    for (p, plane) in dx.chunks_mut(hw).enumerate() {
                        for v in plane.iter_mut() {
                            *v *= gam[p % c];
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                let mut dg = vec![0.0; c];
                for p in 0..n * c {
                    let gp = &g.data()[p * hw..(p + 1) * hw];
                    let xp = &xv.data()[p * hw..(p + 1) * hw];
                    dg[p % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                }
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dg));
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            d[y * w + xx] = 0.25 * gp[(y / 2) * wo + xx / 2];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let wo = 2 * w;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let i = 2 * y * wo + 2 * xx;
                            d[y * w + xx] = gp[i] + gp[i + 1] + gp[i + wo] + gp[i + wo + 1];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::ResizeNearest(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, ho, wo) = node.value.dims4();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        let sy = oy * h / ho;
                        for ox in 0..wo {
                            d[sy * w + ox * w / wo] += gp[oy * wo + ox];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::ResizeBilinear(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, ho, wo) = node.value.dims4();
                let ay = bilinear_axis(h, ho);
                let ax = bilinear_axis(w, wo);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                            let gv = gp[oy * wo + ox];
                            d[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            d[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            d[y1 * w + x0] += gv * ly * (1.0 - lx);
                            d[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Concat(parts) => {
                let (n, ctot, h, w) = node.value.dims4();
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let cp = self.value(p).dims4().1;
                    if self.rg(p) {
                        let mut d = vec![0.0; n * cp * hw];
                        for s in 0..n {
                            d[s * cp * hw..(s + 1) * cp * hw].copy_from_slice(
                                &g.data()[(s * ctot + off) * hw..(s * ctot + off + cp) * hw],
                            );
                        }
                        self.acc(grads, p, Tensor::from_vec(&[n, cp, h, w], d));
                    }
                    off += cp;
                }
            }
            Op::Select { raw, known, mask } => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let mut draw = g.data().to_vec();
                let mut dknown = vec![0.0; g.len()];
                for s in 0..n {
                    let m = &mask.data()[s * hw..(s + 1) * hw];
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for (k, &mk) in m.iter().enumerate() {
                            if mk == 1.0 {
                                dknown[base + k] = draw[base + k];
                                draw[base + k] = 0.0;
                            }
                        }
                    }
                }
                self.acc(grads, *raw, Tensor::from_vec(&[n, c, h, w], draw));
                self.acc(grads, *known, Tensor::from_vec(&[n, c, h, w], dknown));
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                let rows = u.len();
                let cols = v.len();
                if *sigma <= SIGMA_FLOOR {
                    self.acc(grads, *w, g.map(|x| x / sigma));
                    return;
                }
                let gw: f64 = g.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
                let coef = gw / (sigma * sigma);
                let mut d = g.map(|x| x / sigma);
                for r in 0..rows {
                    for cc in 0..cols {
                        d.data_mut()[r * cols + cc] -= coef * u[r] * v[cc];
                    }
                }
                self.acc(grads, *w, d);
            }
            Op::Blur { x, kernel } => {
                let (n, c, h, w) = node.value.dims4();
                let mut tmp = vec![0.0; g.len()];
                let mut dx = vec![0.0; g.len()];
                for p in 0..n * c {
                    let gp = &g.data()[p * h * w..(p + 1) * h * w];
                    let t = &mut tmp[p * h * w..(p + 1) * h * w];
                    blur_cols_transpose(gp, t, h, w, kernel);
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    blur_rows_transpose(t, d, h, w, kernel);
                }
                self.acc(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = xv.dims4();
        let (cout, _, kh, kw) = wv.dims4();
        let (_, _, ho, wo) = g.dims4();
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let k = cin * kh * kw;
        let hw = ho * wo;
        let xin = cin * h * wd;
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut dw = vec![0.0; if need_w { cout * k } else { 0 }];
        let mut dx = vec![0.0; if need_x { n * xin } else { 0 }];
        let rows = if geo.is_pointwise() { ho } else { geo.chunk_rows(k) };
        let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { k * rows * wo }];
        let mut dcols = vec![0.0; k * rows * wo];
        for s in 0..n {
            let gs = &g.data()[s * cout * hw..(s + 1) * cout * hw];
            let xs = &xv.data()[s * xin..(s + 1) * xin];
            for oy0 in (0..ho).step_by(rows) {
                let oy1 = (oy0 + rows).min(ho);
                let m = (oy1 - oy0) * wo;
                let gc = &gs[oy0 * wo..];
                if need_w {
                    let colref: &[f64] = if geo.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &geo, oy0, oy1, &mut cols[..k * m]);
                        &cols[..k * m]
                    };
                    gemm(cout, m, k, gc, (hw, 1), colref, (1, m), &mut dw, 1.0);
                }
                if need_x {
                    gemm(k, cout, m, wv.data(), (1, k), gc, (hw, 1), &mut dcols[..k * m], 0.0);
                    let dxs = &mut dx[s * xin..(s + 1) * xin];
                    if geo.is_pointwise() {
                        dxs.copy_from_slice(&dcols);
                    } else {
                        col2im(&dcols[..k * m], &geo, oy0, oy1, dxs);
                    }
                }
            }
        }
        if need_x {
            self.acc(grads, x, Tensor::from_vec(&[n, cin, h, wd], dx));
        }
        if need_w {
            self.acc(grads, w, Tensor::from_vec(&[cout, cin, kh, kw], dw));
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; cout];
                for s in 0..n {
                    for (c, d) in db.iter_mut().enumerate() {
                        let base = (s * cout + c) * hw;
                        *d += g.data()[base..base + hw].iter().sum::<f64>();
                    }
                }
                self.acc(grads, b, Tensor::from_vec(&[cout], db));
            }
        }
    }
}

const SIGMA_FLOOR: f64 = 1e-12;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `uᵀ W v` for a row-major `rows x cols` matrix.
pub fn bilinear_form(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    (0..rows)
        .map(|r| u[r] * (0..cols).map(|c| w[r * cols + c] * v[c]).sum::<f64>())
        .sum()
}

/// Normalized Gaussian taps truncated at three standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows per im2col tile, sized to keep the column buffer in cache.
    fn chunk_rows(&self, k: usize) -> usize {
        (COL_TILE / (k * self.wo).max(1)).clamp(1, self.ho.max(1))
    }
}

/// Output index range `[lo, hi)` whose input coordinate `o * stride + k - pad` lands in `0..len`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

const COL_TILE: usize = 1 << 18;

/// Columns for output rows `oy0..oy1`.
fn im2col(x: &[f64], g: &ConvGeometry, oy0: usize, oy1: usize, cols: &mut [f64]) {
    let hw = (oy1 - oy0) * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = valid_range(g.h, g.ho, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (x0, x1) = valid_range(g.w, g.wo, kx, g.stride, g.pad);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (y0, y1) = (y0.clamp(oy0, oy1), y1.clamp(oy0, oy1));
                dst[..(y0 - oy0) * g.wo].fill(0.0);
                dst[(y1 - oy0) * g.wo..].fill(0.0);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    d[..x0].fill(0.0);
                    d[x1..].fill(0.0);
                    if x1 > x0 {
                        let ix0 = x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            d[x0..x1].copy_from_slice(&line[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (o, v) in d[x0..x1].iter_mut().zip(line[ix0..].iter().step_by(g.stride)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, oy0: usize, oy1: usize, dx: &mut [f64]) {
    let hw = (oy1 - oy0) * g.wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = valid_range(g.h, g.ho, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (x0, x1) = valid_range(g.w, g.wo, kx, g.stride, g.pad);
                if x1 <= x0 {
                    continue;
                }
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in y0.max(oy0)..y1.min(oy1) {
                    let iy = oy * g.stride + ky - g.pad;
                    let ix0 = x0 * g.stride + kx - g.pad;
                    let line = &mut plane[iy * g.w + ix0..(iy + 1) * g.w];
                    let r = (oy - oy0) * g.wo;
                    let s = &src[r + x0..r + x1];
                    for (o, v) in line.iter_mut().step_by(g.stride).zip(s) {
                        *o += *v;
                    }
                }
            }
        }
    }
}

/// `(i0, i1, frac)` per output index for half-pixel bilinear sampling.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

fn blur_rows(src: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + clamp_idx(x as isize + t as isize - r, w)];
            }
            dst[y * w + x] = acc;
        }
    }
}

fn blur_cols(src: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * src[clamp_idx(y as isize + t as isize - r, h) * w + x];
            }
            dst[y * w + x] = acc;
        }
    }
}

fn blur_rows_transpose(g: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for (t, kv) in k.iter().enumerate() {
                dst[y * w + clamp_idx(x as isize + t as isize - r, w)] += kv * gv;
            }
        }
    }
}

fn blur_cols_transpose(g: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for (t, kv) in k.iter().enumerate() {
                dst[clamp_idx(y as isize + t as isize - r, h) * w + x] += kv * gv;
            }
        }
    }
}

/// `C = A·B + beta·C` with C row-major `m x n`; A and B given by (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    gemm_ldc(m, k, n, a, a_strides, b, b_strides, c, n, beta);
}

/// `gemm` writing into rows of `c` spaced `ldc` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ldc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    ldc: usize,
    beta: f64,
) {
    assert!(m == 0 || c.len() >= (m - 1) * ldc + n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for v in &mut c[r * ldc..r * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, which the callers derive from tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at every coordinate of `x0`.
    fn numeric_grad(x0: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x0.shape());
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(
        shapes: &[&[usize]],
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, &mut rng)).collect();
        // random projection so the scalar depends on every output element
        let eval = |ins: &[Tensor]| -> (Tape, Var, Vec<Var>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let out = build(&mut t, &vars);
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let proj = Tensor::randn(t.shape(out), &mut r);
            let p = t.mul_const(out, proj);
            let s = t.sum(p);
            (t, s, vars)
        };
        let (tape, loss, vars) = eval(&inputs);
        let grads = tape.backward(loss);
        for (j, x0) in inputs.iter().enumerate() {
            let f = |xj: &Tensor| {
                let mut ins = inputs.clone();
                ins[j] = xj.clone();
                let (t, s, _) = eval(&ins);
                t.value(s).item()
            };
            let num = numeric_grad(x0, &f);
            let ana = grads.of(vars[j]).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
            let err = num.max_abs_diff(&ana);
            let scale = num.norm().max(1.0);
            assert!(err / scale < 1e-6, "input {j}: max abs err {err}");
        }
    }

    #[test]
    fn conv2d_gradients() {
        check(
            &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]],
            &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            1,
        );
        check(
            &[&[2, 3, 7, 5], &[2, 3, 3, 3]],
            &|t, v| t.conv2d(v[0], v[1], None, 2, 1),
            2,
        );
        check(
            &[&[1, 4, 3, 3], &[5, 4, 1, 1], &[5]],
            &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
            3,
        );
    }

    fn direct_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, kh, kw) = w.dims4();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                        acc += x.data()[x.idx4(s, ci, iy as usize, ix as usize)] * w.data()[w.idx4(co, ci, ky, kx)];
                                    }
                                }
                            }
                        }
                        let k = out.idx4(s, co, oy, ox);
                        out.data_mut()[k] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tiled_conv2d_matches_direct_sum() {
        // Wide enough that the column buffer is split into several row tiles.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for stride in [1, 2] {
            let x = Tensor::randn(&[2, 32, 9, 1200], &mut rng);
            let w = Tensor::randn(&[3, 32, 3, 3], &mut rng);
            let geo_rows = (COL_TILE / (32 * 9 * (1200 / stride))).max(1);
            assert!(geo_rows < 9 / stride);
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let y = t.conv2d(xv, wv, None, stride, 1);
            let want = direct_conv(&x, &w, stride, 1);
            assert_eq!(t.value(y).shape(), want.shape());
            for (a, b) in t.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-9);
            }
            // The map is linear, so each gradient entry is the response to a unit input.
            let g = Tensor::randn(want.shape(), &mut rng);
            let gv = t.constant(g.clone());
            let prod = t.mul(y, gv);
            let l = t.sum(prod);
            let grads = t.backward(l);
            let dx = grads.of(xv).unwrap().clone();
            let dw = grads.of(wv).unwrap().clone();
            let dot = |a: &Tensor| a.data().iter().zip(g.data()).map(|(p, q)| p * q).sum::<f64>();
            for _ in 0..6 {
                let i = rng.random_range(0..x.len());
                let mut e = Tensor::zeros(x.shape());
                e.data_mut()[i] = 1.0;
                assert!((dx.data()[i] - dot(&direct_conv(&e, &w, stride, 1))).abs() < 1e-9);
                let j = rng.random_range(0..w.len());
                let mut e = Tensor::zeros(w.shape());
                e.data_mut()[j] = 1.0;
                assert!((dw.data()[j] - dot(&direct_conv(&x, &e, stride, 1))).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 2, 5, 4], &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
        let y = t.conv2d(xv, wv, None, 2, 1);
        let out = t.value(y).clone();
        assert_eq!(out.shape(), &[1, 3, 3, 2]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                    continue;
                                }
                                acc += x.data()[x.idx4(0, ci, iy as usize, ix as usize)]
                                    * w.data()[w.idx4(co, ci, ky, kx)];
                            }
                        }
                    }
                    let got = out.data()[out.idx4(0, co, oy, ox)];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_and_elementwise_gradients() {
        check(&[&[3, 4], &[5, 4], &[5]], &|t, v| t.linear(v[0], v[1], Some(v[2])), 5);
        check(
            &[&[2, 3], &[2, 3]],
            &|t, v| {
                let a = t.mul(v[0], v[1]);
                let b = t.sub(a, v[1]);
                let c = t.softplus(b);
                let d = t.leaky_relu(c, 0.2);
                t.scale(d, -1.5)
            },
            6,
        );
    }

    #[test]
    fn normalization_gradients() {
        check(&[&[2, 3, 4, 3]], &|t, v| t.instance_norm(v[0], 1e-8), 7);
        check(
            &[&[3, 2, 3, 2], &[2], &[2]],
            &|t, v| t.batch_norm(v[0], v[1], v[2], 1e-5),
            8,
        );
        check(
            &[&[2, 3, 2, 2], &[2, 3], &[2, 3]],
            &|t, v| t.modulate(v[0], v[1], v[2]),
            9,
        );
        check(&[&[2, 3, 2, 2], &[3]], &|t, v| t.channel_scale(v[0], v[1]), 10);
    }

    #[test]
    fn resampling_gradients() {
        check(&[&[1, 2, 4, 6]], &|t, v| t.avg_pool2(v[0]), 11);
        check(&[&[1, 2, 3, 2]], &|t, v| t.upsample2(v[0]), 12);
        check(&[&[1, 2, 2, 1]], &|t, v| t.resize_nearest(v[0], 3, 2), 13);
        check(&[&[1, 2, 3, 5]], &|t, v| t.resize_bilinear(v[0], 7, 4), 14);
        check(&[&[1, 2, 5, 4]], &|t, v| t.blur(v[0], gaussian_kernel(0.8)), 15);
        check(
            &[&[2, 1, 2, 2], &[2, 3, 2, 2]],
            &|t, v| t.concat(&[v[0], v[1]]),
            16,
        );
    }

    #[test]
    fn spectral_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(
            &[&[3, 2, 2, 2]],
            &move |t, vars| t.spectral_norm(vars[0], u.clone(), v.clone()),
            18,
        );
    }

    #[test]
    fn select_routes_gradient_by_mask() {
        let mut t = Tape::new();
        let raw = t.leaf(Tensor::full(&[1, 2, 1, 2], 3.0));
        let known = t.leaf(Tensor::full(&[1, 2, 1, 2], -1.0));
        let mask = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 0.0]);
        let out = t.select(raw, known, mask);
        assert_eq!(t.value(out).data(), &[-1.0, 3.0, -1.0, 3.0]);
        let s = t.sum(out);
        let g = t.backward(s);
        assert_eq!(g.of(raw).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g.of(known).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
