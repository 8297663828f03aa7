//! Differentiable operations. Each method validates shapes with asserts (shape
//! errors here are caller bugs), computes the forward value eagerly and pushes
//! a backward closure.
//!
//! Reduction order matters for tests that compare against straightforward
//! reference implementations: every sum below accumulates in ascending scan
//! order (channel, then row, then column), one accumulator per output element.

use log::debug;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Indexing helper for a `[c, h, w]` tensor viewed as a flat slice.
#[inline]
fn at3(w: usize, hw: usize, c: usize, y: usize, x: usize) -> usize {
    c * hw + y * w + x
}

impl Tape {
    /// Elementwise `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, 1.0)
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, -1.0)
    }

    /// Elementwise `a + scale * b`. The workhorse of Runge-Kutta updates.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add_scaled shape mismatch");
        let mut out = va.clone();
        out.add_scaled_assign(vb, scale);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |args| {
                let mut gb = args.grad.clone();
                gb.scale_assign(scale);
                vec![args.grad.clone(), gb]
            })),
        )
    }

    /// Elementwise `a / divisor`. True division, not multiplication by a
    /// reciprocal, so results match reference code that divides.
    pub fn div_scalar(&mut self, a: Var, divisor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x / divisor).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let ga = args.grad.data().iter().map(|g| g / divisor).collect();
                vec![Tensor::from_vec(args.grad.shape(), ga)]
            })),
        )
    }

    /// Elementwise `scale * a`.
    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(scale);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let mut ga = args.grad.clone();
                ga.scale_assign(scale);
                vec![ga]
            })),
        )
    }

    /// Elementwise `k * a + b` for constants `k` and `b`.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| k * x + b).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let mut ga = args.grad.clone();
                ga.scale_assign(k);
                vec![ga]
            })),
        )
    }

    /// Elementwise `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|args| {
                let (va, vb) = (args.parents[0], args.parents[1]);
                let ga = args.grad.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                let gb = args.grad.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                vec![Tensor::from_vec(va.shape(), ga), Tensor::from_vec(vb.shape(), gb)]
            })),
        )
    }

    /// Elementwise `max(a, 0)`. Subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        self.push(
            out,
            vec![a],
            Some(Box::new(|args| {
                let ga = args
                    .grad
                    .data()
                    .iter()
                    .zip(args.value.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Tensor::from_vec(args.grad.shape(), ga)]
            })),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = 0.0;
        for v in self.value(a).data() {
            acc += v;
        }
        self.push(
            Tensor::scalar(acc),
            vec![a],
            Some(Box::new(|args| {
                vec![Tensor::filled(args.parents[0].shape(), args.grad.item())]
            })),
        )
    }

    /// Matrix-vector product: `m` is `[n, k]`, `x` is `[k]`, result `[n]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let (vm, vx) = (self.value(m), self.value(x));
        assert_eq!(vm.shape().len(), 2, "matvec lhs must be rank 2");
        assert_eq!(vx.shape().len(), 1, "matvec rhs must be rank 1");
        let (n, k) = (vm.shape()[0], vm.shape()[1]);
        assert_eq!(k, vx.shape()[0], "matvec inner dimension mismatch");
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &vm.data()[i * k..(i + 1) * k];
            let mut acc = 0.0;
            for j in 0..k {
                acc += row[j] * vx.data()[j];
            }
            out[i] = acc;
        }
        self.push(
            Tensor::from_vec(&[n], out),
            vec![m, x],
            Some(Box::new(move |args| {
                let (vm, vx) = (args.parents[0], args.parents[1]);
                let g = args.grad.data();
                let mut gm = vec![0.0; n * k];
                let mut gx = vec![0.0; k];
                for i in 0..n {
                    for j in 0..k {
                        gm[i * k + j] = g[i] * vx.data()[j];
                        gx[j] += g[i] * vm.data()[i * k + j];
                    }
                }
                vec![Tensor::from_vec(&[n, k], gm), Tensor::from_vec(&[k], gx)]
            })),
        )
    }

    /// Appends one channel filled with a constant to a `[c, h, w]` tensor.
    /// The constant channel receives no gradient.
    pub fn concat_channel_const(&mut self, a: Var, fill: f64) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 3, "concat_channel_const expects [c,h,w]");
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let hw = h * w;
        let mut data = Vec::with_capacity((c + 1) * hw);
        data.extend_from_slice(va.data());
        data.extend(std::iter::repeat(fill).take(hw));
        self.push(
            Tensor::from_vec(&[c + 1, h, w], data),
            vec![a],
            Some(Box::new(move |args| {
                let ga = args.grad.data()[..c * hw].to_vec();
                vec![Tensor::from_vec(&[c, h, w], ga)]
            })),
        )
    }

    /// 2D convolution with odd square kernels, stride 1 and zero padding that
    /// preserves the spatial size. Input `[ci, h, w]`, kernel `[co, ci, k, k]`,
    /// bias `[co]`, output `[co, h, w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        let (vi, vk, vb) = (self.value(input), self.value(kernel), self.value(bias));
        assert_eq!(vi.shape().len(), 3, "conv2d input must be [ci,h,w]");
        assert_eq!(vk.shape().len(), 4, "conv2d kernel must be [co,ci,k,k]");
        let (ci, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let (co, kci, kh, kw) = (vk.shape()[0], vk.shape()[1], vk.shape()[2], vk.shape()[3]);
        assert_eq!(ci, kci, "conv2d channel mismatch");
        assert_eq!(kh, kw, "conv2d kernel must be square");
        assert_eq!(kh % 2, 1, "conv2d kernel side must be odd");
        assert_eq!(vb.shape(), &[co], "conv2d bias shape mismatch");
        let p = kh / 2;
        let hw = h * w;

        let mut out = vec![0.0; co * hw];
        for o in 0..co {
            let out_o = &mut out[o * hw..(o + 1) * hw];
            out_o.fill(vb.data()[o]);
            for c in 0..ci {
                let in_c = &vi.data()[c * hw..(c + 1) * hw];
                for ky in 0..kh {
                    let y_lo = p.saturating_sub(ky);
                    let y_hi = (h + p).saturating_sub(ky).min(h);
                    for kx in 0..kw {
                        let wk = vk.data()[((o * ci + c) * kh + ky) * kw + kx];
                        let x_lo = p.saturating_sub(kx);
                        let x_hi = (w + p).saturating_sub(kx).min(w);
                        for y in y_lo..y_hi {
                            let iy = y + ky - p;
                            let orow = &mut out_o[y * w..y * w + w];
                            let irow = &in_c[iy * w..iy * w + w];
                            for x in x_lo..x_hi {
                                orow[x] += wk * irow[x + kx - p];
                            }
                        }
                    }
                }
            }
        }

        self.push(
            Tensor::from_vec(&[co, h, w], out),
            vec![input, kernel, bias],
            Some(Box::new(move |args| {
                let (vi, vk, _vb) = (args.parents[0], args.parents[1], args.parents[2]);
                let g = args.grad.data();
                let mut gi = vec![0.0; ci * hw];
                let mut gk = vec![0.0; co * ci * kh * kw];
                let mut gb = vec![0.0; co];
                for o in 0..co {
                    let g_o = &g[o * hw..(o + 1) * hw];
                    let mut acc = 0.0;
                    for v in g_o {
                        acc += v;
                    }
                    gb[o] = acc;
                    for c in 0..ci {
                        let in_c = &vi.data()[c * hw..(c + 1) * hw];
                        let gi_c = &mut gi[c * hw..(c + 1) * hw];
                        for ky in 0..kh {
                            let y_lo = p.saturating_sub(ky);
                            let y_hi = (h + p).saturating_sub(ky).min(h);
                            for kx in 0..kw {
                                let kidx = ((o * ci + c) * kh + ky) * kw + kx;
                                let wk = vk.data()[kidx];
                                let x_lo = p.saturating_sub(kx);
                                let x_hi = (w + p).saturating_sub(kx).min(w);
                                let mut wacc = 0.0;
                                for y in y_lo..y_hi {
                                    let iy = y + ky - p;
                                    let grow = &g_o[y * w..y * w + w];
                                    let irow = &in_c[iy * w..iy * w + w];
                                    let girow = &mut gi_c[iy * w..iy * w + w];
                                    for x in x_lo..x_hi {
                                        let ix = x + kx - p;
                                        girow[ix] += wk * grow[x];
                                        wacc += grow[x] * irow[ix];
                                    }
                                }
                                gk[kidx] += wacc;
                            }
                        }
                    }
                }
                vec![
                    Tensor::from_vec(&[ci, h, w], gi),
                    Tensor::from_vec(&[co, ci, kh, kw], gk),
                    Tensor::from_vec(&[co], gb),
                ]
            })),
        )
    }

    /// 2x2 max pooling with stride 2 on `[c, h, w]`; h and w must be even.
    /// Ties route the gradient to the first maximal element in scan order.
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 3, "max_pool2 expects [c,h,w]");
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {}x{}", h, w);
        let (oh, ow) = (h / 2, w / 2);
        let hw = h * w;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = at3(w, hw, ch, 2 * oy, 2 * ox);
                    let mut best = va.data()[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = at3(w, hw, ch, 2 * oy + dy, 2 * ox + dx);
                        let v = va.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    let oidx = ch * oh * ow + oy * ow + ox;
                    out[oidx] = best;
                    argmax[oidx] = best_idx as u32;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, oh, ow], out),
            vec![a],
            Some(Box::new(move |args| {
                let mut ga = vec![0.0; c * hw];
                for (g, &idx) in args.grad.data().iter().zip(&argmax) {
                    ga[idx as usize] += g;
                }
                vec![Tensor::from_vec(&[c, h, w], ga)]
            })),
        )
    }

    /// Bilinear upsampling of `[c, h, w]` to `[c, oh, ow]` with aligned
    /// corners. Implemented as nested linear interpolation, so a spatially
    /// constant input reproduces exactly.
    pub fn bilinear_upsample(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 3, "bilinear_upsample expects [c,h,w]");
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert!(h >= 1 && w >= 1 && oh >= 1 && ow >= 1);
        let hw = h * w;

        let axis = |n: usize, on: usize| -> Vec<(usize, usize, f64)> {
            (0..on)
                .map(|o| {
                    if on == 1 || n == 1 {
                        return (0, 0, 0.0);
                    }
                    let s = o as f64 * (n - 1) as f64 / (on - 1) as f64;
                    let i0 = (s.floor() as usize).min(n - 1);
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let ys = axis(h, oh);
        let xs = axis(w, ow);

        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let in_c = &va.data()[ch * hw..(ch + 1) * hw];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = in_c[y0 * w + x0];
                    let v01 = in_c[y0 * w + x1];
                    let v10 = in_c[y1 * w + x0];
                    let v11 = in_c[y1 * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    out[ch * oh * ow + oy * ow + ox] = top + fy * (bot - top);
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, oh, ow], out),
            vec![a],
            Some(Box::new(move |args| {
                let axis = |n: usize, on: usize| -> Vec<(usize, usize, f64)> {
                    (0..on)
                        .map(|o| {
                            if on == 1 || n == 1 {
                                return (0, 0, 0.0);
                            }
                            let s = o as f64 * (n - 1) as f64 / (on - 1) as f64;
                            let i0 = (s.floor() as usize).min(n - 1);
                            let i1 = (i0 + 1).min(n - 1);
                            (i0, i1, s - i0 as f64)
                        })
                        .collect()
                };
                let ys = axis(h, oh);
                let xs = axis(w, ow);
                let g = args.grad.data();
                let mut ga = vec![0.0; c * hw];
                for ch in 0..c {
                    let ga_c = &mut ga[ch * hw..(ch + 1) * hw];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let go = g[ch * oh * ow + oy * ow + ox];
                            let gtop = go * (1.0 - fy);
                            let gbot = go * fy;
                            ga_c[y0 * w + x0] += gtop * (1.0 - fx);
                            ga_c[y0 * w + x1] += gtop * fx;
                            ga_c[y1 * w + x0] += gbot * (1.0 - fx);
                            ga_c[y1 * w + x1] += gbot * fx;
                        }
                    }
                }
                vec![Tensor::from_vec(&[c, h, w], ga)]
            })),
        )
    }

    /// Mean of the selected pixels per channel: `[c, h, w]` with a boolean
    /// pixel selection of size `h*w` yields `[c]`. `count` must equal the
    /// number of selected pixels and be positive; the sum runs in scan order.
    pub fn masked_mean(&mut self, a: Var, selected: Vec<bool>, count: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 3, "masked_mean expects [c,h,w]");
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let hw = h * w;
        assert_eq!(selected.len(), hw, "masked_mean selection size mismatch");
        assert!(count > 0, "masked_mean needs at least one selected pixel");
        debug_assert_eq!(selected.iter().filter(|s| **s).count(), count);

        let inv = 1.0 / count as f64;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let in_c = &va.data()[ch * hw..(ch + 1) * hw];
            let mut acc = 0.0;
            for (v, sel) in in_c.iter().zip(&selected) {
                if *sel {
                    acc += v;
                }
            }
            out[ch] = acc / count as f64;
        }
        self.push(
            Tensor::from_vec(&[c], out),
            vec![a],
            Some(Box::new(move |args| {
                let g = args.grad.data();
                let mut ga = vec![0.0; c * hw];
                for ch in 0..c {
                    let gch = g[ch] * inv;
                    let ga_c = &mut ga[ch * hw..(ch + 1) * hw];
                    for (slot, sel) in ga_c.iter_mut().zip(&selected) {
                        if *sel {
                            *slot = gch;
                        }
                    }
                }
                vec![Tensor::from_vec(&[c, h, w], ga)]
            })),
        )
    }

    /// Stacks rank-1 vars of equal length `d` into `[n, d]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let d = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let vr = self.value(r);
            assert_eq!(vr.shape().len(), 1, "stack_rows expects rank-1 inputs");
            assert_eq!(vr.len(), d, "stack_rows length mismatch");
            data.extend_from_slice(vr.data());
        }
        let n = rows.len();
        self.push(
            Tensor::from_vec(&[n, d], data),
            rows.to_vec(),
            Some(Box::new(move |args| {
                (0..n)
                    .map(|i| Tensor::from_vec(&[d], args.grad.data()[i * d..(i + 1) * d].to_vec()))
                    .collect()
            })),
        )
    }

    /// Cosine similarity between each pixel feature of `z` (`[c, h, w]`) and
    /// each prototype row of `protos` (`[n, c]`), yielding `[n, h, w]`.
    /// Pairs where either vector has zero norm get similarity 0 (and zero
    /// gradient); such pixels are counted and reported via `log::debug`.
    pub fn cosine_map(&mut self, z: Var, protos: Var) -> Var {
        let (vz, vp) = (self.value(z), self.value(protos));
        assert_eq!(vz.shape().len(), 3, "cosine_map features must be [c,h,w]");
        assert_eq!(vp.shape().len(), 2, "cosine_map prototypes must be [n,c]");
        let (c, h, w) = (vz.shape()[0], vz.shape()[1], vz.shape()[2]);
        let n = vp.shape()[0];
        assert_eq!(vp.shape()[1], c, "cosine_map feature dim mismatch");
        let hw = h * w;

        let mut pnorms = vec![0.0; n];
        for i in 0..n {
            let row = &vp.data()[i * c..(i + 1) * c];
            let mut acc = 0.0;
            for v in row {
                acc += v * v;
            }
            pnorms[i] = acc.sqrt();
        }

        let mut degenerate = 0usize;
        let mut out = vec![0.0; n * hw];
        for px in 0..hw {
            let mut zn = 0.0;
            for ch in 0..c {
                let v = vz.data()[ch * hw + px];
                zn += v * v;
            }
            let zn = zn.sqrt();
            for i in 0..n {
                let denom = zn * pnorms[i];
                let s = if denom == 0.0 {
                    degenerate += 1;
                    0.0
                } else {
                    let row = &vp.data()[i * c..(i + 1) * c];
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += vz.data()[ch * hw + px] * row[ch];
                    }
                    dot / denom
                };
                out[i * hw + px] = s;
            }
        }
        if degenerate > 0 {
            debug!("cosine_map: {} zero-norm pixel/prototype pairs mapped to similarity 0", degenerate);
        }

        self.push(
            Tensor::from_vec(&[n, h, w], out),
            vec![z, protos],
            Some(Box::new(move |args| {
                let (vz, vp) = (args.parents[0], args.parents[1]);
                let s = args.value.data();
                let g = args.grad.data();
                let mut pnorms = vec![0.0; n];
                for i in 0..n {
                    let row = &vp.data()[i * c..(i + 1) * c];
                    pnorms[i] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                }
                let mut gz = vec![0.0; c * hw];
                let mut gp = vec![0.0; n * c];
                for px in 0..hw {
                    let mut zn2 = 0.0;
                    for ch in 0..c {
                        let v = vz.data()[ch * hw + px];
                        zn2 += v * v;
                    }
                    let zn = zn2.sqrt();
                    for i in 0..n {
                        let denom = zn * pnorms[i];
                        if denom == 0.0 {
                            continue;
                        }
                        let go = g[i * hw + px];
                        if go == 0.0 {
                            continue;
                        }
                        let sv = s[i * hw + px];
                        let row = &vp.data()[i * c..(i + 1) * c];
                        let gp_i = &mut gp[i * c..(i + 1) * c];
                        for ch in 0..c {
                            let zc = vz.data()[ch * hw + px];
                            gz[ch * hw + px] += go * (row[ch] / denom - sv * zc / zn2);
                            gp_i[ch] += go * (zc / denom - sv * row[ch] / (pnorms[i] * pnorms[i]));
                        }
                    }
                }
                vec![Tensor::from_vec(&[c, h, w], gz), Tensor::from_vec(&[n, c], gp)]
            })),
        )
    }

    /// Cosine similarity of two tensors viewed as flat vectors, as a scalar.
    /// Zero-norm inputs yield similarity 0 with zero gradient.
    pub fn cosine_flat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "cosine_flat length mismatch");
        let mut dot = 0.0;
        let mut na2 = 0.0;
        let mut nb2 = 0.0;
        for (x, y) in va.data().iter().zip(vb.data()) {
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
        }
        let denom = na2.sqrt() * nb2.sqrt();
        let s = if denom == 0.0 {
            debug!("cosine_flat: zero-norm input mapped to similarity 0");
            0.0
        } else {
            dot / denom
        };
        self.push(
            Tensor::scalar(s),
            vec![a, b],
            Some(Box::new(move |args| {
                let (va, vb) = (args.parents[0], args.parents[1]);
                if denom == 0.0 {
                    return vec![Tensor::zeros(va.shape()), Tensor::zeros(vb.shape())];
                }
                let g = args.grad.item();
                let sv = args.value.item();
                let na = na2.sqrt();
                let nb = nb2.sqrt();
                let ga = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| g * (y / (na * nb) - sv * x / na2))
                    .collect();
                let gb = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| g * (x / (na * nb) - sv * y / nb2))
                    .collect();
                vec![Tensor::from_vec(va.shape(), ga), Tensor::from_vec(vb.shape(), gb)]
            })),
        )
    }

    /// Softmax across the leading (class) axis of `[n, h, w]`, per pixel.
    pub fn softmax_channels(&mut self, logits: Var) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape().len(), 3, "softmax_channels expects [n,h,w]");
        let (n, h, w) = (vl.shape()[0], vl.shape()[1], vl.shape()[2]);
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for px in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(vl.data()[i * hw + px]);
            }
            let mut z = 0.0;
            for i in 0..n {
                let e = (vl.data()[i * hw + px] - m).exp();
                out[i * hw + px] = e;
                z += e;
            }
            for i in 0..n {
                out[i * hw + px] /= z;
            }
        }
        self.push(
            Tensor::from_vec(&[n, h, w], out),
            vec![logits],
            Some(Box::new(move |args| {
                let p = args.value.data();
                let g = args.grad.data();
                let mut gl = vec![0.0; n * hw];
                for px in 0..hw {
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += g[i * hw + px] * p[i * hw + px];
                    }
                    for i in 0..n {
                        gl[i * hw + px] = p[i * hw + px] * (g[i * hw + px] - dot);
                    }
                }
                vec![Tensor::from_vec(&[n, h, w], gl)]
            })),
        )
    }

    /// Mean over pixels of `-ln(max(p_target, floor))` where `target[px]` is
    /// the channel index of the ground-truth class. Probabilities at or below
    /// the floor contribute a constant and receive zero gradient.
    pub fn cross_entropy_mean(&mut self, probs: Var, target: Vec<usize>, floor: f64) -> Var {
        let vp = self.value(probs);
        assert_eq!(vp.shape().len(), 3, "cross_entropy_mean expects [n,h,w]");
        let (n, h, w) = (vp.shape()[0], vp.shape()[1], vp.shape()[2]);
        let hw = h * w;
        assert_eq!(target.len(), hw, "cross_entropy_mean target size mismatch");
        assert!(target.iter().all(|&t| t < n), "cross_entropy_mean target channel out of range");

        let mut acc = 0.0;
        for (px, &t) in target.iter().enumerate() {
            let p = vp.data()[t * hw + px];
            acc += p.max(floor).ln();
        }
        let loss = -acc / hw as f64;
        self.push(
            Tensor::scalar(loss),
            vec![probs],
            Some(Box::new(move |args| {
                let vp = args.parents[0];
                let g = args.grad.item();
                let scale = -g / hw as f64;
                let mut gp = vec![0.0; n * hw];
                for (px, &t) in target.iter().enumerate() {
                    let p = vp.data()[t * hw + px];
                    if p > floor {
                        gp[t * hw + px] = scale / p;
                    }
                }
                vec![Tensor::from_vec(&[n, h, w], gp)]
            })),
        )
    }
}
