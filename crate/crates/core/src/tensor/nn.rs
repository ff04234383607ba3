//! Layer primitives for small CNNs. Inner products accumulate in f64 so that
//! results do not depend on summation order beyond the final rounding.

use std::ops::Range;
use std::rc::Rc;

use super::{Float, Tensor};
use crate::error::{invalid, Error, Result};

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape {
            op,
            dim: "rank",
            expected: 4,
            got: t.shape().len(),
        }),
    }
}

fn out_size(op: &'static str, input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid(op, "stride must be >= 1"));
    }
    if input + 2 * padding < kernel {
        return Err(invalid(
            op,
            format!("kernel {kernel} larger than padded input {}", input + 2 * padding),
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(Error::Shape {
                op,
                dim: "bias",
                expected: channels,
                got: b.numel(),
            });
        }
    }
    Ok(())
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source offset (within one sample) for column-matrix entry (row, col).
    fn im2col(&self, x: &[Float], cols: &mut [Float]) {
        let p = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [Float]) {
        let p = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.ow + ox] as Float;
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, f_y, f_x]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = dims4(OP, self)?;
        let [co, ci, kh, kw] = dims4(OP, weight)?;
        if ci != c {
            return Err(Error::Shape {
                op: OP,
                dim: "C_in",
                expected: ci,
                got: c,
            });
        }
        check_bias(OP, bias, co)?;
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            oh: out_size(OP, h, kh, stride, padding)?,
            ow: out_size(OP, w, kw, stride, padding)?,
            stride,
            pad: padding,
        };
        let (k, p) = (g.rows(), g.cols());
        let x = self.data();
        let wv = weight.to_vec();
        let bv = bias.map(|b| b.to_vec());
        let mut cols = vec![0.0 as Float; n * k * p];
        let mut out = vec![0.0 as Float; n * co * p];
        let mut acc = vec![0f64; p];
        for s in 0..n {
            let col = &mut cols[s * k * p..(s + 1) * k * p];
            g.im2col(&x[s * c * h * w..(s + 1) * c * h * w], col);
            for o in 0..co {
                let b0 = bv.as_ref().map_or(0.0, |b| b[o] as f64);
                acc.iter_mut().for_each(|a| *a = b0);
                let wrow = &wv[o * k..(o + 1) * k];
                for (r, &wr) in wrow.iter().enumerate() {
                    if wr == 0.0 {
                        continue;
                    }
                    let wr = wr as f64;
                    for (a, &xv) in acc.iter_mut().zip(&col[r * p..(r + 1) * p]) {
                        *a += wr * xv as f64;
                    }
                }
                for (dst, a) in out[(s * co + o) * p..(s * co + o + 1) * p].iter_mut().zip(&acc) {
                    *dst = *a as Float;
                }
            }
        }
        drop(x);
        let cols = Rc::new(cols);
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            OP,
            vec![n, co, g.oh, g.ow],
            out,
            inputs,
            Box::new(move |grad| {
                let mut dw = vec![0f64; co * k];
                let mut db = vec![0f64; co];
                let mut dx = vec![0.0 as Float; n * c * h * w];
                let mut dcol = vec![0f64; k * p];
                for s in 0..n {
                    let col = &cols[s * k * p..(s + 1) * k * p];
                    dcol.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..co {
                        let gr = &grad[(s * co + o) * p..(s * co + o + 1) * p];
                        db[o] += gr.iter().map(|&v| v as f64).sum::<f64>();
                        for r in 0..k {
                            let xr = &col[r * p..(r + 1) * p];
                            dw[o * k + r] += gr.iter().zip(xr).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
                            let wr = wv[o * k + r] as f64;
                            if wr != 0.0 {
                                for (d, &gv) in dcol[r * p..(r + 1) * p].iter_mut().zip(gr) {
                                    *d += wr * gv as f64;
                                }
                            }
                        }
                    }
                    g.col2im(&dcol, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
                }
                let mut res = vec![
                    Some(dx),
                    Some(dw.into_iter().map(|v| v as Float).collect()),
                ];
                if has_bias {
                    res.push(Some(db.into_iter().map(|v| v as Float).collect()));
                }
                res
            }),
        ))
    }

    /// Per-channel convolution: input `[N, C, H, W]`, weight `[C, 1, f_y, f_x]`.
    pub fn depthwise_conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        const OP: &str = "depthwise_conv2d";
        let [n, c, h, w] = dims4(OP, self)?;
        let [co, one, kh, kw] = dims4(OP, weight)?;
        if co != c {
            return Err(Error::Shape { op: OP, dim: "channels", expected: co, got: c });
        }
        if one != 1 {
            return Err(Error::Shape { op: OP, dim: "weight axis 1", expected: 1, got: one });
        }
        check_bias(OP, bias, c)?;
        let oh = out_size(OP, h, kh, stride, padding)?;
        let ow = out_size(OP, w, kw, stride, padding)?;
        let x = self.to_vec();
        let wv = weight.to_vec();
        let bv = bias.map(|b| b.to_vec());
        // Visit (sample, channel, out pixel, tap, input offset) for every in-bounds tap.
        let taps = move |f: &mut dyn FnMut(usize, usize, usize, usize, usize)| {
            for s in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o = ((s * c + ch) * oh + oy) * ow + ox;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let i = ((s * c + ch) * h + iy as usize) * w + ix as usize;
                                    f(s, ch, o, (ch * kh + ky) * kw + kx, i);
                                }
                            }
                        }
                    }
                }
            }
        };
        let mut acc = vec![0f64; n * c * oh * ow];
        for s in 0..n {
            for ch in 0..c {
                let b0 = bv.as_ref().map_or(0.0, |b| b[ch] as f64);
                acc[(s * c + ch) * oh * ow..(s * c + ch + 1) * oh * ow].iter_mut().for_each(|a| *a = b0);
            }
        }
        taps(&mut |_, _, o, wi, i| acc[o] += wv[wi] as f64 * x[i] as f64);
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            OP,
            vec![n, c, oh, ow],
            acc.into_iter().map(|v| v as Float).collect(),
            inputs,
            Box::new(move |g| {
                let mut dx = vec![0f64; x.len()];
                let mut dw = vec![0f64; wv.len()];
                let mut db = vec![0f64; c];
                taps(&mut |_, _, o, wi, i| {
                    dx[i] += g[o] as f64 * wv[wi] as f64;
                    dw[wi] += g[o] as f64 * x[i] as f64;
                });
                for s in 0..n {
                    for ch in 0..c {
                        db[ch] += g[(s * c + ch) * oh * ow..(s * c + ch + 1) * oh * ow]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                }
                let cast = |v: Vec<f64>| Some(v.into_iter().map(|v| v as Float).collect());
                let mut res = vec![cast(dx), cast(dw)];
                if has_bias {
                    res.push(cast(db));
                }
                res
            }),
        ))
    }

    /// Affine map of `[N, F_in]` by `[F_out, F_in]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        const OP: &str = "linear";
        let [n, fi] = match *self.shape() {
            [a, b] => [a, b],
            _ => return Err(Error::Shape { op: OP, dim: "rank", expected: 2, got: self.shape().len() }),
        };
        let [fo, wi] = match *weight.shape() {
            [a, b] => [a, b],
            _ => return Err(Error::Shape { op: OP, dim: "weight rank", expected: 2, got: weight.shape().len() }),
        };
        if wi != fi {
            return Err(Error::Shape { op: OP, dim: "F_in", expected: wi, got: fi });
        }
        check_bias(OP, bias, fo)?;
        let x = self.to_vec();
        let wv = weight.to_vec();
        let bv = bias.map(|b| b.to_vec());
        let mut out = vec![0.0 as Float; n * fo];
        for s in 0..n {
            let xr = &x[s * fi..(s + 1) * fi];
            for o in 0..fo {
                let wr = &wv[o * fi..(o + 1) * fi];
                let v: f64 = xr.iter().zip(wr).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
                    + bv.as_ref().map_or(0.0, |b| b[o] as f64);
                out[s * fo + o] = v as Float;
            }
        }
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            OP,
            vec![n, fo],
            out,
            inputs,
            Box::new(move |g| {
                let mut dx = vec![0f64; n * fi];
                let mut dw = vec![0f64; fo * fi];
                let mut db = vec![0f64; fo];
                for s in 0..n {
                    for o in 0..fo {
                        let gv = g[s * fo + o] as f64;
                        if gv == 0.0 {
                            continue;
                        }
                        db[o] += gv;
                        for j in 0..fi {
                            dx[s * fi + j] += gv * wv[o * fi + j] as f64;
                            dw[o * fi + j] += gv * x[s * fi + j] as f64;
                        }
                    }
                }
                let cast = |v: Vec<f64>| Some(v.into_iter().map(|v| v as Float).collect());
                let mut res = vec![cast(dx), cast(dw)];
                if has_bias {
                    res.push(cast(db));
                }
                res
            }),
        ))
    }

    /// Non-overlapping `k x k` max pooling (stride `k`, floor semantics).
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor> {
        const OP: &str = "max_pool2d";
        let [n, c, h, w] = dims4(OP, self)?;
        if k == 0 || k > h || k > w {
            return Err(invalid(OP, format!("window {k} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (Float::NEG_INFINITY, 0usize);
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (nc * h + oy * k + dy) * w + ox * k + dx;
                            if x[i] > best.0 {
                                best = (x[i], i);
                            }
                        }
                    }
                    out.push(best.0);
                    arg.push(best.1);
                }
            }
        }
        drop(x);
        let len = self.numel();
        Ok(Tensor::from_op(
            OP,
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; len];
                for (gv, &i) in g.iter().zip(&arg) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [n, c, h, w] = dims4("global_avg_pool", self)?;
        let hw = h * w;
        let x = self.data();
        let out = x
            .chunks(hw)
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as Float)
            .collect();
        drop(x);
        Ok(Tensor::from_op(
            "global_avg_pool",
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for gv in g {
                    dx.extend(std::iter::repeat_n(gv / hw as Float, hw));
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&self) -> Result<Tensor> {
        let n = self.shape()[0];
        self.reshape(&[n, self.numel() / n])
    }

    /// Channels `range` of a `[N, C, ...]` tensor.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if range.start >= range.end || range.end > c {
            return Err(invalid("slice_channels", format!("{range:?} of {c} channels")));
        }
        let inner = self.numel() / (n * c);
        let x = self.data();
        let mut out = Vec::with_capacity(n * range.len() * inner);
        for s in 0..n {
            out.extend_from_slice(&x[(s * c + range.start) * inner..(s * c + range.end) * inner]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[1] = range.len();
        let len = self.numel();
        Ok(Tensor::from_op(
            "slice_channels",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; len];
                let width = range.len() * inner;
                for s in 0..n {
                    dx[(s * c + range.start) * inner..(s * c + range.end) * inner]
                        .copy_from_slice(&g[s * width..(s + 1) * width]);
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Concatenates `[N, C_k, ...]` tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let first = parts.first().ok_or_else(|| invalid(OP, "no inputs"))?;
    let n = first.shape()[0];
    let rest = first.shape()[2..].to_vec();
    let inner: usize = rest.iter().product();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.shape()[0] != n {
            return Err(Error::Shape { op: OP, dim: "batch", expected: n, got: p.shape()[0] });
        }
        if p.shape()[2..] != rest[..] {
            return Err(invalid(OP, format!("trailing dims {:?} vs {:?}", &p.shape()[2..], rest)));
        }
        widths.push(p.shape()[1]);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total * inner);
    let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
    for s in 0..n {
        for (d, &cw) in datas.iter().zip(&widths) {
            out.extend_from_slice(&d[s * cw * inner..(s + 1) * cw * inner]);
        }
    }
    drop(datas);
    let mut shape = vec![n, total];
    shape.extend(rest);
    Ok(Tensor::from_op(
        OP,
        shape,
        out,
        parts.to_vec(),
        Box::new(move |g| {
            let mut grads: Vec<Vec<Float>> = widths.iter().map(|&cw| Vec::with_capacity(n * cw * inner)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gr, &cw) in grads.iter_mut().zip(&widths) {
                    gr.extend_from_slice(&g[off..off + cw * inner]);
                    off += cw * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Mean softmax cross-entropy of `[N, K]` logits against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    const OP: &str = "cross_entropy";
    let [n, k] = match *logits.shape() {
        [a, b] => [a, b],
        _ => return Err(Error::Shape { op: OP, dim: "rank", expected: 2, got: logits.shape().len() }),
    };
    if labels.len() != n {
        return Err(Error::Shape { op: OP, dim: "labels", expected: n, got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(OP, format!("label {bad} out of {k} classes")));
    }
    let x = logits.data();
    let mut probs = vec![0f64; n * k];
    let mut loss = 0f64;
    for s in 0..n {
        let row = &x[s * k..(s + 1) * k];
        let m = row.iter().fold(Float::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        for j in 0..k {
            probs[s * k + j] = (row[j] as f64 - m).exp() / z;
        }
        loss += z.ln() + m - row[labels[s]] as f64;
    }
    drop(x);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        OP,
        vec![1],
        vec![(loss / n as f64) as Float],
        vec![logits.clone()],
        Box::new(move |g| {
            let scale = g[0] as f64 / n as f64;
            let mut dx: Vec<Float> = probs.iter().map(|p| (p * scale) as Float).collect();
            for (s, &l) in labels.iter().enumerate() {
                dx[s * k + l] -= scale as Float;
            }
            vec![Some(dx)]
        }),
    ))
}

fn channel_layout(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(invalid(op, format!("expects [N,C] or [N,C,H,W], got {:?}", x.shape()))),
    }
}

/// Training-mode batch normalization. Returns the output together with the
/// per-channel batch mean and (biased) variance for running statistics.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: Float) -> Result<(Tensor, Vec<Float>, Vec<Float>)> {
    const OP: &str = "batch_norm_train";
    let (n, c, hw) = channel_layout(OP, x)?;
    check_bias(OP, Some(gamma), c)?;
    check_bias(OP, Some(beta), c)?;
    let xv = x.data();
    let m = (n * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for s in 0..n {
        for ch in 0..c {
            for v in &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                mean[ch] += *v as f64;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for ch in 0..c {
            for v in &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                var[ch] += (*v as f64 - mean[ch]).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let mut xhat = vec![0f64; xv.len()];
    let mut out = vec![0.0 as Float; xv.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                xhat[i] = (xv[i] as f64 - mean[ch]) * inv_std[ch];
                out[i] = (gv[ch] as f64 * xhat[i] + bv[ch] as f64) as Float;
            }
        }
    }
    drop(xv);
    let y = Tensor::from_op(
        OP,
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let mut sum_g = vec![0f64; c];
            let mut sum_gx = vec![0f64; c];
            for s in 0..n {
                for ch in 0..c {
                    for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                        sum_g[ch] += g[i] as f64;
                        sum_gx[ch] += g[i] as f64 * xhat[i];
                    }
                }
            }
            let mut dx = vec![0.0 as Float; g.len()];
            for s in 0..n {
                for ch in 0..c {
                    let k = gv[ch] as f64 * inv_std[ch] / m;
                    for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                        dx[i] = (k * (m * g[i] as f64 - sum_g[ch] - xhat[i] * sum_gx[ch])) as Float;
                    }
                }
            }
            let cast = |v: Vec<f64>| Some(v.into_iter().map(|v| v as Float).collect());
            vec![Some(dx), cast(sum_gx), cast(sum_g)]
        }),
    );
    let cast = |v: Vec<f64>| v.into_iter().map(|v| v as Float).collect();
    Ok((y, cast(mean), cast(var)))
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[Float], var: &[Float], eps: Float) -> Result<Tensor> {
    const OP: &str = "batch_norm_eval";
    let (n, c, hw) = channel_layout(OP, x)?;
    check_bias(OP, Some(gamma), c)?;
    check_bias(OP, Some(beta), c)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Shape { op: OP, dim: "statistics", expected: c, got: mean.len().min(var.len()) });
    }
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (*v as f64 + eps as f64).sqrt()).collect();
    let xv = x.to_vec();
    let mut out = vec![0.0 as Float; xv.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                out[i] = ((xv[i] as f64 - mean[ch] as f64) * inv_std[ch] * gv[ch] as f64 + bv[ch] as f64) as Float;
            }
        }
    }
    let mean: Vec<f64> = mean.iter().map(|&v| v as f64).collect();
    Ok(Tensor::from_op(
        OP,
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let mut dx = vec![0.0 as Float; g.len()];
            let mut dg = vec![0f64; c];
            let mut db = vec![0f64; c];
            for s in 0..n {
                for ch in 0..c {
                    for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                        let xh = (xv[i] as f64 - mean[ch]) * inv_std[ch];
                        dx[i] = (g[i] as f64 * gv[ch] as f64 * inv_std[ch]) as Float;
                        dg[ch] += g[i] as f64 * xh;
                        db[ch] += g[i] as f64;
                    }
                }
            }
            let cast = |v: Vec<f64>| Some(v.into_iter().map(|v| v as Float).collect());
            vec![Some(dx), cast(dg), cast(db)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn conv_channel_mismatch_names_c_in() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 5, 3, 3]);
        match x.conv2d(&w, None, 1, 1) {
            Err(Error::Shape { dim: "C_in", expected: 5, got: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(x.conv2d(&Tensor::zeros(&[3, 2, 3, 3]), None, 0, 1).is_err());
    }

    #[test]
    fn linear_hand_example() {
        let x = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let y = x.linear(&w, Some(&Tensor::zeros(&[2]))).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 0.0]);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(&[1, 2], vec![0.3, -7.0]).unwrap();
        assert_eq!(x.linear(&eye, None).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn pooling_shapes() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 5.0, -1.0, 2.0]).unwrap();
        assert_eq!(x.max_pool2d(2).unwrap().to_vec(), vec![5.0]);
        assert_eq!(x.global_avg_pool().unwrap().to_vec(), vec![1.75]);
    }

    #[test]
    fn concat_then_slice_round_trip() {
        let a = Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2, 1, 2], (0..8).map(|v| v as Float).collect()).unwrap();
        let c = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(c.slice_channels(0..1).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.slice_channels(1..3).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = Tensor::zeros(&[3, 4]);
        let v = cross_entropy(&l, &[0, 1, 3]).unwrap().item();
        assert!((v as f64 - 4f64.ln()).abs() < 1e-6);
        assert!(cross_entropy(&l, &[0, 1, 4]).is_err());
    }
}
