//! Differentiable operations. Each op computes its value eagerly and records
//! a closure producing the parents' gradients.

use super::graph::{Graph, Var};
use super::kernels::{conv3d_backward, conv3d_forward, gemm, ConvGeom};
use crate::error::{dim_err, Result};
use crate::tensor::{split_axis, Tensor};
use crate::wavelet::{self, SubBandSet, TemporalBands};

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(dim_err!("{}: shape {:?} vs {:?}", op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced a consistent shape")
}

/// Sum `(lead, inner)`-viewed data over the leading block.
fn sum_leading(data: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in data.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), c.needs(1).then(|| c.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs(0).then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y).unwrap()),
                    c.needs(1).then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x).unwrap()),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| k * g))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(
            v,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }).unwrap())]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            v,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y * (1.0 - y)).unwrap())]),
        )
    }

    /// `x + y` where `y` matches the trailing axes of `x`.
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.trailing_match(x, y, "add_trailing")?;
        let yv = self.value(y).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            for (o, b) in chunk.iter_mut().zip(&yv) {
                *o += b;
            }
        }
        let yshape = self.shape(y).to_vec();
        Ok(self.push(
            out,
            &[x, y],
            Box::new(move |c| {
                vec![
                    Some(c.grad.clone()),
                    c.needs(1).then(|| tensor(&yshape, sum_leading(c.grad.data(), inner))),
                ]
            }),
        ))
    }

    /// `x * y` where `y` matches the trailing axes of `x`.
    pub fn mul_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.trailing_match(x, y, "mul_trailing")?;
        let yv = self.value(y).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            for (o, b) in chunk.iter_mut().zip(&yv) {
                *o *= b;
            }
        }
        let yshape = self.shape(y).to_vec();
        Ok(self.push(
            out,
            &[x, y],
            Box::new(move |c| {
                let (xv, yv) = (c.inputs[0], c.inputs[1]);
                let dx = c.needs(0).then(|| {
                    let mut d = c.grad.clone();
                    for chunk in d.data_mut().chunks_exact_mut(inner) {
                        for (o, b) in chunk.iter_mut().zip(yv.data()) {
                            *o *= b;
                        }
                    }
                    d
                });
                let dy = c.needs(1).then(|| {
                    let mut acc = vec![0.0; inner];
                    for (gc, xc) in c.grad.data().chunks_exact(inner).zip(xv.data().chunks_exact(inner)) {
                        for ((a, g), x) in acc.iter_mut().zip(gc).zip(xc) {
                            *a += g * x;
                        }
                    }
                    tensor(&yshape, acc)
                });
                vec![dx, dy]
            }),
        ))
    }

    fn trailing_match(&self, x: Var, y: Var, op: &str) -> Result<usize> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(dim_err!("{}: {:?} is not a trailing shape of {:?}", op, ys, xs));
        }
        Ok(ys.iter().product::<usize>().max(1))
    }

    /// `x * w` where `w` matches the leading axes of `x` (broadcast over the rest).
    pub fn mul_leading(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() > xs.len() || xs[..ws.len()] != *ws {
            return Err(dim_err!("mul_leading: {:?} is not a leading shape of {:?}", ws, xs));
        }
        let inner: usize = xs[ws.len()..].iter().product();
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, s) in out.data_mut().chunks_exact_mut(inner).zip(&wv) {
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        let wshape = ws.to_vec();
        Ok(self.push(
            out,
            &[x, w],
            Box::new(move |c| {
                let (xv, wv) = (c.inputs[0], c.inputs[1]);
                let dx = c.needs(0).then(|| {
                    let mut d = c.grad.clone();
                    for (chunk, s) in d.data_mut().chunks_exact_mut(inner).zip(wv.data()) {
                        chunk.iter_mut().for_each(|o| *o *= s);
                    }
                    d
                });
                let dw = c.needs(1).then(|| {
                    let d = c
                        .grad
                        .data()
                        .chunks_exact(inner)
                        .zip(xv.data().chunks_exact(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(g, x)| g * x).sum())
                        .collect();
                    tensor(&wshape, d)
                });
                vec![dx, dw]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let orig = self.shape(x).to_vec();
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| vec![Some(c.grad.clone().reshape(&orig).unwrap())]),
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        let orig = self.shape(x).to_vec();
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let (outer, dim, inner) = split_axis(&orig, axis);
                let mut d = vec![0.0; outer * dim * inner];
                for (o, gc) in c.grad.data().chunks_exact(len * inner).enumerate() {
                    let base = o * dim * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(gc);
                }
                vec![Some(tensor(&orig, d))]
            }),
        ))
    }

    /// Select index `i` of axis 0 and drop the axis.
    pub fn index0(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.narrow(x, 0, i, 1)?;
        let shape = self.shape(x)[1..].to_vec();
        self.reshape(n, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        let sizes: Vec<usize> = vals.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.push(
            v,
            parts,
            Box::new(move |c| {
                let mut start = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &len)| {
                        let g = c.needs(i).then(|| c.grad.narrow(axis, start, len).unwrap());
                        start += len;
                        g
                    })
                    .collect()
            }),
        ))
    }

    /// Stack equally shaped values along a new axis 1: `[(B, ..)] -> (B, K, ..)`.
    pub fn stack1(&mut self, parts: &[Var]) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p).to_vec();
            if s.is_empty() {
                return Err(dim_err!("stack1 needs rank >= 1"));
            }
            let mut ns = vec![s[0], 1];
            ns.extend_from_slice(&s[1..]);
            expanded.push(self.reshape(p, &ns)?);
        }
        self.concat(&expanded, 1)
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(dim_err!("transpose_last2 needs rank >= 2, got {:?}", s));
        }
        let (r, cdim) = (s[s.len() - 2], s[s.len() - 1]);
        let v = transpose_data(self.value(x).data(), r, cdim);
        let mut ns = s.clone();
        let n = ns.len();
        ns.swap(n - 2, n - 1);
        Ok(self.push(
            tensor(&ns, v),
            &[x],
            Box::new(move |c| vec![Some(tensor(&s, transpose_data(c.grad.data(), cdim, r)))]),
        ))
    }

    /// `(M, K) x (K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out, (n, 1));
        Ok(self.push(
            tensor(&[m, n], out),
            &[a, b],
            Box::new(move |c| {
                let (av, bv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let da = c.needs(0).then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, (n, 1), bv, (1, n), 0.0, &mut d, (k, 1));
                    tensor(&[m, k], d)
                });
                let db = c.needs(1).then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av, (1, k), g, (n, 1), 0.0, &mut d, (n, 1));
                    tensor(&[k, n], d)
                });
                vec![da, db]
            }),
        ))
    }

    /// Batched `(B, M, K) x (B, K, N)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err!("bmm: {:?} x {:?}", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                gemm(m, k, n, 1.0, &av[i * m * k..], (k, 1), &bv[i * k * n..], (n, 1), 0.0, &mut out[i * m * n..], (n, 1));
            }
        }
        Ok(self.push(
            tensor(&[bs, m, n], out),
            &[a, b],
            Box::new(move |c| {
                let (av, bv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let da = c.needs(0).then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(m, n, k, 1.0, &g[i * m * n..], (n, 1), &bv[i * k * n..], (1, n), 0.0, &mut d[i * m * k..], (k, 1));
                    }
                    tensor(&[bs, m, k], d)
                });
                let db = c.needs(1).then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(k, m, n, 1.0, &av[i * m * k..], (1, k), &g[i * m * n..], (n, 1), 0.0, &mut d[i * k * n..], (n, 1));
                    }
                    tensor(&[bs, k, n], d)
                });
                vec![da, db]
            }),
        ))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err!("mean_axis {} for shape {:?}", axis, s));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            dst.iter_mut().for_each(|a| *a /= dim as f64);
        }
        let mut ns = s.clone();
        ns.remove(axis);
        Ok(self.push(
            tensor(&ns, out),
            &[x],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for k in 0..dim {
                        let dst = &mut d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *a = b / dim as f64;
                        }
                    }
                }
                vec![Some(tensor(&s, d))]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let s = self.shape(x).to_vec();
        self.push(v, &[x], Box::new(move |c| vec![Some(Tensor::full(&s, c.grad.item()))]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len().max(1) as f64;
        let v = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        Ok(self.push(
            Tensor::scalar(v),
            &[a, b],
            Box::new(move |c| {
                let k = 2.0 * c.grad.item() / n;
                let diff = c.inputs[0].zip_map(c.inputs[1], |x, y| k * (x - y)).unwrap();
                let neg = c.needs(1).then(|| diff.map(|d| -d));
                vec![c.needs(0).then_some(diff), neg]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner = *s.last().ok_or_else(|| dim_err!("softmax of a scalar"))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(inner) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(
            out,
            &[x],
            Box::new(move |c| {
                let mut d = c.grad.clone();
                for (dr, yr) in d.data_mut().chunks_exact_mut(inner).zip(c.output.data().chunks_exact(inner)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (g, y) in dr.iter_mut().zip(yr) {
                        *g = y * (*g - dot);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Mean cross-entropy of `(B, K)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!("cross_entropy: logits {:?} with {} labels", s, labels.len()));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(dim_err!("label {} out of range for {} classes", bad, k));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data_mut().chunks_exact_mut(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += z.ln() + m - row[y];
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        }
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            &[logits],
            Box::new(move |c| {
                let scale = c.grad.item() / b as f64;
                let mut d = probs.clone();
                for (row, &y) in d.data_mut().chunks_exact_mut(k).zip(&labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Mean binary cross-entropy of logits against `{0, 1}` targets of the
    /// same shape, computed stably as `softplus(z) - y * z`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(dim_err!("bce: logits {:?} vs targets {:?}", self.shape(logits), targets.shape()));
        }
        let z = self.value(logits);
        let n = z.len() as f64;
        let loss: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
            .sum();
        let d = z.zip_map(targets, |z, y| (1.0 / (1.0 + (-z).exp()) - y) / n)?;
        Ok(self.push(
            Tensor::scalar(loss / n),
            &[logits],
            Box::new(move |c| vec![Some(d.map(|v| v * c.grad.item()))]),
        ))
    }

    /// Channels-last 3D convolution without bias.
    /// `x: (N, T, H, W, Cin)`, `w: (kt, kh, kw, Cin, Cout)`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || xs[4] != ws[3] {
            return Err(dim_err!("conv3d: input {:?} with weight {:?}", xs, ws));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = xs[a + 1] + 2 * pad[a];
            if padded < ws[a] || stride[a] == 0 {
                return Err(dim_err!("conv3d: axis {} of {:?} too small for kernel {:?}", a, xs, ws));
            }
            output[a] = (padded - ws[a]) / stride[a] + 1;
        }
        let geom = ConvGeom {
            n: xs[0],
            input: [xs[1], xs[2], xs[3]],
            cin: xs[4],
            kernel: [ws[0], ws[1], ws[2]],
            stride,
            pad,
            output,
            cout: ws[4],
        };
        let out = conv3d_forward(&geom, self.value(x).data(), self.value(w).data());
        let oshape = [geom.n, output[0], output[1], output[2], geom.cout];
        Ok(self.push(
            tensor(&oshape, out),
            &[x, w],
            Box::new(move |c| {
                let (dx, dw) = conv3d_backward(
                    &geom,
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.grad.data(),
                    c.needs(0),
                    c.needs(1),
                );
                vec![dx.map(|d| tensor(&xs, d)), dw.map(|d| tensor(&ws, d))]
            }),
        ))
    }

    /// Batch normalization over every axis but the last, using batch
    /// statistics. Returns the output with the batch mean and unbiased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Tensor, Tensor)> {
        let s = self.shape(x).to_vec();
        let ch = *s.last().ok_or_else(|| dim_err!("batch_norm of a scalar"))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(dim_err!("batch_norm: {} channels, affine {:?}", ch, self.shape(gamma)));
        }
        let rows = self.value(x).len() / ch;
        let xv = self.value(x).data();
        let mean = sum_leading(xv, ch).into_iter().map(|v| v / rows as f64).collect::<Vec<_>>();
        let mut var = vec![0.0; ch];
        for row in xv.chunks_exact(ch) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for (orow, xrow) in out.chunks_exact_mut(ch).zip(xv.chunks_exact(ch)) {
            for c in 0..ch {
                orow[c] = gv[c] * (xrow[c] - mean[c]) * inv[c] + bv[c];
            }
        }
        let unbiased = if rows > 1 {
            var.iter().map(|v| v * rows as f64 / (rows - 1) as f64).collect()
        } else {
            var.clone()
        };
        let batch_mean = tensor(&[ch], mean.clone());
        let batch_var = tensor(&[ch], unbiased);
        let v = self.push(
            tensor(&s, out),
            &[x, gamma, beta],
            Box::new(move |c| {
                let (xv, gv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for (grow, xrow) in g.chunks_exact(ch).zip(xv.chunks_exact(ch)) {
                    for k in 0..ch {
                        let xh = (xrow[k] - mean[k]) * inv[k];
                        sum_g[k] += grow[k];
                        sum_gx[k] += grow[k] * xh;
                    }
                }
                let dx = c.needs(0).then(|| {
                    let n = rows as f64;
                    let mut d = vec![0.0; xv.len()];
                    for ((drow, grow), xrow) in d.chunks_exact_mut(ch).zip(g.chunks_exact(ch)).zip(xv.chunks_exact(ch)) {
                        for k in 0..ch {
                            let xh = (xrow[k] - mean[k]) * inv[k];
                            drow[k] = gv[k] * inv[k] * (grow[k] - sum_g[k] / n - xh * sum_gx[k] / n);
                        }
                    }
                    tensor(c.inputs[0].shape(), d)
                });
                vec![
                    dx,
                    c.needs(1).then(|| tensor(&[ch], sum_gx.clone())),
                    c.needs(2).then(|| tensor(&[ch], sum_g.clone())),
                ]
            }),
        );
        Ok((v, batch_mean, batch_var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor, var: &Tensor, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ch = *s.last().ok_or_else(|| dim_err!("batch_norm of a scalar"))?;
        if self.shape(gamma) != [ch] || mean.shape() != [ch] || var.shape() != [ch] {
            return Err(dim_err!("batch_norm: {} channels, stats {:?}", ch, mean.shape()));
        }
        let mean = mean.data().to_vec();
        let inv: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(ch) {
            for k in 0..ch {
                row[k] = gv[k] * (row[k] - mean[k]) * inv[k] + bv[k];
            }
        }
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let (xv, gv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let dx = c.needs(0).then(|| {
                    let mut d = c.grad.clone();
                    for row in d.data_mut().chunks_exact_mut(ch) {
                        for k in 0..ch {
                            row[k] *= gv[k] * inv[k];
                        }
                    }
                    d
                });
                let mut dg = vec![0.0; ch];
                for (grow, xrow) in g.chunks_exact(ch).zip(xv.chunks_exact(ch)) {
                    for k in 0..ch {
                        dg[k] += grow[k] * (xrow[k] - mean[k]) * inv[k];
                    }
                }
                vec![
                    dx,
                    c.needs(1).then(|| tensor(&[ch], dg)),
                    c.needs(2).then(|| tensor(&[ch], sum_leading(g, ch))),
                ]
            }),
        ))
    }

    /// Spatial Haar transform on the trailing `(H, W, C)` axes. The result
    /// stacks the bands along a new axis 0 in LL, LH, HL, HH order.
    pub fn haar_spatial(&mut self, x: Var) -> Result<Var> {
        let set = wavelet::dwt_spatial(self.value(x))?;
        let band_shape = set.ll.shape().to_vec();
        let v = Tensor::stack(&[&set.ll, &set.lh, &set.hl, &set.hh])?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let band = |i| c.grad.index0(i).unwrap();
                let set = SubBandSet {
                    ll: band(0),
                    lh: band(1),
                    hl: band(2),
                    hh: band(3),
                    level: 1,
                };
                debug_assert_eq!(set.ll.shape(), band_shape.as_slice());
                // Orthonormal: the adjoint is the inverse.
                vec![Some(wavelet::idwt_spatial(&set).unwrap())]
            }),
        ))
    }

    /// High band of the temporal Haar transform along `axis`.
    pub fn haar_temporal_high(&mut self, x: Var, axis: usize) -> Result<Var> {
        let high = wavelet::dwt_temporal_axis(self.value(x), axis)?.high;
        Ok(self.push(
            high,
            &[x],
            Box::new(move |c| {
                let bands = TemporalBands {
                    low: Tensor::zeros(c.grad.shape()),
                    high: c.grad.clone(),
                };
                vec![Some(wavelet::idwt_temporal_axis(&bands, axis).unwrap())]
            }),
        ))
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}
