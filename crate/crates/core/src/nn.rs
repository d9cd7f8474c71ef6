//! Differentiable neural-network layers: 2-D convolution (stride 1, "same"
//! zero padding), 2x2 max pooling, stride-2 transpose convolution, channel
//! concatenation. Activations live on [`Graph`] directly.
//!
//! Convolution is cross-correlation (no kernel flip) and is evaluated through
//! im2col plus a matrix product per sample.

use ndarray::{Array2, ArrayView2};

use crate::autodiff::{Graph, Op, Tensor, Var};
use crate::error::{Error, Result};

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Shape(format!("{what} must be 4-d [N,C,H,W], got {s:?}"))),
    }
}

/// im2col for stride-1 "same" zero padding: output is [C*k*k, H*W].
fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = ci * hw + si as usize * w;
                    let dst_row = base + i * w;
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            cols[dst_row + j] = input[src_row + sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the columns back into an image buffer (inverse of [`im2col`]).
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst_row = ci * hw + si as usize * w;
                    let src_row = base + i * w;
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            out[dst_row + sj as usize] += cols[src_row + j];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Cross-correlation with "same" zero padding, stride 1, plus bias.
    /// `weights` is [out, in, k, k] with k odd, `bias` is [out].
    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "conv2d input")?;
        let wshape = self.value(weights).shape().to_vec();
        let (out_c, in_c, kh, kw) = match wshape.as_slice() {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            s => return Err(Error::Shape(format!("conv2d weights must be 4-d, got {s:?}"))),
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if in_c != c {
            return Err(Error::Shape(format!(
                "conv2d input has {c} channels, weights expect {in_c}"
            )));
        }
        if self.value(bias).shape() != [out_c] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{out_c}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let k = kh;
        let hw = h * w;
        let w_mat =
            ArrayView2::from_shape((out_c, c * k * k), self.value(weights).data()).unwrap();
        let bias_vals = self.value(bias).data().to_vec();
        let mut out = vec![0.0; n * out_c * hw];
        for s in 0..n {
            let sample = &self.value(input).data()[s * c * hw..(s + 1) * c * hw];
            let cols = im2col(sample, c, h, w, k);
            let cols_mat = ArrayView2::from_shape((c * k * k, hw), cols.as_slice()).unwrap();
            let prod = w_mat.dot(&cols_mat); // [out, hw]
            let dst = &mut out[s * out_c * hw..(s + 1) * out_c * hw];
            for o in 0..out_c {
                let b = bias_vals[o];
                let row = prod.row(o);
                for (d, v) in dst[o * hw..(o + 1) * hw].iter_mut().zip(row.iter()) {
                    *d = v + b;
                }
            }
        }
        let value = Tensor::new(vec![n, out_c, h, w], out)?;
        let rg = self.requires(input.0) || self.requires(weights.0) || self.requires(bias.0);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input: input.0,
                weights: weights.0,
                bias: bias.0,
            },
        ))
    }

    /// 2x2 windowed maximum with stride 2. Ties route the gradient to the
    /// first element in row-major order.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "max_pool2d input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool2d needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for s in 0..n {
            for ci in 0..c {
                let plane = (s * c + ci) * h * w;
                let oplane = (s * c + ci) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = plane + (2 * i) * w + 2 * j;
                        let mut best = data[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = plane + (2 * i + di) * w + 2 * j + dj;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                        out[oplane + i * ow + j] = best;
                        argmax[oplane + i * ow + j] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.requires(input.0);
        Ok(self.push(
            value,
            rg,
            Op::MaxPool2d {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Stride-2 transposed convolution with a 2x2 kernel: doubles the spatial
    /// dims and halves the channel count. `weights` is [in, out, 2, 2] with
    /// out == in/2, `bias` is [out].
    pub fn transpose_conv2d(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "transpose_conv2d input")?;
        let wshape = self.value(weights).shape().to_vec();
        let (in_c, out_c) = match wshape.as_slice() {
            [i, o, 2, 2] => (*i, *o),
            s => {
                return Err(Error::Shape(format!(
                    "transpose_conv2d weights must be [in, out, 2, 2], got {s:?}"
                )))
            }
        };
        if c % 2 != 0 {
            return Err(Error::Shape(format!(
                "transpose_conv2d input channels must be even, got {c}"
            )));
        }
        if in_c != c {
            return Err(Error::Shape(format!(
                "transpose_conv2d input has {c} channels, weights expect {in_c}"
            )));
        }
        if out_c != c / 2 {
            return Err(Error::Shape(format!(
                "transpose_conv2d must halve channels: in {c}, out {out_c}"
            )));
        }
        if self.value(bias).shape() != [out_c] {
            return Err(Error::Shape(format!(
                "transpose_conv2d bias must be [{out_c}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let data = self.value(input).data();
        let wdata = self.value(weights).data();
        let bias_vals = self.value(bias).data().to_vec();
        let mut out = vec![0.0; n * out_c * oh * ow];
        for s in 0..n {
            for o in 0..out_c {
                let oplane = (s * out_c + o) * oh * ow;
                for v in &mut out[oplane..oplane + oh * ow] {
                    *v = bias_vals[o];
                }
                for ci in 0..c {
                    let plane = (s * c + ci) * h * w;
                    let wbase = (ci * out_c + o) * 4;
                    for i in 0..h {
                        for j in 0..w {
                            let x = data[plane + i * w + j];
                            let dst = oplane + (2 * i) * ow + 2 * j;
                            out[dst] += x * wdata[wbase];
                            out[dst + 1] += x * wdata[wbase + 1];
                            out[dst + ow] += x * wdata[wbase + 2];
                            out[dst + ow + 1] += x * wdata[wbase + 3];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, out_c, oh, ow], out)?;
        let rg = self.requires(input.0) || self.requires(weights.0) || self.requires(bias.0);
        Ok(self.push(
            value,
            rg,
            Op::TransposeConv2d {
                input: input.0,
                weights: weights.0,
                bias: bias.0,
            },
        ))
    }

    /// Stack `a`'s channels before `b`'s. Spatial and batch dims must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = dims4(self.value(a), "concat lhs")?;
        let (nb, cb, hb, wb) = dims4(self.value(b), "concat rhs")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat dims differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        let da = self.value(a).data();
        let db = self.value(b).data();
        for s in 0..na {
            out.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, rg, Op::Concat { a: a.0, b: b.0 }))
    }
}

pub(crate) fn backward_conv2d(
    g: &mut Graph,
    input: usize,
    weights: usize,
    bias: usize,
    out_id: usize,
    out_grad: &[f64],
) {
    let [n, out_c, h, w] = g.nodes[out_id].value.shape() else {
        unreachable!()
    };
    let (n, out_c, h, w) = (*n, *out_c, *h, *w);
    let c = g.nodes[input].value.shape()[1];
    let k = g.nodes[weights].value.shape()[2];
    let hw = h * w;

    if g.requires(bias) {
        g.ensure_grad(bias);
        let mut acc = vec![0.0; out_c];
        for s in 0..n {
            for o in 0..out_c {
                let base = (s * out_c + o) * hw;
                acc[o] += out_grad[base..base + hw].iter().sum::<f64>();
            }
        }
        let gb = g.nodes[bias].grad.as_mut().unwrap();
        for (gi, a) in gb.iter_mut().zip(acc) {
            *gi += a;
        }
    }

    let need_w = g.requires(weights);
    let need_x = g.requires(input);
    if !need_w && !need_x {
        return;
    }
    let mut dw = Array2::<f64>::zeros((out_c, c * k * k));
    let mut dx: Vec<f64> = vec![0.0; n * c * hw];
    let w_mat: Option<Array2<f64>> = if need_x {
        Some(
            ArrayView2::from_shape((out_c, c * k * k), g.nodes[weights].value.data())
                .unwrap()
                .to_owned(),
        )
    } else {
        None
    };
    for s in 0..n {
        let dout =
            ArrayView2::from_shape((out_c, hw), &out_grad[s * out_c * hw..(s + 1) * out_c * hw])
                .unwrap();
        if need_w {
            let sample = &g.nodes[input].value.data()[s * c * hw..(s + 1) * c * hw];
            let cols = im2col(sample, c, h, w, k);
            let cols_mat = ArrayView2::from_shape((c * k * k, hw), cols.as_slice()).unwrap();
            dw = dw + dout.dot(&cols_mat.t());
        }
        if need_x {
            let dcols = w_mat.as_ref().unwrap().t().dot(&dout); // [c*k*k, hw]
            let (dcols_vec, _) = dcols.into_raw_vec_and_offset();
            col2im_add(&dcols_vec, c, h, w, k, &mut dx[s * c * hw..(s + 1) * c * hw]);
        }
    }
    if need_w {
        g.ensure_grad(weights);
        let gw = g.nodes[weights].grad.as_mut().unwrap();
        let (dw_vec, _) = dw.into_raw_vec_and_offset();
        for (gi, d) in gw.iter_mut().zip(dw_vec) {
            *gi += d;
        }
    }
    if need_x {
        g.ensure_grad(input);
        let gx = g.nodes[input].grad.as_mut().unwrap();
        for (gi, d) in gx.iter_mut().zip(dx) {
            *gi += d;
        }
    }
}

pub(crate) fn backward_transpose_conv2d(
    g: &mut Graph,
    input: usize,
    weights: usize,
    bias: usize,
    out_id: usize,
    out_grad: &[f64],
) {
    let [n, out_c, oh, ow] = g.nodes[out_id].value.shape() else {
        unreachable!()
    };
    let (n, out_c, oh, ow) = (*n, *out_c, *oh, *ow);
    let c = g.nodes[input].value.shape()[1];
    let (h, w) = (oh / 2, ow / 2);

    if g.requires(bias) {
        g.ensure_grad(bias);
        let mut acc = vec![0.0; out_c];
        for s in 0..n {
            for o in 0..out_c {
                let base = (s * out_c + o) * oh * ow;
                acc[o] += out_grad[base..base + oh * ow].iter().sum::<f64>();
            }
        }
        let gb = g.nodes[bias].grad.as_mut().unwrap();
        for (gi, a) in gb.iter_mut().zip(acc) {
            *gi += a;
        }
    }

    let need_w = g.requires(weights);
    let need_x = g.requires(input);
    if !need_w && !need_x {
        return;
    }
    let input_data = g.nodes[input].value.data().to_vec();
    let wdata = g.nodes[weights].value.data().to_vec();
    let mut dw = vec![0.0; wdata.len()];
    let mut dx = vec![0.0; input_data.len()];
    for s in 0..n {
        for o in 0..out_c {
            let oplane = (s * out_c + o) * oh * ow;
            for ci in 0..c {
                let plane = (s * c + ci) * h * w;
                let wbase = (ci * out_c + o) * 4;
                for i in 0..h {
                    for j in 0..w {
                        let dst = oplane + (2 * i) * ow + 2 * j;
                        let gs = [
                            out_grad[dst],
                            out_grad[dst + 1],
                            out_grad[dst + ow],
                            out_grad[dst + ow + 1],
                        ];
                        if need_w {
                            let x = input_data[plane + i * w + j];
                            for t in 0..4 {
                                dw[wbase + t] += x * gs[t];
                            }
                        }
                        if need_x {
                            let mut acc = 0.0;
                            for t in 0..4 {
                                acc += wdata[wbase + t] * gs[t];
                            }
                            dx[plane + i * w + j] += acc;
                        }
                    }
                }
            }
        }
    }
    if need_w {
        g.ensure_grad(weights);
        let gw = g.nodes[weights].grad.as_mut().unwrap();
        for (gi, d) in gw.iter_mut().zip(dw) {
            *gi += d;
        }
    }
    if need_x {
        g.ensure_grad(input);
        let gx = g.nodes[input].grad.as_mut().unwrap();
        for (gi, d) in gx.iter_mut().zip(dx) {
            *gi += d;
        }
    }
}

pub(crate) fn backward_concat(g: &mut Graph, a: usize, b: usize, out_id: usize, out_grad: &[f64]) {
    let [n, _, h, w] = g.nodes[out_id].value.shape() else {
        unreachable!()
    };
    let (n, h, w) = (*n, *h, *w);
    let ca = g.nodes[a].value.shape()[1];
    let cb = g.nodes[b].value.shape()[1];
    let hw = h * w;
    if g.requires(a) {
        g.ensure_grad(a);
        let ga = g.nodes[a].grad.as_mut().unwrap();
        for s in 0..n {
            let src = s * (ca + cb) * hw;
            let dst = s * ca * hw;
            for i in 0..ca * hw {
                ga[dst + i] += out_grad[src + i];
            }
        }
    }
    if g.requires(b) {
        g.ensure_grad(b);
        let gb = g.nodes[b].grad.as_mut().unwrap();
        for s in 0..n {
            let src = s * (ca + cb) * hw + ca * hw;
            let dst = s * cb * hw;
            for i in 0..cb * hw {
                gb[dst + i] += out_grad[src + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{Graph, Tensor};

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let w = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), false);
        let b = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_all_ones_on_constant_input() {
        // 3x3 ones kernel over constant c with zero padding: interior 9c, corner 4c
        let c = 0.5;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 4, 4], c), false);
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let b = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let y = g.conv2d(x, w, b).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 4.0 * c).abs() < 1e-12); // corner
        assert!((out[5] - 9.0 * c).abs() < 1e-12); // interior
        assert!((out[1] - 6.0 * c).abs() < 1e-12); // edge
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 3, 4, 4], 0.1), false);
        let w = g.leaf(Tensor::full(&[2, 2, 3, 3], 0.1), false);
        let b = g.leaf(Tensor::full(&[2], 0.0), false);
        assert!(g.conv2d(x, w, b).is_err());
    }

    #[test]
    fn max_pool_basic_and_shape() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first_row_major() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), true);
        let y = g.max_pool2d(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 4], 0.0), false);
        assert!(g.max_pool2d(x).is_err());
    }

    #[test]
    fn transpose_conv_single_pixel() {
        let v = 0.7;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 1, 1], 1.0), false);
        let mut wdata = vec![0.0; 2 * 1 * 4];
        // only channel 0 contributes weight v
        for t in 0..4 {
            wdata[t] = v;
        }
        let w = g.leaf(Tensor::new(vec![2, 1, 2, 2], wdata).unwrap(), false);
        let b = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let y = g.transpose_conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        for out in g.value(y).data() {
            assert!((out - v).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_conv_shape_contract() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 64, 8, 8], 0.1), false);
        let w = g.leaf(Tensor::full(&[64, 32, 2, 2], 0.01), false);
        let b = g.leaf(Tensor::full(&[32], 0.0), false);
        let y = g.transpose_conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 32, 16, 16]);
    }

    #[test]
    fn transpose_conv_rejects_odd_channels() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 3, 4, 4], 0.1), false);
        let w = g.leaf(Tensor::full(&[3, 1, 2, 2], 0.1), false);
        let b = g.leaf(Tensor::full(&[1], 0.0), false);
        assert!(g.transpose_conv2d(x, w, b).is_err());
    }

    #[test]
    fn concat_shapes_and_slices() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 2, 2, 2], 1.0), true);
        let b = g.leaf(Tensor::full(&[1, 3, 2, 2], 2.0), false);
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 5, 2, 2]);
        assert_eq!(&g.value(y).data()[..8], &[1.0; 8]);
        assert_eq!(&g.value(y).data()[8..], &[2.0; 12]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 2, 2, 2], 1.0), false);
        let b = g.leaf(Tensor::full(&[1, 2, 4, 4], 2.0), false);
        assert!(g.concat_channels(a, b).is_err());
    }

    #[test]
    fn relu_and_sigmoid_basics() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), false);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let s = g.sigmoid(x);
        for v in g.value(s).data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }
}
