//! Forward and backward kernels for the handful of layer types the
//! encoder-decoder needs. Convolutions are lowered to GEMM through
//! `im2col`; every kernel is single-threaded and deterministic.

use super::tensor::Tensor4;

/// `c = a · b` (or `c += a · b` when `accumulate`), with optional
/// transposed views of `a` (stored k×m) and `b` (stored n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Expand one CHW image into a (C·9)×(H·W) patch matrix for a 3×3 kernel
/// with zero padding of one pixel.
fn im2col3(x: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add a patch matrix back onto a CHW image.
fn col2im3(col: &[f32], c: usize, h: usize, w: usize, x: &mut [f32]) {
    let hw = h * w;
    x.fill(0.0);
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Saved activations needed to back-propagate through a convolution.
#[derive(Debug, Clone)]
pub(crate) struct ConvCache {
    in_shape: [usize; 4],
    /// Patch matrices (3×3 kernels) or the raw input (1×1 kernels).
    cols: Vec<f32>,
}

/// Same-padded convolution with a square kernel of size 1 or 3.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.patch_len()
    }

    fn patch_len(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    pub fn forward(&self, x: &Tensor4, weight: &[f32], bias: &[f32]) -> (Tensor4, ConvCache) {
        let [b, c, h, w] = x.shape();
        assert_eq!(c, self.cin, "conv input channels");
        let hw = h * w;
        let k = self.patch_len();
        let mut y = Tensor4::zeros([b, self.cout, h, w]);
        let cols = if self.ksize == 1 {
            x.data().to_vec()
        } else {
            let mut cols = vec![0.0; b * k * hw];
            for i in 0..b {
                im2col3(x.image(i), c, h, w, &mut cols[i * k * hw..(i + 1) * k * hw]);
            }
            cols
        };
        for i in 0..b {
            let col = &cols[i * k * hw..(i + 1) * k * hw];
            let out = y.image_mut(i);
            gemm(self.cout, k, hw, weight, false, col, false, out, false);
            for (row, &bv) in out.chunks_exact_mut(hw).zip(bias) {
                for v in row {
                    *v += bv;
                }
            }
        }
        (
            y,
            ConvCache {
                in_shape: x.shape(),
                cols,
            },
        )
    }

    /// Accumulates parameter gradients into `dweight`/`dbias` and returns
    /// the input gradient when `need_dx`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        weight: &[f32],
        dy: &Tensor4,
        dweight: &mut [f32],
        dbias: &mut [f32],
        need_dx: bool,
    ) -> Option<Tensor4> {
        let [b, c, h, w] = cache.in_shape;
        let hw = h * w;
        let k = self.patch_len();
        let mut dx = need_dx.then(|| Tensor4::zeros(cache.in_shape));
        let mut dcol = if need_dx && self.ksize == 3 {
            vec![0.0; k * hw]
        } else {
            Vec::new()
        };
        for i in 0..b {
            let g = dy.image(i);
            let col = &cache.cols[i * k * hw..(i + 1) * k * hw];
            gemm(self.cout, hw, k, g, false, col, true, dweight, true);
            for (row, db) in g.chunks_exact(hw).zip(dbias.iter_mut()) {
                *db += row.iter().sum::<f32>();
            }
            if let Some(dx) = dx.as_mut() {
                if self.ksize == 1 {
                    gemm(k, self.cout, hw, weight, true, g, false, dx.image_mut(i), false);
                } else {
                    gemm(k, self.cout, hw, weight, true, g, false, &mut dcol, false);
                    col2im3(&dcol, c, h, w, dx.image_mut(i));
                }
            }
        }
        dx
    }
}

pub(crate) fn relu_inplace(x: &mut Tensor4) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` in place by the ReLU output `y`.
pub(crate) fn relu_backward(y: &Tensor4, dy: &mut Tensor4) {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling with stride 2; returns the flat argmax index per output.
pub(crate) fn maxpool2(x: &Tensor4) -> (Tensor4, Vec<u32>) {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    let mut arg = vec![0u32; b * c * oh * ow];
    let src = x.data();
    let dst = y.data_mut();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool2_backward(in_shape: [usize; 4], arg: &[u32], dy: &Tensor4) -> Tensor4 {
    let mut dx = Tensor4::zeros(in_shape);
    let d = dx.data_mut();
    for (&a, &g) in arg.iter().zip(dy.data()) {
        d[a as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2(x: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..b * c {
        for oy in 0..oh {
            let srow = &src[plane * h * w + (oy / 2) * w..][..w];
            let drow = &mut dst[plane * oh * ow + oy * ow..][..ow];
            for (ox, v) in drow.iter_mut().enumerate() {
                *v = srow[ox / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward(dy: &Tensor4) -> Tensor4 {
    let [b, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor4::zeros([b, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..b * c {
        for oy in 0..oh {
            let srow = &src[plane * oh * ow + oy * ow..][..ow];
            let drow = &mut dst[plane * h * w + (oy / 2) * w..][..w];
            for (ox, g) in srow.iter().enumerate() {
                drow[ox / 2] += g;
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    assert_eq!((b.batch(), b.height(), b.width()), (n, h, w));
    let mut y = Tensor4::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        let out = y.image_mut(i);
        out[..a.image_len()].copy_from_slice(a.image(i));
        out[a.image_len()..].copy_from_slice(b.image(i));
    }
    y
}

/// Splits a concatenation gradient into the parts for `[a, b]`.
pub(crate) fn concat_backward(dy: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
    let [n, c, h, w] = dy.shape();
    let mut da = Tensor4::zeros([n, ca, h, w]);
    let mut db = Tensor4::zeros([n, c - ca, h, w]);
    let split = ca * h * w;
    for i in 0..n {
        let g = dy.image(i);
        da.image_mut(i).copy_from_slice(&g[..split]);
        db.image_mut(i).copy_from_slice(&g[split..]);
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3(x: &[f32], c: usize, h: usize, w: usize, wt: &[f32], cout: usize) -> Vec<f32> {
        let mut y = vec![0.0; cout * h * w];
        for co in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * c + ci) * 3 + ky) * 3 + kx]
                                    * x[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    y[(co * h + yy) * w + xx] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let (c, h, w, cout) = (2, 5, 4, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| ((i * 7 % 11) as f32) - 5.0).collect();
        let wt: Vec<f32> = (0..cout * c * 9).map(|i| ((i * 5 % 13) as f32) * 0.1 - 0.6).collect();
        let conv = Conv { cin: c, cout, ksize: 3 };
        let t = Tensor4::from_vec([1, c, h, w], x.clone()).unwrap();
        let (y, _) = conv.forward(&t, &wt, &[0.0; 3]);
        let expect = naive_conv3(&x, c, h, w, &wt, cout);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)>
        let (c, h, w) = (2, 4, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let g: Vec<f32> = (0..c * 9 * h * w).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut col = vec![0.0; g.len()];
        im2col3(&x, c, h, w, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im3(&g, c, h, w, &mut back);
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let dy = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample2_backward(&dy).data(), &[10.0]);
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(upsample2(&x).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![0.5, 3.0, -1.0, 2.0]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data(), &[3.0]);
        let dy = Tensor4::from_vec([1, 1, 1, 1], vec![7.0]).unwrap();
        assert_eq!(maxpool2_backward(x.shape(), &arg, &dy).data(), &[0.0, 7.0, 0.0, 0.0]);
    }
}
