use super::gemm::gemm;
use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "kernel {k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample `[C, H, W]` into `[C·k·k, Ho·Wo]`.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[C, H, W]`.
fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            x[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(graph: &Graph, b: Option<Var>, o: usize) -> Result<()> {
    if let Some(b) = b {
        if graph.shape(b) != [o] {
            return Err(Error::Shape(format!(
                "bias must have shape [{o}], got {:?}",
                graph.shape(b)
            )));
        }
    }
    Ok(())
}

fn bias_grad(g: &[f64], n: usize, o: usize, spatial: usize) -> Vec<f64> {
    let mut gb = vec![0.0; o];
    for s in 0..n {
        for (oc, acc) in gb.iter_mut().enumerate() {
            let base = (s * o + oc) * spatial;
            *acc += g[base..base + spatial].iter().sum::<f64>();
        }
    }
    gb
}

impl Graph {
    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, k, k]`; output `floor((H+2p−k)/s)+1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not match input channels {c}",
                self.shape(w)
            )));
        }
        check_bias(self, b, o)?;
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; n * o * cols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * cols]
        };
        for s in 0..n {
            let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
            let dst = &mut out[s * o * cols..(s + 1) * o * cols];
            if let Some(b) = b {
                for (oc, &bv) in self.value(b).data().iter().enumerate() {
                    dst[oc * cols..(oc + 1) * cols].iter_mut().for_each(|v| *v = bv);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            if geom.is_pointwise() {
                gemm(o, rows, cols, wv, false, xs, false, dst, beta);
            } else {
                im2col(xs, &geom, &mut col);
                gemm(o, rows, cols, wv, false, &col, false, dst, beta);
            }
        }
        let out = Tensor::from_vec(&[n, o, geom.ho, geom.wo], out)?;
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let xv = ctx.input(0).data();
                let wv = ctx.input(1).data();
                let need_x = ctx.needs(0);
                let need_w = ctx.needs(1);
                let mut gx = need_x.then(|| vec![0.0; n * c * h * wd]);
                let mut gw = need_w.then(|| vec![0.0; o * rows]);
                let mut col = vec![0.0; rows * cols];
                let mut dcol = vec![0.0; rows * cols];
                for s in 0..n {
                    let gs = &g[s * o * cols..(s + 1) * o * cols];
                    let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                    if let Some(gw) = &mut gw {
                        let colref: &[f64] = if geom.is_pointwise() {
                            xs
                        } else {
                            im2col(xs, &geom, &mut col);
                            &col
                        };
                        gemm(o, cols, rows, gs, false, colref, true, gw, 1.0);
                    }
                    if let Some(gx) = &mut gx {
                        let gxs = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
                        if geom.is_pointwise() {
                            gemm(rows, o, cols, wv, true, gs, false, gxs, 0.0);
                        } else {
                            gemm(rows, o, cols, wv, true, gs, false, &mut dcol, 0.0);
                            col2im(&dcol, &geom, gxs);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(Some(bias_grad(g, n, o, cols)));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution of `x: [N, Ci, H, W]` with `w: [Ci, O, k, k]`, no padding.
    ///
    /// Output spatial size is `(H−1)·s + k`. With the same weight array this is the
    /// adjoint of [`Graph::conv2d`] at padding 0.
    pub fn tconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (wci, o, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 {
            return Err(Error::Shape(format!(
                "transposed conv weight {:?} does not match input channels {ci}",
                self.shape(w)
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        check_bias(self, b, o)?;
        let ho = (h - 1) * stride + k;
        let wo = (wd - 1) * stride + k;
        // Geometry of the forward conv whose adjoint this is.
        let geom = ConvGeom::new(o, ho, wo, k, stride, 0)?;
        debug_assert_eq!((geom.ho, geom.wo), (h, wd));
        let rows = geom.rows();
        let hw = h * wd;
        let out_sp = ho * wo;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * out_sp];
        let mut col = vec![0.0; rows * hw];
        for s in 0..n {
            let xs = &xv[s * ci * hw..(s + 1) * ci * hw];
            gemm(rows, ci, hw, wv, true, xs, false, &mut col, 0.0);
            let dst = &mut out[s * o * out_sp..(s + 1) * o * out_sp];
            col2im(&col, &geom, dst);
            if let Some(b) = b {
                for (oc, &bv) in self.value(b).data().iter().enumerate() {
                    dst[oc * out_sp..(oc + 1) * out_sp].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::from_vec(&[n, o, ho, wo], out)?;
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let xv = ctx.input(0).data();
                let wv = ctx.input(1).data();
                let mut gx = ctx.needs(0).then(|| vec![0.0; n * ci * hw]);
                let mut gw = ctx.needs(1).then(|| vec![0.0; ci * rows]);
                let mut col = vec![0.0; rows * hw];
                for s in 0..n {
                    im2col(&g[s * o * out_sp..(s + 1) * o * out_sp], &geom, &mut col);
                    if let Some(gx) = &mut gx {
                        gemm(
                            ci,
                            rows,
                            hw,
                            wv,
                            false,
                            &col,
                            false,
                            &mut gx[s * ci * hw..(s + 1) * ci * hw],
                            0.0,
                        );
                    }
                    if let Some(gw) = &mut gw {
                        gemm(
                            ci,
                            hw,
                            rows,
                            &xv[s * ci * hw..(s + 1) * ci * hw],
                            false,
                            &col,
                            true,
                            gw,
                            1.0,
                        );
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(Some(bias_grad(g, n, o, out_sp)));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_conv() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.input(Tensor::from_vec(&[1, 2, 3, 3], data.clone()).unwrap());
        let w = g.input(Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn all_ones_sum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn output_dims_formula() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3, 9, 8]));
        let w = g.input(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5, 4]);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.input(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
        let wt = g.input(Tensor::zeros(&[2, 2, 2, 2]));
        assert!(g.tconv2d(x, wt, None, 2).is_err());
    }

    #[test]
    fn tconv_identity_and_upsample() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.tconv2d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let one = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
        let k = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.tconv2d(one, k, None, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0; 4]);
    }
}
