use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Rows `start..end` of a `[P, C]` point-feature matrix belong to one pillar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PillarSpan {
    pub batch: usize,
    pub ix: usize,
    pub iy: usize,
    pub start: usize,
    pub end: usize,
}

/// A sample location in continuous cell coordinates (cell centers on integers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearPoint {
    pub batch: usize,
    pub u: f64,
    pub v: f64,
}

/// The four neighbor taps of a bilinear sample: `(row, col, weight)`, with
/// out-of-map taps dropped.
pub(crate) fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let mut taps = Vec::with_capacity(4);
    for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
        for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
            let r = u0 + du;
            let c = v0 + dv;
            let weight = wu * wv;
            if weight == 0.0 || r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
                continue;
            }
            taps.push((r as usize, c as usize, weight));
        }
    }
    taps
}

impl Graph {
    /// Mean over the spatial axes: `[N, C, H, W] → [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let sp = h * w;
        let xv = self.value(x).data();
        let data: Vec<f64> = xv.chunks(sp).map(|ch| ch.iter().sum::<f64>() / sp as f64).collect();
        let out = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = Vec::with_capacity(n * c * sp);
                for &g in ctx.grad {
                    gx.extend(std::iter::repeat(g / sp as f64).take(sp));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum over the spatial axes: `[N, C, H, W] → [N, C, 1, 1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let sp = h * w;
        let xv = self.value(x).data();
        let mut arg = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (k, ch) in xv.chunks(sp).enumerate() {
            let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
            for (i, &v) in ch.iter().enumerate() {
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            data.push(best);
            arg.push(k * sp + bi);
        }
        let out = Tensor::from_vec(&[n, c, 1, 1], data)?;
        let len = n * c * sp;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; len];
                for (&a, &g) in arg.iter().zip(ctx.grad) {
                    gx[a] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over channels: `[N, C, H, W] → [N, 1, H, W]`.
    pub fn channel_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let sp = h * w;
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * sp];
        for b in 0..n {
            for ch in 0..c {
                let src = &xv[(b * c + ch) * sp..(b * c + ch + 1) * sp];
                for (d, s) in data[b * sp..(b + 1) * sp].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= c as f64);
        let out = Tensor::from_vec(&[n, 1, h, w], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * sp];
                for b in 0..n {
                    for ch in 0..c {
                        let dst = &mut gx[(b * c + ch) * sp..(b * c + ch + 1) * sp];
                        for (d, g) in dst.iter_mut().zip(&ctx.grad[b * sp..(b + 1) * sp]) {
                            *d = g / c as f64;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum over channels: `[N, C, H, W] → [N, 1, H, W]`; ties go to the lowest channel.
    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let sp = h * w;
        let xv = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; n * sp];
        let mut arg = vec![0usize; n * sp];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                for i in 0..sp {
                    let v = xv[base + i];
                    if v > data[b * sp + i] {
                        data[b * sp + i] = v;
                        arg[b * sp + i] = base + i;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, 1, h, w], data)?;
        let len = n * c * sp;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; len];
                for (&a, &g) in arg.iter().zip(ctx.grad) {
                    gx[a] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!("avg_pool2d: {h}x{w} not divisible by {k}")));
        }
        if k == 1 {
            return self.reshape(x, &[n, c, h, w]);
        }
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x).data();
        let norm = 1.0 / (k * k) as f64;
        let mut data = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    data[(p * ho + i / k) * wo + j / k] += xv[(p * h + i) * w + j] * norm;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(p * h + i) * w + j] = ctx.grad[(p * ho + i / k) * wo + j / k] * norm;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Max-pools the rows of each pillar span and scatters the result to
    /// `[N, C, H, W]`; cells without a span stay zero.
    pub fn pillar_scatter_max(
        &mut self,
        x: Var,
        spans: &[PillarSpan],
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (rows, c) = match self.shape(x) {
            &[p, c] => (p, c),
            s => return Err(Error::Shape(format!("pillar features must be [P, C], got {s:?}"))),
        };
        let xv = self.value(x).data();
        let sp = h * w;
        let mut data = vec![0.0; batch * c * sp];
        let mut arg: Vec<(usize, usize)> = Vec::with_capacity(spans.len() * c);
        for s in spans {
            if s.batch >= batch || s.ix >= h || s.iy >= w || s.start >= s.end || s.end > rows {
                return Err(Error::Shape(format!("pillar span {s:?} out of bounds")));
            }
            for ch in 0..c {
                let (mut best, mut bi) = (f64::NEG_INFINITY, s.start);
                for r in s.start..s.end {
                    let v = xv[r * c + ch];
                    if v > best {
                        best = v;
                        bi = r;
                    }
                }
                let dst = (s.batch * c + ch) * sp + s.ix * w + s.iy;
                data[dst] = best;
                arg.push((dst, bi * c + ch));
            }
        }
        let out = Tensor::from_vec(&[batch, c, h, w], data)?;
        let len = rows * c;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; len];
                for &(dst, src) in &arg {
                    gx[src] += ctx.grad[dst];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Bilinear samples of `x: [N, C, H, W]`; returns `[P, C]`. Taps outside the map contribute 0.
    pub fn bilinear_sample(&mut self, x: Var, points: &[BilinearPoint]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let sp = h * w;
        let xv = self.value(x).data();
        let mut taps = Vec::with_capacity(points.len());
        let mut data = vec![0.0; points.len() * c];
        for (pi, p) in points.iter().enumerate() {
            if p.batch >= n {
                return Err(Error::Shape(format!("sample batch {} >= {n}", p.batch)));
            }
            let t = bilinear_taps(p.u, p.v, h, w);
            for ch in 0..c {
                let base = (p.batch * c + ch) * sp;
                data[pi * c + ch] = t.iter().map(|&(r, cc, wt)| wt * xv[base + r * w + cc]).sum();
            }
            taps.push((p.batch, t));
        }
        let out = Tensor::from_vec(&[points.len(), c], data)?;
        let len = n * c * sp;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; len];
                for (pi, (b, t)) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let g = ctx.grad[pi * c + ch];
                        if g == 0.0 {
                            continue;
                        }
                        let base = (b * c + ch) * sp;
                        for &(r, cc, wt) in t {
                            gx[base + r * w + cc] += wt * g;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_tensor_pools() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 2, 3, 3], 1.5));
        let a = g.global_avg_pool(x).unwrap();
        let m = g.global_max_pool(x).unwrap();
        assert!(g.value(a).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        assert!(g.value(m).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn one_hot_spatial_map() {
        let mut t = Tensor::zeros(&[1, 1, 4, 5]);
        t.data_mut()[7] = 1.0;
        let mut g = Graph::new();
        let x = g.input(t);
        let a = g.global_avg_pool(x).unwrap();
        let m = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(m).data(), &[1.0]);
        assert!((g.value(a).data()[0] - 1.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_identity_and_midpoint() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let s = g
            .bilinear_sample(
                x,
                &[
                    BilinearPoint {
                        batch: 0,
                        u: 1.0,
                        v: 0.0,
                    },
                    BilinearPoint {
                        batch: 0,
                        u: 0.5,
                        v: 0.5,
                    },
                    BilinearPoint {
                        batch: 0,
                        u: -3.0,
                        v: 0.0,
                    },
                ],
            )
            .unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn scatter_places_max_and_zeros_elsewhere() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3, 1], vec![0.5, 2.0, 1.0]).unwrap());
        let spans = [
            PillarSpan {
                batch: 0,
                ix: 0,
                iy: 1,
                start: 0,
                end: 2,
            },
            PillarSpan {
                batch: 0,
                ix: 1,
                iy: 0,
                start: 2,
                end: 3,
            },
        ];
        let y = g.pillar_scatter_max(x, &spans, 1, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 1.0, 0.0]);
    }
}
