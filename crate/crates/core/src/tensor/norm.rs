use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics in training, stored running statistics in evaluation.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

impl Graph {
    /// Per-channel normalization of `x: [N, C, H, W]`.
    ///
    /// Returns the output and, in training mode, the batch mean and biased variance.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("batchnorm affine parameters must be [{c}]")));
        }
        let sp = h * w;
        let m = n * sp;
        let xv = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::Shape(format!(
                        "batch statistics need at least 2 elements per channel, got {m}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xv[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += xv[(b * c + ch) * sp..(b * c + ch + 1) * sp]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
                (mean, var)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("running statistics do not match channels".into()));
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                for i in base..base + sp {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        let train = matches!(mode, BnMode::Train);
        let var_out = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gv = ctx.input(1).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        for i in base..base + sp {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![0.0; g.len()];
                    let mf = m as f64;
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * sp;
                            for i in base..base + sp {
                                dx[i] = if train {
                                    scale / mf * (mf * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }),
        );
        Ok((var_out, train.then_some((mean, var))))
    }
}
