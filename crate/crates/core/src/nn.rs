//! Parameterized layers over a [`ParamStore`] and the forward-pass context.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnMode, Graph, ParamId, ParamStore, Tensor, Var};

/// Momentum of the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-pass state shared by every layer: the parameter source, the BN mode,
/// and the batch statistics collected for the running-average update.
pub struct Forward<'s> {
    pub store: &'s ParamStore,
    pub train: bool,
    bn_stats: Vec<BnStat>,
}

struct BnStat {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, train: bool) -> Self {
        Forward {
            store,
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.store, id)
    }

    /// Moves the batch statistics of this pass into a detached update.
    pub fn take_bn_update(&mut self) -> BnUpdate {
        BnUpdate(std::mem::take(&mut self.bn_stats))
    }
}

/// Running-statistics update produced by one training forward pass.
#[must_use]
pub struct BnUpdate(Vec<BnStat>);

impl BnUpdate {
    /// Exponential moving average with unbiased batch variance.
    pub fn apply(self, store: &mut ParamStore) {
        for s in self.0 {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let rm = store.value_mut(s.mean_id);
            for (r, m) in rm.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = store.value_mut(s.var_id);
            for (r, v) in rv.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = cout * cin * k * k;
        let w = store.add(
            &format!("{name}.w"),
            Tensor::from_vec(&[cout, cin, k, k], kaiming_uniform(rng, n, cin * k * k))?,
        )?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Conv2d { w, b, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, f: &Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(g, self.w);
        let b = self.b.map(|b| f.param(g, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution with kernel size equal to its stride (non-overlapping upsampling).
#[derive(Debug, Clone)]
pub struct TConv2d {
    pub w: ParamId,
    pub stride: usize,
}

impl TConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let k = stride;
        let n = cin * cout * k * k;
        let w = store.add(
            &format!("{name}.w"),
            Tensor::from_vec(&[cin, cout, k, k], kaiming_uniform(rng, n, cin))?,
        )?;
        Ok(TConv2d { w, stride })
    }

    pub fn forward(&self, g: &mut Graph, f: &Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(g, self.w);
        g.tconv2d(x, w, None, self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[c], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[c], 1.0))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(g, self.gamma);
        let beta = f.param(g, self.beta);
        if f.train {
            let (n, _, h, w) = g.value(x).dims4()?;
            let (y, stats) = g.batchnorm2d(x, gamma, beta, BnMode::Train)?;
            if let Some((mean, var)) = stats {
                f.bn_stats.push(BnStat {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var,
                    count: n * h * w,
                });
            }
            Ok(y)
        } else {
            let store = f.store;
            let mode = BnMode::Eval {
                mean: store.value(self.running_mean).data(),
                var: store.value(self.running_var).data(),
            };
            Ok(g.batchnorm2d(x, gamma, beta, mode)?.0)
        }
    }
}

/// Conv (no bias) → BatchNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, f, x)?;
        let y = self.bn.forward(g, f, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            w: store.add(
                &format!("{name}.w"),
                Tensor::from_vec(&[fin, fout], kaiming_uniform(rng, fin * fout, fin))?,
            )?,
            b: store.add(&format!("{name}.b"), Tensor::zeros(&[fout]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(g, self.w);
        let b = f.param(g, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph, f: &Forward<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, f, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Widths and strides of a three-block top-down network.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopDownCfg {
    pub block_channels: [usize; 3],
    /// Stride of the first layer of each block, relative to the previous block.
    pub block_strides: [usize; 3],
    pub layers_per_block: usize,
    pub upsample_channels: usize,
}

impl TopDownCfg {
    /// Cumulative stride at the output of block `i`.
    pub fn cumulative_stride(&self, i: usize) -> usize {
        self.block_strides[..=i].iter().product()
    }

    pub fn output_stride(&self) -> usize {
        self.block_strides[0]
    }

    pub fn out_channels(&self) -> usize {
        3 * self.upsample_channels
    }
}

/// Three strided conv blocks, each upsampled back to the first block's resolution
/// by a transposed conv, then concatenated.
///
/// An optional side input is concatenated to the input channels. Its share of the
/// first convolution is kept as a separate weight so the main weights do not
/// depend on whether the side input exists.
#[derive(Debug, Clone)]
pub struct TopDown {
    pub cfg: TopDownCfg,
    blocks: Vec<Vec<ConvBnRelu>>,
    ups: Vec<(TConv2d, BatchNorm2d)>,
    side: Option<Conv2d>,
}

impl TopDown {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cfg: &TopDownCfg,
        rng: &mut ChaCha8Rng,
        side: Option<(usize, &mut ChaCha8Rng)>,
    ) -> Result<Self> {
        let side = match side {
            Some((cs, side_rng)) => Some(Conv2d::new(
                store,
                &format!("{name}.side"),
                cs,
                cfg.block_channels[0],
                3,
                cfg.block_strides[0],
                1,
                false,
                side_rng,
            )?),
            None => None,
        };
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        let mut c = cin;
        for i in 0..3 {
            let co = cfg.block_channels[i];
            let mut layers = Vec::new();
            for j in 0..cfg.layers_per_block.max(1) {
                let (ci, s) = if j == 0 { (c, cfg.block_strides[i]) } else { (co, 1) };
                layers.push(ConvBnRelu::new(
                    store,
                    &format!("{name}.block{i}.{j}"),
                    ci,
                    co,
                    3,
                    s,
                    rng,
                )?);
            }
            blocks.push(layers);
            let up = cfg.cumulative_stride(i) / cfg.output_stride();
            ups.push((
                TConv2d::new(store, &format!("{name}.up{i}"), co, cfg.upsample_channels, up, rng)?,
                BatchNorm2d::new(store, &format!("{name}.up{i}.bn"), cfg.upsample_channels)?,
            ));
            c = co;
        }
        Ok(TopDown {
            cfg: cfg.clone(),
            blocks,
            ups,
            side,
        })
    }

    pub fn has_side_input(&self) -> bool {
        self.side.is_some()
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: Var, side: Option<Var>) -> Result<Var> {
        let mut h = x;
        let mut outs = Vec::with_capacity(3);
        for (bi, (block, (up, bn))) in self.blocks.iter().zip(&self.ups).enumerate() {
            for (li, layer) in block.iter().enumerate() {
                h = if bi == 0 && li == 0 {
                    let mut y = layer.conv.forward(g, f, h)?;
                    match (&self.side, side) {
                        (Some(conv), Some(s)) => {
                            let ys = conv.forward(g, f, s)?;
                            y = g.add(y, ys)?;
                        }
                        (None, None) => {}
                        _ => return Err(Error::Config("side input does not match the network".into())),
                    }
                    let y = layer.bn.forward(g, f, y)?;
                    g.relu(y)
                } else {
                    layer.forward(g, f, h)?
                };
            }
            let u = up.forward(g, f, h)?;
            let u = bn.forward(g, f, u)?;
            outs.push(g.relu(u));
        }
        g.concat(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> TopDownCfg {
        TopDownCfg {
            block_channels: [4, 6, 8],
            block_strides: [1, 2, 2],
            layers_per_block: 2,
            upsample_channels: 3,
        }
    }

    #[test]
    fn top_down_restores_resolution() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TopDown::new(&mut store, "td", 2, &cfg(), &mut rng, None).unwrap();
        let mut g = Graph::new();
        let mut f = Forward::new(&store, true);
        let x = g.input(Tensor::full(&[2, 2, 8, 8], 0.5));
        let y = net.forward(&mut g, &mut f, x, None).unwrap();
        assert_eq!(g.shape(y), &[2, 9, 8, 8]);
    }

    #[test]
    fn strided_first_block_halves_output() {
        let mut c = cfg();
        c.block_strides = [2, 2, 2];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TopDown::new(&mut store, "td", 2, &c, &mut rng, None).unwrap();
        let mut g = Graph::new();
        let mut f = Forward::new(&store, true);
        let x = g.input(Tensor::full(&[1, 2, 16, 16], 0.5));
        let y = net.forward(&mut g, &mut f, x, None).unwrap();
        assert_eq!(g.shape(y), &[1, 9, 8, 8]);
    }

    #[test]
    fn zero_side_input_leaves_output_unchanged() {
        let run = |with_side: bool| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut side_rng = ChaCha8Rng::seed_from_u64(5);
            let side = with_side.then_some((1, &mut side_rng));
            let net = TopDown::new(&mut store, "td", 2, &cfg(), &mut rng, side).unwrap();
            let mut g = Graph::new();
            let mut f = Forward::new(&store, true);
            let x =
                g.input(Tensor::from_vec(&[1, 2, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
            let s = with_side.then(|| g.constant(Tensor::zeros(&[1, 1, 8, 8])));
            let y = net.forward(&mut g, &mut f, x, s).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1).unwrap();
        let update = {
            let mut g = Graph::new();
            let mut f = Forward::new(&store, true);
            let x = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
            bn.forward(&mut g, &mut f, x).unwrap();
            f.take_bn_update()
        };
        update.apply(&mut store);
        // batch mean 2, unbiased var 2
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-15);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn mlp_has_no_trailing_activation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&mut store, "m", &[2, 1], &mut rng).unwrap();
        store.value_mut(mlp.layers[0].w).copy_from_slice(&[-1.0, 0.0]);
        let mut g = Graph::new();
        let f = Forward::new(&store, false);
        let x = g.input(Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap());
        let y = mlp.forward(&mut g, &f, x).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0]);
    }
}
