//! Attention-based densification fusion of backbone features with the shape heatmap.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Forward, Mlp};
use crate::tensor::{Graph, ParamStore, Var};

pub const DEFAULT_REDUCTION: usize = 8;
pub const GRID_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdfCfg {
    /// Width of the densified feature `F_id`.
    pub channels: usize,
    pub reduction: usize,
    /// When false, `F_adf = F_id` (fusion by convolution only).
    pub attention: bool,
}

#[derive(Debug, Clone)]
pub struct Adf {
    pub cfg: AdfCfg,
    densify: [ConvBnRelu; 2],
    /// Shared between the average and max descriptors.
    pub channel_mlp: Mlp,
    pub grid_conv: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct AdfOutput {
    pub f_id: Var,
    pub channel_mask: Option<Var>,
    pub grid_mask: Option<Var>,
    pub fused: Var,
}

impl Adf {
    /// `feature_channels` is the width of `F_b`, `heat_channels` the class count `K`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature_channels: usize,
        heat_channels: usize,
        cfg: &AdfCfg,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        let cin = feature_channels + heat_channels;
        let densify = [
            ConvBnRelu::new(store, &format!("{name}.densify0"), cin, c, 3, 1, rng)?,
            ConvBnRelu::new(store, &format!("{name}.densify1"), c, c, 3, 1, rng)?,
        ];
        let hidden = (c / cfg.reduction.max(1)).max(1);
        let channel_mlp = Mlp::new(store, &format!("{name}.channel_mlp"), &[c, hidden, c], rng)?;
        let grid_conv = Conv2d::new(
            store,
            &format!("{name}.grid_conv"),
            2,
            1,
            GRID_KERNEL,
            1,
            GRID_KERNEL / 2,
            false,
            rng,
        )?;
        Ok(Adf {
            cfg: cfg.clone(),
            densify,
            channel_mlp,
            grid_conv,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, fb: Var, shape: Var) -> Result<AdfOutput> {
        let f_id = self.densify(g, f, fb, shape)?;
        if !self.cfg.attention {
            return Ok(AdfOutput {
                f_id,
                channel_mask: None,
                grid_mask: None,
                fused: f_id,
            });
        }
        let mc = channel_attention(g, f, &self.channel_mlp, f_id)?;
        let mg = grid_attention(g, f, &self.grid_conv, f_id)?;
        let fused = adf_fuse(g, f_id, mc, mg)?;
        Ok(AdfOutput {
            f_id,
            channel_mask: Some(mc),
            grid_mask: Some(mg),
            fused,
        })
    }

    /// `F_id = densify(concat(F_b, Ŝ))`, average-pooling `Ŝ` to the feature resolution.
    pub fn densify(&self, g: &mut Graph, f: &mut Forward<'_>, fb: Var, shape: Var) -> Result<Var> {
        let s = align_heatmap(g, shape, fb)?;
        let fc = g.concat(&[fb, s])?;
        let h = self.densify[0].forward(g, f, fc)?;
        self.densify[1].forward(g, f, h)
    }
}

/// Average-pools `heat` by the integer ratio between its resolution and `feature`'s.
pub fn align_heatmap(g: &mut Graph, heat: Var, feature: Var) -> Result<Var> {
    let (_, _, hh, hw) = g.value(heat).dims4()?;
    let (_, _, fh, fw) = g.value(feature).dims4()?;
    if hh == fh && hw == fw {
        return Ok(heat);
    }
    if fh == 0 || hh % fh != 0 || hw % fw != 0 || hh / fh != hw / fw {
        return Err(Error::Shape(format!(
            "heatmap {hh}x{hw} cannot be pooled to features {fh}x{fw}"
        )));
    }
    g.avg_pool2d(heat, hh / fh)
}

/// `M_c = σ(MLP(avg(F)) + MLP(max(F)))` as `[N, C, 1, 1]`.
pub fn channel_attention(g: &mut Graph, f: &Forward<'_>, mlp: &Mlp, x: Var) -> Result<Var> {
    let (n, c, _, _) = g.value(x).dims4()?;
    let avg = g.global_avg_pool(x)?;
    let avg = g.reshape(avg, &[n, c])?;
    let max = g.global_max_pool(x)?;
    let max = g.reshape(max, &[n, c])?;
    let a = mlp.forward(g, f, avg)?;
    let m = mlp.forward(g, f, max)?;
    let s = g.add(a, m)?;
    let s = g.sigmoid(s);
    g.reshape(s, &[n, c, 1, 1])
}

/// `M_g = σ(conv7×7([avg_c(F); max_c(F)]))` as `[N, 1, H, W]`.
pub fn grid_attention(g: &mut Graph, f: &Forward<'_>, conv: &Conv2d, x: Var) -> Result<Var> {
    let avg = g.channel_avg_pool(x)?;
    let max = g.channel_max_pool(x)?;
    let d = g.concat(&[avg, max])?;
    let y = conv.forward(g, f, d)?;
    Ok(g.sigmoid(y))
}

/// `F_adf = M_g ⊗ M_c ⊗ F_id` with broadcasting.
pub fn adf_fuse(g: &mut Graph, f_id: Var, mc: Var, mg: Var) -> Result<Var> {
    let t = g.mul(f_id, mc)?;
    g.mul(t, mg)
}
