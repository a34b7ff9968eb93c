use rand::Rng;

use super::{fan_in_gaussian, push_bn_buffers, push_norm, stack_volumes, BoundParams, Forward, Mode, NetState, Params};
use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Tensor};
use crate::volume::{Shape3, Volume};

pub const DISCRIMINATOR_CONV_LAYERS: usize = 7;

/// Unconditional real/fake critic: alternating 4x4x4 stride-2 and 1x1x1
/// convolutions, each hidden one followed by batch norm and ReLU, then a
/// 1x1x1 output convolution averaged over space into one logit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec { base_channels: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscLayer {
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden layers carry batch norm and ReLU; the output layer a bias.
    pub hidden: bool,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    layers: Vec<DiscLayer>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec) -> Result<Self> {
        if spec.base_channels == 0 {
            return Err(Error::InvalidSpec("discriminator base_channels = 0".into()));
        }
        let c = spec.base_channels;
        let down = ConvGeom::new(4, 2, 1);
        let point = ConvGeom::new(1, 1, 0);
        let plan = [
            (down, 1, c),
            (point, c, c),
            (down, c, 2 * c),
            (point, 2 * c, 2 * c),
            (down, 2 * c, 4 * c),
            (point, 4 * c, 4 * c),
            (point, 4 * c, 1),
        ];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(geom, ci, co))| DiscLayer {
                geom,
                in_channels: ci,
                out_channels: co,
                hidden: i + 1 < plan.len(),
            })
            .collect();
        Ok(Discriminator { spec, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DiscLayer] {
        &self.layers
    }

    pub fn init(&self, rng: &mut impl Rng) -> NetState {
        let mut p = Params::new();
        let mut buffers = Params::new();
        for (i, l) in self.layers.iter().enumerate() {
            let k = l.geom.kernel;
            let fan_in = l.in_channels * k * k * k;
            let gain = if l.hidden { 2f64.sqrt() } else { 1.0 };
            p.push(
                format!("conv{}.weight", i + 1),
                fan_in_gaussian(rng, &[l.out_channels, l.in_channels, k, k, k], fan_in, gain),
            );
            if l.hidden {
                push_norm(&mut p, &format!("bn{}", i + 1), l.out_channels);
                push_bn_buffers(&mut buffers, &format!("bn{}", i + 1), l.out_channels);
            } else {
                p.push(format!("conv{}.bias", i + 1), Tensor::zeros(&[l.out_channels]));
            }
        }
        NetState { params: p, buffers }
    }

    pub fn check_shape(&self, shape: Shape3) -> Result<()> {
        let mut dims = shape;
        for l in &self.layers {
            dims = l
                .geom
                .out_dims(dims)
                .filter(|d| d.iter().all(|&s| s > 0))
                .ok_or_else(|| Error::VolumeTooSmall(shape, "discriminator needs every extent >= 8".into()))?;
        }
        Ok(())
    }

    /// Pre-sigmoid logits `[n]` for a `[n, 1, d, h, w]` batch.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, fwd: &mut Forward, x: Var) -> Result<Var> {
        let (n, _, dims) = g.value(x).dims5();
        self.check_shape(dims)?;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let w = p.var(&format!("conv{}.weight", i + 1));
            if l.hidden {
                let y = g.conv3d(h, w, None, l.geom);
                let y = fwd.batch_norm(g, p, &format!("bn{}", i + 1), y);
                h = g.relu(y);
            } else {
                let b = p.var(&format!("conv{}.bias", i + 1));
                h = g.conv3d(h, w, Some(b), l.geom);
            }
        }
        let pooled = g.global_avg_pool(h);
        Ok(g.reshape(pooled, vec![n]))
    }

    /// Scores `D(x)` in (0, 1) for a `[n, 1, d, h, w]` batch.
    pub fn scores(&self, g: &mut Graph, p: &BoundParams, fwd: &mut Forward, x: Var) -> Result<Var> {
        let logits = self.forward(g, p, fwd, x)?;
        Ok(g.sigmoid(logits))
    }

    /// Evaluation-mode score of one volume.
    pub fn score(&self, state: &NetState, x: &Volume) -> Result<f64> {
        let mut g = Graph::new();
        let bound = state.params.bind(&mut g, false);
        let xv = g.constant(stack_volumes([x])?);
        let mut fwd = Forward::new(Mode::Eval, state);
        let logit = self.forward(&mut g, &bound, &mut fwd, xv)?;
        Ok(sigmoid(g.value(logit).item()))
    }
}
