use rand::Rng;

use super::{fan_in_gaussian, push_norm, stack_volumes, BoundParams, Params};
use crate::autograd::Graph;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Tensor};
use crate::volume::{broadcast_label, one_hot, ClassDiscriminativeMap, ClassLabel, Grid3, Shape3, Volume};

const KERNEL: usize = 3;
const DOWN: ConvGeom = ConvGeom::new(KERNEL, 2, 1);
const SAME: ConvGeom = ConvGeom::new(KERNEL, 1, 1);

/// Label-conditioned residual encoder/decoder emitting Δx.
///
/// The one-hot target label is broadcast to K constant channels and
/// concatenated to the input volume. `downsample_steps` stride-2 3x3x3
/// convolutions (channels `base, 2*base, ...`) are followed by
/// `n_res_blocks` residual blocks and the mirrored stride-2 transposed
/// convolutions. The last transposed convolution has a single output
/// channel, no normalization and a `tanh` activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub downsample_steps: usize,
    pub instance_norm: bool,
    pub k: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            base_channels: 16,
            n_res_blocks: 3,
            downsample_steps: 2,
            instance_norm: true,
            k: 5,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.downsample_steps == 0 || self.k < 2 {
            return Err(Error::InvalidSpec(format!("generator {self:?}")));
        }
        Ok(())
    }

    /// Channel width after `i` downsampling steps.
    fn width(&self, i: usize) -> usize {
        self.base_channels << i.saturating_sub(1)
    }

    pub fn divisor(&self) -> usize {
        1 << self.downsample_steps
    }
}

/// One convolution of the generator, in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenLayer {
    pub name: String,
    pub kind: GenLayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub normalized: bool,
    pub output: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenLayerKind {
    Down,
    Residual,
    Up,
}

/// Output of [`Generator::synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub volume: Volume,
    pub map: ClassDiscriminativeMap,
    /// Voxels where `x + Δx` left the intensity range and was clamped.
    pub clamped: usize,
}

impl Synthesis {
    pub fn clamped_fraction(&self) -> f64 {
        self.clamped as f64 / self.map.data().len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    layers: Vec<GenLayer>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut c = 1 + spec.k;
        for i in 1..=spec.downsample_steps {
            let out = spec.width(i);
            layers.push(GenLayer {
                name: format!("down{i}"),
                kind: GenLayerKind::Down,
                in_channels: c,
                out_channels: out,
                normalized: spec.instance_norm,
                output: false,
            });
            c = out;
        }
        for r in 1..=spec.n_res_blocks {
            for j in 1..=2 {
                layers.push(GenLayer {
                    name: format!("res{r}.conv{j}"),
                    kind: GenLayerKind::Residual,
                    in_channels: c,
                    out_channels: c,
                    normalized: spec.instance_norm,
                    output: false,
                });
            }
        }
        for i in (1..=spec.downsample_steps).rev() {
            let last = i == 1;
            let out = if last { 1 } else { spec.width(i - 1) };
            layers.push(GenLayer {
                name: format!("up{}", spec.downsample_steps - i + 1),
                kind: GenLayerKind::Up,
                in_channels: c,
                out_channels: out,
                normalized: spec.instance_norm && !last,
                output: last,
            });
            c = out;
        }
        Ok(Generator { spec, layers })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[GenLayer] {
        &self.layers
    }

    pub fn init(&self, rng: &mut impl Rng) -> Params {
        let mut p = Params::new();
        let k3 = KERNEL * KERNEL * KERNEL;
        for layer in &self.layers {
            let (ci, co) = (layer.in_channels, layer.out_channels);
            let shape = match layer.kind {
                GenLayerKind::Up => [ci, co, KERNEL, KERNEL, KERNEL],
                _ => [co, ci, KERNEL, KERNEL, KERNEL],
            };
            let gain = if layer.output { 1.0 } else { 2f64.sqrt() };
            p.push(format!("{}.weight", layer.name), fan_in_gaussian(rng, &shape, ci * k3, gain));
            if layer.normalized {
                push_norm(&mut p, &format!("{}.norm", layer.name), co);
            } else {
                p.push(format!("{}.bias", layer.name), Tensor::zeros(&[co]));
            }
        }
        p
    }

    pub fn check_shape(&self, shape: Shape3) -> Result<()> {
        let d = self.spec.divisor();
        if shape.iter().any(|&s| s < 4) {
            return Err(Error::VolumeTooSmall(shape, "every extent must be at least 4".into()));
        }
        if shape.iter().any(|&s| s % d != 0) {
            return Err(Error::ShapeNotDivisible(shape, d));
        }
        Ok(())
    }

    /// Δx for a `[n, 1, d, h, w]` batch conditioned on per-sample targets.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, targets: &[ClassLabel]) -> Result<Var> {
        let (n, c, dims) = g.value(x).dims5();
        if c != 1 {
            return Err(Error::InvalidArgument(format!("generator input has {c} channels")));
        }
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!("{} targets for batch of {n}", targets.len())));
        }
        self.check_shape(dims)?;
        let mut cond = Vec::with_capacity(n * self.spec.k * dims.iter().product::<usize>());
        for t in targets {
            if t.k() != self.spec.k {
                return Err(Error::InvalidLabel { index: t.index(), k: self.spec.k });
            }
            cond.extend_from_slice(broadcast_label(&one_hot(*t), dims).data());
        }
        let cond = g.constant(Tensor::new(vec![n, self.spec.k, dims[0], dims[1], dims[2]], cond));
        let mut h = g.concat_channels(x, cond);

        let mut layers = self.layers.iter();
        for layer in layers.by_ref().take(self.spec.downsample_steps) {
            h = self.conv_block(g, p, layer, h, DOWN);
        }
        for _ in 0..self.spec.n_res_blocks {
            let l1 = layers.next().expect("residual layer");
            let l2 = layers.next().expect("residual layer");
            let r = self.conv_block(g, p, l1, h, SAME);
            let r = self.conv(g, p, l2, r, SAME);
            h = g.add(h, r);
        }
        for layer in layers {
            h = self.conv_block(g, p, layer, h, DOWN);
        }
        Ok(g.tanh(h))
    }

    /// Convolution (and instance norm), then ReLU on every hidden layer.
    fn conv_block(&self, g: &mut Graph, p: &BoundParams, layer: &GenLayer, h: Var, geom: ConvGeom) -> Var {
        let y = self.conv(g, p, layer, h, geom);
        if !layer.output {
            g.relu(y)
        } else {
            y
        }
    }

    fn conv(&self, g: &mut Graph, p: &BoundParams, layer: &GenLayer, h: Var, geom: ConvGeom) -> Var {
        let w = p.var(&format!("{}.weight", layer.name));
        let bias = (!layer.normalized).then(|| p.var(&format!("{}.bias", layer.name)));
        let y = match layer.kind {
            GenLayerKind::Up => g.conv_transpose3d(h, w, bias, geom, 1),
            _ => g.conv3d(h, w, bias, geom),
        };
        if layer.normalized {
            let name = format!("{}.norm", layer.name);
            g.instance_norm(y, p.var(&format!("{name}.gamma")), p.var(&format!("{name}.beta")))
        } else {
            y
        }
    }

    /// Δx = G(x, y') for a single volume.
    pub fn map(&self, params: &Params, x: &Volume, target: ClassLabel) -> Result<ClassDiscriminativeMap> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xv = g.constant(stack_volumes([x])?);
        let dx = self.forward(&mut g, &bound, xv, &[target])?;
        ClassDiscriminativeMap::new(Grid3::new(x.shape(), g.value(dx).data().to_vec())?)
    }

    /// x' = clamp(x + G(x, y')) onto the intensity range of `x`.
    pub fn synthesize(&self, params: &Params, x: &Volume, target: ClassLabel) -> Result<Synthesis> {
        let map = self.map(params, x, target)?;
        let (lo, hi) = x.range();
        let mut clamped = 0;
        let data = x
            .data()
            .iter()
            .zip(map.data())
            .map(|(a, d)| {
                let v = a + d;
                if v < lo || v > hi {
                    clamped += 1;
                }
                v.clamp(lo, hi)
            })
            .collect();
        let volume = Volume::with_range(Grid3::new(x.shape(), data)?, x.range())?;
        Ok(Synthesis { volume, map, clamped })
    }
}
