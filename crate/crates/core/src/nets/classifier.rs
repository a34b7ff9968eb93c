use rand::Rng;

use super::{fan_in_gaussian, push_bn_buffers, push_norm, stack_volumes, BoundParams, Forward, Mode, NetState, Params};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Tensor};
use crate::volume::{ClassProbabilities, Shape3, Volume};

/// 3-D DenseNet-BC.
///
/// `layers_per_block = (depth - 4) / (2 * n_dense_blocks)`, rounded down:
/// each bottleneck layer holds two convolutions, and the stem convolution,
/// the two transitions and the final linear layer make up the remaining 4.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSpec {
    pub depth: usize,
    pub growth_rate: usize,
    pub n_dense_blocks: usize,
    pub reduction: f64,
    pub k: usize,
}

impl ClassifierSpec {
    /// The configuration of the original model: depth 30, growth 12, three
    /// blocks, reduction 0.5.
    pub fn full_scale(k: usize) -> Self {
        ClassifierSpec {
            depth: 30,
            growth_rate: 12,
            n_dense_blocks: 3,
            reduction: 0.5,
            k,
        }
    }

    /// Small default used for phantom-scale runs.
    pub fn desk_scale(k: usize) -> Self {
        ClassifierSpec {
            depth: 14,
            growth_rate: 6,
            n_dense_blocks: 3,
            reduction: 0.5,
            k,
        }
    }

    pub fn layers_per_block(&self) -> usize {
        self.depth.saturating_sub(4) / (2 * self.n_dense_blocks.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dense_blocks == 0 || self.growth_rate == 0 || self.k < 2 {
            return Err(Error::InvalidSpec(format!("classifier {self:?}")));
        }
        if self.layers_per_block() == 0 {
            return Err(Error::InvalidSpec(format!(
                "depth {} leaves no bottleneck layers for {} blocks",
                self.depth, self.n_dense_blocks
            )));
        }
        if !(self.reduction > 0.0 && self.reduction <= 1.0) {
            return Err(Error::InvalidSpec(format!("reduction {} not in (0, 1]", self.reduction)));
        }
        Ok(())
    }

    /// Weighted layers actually built: `4 + 2 * n_blocks * layers_per_block`.
    pub fn weighted_layers(&self) -> usize {
        4 + 2 * self.n_dense_blocks * self.layers_per_block()
    }
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec::desk_scale(5)
    }
}

const STEM: ConvGeom = ConvGeom::new(3, 2, 1);
const SAME: ConvGeom = ConvGeom::new(3, 1, 1);
const POINT: ConvGeom = ConvGeom::new(1, 1, 0);

#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ClassifierSpec,
    /// Input channels of each block.
    block_inputs: Vec<usize>,
    final_channels: usize,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec) -> Result<Self> {
        spec.validate()?;
        let g = spec.growth_rate;
        let l = spec.layers_per_block();
        let mut c = 2 * g;
        let mut block_inputs = Vec::new();
        for b in 0..spec.n_dense_blocks {
            block_inputs.push(c);
            c += l * g;
            if b + 1 < spec.n_dense_blocks {
                c = ((c as f64) * spec.reduction).floor().max(1.0) as usize;
            }
        }
        Ok(Classifier {
            spec,
            block_inputs,
            final_channels: c,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn final_channels(&self) -> usize {
        self.final_channels
    }

    /// Number of 3-D convolutions in the network.
    pub fn conv_count(&self) -> usize {
        1 + 2 * self.spec.n_dense_blocks * self.spec.layers_per_block() + (self.spec.n_dense_blocks - 1)
    }

    pub fn init(&self, rng: &mut impl Rng) -> NetState {
        let mut p = Params::new();
        let mut buffers = Params::new();
        let g = self.spec.growth_rate;
        let mut bn = |p: &mut Params, name: &str, c: usize| {
            push_norm(p, name, c);
            push_bn_buffers(&mut buffers, name, c);
        };
        let gain = 2f64.sqrt();
        p.push("stem.conv.weight", fan_in_gaussian(rng, &[2 * g, 1, 3, 3, 3], 27, gain));
        for (b, &c0) in self.block_inputs.iter().enumerate() {
            let mut c = c0;
            for l in 0..self.spec.layers_per_block() {
                let name = format!("block{b}.layer{l}");
                bn(&mut p, &format!("{name}.bn1"), c);
                p.push(format!("{name}.conv1.weight"), fan_in_gaussian(rng, &[4 * g, c, 1, 1, 1], c, gain));
                bn(&mut p, &format!("{name}.bn2"), 4 * g);
                p.push(format!("{name}.conv2.weight"), fan_in_gaussian(rng, &[g, 4 * g, 3, 3, 3], 4 * g * 27, gain));
                c += g;
            }
            if b + 1 < self.block_inputs.len() {
                let out = self.block_inputs[b + 1];
                bn(&mut p, &format!("trans{b}.bn"), c);
                p.push(format!("trans{b}.conv.weight"), fan_in_gaussian(rng, &[out, c, 1, 1, 1], c, gain));
            }
        }
        bn(&mut p, "final.bn", self.final_channels);
        let k = self.spec.k;
        p.push("fc.weight", fan_in_gaussian(rng, &[k, self.final_channels], self.final_channels, 1.0));
        p.push("fc.bias", Tensor::zeros(&[k]));
        NetState { params: p, buffers }
    }

    pub fn check_shape(&self, shape: Shape3) -> Result<()> {
        // stem halves, every transition halves again
        let halvings = self.spec.n_dense_blocks;
        let min = 1usize << halvings;
        if shape.iter().any(|&s| s < min) {
            return Err(Error::VolumeTooSmall(shape, format!("classifier needs every extent >= {min}")));
        }
        Ok(())
    }

    /// Class logits `[n, k]` for a `[n, 1, d, h, w]` batch.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, fwd: &mut Forward, x: Var) -> Result<Var> {
        let (_, _, dims) = g.value(x).dims5();
        self.check_shape(dims)?;
        let mut h = g.conv3d(x, p.var("stem.conv.weight"), None, STEM);
        for b in 0..self.spec.n_dense_blocks {
            for l in 0..self.spec.layers_per_block() {
                let name = format!("block{b}.layer{l}");
                let y = fwd.batch_norm(g, p, &format!("{name}.bn1"), h);
                let y = g.relu(y);
                let y = g.conv3d(y, p.var(&format!("{name}.conv1.weight")), None, POINT);
                let y = fwd.batch_norm(g, p, &format!("{name}.bn2"), y);
                let y = g.relu(y);
                let y = g.conv3d(y, p.var(&format!("{name}.conv2.weight")), None, SAME);
                h = g.concat_channels(h, y);
            }
            if b + 1 < self.spec.n_dense_blocks {
                let y = fwd.batch_norm(g, p, &format!("trans{b}.bn"), h);
                let y = g.relu(y);
                let y = g.conv3d(y, p.var(&format!("trans{b}.conv.weight")), None, POINT);
                h = g.avg_pool2(y);
            }
        }
        let y = fwd.batch_norm(g, p, "final.bn", h);
        let y = g.relu(y);
        let pooled = g.global_avg_pool(y);
        Ok(g.linear(pooled, p.var("fc.weight"), p.var("fc.bias")))
    }

    /// Evaluation-mode class probabilities for one volume.
    pub fn probabilities(&self, state: &NetState, x: &Volume) -> Result<ClassProbabilities> {
        Ok(self.probabilities_batch(state, &[x])?.remove(0))
    }

    pub fn probabilities_batch(&self, state: &NetState, xs: &[&Volume]) -> Result<Vec<ClassProbabilities>> {
        let mut g = Graph::new();
        let bound = state.params.bind(&mut g, false);
        let xv = g.constant(stack_volumes(xs.iter().copied())?);
        let mut fwd = Forward::new(Mode::Eval, state);
        let logits = self.forward(&mut g, &bound, &mut fwd, xv)?;
        let k = self.spec.k;
        Ok(g.value(logits).data().chunks(k).map(ClassProbabilities::from_logits).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form parameter count of a 3-D DenseNet-BC, independent of the
    /// construction code above.
    fn closed_form_params(spec: &ClassifierSpec) -> usize {
        let (g, l, nb) = (spec.growth_rate, (spec.depth - 4) / (2 * spec.n_dense_blocks), spec.n_dense_blocks);
        let mut total = 2 * g * 27;
        let mut c = 2 * g;
        for b in 0..nb {
            for i in 0..l {
                let cin = c + i * g;
                total += 2 * cin + cin * 4 * g + 2 * 4 * g + 4 * g * g * 27;
            }
            c += l * g;
            if b + 1 < nb {
                let out = (c as f64 * spec.reduction).floor() as usize;
                total += 2 * c + c * out;
                c = out;
            }
        }
        total + 2 * c + c * spec.k + spec.k
    }

    #[test]
    fn full_scale_allocation() {
        let spec = ClassifierSpec::full_scale(5);
        assert_eq!(spec.layers_per_block(), 4);
        let net = Classifier::new(spec.clone()).unwrap();
        // 24 -> 72 -> 36 -> 84 -> 42 -> 90
        assert_eq!(net.final_channels(), 90);
        let state = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(state.params.scalar_count(), closed_form_params(&spec));
        assert_eq!(net.conv_count() + 1, spec.weighted_layers());
    }

    #[test]
    fn desk_scale_allocation() {
        let spec = ClassifierSpec::desk_scale(2);
        let net = Classifier::new(spec.clone()).unwrap();
        let state = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(state.params.scalar_count(), closed_form_params(&spec));
        assert!(Classifier::new(ClassifierSpec { depth: 8, ..spec }).is_err());
    }

    #[test]
    fn probabilities_are_a_simplex() {
        let net = Classifier::new(ClassifierSpec::desk_scale(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = net.init(&mut rng);
        let x = Volume::from_data([8, 8, 8], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = net.probabilities(&state, &x).unwrap();
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(p, net.probabilities(&state, &x).unwrap());
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let net = Classifier::new(ClassifierSpec::desk_scale(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = net.init(&mut rng);
        state.params.get_mut("fc.weight").unwrap().data_mut().fill(0.0);
        let x = Volume::from_data([8, 8, 8], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = net.probabilities(&state, &x).unwrap();
        for v in p.probs() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
