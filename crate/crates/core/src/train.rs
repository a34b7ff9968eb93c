//! Multidirectional training: per step, a D update on `-adv`, a C update on
//! the real-volume classification loss, then a G update on the weighted
//! generator objective, each sample mapped toward a freshly drawn target
//! stage.
//!
//! The generator forward pass of a step is recorded once. The discriminator
//! step sees its output as constants; the generator step then continues the
//! same graph through the freshly updated C and D, bound as constants so no
//! gradient reaches their weights.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_graph, cls_loss_graph, l1_penalty_graph, mean_abs_diff_graph, total_g_graph, total_losses, LossReport, LossTerms,
    LossWeights, LOSS_CSV_HEADER,
};
use crate::metrics::ssim;
use crate::nets::{
    collect_grads, stack_volumes, update_running_stats, Classifier, ClassifierSpec, Discriminator, DiscriminatorSpec, Forward,
    Generator, GeneratorSpec, Mode, NetState, Params,
};
use crate::optim::Adam;
use crate::phantom::{derive_seed, PhantomSample};
use crate::settings::{self, SettingError, Settings};
use crate::tensor::Tensor;
use crate::volume::{ClassLabel, Shape3, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_c: f64,
    pub lr_d: f64,
    pub adam_betas: (f64, f64),
    pub max_steps: u64,
    pub val_every: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Clamp synthesized volumes to `[-1, 1]` inside the training graph.
    pub clamp_synth: bool,
    pub generator: GeneratorSpec,
    pub classifier: ClassifierSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(2)
    }
}

impl TrainConfig {
    /// Optimizer settings of the original model with desk-scale networks.
    pub fn desk(k: usize) -> Self {
        TrainConfig {
            batch_size: 8,
            lr_g: 1e-3,
            lr_c: 1e-3,
            lr_d: 1e-4,
            adam_betas: (0.9, 0.999),
            max_steps: 1000,
            val_every: 50,
            patience: 10,
            seed: 0,
            weights: LossWeights::default(),
            clamp_synth: false,
            generator: GeneratorSpec {
                base_channels: 8,
                k,
                ..GeneratorSpec::default()
            },
            classifier: ClassifierSpec::desk_scale(k),
            discriminator: DiscriminatorSpec::default(),
        }
    }

    pub fn k(&self) -> usize {
        self.generator.k
    }

    pub fn set_k(&mut self, k: usize) {
        self.generator.k = k;
        self.classifier.k = k;
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_c", self.lr_c), ("lr_d", self.lr_d)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {lr} must be a non-negative real")));
            }
        }
        if self.lr_d > self.lr_g {
            return Err(Error::InvalidArgument(format!("lr_d = {} exceeds lr_g = {}", self.lr_d, self.lr_g)));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidArgument(format!("adam betas {:?} outside [0, 1)", self.adam_betas)));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidArgument("val_every must be positive".into()));
        }
        self.weights.validate()?;
        if self.generator.k != self.classifier.k {
            return Err(Error::InvalidSpec("generator and classifier disagree on K".into()));
        }
        if self.k() < 2 {
            return Err(Error::DegenerateK(self.k()));
        }
        self.generator.validate()?;
        self.classifier.validate()
    }
}

impl Settings for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), SettingError> {
        use settings::{parse, parse_bool};
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a real";
        match key {
            "batch_size" => self.batch_size = parse(key, value, INT)?,
            "lr_g" => self.lr_g = parse(key, value, REAL)?,
            "lr_c" => self.lr_c = parse(key, value, REAL)?,
            "lr_d" => self.lr_d = parse(key, value, REAL)?,
            "adam_beta1" => self.adam_betas.0 = parse(key, value, REAL)?,
            "adam_beta2" => self.adam_betas.1 = parse(key, value, REAL)?,
            "max_steps" => self.max_steps = parse(key, value, INT)?,
            "val_every" => self.val_every = parse(key, value, INT)?,
            "patience" => self.patience = parse(key, value, INT)?,
            "seed" => self.seed = parse(key, value, INT)?,
            "lambda_cls" => self.weights.lambda_cls = parse(key, value, REAL)?,
            "lambda_l1" => self.weights.lambda_l1 = parse(key, value, REAL)?,
            "lambda_cyc_org" => self.weights.lambda_cyc_org = parse(key, value, REAL)?,
            "lambda_cyc_tar" => self.weights.lambda_cyc_tar = parse(key, value, REAL)?,
            "clamp_synth" => self.clamp_synth = parse_bool(key, value)?,
            "k" => self.set_k(parse(key, value, INT)?),
            "generator.base_channels" => self.generator.base_channels = parse(key, value, INT)?,
            "generator.n_res_blocks" => self.generator.n_res_blocks = parse(key, value, INT)?,
            "generator.downsample_steps" => self.generator.downsample_steps = parse(key, value, INT)?,
            "generator.instance_norm" => self.generator.instance_norm = parse_bool(key, value)?,
            "classifier.depth" => self.classifier.depth = parse(key, value, INT)?,
            "classifier.growth_rate" => self.classifier.growth_rate = parse(key, value, INT)?,
            "classifier.n_dense_blocks" => self.classifier.n_dense_blocks = parse(key, value, INT)?,
            "classifier.reduction" => self.classifier.reduction = parse(key, value, REAL)?,
            "discriminator.base_channels" => self.discriminator.base_channels = parse(key, value, INT)?,
            _ => return Err(SettingError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        [
            ("k", self.k().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_g", format!("{:?}", self.lr_g)),
            ("lr_c", format!("{:?}", self.lr_c)),
            ("lr_d", format!("{:?}", self.lr_d)),
            ("adam_beta1", format!("{:?}", self.adam_betas.0)),
            ("adam_beta2", format!("{:?}", self.adam_betas.1)),
            ("max_steps", self.max_steps.to_string()),
            ("val_every", self.val_every.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda_cls", format!("{:?}", w.lambda_cls)),
            ("lambda_l1", format!("{:?}", w.lambda_l1)),
            ("lambda_cyc_org", format!("{:?}", w.lambda_cyc_org)),
            ("lambda_cyc_tar", format!("{:?}", w.lambda_cyc_tar)),
            ("clamp_synth", self.clamp_synth.to_string()),
            ("generator.base_channels", self.generator.base_channels.to_string()),
            ("generator.n_res_blocks", self.generator.n_res_blocks.to_string()),
            ("generator.downsample_steps", self.generator.downsample_steps.to_string()),
            ("generator.instance_norm", self.generator.instance_norm.to_string()),
            ("classifier.depth", self.classifier.depth.to_string()),
            ("classifier.growth_rate", self.classifier.growth_rate.to_string()),
            ("classifier.n_dense_blocks", self.classifier.n_dense_blocks.to_string()),
            ("classifier.reduction", format!("{:?}", self.classifier.reduction)),
            ("discriminator.base_channels", self.discriminator.base_channels.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Uniform draw over the `K - 1` stages other than `y`.
pub fn sample_target(y: ClassLabel, rng: &mut impl Rng) -> Result<ClassLabel> {
    let k = y.k();
    if k < 2 {
        return Err(Error::DegenerateK(k));
    }
    let r = rng.gen_range(0..k - 1);
    ClassLabel::new(if r >= y.index() { r + 1 } else { r }, k)
}

/// Labelled volumes, optionally tagged with subject ids so that each
/// volume can be paired with the same subject's scan at another stage.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub volumes: Vec<Volume>,
    pub labels: Vec<ClassLabel>,
    pub subjects: Vec<Option<usize>>,
    by_subject_stage: HashMap<(usize, usize), Vec<usize>>,
}

impl Dataset {
    pub fn new(volumes: Vec<Volume>, labels: Vec<ClassLabel>, subjects: Vec<Option<usize>>) -> Result<Self> {
        if volumes.len() != labels.len() || volumes.len() != subjects.len() {
            return Err(Error::InvalidArgument("dataset columns differ in length".into()));
        }
        if let Some(first) = volumes.first() {
            for v in &volumes {
                if v.shape() != first.shape() {
                    return Err(Error::shape(first.shape(), v.shape()));
                }
            }
        }
        let mut by_subject_stage: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (i, (s, l)) in subjects.iter().zip(&labels).enumerate() {
            if let Some(s) = s {
                by_subject_stage.entry((*s, l.index())).or_default().push(i);
            }
        }
        Ok(Dataset {
            volumes,
            labels,
            subjects,
            by_subject_stage,
        })
    }

    pub fn from_samples(samples: &[PhantomSample], indices: &[usize]) -> Result<Self> {
        Dataset::new(
            indices.iter().map(|&i| samples[i].volume.clone()).collect(),
            indices.iter().map(|&i| samples[i].label).collect(),
            indices.iter().map(|&i| Some(samples[i].subject_id)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn shape(&self) -> Option<Shape3> {
        self.volumes.first().map(Volume::shape)
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].index() == class).collect()
    }

    /// A real volume of stage `target` for item `i`: the same subject's scan
    /// when there is one, otherwise a random volume of that stage.
    pub fn partner(&self, i: usize, target: ClassLabel, rng: &mut impl Rng) -> Result<usize> {
        if let Some(s) = self.subjects[i] {
            if let Some(c) = self.by_subject_stage.get(&(s, target.index())) {
                return Ok(c[if c.len() == 1 { 0 } else { rng.gen_range(0..c.len()) }]);
            }
        }
        let pool = self.class_indices(target.index());
        if pool.is_empty() {
            return Err(Error::EmptyClass(target.index()));
        }
        Ok(pool[rng.gen_range(0..pool.len())])
    }
}

/// Network descriptions built from a configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub generator: Generator,
    pub classifier: Classifier,
    pub discriminator: Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub g: Params,
    pub c: NetState,
    pub d: NetState,
    pub opt_g: Adam,
    pub opt_c: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
    pub best_val_ssim: f64,
    pub stale_validations: usize,
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            generator: Generator::new(config.generator.clone())?,
            classifier: Classifier::new(config.classifier.clone())?,
            discriminator: Discriminator::new(config.discriminator.clone())?,
            config,
        })
    }

    pub fn check_shape(&self, shape: Shape3) -> Result<()> {
        self.generator.check_shape(shape)?;
        self.classifier.check_shape(shape)?;
        self.discriminator.check_shape(shape)
    }

    /// Fresh weights and optimizer state, all derived from the config seed.
    pub fn init_state(&self) -> TrainState {
        let seed = self.config.seed;
        let rng = |tag| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag]));
        let g = self.generator.init(&mut rng(10));
        let c = self.classifier.init(&mut rng(11));
        let d = self.discriminator.init(&mut rng(12));
        let betas = self.config.adam_betas;
        TrainState {
            step: 0,
            opt_g: Adam::new(&g, self.config.lr_g, betas),
            opt_c: Adam::new(&c.params, self.config.lr_c, betas),
            opt_d: Adam::new(&d.params, self.config.lr_d, betas),
            g,
            c,
            d,
            rng: rng(20),
            best_val_ssim: f64::NEG_INFINITY,
            stale_validations: 0,
        }
    }
}

/// Tensors of one training step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    /// Source volumes `[n, 1, d, h, w]`.
    pub x: Tensor,
    pub labels: Vec<ClassLabel>,
    pub targets: Vec<ClassLabel>,
    /// Real volumes of the target stages, same layout as `x`.
    pub x_target: Tensor,
}

impl StepBatch {
    /// Draws targets and real partners for the items `indices` of `data`.
    pub fn draw(data: &Dataset, indices: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        let mut partners = Vec::new();
        for &i in indices {
            let y = data.labels[i];
            let t = sample_target(y, rng)?;
            partners.push(data.partner(i, t, rng)?);
            labels.push(y);
            targets.push(t);
        }
        Ok(StepBatch {
            x: stack_volumes(indices.iter().map(|&i| &data.volumes[i]))?,
            labels,
            targets,
            x_target: stack_volumes(partners.iter().map(|&i| &data.volumes[i]))?,
        })
    }
}

/// Loss value, gradients and batch statistics of a D or C update.
#[derive(Debug, Clone)]
pub struct NetObjective {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub stats: Vec<(String, BatchStats)>,
}

/// `-adv` with D trainable and both inputs constant. Returns `(objective,
/// adv)`.
pub fn discriminator_objective(model: &Model, d: &NetState, x_real: &Tensor, x_fake: &Tensor) -> Result<(NetObjective, f64)> {
    let mut g = Graph::new();
    let bound = d.params.bind(&mut g, true);
    let real = g.constant(x_real.clone());
    let fake = g.constant(x_fake.clone());
    let mut fwd = Forward::new(Mode::Train, d);
    let sr = model.discriminator.scores(&mut g, &bound, &mut fwd, real)?;
    let sf = model.discriminator.scores(&mut g, &bound, &mut fwd, fake)?;
    let adv = adv_loss_graph(&mut g, sr, sf);
    let loss = g.scale(adv, -1.0);
    let adv_value = g.value(adv).item();
    let mut grads = g.backward(loss);
    let grads = collect_grads(&d.params, bound.vars(), &mut grads)?;
    Ok((
        NetObjective {
            loss: g.value(loss).item(),
            grads,
            stats: fwd.into_stats(),
        },
        adv_value,
    ))
}

/// Classification loss of real volumes with C trainable.
pub fn classifier_objective(model: &Model, c: &NetState, x: &Tensor, labels: &[ClassLabel]) -> Result<NetObjective> {
    let mut g = Graph::new();
    let bound = c.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let mut fwd = Forward::new(Mode::Train, c);
    let logits = model.classifier.forward(&mut g, &bound, &mut fwd, xv)?;
    let loss = cls_loss_graph(&mut g, logits, labels);
    let mut grads = g.backward(loss);
    let grads = collect_grads(&c.params, bound.vars(), &mut grads)?;
    Ok(NetObjective {
        loss: g.value(loss).item(),
        grads,
        stats: fwd.into_stats(),
    })
}

/// The recorded generator half of a step: `Δx = G(x, y')`, `x' = x + Δx`
/// and the reconstruction `X_r = G(x', y) + x'`.
pub struct GeneratorPass {
    graph: Graph,
    g_vars: Vec<Var>,
    x: Var,
    delta: Var,
    fake: Var,
    recon: Var,
}

/// Terms and gradients of the generator objective.
#[derive(Debug, Clone)]
pub struct GeneratorObjective {
    pub adv: f64,
    pub cls_fake: f64,
    pub l1: f64,
    pub cyc_org: f64,
    pub cyc_tar: f64,
    pub total: f64,
    pub grads: Vec<Tensor>,
}

impl GeneratorPass {
    pub fn forward(model: &Model, g_params: &Params, batch: &StepBatch) -> Result<Self> {
        let clamp = model.config.clamp_synth;
        let mut graph = Graph::new();
        let bound = g_params.bind(&mut graph, true);
        let g = &mut graph;
        let x = g.constant(batch.x.clone());
        let delta = model.generator.forward(g, &bound, x, &batch.targets)?;
        let mut fake = g.add(x, delta);
        if clamp {
            fake = g.clamp(fake, -1.0, 1.0);
        }
        let back = model.generator.forward(g, &bound, fake, &batch.labels)?;
        let mut recon = g.add(fake, back);
        if clamp {
            recon = g.clamp(recon, -1.0, 1.0);
        }
        let g_vars = bound.vars().to_vec();
        Ok(GeneratorPass {
            graph,
            g_vars,
            x,
            delta,
            fake,
            recon,
        })
    }

    /// Synthesized volumes `x'`.
    pub fn fake(&self) -> &Tensor {
        self.graph.value(self.fake)
    }

    pub fn delta(&self) -> &Tensor {
        self.graph.value(self.delta)
    }

    /// Completes `L_G` through C and D held constant and differentiates it
    /// with respect to the generator weights.
    pub fn finish(mut self, model: &Model, g_params: &Params, c: &NetState, d: &NetState, batch: &StepBatch) -> Result<GeneratorObjective> {
        let w = model.config.weights;
        let g = &mut self.graph;
        let pc = c.params.bind(g, false);
        let pd = d.params.bind(g, false);
        let mut fd = Forward::new(Mode::Train, d);
        let sr = model.discriminator.scores(g, &pd, &mut fd, self.x)?;
        let sf = model.discriminator.scores(g, &pd, &mut fd, self.fake)?;
        let adv = adv_loss_graph(g, sr, sf);
        let mut fc = Forward::new(Mode::Train, c);
        let logits = model.classifier.forward(g, &pc, &mut fc, self.fake)?;
        let cls_fake = cls_loss_graph(g, logits, &batch.targets);
        let l1 = l1_penalty_graph(g, self.delta);
        let xt = g.constant(batch.x_target.clone());
        let cyc_tar = mean_abs_diff_graph(g, xt, self.fake);
        let cyc_org = mean_abs_diff_graph(g, self.x, self.recon);
        let total = total_g_graph(g, &w, adv, cls_fake, l1, cyc_org, cyc_tar);
        let mut grads = g.backward(total);
        let grads = collect_grads(g_params, &self.g_vars, &mut grads)?;
        let v = |var| g.value(var).item();
        Ok(GeneratorObjective {
            adv: v(adv),
            cls_fake: v(cls_fake),
            l1: v(l1),
            cyc_org: v(cyc_org),
            cyc_tar: v(cyc_tar),
            total: v(total),
            grads,
        })
    }
}

fn finite(step: u64, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, term, value })
    }
}

/// One D → C → G update on `batch`. The state's step counter advances
/// only when all three updates succeed.
pub fn train_step_on(model: &Model, state: &mut TrainState, batch: &StepBatch) -> Result<LossReport> {
    let step = state.step + 1;
    let pass = GeneratorPass::forward(model, &state.g, batch)?;

    let (d_obj, adv) = discriminator_objective(model, &state.d, &batch.x, pass.fake())?;
    finite(step, "adv", adv)?;
    state.opt_d.step(&mut state.d.params, &d_obj.grads);
    update_running_stats(&mut state.d.buffers, &d_obj.stats);

    let c_obj = classifier_objective(model, &state.c, &batch.x, &batch.labels)?;
    finite(step, "cls_real", c_obj.loss)?;
    state.opt_c.step(&mut state.c.params, &c_obj.grads);
    update_running_stats(&mut state.c.buffers, &c_obj.stats);

    let g_obj = pass.finish(model, &state.g, &state.c, &state.d, batch)?;
    for (term, value) in [
        ("cls_fake", g_obj.cls_fake),
        ("l1_penalty", g_obj.l1),
        ("cyc_org", g_obj.cyc_org),
        ("cyc_tar", g_obj.cyc_tar),
        ("total_G", g_obj.total),
    ] {
        finite(step, term, value)?;
    }
    state.opt_g.step(&mut state.g, &g_obj.grads);
    state.step = step;
    total_losses(
        &LossTerms {
            adv,
            cls_real: c_obj.loss,
            cls_fake: g_obj.cls_fake,
            cyc_tar: g_obj.cyc_tar,
            cyc_org: g_obj.cyc_org,
            l1: g_obj.l1,
        },
        &model.config.weights,
    )
    .map_err(|e| match e {
        Error::NonFiniteTerm { term, value } => Error::NonFiniteLoss { step, term, value },
        other => other,
    })
}

/// Draws a batch (items with replacement, targets, partners) from the
/// state's generator and performs one update.
pub fn train_step(model: &Model, state: &mut TrainState, data: &Dataset) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let indices: Vec<usize> = (0..model.config.batch_size).map(|_| state.rng.gen_range(0..data.len())).collect();
    let batch = StepBatch::draw(data, &indices, &mut state.rng)?;
    train_step_on(model, state, &batch)
}

/// Mean SSIM between each validation volume mapped toward another stage
/// (chosen cyclically) and a real volume of that stage.
pub fn validate(model: &Model, g_params: &Params, val: &Dataset) -> Result<f64> {
    let k = model.config.k();
    for c in 0..k {
        if val.class_indices(c).is_empty() {
            return Err(Error::EmptyClass(c));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.config.seed, &[30]));
    let mut total = 0.0;
    for i in 0..val.len() {
        let y = val.labels[i].index();
        let target = ClassLabel::new((y + 1 + i % (k - 1)) % k, k)?;
        let partner = val.partner(i, target, &mut rng)?;
        let synth = model.generator.synthesize(g_params, &val.volumes[i], target)?;
        total += ssim(synth.volume.grid(), val.volumes[partner].grid())?;
    }
    Ok(total / val.len() as f64)
}

// ----- checkpoints -----------------------------------------------------------

const CHECKPOINT_KIND: &str = "mpgan-train-state";

fn push_params(a: &mut Archive, prefix: &str, p: &Params) {
    for (name, t) in p.iter() {
        a.push_array(format!("{prefix}/{name}"), t.clone());
    }
}

fn read_params(a: &Archive, prefix: &str, template: &Params) -> Result<Params> {
    let mut out = Params::new();
    for (name, t) in template.iter() {
        let key = format!("{prefix}/{name}");
        let stored = a.array(&key).ok_or_else(|| Error::SpecMismatch(format!("checkpoint lacks {key}")))?;
        if stored.shape() != t.shape() {
            return Err(Error::SpecMismatch(format!("{key}: {:?} vs {:?}", stored.shape(), t.shape())));
        }
        out.push(name, stored.clone());
    }
    Ok(out)
}

fn push_adam(a: &mut Archive, prefix: &str, opt: &Adam, template: &Params) {
    a.set(format!("{prefix}.t"), opt.t);
    for (i, (name, _)) in template.iter().enumerate() {
        a.push_array(format!("{prefix}.m/{name}"), opt.m[i].clone());
        a.push_array(format!("{prefix}.v/{name}"), opt.v[i].clone());
    }
}

fn read_adam(a: &Archive, prefix: &str, template: &Params, lr: f64, betas: (f64, f64)) -> Result<Adam> {
    let m = read_params(a, &format!("{prefix}.m"), template)?;
    let v = read_params(a, &format!("{prefix}.v"), template)?;
    Ok(Adam {
        lr,
        betas,
        t: manifest_value(a, &format!("{prefix}.t"))?,
        m: m.tensors().to_vec(),
        v: v.tensors().to_vec(),
    })
}

fn manifest_value<T: std::str::FromStr>(a: &Archive, key: &str) -> Result<T> {
    a.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::SpecMismatch(format!("checkpoint manifest lacks a valid {key}")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    (0..s.len())
        .step_by(2)
        .map(|i| s.get(i..i + 2).and_then(|h| u8::from_str_radix(h, 16).ok()))
        .collect()
}

/// Serializes the configuration and complete training state.
pub fn checkpoint_archive(model: &Model, state: &TrainState) -> Archive {
    let mut a = Archive::new();
    a.set("kind", CHECKPOINT_KIND);
    for (k, v) in model.config.pairs() {
        a.set(format!("config.{k}"), v);
    }
    a.set("step", state.step);
    a.set("best_val_ssim", format!("{:?}", state.best_val_ssim));
    a.set("stale_validations", state.stale_validations);
    a.set("rng.seed", hex(&state.rng.get_seed()));
    a.set("rng.stream", state.rng.get_stream());
    a.set("rng.word_pos", state.rng.get_word_pos());
    push_params(&mut a, "g", &state.g);
    push_params(&mut a, "c", &state.c.params);
    push_params(&mut a, "c.buffers", &state.c.buffers);
    push_params(&mut a, "d", &state.d.params);
    push_params(&mut a, "d.buffers", &state.d.buffers);
    push_adam(&mut a, "opt_g", &state.opt_g, &state.g);
    push_adam(&mut a, "opt_c", &state.opt_c, &state.c.params);
    push_adam(&mut a, "opt_d", &state.opt_d, &state.d.params);
    a
}

pub fn checkpoint(model: &Model, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    checkpoint_archive(model, state).save(path)
}

/// Training configuration stored in a checkpoint.
pub fn archive_config(a: &Archive) -> Result<TrainConfig> {
    if a.get("kind") != Some(CHECKPOINT_KIND) {
        return Err(Error::VersionMismatch("archive is not a training checkpoint".into()));
    }
    let pairs: Vec<(String, String)> = a
        .manifest
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let mut config = TrainConfig::default();
    settings::apply(&mut config, &pairs).map_err(|e| Error::SpecMismatch(e.to_string()))?;
    Ok(config)
}

/// Restores a training state saved for a model with the same network
/// structure as `model`; optimizer hyper-parameters come from `model`.
pub fn state_from_archive(model: &Model, a: &Archive) -> Result<TrainState> {
    let stored = archive_config(a)?;
    if stored.generator != model.config.generator
        || stored.classifier != model.config.classifier
        || stored.discriminator != model.config.discriminator
    {
        return Err(Error::SpecMismatch("checkpoint networks differ from the configured ones".into()));
    }
    let template = model.init_state();
    let g = read_params(a, "g", &template.g)?;
    let c = NetState {
        params: read_params(a, "c", &template.c.params)?,
        buffers: read_params(a, "c.buffers", &template.c.buffers)?,
    };
    let d = NetState {
        params: read_params(a, "d", &template.d.params)?,
        buffers: read_params(a, "d.buffers", &template.d.buffers)?,
    };
    let cfg = &model.config;
    let seed: [u8; 32] = a
        .get("rng.seed")
        .and_then(unhex)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::SpecMismatch("checkpoint manifest lacks a valid rng.seed".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(manifest_value(a, "rng.stream")?);
    rng.set_word_pos(manifest_value(a, "rng.word_pos")?);
    Ok(TrainState {
        step: manifest_value(a, "step")?,
        opt_g: read_adam(a, "opt_g", &g, cfg.lr_g, cfg.adam_betas)?,
        opt_c: read_adam(a, "opt_c", &c.params, cfg.lr_c, cfg.adam_betas)?,
        opt_d: read_adam(a, "opt_d", &d.params, cfg.lr_d, cfg.adam_betas)?,
        g,
        c,
        d,
        rng,
        best_val_ssim: manifest_value(a, "best_val_ssim")?,
        stale_validations: manifest_value(a, "stale_validations")?,
    })
}

pub fn resume(model: &Model, path: impl AsRef<Path>) -> Result<TrainState> {
    state_from_archive(model, &Archive::load(path)?)
}

/// Model and state from a checkpoint alone.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, TrainState)> {
    let a = Archive::load(path)?;
    let model = Model::new(archive_config(&a)?)?;
    let state = state_from_archive(&model, &a)?;
    Ok((model, state))
}

// ----- run loop -------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum Event<'a> {
    Step { step: u64, report: &'a LossReport },
    Validation { step: u64, ssim: f64, improved: bool },
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reports: Vec<LossReport>,
    pub ssim_trace: Vec<(u64, f64)>,
    /// State at the best validation so far (the final state if none ran).
    pub best: TrainState,
    pub best_step: u64,
    pub stopped_early: bool,
}

pub const SSIM_CSV_HEADER: &str = "step,val_ssim,best";

fn open_csv(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = if append {
        OpenOptions::new().create(true).append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Trains until `max_steps` or until validation SSIM has not improved for
/// `patience` consecutive validations.
///
/// With `out_dir`, appends to `losses.csv` and `ssim.csv` and keeps
/// `checkpoints/last.mpgc` and `checkpoints/best.mpgc` current.
pub fn run(
    model: &Model,
    state: &mut TrainState,
    train: &Dataset,
    val: &Dataset,
    out_dir: Option<&Path>,
    mut observer: impl FnMut(Event),
) -> Result<RunSummary> {
    let cfg = &model.config;
    if let Some(shape) = train.shape() {
        model.check_shape(shape)?;
    }
    let resumed = state.step > 0;
    let mut files = match out_dir {
        Some(dir) => {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
            Some((
                open_csv(&dir.join("losses.csv"), LOSS_CSV_HEADER, resumed)?,
                open_csv(&dir.join("ssim.csv"), SSIM_CSV_HEADER, resumed)?,
                dir.to_path_buf(),
            ))
        }
        None => None,
    };
    let io_err = |dir: &Path, name: &str, e| Error::io(dir.join(name), e);
    let mut summary = RunSummary {
        reports: Vec::new(),
        ssim_trace: Vec::new(),
        best: state.clone(),
        best_step: state.step,
        stopped_early: false,
    };
    while state.step < cfg.max_steps {
        let report = train_step(model, state, train)?;
        if let Some((losses, _, dir)) = &mut files {
            writeln!(losses, "{}", report.csv_row(state.step)).map_err(|e| io_err(dir, "losses.csv", e))?;
        }
        observer(Event::Step {
            step: state.step,
            report: &report,
        });
        summary.reports.push(report);
        if state.step % cfg.val_every == 0 || state.step == cfg.max_steps {
            let s = validate(model, &state.g, val)?;
            let improved = s > state.best_val_ssim;
            if improved {
                state.best_val_ssim = s;
                state.stale_validations = 0;
            } else {
                state.stale_validations += 1;
            }
            summary.ssim_trace.push((state.step, s));
            if improved {
                summary.best = state.clone();
                summary.best_step = state.step;
            }
            if let Some((losses, ssim_csv, dir)) = &mut files {
                writeln!(ssim_csv, "{},{s:?},{:?}", state.step, state.best_val_ssim).map_err(|e| io_err(dir, "ssim.csv", e))?;
                losses.flush().map_err(|e| io_err(dir, "losses.csv", e))?;
                ssim_csv.flush().map_err(|e| io_err(dir, "ssim.csv", e))?;
                if improved {
                    checkpoint(model, state, dir.join("checkpoints/best.mpgc"))?;
                }
                checkpoint(model, state, dir.join("checkpoints/last.mpgc"))?;
            }
            observer(Event::Validation {
                step: state.step,
                ssim: s,
                improved,
            });
            if state.stale_validations >= cfg.patience {
                summary.stopped_early = true;
                break;
            }
        }
    }
    if let Some((mut losses, mut ssim_csv, dir)) = files {
        losses.flush().map_err(|e| io_err(&dir, "losses.csv", e))?;
        ssim_csv.flush().map_err(|e| io_err(&dir, "ssim.csv", e))?;
        checkpoint(model, state, dir.join("checkpoints/last.mpgc"))?;
    }
    if summary.ssim_trace.is_empty() {
        summary.best = state.clone();
        summary.best_step = state.step;
    }
    Ok(summary)
}

// ----- classifier-only training ---------------------------------------------

/// Schedule for training a classifier on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTraining {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            adam_betas: (0.9, 0.999),
            seed: 0,
        }
    }
}

/// Trains `classifier` on `(volumes, labels)` with batches drawn with
/// replacement; deterministic given the schedule's seed.
pub fn train_classifier(
    classifier: &Classifier,
    volumes: &[&Volume],
    labels: &[ClassLabel],
    schedule: &ClassifierTraining,
) -> Result<NetState> {
    if volumes.is_empty() || volumes.len() != labels.len() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, &[40]));
    let mut state = classifier.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, &[41])));
    let mut opt = Adam::new(&state.params, schedule.lr, schedule.adam_betas);
    for _ in 0..schedule.steps {
        let idx: Vec<usize> = (0..schedule.batch_size).map(|_| rng.gen_range(0..volumes.len())).collect();
        let x = stack_volumes(idx.iter().map(|&i| volumes[i]))?;
        let y: Vec<ClassLabel> = idx.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new();
        let bound = state.params.bind(&mut g, true);
        let xv = g.constant(x);
        let mut fwd = Forward::new(Mode::Train, &state);
        let logits = classifier.forward(&mut g, &bound, &mut fwd, xv)?;
        let loss = cls_loss_graph(&mut g, logits, &y);
        let mut grads = g.backward(loss);
        let grads = collect_grads(&state.params, bound.vars(), &mut grads)?;
        let stats = fwd.into_stats();
        opt.step(&mut state.params, &grads);
        update_running_stats(&mut state.buffers, &stats);
    }
    Ok(state)
}
