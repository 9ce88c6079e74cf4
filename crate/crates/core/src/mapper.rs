//! The conditional hair mapper.
//!
//! Three sub-mappers predict the latent change for the coarse, medium and
//! fine parts of the code. The hairstyle condition drives the coarse and
//! medium sub-mappers, the hair-color condition drives the fine one. Each
//! sub-mapper is five blocks of `fc -> modulation -> leaky relu`, where the
//! modulation standardizes the fc output and applies a condition-dependent
//! affine transform `(1 + gamma(e)) * norm(x) + beta(e)`. An absent
//! condition turns every modulation in its sub-mapper into the identity.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::{Condition, ConditionPair};
use crate::embedding::Embedding;
use crate::error::{shape_err, Error, Result};
use crate::latent::{assemble_latent, split_latent, LatentCode, LatentDelta, LatentPartition};
use crate::nn::{leaky_relu, leaky_relu_backward, standardize, standardize_backward, Linear, Standardized};
use crate::rng::component_rng;

pub const BLOCKS_PER_SUB_MAPPER: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    /// Hidden width of the gamma/beta networks; the block width when absent.
    pub hidden_dim: Option<usize>,
    pub leaky_slope: f64,
    /// Added to the standard deviation in every normalization.
    pub eps: f64,
    /// One set of five blocks per sub-mapper, applied to each of its layers.
    /// When false every layer gets its own blocks.
    pub shared_layers: bool,
    /// Emit a zero delta from sub-mappers whose condition is absent instead of
    /// running them with identity modulation.
    pub zero_delta_when_unconditioned: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            hidden_dim: None,
            leaky_slope: 0.2,
            eps: 1e-5,
            shared_layers: true,
            zero_delta_when_unconditioned: false,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == Some(0) {
            return Err(Error::Config("mapper hidden_dim must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("mapper eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Scalars shared by every block of a mapper.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockOptions {
    pub eps: f64,
    pub leaky_slope: f64,
}

/// `fc2(leaky_relu(layernorm(fc1(e))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ConditionNet {
    fn zeros(embed_dim: usize, hidden: usize, width: usize) -> Self {
        Self {
            fc1: Linear::zeros(embed_dim, hidden),
            fc2: Linear::zeros(hidden, width),
        }
    }

    fn forward(&self, e: &[f64], opts: BlockOptions) -> (Vec<f64>, NetTrace) {
        let h1 = self.fc1.forward(e);
        let ln = standardize(&h1, opts.eps);
        let a1 = leaky_relu(&ln.output, opts.leaky_slope);
        let out = self.fc2.forward(&a1);
        (out, NetTrace { h1, ln, a1 })
    }

    fn backward(
        &self,
        e: &[f64],
        trace: &NetTrace,
        grad_out: &[f64],
        grad: &mut ConditionNet,
        opts: BlockOptions,
    ) {
        let g_a1 = self.fc2.backward(&trace.a1, grad_out, &mut grad.fc2);
        let g_ln = leaky_relu_backward(&trace.ln.output, &g_a1, opts.leaky_slope);
        let g_h1 = standardize_backward(&trace.h1, &trace.ln, &g_ln);
        self.fc1.backward(e, &g_h1, &mut grad.fc1);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams {
    pub gamma: ConditionNet,
    pub beta: ConditionNet,
}

impl ModulationParams {
    pub fn width(&self) -> usize {
        self.gamma.fc2.out_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.gamma.fc1.in_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub fc: Linear,
    pub modulation: ModulationParams,
}

impl BlockParams {
    fn zeros(width: usize, embed_dim: usize, hidden: usize) -> Self {
        Self {
            fc: Linear::zeros(width, width),
            modulation: ModulationParams {
                gamma: ConditionNet::zeros(embed_dim, hidden, width),
                beta: ConditionNet::zeros(embed_dim, hidden, width),
            },
        }
    }

    /// fan-in uniform everywhere except the gamma output layer, which starts
    /// at zero so modulation begins as plain standardization plus beta.
    fn init(width: usize, embed_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc: Linear::fan_in(width, width, rng),
            modulation: ModulationParams {
                gamma: ConditionNet {
                    fc1: Linear::fan_in(embed_dim, hidden, rng),
                    fc2: Linear::zeros(hidden, width),
                },
                beta: ConditionNet {
                    fc1: Linear::fan_in(embed_dim, hidden, rng),
                    fc2: Linear::fan_in(hidden, width, rng),
                },
            },
        }
    }

    fn linears(&self) -> [(&'static str, &Linear); 5] {
        [
            ("fc", &self.fc),
            ("gamma.fc1", &self.modulation.gamma.fc1),
            ("gamma.fc2", &self.modulation.gamma.fc2),
            ("beta.fc1", &self.modulation.beta.fc1),
            ("beta.fc2", &self.modulation.beta.fc2),
        ]
    }

    fn linears_mut(&mut self) -> [(&'static str, &mut Linear); 5] {
        let ModulationParams { gamma, beta } = &mut self.modulation;
        [
            ("fc", &mut self.fc),
            ("gamma.fc1", &mut gamma.fc1),
            ("gamma.fc2", &mut gamma.fc2),
            ("beta.fc1", &mut beta.fc1),
            ("beta.fc2", &mut beta.fc2),
        ]
    }
}

/// Five blocks per parameter set; one set when layers share parameters,
/// otherwise one set per layer of the part.
#[derive(Clone, Debug, PartialEq)]
pub struct SubMapperParams {
    pub sets: Vec<Vec<BlockParams>>,
}

impl SubMapperParams {
    fn blocks_for(&self, layer: usize) -> &[BlockParams] {
        if self.sets.len() == 1 {
            &self.sets[0]
        } else {
            &self.sets[layer]
        }
    }

    fn blocks_for_mut(&mut self, layer: usize) -> &mut [BlockParams] {
        if self.sets.len() == 1 {
            &mut self.sets[0]
        } else {
            &mut self.sets[layer]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapperDims {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// All trainable state of the hair mapper.
#[derive(Clone, Debug, PartialEq)]
pub struct HairMapperParams {
    pub dims: MapperDims,
    pub partition: LatentPartition,
    pub options: BlockOptions,
    pub zero_delta_when_unconditioned: bool,
    pub coarse: SubMapperParams,
    pub medium: SubMapperParams,
    pub fine: SubMapperParams,
    /// Optimizer steps applied so far; zero means untrained.
    pub iterations_trained: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Coarse,
    Medium,
    Fine,
}

const PARTS: [Part; 3] = [Part::Coarse, Part::Medium, Part::Fine];

impl Part {
    fn name(self) -> &'static str {
        match self {
            Part::Coarse => "coarse",
            Part::Medium => "medium",
            Part::Fine => "fine",
        }
    }
}

impl HairMapperParams {
    fn build(
        latent_dim: usize,
        embed_dim: usize,
        partition: LatentPartition,
        config: &MapperConfig,
        mut make: impl FnMut(usize, usize, usize) -> BlockParams,
    ) -> Self {
        let hidden = config.hidden_dim.unwrap_or(latent_dim);
        let mut sub = |layers: usize| SubMapperParams {
            sets: (0..if config.shared_layers { 1 } else { layers })
                .map(|_| {
                    (0..BLOCKS_PER_SUB_MAPPER)
                        .map(|_| make(latent_dim, embed_dim, hidden))
                        .collect()
                })
                .collect(),
        };
        let coarse = sub(partition.n_coarse);
        let medium = sub(partition.n_medium);
        let fine = sub(partition.n_fine);
        Self {
            dims: MapperDims {
                latent_dim,
                embed_dim,
                hidden_dim: hidden,
            },
            partition,
            options: BlockOptions {
                eps: config.eps,
                leaky_slope: config.leaky_slope,
            },
            zero_delta_when_unconditioned: config.zero_delta_when_unconditioned,
            coarse,
            medium,
            fine,
            iterations_trained: 0,
        }
    }

    /// Seeded initialization.
    pub fn init(
        latent_dim: usize,
        embed_dim: usize,
        partition: LatentPartition,
        config: &MapperConfig,
        seed: u64,
    ) -> Self {
        let mut rng = component_rng(seed, "mapper.init");
        Self::build(latent_dim, embed_dim, partition, config, |w, e, h| {
            BlockParams::init(w, e, h, &mut rng)
        })
    }

    /// Every weight and bias zero.
    pub fn zeros(
        latent_dim: usize,
        embed_dim: usize,
        partition: LatentPartition,
        config: &MapperConfig,
    ) -> Self {
        Self::build(latent_dim, embed_dim, partition, config, BlockParams::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        out
    }

    fn sub(&self, part: Part) -> &SubMapperParams {
        match part {
            Part::Coarse => &self.coarse,
            Part::Medium => &self.medium,
            Part::Fine => &self.fine,
        }
    }

    fn sub_mut(&mut self, part: Part) -> &mut SubMapperParams {
        match part {
            Part::Coarse => &mut self.coarse,
            Part::Medium => &mut self.medium,
            Part::Fine => &mut self.fine,
        }
    }

    /// Visits every parameter array in a fixed order under a stable name,
    /// e.g. `fine.s0.b4.gamma.fc2.weight`.
    pub fn for_each_tensor(&self, mut f: impl FnMut(String, &[f64])) {
        for part in PARTS {
            for (s, set) in self.sub(part).sets.iter().enumerate() {
                for (b, block) in set.iter().enumerate() {
                    for (name, lin) in block.linears() {
                        let prefix = format!("{}.s{s}.b{b}.{name}", part.name());
                        f(format!("{prefix}.weight"), &lin.weight);
                        f(format!("{prefix}.bias"), &lin.bias);
                    }
                }
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut [f64])) {
        for part in PARTS {
            for (s, set) in self.sub_mut(part).sets.iter_mut().enumerate() {
                for (b, block) in set.iter_mut().enumerate() {
                    for (name, lin) in block.linears_mut() {
                        let prefix = format!("{}.s{s}.b{b}.{name}", part.name());
                        f(format!("{prefix}.weight"), &mut lin.weight);
                        f(format!("{prefix}.bias"), &mut lin.bias);
                    }
                }
            }
        }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.for_each_tensor(|name, t| out.push((name, t.to_vec())));
        out
    }

    /// Total number of scalar parameters.
    pub fn shared_layers(&self) -> bool {
        [&self.coarse, &self.medium, &self.fine]
            .iter()
            .all(|s| s.sets.len() == 1)
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.for_each_tensor(|_, t| out.extend_from_slice(t));
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(shape_err(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        self.for_each_tensor_mut(|_, t| {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }

    fn check_latent(&self, w: &LatentCode) -> Result<()> {
        if w.dim() != self.dims.latent_dim || w.layers() != self.partition.total() {
            return Err(shape_err(format!(
                "mapper expects {}x{} latents, got {:?}",
                self.partition.total(),
                self.dims.latent_dim,
                w.shape()
            )));
        }
        Ok(())
    }

    fn check_condition(&self, e: &Condition) -> Result<()> {
        if let Some(emb) = e.embedding() {
            if emb.dim() != self.dims.embed_dim {
                return Err(shape_err(format!(
                    "condition embedding has {} dims, mapper expects {}",
                    emb.dim(),
                    self.dims.embed_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct NetTrace {
    h1: Vec<f64>,
    ln: Standardized,
    a1: Vec<f64>,
}

#[derive(Clone, Debug)]
struct ModTrace {
    norm: Standardized,
    gamma: Vec<f64>,
    gamma_trace: NetTrace,
    beta_trace: NetTrace,
}

#[derive(Clone, Debug)]
struct BlockTrace {
    input: Vec<f64>,
    fc_out: Vec<f64>,
    modulation: Option<ModTrace>,
    /// Input of the activation.
    mod_out: Vec<f64>,
}

fn modulate_traced(
    x: &[f64],
    e: Option<&Embedding>,
    m: &ModulationParams,
    opts: BlockOptions,
) -> (Vec<f64>, Option<ModTrace>) {
    let Some(e) = e else {
        return (x.to_vec(), None);
    };
    let norm = standardize(x, opts.eps);
    let (gamma, gamma_trace) = m.gamma.forward(e.as_slice(), opts);
    let (beta, beta_trace) = m.beta.forward(e.as_slice(), opts);
    let out = norm
        .output
        .iter()
        .zip(&gamma)
        .zip(&beta)
        .map(|((n, g), b)| (1.0 + g) * n + b)
        .collect();
    (
        out,
        Some(ModTrace {
            norm,
            gamma,
            gamma_trace,
            beta_trace,
        }),
    )
}

/// Conditional modulation of one feature vector.
///
/// Returns `x` unchanged for an absent condition; otherwise
/// `(1 + gamma(e)) * (x - mean) / (std + eps) + beta(e)` with the mean and
/// population standard deviation taken over the feature vector.
pub fn modulate(
    x: &[f64],
    e: &Condition,
    m: &ModulationParams,
    opts: BlockOptions,
) -> Result<Vec<f64>> {
    if x.len() != m.width() {
        return Err(shape_err(format!(
            "feature width {} does not match modulation width {}",
            x.len(),
            m.width()
        )));
    }
    if let Some(emb) = e.embedding() {
        if emb.dim() != m.embed_dim() {
            return Err(shape_err("condition embedding width does not match modulation"));
        }
    }
    Ok(modulate_traced(x, e.embedding(), m, opts).0)
}

fn blocks_forward(
    x: &[f64],
    e: Option<&Embedding>,
    blocks: &[BlockParams],
    opts: BlockOptions,
) -> (Vec<f64>, Vec<BlockTrace>) {
    let mut traces = Vec::with_capacity(blocks.len());
    let mut cur = x.to_vec();
    for block in blocks {
        let fc_out = block.fc.forward(&cur);
        let (mod_out, modulation) = modulate_traced(&fc_out, e, &block.modulation, opts);
        let next = leaky_relu(&mod_out, opts.leaky_slope);
        traces.push(BlockTrace {
            input: std::mem::replace(&mut cur, next),
            fc_out,
            modulation,
            mod_out,
        });
    }
    (cur, traces)
}

fn blocks_backward(
    e: Option<&Embedding>,
    blocks: &[BlockParams],
    traces: &[BlockTrace],
    grad_out: &[f64],
    grads: &mut [BlockParams],
    opts: BlockOptions,
) {
    let mut g = grad_out.to_vec();
    for ((block, trace), grad) in blocks.iter().zip(traces).zip(grads.iter_mut()).rev() {
        let g_mod = leaky_relu_backward(&trace.mod_out, &g, opts.leaky_slope);
        let g_fc = match (&trace.modulation, e) {
            (Some(mt), Some(e)) => {
                let g_norm: Vec<f64> = g_mod.iter().zip(&mt.gamma).map(|(g, gm)| g * (1.0 + gm)).collect();
                let g_gamma: Vec<f64> = g_mod.iter().zip(&mt.norm.output).map(|(g, n)| g * n).collect();
                let m = &block.modulation;
                m.gamma.backward(e.as_slice(), &mt.gamma_trace, &g_gamma, &mut grad.modulation.gamma, opts);
                m.beta.backward(e.as_slice(), &mt.beta_trace, &g_mod, &mut grad.modulation.beta, opts);
                standardize_backward(&trace.fc_out, &mt.norm, &g_norm)
            }
            _ => g_mod,
        };
        g = block.fc.backward(&trace.input, &g_fc, &mut grad.fc);
    }
}

/// Runs one sub-mapper over every layer vector of its part.
pub fn sub_mapper_forward(
    part: &[Vec<f64>],
    e: &Condition,
    blocks: &[BlockParams],
    opts: BlockOptions,
) -> Result<Vec<Vec<f64>>> {
    if blocks.len() != BLOCKS_PER_SUB_MAPPER {
        return Err(shape_err(format!(
            "sub-mapper needs {BLOCKS_PER_SUB_MAPPER} blocks, got {}",
            blocks.len()
        )));
    }
    let width = blocks[0].fc.in_dim;
    if let Some(layer) = part.iter().find(|l| l.len() != width) {
        return Err(shape_err(format!(
            "layer width {} does not match sub-mapper width {width}",
            layer.len()
        )));
    }
    Ok(part
        .iter()
        .map(|layer| blocks_forward(layer, e.embedding(), blocks, opts).0)
        .collect())
}

/// Everything the backward pass needs from one mapper forward pass.
#[derive(Clone, Debug)]
pub struct MapperTrace {
    parts: Vec<PartTrace>,
}

#[derive(Clone, Debug)]
struct PartTrace {
    part: Part,
    embedding: Option<Embedding>,
    /// Per-layer block traces; empty when the part emitted a zero delta.
    layers: Vec<Vec<BlockTrace>>,
    first_layer: usize,
}

impl HairMapperParams {
    fn part_condition<'a>(&self, part: Part, pair: &'a ConditionPair) -> &'a Condition {
        match part {
            Part::Coarse | Part::Medium => &pair.style,
            Part::Fine => &pair.color,
        }
    }

    /// Forward pass that keeps the intermediate values for [`Self::backward`].
    pub fn forward_traced(
        &self,
        w: &LatentCode,
        pair: &ConditionPair,
    ) -> Result<(LatentDelta, MapperTrace)> {
        self.check_latent(w)?;
        self.check_condition(&pair.style)?;
        self.check_condition(&pair.color)?;
        let parts = split_latent(w, &self.partition)?;
        let inputs = [&parts.coarse, &parts.medium, &parts.fine];
        let ranges = self.partition.ranges();
        let mut outputs = Vec::with_capacity(3);
        let mut traces = Vec::with_capacity(3);
        for ((part, layers), range) in PARTS.into_iter().zip(inputs).zip(ranges) {
            let cond = self.part_condition(part, pair);
            let emb = cond.embedding();
            let sub = self.sub(part);
            if emb.is_none() && self.zero_delta_when_unconditioned {
                outputs.push(vec![vec![0.0; self.dims.latent_dim]; layers.len()]);
                traces.push(PartTrace {
                    part,
                    embedding: None,
                    layers: Vec::new(),
                    first_layer: range.start,
                });
                continue;
            }
            let mut out = Vec::with_capacity(layers.len());
            let mut layer_traces = Vec::with_capacity(layers.len());
            for (i, layer) in layers.iter().enumerate() {
                let (y, t) = blocks_forward(layer, emb, sub.blocks_for(i), self.options);
                out.push(y);
                layer_traces.push(t);
            }
            outputs.push(out);
            traces.push(PartTrace {
                part,
                embedding: emb.cloned(),
                layers: layer_traces,
                first_layer: range.start,
            });
        }
        let mut outputs = outputs.into_iter();
        let delta = assemble_latent(
            outputs.next().unwrap(),
            outputs.next().unwrap(),
            outputs.next().unwrap(),
            &self.partition,
        )?;
        let delta = LatentDelta::new(delta.layers(), delta.dim(), delta.into_vec())?;
        Ok((delta, MapperTrace { parts: traces }))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// gradient with respect to the predicted delta.
    pub fn backward(&self, trace: &MapperTrace, grad_delta: &[f64]) -> Result<HairMapperParams> {
        let d = self.dims.latent_dim;
        if grad_delta.len() != self.partition.total() * d {
            return Err(shape_err("delta gradient has the wrong length"));
        }
        let mut grads = self.zeros_like();
        for pt in &trace.parts {
            let sub = self.sub(pt.part);
            for (i, layer_trace) in pt.layers.iter().enumerate() {
                let row = pt.first_layer + i;
                let g = &grad_delta[row * d..(row + 1) * d];
                blocks_backward(
                    pt.embedding.as_ref(),
                    sub.blocks_for(i),
                    layer_trace,
                    g,
                    grads.sub_mut(pt.part).blocks_for_mut(i),
                    self.options,
                );
            }
        }
        Ok(grads)
    }
}

/// `M(w, e_s, e_c) = (M_c(w_c, e_s), M_m(w_m, e_s), M_f(w_f, e_c))`.
pub fn mapper_forward(
    w: &LatentCode,
    pair: &ConditionPair,
    params: &HairMapperParams,
) -> Result<LatentDelta> {
    Ok(params.forward_traced(w, pair)?.0)
}

/// `w' = w + delta`.
pub fn apply_edit(w: &LatentCode, delta: &LatentDelta) -> Result<LatentCode> {
    if w.shape() != delta.shape() {
        return Err(shape_err(format!(
            "delta {:?} does not match latent {:?}",
            delta.shape(),
            w.shape()
        )));
    }
    let data = w
        .as_slice()
        .iter()
        .zip(delta.as_slice())
        .map(|(a, b)| a + b)
        .collect();
    LatentCode::new(w.layers(), w.dim(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::ToyTextEncoder;
    use crate::backends::TextEncoder;
    use crate::conditions::condition_from_text;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    const D: usize = 8;
    const DE: usize = 6;

    fn opts() -> BlockOptions {
        BlockOptions {
            eps: 1e-5,
            leaky_slope: 0.2,
        }
    }

    fn params(seed: u64) -> HairMapperParams {
        HairMapperParams::init(D, DE, LatentPartition::new(1, 1, 2).unwrap(), &MapperConfig::default(), seed)
    }

    fn text(t: &str) -> Condition {
        condition_from_text(t, &ToyTextEncoder::new(3, DE)).unwrap()
    }

    fn latent(seed: u64, layers: usize) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..layers * D).map(|_| StandardNormal.sample(&mut rng)).collect();
        LatentCode::new(layers, D, data).unwrap()
    }

    #[test]
    fn absent_condition_modulation_is_identity() {
        let p = params(1);
        let m = &p.coarse.sets[0][0].modulation;
        let x = vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4, 0.0, 5.0];
        assert_eq!(modulate(&x, &Condition::None, m, opts()).unwrap(), x);
    }

    #[test]
    fn constant_input_modulates_to_beta() {
        let p = params(2);
        let m = &p.coarse.sets[0][1].modulation;
        let e = text("afro hairstyle");
        let out = modulate(&[1.5; D], &e, m, opts()).unwrap();
        let (beta, _) = m.beta.forward(e.embedding().unwrap().as_slice(), opts());
        assert_eq!(out, beta);
    }

    #[test]
    fn zero_condition_nets_leave_standardized_input() {
        let mut m = params(3).coarse.sets[0][0].modulation.clone();
        m.gamma = ConditionNet::zeros(DE, D, D);
        m.beta = ConditionNet::zeros(DE, D, D);
        let x = vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4, 0.0, 5.0];
        let out = modulate(&x, &text("red hair"), &m, opts()).unwrap();
        // Brute-force recomputation of mean and population std.
        let mut mean = 0.0;
        for v in &x {
            mean += v;
        }
        mean /= x.len() as f64;
        let mut var = 0.0;
        for v in &x {
            var += (v - mean) * (v - mean);
        }
        let std = (var / x.len() as f64).sqrt();
        for (o, v) in out.iter().zip(&x) {
            assert!((o - (v - mean) / (std + 1e-5)).abs() < 1e-12);
        }
        let om = out.iter().sum::<f64>() / D as f64;
        let os = (out.iter().map(|v| (v - om) * (v - om)).sum::<f64>() / D as f64).sqrt();
        assert!(om.abs() < 1e-12);
        assert!((os - 1.0).abs() < 1e-5);
    }

    #[test]
    fn modulation_checks_width() {
        let p = params(1);
        let m = &p.coarse.sets[0][0].modulation;
        assert!(matches!(modulate(&[0.0; 3], &Condition::None, m, opts()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_parameters_give_zero_delta() {
        let p = HairMapperParams::zeros(D, DE, LatentPartition::new(1, 1, 2).unwrap(), &MapperConfig::default());
        let w = latent(4, 4);
        for pair in [
            ConditionPair::unconditioned(),
            ConditionPair::new(text("afro hairstyle"), text("red hair")),
        ] {
            let delta = mapper_forward(&w, &pair, &p).unwrap();
            assert!(delta.as_slice().iter().all(|&v| v == 0.0));
            assert_eq!(apply_edit(&w, &delta).unwrap(), w);
        }
        let out = sub_mapper_forward(&w.to_layers(), &text("x"), &p.fine.sets[0], opts()).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn sub_mapper_is_deterministic_and_checks_shapes() {
        let p = params(5);
        let part = latent(1, 3).to_layers();
        let e = text("mohawk hairstyle");
        let a = sub_mapper_forward(&part, &e, &p.coarse.sets[0], opts()).unwrap();
        assert_eq!(a, sub_mapper_forward(&part, &e, &p.coarse.sets[0], opts()).unwrap());
        assert!(sub_mapper_forward(&part, &e, &p.coarse.sets[0][..4], opts()).is_err());
        assert!(sub_mapper_forward(&[vec![0.0; 3]], &e, &p.coarse.sets[0], opts()).is_err());
    }

    #[test]
    fn sub_mapper_gradient_matches_central_difference() {
        let p = HairMapperParams::init(D, DE, LatentPartition::new(1, 1, 1).unwrap(), &MapperConfig::default(), 6);
        let w = latent(2, 3);
        let pair = ConditionPair::new(text("curly hairstyle"), text("pink hair"));
        let (_, trace) = p.forward_traced(&w, &pair).unwrap();
        let grads = p.backward(&trace, &vec![1.0; 3 * D]).unwrap().flatten();
        let loss = |params: &HairMapperParams| mapper_forward(&w, &pair, params).unwrap().as_slice().iter().sum::<f64>();
        let base = p.flatten();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let i = rand::Rng::random_range(&mut rng, 0..base.len());
            let mut q = p.clone();
            let mut v = base.clone();
            v[i] += h;
            q.set_flat(&v).unwrap();
            let up = loss(&q);
            v[i] -= 2.0 * h;
            q.set_flat(&v).unwrap();
            let down = loss(&q);
            let fd = (up - down) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(grads[i].abs()).max(1e-6);
            assert!((fd - grads[i]).abs() <= tol, "param {i}: fd {fd} analytic {}", grads[i]);
        }
    }

    #[test]
    fn wiring_routes_style_to_coarse_medium_and_color_to_fine() {
        let p = params(8);
        let w = latent(3, 4);
        let base = mapper_forward(&w, &ConditionPair::new(text("afro hairstyle"), text("red hair")), &p).unwrap();
        let color_changed = mapper_forward(&w, &ConditionPair::new(text("afro hairstyle"), text("green hair")), &p).unwrap();
        let style_changed = mapper_forward(&w, &ConditionPair::new(text("bobcut hairstyle"), text("red hair")), &p).unwrap();
        assert_eq!(base.as_slice()[..2 * D], color_changed.as_slice()[..2 * D]);
        assert_ne!(base.as_slice()[2 * D..], color_changed.as_slice()[2 * D..]);
        assert_eq!(base.as_slice()[2 * D..], style_changed.as_slice()[2 * D..]);
        assert_ne!(base.as_slice()[..2 * D], style_changed.as_slice()[..2 * D]);
    }

    #[test]
    fn zero_delta_flag_silences_unconditioned_parts() {
        let config = MapperConfig {
            zero_delta_when_unconditioned: true,
            ..MapperConfig::default()
        };
        let p = HairMapperParams::init(D, DE, LatentPartition::new(1, 1, 2).unwrap(), &config, 9);
        let w = latent(5, 4);
        let delta = mapper_forward(&w, &ConditionPair::new(text("afro hairstyle"), Condition::None), &p).unwrap();
        assert!(delta.as_slice()[2 * D..].iter().all(|&v| v == 0.0));
        assert!(delta.as_slice()[..2 * D].iter().any(|&v| v != 0.0));
        let literal = params(9);
        let delta = mapper_forward(&w, &ConditionPair::new(text("afro hairstyle"), Condition::None), &literal).unwrap();
        assert!(delta.as_slice()[2 * D..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn per_layer_parameters() {
        let config = MapperConfig {
            shared_layers: false,
            ..MapperConfig::default()
        };
        let p = HairMapperParams::init(D, DE, LatentPartition::new(1, 1, 2).unwrap(), &config, 9);
        assert_eq!(p.fine.sets.len(), 2);
        let shared = params(9);
        assert_eq!(p.num_parameters(), shared.num_parameters() / 3 * 4);
        let w = latent(6, 4);
        let delta = mapper_forward(&w, &ConditionPair::new(text("afro hairstyle"), text("red hair")), &p).unwrap();
        assert_eq!(delta.shape(), (4, D));
    }

    #[test]
    fn parameter_count_depends_only_on_dims() {
        let a = params(1);
        let b = params(2);
        assert_eq!(a.num_parameters(), b.num_parameters());
        // Per block: fc D*D+D; each condition net DE*H+H + H*D+D with H = D.
        let per_block = D * D + D + 2 * (DE * D + D + D * D + D);
        assert_eq!(a.num_parameters(), 3 * BLOCKS_PER_SUB_MAPPER * per_block);
        let enc = ToyTextEncoder::new(1, DE);
        assert_eq!(enc.embed_dim(), DE);
    }

    #[test]
    fn gamma_output_starts_at_zero() {
        let p = params(4);
        for set in [&p.coarse, &p.medium, &p.fine] {
            for block in &set.sets[0] {
                assert!(block.modulation.gamma.fc2.weight.iter().all(|&v| v == 0.0));
                assert!(block.modulation.beta.fc2.weight.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn apply_edit_examples() {
        let w = latent(1, 3);
        let zero = LatentDelta::zeros(3, D);
        assert_eq!(apply_edit(&w, &zero).unwrap(), w);
        let delta = LatentDelta::new(3, D, w.as_slice().to_vec()).unwrap();
        let from_zero = apply_edit(&LatentCode::zeros(3, D).unwrap(), &delta).unwrap();
        assert_eq!(from_zero.as_slice(), delta.as_slice());
        assert!(apply_edit(&w, &LatentDelta::zeros(4, D)).is_err());
    }

    #[test]
    fn mapper_rejects_mismatched_latents() {
        let p = params(1);
        assert!(matches!(
            mapper_forward(&latent(1, 5), &ConditionPair::unconditioned(), &p),
            Err(Error::Shape(_))
        ));
        let wrong = condition_from_text("afro", &ToyTextEncoder::new(1, DE + 1)).unwrap();
        assert!(mapper_forward(&latent(1, 4), &ConditionPair::new(wrong, Condition::None), &p).is_err());
    }
}
