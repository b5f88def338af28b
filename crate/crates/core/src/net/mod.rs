//! The material attribute-category network: a VGG-style trunk whose pooling
//! stages each feed an auxiliary fully-connected attribute head, a
//! combination head merging the per-stage attributes, and a classifier.

mod checkpoint;
mod gradcheck;
mod loss;
mod maps;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use loss::{category_mean_l1, compute_loss, distribution_term, LossBreakdown};
pub use maps::{predict_map, window_origins, MapTarget, ProbabilityMaps};

use crate::error::{Error, Result};
use crate::percept::{Bandwidth, BetaParams, DensityGrid};
use crate::rng;
use crate::synth::PatchSample;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

/// How the distribution-matching term pools final attribute values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdeMode {
    /// One density over all N·M values of the batch.
    #[default]
    Pooled,
    /// One density per attribute column, averaged.
    PerAttribute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub patch_size: usize,
    /// Output channels of each conv block; every block ends in a 2×2 max-pool.
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
    pub categories: usize,
    pub attributes: usize,
    pub hidden: usize,
    pub aux_heads: bool,
    pub lambda_attr: f64,
    pub lambda_dist: f64,
    pub beta: BetaParams,
    pub grid: DensityGrid,
    pub bandwidth: Bandwidth,
    pub kde_mode: KdeMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            patch_size: 32,
            channels: vec![16, 32, 64, 64],
            convs_per_block: 2,
            categories: 8,
            attributes: 12,
            hidden: 128,
            aux_heads: true,
            lambda_attr: 1.0,
            lambda_dist: 0.1,
            beta: BetaParams::default(),
            grid: DensityGrid::default(),
            bandwidth: Bandwidth::Auto,
            kde_mode: KdeMode::Pooled,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.channels.len();
        if stages == 0 || self.convs_per_block == 0 {
            return Err(Error::Config("trunk needs at least one block with one conv".into()));
        }
        if self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let div = 1usize << stages;
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "patch size {} not divisible by 2^{stages} = {div}",
                self.patch_size
            )));
        }
        if self.categories < 2 {
            return Err(Error::Config("need at least 2 categories".into()));
        }
        if self.attributes == 0 {
            return Err(Error::Config("need at least 1 attribute".into()));
        }
        if !(self.lambda_attr >= 0.0 && self.lambda_dist >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.beta.validate()
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Flattened size of the pooled output of each stage.
    pub fn tap_sizes(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = self.patch_size >> (i + 1);
                c * s * s
            })
            .collect()
    }
}

/// Aux heads and the combine head read their input scaled by 1/√(input size),
/// so a fixed learning rate moves every head's outputs at the same pace
/// regardless of its width.
/// Weights start in ±`HEAD_BOUND` with a 0.5 bias, inside the clamp's linear range.
const HEAD_BOUND: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacNetwork {
    cfg: NetworkConfig,
    params: ParamStore,
    trunk: Vec<Vec<Dense>>,
    aux: Vec<Dense>,
    combine: Option<Dense>,
    fc1: Dense,
    fc2: Dense,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    /// Per pool stage, clamped attribute predictions [N, M].
    pub layer_attributes: Vec<Tensor>,
    /// Combined, clamped attribute prediction [N, M]; `None` without aux heads.
    pub attributes: Option<Tensor>,
    pub logits: Tensor,
    /// Row-wise softmax of `logits` [N, K].
    pub probabilities: Tensor,
}

/// A recorded forward pass, kept for computing losses and gradients.
pub struct Trace {
    pub graph: Graph,
    pub layer_attributes: Vec<Var>,
    pub attributes: Option<Var>,
    pub logits: Var,
}

impl Trace {
    pub fn outputs(&self) -> Result<ForwardOutputs> {
        let g = &self.graph;
        let logits = g.value(self.logits).clone();
        Ok(ForwardOutputs {
            layer_attributes: self.layer_attributes.iter().map(|&v| g.value(v).clone()).collect(),
            attributes: self.attributes.map(|v| g.value(v).clone()),
            probabilities: crate::tensor::softmax_rows(&logits)?,
            logits,
        })
    }
}

/// Which parts of the network a forward pass should build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ForwardOptions {
    /// Zero the output of one pool stage's head before combination.
    pub drop_stage: Option<usize>,
}

impl MacNetwork {
    /// Deterministic in `seed`. Every tensor draws from its own named stream,
    /// so trunk and classifier weights do not depend on whether aux heads exist.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let push_dense = |params: &mut ParamStore, name: &str, w: Tensor, out: usize| Dense {
            w: params.push(format!("{name}.weight"), w),
            b: params.push(format!("{name}.bias"), Tensor::zeros(&[out])),
        };

        let mut trunk = Vec::new();
        let mut in_c = 3;
        for (s, &out_c) in cfg.channels.iter().enumerate() {
            let mut block = Vec::new();
            for c in 0..cfg.convs_per_block {
                let name = format!("trunk.{s}.{c}");
                let mut r = rng::named_rng(seed, &name);
                let w = Tensor::he_uniform(&[out_c, in_c, 3, 3], in_c * 9, &mut r);
                block.push(push_dense(&mut params, &name, w, out_c));
                in_c = out_c;
            }
            trunk.push(block);
        }

        let m = cfg.attributes;
        let mut aux = Vec::new();
        let mut combine = None;
        if cfg.aux_heads {
            for (s, size) in cfg.tap_sizes().into_iter().enumerate() {
                let name = format!("aux.{s}");
                let mut r = rng::named_rng(seed, &name);
                let w = Tensor::uniform(&[m, size], HEAD_BOUND, &mut r);
                let head = push_dense(&mut params, &name, w, m);
                params.get_mut(head.b).value.data_mut().fill(0.5);
                aux.push(head);
            }
            // start as the per-attribute mean over stages (input is scaled down by √(L·M))
            let stages = cfg.stages();
            let mut w = Tensor::zeros(&[m, stages * m]);
            let mean = ((stages * m) as f64).sqrt() / stages as f64;
            for j in 0..m {
                for s in 0..stages {
                    w.data_mut()[j * stages * m + s * m + j] = mean;
                }
            }
            let head = push_dense(&mut params, "combine", w, m);
            // offsets spread the M outputs over [0.1, 0.9] instead of all sitting at 0.5
            let b = params.get_mut(head.b).value.data_mut();
            for (j, v) in b.iter_mut().enumerate() {
                *v = if m > 1 { 0.8 * j as f64 / (m - 1) as f64 - 0.4 } else { 0.0 };
            }
            combine = Some(head);
        }

        let flat = *cfg.tap_sizes().last().expect("at least one stage");
        let mut r = rng::named_rng(seed, "classifier.0");
        let w1 = Tensor::xavier_uniform(&[cfg.hidden, flat], flat, cfg.hidden, &mut r);
        let fc1 = push_dense(&mut params, "classifier.0", w1, cfg.hidden);
        let mut r = rng::named_rng(seed, "classifier.1");
        let w2 = Tensor::xavier_uniform(&[cfg.categories, cfg.hidden], cfg.hidden, cfg.categories, &mut r);
        let fc2 = push_dense(&mut params, "classifier.1", w2, cfg.categories);

        Ok(MacNetwork {
            cfg: cfg.clone(),
            params,
            trunk,
            aux,
            combine,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn replace_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::Data("parameter set does not match the network layout".into()));
        }
        for (id, (_, p)) in params.iter().enumerate() {
            if p.value.shape() != self.params.get(id).value.shape() {
                return Err(Error::shape("replace_params", self.params.get(id).value.shape(), p.value.shape()));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn num_aux_heads(&self) -> usize {
        self.aux.len()
    }

    /// Input width of each auxiliary head.
    pub fn aux_input_sizes(&self) -> Vec<usize> {
        self.aux.iter().map(|d| self.params.get(d.w).value.shape()[1]).collect()
    }

    /// Input width of the combination head, if present.
    pub fn combine_input_size(&self) -> Option<usize> {
        self.combine.map(|d| self.params.get(d.w).value.shape()[1])
    }

    /// Parameter ids of the auxiliary and combination heads.
    pub fn attribute_param_ids(&self) -> Vec<usize> {
        self.aux
            .iter()
            .chain(self.combine.iter())
            .flat_map(|d| [d.w, d.b])
            .collect()
    }

    /// Parameter ids of the trunk and classifier.
    pub fn classifier_param_ids(&self) -> Vec<usize> {
        let attr = self.attribute_param_ids();
        (0..self.params.len()).filter(|i| !attr.contains(i)).collect()
    }

    fn dense(&self, g: &mut Graph, d: Dense) -> (Var, Var) {
        (
            g.param(d.w, &self.params.get(d.w).value),
            g.param(d.b, &self.params.get(d.b).value),
        )
    }

    /// Stacks patches into an [N, 3, P, P] tensor, checking shapes.
    pub fn batch_tensor(&self, patches: &[&Tensor]) -> Result<Tensor> {
        if patches.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let p = self.cfg.patch_size;
        let want = [3, p, p];
        let mut data = Vec::with_capacity(patches.len() * 3 * p * p);
        for t in patches {
            if t.shape() != want {
                return Err(Error::shape("batch patch", t.shape(), &want));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[patches.len(), 3, p, p], data)
    }

    pub(crate) fn trace_with(&self, images: Tensor, opts: ForwardOptions) -> Result<Trace> {
        let mut g = Graph::new();
        let mut h = g.input(images);
        let mut taps = Vec::new();
        for block in &self.trunk {
            for &conv in block {
                let (w, b) = self.dense(&mut g, conv);
                h = g.conv2d(h, w, b, 1, 1)?;
                h = g.relu(h);
            }
            h = g.maxpool2x2(h)?;
            taps.push(h);
        }

        let mut layer_attributes = Vec::new();
        for (s, (&tap, &head)) in taps.iter().zip(&self.aux).enumerate() {
            let flat = g.flatten(tap)?;
            let flat = g.scale(flat, 1.0 / (g.shape(flat)[1] as f64).sqrt());
            let (w, b) = self.dense(&mut g, head);
            let z = g.linear(flat, w, b)?;
            let mut phi = g.clamp01(z);
            if opts.drop_stage == Some(s) {
                let zeros = g.input(Tensor::zeros(g.shape(phi)));
                phi = g.mul(phi, zeros)?;
            }
            layer_attributes.push(phi);
        }
        let attributes = match self.combine {
            Some(head) => {
                let cat = g.concat(&layer_attributes)?;
                let cat = g.scale(cat, 1.0 / (g.shape(cat)[1] as f64).sqrt());
                let (w, b) = self.dense(&mut g, head);
                let z = g.linear(cat, w, b)?;
                Some(g.clamp01(z))
            }
            None => None,
        };

        let last = *taps.last().expect("at least one stage");
        let flat = g.flatten(last)?;
        let (w, b) = self.dense(&mut g, self.fc1);
        let hidden = g.linear(flat, w, b)?;
        let hidden = g.relu(hidden);
        let (w, b) = self.dense(&mut g, self.fc2);
        let logits = g.linear(hidden, w, b)?;
        Ok(Trace {
            graph: g,
            layer_attributes,
            attributes,
            logits,
        })
    }

    /// Records a forward pass over `images` [N, 3, P, P].
    pub fn trace(&self, images: Tensor) -> Result<Trace> {
        self.trace_with(images, ForwardOptions { drop_stage: None })
    }

    pub fn forward(&self, batch: &[PatchSample]) -> Result<ForwardOutputs> {
        let patches: Vec<&Tensor> = batch.iter().map(|s| &s.patch).collect();
        self.forward_tensors(&patches)
    }

    pub fn forward_tensors(&self, patches: &[&Tensor]) -> Result<ForwardOutputs> {
        let images = self.batch_tensor(patches)?;
        self.trace(images)?.outputs()
    }

    /// Forward pass with pool stage `stage`'s head output replaced by zeros
    /// before the combination head.
    pub fn forward_without_stage(&self, patches: &[&Tensor], stage: usize) -> Result<ForwardOutputs> {
        if stage >= self.aux.len() {
            return Err(Error::Invalid(format!("no aux head for stage {stage}")));
        }
        let images = self.batch_tensor(patches)?;
        self.trace_with(images, ForwardOptions { drop_stage: Some(stage) })?.outputs()
    }
}
