//! Sequence encoder: two squeeze-and-excitation dilated residual blocks
//! joined by a 1x1 channel adapter, masked temporal pooling, an embedding
//! layer and a swappable linear classification head.
//!
//! Block wiring: `y = relu(x + se(conv(relu(conv(x)))))`. Every conv output
//! is re-masked so padded timesteps stay exactly zero, which makes
//! zero-padded batches embed identically to unpadded sequences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::diffcore::gradcheck::{
    finite_diff_check_sampled, normal_array, op_suite, GradCheckReport, KINK_MARGIN, RTOL, STEP,
};
use crate::diffcore::{ParamId, ParamSet, Tape, Var};
use crate::episodes::PaddedBatch;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, Rng};

pub const SUPPORTED_INPUT_WIDTHS: [usize; 6] = [2, 4, 8, 16, 32, 64];
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_in: usize,
    pub k_mid: usize,
    pub d_out: usize,
    pub filters: (usize, usize),
    pub dilations: (usize, usize),
    pub se_reduction: usize,
}

impl BackboneConfig {
    /// Standard configuration for an input width: the adapter width comes
    /// from {2,4,8 → 16; 16,32 → 64; 64 → 256} and the embedding is 512-d
    /// (1024-d for 64 input channels).
    pub fn for_input(d_in: usize) -> Result<Self> {
        let (k_mid, d_out) = match d_in {
            2 | 4 | 8 => (16, 512),
            16 | 32 => (64, 512),
            64 => (256, 1024),
            _ => {
                return Err(Error::invalid(format!(
                    "unsupported input width {d_in}; expected one of {SUPPORTED_INPUT_WIDTHS:?}"
                )))
            }
        };
        Ok(Self {
            d_in,
            k_mid,
            d_out,
            filters: (5, 3),
            dilations: (1, 2),
            se_reduction: 4,
        })
    }

    /// SE bottleneck width for `channels`, floored at 2 units.
    pub fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction.max(1)).max(2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeIds {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub conv1: ParamId,
    pub conv2: ParamId,
    pub se: SeIds,
}

/// Parameter ids of a backbone inside a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct BackboneIds {
    pub block1: BlockIds,
    pub adapter: ParamId,
    pub block2: BlockIds,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
}

fn lookup(params: &ParamSet, name: &str) -> Result<ParamId> {
    params
        .id(name)
        .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
}

impl BackboneIds {
    pub fn resolve(params: &ParamSet) -> Result<Self> {
        let block = |p: &str| -> Result<BlockIds> {
            Ok(BlockIds {
                conv1: lookup(params, &format!("{p}.conv1.weight"))?,
                conv2: lookup(params, &format!("{p}.conv2.weight"))?,
                se: SeIds {
                    fc1_w: lookup(params, &format!("{p}.se.fc1.weight"))?,
                    fc1_b: lookup(params, &format!("{p}.se.fc1.bias"))?,
                    fc2_w: lookup(params, &format!("{p}.se.fc2.weight"))?,
                    fc2_b: lookup(params, &format!("{p}.se.fc2.bias"))?,
                },
            })
        };
        Ok(Self {
            block1: block("block1")?,
            adapter: lookup(params, "adapter.weight")?,
            block2: block("block2")?,
            embed_w: lookup(params, "embed.weight")?,
            embed_b: lookup(params, "embed.bias")?,
        })
    }
}

/// SE parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub conv1: Var,
    pub conv2: Var,
    pub se: SeVars,
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub block1: BlockVars,
    pub adapter: Var,
    pub block2: BlockVars,
    pub embed_w: Var,
    pub embed_b: Var,
}

fn he_uniform(r: &mut Rng, shape: &[usize], fan_in: usize) -> Array {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

fn push_block(
    ps: &mut ParamSet,
    r: &mut Rng,
    prefix: &str,
    channels: usize,
    filter: usize,
    hidden: usize,
) -> Result<()> {
    let fan = channels * filter;
    ps.push(
        format!("{prefix}.conv1.weight"),
        he_uniform(r, &[channels, channels, filter], fan),
    )?;
    ps.push(
        format!("{prefix}.conv2.weight"),
        he_uniform(r, &[channels, channels, filter], fan),
    )?;
    ps.push(
        format!("{prefix}.se.fc1.weight"),
        he_uniform(r, &[hidden, channels], channels),
    )?;
    ps.push(format!("{prefix}.se.fc1.bias"), Array::zeros(&[hidden]))?;
    ps.push(
        format!("{prefix}.se.fc2.weight"),
        he_uniform(r, &[channels, hidden], hidden),
    )?;
    ps.push(format!("{prefix}.se.fc2.bias"), Array::zeros(&[channels]))?;
    Ok(())
}

/// Builds the standard backbone for `d_in` input channels with He-uniform
/// kernels and zero biases.
pub fn build_backbone(d_in: usize, seed: u64) -> Result<(BackboneConfig, ParamSet)> {
    let cfg = BackboneConfig::for_input(d_in)?;
    let params = init_params(&cfg, seed)?;
    Ok((cfg, params))
}

pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    if cfg.filters.0.is_multiple_of(2) || cfg.filters.1.is_multiple_of(2) {
        return Err(Error::invalid("filter sizes must be odd"));
    }
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    push_block(
        &mut ps,
        &mut r,
        "block1",
        cfg.d_in,
        cfg.filters.0,
        cfg.se_hidden(cfg.d_in),
    )?;
    ps.push(
        "adapter.weight",
        he_uniform(&mut r, &[cfg.k_mid, cfg.d_in, 1], cfg.d_in),
    )?;
    push_block(
        &mut ps,
        &mut r,
        "block2",
        cfg.k_mid,
        cfg.filters.1,
        cfg.se_hidden(cfg.k_mid),
    )?;
    ps.push(
        "embed.weight",
        he_uniform(&mut r, &[cfg.d_out, cfg.k_mid], cfg.k_mid),
    )?;
    ps.push("embed.bias", Array::zeros(&[cfg.d_out]))?;
    Ok(ps)
}

/// Linear classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `C x D_o`
    pub weight: Array,
    /// `C`
    pub bias: Array,
}

impl Head {
    pub fn zeros(classes: usize, d_out: usize) -> Self {
        Self {
            weight: Array::zeros(&[classes, d_out]),
            bias: Array::zeros(&[classes]),
        }
    }

    pub fn random(classes: usize, d_out: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        Self {
            weight: he_uniform(&mut r, &[classes, d_out], d_out),
            bias: Array::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Appends the head to `params` as `head.weight` / `head.bias`.
    pub fn attach(self, params: &mut ParamSet) -> Result<(ParamId, ParamId)> {
        Ok((
            params.push(HEAD_WEIGHT, self.weight)?,
            params.push(HEAD_BIAS, self.bias)?,
        ))
    }
}

/// `x · σ(W₂ relu(W₁ gap(x) + b₁) + b₂)` with the gate broadcast over time.
pub fn se_attention(tape: &mut Tape, features: Var, mask: &[bool], se: &SeVars) -> Result<Var> {
    let squeeze = tape.gap_time(features, mask)?;
    let h = tape.dense(squeeze, se.fc1_w, se.fc1_b)?;
    let h = tape.relu(h);
    let z = tape.dense(h, se.fc2_w, se.fc2_b)?;
    let gate = tape.sigmoid(z);
    tape.scale_channels(features, gate)
}

pub fn residual_block(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    block: &BlockVars,
    dilation: usize,
) -> Result<Var> {
    let a = tape.conv1d(x, block.conv1, dilation)?;
    let a = tape.mask_rows(a, mask)?;
    let a = tape.relu(a);
    let b = tape.conv1d(a, block.conv2, dilation)?;
    let b = tape.mask_rows(b, mask)?;
    let s = se_attention(tape, b, mask, &block.se)?;
    let y = tape.add(x, s)?;
    Ok(tape.relu(y))
}

/// `embeddings · Wᵀ + b`.
pub fn head_logits(tape: &mut Tape, embeddings: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.dense(embeddings, weight, bias)
}

fn block_vars(b: &BlockIds, var: &mut impl FnMut(ParamId) -> Var) -> BlockVars {
    BlockVars {
        conv1: var(b.conv1),
        conv2: var(b.conv2),
        se: SeVars {
            fc1_w: var(b.se.fc1_w),
            fc1_b: var(b.se.fc1_b),
            fc2_w: var(b.se.fc2_w),
            fc2_b: var(b.se.fc2_b),
        },
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub ids: BackboneIds,
}

impl Backbone {
    pub fn new(config: BackboneConfig, params: &ParamSet) -> Result<Self> {
        let ids = BackboneIds::resolve(params)?;
        let b1 = &params.get(ids.block1.conv1).value;
        if b1.shape() != [config.d_in, config.d_in, config.filters.0] {
            return Err(Error::shape(
                "Backbone::new",
                format!("block1 kernels {:?} do not match config", b1.shape()),
            ));
        }
        Ok(Self { config, ids })
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParamSet) -> BackboneVars {
        self.bind_with(|id| tape.param(params, id))
    }

    /// Builds the variable set from an arbitrary id → node mapping.
    pub fn bind_with(&self, mut var: impl FnMut(ParamId) -> Var) -> BackboneVars {
        BackboneVars {
            block1: block_vars(&self.ids.block1, &mut var),
            adapter: var(self.ids.adapter),
            block2: block_vars(&self.ids.block2, &mut var),
            embed_w: var(self.ids.embed_w),
            embed_b: var(self.ids.embed_b),
        }
    }

    /// Block 1 → adapter → block 2 on one `T x D′` sequence: the `T x K`
    /// features right before temporal pooling.
    pub fn features(
        &self,
        tape: &mut Tape,
        v: &BackboneVars,
        seq: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let x = tape.mask_rows(seq, mask)?;
        let h = residual_block(tape, x, mask, &v.block1, self.config.dilations.0)?;
        let h = tape.conv1d(h, v.adapter, 1)?;
        let h = tape.mask_rows(h, mask)?;
        residual_block(tape, h, mask, &v.block2, self.config.dilations.1)
    }

    /// Embeds one sequence to a `D_o` vector.
    pub fn embed_sequence(
        &self,
        tape: &mut Tape,
        v: &BackboneVars,
        seq: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let h = self.features(tape, v, seq, mask)?;
        let pooled = tape.gap_time(h, mask)?;
        tape.dense(pooled, v.embed_w, v.embed_b)
    }

    /// `B x T x D′` padded batch → `B x D_o` embeddings.
    pub fn forward_embed(
        &self,
        tape: &mut Tape,
        v: &BackboneVars,
        batch: &PaddedBatch,
    ) -> Result<Var> {
        if batch.width() != self.config.d_in {
            return Err(Error::shape(
                "forward_embed",
                format!(
                    "batch width {} but backbone expects {}",
                    batch.width(),
                    self.config.d_in
                ),
            ));
        }
        let mut rows = Vec::with_capacity(batch.batch_size());
        for b in 0..batch.batch_size() {
            let seq = tape.constant(batch.sample(b));
            rows.push(self.embed_sequence(tape, v, seq, &batch.masks[b])?);
        }
        tape.stack_rows(&rows)
    }

    /// Forward-only embedding of a padded batch.
    pub fn embed(&self, params: &ParamSet, batch: &PaddedBatch) -> Result<Array> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, params);
        let e = self.forward_embed(&mut tape, &v, batch)?;
        Ok(tape.value(e).clone())
    }
}

/// One random full-model finite-difference check: a small batch
/// (`T <= 12`, `D′ ∈ {2, 4}`) through the backbone and a random head,
/// scored by softmax cross-entropy. Returns `None` when the draw sits too
/// close to a ReLU kink for finite differences to be meaningful.
///
/// At most [`MODEL_COORDS_PER_PARAM`] coordinates of each tensor are probed.
pub fn model_gradcheck_case(seed: u64) -> Result<Option<GradCheckReport>> {
    let mut r = rng(seed);
    let d_in = [2usize, 4][r.random_range(0..2)];
    let classes = r.random_range(2..=3usize);
    let batch = r.random_range(2..=3usize);
    let (cfg, mut params) = build_backbone(d_in, r.random())?;
    // perturb biases so they are exercised away from zero
    for (id, p) in params.clone().iter() {
        if p.name.ends_with(".bias") {
            params.get_mut(id).value = normal_array(&mut r, p.value.shape(), 0.1);
        }
    }
    let bb = Backbone::new(cfg.clone(), &params)?;
    let head = Head {
        weight: normal_array(&mut r, &[classes, cfg.d_out], 0.05),
        bias: normal_array(&mut r, &[classes], 0.1),
    };
    let (hw, hb) = head.attach(&mut params)?;
    let seqs: Vec<Array> = (0..batch)
        .map(|_| {
            let t = r.random_range(1..=12usize);
            normal_array(&mut r, &[t, d_in], 1.0)
        })
        .collect();
    let padded = crate::episodes::pad_batch(&seqs)?;
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();

    let f = |tape: &mut Tape, ps: &ParamSet| -> Result<Var> {
        let v = bb.bind(tape, ps);
        let e = bb.forward_embed(tape, &v, &padded)?;
        let (w, b) = (tape.param(ps, hw), tape.param(ps, hb));
        let logits = head_logits(tape, e, w, b)?;
        tape.softmax_cross_entropy(logits, &labels)
    };
    let mut probe = Tape::new();
    f(&mut probe, &params)?;
    if probe.relu_margin() < KINK_MARGIN {
        return Ok(None);
    }
    finite_diff_check_sampled(f, &params, STEP, RTOL, MODEL_COORDS_PER_PARAM, seed).map(Some)
}

/// Results of the full gradient suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSuite {
    /// One aggregated report per op group, then `"model"`.
    pub entries: Vec<(String, GradCheckReport)>,
    /// Full-model configurations checked.
    pub model_cases: usize,
    /// Model draws rejected for sitting near a ReLU kink.
    pub model_skipped: usize,
}

impl GradientSuite {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, r)| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, r)| r.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Every op group over `configs` random instances, then `configs` full
/// backbone-plus-head losses.
pub fn gradient_suite(configs: usize, seed: u64) -> Result<GradientSuite> {
    let mut entries = op_suite(configs, seed)?;
    let mut model = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        rtol: RTOL,
    };
    let (mut done, mut skipped, mut attempt) = (0, 0, 0u64);
    while done < configs {
        attempt += 1;
        match model_gradcheck_case(derive_seed(seed, &[u64::MAX, attempt]))? {
            Some(r) => {
                model.merge(r);
                done += 1;
            }
            None => skipped += 1,
        }
    }
    entries.push(("model".into(), model));
    Ok(GradientSuite {
        entries,
        model_cases: done,
        model_skipped: skipped,
    })
}

/// Coordinates probed per parameter tensor in [`model_gradcheck_case`].
pub const MODEL_COORDS_PER_PARAM: usize = 48;
