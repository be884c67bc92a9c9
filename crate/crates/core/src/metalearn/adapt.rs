use rayon::prelude::*;

use super::learner::{
    compute_prototypes, embed_on_tape, embed_sequences, init_head, InnerLoopConfig, LearnerKind,
    MetaModel, PrototypeSet,
};
use super::optim::{adam_step, AdamConfig, AdamState};
use crate::array::Array;
use crate::diffcore::{Gradients, ParamId, ParamSet, Tape, Var};
use crate::episodes::{Episode, Sample};
use crate::error::{Error, Result};
use crate::seqnet::{head_logits, BackboneVars};

/// Task-specific parameters produced by [`inner_adapt`].
#[derive(Debug, Clone)]
pub struct Adapted {
    /// θ′: the meta-parameters after the inner steps, followed by the
    /// episode-local head for ProtoMAML.
    pub params: ParamSet,
    /// Head used for classification; `None` for ProtoNet.
    pub head: Option<(ParamId, ParamId)>,
    /// Support prototypes at θ (ProtoNet, and ProtoMAML's head init).
    pub prototypes: Option<PrototypeSet>,
    /// Support loss before each inner step.
    pub support_losses: Vec<f64>,
    /// Per-step updates `−α·g`, kept when history retention is requested.
    pub history: Option<Vec<Gradients>>,
    /// Number of leading entries of `params` that are meta-parameters.
    pub n_meta: usize,
}

fn check_support(support: &[Sample], classes: usize) -> Result<()> {
    if support.is_empty() {
        return Err(Error::invalid("empty support set"));
    }
    let mut seen = vec![false; classes];
    for s in support {
        *seen.get_mut(s.label).ok_or_else(|| {
            Error::invalid(format!(
                "support label {} outside {classes} classes",
                s.label
            ))
        })? = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!(
            "class {c} missing from the support set"
        )));
    }
    Ok(())
}

fn logits_from(
    tape: &mut Tape,
    model: &MetaModel,
    vars: &BackboneVars,
    head: (Var, Var),
    samples: &[&Array],
) -> Result<Var> {
    let e = embed_on_tape(tape, model.backbone(), vars, samples)?;
    head_logits(tape, e, head.0, head.1)
}

/// Runs `N_w` SGD steps on the support loss from a copy of the
/// meta-parameters. ProtoMAML first builds its head from the support
/// prototypes; ProtoNet has no inner steps and only computes prototypes.
///
/// The meta-parameters are never modified.
pub fn inner_adapt(
    model: &MetaModel,
    support: &[Sample],
    classes: usize,
    inner: &InnerLoopConfig,
    retain_history: bool,
) -> Result<Adapted> {
    model.check_classes(classes)?;
    check_support(support, classes)?;
    let n_meta = model.params.len();
    let seqs: Vec<&Array> = support.iter().map(|s| &s.sequence).collect();
    let labels: Vec<usize> = support.iter().map(|s| s.label).collect();
    let mut params = model.params.clone();

    let prototypes = match model.kind {
        LearnerKind::FoMaml => None,
        LearnerKind::ProtoNet | LearnerKind::ProtoMaml => {
            let e = embed_sequences(model.backbone(), &params, &seqs)?;
            Some(compute_prototypes(&e, &labels, classes)?)
        }
    };
    let head = match model.kind {
        LearnerKind::ProtoNet => None,
        LearnerKind::FoMaml => model.head_ids(),
        LearnerKind::ProtoMaml => {
            Some(init_head(prototypes.as_ref().unwrap()).attach(&mut params)?)
        }
    };

    let mut support_losses = Vec::new();
    let mut history = retain_history.then(Vec::new);
    if let Some((hw, hb)) = head {
        inner.validate()?;
        for _ in 0..inner.n_updates {
            let mut tape = Tape::new();
            let vars = model.backbone().bind(&mut tape, &params);
            let head_vars = (tape.param(&params, hw), tape.param(&params, hb));
            let logits = logits_from(&mut tape, model, &vars, head_vars, &seqs)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            support_losses.push(tape.scalar(loss));
            let grads = tape.backward(loss)?;
            params.sgd_step(&grads, inner.inner_lr);
            if let Some(h) = history.as_mut() {
                let mut step = Gradients::new(params.len());
                for (id, g) in grads.iter() {
                    if params.get(id).trainable {
                        step.set(id, g.map(|x| -inner.inner_lr * x));
                    }
                }
                h.push(step);
            }
        }
    }
    Ok(Adapted {
        params,
        head,
        prototypes,
        support_losses,
        history,
        n_meta,
    })
}

/// Cross-entropy of the adapted classifier on `samples`.
pub fn adapted_loss(model: &MetaModel, adapted: &Adapted, samples: &[Sample]) -> Result<f64> {
    let seqs: Vec<&Array> = samples.iter().map(|s| &s.sequence).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut tape = Tape::new();
    let vars = model.backbone().bind(&mut tape, &adapted.params);
    let logits = match (adapted.head, &adapted.prototypes) {
        (Some((hw, hb)), _) => {
            let h = (
                tape.param(&adapted.params, hw),
                tape.param(&adapted.params, hb),
            );
            logits_from(&mut tape, model, &vars, h, &seqs)?
        }
        (None, Some(p)) => {
            let e = embed_on_tape(&mut tape, model.backbone(), &vars, &seqs)?;
            let protos = tape.constant(p.vectors.clone());
            tape.neg_sq_dist(e, protos)?
        }
        (None, None) => return Err(Error::invalid("adapted model has no classifier")),
    };
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    Ok(tape.scalar(loss))
}

/// Meta-gradient contribution of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeGradient {
    /// Gradients of the query loss, indexed like the meta-parameters.
    pub grads: Gradients,
    pub query_loss: f64,
}

/// Query-loss gradient of one episode.
///
/// ProtoNet differentiates through both the support prototypes and the
/// query embeddings. The MAML learners take the gradient at θ′ without
/// differentiating through the inner loop; ProtoMAML's episode-local head
/// receives a gradient that is then discarded.
///
/// With `retain_history` the query graph is rebuilt on top of the
/// meta-parameters as `θ + Σ(−α·g_s)` with the inner updates as constants,
/// so the gradient reaches θ through the retained inner-loop path.
pub fn episode_gradient(
    model: &MetaModel,
    episode: &Episode,
    inner: &InnerLoopConfig,
    retain_history: bool,
) -> Result<EpisodeGradient> {
    if episode.query.is_empty() {
        return Err(Error::invalid("episode has an empty query set"));
    }
    let n_meta = model.params.len();
    let query: Vec<&Array> = episode.query.iter().map(|s| &s.sequence).collect();
    let q_labels = episode.query_labels();
    let mut tape = Tape::new();

    let logits = if model.kind == LearnerKind::ProtoNet {
        model.check_classes(episode.classes)?;
        check_support(&episode.support, episode.classes)?;
        let support: Vec<&Array> = episode.support.iter().map(|s| &s.sequence).collect();
        let vars = model.backbone().bind(&mut tape, &model.params);
        let es = embed_on_tape(&mut tape, model.backbone(), &vars, &support)?;
        let protos = tape.class_means(es, &episode.support_labels(), episode.classes)?;
        let eq = embed_on_tape(&mut tape, model.backbone(), &vars, &query)?;
        tape.neg_sq_dist(eq, protos)?
    } else {
        let adapted = inner_adapt(
            model,
            &episode.support,
            episode.classes,
            inner,
            retain_history,
        )?;
        let (hw, hb) = adapted.head.expect("MAML learners adapt a head");
        let vars;
        let head;
        if let Some(history) = &adapted.history {
            let mut bound: Vec<Option<Var>> = vec![None; adapted.params.len()];
            let mut bind = |tape: &mut Tape, id: ParamId| -> Var {
                if let Some(v) = bound[id.0] {
                    return v;
                }
                let mut v = if id.0 < n_meta {
                    tape.param(&model.params, id)
                } else {
                    // episode-local head starts from its detached prototype init
                    let init = init_head(adapted.prototypes.as_ref().unwrap());
                    tape.constant(if id == hw { init.weight } else { init.bias })
                };
                for step in history {
                    if let Some(d) = step.get(id) {
                        let d = tape.constant(d.clone());
                        v = tape.add(v, d).expect("update shapes match parameters");
                    }
                }
                bound[id.0] = Some(v);
                v
            };
            vars = model.backbone().bind_with(|id| bind(&mut tape, id));
            head = (bind(&mut tape, hw), bind(&mut tape, hb));
        } else {
            vars = model.backbone().bind(&mut tape, &adapted.params);
            head = (
                tape.param(&adapted.params, hw),
                tape.param(&adapted.params, hb),
            );
        }
        logits_from(&mut tape, model, &vars, head, &query)?
    };
    let loss = tape.softmax_cross_entropy(logits, &q_labels)?;
    let mut grads = tape.backward(loss)?;
    grads.truncate(n_meta);
    Ok(EpisodeGradient {
        grads,
        query_loss: tape.scalar(loss),
    })
}

/// Sums the query gradients of a batch of episodes in batch order and
/// applies one Adam step to the meta-parameters. Returns the mean query
/// loss. Episodes are processed in parallel on the current rayon pool.
pub fn outer_step(
    model: &mut MetaModel,
    adam: &mut AdamState,
    episodes: &[Episode],
    inner: &InnerLoopConfig,
    outer_lr: f64,
    adam_cfg: &AdamConfig,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::invalid("outer step on an empty episode batch"));
    }
    let parts: Vec<EpisodeGradient> = episodes
        .par_iter()
        .map(|ep| episode_gradient(model, ep, inner, false))
        .collect::<Result<_>>()?;
    let mut total = Gradients::new(model.params.len());
    let mut loss = 0.0;
    for p in &parts {
        total.accumulate(&p.grads);
        loss += p.query_loss;
    }
    adam_step(&mut model.params, &total, adam, outer_lr, adam_cfg)?;
    Ok(loss / episodes.len() as f64)
}
