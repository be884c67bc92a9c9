use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::diffcore::{kernels, ParamId, ParamSet, Tape, Var};
use crate::episodes::pad_batch;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::seqnet::{
    init_params, Backbone, BackboneConfig, BackboneVars, Head, HEAD_BIAS, HEAD_WEIGHT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    ProtoNet,
    FoMaml,
    ProtoMaml,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [
        LearnerKind::ProtoNet,
        LearnerKind::FoMaml,
        LearnerKind::ProtoMaml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::ProtoNet => "protonet",
            LearnerKind::FoMaml => "fomaml",
            LearnerKind::ProtoMaml => "protomaml",
        }
    }

    /// Whether adaptation runs gradient steps on a linear head.
    pub fn has_head(self) -> bool {
        !matches!(self, LearnerKind::ProtoNet)
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "protonet" => Ok(LearnerKind::ProtoNet),
            "fomaml" | "maml" => Ok(LearnerKind::FoMaml),
            "protomaml" => Ok(LearnerKind::ProtoMaml),
            _ => Err(Error::invalid(format!(
                "unknown learner {s:?}; expected protonet, fomaml or protomaml"
            ))),
        }
    }
}

/// Task-level SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopConfig {
    pub inner_lr: f64,
    pub n_updates: usize,
}

impl InnerLoopConfig {
    /// One step at `α = 0.1`, used during meta-training.
    pub const fn train() -> Self {
        Self {
            inner_lr: 0.1,
            n_updates: 1,
        }
    }

    /// Twenty steps at `α = 0.1`, used when adapting to a target task.
    pub const fn test() -> Self {
        Self {
            inner_lr: 0.1,
            n_updates: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_lr >= 0.0 && self.inner_lr.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(
                "inner learning rate must be finite and non-negative",
            ))
        }
    }
}

/// Class prototypes, row `c` belonging to class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `C x D_o`
    pub vectors: Array,
}

impl PrototypeSet {
    pub fn classes(&self) -> usize {
        self.vectors.shape()[0]
    }
}

/// Mean support embedding per class.
pub fn compute_prototypes(
    embeddings: &Array,
    labels: &[usize],
    classes: usize,
) -> Result<PrototypeSet> {
    if classes < 2 {
        return Err(Error::invalid("prototypes need at least two classes"));
    }
    let vectors = kernels::class_means(embeddings, labels, classes)?;
    if !vectors.is_finite() {
        return Err(Error::invalid("non-finite prototype"));
    }
    Ok(PrototypeSet { vectors })
}

/// Head whose logits reproduce the prototype posterior: `W_c = 2 v_c`,
/// `b_c = −‖v_c‖²`.
pub fn init_head(protos: &PrototypeSet) -> Head {
    let weight = protos.vectors.map(|x| 2.0 * x);
    let bias = Array::vector(
        protos
            .vectors
            .rows()
            .map(|v| -v.iter().map(|x| x * x).sum::<f64>())
            .collect(),
    );
    Head { weight, bias }
}

/// Row-wise softmax over `−‖e − v_c‖²`.
pub fn protonet_posterior(queries: &Array, protos: &PrototypeSet) -> Result<Array> {
    kernels::softmax(&kernels::neg_sq_dist(queries, &protos.vectors)?)
}

/// Sequences per padded forward chunk in forward-only embedding.
pub const EMBED_CHUNK: usize = 16;

/// Meta-parameters with their architecture. For fo-MAML the parameter set
/// also holds a shared `n_way`-class head.
#[derive(Debug, Clone)]
pub struct MetaModel {
    pub kind: LearnerKind,
    pub config: BackboneConfig,
    pub n_way: Option<usize>,
    pub params: ParamSet,
    backbone: Backbone,
}

impl MetaModel {
    /// Fresh model for `d_in`-wide inputs. `n_way` sizes the shared head and
    /// is only used by fo-MAML.
    pub fn init(kind: LearnerKind, d_in: usize, n_way: usize, seed: u64) -> Result<Self> {
        let config = BackboneConfig::for_input(d_in)?;
        let mut params = init_params(&config, derive_seed(seed, &[0]))?;
        let n_way = if kind == LearnerKind::FoMaml {
            if n_way < 2 {
                return Err(Error::invalid("fo-MAML head needs at least two classes"));
            }
            Head::random(n_way, config.d_out, derive_seed(seed, &[1])).attach(&mut params)?;
            Some(n_way)
        } else {
            None
        };
        Self::from_parts(kind, config, n_way, params)
    }

    pub fn from_parts(
        kind: LearnerKind,
        config: BackboneConfig,
        n_way: Option<usize>,
        params: ParamSet,
    ) -> Result<Self> {
        let backbone = Backbone::new(config.clone(), &params)?;
        let has_head = params.id(HEAD_WEIGHT).is_some();
        match (kind, n_way) {
            (LearnerKind::FoMaml, Some(n)) if has_head => {
                let w = params.by_name(HEAD_WEIGHT).unwrap();
                if w.value.shape() != [n, config.d_out] {
                    return Err(Error::shape(
                        "MetaModel",
                        format!("head {:?} does not match {n} classes", w.value.shape()),
                    ));
                }
            }
            (LearnerKind::FoMaml, _) => {
                return Err(Error::invalid("fo-MAML model needs a head and n_way"));
            }
            (_, None) if !has_head => {}
            _ => {
                return Err(Error::invalid(format!(
                    "{kind} model must not carry a shared head"
                )))
            }
        }
        Ok(Self {
            kind,
            config,
            n_way,
            params,
            backbone,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Ids of the shared head (fo-MAML only).
    pub fn head_ids(&self) -> Option<(ParamId, ParamId)> {
        Some((self.params.id(HEAD_WEIGHT)?, self.params.id(HEAD_BIAS)?))
    }

    /// Checks that a task with `classes` classes can be handled.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::invalid("tasks need at least two classes"));
        }
        match self.n_way {
            Some(n) if n != classes => Err(Error::invalid(format!(
                "fo-MAML model is {n}-way but the task has {classes} classes"
            ))),
            _ => Ok(()),
        }
    }
}

/// Embeds sequences on a tape as one padded batch: `B x D_o`.
pub(crate) fn embed_on_tape(
    tape: &mut Tape,
    backbone: &Backbone,
    vars: &BackboneVars,
    sequences: &[&Array],
) -> Result<Var> {
    let batch = pad_batch(sequences.iter().copied())?;
    backbone.forward_embed(tape, vars, &batch)
}

/// Forward-only embeddings in padded chunks of [`EMBED_CHUNK`].
pub fn embed_sequences(
    backbone: &Backbone,
    params: &ParamSet,
    sequences: &[&Array],
) -> Result<Array> {
    if sequences.is_empty() {
        return Err(Error::invalid("nothing to embed"));
    }
    let mut data = Vec::new();
    for chunk in sequences.chunks(EMBED_CHUNK) {
        let batch = pad_batch(chunk.iter().copied())?;
        data.extend(backbone.embed(params, &batch)?.into_data());
    }
    Array::new(vec![sequences.len(), backbone.config.d_out], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototype_examples() {
        let e = Array::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 1.0]]).unwrap();
        let p = compute_prototypes(&e, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.vectors.row(0), &[1.0, 1.0]);
        assert_eq!(p.vectors.row(1), &[5.0, 1.0]);
        let dup = Array::from_rows(&[
            vec![0.0, 0.0],
            vec![2.0, 2.0],
            vec![5.0, 1.0],
            vec![0.0, 0.0],
            vec![2.0, 2.0],
            vec![5.0, 1.0],
        ])
        .unwrap();
        assert_eq!(compute_prototypes(&dup, &[0, 0, 1, 0, 0, 1], 2).unwrap(), p);
        assert!(compute_prototypes(&e, &[0, 0, 0], 2).is_err());
    }

    #[test]
    fn head_init_examples() {
        let p = PrototypeSet {
            vectors: Array::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap(),
        };
        let h = init_head(&p);
        assert_eq!(h.weight.row(0), &[2.0, 2.0]);
        assert_eq!(h.weight.row(1), &[0.0, 0.0]);
        assert_eq!(h.bias.data(), &[-2.0, 0.0]);
    }

    #[test]
    fn posterior_examples() {
        let p = PrototypeSet {
            vectors: Array::from_rows(&[vec![0.0, 0.0], vec![100.0, 0.0]]).unwrap(),
        };
        let q = Array::from_rows(&[vec![0.0, 0.0], vec![50.0, 3.0]]).unwrap();
        let post = protonet_posterior(&q, &p).unwrap();
        assert!((post.row(0)[0] - 1.0).abs() < 1e-12);
        assert!((post.row(1)[0] - 0.5).abs() < 1e-12);
        let shift = |a: &Array| a.map(|x| x + 7.5);
        let moved = protonet_posterior(
            &shift(&q),
            &PrototypeSet {
                vectors: shift(&p.vectors),
            },
        )
        .unwrap();
        for (a, b) in moved.data().iter().zip(post.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn learner_names_round_trip() {
        for k in LearnerKind::ALL {
            assert_eq!(k.as_str().parse::<LearnerKind>().unwrap(), k);
        }
        assert_eq!(
            "Proto-MAML".parse::<LearnerKind>().unwrap(),
            LearnerKind::ProtoMaml
        );
        assert!("reptile".parse::<LearnerKind>().is_err());
    }

    #[test]
    fn model_heads() {
        let m = MetaModel::init(LearnerKind::FoMaml, 4, 3, 1).unwrap();
        assert!(m.head_ids().is_some());
        assert!(m.check_classes(3).is_ok());
        assert!(m.check_classes(2).is_err());
        let p = MetaModel::init(LearnerKind::ProtoMaml, 4, 3, 1).unwrap();
        assert!(p.head_ids().is_none());
        assert!(p.check_classes(5).is_ok());
    }
}
