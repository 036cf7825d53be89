//! The full classifier: encoder features → bridge → Bi-GRU → mean pool →
//! logits.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::head::{self, HeadConfig, HeadParams};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{grad_check, ParamCheckStatus, Scalar, Tape, Tensor, Var};
use crate::vit::{self, FreezeSummary, ViTConfig, ViTParams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Desk-scale geometry used by the gradient suite and the fast tests:
    /// 32×32 images, 8×8 patches, two blocks of width 32 with two heads, one
    /// block frozen, GRU width 16, three classes.
    pub fn tiny() -> Self {
        Self {
            vit: ViTConfig {
                image_size: 32,
                patch_size: 8,
                channels: 3,
                d_model: 32,
                depth: 2,
                heads: 2,
                mlp_width: 64,
                freeze_n: 1,
                use_cls_token: true,
                ln_eps: 1e-6,
            },
            head: HeadConfig {
                d_vit: 32,
                d_gru: 16,
                num_classes: 3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.head.validate()?;
        if self.head.d_vit != self.vit.d_model {
            return Err(Error::Config(format!(
                "head.d_vit {} must equal vit.d_model {}",
                self.head.d_vit, self.vit.d_model
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. Two configs hash equal iff
    /// they describe the same architecture.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub patches: Var,
    pub embedded: Var,
    pub z_vit: Var,
    pub z_bridge: Var,
    pub bigru: Var,
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub vit: ViTParams,
    pub head: HeadParams,
}

/// Gradients of one sample's loss with respect to every trainable parameter.
pub struct SampleGrads<T> {
    pub loss: f64,
    pub logits: Vec<T>,
    /// Indexed like the parameter store; `None` for frozen parameters.
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Model<T> {
    /// Builds a randomly initialized model from the `init` substream of
    /// `seed`, with the freezing policy applied.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, rng::INIT, &[]);
        let mut store = ParamStore::new();
        let vit = ViTParams::register(&config.vit, &mut store, &mut rng);
        let head = HeadParams::register(&config.head, &mut store, &mut rng);
        let mut model = Self {
            config,
            store,
            vit,
            head,
        };
        model.apply_freeze();
        Ok(model)
    }

    pub fn apply_freeze(&mut self) -> FreezeSummary {
        for id in self.head.ids() {
            self.store.set_requires_grad(id, true);
        }
        vit::apply_freeze(&self.vit, &mut self.store, &self.config.vit)
    }

    /// Parameters that never train.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !self.store.get(id).requires_grad).collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.get(id).requires_grad).collect()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, image: &Tensor<T>) -> Result<ForwardVars> {
        let binds = self.store.bind(tape);
        self.forward_bound(tape, &binds, image)
    }

    /// Forward pass against externally recorded parameter variables.
    pub fn forward_bound(&self, tape: &mut Tape<'_, T>, binds: &Bindings, image: &Tensor<T>) -> Result<ForwardVars> {
        let patches = tape.leaf(vit::patchify(image, &self.config.vit)?);
        let embedded = vit::embed(tape, patches, &self.vit, binds)?;
        let z_vit = vit::encoder_forward(tape, embedded, &self.vit, binds, &self.config.vit)?;
        let z_bridge = head::bridge_project(tape, z_vit, &self.head, binds)?;
        let bigru = head::bigru_forward(tape, z_bridge, &self.head, binds)?;
        let pooled = head::mean_pool(tape, bigru)?;
        let logits = head::classify(tape, pooled, &self.head, binds)?;
        Ok(ForwardVars {
            patches,
            embedded,
            z_vit,
            z_bridge,
            bigru,
            pooled,
            logits,
        })
    }

    /// Logits and pooled embedding for one image, without keeping the tape.
    pub fn infer(&self, image: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, image)?;
        Ok((tape.value(out.logits).to_vec(), tape.value(out.pooled).to_vec()))
    }

    pub fn logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        self.infer(image).map(|(l, _)| l)
    }

    /// Cross-entropy of one labelled image and its gradients.
    pub fn sample_grads(&self, image: &Tensor<T>, label: usize) -> Result<SampleGrads<T>> {
        let mut tape = Tape::new();
        let binds = self.store.bind(&mut tape);
        let out = self.forward_bound(&mut tape, &binds, image)?;
        let loss = tape.cross_entropy(out.logits, &[label])?;
        let loss_value = tape.value(loss)[0].f64();
        let logits = tape.value(out.logits).to_vec();
        tape.backward(loss)?;
        let grads = self
            .store
            .iter()
            .map(|(id, p)| {
                p.tensor.requires_grad.then(|| {
                    tape.grad(binds[id])
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); p.tensor.numel()])
                })
            })
            .collect();
        Ok(SampleGrads {
            loss: loss_value,
            logits,
            grads,
        })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.register(p.name.clone(), p.tensor.cast());
        }
        Model {
            config: self.config.clone(),
            store,
            vit: self.vit.clone(),
            head: self.head.clone(),
        }
    }
}

/// Gradient-check bucket a parameter name belongs to: `vit.embed`,
/// `vit.block.N`, `head.bridge`, `head.gru.fwd`, `head.gru.bwd`, `head.cls`.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["vit", "block", n, ..] => format!("vit.block.{n}"),
        ["vit", ..] => "vit.embed".to_string(),
        ["head", "gru", dir, ..] => format!("head.gru.{dir}"),
        ["head", part, ..] => format!("head.{part}"),
        _ => name.to_string(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub tensors: usize,
    pub values: usize,
    pub worst_rel_err: f64,
    pub worst_param: Option<String>,
    pub status: ParamCheckStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradReport {
    pub step: f64,
    pub tol: f64,
    pub groups: Vec<GroupCheck>,
}

impl ModelGradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.status != ParamCheckStatus::Failed)
    }
}

/// Finite-difference check of the mean cross-entropy over `samples`, grouped
/// by [`param_group`]. Frozen groups are reported as skipped.
pub fn model_grad_check(
    model: &Model<f64>,
    samples: &[(Tensor<f64>, usize)],
    step: f64,
    tol: f64,
) -> Result<ModelGradReport> {
    if samples.is_empty() {
        return Err(Error::data("gradient check needs at least one sample"));
    }
    let params: Vec<Tensor<f64>> = model.store.iter().map(|(_, p)| p.tensor.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|(_, l)| *l).collect();
    let report = grad_check(
        |tape, vars| {
            let binds = Bindings::from_vars(vars.to_vec());
            let mut rows = Vec::with_capacity(samples.len());
            for (image, _) in samples {
                rows.push(model.forward_bound(tape, &binds, image)?.logits);
            }
            let logits = tape.concat_rows(&rows)?;
            tape.cross_entropy(logits, &labels)
        },
        &params,
        step,
        tol,
    )?;

    let mut groups: Vec<GroupCheck> = Vec::new();
    for check in &report.params {
        let name = &model.store.iter().nth(check.index).expect("index in range").1.name;
        let group = param_group(name);
        let entry = match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => g,
            None => {
                groups.push(GroupCheck {
                    group,
                    tensors: 0,
                    values: 0,
                    worst_rel_err: 0.0,
                    worst_param: None,
                    status: ParamCheckStatus::Skipped,
                });
                groups.last_mut().unwrap()
            }
        };
        entry.tensors += 1;
        entry.values += check.numel;
        if check.status != ParamCheckStatus::Skipped {
            if entry.status == ParamCheckStatus::Skipped {
                entry.status = ParamCheckStatus::Passed;
            }
            if check.status == ParamCheckStatus::Failed {
                entry.status = ParamCheckStatus::Failed;
            }
            if entry.worst_param.is_none() || check.max_rel_err > entry.worst_rel_err {
                entry.worst_rel_err = check.max_rel_err;
                entry.worst_param = Some(name.clone());
            }
        }
    }
    Ok(ModelGradReport {
        step,
        tol,
        groups,
    })
}
