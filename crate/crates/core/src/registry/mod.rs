//! Per-task adapter sets, the task registry, and the AFNR container.

mod container;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affiner::{Adapter, AffinerParts, Method};
use crate::backbone::{fingerprint_arrays, ArchKind, Backbone, Fingerprint, MaskPlan};
use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::tensor::{Scalar, Tensor};

pub use container::{load_adapter, load_backbone, read_adapter, save_adapter, save_backbone, write_adapter, FORMAT_VERSION, MAGIC};

/// Zero-gated additive injection of a spatial condition map.
#[derive(Clone, Debug, PartialEq)]
pub struct CondInjection<S: Scalar> {
    /// Rank-0 gate `g`, zero at creation.
    pub gate: Tensor<S>,
    /// `[hidden, p²·C_cond]` for the transformer, `[c0, C_cond]` for the CNN.
    pub proj: Tensor<S>,
}

/// Where an adapter set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Fresh,
    File,
}

/// Everything trained for one task.
#[derive(Clone, Debug)]
pub struct AdapterSet<S: Scalar> {
    pub task_name: String,
    pub backbone_fingerprint: Fingerprint,
    pub entries: BTreeMap<String, Adapter<S>>,
    /// `[M, d]` rows appended after the unconditional class row.
    pub new_class_rows: Option<Tensor<S>>,
    pub cond: Option<CondInjection<S>>,
    pub origin: Origin,
    /// Affiner groups that receive gradients; not serialized.
    pub parts: AffinerParts,
}

/// Options for [`AdapterSet::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSpec {
    pub method: Method,
    /// Number of new classes `M`.
    pub new_classes: usize,
    pub with_cond: bool,
    pub seed: u64,
    pub parts: AffinerParts,
}

impl AdapterSpec {
    pub fn affiner(rank: usize, seed: u64) -> Self {
        Self {
            method: Method::Affiner { rank },
            new_classes: 0,
            with_cond: false,
            seed,
            parts: AffinerParts::FULL,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_classes(mut self, m: usize) -> Self {
        self.new_classes = m;
        self
    }

    pub fn with_cond(mut self, on: bool) -> Self {
        self.with_cond = on;
        self
    }

    pub fn with_parts(mut self, parts: AffinerParts) -> Self {
        self.parts = parts;
        self
    }
}

impl<S: Scalar> AdapterSet<S> {
    /// Fresh adapters for every targeted wrapped layer of `backbone`.
    pub fn create(backbone: &Backbone<S>, task_name: &str, spec: &AdapterSpec) -> Result<Self> {
        let layers = backbone.wrapped_layers();
        let has_attention = layers.iter().any(|l| l.role == crate::nn::LayerRole::Attention);
        let mut entries = BTreeMap::new();
        for layer in layers {
            if !spec.method.targets(layer.role, has_attention) {
                continue;
            }
            let seed = derive_seed(spec.seed, &layer.id);
            entries.insert(layer.id.clone(), spec.method.create(layer.out_dim(), layer.in_dim(), seed)?);
        }
        let new_class_rows = match spec.new_classes {
            0 => None,
            m => {
                let table = backbone.class_table();
                let ext = table.extend(m)?;
                let d = table.dim();
                let start = table.len() * d;
                Some(Tensor::new(vec![m, d], ext.rows().data()[start..].to_vec())?)
            }
        };
        let cond = if spec.with_cond {
            let cfg = backbone.config();
            if cfg.cond_channels == 0 {
                return Err(Error::Invalid("backbone declares no condition channels".into()));
            }
            let k = match cfg.kind {
                ArchKind::Dit => cfg.patch * cfg.patch * cfg.cond_channels,
                ArchKind::Cnn => cfg.cond_channels,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "cond"));
            let bound = (6.0 / (cfg.hidden + k) as f64).sqrt();
            Some(CondInjection {
                gate: Tensor::scalar(S::zero()),
                proj: Tensor::uniform(vec![cfg.hidden, k], bound, &mut rng),
            })
        } else {
            None
        };
        Ok(Self {
            task_name: task_name.to_string(),
            backbone_fingerprint: backbone.fingerprint(),
            entries,
            new_class_rows,
            cond,
            origin: Origin::Fresh,
            parts: spec.parts,
        })
    }

    pub fn entry(&self, layer_id: &str) -> Option<&Adapter<S>> {
        self.entries.get(layer_id)
    }

    pub fn parts(&self) -> AffinerParts {
        self.parts
    }

    pub fn new_classes(&self) -> usize {
        self.new_class_rows.as_ref().map_or(0, |t| t.shape()[0])
    }

    /// Fingerprint matches and every entry names a wrapped layer of compatible shape.
    pub fn check_binding(&self, backbone: &Backbone<S>) -> Result<()> {
        let live = backbone.fingerprint();
        if live != self.backbone_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.backbone_fingerprint.to_hex(),
                found: live.to_hex(),
            });
        }
        for (id, adapter) in &self.entries {
            let Some(layer) = backbone.wrapped_layer(id) else {
                return Err(Error::UnknownLayer(id.clone()));
            };
            let (m, n) = (layer.out_dim(), layer.in_dim());
            let ok = match adapter {
                Adapter::Affiner(p) => p.out_dim() == m && p.in_dim() == n,
                Adapter::Lora(p) => p.a.shape()[0] == m && p.b.shape()[1] == n,
                Adapter::BiasOnly(p) => p.delta.numel() == m,
            };
            if !ok {
                return Err(Error::Shape {
                    op: "adapter binding",
                    lhs: vec![m, n],
                    rhs: adapter.arrays().first().map(|(_, t)| t.shape().to_vec()).unwrap_or_default(),
                });
            }
        }
        if let Some(rows) = &self.new_class_rows {
            if rows.shape()[1] != backbone.class_table().dim() {
                return Err(Error::Shape {
                    op: "new class rows",
                    lhs: rows.shape().to_vec(),
                    rhs: vec![backbone.class_table().dim()],
                });
            }
        }
        Ok(())
    }

    /// Every array with the parameter name used on the tape.
    pub fn named_arrays(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (id, adapter) in &self.entries {
            for (role, t) in adapter.arrays() {
                out.push((format!("{id}::{role}"), t));
            }
        }
        if let Some(rows) = &self.new_class_rows {
            out.push(("new_class_rows".to_string(), rows));
        }
        if let Some(c) = &self.cond {
            out.push(("cond::gate".to_string(), &c.gate));
            out.push(("cond::proj".to_string(), &c.proj));
        }
        out
    }

    /// Mutable access by tape parameter name.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (id, adapter) in self.entries.iter_mut() {
            for (role, t) in adapter.arrays_mut() {
                f(&format!("{id}::{role}"), t);
            }
        }
        if let Some(rows) = &mut self.new_class_rows {
            f("new_class_rows", rows);
        }
        if let Some(c) = &mut self.cond {
            f("cond::gate", &mut c.gate);
            f("cond::proj", &mut c.proj);
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_arrays().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters that the current `parts` mask actually trains.
    pub fn trainable_count(&self) -> usize {
        let p = self.parts;
        self.named_arrays()
            .iter()
            .filter(|(name, _)| match name.rsplit("::").next() {
                Some("a") => p.scale,
                Some("b") => p.shift,
                Some("s" | "w_down" | "w_up") => p.branch,
                _ => true,
            })
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Content hash over every array of the set.
    pub fn content_hash(&self) -> Fingerprint {
        let arrays = self.named_arrays();
        fingerprint_arrays(arrays.iter().map(|(n, t)| (n.as_str(), *t)))
    }
}

/// A backbone together with its named adapter sets; at most one set is active.
#[derive(Debug)]
pub struct Registry<S: Scalar> {
    backbone: Backbone<S>,
    sets: BTreeMap<String, AdapterSet<S>>,
    active: Option<String>,
}

impl<S: Scalar> Registry<S> {
    pub fn new(backbone: Backbone<S>) -> Self {
        Self {
            backbone,
            sets: BTreeMap::new(),
            active: None,
        }
    }

    pub fn backbone(&self) -> &Backbone<S> {
        &self.backbone
    }

    pub fn create_task(&mut self, task_name: &str, spec: &AdapterSpec) -> Result<&mut AdapterSet<S>> {
        if self.sets.contains_key(task_name) {
            return Err(Error::DuplicateTask(task_name.to_string()));
        }
        let set = AdapterSet::create(&self.backbone, task_name, spec)?;
        Ok(self.sets.entry(task_name.to_string()).or_insert(set))
    }

    /// Adds a set built elsewhere, e.g. loaded from disk.
    pub fn insert(&mut self, set: AdapterSet<S>) -> Result<()> {
        if self.sets.contains_key(&set.task_name) {
            return Err(Error::DuplicateTask(set.task_name));
        }
        set.check_binding(&self.backbone)?;
        self.sets.insert(set.task_name.clone(), set);
        Ok(())
    }

    pub fn remove(&mut self, task_name: &str) -> Option<AdapterSet<S>> {
        if self.active.as_deref() == Some(task_name) {
            self.active = None;
        }
        self.sets.remove(task_name)
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.sets.keys().map(String::as_str).collect()
    }

    pub fn get(&self, task_name: &str) -> Result<&AdapterSet<S>> {
        self.sets.get(task_name).ok_or_else(|| Error::UnknownTask(task_name.to_string()))
    }

    pub fn get_mut(&mut self, task_name: &str) -> Result<&mut AdapterSet<S>> {
        self.sets.get_mut(task_name).ok_or_else(|| Error::UnknownTask(task_name.to_string()))
    }

    /// Frozen backbone and one mutable set, for training that task.
    pub fn split_mut(&mut self, task_name: &str) -> Result<(&Backbone<S>, &mut AdapterSet<S>)> {
        let set = self
            .sets
            .get_mut(task_name)
            .ok_or_else(|| Error::UnknownTask(task_name.to_string()))?;
        Ok((&self.backbone, set))
    }

    /// Makes `task_name` the set used by subsequent forwards. Only a name is stored.
    pub fn switch_task(&mut self, task_name: &str) -> Result<()> {
        let set = self.get(task_name)?;
        let live = self.backbone.fingerprint();
        if set.backbone_fingerprint != live {
            return Err(Error::FingerprintMismatch {
                expected: set.backbone_fingerprint.to_hex(),
                found: live.to_hex(),
            });
        }
        self.active = Some(task_name.to_string());
        Ok(())
    }

    /// Activates exactly one task; several at once is a composition error.
    pub fn activate(&mut self, task_names: &[&str]) -> Result<()> {
        match task_names {
            [] => {
                self.active = None;
                Ok(())
            }
            [one] => self.switch_task(one),
            many => Err(Error::Composition(many.len())),
        }
    }

    pub fn deactivate(&mut self) {
        self.active = None;
    }

    pub fn active(&self) -> Option<&AdapterSet<S>> {
        self.active.as_ref().and_then(|n| self.sets.get(n))
    }

    pub fn active_name(&self) -> Option<&str> {
        self.active.as_deref()
    }

    /// Denoiser evaluation with the active set, if any.
    pub fn denoise(
        &self,
        x: &Tensor<S>,
        t: &[usize],
        classes: &[usize],
        cond: Option<&Tensor<S>>,
        mask: Option<&MaskPlan>,
    ) -> Result<Tensor<S>> {
        self.backbone.denoise(x, t, classes, cond, self.active(), mask)
    }
}

#[cfg(test)]
mod tests;
