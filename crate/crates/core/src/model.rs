//! The full network: two encoders, the memory pair and the task head, plus
//! the memory-free baseline variant (`slots == 0`).

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_on, Activation, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{classify_on, fuse_on, HeadParams, HeadVars};
use crate::memory::{tape, unit_rows};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub source_input: usize,
    pub target_input: usize,
    pub hidden: usize,
    /// `C`
    pub source_features: usize,
    /// `D`
    pub target_features: usize,
    /// `F`
    pub fused: usize,
    pub classes: usize,
    /// `N`; zero disables the memory and the target branch entirely.
    pub slots: usize,
    /// `r`
    pub scale: f64,
    pub share_head: bool,
}

impl Architecture {
    pub fn has_memory(&self) -> bool {
        self.slots > 0
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("source_input", self.source_input),
            ("target_input", self.target_input),
            ("hidden", self.hidden),
            ("source_features", self.source_features),
            ("target_features", self.target_features),
            ("fused", self.fused),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale r must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Gradient routing switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradientFlow {
    /// Treat the target addressing as a constant inside the bridging loss.
    pub detach_target: bool,
    /// Stop the saving loss from reaching the target encoder.
    pub detach_save_target: bool,
}

impl Default for GradientFlow {
    fn default() -> Self {
        Self {
            detach_target: true,
            detach_save_target: false,
        }
    }
}

pub mod names {
    pub const SRC: &str = "enc_src";
    pub const TGT: &str = "enc_tgt";
    pub const KEY: &str = "memory.key";
    pub const VALUE: &str = "memory.value";
    pub const HEAD: &str = "head";
    pub const HEAD_ORACLE: &str = "head_oracle";
}

/// Stacked sequences of one batch. Rows `[b·T, (b+1)·T)` belong to sample `b`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_src: Tensor,
    pub x_tgt: Option<Tensor>,
    pub labels: Vec<usize>,
    pub steps: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Batch-mean loss values; `save` and `bridge` are already divided by `T`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub save: f64,
    pub bridge: f64,
    pub task: f64,
    pub total: f64,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub f_src: Var,
    pub f_tgt: Option<Var>,
    pub bridge: Option<tape::BridgeVars>,
    pub logits_recall: Var,
    pub logits_oracle: Option<Var>,
    pub save: Option<Var>,
    pub bridge_loss: Option<Var>,
    pub task: Var,
    pub total: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
}

/// Parameters bound into one graph, one `Var` per store entry.
pub struct Bound {
    pub vars: Vec<Var>,
    src: EncoderVars,
    tgt: Option<EncoderVars>,
    key: Option<Var>,
    value: Option<Var>,
    head: HeadVars,
    head_oracle: Option<HeadVars>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let src = EncoderParams::init(arch.source_input, arch.hidden, arch.source_features, rng);
        let mut named = src.named(names::SRC);
        if arch.has_memory() {
            let tgt = EncoderParams::init(arch.target_input, arch.hidden, arch.target_features, rng);
            named.extend(tgt.named(names::TGT));
            named.push((names::KEY.into(), unit_rows(arch.slots, arch.source_features, rng)));
            named.push((names::VALUE.into(), unit_rows(arch.slots, arch.target_features, rng)));
            let head_in = arch.source_features + arch.target_features;
            let head = HeadParams::init(head_in, arch.fused, arch.classes, rng);
            named.extend(head.named(names::HEAD));
            if !arch.share_head {
                let oracle = HeadParams::init(head_in, arch.fused, arch.classes, rng);
                named.extend(oracle.named(names::HEAD_ORACLE));
            }
        } else {
            let head = HeadParams::init(arch.source_features, arch.fused, arch.classes, rng);
            named.extend(head.named(names::HEAD));
        }
        Ok(Self {
            arch,
            store: ParamStore::new(named)?,
        })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes.
    pub fn from_store(arch: Architecture, store: ParamStore) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::init(arch, &mut rng)?;
        if template.store.len() != store.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                template.store.len(),
                store.len()
            )));
        }
        for (t, p) in template.store.iter().zip(store.iter()) {
            if t.name != p.name || !t.value.same_shape(&p.value) {
                return Err(Error::Incompatible(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        Ok(Self {
            arch: template.arch,
            store,
        })
    }

    /// Pulls the encoder weights named `prefix.*` out of the store.
    pub fn encoder(&self, prefix: &str) -> Option<EncoderParams> {
        let get = |s: &str| self.store.get(&format!("{prefix}.{s}")).cloned();
        Some(EncoderParams {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            activation: Activation::Tanh,
        })
    }

    pub fn head(&self, prefix: &str) -> Option<HeadParams> {
        let get = |s: &str| self.store.get(&format!("{prefix}.{s}")).cloned();
        Some(HeadParams {
            fuse_w: get("fuse_w")?,
            fuse_b: get("fuse_b")?,
            cls_w: get("cls_w")?,
            cls_b: get("cls_b")?,
        })
    }

    /// Binds every parameter into `g`, as differentiable inputs when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .store
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let v = |name: &str| self.store.index_of(name).map(|i| vars[i]);
        let enc = |prefix: &str| -> Option<EncoderVars> {
            Some(EncoderVars {
                w1: v(&format!("{prefix}.w1"))?,
                b1: v(&format!("{prefix}.b1"))?,
                w2: v(&format!("{prefix}.w2"))?,
                b2: v(&format!("{prefix}.b2"))?,
                activation: Activation::Tanh,
            })
        };
        let head = |prefix: &str| -> Option<HeadVars> {
            Some(HeadVars {
                fuse_w: v(&format!("{prefix}.fuse_w"))?,
                fuse_b: v(&format!("{prefix}.fuse_b"))?,
                cls_w: v(&format!("{prefix}.cls_w"))?,
                cls_b: v(&format!("{prefix}.cls_b"))?,
            })
        };
        Bound {
            src: enc(names::SRC).expect("source encoder is always present"),
            tgt: enc(names::TGT),
            key: v(names::KEY),
            value: v(names::VALUE),
            head: head(names::HEAD).expect("head is always present"),
            head_oracle: head(names::HEAD_ORACLE),
            vars,
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let t = batch.steps;
        if t == 0 || batch.is_empty() {
            return Err(Error::dim("forward", "non-empty batch with T >= 1", 0));
        }
        if batch.x_src.rows() != t * batch.len() {
            return Err(Error::dim("forward", t * batch.len(), batch.x_src.rows()));
        }
        if let Some(xt) = &batch.x_tgt {
            if xt.rows() != batch.x_src.rows() {
                return Err(Error::Alignment {
                    source_len: batch.x_src.rows(),
                    target_len: xt.rows(),
                });
            }
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.arch.classes) {
            return Err(Error::domain(
                "forward",
                format!("label {y} out of range for {} classes", self.arch.classes),
            ));
        }
        Ok(())
    }

    /// Records the complete training loss for `batch`. With memory enabled
    /// the batch must carry target inputs.
    pub fn forward(&self, g: &mut Graph, b: &Bound, batch: &Batch, flow: GradientFlow) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let t = batch.steps;
        let n = batch.len() as f64;
        let xs = g.constant(batch.x_src.clone());
        let f_src = encode_on(g, xs, &b.src)?;

        if !self.arch.has_memory() {
            let fused = fuse_on(g, f_src, None, &b.head)?;
            let logits = classify_on(g, fused, t, &b.head)?;
            let ce = g.cross_entropy(logits, &batch.labels)?;
            let task = g.scale(ce, 1.0 / n);
            return Ok(ForwardVars {
                f_src,
                f_tgt: None,
                bridge: None,
                logits_recall: logits,
                logits_oracle: None,
                save: None,
                bridge_loss: None,
                task,
                total: task,
            });
        }

        let x_tgt = batch
            .x_tgt
            .as_ref()
            .ok_or_else(|| Error::Config("training with memory needs target inputs".into()))?;
        let xt = g.constant(x_tgt.clone());
        let tgt_enc = b.tgt.as_ref().expect("memory models have a target encoder");
        let f_tgt = encode_on(g, xt, tgt_enc)?;
        let (key, value) = (b.key.expect("key memory"), b.value.expect("value memory"));
        let br = tape::bridge(g, f_src, Some(f_tgt), key, value, self.arch.scale)?;

        let save_ref = if flow.detach_save_target { g.detach(f_tgt) } else { f_tgt };
        let save = tape::saving_loss(g, save_ref, br.reconstructed.expect("target given"))?;
        let bridge = tape::bridging_loss(g, br.a_tgt.expect("target given"), br.a_src, flow.detach_target)?;

        let fused_r = fuse_on(g, f_src, Some(br.recalled), &b.head)?;
        let logits_r = classify_on(g, fused_r, t, &b.head)?;
        let oracle_head = b.head_oracle.as_ref().unwrap_or(&b.head);
        let fused_o = fuse_on(g, f_src, Some(f_tgt), oracle_head)?;
        let logits_o = classify_on(g, fused_o, t, oracle_head)?;
        let ce_r = g.cross_entropy(logits_r, &batch.labels)?;
        let ce_o = g.cross_entropy(logits_o, &batch.labels)?;
        let task = g.add(ce_r, ce_o)?;
        let task = g.scale(task, 1.0 / n);

        // L_save / T + L_bridge / T + L_task, averaged over the batch
        let per_step = 1.0 / (t as f64 * n);
        let save_n = g.scale(save, per_step);
        let bridge_n = g.scale(bridge, per_step);
        let total = g.add(save_n, bridge_n)?;
        let total = g.add(total, task)?;
        Ok(ForwardVars {
            f_src,
            f_tgt: Some(f_tgt),
            bridge: Some(br),
            logits_recall: logits_r,
            logits_oracle: Some(logits_o),
            save: Some(save_n),
            bridge_loss: Some(bridge_n),
            task,
            total,
        })
    }

    pub fn loss_terms(g: &Graph, fv: &ForwardVars) -> LossTerms {
        LossTerms {
            save: fv.save.map_or(0.0, |v| g.value(v).item()),
            bridge: fv.bridge_loss.map_or(0.0, |v| g.value(v).item()),
            task: g.value(fv.task).item(),
            total: g.value(fv.total).item(),
        }
    }

    /// Forward and backward on one batch; gradients land in the store.
    pub fn accumulate_gradients(&mut self, batch: &Batch, flow: GradientFlow) -> Result<LossTerms> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let fv = self.forward(&mut g, &bound, batch, flow)?;
        let terms = Self::loss_terms(&g, &fv);
        let mut grads = g.backward(fv.total)?;
        for (i, &v) in bound.vars.iter().enumerate() {
            self.store.param_mut(i).grad = grads.take(v);
        }
        Ok(terms)
    }

    fn encode_source_seq(&self, g: &mut Graph, b: &Bound, x_src: &Tensor) -> Result<Var> {
        let xs = g.constant(x_src.clone());
        encode_on(g, xs, &b.src)
    }

    /// Source addressing (`T×N`) for one sequence.
    pub fn source_addressing(&self, x_src: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let key = b.key.ok_or_else(|| Error::Config("model has no memory".into()))?;
        let f_src = self.encode_source_seq(&mut g, &b, x_src)?;
        let a = tape::address(&mut g, key, f_src, self.arch.scale)?;
        Ok(g.value(a).clone())
    }

    /// Logits from the source sequence alone, fused with recalled target
    /// features. Takes no target input by construction.
    pub fn logits_recall(&self, x_src: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits_recall_batch(x_src, x_src.rows())?.into_data())
    }

    /// Batched [`Model::logits_recall`] over stacked sequences of `steps`
    /// rows each; returns `B × K`.
    pub fn logits_recall_batch(&self, x_src: &Tensor, steps: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (key, value) = match (b.key, b.value) {
            (Some(k), Some(v)) => (k, v),
            _ => return Err(Error::Config("recall mode needs a model with memory".into())),
        };
        let f_src = self.encode_source_seq(&mut g, &b, x_src)?;
        let br = tape::bridge(&mut g, f_src, None, key, value, self.arch.scale)?;
        let fused = fuse_on(&mut g, f_src, Some(br.recalled), &b.head)?;
        let logits = classify_on(&mut g, fused, steps, &b.head)?;
        Ok(g.value(logits).clone())
    }

    /// Logits from the source sequence fused with the true target features.
    pub fn logits_oracle(&self, x_src: &Tensor, x_tgt: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits_oracle_batch(x_src, x_tgt, x_src.rows())?.into_data())
    }

    pub fn logits_oracle_batch(&self, x_src: &Tensor, x_tgt: &Tensor, steps: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let tgt = b
            .tgt
            .ok_or_else(|| Error::Config("oracle mode needs a model with memory".into()))?;
        if x_tgt.rows() != x_src.rows() {
            return Err(Error::Alignment {
                source_len: x_src.rows(),
                target_len: x_tgt.rows(),
            });
        }
        let f_src = self.encode_source_seq(&mut g, &b, x_src)?;
        let xt = g.constant(x_tgt.clone());
        let f_tgt = encode_on(&mut g, xt, &tgt)?;
        let head = b.head_oracle.as_ref().unwrap_or(&b.head);
        let fused = fuse_on(&mut g, f_src, Some(f_tgt), head)?;
        let logits = classify_on(&mut g, fused, steps, head)?;
        Ok(g.value(logits).clone())
    }

    /// Logits of the memory-free model.
    pub fn logits_baseline(&self, x_src: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits_baseline_batch(x_src, x_src.rows())?.into_data())
    }

    pub fn logits_baseline_batch(&self, x_src: &Tensor, steps: usize) -> Result<Tensor> {
        if self.arch.has_memory() {
            return Err(Error::Config("baseline mode needs a model with zero slots".into()));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f_src = self.encode_source_seq(&mut g, &b, x_src)?;
        let fused = fuse_on(&mut g, f_src, None, &b.head)?;
        let logits = classify_on(&mut g, fused, steps, &b.head)?;
        Ok(g.value(logits).clone())
    }

    /// Everything the bridge produces for one paired sequence, target
    /// features included.
    pub fn bridge_paired(&self, x_src: &Tensor, x_tgt: &Tensor) -> Result<PairedBridge> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (tgt, key, value) = match (b.tgt, b.key, b.value) {
            (Some(t), Some(k), Some(v)) => (t, k, v),
            _ => return Err(Error::Config("model has no memory".into())),
        };
        let f_src = self.encode_source_seq(&mut g, &b, x_src)?;
        let xt = g.constant(x_tgt.clone());
        let f_tgt = encode_on(&mut g, xt, &tgt)?;
        let br = tape::bridge(&mut g, f_src, Some(f_tgt), key, value, self.arch.scale)?;
        let bridge = tape::bridging_loss(&mut g, br.a_tgt.expect("target given"), br.a_src, true)?;
        Ok(PairedBridge {
            f_tgt: g.value(f_tgt).clone(),
            recalled: g.value(br.recalled).clone(),
            a_src: g.value(br.a_src).clone(),
            a_tgt: g.value(br.a_tgt.expect("target given")).clone(),
            bridge_loss: g.value(bridge).item(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PairedBridge {
    pub f_tgt: Tensor,
    pub recalled: Tensor,
    pub a_src: Tensor,
    pub a_tgt: Tensor,
    /// Summed over steps.
    pub bridge_loss: f64,
}



#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn arch(slots: usize) -> Architecture {
        Architecture {
            source_input: 4,
            target_input: 3,
            hidden: 5,
            source_features: 3,
            target_features: 2,
            fused: 4,
            classes: 3,
            slots,
            scale: 4.0,
            share_head: true,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, b: usize, t: usize) -> Batch {
        Batch {
            x_src: Tensor::randn(b * t, 4, 1.0, rng),
            x_tgt: Some(Tensor::randn(b * t, 3, 1.0, rng)),
            labels: (0..b).map(|i| i % 3).collect(),
            steps: t,
        }
    }

    #[test]
    fn parameter_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(arch(6), &mut rng).unwrap();
        assert_eq!(m.store.len(), 4 + 4 + 2 + 4);
        let mut unshared = arch(6);
        unshared.share_head = false;
        assert_eq!(Model::init(unshared, &mut rng).unwrap().store.len(), 18);
        let base = Model::init(arch(0), &mut rng).unwrap();
        assert_eq!(base.store.len(), 8);
        assert!(base.store.get(names::KEY).is_none());
    }

    #[test]
    fn batched_forward_matches_single_sample_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(arch(6), &mut rng).unwrap();
        let full = batch(&mut rng, 3, 4);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let fv = m.forward(&mut g, &b, &full, GradientFlow::default()).unwrap();
        let all = Model::loss_terms(&g, &fv);

        let mut acc = LossTerms::default();
        for i in 0..3 {
            let rows = |t: &Tensor| {
                Tensor::from_rows(&(i * 4..(i + 1) * 4).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()).unwrap()
            };
            let one = Batch {
                x_src: rows(&full.x_src),
                x_tgt: Some(rows(full.x_tgt.as_ref().unwrap())),
                labels: vec![full.labels[i]],
                steps: 4,
            };
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let fv = m.forward(&mut g, &b, &one, GradientFlow::default()).unwrap();
            let t = Model::loss_terms(&g, &fv);
            acc.save += t.save / 3.0;
            acc.bridge += t.bridge / 3.0;
            acc.task += t.task / 3.0;
            acc.total += t.total / 3.0;

            let lr = m.logits_recall(&one.x_src).unwrap();
            let lo = m.logits_oracle(&one.x_src, one.x_tgt.as_ref().unwrap()).unwrap();
            let task = crate::head::task_loss(&lr, &lo, one.labels[0]).unwrap();
            assert!((task - t.task).abs() < 1e-12);
        }
        for (a, b) in [(all.save, acc.save), (all.bridge, acc.bridge), (all.task, acc.task), (all.total, acc.total)] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn from_store_rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::init(arch(6), &mut rng).unwrap();
        assert!(Model::from_store(arch(6), m.store.clone()).is_ok());
        assert!(matches!(
            Model::from_store(arch(7), m.store.clone()),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn inference_mode_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Model::init(arch(0), &mut rng).unwrap();
        let x = Tensor::randn(4, 4, 1.0, &mut rng);
        assert!(base.logits_baseline(&x).is_ok());
        assert!(base.logits_recall(&x).is_err());
        let mem = Model::init(arch(5), &mut rng).unwrap();
        assert!(mem.logits_baseline(&x).is_err());
        assert_eq!(mem.logits_recall(&x).unwrap().len(), 3);
    }
}
