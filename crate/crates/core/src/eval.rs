//! Test-set metrics, the addressing-similarity probe and slot-count
//! ablations.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairedSource};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::NORM_EPS;
use crate::tensor::{norm, Tensor};
use crate::trainer::{make_batch, train, TrainConfig};

/// Samples per evaluation graph.
const EVAL_CHUNK: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Source input only, fused with recalled target features.
    Recall,
    /// Source fused with true target features; also reports recall metrics.
    Oracle,
    /// Memory-free model, source input only.
    Baseline,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Recall => "recall",
            EvalMode::Oracle => "oracle",
            EvalMode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Self::Recall),
            "oracle" => Ok(Self::Oracle),
            "baseline" => Ok(Self::Baseline),
            _ => Err(Error::Config(format!("unknown mode `{s}` (recall, oracle, baseline)"))),
        }
    }
}

/// Metrics of one evaluation. Fields a mode cannot compute are `None`:
/// recall mode never sees target data, so only its accuracy is reported.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub samples: usize,
    pub accuracy_recall: Option<f64>,
    pub accuracy_oracle: Option<f64>,
    pub accuracy_baseline: Option<f64>,
    /// Mean over test steps of `‖v − f_tgt‖² / ‖f_tgt‖²`.
    pub recall_fidelity: Option<f64>,
    /// The same quantity with uniform addressing over the value memory.
    pub random_addressing_fidelity: Option<f64>,
    /// Per step, averaged over the test set.
    pub mean_bridge_loss: Option<f64>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count()
}

fn relative_error(v: &[f64], f: &[f64]) -> f64 {
    let diff: f64 = v.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    diff / norm(f).powi(2).max(NORM_EPS * NORM_EPS)
}

/// Evaluates `model` over all of `data` in `mode`.
pub fn evaluate<S: PairedSource + ?Sized>(model: &Model, data: &S, mode: EvalMode) -> Result<EvalReport> {
    match (mode, model.arch.has_memory()) {
        (EvalMode::Baseline, true) => {
            return Err(Error::Config("baseline mode needs a model with zero slots".into()));
        }
        (EvalMode::Recall | EvalMode::Oracle, false) => {
            return Err(Error::Config(format!("{} mode needs a model with memory", mode.name())));
        }
        _ => {}
    }
    let mut report = EvalReport {
        mode,
        samples: data.len(),
        accuracy_recall: None,
        accuracy_oracle: None,
        accuracy_baseline: None,
        recall_fidelity: None,
        random_addressing_fidelity: None,
        mean_bridge_loss: None,
    };
    if data.is_empty() {
        return Ok(report);
    }
    let uniform_read: Option<Vec<f64>> = model.store.get(crate::model::names::VALUE).map(|v| {
        let n = v.rows() as f64;
        (0..v.cols()).map(|j| (0..v.rows()).map(|i| v.get(i, j)).sum::<f64>() / n).collect()
    });

    let (mut recall_ok, mut oracle_ok, mut base_ok) = (0usize, 0usize, 0usize);
    let (mut fid, mut fid_uniform, mut bridge, mut steps) = (0.0, 0.0, 0.0, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = make_batch(data, chunk, mode == EvalMode::Oracle)?;
        let t = batch.steps;
        match mode {
            EvalMode::Baseline => {
                base_ok += count_correct(&model.logits_baseline_batch(&batch.x_src, t)?, &batch.labels);
            }
            EvalMode::Recall => {
                recall_ok += count_correct(&model.logits_recall_batch(&batch.x_src, t)?, &batch.labels);
            }
            EvalMode::Oracle => {
                let x_tgt = batch.x_tgt.as_ref().expect("oracle batches carry targets");
                recall_ok += count_correct(&model.logits_recall_batch(&batch.x_src, t)?, &batch.labels);
                oracle_ok += count_correct(&model.logits_oracle_batch(&batch.x_src, x_tgt, t)?, &batch.labels);
                let pb = model.bridge_paired(&batch.x_src, x_tgt)?;
                let u = uniform_read.as_ref().expect("memory models have a value memory");
                for j in 0..pb.f_tgt.rows() {
                    fid += relative_error(pb.recalled.row(j), pb.f_tgt.row(j));
                    fid_uniform += relative_error(u, pb.f_tgt.row(j));
                }
                bridge += pb.bridge_loss;
                steps += pb.f_tgt.rows();
            }
        }
    }
    let n = data.len() as f64;
    match mode {
        EvalMode::Baseline => report.accuracy_baseline = Some(base_ok as f64 / n),
        EvalMode::Recall => report.accuracy_recall = Some(recall_ok as f64 / n),
        EvalMode::Oracle => {
            let s = steps as f64;
            report.accuracy_recall = Some(recall_ok as f64 / n);
            report.accuracy_oracle = Some(oracle_ok as f64 / n);
            report.recall_fidelity = Some(fid / s);
            report.random_addressing_fidelity = Some(fid_uniform / s);
            report.mean_bridge_loss = Some(bridge / s);
        }
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

const REPORT_FIELDS: [&str; 6] = [
    "accuracy_recall",
    "accuracy_oracle",
    "accuracy_baseline",
    "recall_fidelity",
    "random_addressing_fidelity",
    "mean_bridge_loss",
];

impl EvalReport {
    fn values(&self) -> [Option<f64>; 6] {
        [
            self.accuracy_recall,
            self.accuracy_oracle,
            self.accuracy_baseline,
            self.recall_fidelity,
            self.random_addressing_fidelity,
            self.mean_bridge_loss,
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("mode: {}\nsamples: {}\n", self.mode.name(), self.samples);
        for (k, v) in REPORT_FIELDS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k:<28}{}", fmt_opt(v));
        }
        s
    }

    pub fn csv_header() -> String {
        format!("mode,samples,{}", REPORT_FIELDS.join(","))
    }

    /// Full-precision CSV row; empty cells for metrics the mode lacks.
    pub fn csv_row(&self) -> String {
        let cells: Vec<String> = self
            .values()
            .iter()
            .map(|v| v.map_or_else(String::new, |x| x.to_string()))
            .collect();
        format!("{},{},{}", self.mode.name(), self.samples, cells.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSimilarity {
    pub first: usize,
    pub second: usize,
    pub first_class: usize,
    pub second_class: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub same_class_mean: f64,
    pub cross_class_mean: f64,
    pub same_class_pairs: usize,
    pub cross_class_pairs: usize,
    /// Classes left out for having fewer than two probe samples.
    pub skipped_classes: Vec<usize>,
    pub pairs: Vec<PairSimilarity>,
}

pub const SIMILARITY_NOTE: &str = "pair similarity = cosine of source addressing vectors at each aligned step, averaged over steps";

/// Cosine of step-aligned addressing rows, averaged over steps.
pub fn sequence_similarity(a: &Tensor, b: &Tensor) -> f64 {
    let t = a.rows().min(b.rows());
    let sum: f64 = (0..t)
        .map(|j| crate::numeric::cosine_similarity(a.row(j), b.row(j)).unwrap_or(0.0))
        .sum();
    sum / t.max(1) as f64
}

/// Compares source addressing across every pair of probe samples, using at
/// most `per_class` samples of each class (all when `None`).
pub fn addressing_similarity<S: PairedSource + ?Sized>(
    model: &Model,
    probe: &S,
    per_class: Option<usize>,
) -> Result<SimilarityReport> {
    let classes = model.arch.classes;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..probe.len() {
        let y = probe.label(i);
        if y >= classes {
            return Err(Error::domain("addressing_similarity", format!("label {y} out of range")));
        }
        if per_class.is_none_or(|cap| members[y].len() < cap) {
            members[y].push(i);
        }
    }
    let mut skipped = Vec::new();
    for (c, m) in members.iter_mut().enumerate() {
        if m.len() == 1 {
            warn!("class {c} has a single probe sample; skipped");
            skipped.push(c);
            m.clear();
        }
    }
    let chosen: Vec<usize> = members.concat();
    let addressing: Vec<Tensor> = chosen
        .iter()
        .map(|&i| model.source_addressing(probe.source(i)))
        .collect::<Result<_>>()?;

    let mut pairs = Vec::new();
    let (mut same, mut cross, mut ns, mut nc) = (0.0, 0.0, 0usize, 0usize);
    for a in 0..chosen.len() {
        for b in a + 1..chosen.len() {
            let (ia, ib) = (chosen[a], chosen[b]);
            let sim = sequence_similarity(&addressing[a], &addressing[b]);
            let (ca, cb) = (probe.label(ia), probe.label(ib));
            if ca == cb {
                same += sim;
                ns += 1;
            } else {
                cross += sim;
                nc += 1;
            }
            pairs.push(PairSimilarity {
                first: ia,
                second: ib,
                first_class: ca,
                second_class: cb,
                similarity: sim,
            });
        }
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { f64::NAN };
    Ok(SimilarityReport {
        same_class_mean: mean(same, ns),
        cross_class_mean: mean(cross, nc),
        same_class_pairs: ns,
        cross_class_pairs: nc,
        skipped_classes: skipped,
        pairs,
    })
}

impl SimilarityReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("# {SIMILARITY_NOTE}\n");
        let _ = writeln!(s, "same_class_mean   {:.6} ({} pairs)", self.same_class_mean, self.same_class_pairs);
        let _ = writeln!(s, "cross_class_mean  {:.6} ({} pairs)", self.cross_class_mean, self.cross_class_pairs);
        let _ = writeln!(s, "gap               {:.6}", self.same_class_mean - self.cross_class_mean);
        if !self.skipped_classes.is_empty() {
            let _ = writeln!(s, "skipped classes   {:?}", self.skipped_classes);
        }
        s
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("first,second,first_class,second_class,similarity\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{},{},{}", p.first, p.second, p.first_class, p.second_class, p.similarity);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub slots: usize,
    pub seed: u64,
    pub report: EvalReport,
}

impl AblationRow {
    /// Recall accuracy for memory models, baseline accuracy for `N = 0`.
    pub fn accuracy(&self) -> f64 {
        self.report
            .accuracy_recall
            .or(self.report.accuracy_baseline)
            .expect("ablation rows carry an accuracy")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Seed-mean accuracy per distinct slot count, in first-seen order.
    pub fn summary(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(n, _, _)| *n == r.slots) {
                Some(e) => {
                    e.1 += r.accuracy();
                    e.2 += 1;
                }
                None => out.push((r.slots, r.accuracy(), 1)),
            }
        }
        out.into_iter().map(|(n, s, c)| (n, s / c as f64)).collect()
    }

    pub fn mean_accuracy(&self, slots: usize) -> Option<f64> {
        self.summary().into_iter().find(|&(n, _)| n == slots).map(|(_, a)| a)
    }

    pub fn to_text(&self) -> String {
        let base = self.mean_accuracy(0);
        let mut s = format!("{:>6}  {:>10}  {:>12}\n", "slots", "accuracy", "vs_baseline");
        for (n, acc) in self.summary() {
            let delta = base.map_or_else(|| "-".into(), |b| format!("{:+.4}", acc - b + 0.0));
            let _ = writeln!(s, "{n:>6}  {acc:>10.4}  {delta:>12}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("slots,seed,{}\n", EvalReport::csv_header());
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.slots, r.seed, r.report.csv_row());
        }
        s
    }
}

/// Trains one model per `(slots, seed)` from `base` and evaluates it on
/// `test_set`: recall mode for `N > 0`, baseline mode for `N = 0`.
pub fn ablate_slots(
    base: &TrainConfig,
    slots: &[usize],
    seeds: &[u64],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<AblationTable> {
    if !slots.contains(&0) {
        return Err(Error::Config("slot list must include 0 (the baseline)".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &n in slots {
        for &seed in seeds {
            let cfg = TrainConfig {
                slots: n,
                seed,
                eval_every: 0,
                ..base.clone()
            };
            let annotate = |e: Error| Error::Ablation {
                slots: n,
                seed,
                source: Box::new(e),
            };
            let out = train(&cfg, train_set, test_set).map_err(annotate)?;
            let mode = if n == 0 { EvalMode::Baseline } else { EvalMode::Recall };
            let report = evaluate(&out.model, test_set, mode).map_err(annotate)?;
            rows.push(AblationRow { slots: n, seed, report });
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, CountingSource, DatasetSpec};

    fn tiny() -> (Dataset, Dataset, TrainConfig) {
        let spec = DatasetSpec {
            num_classes: 4,
            seq_len: 3,
            train_per_class: 6,
            test_per_class: 5,
            seed: 9,
            ..DatasetSpec::default()
        };
        let (tr, te) = generate_dataset(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            slots: 5,
            hidden: 6,
            source_features: 4,
            target_features: 4,
            fused: 5,
            eval_every: 0,
            ..TrainConfig::default()
        };
        (tr, te, cfg)
    }

    #[test]
    fn mode_mismatch_is_a_configuration_error() {
        let (tr, te, cfg) = tiny();
        let with_memory = cfg.init_model(&tr.spec).unwrap();
        let without = TrainConfig { slots: 0, ..cfg }.init_model(&tr.spec).unwrap();
        assert!(matches!(evaluate(&with_memory, &te, EvalMode::Baseline), Err(Error::Config(_))));
        assert!(matches!(evaluate(&without, &te, EvalMode::Recall), Err(Error::Config(_))));
        assert!(matches!(evaluate(&without, &te, EvalMode::Oracle), Err(Error::Config(_))));
    }

    #[test]
    fn recall_mode_reads_no_target() {
        let (tr, te, cfg) = tiny();
        let model = cfg.init_model(&tr.spec).unwrap();
        let counted = CountingSource::new(&te);
        let r = evaluate(&model, &counted, EvalMode::Recall).unwrap();
        assert_eq!(counted.target_reads(), 0);
        assert!(r.recall_fidelity.is_none());
        let zeroed = te.with_zeroed_targets();
        assert_eq!(evaluate(&model, &zeroed, EvalMode::Recall).unwrap().csv_row(), r.csv_row());

        let counted = CountingSource::new(&te);
        evaluate(&model, &counted, EvalMode::Oracle).unwrap();
        assert_eq!(counted.target_reads(), te.len());
    }

    #[test]
    fn oracle_report_is_complete_and_deterministic() {
        let (tr, te, cfg) = tiny();
        let model = cfg.init_model(&tr.spec).unwrap();
        let a = evaluate(&model, &te, EvalMode::Oracle).unwrap();
        let b = evaluate(&model, &te, EvalMode::Oracle).unwrap();
        assert_eq!(a, b);
        for v in [a.accuracy_recall, a.accuracy_oracle] {
            assert!((0.0..=1.0).contains(&v.unwrap()));
        }
        assert!(a.recall_fidelity.unwrap() >= 0.0);
        assert!(a.random_addressing_fidelity.unwrap() >= 0.0);
        assert!(a.mean_bridge_loss.unwrap() >= -1e-9);
        assert!(a.to_text().contains("accuracy_oracle"));
    }

    #[test]
    fn fidelity_matches_direct_computation() {
        let (tr, te, cfg) = tiny();
        let model = cfg.init_model(&tr.spec).unwrap();
        let r = evaluate(&model, &te, EvalMode::Oracle).unwrap();
        let value = model.store.get("memory.value").unwrap();
        let (mut fid, mut uni, mut n) = (0.0, 0.0, 0.0);
        for s in &te.samples {
            let pb = model.bridge_paired(&s.x_src, &s.x_tgt).unwrap();
            for j in 0..pb.f_tgt.rows() {
                let f = pb.f_tgt.row(j);
                let fn2: f64 = f.iter().map(|x| x * x).sum();
                let d: f64 = pb.recalled.row(j).iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum();
                fid += d / fn2;
                let mut du = 0.0;
                for (c, fc) in f.iter().enumerate() {
                    let mean: f64 = (0..value.rows()).map(|i| value.get(i, c)).sum::<f64>() / value.rows() as f64;
                    du += (mean - fc).powi(2);
                }
                uni += du / fn2;
                n += 1.0;
            }
        }
        assert!((r.recall_fidelity.unwrap() - fid / n).abs() < 1e-12);
        assert!((r.random_addressing_fidelity.unwrap() - uni / n).abs() < 1e-12);
    }

    #[test]
    fn fidelity_is_invariant_to_query_rescaling() {
        // scaling the source encoder's output layer rescales every query
        let (tr, te, cfg) = tiny();
        let model = cfg.init_model(&tr.spec).unwrap();
        let mut scaled = model.clone();
        for name in ["enc_src.w2", "enc_src.b2"] {
            let v = scaled.store.get(name).unwrap().scale(3.5);
            scaled.store.set(name, v).unwrap();
        }
        let a = evaluate(&model, &te, EvalMode::Oracle).unwrap().recall_fidelity.unwrap();
        let b = evaluate(&scaled, &te, EvalMode::Oracle).unwrap().recall_fidelity.unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn zero_bridge_loss_makes_recall_equal_oracle() {
        let (tr, te, cfg) = tiny();
        let mut model = cfg.init_model(&tr.spec).unwrap();
        let (n, c, d) = (5, 4, 4);
        // constant target features u stored in every value slot; identical keys
        let u = Tensor::row_vector(vec![0.3, -0.2, 0.5, 0.1]);
        model.store.set("enc_tgt.w1", Tensor::zeros(tr.spec.target_dim, 6)).unwrap();
        model.store.set("enc_tgt.w2", Tensor::zeros(6, d)).unwrap();
        model.store.set("enc_tgt.b2", u.clone()).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| u.data().to_vec()).collect();
        model.store.set("memory.value", Tensor::from_rows(&rows).unwrap()).unwrap();
        let keys: Vec<Vec<f64>> = (0..n).map(|_| vec![0.5; c]).collect();
        model.store.set("memory.key", Tensor::from_rows(&keys).unwrap()).unwrap();
        let r = evaluate(&model, &te, EvalMode::Oracle).unwrap();
        assert!(r.mean_bridge_loss.unwrap().abs() < 1e-15);
        assert_eq!(r.accuracy_recall, r.accuracy_oracle);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let spec = DatasetSpec {
            train_per_class: 1,
            test_per_class: 20,
            ..DatasetSpec::default()
        };
        let (tr, te) = generate_dataset(&spec).unwrap();
        let model = TrainConfig::default().init_model(&tr.spec).unwrap();
        let acc = evaluate(&model, &te, EvalMode::Recall).unwrap().accuracy_recall.unwrap();
        let n = te.len() as f64;
        let p = 1.0 / spec.num_classes as f64;
        let sd = (p * (1.0 - p) / n).sqrt();
        assert!((acc - p).abs() <= 3.0 * sd, "accuracy {acc}");
    }

    #[test]
    fn similarity_of_a_sample_with_itself_is_one() {
        let (tr, te, cfg) = tiny();
        let model = cfg.init_model(&tr.spec).unwrap();
        let a = model.source_addressing(&te.samples[0].x_src).unwrap();
        assert!((sequence_similarity(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_slot_similarities_are_one() {
        let (tr, te, cfg) = tiny();
        let model = TrainConfig { slots: 1, ..cfg }.init_model(&tr.spec).unwrap();
        let r = addressing_similarity(&model, &te, None).unwrap();
        assert!(r.pairs.iter().all(|p| (p.similarity - 1.0).abs() < 1e-12));
        assert_eq!(r.same_class_pairs, 4 * 10);
    }

    #[test]
    fn classes_with_one_probe_sample_are_skipped() {
        let (tr, te, cfg) = tiny();
        let model = cfg.init_model(&tr.spec).unwrap();
        let r = addressing_similarity(&model, &te, Some(1)).unwrap();
        assert_eq!(r.skipped_classes, vec![0, 1, 2, 3]);
        assert!(r.pairs.is_empty());
        let r = addressing_similarity(&model, &te, Some(2)).unwrap();
        assert_eq!((r.same_class_pairs, r.cross_class_pairs), (4, 24));
        assert!(r.pairs.iter().all(|p| (-1.0..=1.0 + 1e-12).contains(&p.similarity)));
    }

    #[test]
    fn ablation_contracts() {
        let (tr, te, cfg) = tiny();
        assert!(matches!(ablate_slots(&cfg, &[4], &[1], &tr, &te), Err(Error::Config(_))));
        let only_base = ablate_slots(&cfg, &[0], &[1], &tr, &te).unwrap();
        assert_eq!(only_base.rows.len(), 1);
        assert!(only_base.rows[0].report.accuracy_baseline.is_some());
        let dup = ablate_slots(&cfg, &[0, 3, 3], &[2], &tr, &te).unwrap();
        assert_eq!(dup.rows[1].report, dup.rows[2].report);
        assert_eq!(dup.summary().len(), 2);
        assert!(dup.to_csv().lines().count() == 4);
    }

    #[test]
    fn ablation_errors_name_the_run() {
        let (tr, te, cfg) = tiny();
        let bad = TrainConfig { scale: -1.0, ..cfg };
        match ablate_slots(&bad, &[0, 4], &[7], &tr, &te) {
            Err(Error::Ablation { slots, seed, .. }) => assert_eq!((slots, seed), (0, 7)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
