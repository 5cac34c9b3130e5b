//! Label matching, classification metrics, and the evaluation, retrieval,
//! forgetting, efficiency and heatmap reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, FullFinetuneModel, GenerationResult, TrainConfig};
use crate::error::{Error, Result};
use crate::storage::AdaptorStore;
use crate::tasks::{make_prompt, organ_only_prompt, task_only_prompt, Dataset, Level, Split, TaskSpec};
use crate::vocab::normalize;

/// Index of the label equal to `generated` after normalization; `None` is unparseable.
pub fn match_label(generated: &str, labels: &[String]) -> Option<usize> {
    let g = normalize(generated);
    labels.iter().position(|l| normalize(l) == g)
}

/// Rows are ground truth; the last column counts unparseable outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![vec![0; n_classes + 1]; n_classes],
        }
    }

    /// Square matrix without unparseable outputs.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        let mut cm = ConfusionMatrix::new(c);
        for (i, r) in rows.iter().enumerate() {
            cm.counts[i][..c].copy_from_slice(r);
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn record(&mut self, truth: usize, predicted: Option<usize>) {
        let col = predicted.unwrap_or(self.n_classes);
        self.counts[truth][col] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn unparseable(&self, truth: usize) -> u64 {
        self.counts[truth][self.n_classes]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.n_classes).map(|i| self.row_total(i)).sum()
    }

    fn column_total(&self, predicted: usize) -> u64 {
        (0..self.n_classes).map(|i| self.counts[i][predicted]).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    (0..cm.n_classes()).map(|i| cm.get(i, i)).sum::<u64>() as f64 / total as f64
}

/// Accuracy over ground-truth rows in `cancer_classes`; `None` without such samples.
pub fn cancer_accuracy(cm: &ConfusionMatrix, cancer_classes: &[usize]) -> Option<f64> {
    let denom: u64 = cancer_classes.iter().map(|&c| cm.row_total(c)).sum();
    if denom == 0 {
        return None;
    }
    let correct: u64 = cancer_classes.iter().map(|&c| cm.get(c, c)).sum();
    Some(correct as f64 / denom as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro averages over classes present in the ground truth. A class with
/// no predictions has precision 0; F1 is 0 when precision + recall is 0.
pub fn macro_precision_recall_f1(cm: &ConfusionMatrix) -> MacroScores {
    let (mut p, mut r, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..cm.n_classes() {
        let support = cm.row_total(c);
        if support == 0 {
            continue;
        }
        let tp = cm.get(c, c) as f64;
        let predicted = cm.column_total(c);
        let prec = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let rec = tp / support as f64;
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        p += prec;
        r += rec;
        f += f1;
        n += 1;
    }
    if n == 0 {
        return MacroScores {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let n = n as f64;
    MacroScores {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

/// `κ = 1 − Σ w·O / Σ w·E` with `w_ij = (i−j)²/(C−1)²`. Unparseable outputs
/// count as the class farthest from the truth. Returns 1 when both sums are 0.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> f64 {
    let c = cm.n_classes();
    if c < 2 {
        return 1.0;
    }
    let mut obs = vec![vec![0.0f64; c]; c];
    for (i, row) in obs.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = cm.get(i, j) as f64;
        }
        let far = if i < c - 1 - i { c - 1 } else { 0 };
        row[far] += cm.unparseable(i) as f64;
    }
    let total: f64 = obs.iter().flatten().sum();
    if total == 0.0 {
        return 0.0;
    }
    let row_m: Vec<f64> = obs.iter().map(|r| r.iter().sum()).collect();
    let col_m: Vec<f64> = (0..c).map(|j| obs.iter().map(|r| r[j]).sum()).collect();
    let denom_w = ((c - 1) * (c - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            num += w * obs[i][j];
            den += w * row_m[i] * col_m[j] / total;
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - num / den
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task_id: String,
    pub item_id: String,
    pub truth: String,
    pub generated: String,
    pub retrieved_task_id: String,
    pub terminated_by_eos: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task_id: String,
    pub n: usize,
    pub accuracy: f64,
    pub cancer_accuracy: Option<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub unparseable: u64,
    pub mis_retrievals: usize,
    pub unterminated: usize,
    pub confusion: ConfusionMatrix,
}

/// How predictions pick their adaptors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Retrieval from a full-prompt query.
    Retrieve,
    /// The task's own adaptors.
    Direct,
}

pub fn summarize(spec: &TaskSpec, truths: &[usize], outputs: &[GenerationResult]) -> TaskEvaluation {
    let mut cm = ConfusionMatrix::new(spec.labels.len());
    for (&t, o) in truths.iter().zip(outputs) {
        cm.record(t, match_label(&o.label_text, &spec.labels));
    }
    let m = macro_precision_recall_f1(&cm);
    TaskEvaluation {
        task_id: spec.task_id.clone(),
        n: truths.len(),
        accuracy: accuracy(&cm),
        cancer_accuracy: cancer_accuracy(&cm, &spec.cancer_class_indices()),
        macro_precision: m.precision,
        macro_recall: m.recall,
        macro_f1: m.f1,
        kappa: quadratic_weighted_kappa(&cm),
        unparseable: (0..cm.n_classes()).map(|i| cm.unparseable(i)).sum(),
        mis_retrievals: outputs.iter().filter(|o| o.retrieved_task_id != spec.task_id).count(),
        unterminated: outputs.iter().filter(|o| !o.terminated_by_eos).count(),
        confusion: cm,
    }
}

/// Predicts every item of `split` and scores the outputs.
pub fn evaluate_task(
    engine: &Engine,
    store: &AdaptorStore,
    data: &Dataset,
    split: Split,
    selection: Selection,
    max_len: usize,
) -> Result<(TaskEvaluation, Vec<PredictionRecord>)> {
    let spec = &data.spec;
    let prompt = engine.vocab.encode_prompt(&spec.prompt)?;
    let mut truths = Vec::new();
    let mut outputs = Vec::new();
    let mut records = Vec::new();
    for item in data.split(split) {
        let out = match selection {
            Selection::Retrieve => engine.infer(&item.input, &prompt, store, max_len)?,
            Selection::Direct => engine.infer_with_task(&item.input, &spec.task_id, store, max_len)?,
        };
        truths.push(spec.label_index(&item.label).expect("validated label"));
        records.push(PredictionRecord {
            task_id: spec.task_id.clone(),
            item_id: item.id.clone(),
            truth: item.label.clone(),
            generated: out.label_text.clone(),
            retrieved_task_id: out.retrieved_task_id.clone(),
            terminated_by_eos: out.terminated_by_eos,
        });
        outputs.push(out);
    }
    Ok((summarize(spec, &truths, &outputs), records))
}

/// Scores a standalone baseline model on `split`.
pub fn evaluate_full_model(
    engine: &Engine,
    model: &FullFinetuneModel,
    data: &Dataset,
    split: Split,
    max_len: usize,
) -> Result<TaskEvaluation> {
    let mut truths = Vec::new();
    let mut outputs = Vec::new();
    for item in data.split(split) {
        outputs.push(model.predict(engine.vocab, &item.input, max_len)?);
        truths.push(data.spec.label_index(&item.label).expect("validated label"));
    }
    Ok(summarize(&data.spec, &truths, &outputs))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn evaluations_csv(rows: &[TaskEvaluation]) -> String {
    let mut out = String::from(
        "task_id,n,accuracy,cancer_accuracy,macro_precision,macro_recall,macro_f1,kappa,unparseable,mis_retrievals\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.task_id,
            r.n,
            r.accuracy,
            opt(r.cancer_accuracy),
            r.macro_precision,
            r.macro_recall,
            r.macro_f1,
            r.kappa,
            r.unparseable,
            r.mis_retrievals
        );
    }
    out
}

pub fn predictions_csv(rows: &[PredictionRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

// ---------------------------------------------------------------------------
// Audits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Full,
    OrganOnly,
    TaskOnly,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Full, PromptMode::OrganOnly, PromptMode::TaskOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Full => "full",
            PromptMode::OrganOnly => "organ_only",
            PromptMode::TaskOnly => "task_only",
        }
    }

    pub fn prompt_for(self, spec: &TaskSpec) -> String {
        match self {
            PromptMode::Full => spec.prompt.clone(),
            PromptMode::OrganOnly => organ_only_prompt(&spec.organ),
            PromptMode::TaskOnly => task_only_prompt(&spec.category),
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown prompt mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAudit {
    pub task_id: String,
    pub mode: PromptMode,
    pub n: usize,
    pub wrong: usize,
}

impl RetrievalAudit {
    pub fn rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.wrong as f64 / self.n as f64
        }
    }
}

/// Fraction of test inputs whose query (under `mode`) retrieves another task.
pub fn audit_retrieval(
    engine: &Engine,
    store: &AdaptorStore,
    test_sets: &[Dataset],
    mode: PromptMode,
) -> Result<Vec<RetrievalAudit>> {
    let mut out = Vec::with_capacity(test_sets.len());
    for data in test_sets {
        let prompt = engine.vocab.encode_prompt(&mode.prompt_for(&data.spec))?;
        let (mut n, mut wrong) = (0, 0);
        for item in data.split(Split::Test) {
            let q = engine.query(&item.input, &prompt)?;
            let (key, _) = store.retrieve(&q, item.input.level())?;
            n += 1;
            if key.task_id != data.spec.task_id {
                wrong += 1;
            }
        }
        out.push(RetrievalAudit {
            task_id: data.spec.task_id.clone(),
            mode,
            n,
            wrong,
        });
    }
    Ok(out)
}

pub fn retrieval_csv(rows: &[RetrievalAudit]) -> String {
    let mut out = String::from("task_id,mode,n,wrong,rate\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.task_id, r.mode.as_str(), r.n, r.wrong, r.rate());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingAudit {
    pub task_id: String,
    pub n: usize,
    pub changed: usize,
}

/// Reruns inference for every task of `before` under both stores and counts
/// outputs that differ in any field.
pub fn audit_forgetting(
    engine: &Engine,
    before: &AdaptorStore,
    after: &AdaptorStore,
    test_sets: &[Dataset],
    max_len: usize,
) -> Result<Vec<ForgettingAudit>> {
    let mut out = Vec::new();
    for id in before.task_ids() {
        let data = test_sets
            .iter()
            .find(|d| d.spec.task_id == id)
            .ok_or_else(|| Error::UnknownTask(format!("no test set for {id}")))?;
        let prompt = engine.vocab.encode_prompt(&data.spec.prompt)?;
        let (mut n, mut changed) = (0, 0);
        for item in data.split(Split::Test) {
            let a = engine.infer(&item.input, &prompt, before, max_len)?;
            let b = engine.infer(&item.input, &prompt, after, max_len)?;
            n += 1;
            if a != b {
                changed += 1;
            }
        }
        out.push(ForgettingAudit {
            task_id: id.to_string(),
            n,
            changed,
        });
    }
    Ok(out)
}

pub fn forgetting_csv(rows: &[ForgettingAudit]) -> String {
    let mut out = String::from("task_id,n,changed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.task_id, r.n, r.changed);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task_id: String,
    pub level: Level,
    /// Key plus adaptor set.
    pub adaptor_bytes: usize,
    /// Standalone fine-tuned model.
    pub full_bytes: usize,
    pub adaptor_ms_per_image: f64,
    pub full_ms_per_image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoragePoint {
    pub tasks: usize,
    pub adaptor_cumulative: usize,
    pub full_cumulative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub curve: Vec<StoragePoint>,
}

impl BenchReport {
    /// Final cumulative adaptor bytes over final cumulative baseline bytes.
    pub fn storage_ratio(&self) -> f64 {
        self.curve
            .last()
            .map_or(0.0, |p| p.adaptor_cumulative as f64 / p.full_cumulative as f64)
    }
}

pub fn storage_curve(rows: &[BenchRow]) -> Vec<StoragePoint> {
    let (mut a, mut f) = (0, 0);
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            a += r.adaptor_bytes;
            f += r.full_bytes;
            StoragePoint {
                tasks: i + 1,
                adaptor_cumulative: a,
                full_cumulative: f,
            }
        })
        .collect()
}

/// Trains every dataset both ways (adaptors into a growing store, and a full
/// fine-tuned copy) and records bytes and per-image training time.
pub fn bench(engine: &Engine, datasets: &[Dataset], cfg_for: impl Fn(Level) -> TrainConfig) -> Result<BenchReport> {
    let mut store = AdaptorStore::new(&engine.bundle.checksum());
    let mut rows = Vec::new();
    for data in datasets {
        let cfg = cfg_for(data.spec.level);
        let outcome = engine.train_task(&data.spec, data, &store, &cfg)?;
        let adaptor_ms = outcome.trace.ms_per_image();
        let (full, trace) = engine.train_task_full_finetune(&data.spec, data, &cfg)?;
        store.add_task(outcome.key, outcome.set)?;
        rows.push(BenchRow {
            task_id: data.spec.task_id.clone(),
            level: data.spec.level,
            adaptor_bytes: store.entry_bytes(store.len() - 1),
            full_bytes: full.payload_bytes(),
            adaptor_ms_per_image: adaptor_ms,
            full_ms_per_image: trace.ms_per_image(),
        });
    }
    let curve = storage_curve(&rows);
    Ok(BenchReport { rows, curve })
}

pub fn bench_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "task_id,level,adaptor_bytes,full_bytes,adaptor_ms_per_image,full_ms_per_image,adaptor_cumulative,full_cumulative\n",
    );
    for (r, p) in report.rows.iter().zip(&report.curve) {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{},{}",
            r.task_id,
            r.level,
            r.adaptor_bytes,
            r.full_bytes,
            r.adaptor_ms_per_image,
            r.full_ms_per_image,
            p.adaptor_cumulative,
            p.full_cumulative
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

/// Percentile rank (share of strictly smaller weights), min-max normalized;
/// a constant bag maps to all zeros.
pub fn heatmap_scores(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::EmptyBag);
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("non-finite attention weight".into()));
    }
    let n = weights.len() as f64;
    let pct: Vec<f64> = weights
        .iter()
        .map(|w| weights.iter().filter(|v| *v < w).count() as f64 / n)
        .collect();
    let lo = pct.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pct.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; pct.len()]);
    }
    Ok(pct.iter().map(|p| (p - lo) / (hi - lo)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Raster grid positions for a bag of `n` patches (`⌈√n⌉` columns).
pub fn bag_grid_coords(n: usize) -> Vec<(usize, usize)> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n).map(|i| (i / cols, i % cols)).collect()
}

pub fn export_heatmap_scores(attention: &[f64], coords: &[(usize, usize)]) -> Result<Vec<HeatmapRow>> {
    if attention.len() != coords.len() {
        return Err(Error::Dimension(format!(
            "{} attention weights for {} coordinates",
            attention.len(),
            coords.len()
        )));
    }
    Ok(heatmap_scores(attention)?
        .into_iter()
        .zip(coords)
        .map(|(score, &(row, col))| HeatmapRow { row, col, score })
        .collect())
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("row,col,score\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", r.row, r.col, r.score);
    }
    out
}

/// Full-prompt template check used by reports.
pub fn is_template_prompt(spec: &TaskSpec) -> bool {
    spec.prompt == make_prompt(&spec.organ, &spec.category)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn label_matching() {
        let l = labels(&["benign", "tumor"]);
        assert_eq!(match_label("Benign ", &l), Some(0));
        assert_eq!(match_label("tumr", &l), None);
        assert_eq!(match_label("metastasis", &l), None);
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(accuracy(&cm), 1.0);
        assert_eq!(cancer_accuracy(&cm, &[1, 2]), Some(1.0));
        let m = macro_precision_recall_f1(&cm);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(quadratic_weighted_kappa(&cm), 1.0);
    }

    #[test]
    fn cancer_accuracy_example() {
        let cm = ConfusionMatrix::from_counts(&[vec![5, 0], vec![5, 0]]).unwrap();
        assert_eq!(accuracy(&cm), 0.5);
        assert_eq!(cancer_accuracy(&cm, &[1]), Some(0.0));
        let other = ConfusionMatrix::from_counts(&[vec![1, 9], vec![5, 0]]).unwrap();
        assert_eq!(cancer_accuracy(&other, &[1]), cancer_accuracy(&cm, &[1]));
    }

    #[test]
    fn unparseable_is_always_wrong() {
        let mut cm = ConfusionMatrix::new(2);
        cm.record(0, Some(0));
        cm.record(1, None);
        assert_eq!(cm.total(), 2);
        assert_eq!(accuracy(&cm), 0.5);
        let m = macro_precision_recall_f1(&cm);
        assert_eq!(m.recall, 0.5);
        assert!(quadratic_weighted_kappa(&cm) < 1.0);
    }

    #[test]
    fn absent_classes_are_excluded_from_macro_average() {
        let cm = ConfusionMatrix::from_counts(&[vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
        assert_eq!(macro_precision_recall_f1(&cm).f1, 1.0);
    }

    #[test]
    fn independent_marginals_give_zero_kappa() {
        // rows (1,3) x cols (2,2): observed equals the outer product / total
        let cm = ConfusionMatrix::from_counts(&[vec![1, 1], vec![3, 3]]).unwrap();
        assert!(quadratic_weighted_kappa(&cm).abs() < 1e-15);
    }

    /// Kappa written from the definition with explicit expected counts.
    fn kappa_oracle(o: &[Vec<u64>]) -> f64 {
        let c = o.len();
        let n: u64 = o.iter().flatten().sum();
        let mut e = vec![vec![0.0; c]; c];
        for i in 0..c {
            for j in 0..c {
                let ri: u64 = o[i].iter().sum();
                let cj: u64 = (0..c).map(|k| o[k][j]).sum();
                e[i][j] = ri as f64 * cj as f64 / n as f64;
            }
        }
        let w = |i: usize, j: usize| {
            let d = i.abs_diff(j) as f64;
            d * d / ((c - 1) * (c - 1)) as f64
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..c {
            for j in 0..c {
                num += w(i, j) * o[i][j] as f64;
                den += w(i, j) * e[i][j];
            }
        }
        1.0 - num / den
    }

    #[test]
    fn kappa_matches_oracle() {
        let mut rng = seeded_rng(99);
        for _ in 0..100 {
            let o: Vec<Vec<u64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(0..20)).collect()).collect();
            let cm = ConfusionMatrix::from_counts(&o).unwrap();
            assert!((quadratic_weighted_kappa(&cm) - kappa_oracle(&o)).abs() <= 1e-9);
        }
    }

    #[test]
    fn heatmap_examples() {
        assert_eq!(heatmap_scores(&[0.2; 4]).unwrap(), vec![0.0; 4]);
        let h = heatmap_scores(&[0.1, 0.15, 0.2, 0.25, 0.3]).unwrap();
        for (a, b) in h.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-12, "{h:?}");
        }
        let rows = export_heatmap_scores(&[0.5, 0.3, 0.2], &bag_grid_coords(3)).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[2].row, rows[2].col), (1, 0));
        assert!(heatmap_csv(&rows).starts_with("row,col,score\n"));
    }

    #[test]
    fn prompt_modes() {
        let spec = TaskSpec::new("t", "breast", "cancer sub-type", &["a"], Level::Patch);
        assert_eq!(PromptMode::OrganOnly.prompt_for(&spec), "This breast tissue is");
        assert_eq!(PromptMode::TaskOnly.prompt_for(&spec), "The cancer sub-type of this tissue is");
        assert_eq!("organ_only".parse::<PromptMode>().unwrap(), PromptMode::OrganOnly);
        assert!(is_template_prompt(&spec));
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(o in proptest::collection::vec(proptest::collection::vec(0u64..10, 3), 3)) {
            let cm = ConfusionMatrix::from_counts(&o).unwrap();
            prop_assume!(cm.total() > 0);
            let m = macro_precision_recall_f1(&cm);
            for v in [accuracy(&cm), m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let k = quadratic_weighted_kappa(&cm);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
        }

        #[test]
        fn heatmap_is_scale_invariant(w in proptest::collection::vec(0.001f64..1.0, 1..12), c in 0.1f64..50.0) {
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let a = heatmap_scores(&w).unwrap();
            let b = heatmap_scores(&scaled).unwrap();
            prop_assert_eq!(a.len(), w.len());
            // scaling can only merge near-ties through rounding; compare orderings
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if w[i] < w[j] && scaled[i] < scaled[j] {
                        prop_assert!(a[i] < a[j] && b[i] < b[j]);
                    }
                }
            }
        }
    }
}
