//! Task plans, the shipped task fixtures, and the pretraining corpus builder.

use serde::{Deserialize, Serialize};

use crate::backbone::PretrainCorpus;
use crate::error::{Error, Result};
use crate::tasks::{generate_patch_task, generate_slide_task, organ_only_prompt, task_only_prompt, Dataset, Level, TaskSpec};
use crate::tensor::derive_seed;
use crate::vocab::Vocabulary;

/// A task plus the size of its generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    #[serde(flatten)]
    pub spec: TaskSpec,
    /// Patches per class (patch tasks) or bags per class (slide tasks).
    pub n_per_class: usize,
    /// Inclusive patch-count range of a bag.
    #[serde(default = "default_bag_size")]
    pub bag_size: (usize, usize),
}

fn default_bag_size() -> (usize, usize) {
    (4, 8)
}

impl TaskPlan {
    pub fn patch(spec: TaskSpec, n_per_class: usize) -> Self {
        TaskPlan {
            spec,
            n_per_class,
            bag_size: default_bag_size(),
        }
    }

    pub fn slide(spec: TaskSpec, n_per_class: usize, bag_size: (usize, usize)) -> Self {
        TaskPlan {
            spec,
            n_per_class,
            bag_size,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self.spec.level {
            Level::Patch => generate_patch_task(&self.spec, self.n_per_class, seed),
            Level::Slide => generate_slide_task(&self.spec, self.n_per_class, self.bag_size, seed),
        }
    }
}

fn spec(id: &str, organ: &str, category: &str, labels: &[&str], level: Level, cancer: &[&str]) -> TaskSpec {
    TaskSpec::new(id, organ, category, labels, level).with_cancer_labels(cancer)
}

/// Eight downstream tasks, in insertion order. The two colon tasks are kept
/// apart: a new key is pushed away from the mean of the earlier keys, so a
/// second task whose only predecessor shares its organ gets a key nearly
/// orthogonal to its own queries.
pub fn acceptance_tasks() -> Vec<TaskPlan> {
    use Level::{Patch, Slide};
    let grades = ["benign", "low grade cancer", "high grade cancer"];
    vec![
        TaskPlan::patch(
            spec(
                "colon_grade",
                "colon",
                "cancer grade",
                &["benign", "well differentiated cancer", "moderately differentiated cancer", "poorly differentiated cancer"],
                Patch,
                &["well differentiated cancer", "moderately differentiated cancer", "poorly differentiated cancer"],
            ),
            40,
        ),
        TaskPlan::slide(
            spec("breast_metastasis", "breast", "metastasis screening", &["normal", "metastasis"], Slide, &["metastasis"]),
            24,
            (4, 8),
        ),
        TaskPlan::patch(
            spec("prostate_grade", "prostate", "cancer grade", &grades, Patch, &grades[1..]),
            40,
        ),
        TaskPlan::slide(
            spec("gastric_grade", "gastric", "cancer grade", &grades, Slide, &grades[1..]),
            24,
            (4, 8),
        ),
        TaskPlan::patch(
            spec(
                "lung_subtype",
                "lung",
                "cancer sub-type",
                &["adenocarcinoma", "squamous cell carcinoma"],
                Patch,
                &["adenocarcinoma", "squamous cell carcinoma"],
            ),
            40,
        ),
        TaskPlan::patch(
            spec(
                "colon_tissue",
                "colon",
                "tissue type",
                &["adipose", "mucus", "stroma", "tumor epithelium"],
                Patch,
                &["tumor epithelium"],
            ),
            40,
        ),
        TaskPlan::patch(
            spec(
                "kidney_subtype",
                "kidney",
                "cancer sub-type",
                &["clear cell carcinoma", "papillary carcinoma", "chromophobe carcinoma"],
                Patch,
                &["clear cell carcinoma", "papillary carcinoma", "chromophobe carcinoma"],
            ),
            40,
        ),
        TaskPlan::slide(
            spec("bladder_tumor", "bladder", "tumor detection", &["normal", "tumor"], Slide, &["tumor"]),
            24,
            (4, 8),
        ),
    ]
}

/// Three-task end-to-end example: two patch tasks and one slide task.
pub fn quickstart_tasks() -> Vec<TaskPlan> {
    let all = acceptance_tasks();
    ["colon_grade", "breast_metastasis", "lung_subtype"]
        .iter()
        .map(|id| all.iter().find(|p| p.spec.task_id == *id).expect("fixture id").clone())
        .collect()
}

/// Held-out patch tasks for encoder pretraining. Each organ appears under
/// two categories so the encoder must separate texture orientation as well
/// as palette.
pub fn pretrain_tasks() -> Vec<TaskPlan> {
    let c4 = ["grade one", "grade two", "grade three", "grade four"];
    let pairs = [
        ("liver", "cancer grade", "tissue type"),
        ("skin", "metastasis screening", "cancer sub-type"),
        ("thyroid", "polyp type", "cancer grade"),
        ("pancreas", "tissue type", "metastasis screening"),
        ("ovary", "cancer sub-type", "polyp type"),
    ];
    let mut out = Vec::new();
    for (i, (organ, a, b)) in pairs.into_iter().enumerate() {
        for (j, category) in [a, b].into_iter().enumerate() {
            let n = 2 + (i + j) % 3;
            let id = format!("pre_{organ}_{}", category.replace([' ', '-'], "_"));
            out.push(TaskPlan::patch(spec(&id, organ, category, &c4[..n], Level::Patch, &[]), 30));
        }
    }
    out
}

/// Every spec whose prompt, ablated prompts and labels must be encodable.
pub fn vocabulary_specs(downstream: &[TaskPlan], pretrain: &[TaskPlan]) -> Vec<TaskSpec> {
    let mut specs: Vec<TaskSpec> = downstream.iter().chain(pretrain).map(|p| p.spec.clone()).collect();
    for p in downstream {
        for (suffix, prompt) in [
            ("organ", organ_only_prompt(&p.spec.organ)),
            ("task", task_only_prompt(&p.spec.category)),
        ] {
            let mut s = p.spec.clone();
            s.task_id = format!("{}_{suffix}", s.task_id);
            s.prompt = prompt;
            specs.push(s);
        }
    }
    specs
}

/// Pretraining images from `pretrain` and prompt/label text from every task.
pub fn build_pretrain_corpus(
    downstream: &[TaskPlan],
    pretrain: &[TaskPlan],
    vocab: &Vocabulary,
    seed: u64,
) -> Result<PretrainCorpus> {
    for p in pretrain {
        if downstream.iter().any(|d| d.spec.task_id == p.spec.task_id) {
            return Err(Error::InvalidTask(format!(
                "pretraining task {} is also a downstream task",
                p.spec.task_id
            )));
        }
    }
    let image_tasks = pretrain
        .iter()
        .map(|p| p.generate(derive_seed(seed, "pretrain-data")))
        .collect::<Result<Vec<_>>>()?;
    let mut texts = Vec::new();
    for p in downstream.iter().chain(pretrain) {
        let prompt = vocab.encode_prompt(&p.spec.prompt)?;
        for label in &p.spec.labels {
            texts.push((prompt.clone(), vocab.encode_label(label)?));
        }
    }
    Ok(PretrainCorpus { image_tasks, texts })
}
