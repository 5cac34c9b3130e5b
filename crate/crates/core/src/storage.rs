//! Task keys, queries, the key loss, cosine retrieval, and the on-disk
//! adaptor store.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptors::{default_projector_widths, AggregatorConfig, AttentionAggregator, Projector};
use crate::autograd::{Graph, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::lora::{Component, LoraConfig, LoraSet};
use crate::tasks::{Level, TaskSpec};
use crate::tensor::{derive_seed, seeded_rng, Tensor};
use crate::vocab::TokenSequence;

pub const KEY_INIT_STD: f64 = 0.02;
const MIN_KEY_NORM: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskKey {
    pub task_id: String,
    pub insertion_index: usize,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub vector: Vec<f64>,
}

/// `Q = concat(e_v, e_t)`.
pub fn make_query(e_v: &[f64], e_t: &[f64]) -> Query {
    Query {
        vector: e_v.iter().chain(e_t).copied().collect(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("cosine of a zero-norm vector"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `−cos(K, Q) + mean_i cos(K, K_prev_i)`; the second term is 0 without previous keys.
pub fn key_loss(key: &[f64], query: &[f64], prev_keys: &[&[f64]]) -> Result<f64> {
    let pull = cosine(key, query)?;
    if prev_keys.is_empty() {
        return Ok(-pull);
    }
    let mut push = 0.0;
    for p in prev_keys {
        push += cosine(key, p)?;
    }
    Ok(-pull + push / prev_keys.len() as f64)
}

/// Graph form of [`key_loss`] averaged over the rows of `queries`.
pub fn key_loss_graph(g: &mut Graph, key: Var, queries: Var, prev_keys: Option<Var>) -> Var {
    let pull = g.cosine_rows(key, queries);
    let pull = g.mean(pull);
    let neg = g.scale(pull, -1.0);
    match prev_keys {
        Some(prev) => {
            let push = g.cosine_rows(key, prev);
            let push = g.mean(push);
            g.add(neg, push)
        }
        None => neg,
    }
}

/// Index of the key with the highest cosine to `query`; ties go to the earliest key.
pub fn retrieve(query: &Query, keys: &[&TaskKey]) -> Result<usize> {
    if keys.is_empty() {
        return Err(Error::NoTasks);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, k) in keys.iter().enumerate() {
        let c = cosine(&query.vector, &k.vector)?;
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok(best.0)
}

/// Sizes that fix every adaptor tensor shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptorShape {
    pub d_v: usize,
    pub d_t: usize,
    pub n_layers_v: usize,
    pub n_layers_t: usize,
    pub projector_hidden: [usize; 3],
    pub aggregator_hidden: usize,
}

impl AdaptorShape {
    pub fn for_backbone(cfg: &BackboneConfig, agg: &AggregatorConfig) -> Self {
        AdaptorShape {
            d_v: cfg.d_v,
            d_t: cfg.d_t,
            n_layers_v: cfg.n_layers_v,
            n_layers_t: cfg.n_layers_t,
            projector_hidden: default_projector_widths(cfg.d_t),
            aggregator_hidden: agg.hidden,
        }
    }

    pub fn key_len(&self) -> usize {
        self.d_v + self.d_t
    }
}

/// Encoder LoRA for patch tasks, attention aggregator for slide tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualAdaptor {
    EncoderLora(LoraSet),
    Aggregator(AttentionAggregator),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorSet {
    pub spec: TaskSpec,
    pub prompt: TokenSequence,
    pub shape: AdaptorShape,
    pub lora: LoraConfig,
    pub visual: VisualAdaptor,
    pub projector: Projector,
    pub decoder_lora: LoraSet,
}

impl AdaptorSet {
    /// Freshly initialised adaptors; every random stream is derived from `seed`.
    pub fn init(
        spec: TaskSpec,
        prompt: TokenSequence,
        shape: AdaptorShape,
        lora: LoraConfig,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let visual = match spec.level {
            Level::Patch => VisualAdaptor::EncoderLora(LoraSet::for_component(
                Component::Encoder,
                shape.n_layers_v,
                shape.d_v,
                &lora,
                derive_seed(seed, "encoder-lora"),
            )?),
            Level::Slide => VisualAdaptor::Aggregator(AttentionAggregator::new(
                shape.d_v,
                &AggregatorConfig {
                    hidden: shape.aggregator_hidden,
                },
                &mut seeded_rng(derive_seed(seed, "aggregator")),
            )),
        };
        let projector = Projector::new(
            shape.d_v,
            shape.projector_hidden,
            shape.d_t,
            &mut seeded_rng(derive_seed(seed, "projector")),
        );
        let decoder_lora = LoraSet::for_component(
            Component::Decoder,
            shape.n_layers_t,
            shape.d_t,
            &lora,
            derive_seed(seed, "decoder-lora"),
        )?;
        Ok(AdaptorSet {
            spec,
            prompt,
            shape,
            lora,
            visual,
            projector,
            decoder_lora,
        })
    }

    pub fn level(&self) -> Level {
        self.spec.level
    }

    pub fn task_id(&self) -> &str {
        &self.spec.task_id
    }

    pub fn encoder_lora(&self) -> Option<&LoraSet> {
        match &self.visual {
            VisualAdaptor::EncoderLora(s) => Some(s),
            VisualAdaptor::Aggregator(_) => None,
        }
    }

    pub fn aggregator(&self) -> Option<&AttentionAggregator> {
        match &self.visual {
            VisualAdaptor::Aggregator(a) => Some(a),
            VisualAdaptor::EncoderLora(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        match (&self.visual, self.spec.level) {
            (VisualAdaptor::EncoderLora(s), Level::Patch) => {
                s.validate()?;
                if s.component != Component::Encoder {
                    return Err(Error::InvalidInput("patch adaptor needs encoder LoRA".into()));
                }
            }
            (VisualAdaptor::Aggregator(a), Level::Slide) => a.validate()?,
            _ => {
                return Err(Error::InvalidInput(format!(
                    "adaptor kind does not match {} level",
                    self.spec.level
                )))
            }
        }
        self.projector.validate()?;
        self.decoder_lora.validate()?;
        if self.decoder_lora.component != Component::Decoder {
            return Err(Error::InvalidInput("decoder adaptor needs decoder LoRA".into()));
        }
        Ok(())
    }

    /// Names and tensors in storage order: visual adaptor, projector, decoder LoRA.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = match &self.visual {
            VisualAdaptor::EncoderLora(s) => s.named_params(),
            VisualAdaptor::Aggregator(a) => a.named_params(),
        };
        out.extend(self.projector.named_params());
        out.extend(self.decoder_lora.named_params());
        out
    }

    /// Same order as [`AdaptorSet::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = match &mut self.visual {
            VisualAdaptor::EncoderLora(s) => s.params_mut(),
            VisualAdaptor::Aggregator(a) => a.params_mut(),
        };
        out.extend(self.projector.params_mut());
        out.extend(self.decoder_lora.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bytes of this set's float32 blobs.
    pub fn payload_bytes(&self) -> usize {
        self.param_count() * 4
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreEntry {
    #[serde(flatten)]
    spec: TaskSpec,
    insertion_index: usize,
    prompt_ids: Vec<usize>,
    shape: AdaptorShape,
    lora: LoraConfig,
    key_len: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    backbone_checksum: String,
    tasks: Vec<StoreEntry>,
}

const KEY_FILE: &str = "key.bin";

/// Insertion-ordered `(key, adaptor set)` pairs bound to one backbone checksum.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorStore {
    backbone_checksum: String,
    entries: Vec<(TaskKey, AdaptorSet)>,
}

impl AdaptorStore {
    pub fn new(backbone_checksum: &str) -> Self {
        AdaptorStore {
            backbone_checksum: backbone_checksum.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn backbone_checksum(&self) -> &str {
        &self.backbone_checksum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(TaskKey, AdaptorSet)] {
        &self.entries
    }

    pub fn keys(&self) -> Vec<&TaskKey> {
        self.entries.iter().map(|(k, _)| k).collect()
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(k, _)| k.task_id.as_str()).collect()
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.entries.iter().any(|(k, _)| k.task_id == task_id)
    }

    pub fn get(&self, task_id: &str) -> Option<&(TaskKey, AdaptorSet)> {
        self.entries.iter().find(|(k, _)| k.task_id == task_id)
    }

    /// Appends a trained pair; earlier pairs are never touched.
    pub fn add_task(&mut self, key: TaskKey, set: AdaptorSet) -> Result<()> {
        if self.contains(&key.task_id) {
            return Err(Error::Conflict(key.task_id));
        }
        if key.task_id != set.spec.task_id {
            return Err(Error::InvalidInput(format!(
                "key for {:?} paired with adaptors for {:?}",
                key.task_id, set.spec.task_id
            )));
        }
        if key.insertion_index != self.entries.len() {
            return Err(Error::InvalidInput(format!(
                "insertion index {} but store holds {} tasks",
                key.insertion_index,
                self.entries.len()
            )));
        }
        if key.vector.len() != set.shape.key_len() {
            return Err(Error::Dimension(format!(
                "key has {} values, expected {}",
                key.vector.len(),
                set.shape.key_len()
            )));
        }
        if key.vector.iter().any(|v| !v.is_finite()) || norm(&key.vector) < MIN_KEY_NORM {
            return Err(Error::DegenerateVector("task key must be finite with nonzero norm"));
        }
        set.validate()?;
        self.entries.push((key, set));
        Ok(())
    }

    /// Best pair among the tasks of `level`: an adaptor set of the other
    /// level cannot consume the input the query came from.
    pub fn retrieve(&self, query: &Query, level: Level) -> Result<&(TaskKey, AdaptorSet)> {
        let candidates: Vec<&(TaskKey, AdaptorSet)> = self.entries.iter().filter(|(_, s)| s.level() == level).collect();
        let keys: Vec<&TaskKey> = candidates.iter().map(|(k, _)| k).collect();
        Ok(candidates[retrieve(query, &keys)?])
    }

    /// The store as it was after its first `n` additions.
    pub fn prefix(&self, n: usize) -> Self {
        AdaptorStore {
            backbone_checksum: self.backbone_checksum.clone(),
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
        }
    }

    /// Blob bytes of one entry: key plus adaptor tensors.
    pub fn entry_bytes(&self, index: usize) -> usize {
        let (k, s) = &self.entries[index];
        k.vector.len() * 4 + s.payload_bytes()
    }

    pub fn blob_bytes(&self) -> usize {
        (0..self.entries.len()).map(|i| self.entry_bytes(i)).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tasks = Vec::with_capacity(self.entries.len());
        for (key, set) in &self.entries {
            let tdir = dir.join(&key.task_id);
            fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
            let key_t = Tensor::row_vector(&key.vector);
            let kp = tdir.join(KEY_FILE);
            fs::write(&kp, key_t.to_f32_le_bytes()).map_err(|e| Error::io(&kp, e))?;
            let mut tensors = Vec::new();
            for (name, t) in set.named_params() {
                let p = tdir.join(format!("{name}.bin"));
                fs::write(&p, t.to_f32_le_bytes()).map_err(|e| Error::io(&p, e))?;
                tensors.push(TensorEntry {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                });
            }
            tasks.push(StoreEntry {
                spec: set.spec.clone(),
                insertion_index: key.insertion_index,
                prompt_ids: set.prompt.ids.clone(),
                shape: set.shape.clone(),
                lora: set.lora,
                key_len: key.vector.len(),
                tensors,
            });
        }
        let manifest = StoreManifest {
            backbone_checksum: self.backbone_checksum.clone(),
            tasks,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a store; `expected_checksum` guards against a different backbone.
    pub fn load(dir: &Path, expected_checksum: Option<&str>) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)?;
        if let Some(expected) = expected_checksum {
            if expected != manifest.backbone_checksum {
                return Err(Error::Compatibility {
                    expected: expected.to_string(),
                    found: manifest.backbone_checksum,
                });
            }
        }
        let mut store = AdaptorStore::new(&manifest.backbone_checksum);
        for entry in manifest.tasks {
            let tdir = dir.join(&entry.spec.task_id);
            let read = |name: &str, rows: usize, cols: usize| -> Result<Tensor> {
                let p = tdir.join(name);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                Tensor::from_f32_le_bytes(rows, cols, &bytes)
            };
            let key = TaskKey {
                task_id: entry.spec.task_id.clone(),
                insertion_index: entry.insertion_index,
                vector: read(KEY_FILE, 1, entry.key_len)?.into_vec(),
            };
            let mut set = AdaptorSet::init(
                entry.spec,
                TokenSequence { ids: entry.prompt_ids },
                entry.shape,
                entry.lora,
                0,
            )?;
            let expected: Vec<(String, (usize, usize))> = set
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.shape()))
                .collect();
            if expected.len() != entry.tensors.len() {
                return Err(Error::InvalidData(format!(
                    "{}: manifest lists {} tensors, adaptor layout has {}",
                    key.task_id,
                    entry.tensors.len(),
                    expected.len()
                )));
            }
            let mut loaded = Vec::with_capacity(expected.len());
            for ((name, shape), t) in expected.iter().zip(&entry.tensors) {
                if *name != t.name || *shape != (t.rows, t.cols) {
                    return Err(Error::InvalidData(format!(
                        "{}: tensor {} {}x{} does not match {name} {shape:?}",
                        key.task_id, t.name, t.rows, t.cols
                    )));
                }
                loaded.push(read(&format!("{}.bin", t.name), t.rows, t.cols)?);
            }
            for (p, t) in set.params_mut().into_iter().zip(loaded) {
                *p = t;
            }
            store.add_task(key, set)?;
        }
        Ok(store)
    }
}

/// A Gaussian key for a new task, rounded to the float32 grid.
pub fn init_key(task_id: &str, insertion_index: usize, len: usize, seed: u64) -> TaskKey {
    let t = Tensor::randn(1, len, KEY_INIT_STD, &mut seeded_rng(derive_seed(seed, "key")));
    TaskKey {
        task_id: task_id.to_string(),
        insertion_index,
        vector: t.into_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_relative_error, numeric_gradient};
    use proptest::prelude::*;

    fn key(id: &str, i: usize, v: &[f64]) -> TaskKey {
        TaskKey {
            task_id: id.into(),
            insertion_index: i,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn query_concatenates() {
        assert_eq!(make_query(&[1.0, 2.0], &[3.0]).vector, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn key_loss_examples() {
        let q = [0.6, 0.8];
        assert!((key_loss(&q, &q, &[]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(key_loss(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]]).unwrap(), -1.0);
        let s = 1.0 / 2f64.sqrt();
        let l = key_loss(&[s, s], &[1.0, 0.0], &[&[0.0, 1.0]]).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
        assert!(matches!(
            key_loss(&[0.0, 0.0], &[1.0, 0.0], &[]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn retrieval_examples() {
        let keys = [
            key("a", 0, &[1.0, 0.0, 0.0]),
            key("b", 1, &[0.0, 1.0, 0.0]),
            key("c", 2, &[0.0, 0.0, 1.0]),
        ];
        let refs: Vec<&TaskKey> = keys.iter().collect();
        let q = Query {
            vector: vec![0.0, 0.9, 0.1],
        };
        assert_eq!(retrieve(&q, &refs).unwrap(), 1);
        assert_eq!(retrieve(&Query { vector: keys[2].vector.clone() }, &refs).unwrap(), 2);
        let tie = [key("x", 0, &[1.0, 1.0]), key("y", 1, &[2.0, 2.0])];
        let tie_refs: Vec<&TaskKey> = tie.iter().collect();
        assert_eq!(retrieve(&Query { vector: vec![1.0, 1.0] }, &tie_refs).unwrap(), 0);
        assert!(matches!(retrieve(&q, &[]), Err(Error::NoTasks)));
    }

    #[test]
    fn graph_key_loss_matches_scalar_and_finite_differences() {
        let mut rng = seeded_rng(11);
        for trial in 0..10 {
            let n_prev = trial % 4;
            let k = Tensor::randn(1, 6, 1.0, &mut rng);
            let q = Tensor::randn(1, 6, 1.0, &mut rng);
            let prev = Tensor::randn(n_prev.max(1), 6, 1.0, &mut rng);
            let prev_rows: Vec<&[f64]> = (0..n_prev).map(|r| prev.row(r)).collect();
            let scalar = |k: &Tensor| key_loss(k.data(), q.data(), &prev_rows).unwrap();
            let mut g = Graph::new();
            let kv = g.param(k.clone());
            let qv = g.constant(q.clone());
            let pv = (n_prev > 0).then(|| g.constant(prev.clone()));
            let l = key_loss_graph(&mut g, kv, qv, pv);
            assert!((g.scalar(l) - scalar(&k)).abs() < 1e-12);
            let mut grads = g.backward(l);
            let analytic = grads.take(&g, kv);
            let numeric = numeric_gradient(&k, 1e-5, scalar);
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err <= 1e-4, "trial {trial}: {err}");
        }
    }

    proptest! {
        #[test]
        fn key_loss_is_scale_invariant(
            k in proptest::collection::vec(0.1f64..2.0, 4),
            q in proptest::collection::vec(-2.0f64..2.0, 4),
            p in proptest::collection::vec(-2.0f64..2.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&q) > 1e-3 && norm(&p) > 1e-3);
            let base = key_loss(&k, &q, &[&p]).unwrap();
            let ks: Vec<f64> = k.iter().map(|x| x * c).collect();
            let qs: Vec<f64> = q.iter().map(|x| x * c).collect();
            let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
            prop_assert!((key_loss(&ks, &qs, &ps_slice(&ps)).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn retrieval_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = seeded_rng(seed);
            let keys: Vec<TaskKey> = (0..5)
                .map(|i| key(&format!("t{i}"), i, Tensor::randn(1, 8, 1.0, &mut rng).data()))
                .collect();
            let refs: Vec<&TaskKey> = keys.iter().collect();
            let q = Tensor::randn(1, 8, 1.0, &mut rng).into_vec();
            let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
            prop_assert_eq!(
                retrieve(&Query { vector: q }, &refs).unwrap(),
                retrieve(&Query { vector: scaled }, &refs).unwrap()
            );
        }
    }

    fn ps_slice(p: &[f64]) -> [&[f64]; 1] {
        [p]
    }
}
