//! Per-task training of a key and an adaptor set, greedy generation, and
//! retrieve-then-generate inference.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaptors::{aggregate_maxpool, AggregatorConfig, AggregatorVars, AttentionAggregator, Projector, ProjectorVars};
use crate::autograd::{Graph, Var};
use crate::backbone::{BackboneBundle, EncoderVars, LmBatch};
use crate::error::{Error, Result};
use crate::lora::{BoundLoraSet, Dropout, LoraConfig, LoraSet};
use crate::optim::{cosine_lr, Adam, OptimizerKind};
use crate::storage::{init_key, key_loss_graph, make_query, AdaptorSet, AdaptorShape, AdaptorStore, Query, TaskKey, VisualAdaptor};
use crate::tasks::{Dataset, Input, Level, Split, TaskSpec};
use crate::tensor::{derive_seed, seeded_rng, SeededRng, Tensor};
use crate::vocab::{TokenSequence, Vocabulary, EOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Clamped to the training-set size.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Stop after this many epochs without a lower validation loss and
    /// restore the best epoch's weights.
    pub early_stopping_patience: Option<usize>,
    pub seed: u64,
    /// Only teacher-forced training is differentiable; `false` switches the
    /// logged validation loss to free-running decoding.
    pub teacher_forcing: bool,
    pub max_generate_len: usize,
    pub lora: LoraConfig,
    pub aggregator: AggregatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::patch_default()
    }
}

impl TrainConfig {
    /// Desk-scale patch preset.
    pub fn patch_default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 3e-3,
            batch_size: 16,
            optimizer: OptimizerKind::AdamW { weight_decay: 0.01 },
            early_stopping_patience: None,
            seed: 0,
            teacher_forcing: true,
            max_generate_len: 8,
            lora: LoraConfig::default(),
            aggregator: AggregatorConfig::default(),
        }
    }

    /// Desk-scale slide preset.
    pub fn slide_default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 3e-3,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            early_stopping_patience: Some(20),
            ..TrainConfig::patch_default()
        }
    }

    /// Full-scale patch hyperparameters.
    pub fn full_scale_patch() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-4,
            batch_size: 256,
            ..TrainConfig::patch_default()
        }
    }

    /// Full-scale slide hyperparameters.
    pub fn full_scale_slide() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 2e-4,
            batch_size: 256,
            ..TrainConfig::slide_default()
        }
    }

    pub fn for_level(level: Level) -> Self {
        match level {
            Level::Patch => TrainConfig::patch_default(),
            Level::Slide => TrainConfig::slide_default(),
        }
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if self.max_generate_len == 0 || self.max_generate_len > max_seq_len {
            return bad("max_generate_len must be in 1..=max_seq_len");
        }
        if !(0.0..=1.0).contains(&self.lora.dropout_p) {
            return bad("lora dropout_p must be in [0, 1]");
        }
        if self.early_stopping_patience == Some(0) {
            return bad("early_stopping_patience must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub label_text: String,
    pub token_ids: TokenSequence,
    pub terminated_by_eos: bool,
    pub retrieved_task_id: String,
    pub attention: Option<Vec<f64>>,
}

/// Per-optimizer-step losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub key_loss: f64,
    pub seq_loss: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub key_loss: f64,
    pub seq_loss: f64,
    pub total: f64,
    /// Validation token loss.
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub images_seen: usize,
    pub elapsed_ms: f64,
}

impl TrainTrace {
    /// `epoch,L_K,L_S,L,val_metric,lr`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L_K,L_S,L,val_metric,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.8},{:.8},{:.8},{:.8},{:.8e}\n",
                r.epoch, r.key_loss, r.seq_loss, r.total, r.val_metric, r.lr
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn ms_per_image(&self) -> f64 {
        self.elapsed_ms / self.images_seen.max(1) as f64
    }
}

/// Mean token cross-entropy of `logits` rows against `targets`.
pub fn sequence_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() || logits.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        if t >= row.len() {
            return Err(Error::InvalidInput(format!("target token {t} outside vocabulary")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// Argmax over non-PAD tokens; the lowest id wins ties.
pub fn greedy_token(logits: &[f64]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &v) in logits.iter().enumerate() {
        if i != PAD_ID && (best.0 == usize::MAX || v > best.1) {
            best = (i, v);
        }
    }
    best.0
}

// ---------------------------------------------------------------------------
// Prepared examples
// ---------------------------------------------------------------------------

enum Visual {
    Image(Vec<f64>),
    /// Patch images plus their unadapted encoder embeddings (`n×d_v`).
    Bag { images: Vec<Vec<f64>>, embeddings: Tensor },
}

struct Example {
    visual: Visual,
    query: Vec<f64>,
    /// Label words followed by EOS.
    label_ids: Vec<usize>,
}

fn bag_images(input: &Input) -> Option<Vec<Vec<f64>>> {
    match input {
        Input::Bag(b) => Some(b.iter().map(|i| i.to_unit()).collect()),
        Input::Patch(_) => None,
    }
}

fn check_level(input: &Input, level: Level) -> Result<()> {
    if input.level() == level {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("input does not match a {level}-level task")))
    }
}

fn loss_sequences(prompt: &[usize], batch: &[&Example]) -> LmBatch {
    let p = prompt.len();
    LmBatch {
        inputs: batch
            .iter()
            .map(|e| {
                let mut ids = prompt.to_vec();
                ids.extend_from_slice(&e.label_ids[..e.label_ids.len() - 1]);
                ids
            })
            .collect(),
        targets: batch
            .iter()
            .map(|e| e.label_ids.iter().enumerate().map(|(j, &t)| (p + j, t)).collect())
            .collect(),
    }
}

/// Adaptor set bound into a graph; `vars` follows `AdaptorSet::params_mut`.
struct BoundSet {
    encoder_lora: Option<BoundLoraSet>,
    aggregator: Option<AggregatorVars>,
    projector: ProjectorVars,
    decoder_lora: BoundLoraSet,
    vars: Vec<Var>,
}

fn bind_set(g: &mut Graph, set: &AdaptorSet, trainable: bool) -> BoundSet {
    let mut vars = Vec::new();
    let (encoder_lora, aggregator) = match &set.visual {
        VisualAdaptor::EncoderLora(s) => {
            let b = s.bind(g, trainable);
            vars.extend_from_slice(b.vars());
            (Some(b), None)
        }
        VisualAdaptor::Aggregator(a) => {
            let b = a.bind(g, trainable);
            vars.extend(b.vars());
            (None, Some(b))
        }
    };
    let projector = set.projector.bind(g, trainable);
    vars.extend_from_slice(projector.vars());
    let decoder_lora = set.decoder_lora.bind(g, trainable);
    vars.extend_from_slice(decoder_lora.vars());
    BoundSet {
        encoder_lora,
        aggregator,
        projector,
        decoder_lora,
        vars,
    }
}

fn stack_bags(batch: &[&Example]) -> Result<(Tensor, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut offsets = vec![0];
    for e in batch {
        let Visual::Bag { embeddings, .. } = &e.visual else {
            return Err(Error::InvalidInput("expected a bag".into()));
        };
        for r in 0..embeddings.rows() {
            rows.push(embeddings.row(r).to_vec());
        }
        offsets.push(rows.len());
    }
    Ok((Tensor::from_rows(&rows)?, offsets))
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// A frozen backbone plus its vocabulary.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub bundle: &'a BackboneBundle,
    pub vocab: &'a Vocabulary,
}

/// Result of [`Engine::train_task`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub key: TaskKey,
    pub set: AdaptorSet,
    pub trace: TrainTrace,
}

impl<'a> Engine<'a> {
    pub fn new(bundle: &'a BackboneBundle, vocab: &'a Vocabulary) -> Result<Self> {
        if bundle.config().vocab_size != vocab.len() {
            return Err(Error::Compatibility {
                expected: format!("vocabulary of {} tokens", bundle.config().vocab_size),
                found: format!("{} tokens", vocab.len()),
            });
        }
        Ok(Engine { bundle, vocab })
    }

    /// Query from the unadapted backbones; bags are max-pooled.
    pub fn query(&self, input: &Input, prompt: &TokenSequence) -> Result<Query> {
        let e_v = match input {
            Input::Patch(img) => self.bundle.encode_image(&img.to_unit())?,
            Input::Bag(bag) => {
                if bag.is_empty() {
                    return Err(Error::EmptyBag);
                }
                let imgs: Vec<Vec<f64>> = bag.iter().map(|i| i.to_unit()).collect();
                let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
                aggregate_maxpool(&self.bundle.encode_images(&refs)?)?
            }
        };
        let e_t = self.bundle.embed_prompt(prompt)?;
        Ok(make_query(&e_v, &e_t))
    }

    fn prepare(&self, data: &Dataset, split: Split, with_queries: bool, prompt: &TokenSequence) -> Result<Vec<Example>> {
        let cfg = self.bundle.config();
        let e_t = if with_queries {
            Some(self.bundle.embed_prompt(prompt)?)
        } else {
            None
        };
        let items: Vec<_> = data.split(split).collect();
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(64) {
            let visuals: Vec<Visual> = chunk
                .iter()
                .map(|item| -> Result<Visual> {
                    check_level(&item.input, data.spec.level)?;
                    Ok(match &item.input {
                        Input::Patch(img) => Visual::Image(img.to_unit()),
                        Input::Bag(_) => {
                            let images = bag_images(&item.input).expect("bag");
                            if images.is_empty() {
                                return Err(Error::EmptyBag);
                            }
                            let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
                            let embeddings = self.bundle.encode_images(&refs)?;
                            Visual::Bag { images, embeddings }
                        }
                    })
                })
                .collect::<Result<_>>()?;
            let pooled: Vec<Vec<f64>> = match (&e_t, data.spec.level) {
                (None, _) => vec![Vec::new(); chunk.len()],
                (Some(_), Level::Patch) => {
                    let refs: Vec<&[f64]> = visuals
                        .iter()
                        .map(|v| match v {
                            Visual::Image(x) => x.as_slice(),
                            Visual::Bag { .. } => unreachable!(),
                        })
                        .collect();
                    let emb = self.bundle.encode_images(&refs)?;
                    (0..emb.rows()).map(|r| emb.row(r).to_vec()).collect()
                }
                (Some(_), Level::Slide) => visuals
                    .iter()
                    .map(|v| match v {
                        Visual::Bag { embeddings, .. } => aggregate_maxpool(embeddings),
                        Visual::Image(_) => unreachable!(),
                    })
                    .collect::<Result<_>>()?,
            };
            for ((item, visual), e_v) in chunk.iter().zip(visuals).zip(pooled) {
                let label_ids = self.vocab.encode_label(&item.label)?.ids;
                let query = match &e_t {
                    Some(t) => make_query(&e_v, t).vector,
                    None => Vec::new(),
                };
                if 1 + prompt.len() + label_ids.len() - 1 > cfg.max_seq_len {
                    return Err(Error::SequenceTooLong {
                        len: prompt.len() + label_ids.len(),
                        max: cfg.max_seq_len,
                    });
                }
                out.push(Example {
                    visual,
                    query,
                    label_ids,
                });
            }
        }
        Ok(out)
    }

    /// Visual token rows (`batch×d_t`) and, for bags, the attention column.
    fn visual_tokens(
        &self,
        g: &mut Graph,
        encoder: Option<&EncoderVars>,
        bound: &BoundSet,
        batch: &[&Example],
        dropout: &mut Dropout,
    ) -> Result<(Var, Option<Var>)> {
        let (e_v, att) = match (&bound.aggregator, encoder) {
            (None, Some(ev)) => {
                let imgs: Vec<&[f64]> = batch
                    .iter()
                    .map(|e| match &e.visual {
                        Visual::Image(x) => Ok(x.as_slice()),
                        Visual::Bag { .. } => Err(Error::InvalidInput("expected an image".into())),
                    })
                    .collect::<Result<_>>()?;
                let lora = bound.encoder_lora.as_ref();
                (ev.forward(g, self.bundle.config(), &imgs, lora, dropout)?, None)
            }
            (Some(agg), _) => {
                let (stacked, offsets) = stack_bags(batch)?;
                let e = g.constant(stacked);
                let (emb, att) = agg.forward(g, e, offsets);
                (emb, Some(att))
            }
            (None, None) => return Err(Error::InvalidInput("patch adaptors need the encoder".into())),
        };
        Ok((bound.projector.forward(g, e_v), att))
    }

    /// Teacher-forced token loss of `set` on `batch`.
    fn set_seq_loss(
        &self,
        g: &mut Graph,
        set: &AdaptorSet,
        bound: &BoundSet,
        batch: &[&Example],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let encoder = (set.level() == Level::Patch).then(|| self.bundle.encoder().bind(g, false));
        let (tokens, _) = self.visual_tokens(g, encoder.as_ref(), bound, batch, dropout)?;
        let dv = self.bundle.decoder().bind(g, false);
        let lm = loss_sequences(&set.prompt.ids, batch);
        dv.lm_loss(g, self.bundle.config(), tokens, &lm, Some(&bound.decoder_lora), dropout)
    }

    fn validation_loss(&self, set: &AdaptorSet, val: &[Example], teacher_forcing: bool) -> Result<f64> {
        let mut total = 0.0;
        if teacher_forcing {
            let refs: Vec<&Example> = val.iter().collect();
            for chunk in refs.chunks(32) {
                let mut g = Graph::new();
                let bound = bind_set(&mut g, set, false);
                let l = self.set_seq_loss(&mut g, set, &bound, chunk, &mut Dropout::eval())?;
                total += g.scalar(l) * chunk.len() as f64;
            }
        } else {
            for e in val {
                let (token, _) = self.visual_token_eval(set, e)?;
                total += self.free_running_loss(&token, &set.prompt, Some(&set.decoder_lora), &e.label_ids)?;
            }
        }
        Ok(total / val.len() as f64)
    }

    fn visual_token_eval(&self, set: &AdaptorSet, e: &Example) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let bound = bind_set(&mut g, set, false);
        let encoder = (set.level() == Level::Patch).then(|| self.bundle.encoder().bind(&mut g, false));
        let (tok, att) = self.visual_tokens(&mut g, encoder.as_ref(), &bound, &[e], &mut Dropout::eval())?;
        Ok((
            g.value(tok).clone().into_vec(),
            att.map(|a| g.value(a).clone().into_vec()),
        ))
    }

    /// Token loss when each step is fed the model's own greedy choice.
    fn free_running_loss(
        &self,
        visual_token: &[f64],
        prompt: &TokenSequence,
        lora: Option<&LoraSet>,
        targets: &[usize],
    ) -> Result<f64> {
        let mut states = self.initial_states(visual_token, prompt)?;
        let mut total = 0.0;
        for &t in targets {
            let logits = self.bundle.decode_step(&states, lora)?;
            total += sequence_loss(&Tensor::row_vector(&logits), &[t])?;
            let next = greedy_token(&logits);
            states = self.append_token(&states, next)?;
        }
        Ok(total / targets.len() as f64)
    }

    fn initial_states(&self, visual_token: &[f64], prompt: &TokenSequence) -> Result<Tensor> {
        let emb = &self.bundle.decoder().tok_embed;
        let mut rows = vec![visual_token.to_vec()];
        for &id in &prompt.ids {
            if id >= emb.rows() {
                return Err(Error::InvalidInput(format!("token id {id} outside vocabulary")));
            }
            rows.push(emb.row(id).to_vec());
        }
        Tensor::from_rows(&rows)
    }

    fn append_token(&self, states: &Tensor, id: usize) -> Result<Tensor> {
        let emb = &self.bundle.decoder().tok_embed;
        let mut data = states.data().to_vec();
        data.extend_from_slice(emb.row(id));
        Tensor::from_vec(states.rows() + 1, states.cols(), data)
    }

    /// Greedy decoding after `[visual_token, prompt…]` until EOS or `max_len` tokens.
    fn greedy_decode(
        &self,
        visual_token: &[f64],
        prompt: &TokenSequence,
        lora: Option<&LoraSet>,
        max_len: usize,
    ) -> Result<(Vec<usize>, bool)> {
        let mut states = self.initial_states(visual_token, prompt)?;
        let mut ids = Vec::new();
        while ids.len() < max_len && states.rows() <= self.bundle.config().max_seq_len {
            let next = greedy_token(&self.bundle.decode_step(&states, lora)?);
            ids.push(next);
            if next == EOS_ID {
                return Ok((ids, true));
            }
            states = self.append_token(&states, next)?;
        }
        Ok((ids, false))
    }

    fn result(&self, ids: Vec<usize>, terminated: bool, task_id: &str, attention: Option<Vec<f64>>) -> GenerationResult {
        let token_ids = TokenSequence { ids };
        GenerationResult {
            label_text: self.vocab.decode(&token_ids),
            token_ids,
            terminated_by_eos: terminated,
            retrieved_task_id: task_id.to_string(),
            attention,
        }
    }

    /// Generation with a given adaptor set (no retrieval).
    pub fn generate(
        &self,
        input: &Input,
        prompt: &TokenSequence,
        set: &AdaptorSet,
        max_len: usize,
    ) -> Result<GenerationResult> {
        check_level(input, set.level())?;
        let example = self.single_example(input)?;
        let (token, att) = self.visual_token_eval(set, &example)?;
        let (ids, terminated) = self.greedy_decode(&token, prompt, Some(&set.decoder_lora), max_len)?;
        Ok(self.result(ids, terminated, set.task_id(), att))
    }

    fn single_example(&self, input: &Input) -> Result<Example> {
        let visual = match input {
            Input::Patch(img) => Visual::Image(img.to_unit()),
            Input::Bag(bag) => {
                if bag.is_empty() {
                    return Err(Error::EmptyBag);
                }
                let images = bag_images(input).expect("bag");
                let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
                let embeddings = self.bundle.encode_images(&refs)?;
                Visual::Bag { images, embeddings }
            }
        };
        Ok(Example {
            visual,
            query: Vec::new(),
            label_ids: vec![EOS_ID],
        })
    }

    /// Retrieves the adaptor set for `(input, prompt)` and generates with it.
    pub fn infer(
        &self,
        input: &Input,
        prompt: &TokenSequence,
        store: &AdaptorStore,
        max_len: usize,
    ) -> Result<GenerationResult> {
        self.check_store(store)?;
        let q = self.query(input, prompt)?;
        let (_, set) = store.retrieve(&q, input.level())?;
        self.generate(input, prompt, set, max_len)
    }

    /// Bypasses retrieval and uses the named task's own prompt.
    pub fn infer_with_task(
        &self,
        input: &Input,
        task_id: &str,
        store: &AdaptorStore,
        max_len: usize,
    ) -> Result<GenerationResult> {
        self.check_store(store)?;
        let (_, set) = store.get(task_id).ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        self.generate(input, &set.prompt, set, max_len)
    }

    fn check_store(&self, store: &AdaptorStore) -> Result<()> {
        if store.backbone_checksum() != self.bundle.checksum() {
            return Err(Error::Compatibility {
                expected: self.bundle.checksum(),
                found: store.backbone_checksum().to_string(),
            });
        }
        Ok(())
    }

    fn check_training_inputs(&self, spec: &TaskSpec, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
        spec.validate()?;
        cfg.validate(self.bundle.config().max_seq_len)?;
        if &data.spec != spec {
            return Err(Error::InvalidData(format!(
                "dataset describes task {:?}, not {:?}",
                data.spec.task_id, spec.task_id
            )));
        }
        if data.items.is_empty() || data.split_len(Split::Train) == 0 || data.split_len(Split::Val) == 0 {
            return Err(Error::InvalidData(format!(
                "{}: dataset needs non-empty train and val splits",
                spec.task_id
            )));
        }
        data.validate()
    }

    /// Trains a new key and adaptor set for `spec`; the backbone and every
    /// stored pair stay untouched.
    pub fn train_task(
        &self,
        spec: &TaskSpec,
        data: &Dataset,
        store: &AdaptorStore,
        cfg: &TrainConfig,
    ) -> Result<TrainOutcome> {
        if !self.bundle.is_frozen() {
            return Err(Error::InvalidInput("backbone must be frozen before adding tasks".into()));
        }
        self.check_store(store)?;
        if store.contains(&spec.task_id) {
            return Err(Error::Conflict(spec.task_id.clone()));
        }
        self.check_training_inputs(spec, data, cfg)?;
        let started = Instant::now();
        let seed = derive_seed(cfg.seed, &spec.task_id);
        let prompt = self.vocab.encode_prompt(&spec.prompt)?;
        let shape = AdaptorShape::for_backbone(self.bundle.config(), &cfg.aggregator);
        let set = AdaptorSet::init(spec.clone(), prompt.clone(), shape.clone(), cfg.lora, derive_seed(seed, "adaptors"))?;
        let key = init_key(&spec.task_id, store.len(), shape.key_len(), seed);
        let train = self.prepare(data, Split::Train, true, &prompt)?;
        let val = self.prepare(data, Split::Val, false, &prompt)?;
        let prev = (!store.is_empty()).then(|| {
            let rows: Vec<Vec<f64>> = store.keys().iter().map(|k| k.vector.clone()).collect();
            Tensor::from_rows(&rows).expect("equal key lengths")
        });

        let mut state = (Tensor::row_vector(&key.vector), set);
        let model = AdaptorTrainer {
            engine: *self,
            prev_keys: prev,
        };
        let trace = run_training(&model, &mut state, &train, &val, cfg, seed, started)?;
        let (key_row, set) = state;
        let key = TaskKey {
            vector: key_row.into_vec(),
            ..key
        };
        Ok(TrainOutcome { key, set, trace })
    }

    /// Baseline: a full copy of the backbone trained end to end with its own
    /// projector (and aggregator for slides).
    pub fn train_task_full_finetune(
        &self,
        spec: &TaskSpec,
        data: &Dataset,
        cfg: &TrainConfig,
    ) -> Result<(FullFinetuneModel, TrainTrace)> {
        self.check_training_inputs(spec, data, cfg)?;
        let started = Instant::now();
        let seed = derive_seed(cfg.seed, &format!("{}-full", spec.task_id));
        let prompt = self.vocab.encode_prompt(&spec.prompt)?;
        let bcfg = self.bundle.config();
        let shape = AdaptorShape::for_backbone(bcfg, &cfg.aggregator);
        let mut rng = seeded_rng(derive_seed(seed, "init"));
        let mut model = FullFinetuneModel {
            backbone: self.bundle.unfrozen_copy(),
            projector: Projector::new(shape.d_v, shape.projector_hidden, shape.d_t, &mut rng),
            aggregator: (spec.level == Level::Slide).then(|| AttentionAggregator::new(shape.d_v, &cfg.aggregator, &mut rng)),
            spec: spec.clone(),
            prompt: prompt.clone(),
        };
        let train = self.prepare(data, Split::Train, false, &prompt)?;
        let val = self.prepare(data, Split::Val, false, &prompt)?;
        let trace = run_training(&FullModelTrainer, &mut model, &train, &val, cfg, seed, started)?;
        Ok((model, trace))
    }
}

// ---------------------------------------------------------------------------
// Shared training loop
// ---------------------------------------------------------------------------

struct BatchLoss {
    total: Var,
    key_loss: f64,
    seq_loss: f64,
    vars: Vec<Var>,
}

trait Trainer {
    type State: Clone;
    fn params_mut<'s>(&self, state: &'s mut Self::State) -> Vec<&'s mut Tensor>;
    fn batch_loss(&self, g: &mut Graph, state: &Self::State, batch: &[&Example], dropout: &mut Dropout) -> Result<BatchLoss>;
    fn val_loss(&self, state: &Self::State, val: &[Example], teacher_forcing: bool) -> Result<f64>;
    fn images_in(&self, batch: &[&Example]) -> usize {
        batch
            .iter()
            .map(|e| match &e.visual {
                Visual::Image(_) => 1,
                Visual::Bag { images, .. } => images.len(),
            })
            .sum()
    }
}

fn run_training<T: Trainer>(
    trainer: &T,
    state: &mut T::State,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    started: Instant,
) -> Result<TrainTrace> {
    let mut shuffle_rng = seeded_rng(derive_seed(seed, "shuffle"));
    let mut dropout_rng: SeededRng = seeded_rng(derive_seed(seed, "dropout"));
    let mut opt = Adam::new(cfg.optimizer, &trainer.params_mut(state));
    let batch_size = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, T::State)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let (mut lk, mut ls, mut lt, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let mut dropout = Dropout(Some(&mut dropout_rng));
            let bl = trainer.batch_loss(&mut g, state, &batch, &mut dropout)?;
            let total = g.scalar(bl.total);
            if !total.is_finite() {
                return Err(Error::InvalidData(format!("non-finite loss at epoch {epoch}")));
            }
            let mut grads = g.backward(bl.total);
            let gs: Vec<Tensor> = bl.vars.iter().map(|&v| grads.take(&g, v)).collect();
            opt.step(&mut trainer.params_mut(state), &gs, lr);
            trace.steps.push(StepRecord {
                key_loss: bl.key_loss,
                seq_loss: bl.seq_loss,
                total,
            });
            trace.images_seen += trainer.images_in(&batch);
            let w = batch.len() as f64;
            lk += bl.key_loss * w;
            ls += bl.seq_loss * w;
            lt += total * w;
            n += batch.len();
        }
        let val_metric = trainer.val_loss(state, val, cfg.teacher_forcing)?;
        let n = n as f64;
        trace.epochs.push(EpochRecord {
            epoch,
            key_loss: lk / n,
            seq_loss: ls / n,
            total: lt / n,
            val_metric,
            lr,
        });
        log::debug!("epoch {epoch}: L {:.4} val {val_metric:.4}", lt / n);
        if let Some(patience) = cfg.early_stopping_patience {
            if best.as_ref().is_none_or(|(b, _, _)| val_metric < *b) {
                best = Some((val_metric, epoch, state.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    trace.stopped_early = epoch + 1 < cfg.epochs;
                    break;
                }
            }
        }
    }
    trace.best_epoch = trace.epochs.len() - 1;
    if let Some((_, epoch, snapshot)) = best {
        *state = snapshot;
        trace.best_epoch = epoch;
    }
    trace.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(trace)
}

struct AdaptorTrainer<'a> {
    engine: Engine<'a>,
    prev_keys: Option<Tensor>,
}

impl Trainer for AdaptorTrainer<'_> {
    /// The key as a `1×n` row, and the adaptor set.
    type State = (Tensor, AdaptorSet);

    fn params_mut<'s>(&self, state: &'s mut Self::State) -> Vec<&'s mut Tensor> {
        let (key, set) = state;
        let mut out = vec![key];
        out.extend(set.params_mut());
        out
    }

    fn batch_loss(&self, g: &mut Graph, state: &Self::State, batch: &[&Example], dropout: &mut Dropout) -> Result<BatchLoss> {
        let (key, set) = state;
        let k = g.param(key.clone());
        let rows: Vec<Vec<f64>> = batch.iter().map(|e| e.query.clone()).collect();
        let q = g.constant(Tensor::from_rows(&rows)?);
        let prev = self.prev_keys.as_ref().map(|p| g.constant(p.clone()));
        let lk = key_loss_graph(g, k, q, prev);
        let bound = bind_set(g, set, true);
        let ls = self.engine.set_seq_loss(g, set, &bound, batch, dropout)?;
        let total = g.add(lk, ls);
        let mut vars = vec![k];
        vars.extend_from_slice(&bound.vars);
        Ok(BatchLoss {
            total,
            key_loss: g.scalar(lk),
            seq_loss: g.scalar(ls),
            vars,
        })
    }

    fn val_loss(&self, state: &Self::State, val: &[Example], teacher_forcing: bool) -> Result<f64> {
        self.engine.validation_loss(&state.1, val, teacher_forcing)
    }
}

/// Standalone per-task model trained without freezing.
#[derive(Clone, Debug, PartialEq)]
pub struct FullFinetuneModel {
    pub backbone: BackboneBundle,
    pub projector: Projector,
    pub aggregator: Option<AttentionAggregator>,
    pub spec: TaskSpec,
    pub prompt: TokenSequence,
}

impl FullFinetuneModel {
    pub fn param_count(&self) -> usize {
        self.backbone.param_count()
            + self.projector.param_count()
            + self.aggregator.as_ref().map_or(0, AttentionAggregator::param_count)
    }

    /// Bytes of a float32 checkpoint of everything the model needs to run.
    pub fn payload_bytes(&self) -> usize {
        self.param_count() * 4
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut().expect("baseline backbone is unfrozen");
        if let Some(a) = &mut self.aggregator {
            out.extend(a.params_mut());
        }
        out.extend(self.projector.params_mut());
        out
    }

    fn seq_loss(&self, g: &mut Graph, batch: &[&Example], trainable: bool) -> Result<(Var, Vec<Var>)> {
        let cfg = self.backbone.config();
        let ev = self.backbone.encoder().bind(g, trainable);
        let dv = self.backbone.decoder().bind(g, trainable);
        let mut vars: Vec<Var> = ev.vars().to_vec();
        vars.extend_from_slice(dv.vars());
        let e_v = match &self.aggregator {
            None => {
                let imgs: Vec<&[f64]> = batch
                    .iter()
                    .map(|e| match &e.visual {
                        Visual::Image(x) => Ok(x.as_slice()),
                        Visual::Bag { .. } => Err(Error::InvalidInput("expected an image".into())),
                    })
                    .collect::<Result<_>>()?;
                ev.forward(g, cfg, &imgs, None, &mut Dropout::eval())?
            }
            Some(agg) => {
                let mut imgs: Vec<&[f64]> = Vec::new();
                let mut offsets = vec![0];
                for e in batch {
                    let Visual::Bag { images, .. } = &e.visual else {
                        return Err(Error::InvalidInput("expected a bag".into()));
                    };
                    imgs.extend(images.iter().map(Vec::as_slice));
                    offsets.push(imgs.len());
                }
                let patch = ev.forward(g, cfg, &imgs, None, &mut Dropout::eval())?;
                let av = agg.bind(g, trainable);
                vars.extend(av.vars());
                av.forward(g, patch, offsets).0
            }
        };
        let pv = self.projector.bind(g, trainable);
        vars.extend_from_slice(pv.vars());
        let tokens = pv.forward(g, e_v);
        let lm = loss_sequences(&self.prompt.ids, batch);
        let loss = dv.lm_loss(g, cfg, tokens, &lm, None, &mut Dropout::eval())?;
        Ok((loss, vars))
    }

    /// Greedy prediction with the model's own prompt.
    pub fn predict(&self, vocab: &Vocabulary, input: &Input, max_len: usize) -> Result<GenerationResult> {
        check_level(input, self.spec.level)?;
        let engine = Engine {
            bundle: &self.backbone,
            vocab,
        };
        let example = engine.single_example(input)?;
        let mut g = Graph::new();
        let ev = self.backbone.encoder().bind(&mut g, false);
        let cfg = self.backbone.config();
        let (e_v, att) = match (&example.visual, &self.aggregator) {
            (Visual::Image(x), None) => (ev.forward(&mut g, cfg, &[x], None, &mut Dropout::eval())?, None),
            (Visual::Bag { embeddings, .. }, Some(agg)) => {
                let (emb, att) = agg.aggregate(embeddings)?;
                (g.constant(Tensor::row_vector(&emb)), Some(att))
            }
            _ => return Err(Error::InvalidInput("input does not match the model level".into())),
        };
        let pv = self.projector.bind(&mut g, false);
        let tok = pv.forward(&mut g, e_v);
        let token = g.value(tok).clone().into_vec();
        let (ids, terminated) = engine.greedy_decode(&token, &self.prompt, None, max_len)?;
        Ok(engine.result(ids, terminated, &self.spec.task_id, att))
    }
}

struct FullModelTrainer;

impl Trainer for FullModelTrainer {
    type State = FullFinetuneModel;

    fn params_mut<'s>(&self, state: &'s mut Self::State) -> Vec<&'s mut Tensor> {
        state.params_mut()
    }

    fn batch_loss(&self, g: &mut Graph, state: &Self::State, batch: &[&Example], _dropout: &mut Dropout) -> Result<BatchLoss> {
        let (loss, vars) = state.seq_loss(g, batch, true)?;
        Ok(BatchLoss {
            total: loss,
            key_loss: 0.0,
            seq_loss: g.scalar(loss),
            vars,
        })
    }

    fn val_loss(&self, state: &Self::State, val: &[Example], _teacher_forcing: bool) -> Result<f64> {
        let refs: Vec<&Example> = val.iter().collect();
        let mut total = 0.0;
        for chunk in refs.chunks(32) {
            let mut g = Graph::new();
            let (l, _) = state.seq_loss(&mut g, chunk, false)?;
            total += g.scalar(l) * chunk.len() as f64;
        }
        Ok(total / val.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::tasks::{generate_patch_task, generate_slide_task, IMAGE_SIDE};

    fn spec(id: &str, level: Level) -> TaskSpec {
        TaskSpec::new(id, "colon", "tissue type", &["adipose", "stroma"], level)
    }

    struct Fixture {
        bundle: BackboneBundle,
        vocab: Vocabulary,
        patch: Dataset,
        slide: Dataset,
    }

    fn fixture() -> Fixture {
        let p = spec("t_patch", Level::Patch);
        let mut s = spec("t_slide", Level::Slide);
        s.organ = "breast".into();
        s.prompt = crate::tasks::make_prompt("breast", "tissue type");
        let vocab = Vocabulary::build(&[p.clone(), s.clone()]).unwrap();
        let cfg = BackboneConfig {
            image_size: IMAGE_SIDE,
            patch_size: 8,
            d_v: 16,
            d_t: 16,
            n_layers_v: 1,
            n_layers_t: 1,
            n_heads: 2,
            max_seq_len: 16,
            vocab_size: vocab.len(),
            ffn_mult: 2,
        };
        Fixture {
            bundle: BackboneBundle::init(cfg, 5).unwrap().freeze(),
            vocab,
            patch: generate_patch_task(&p, 10, 1).unwrap(),
            slide: generate_slide_task(&s, 10, (2, 3), 2).unwrap(),
        }
    }

    fn quick(level: Level) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::for_level(level)
        }
    }

    #[test]
    fn sequence_loss_examples() {
        let v = 7;
        let targets = [2, 5, 1];
        let mut confident = Tensor::zeros(3, v);
        for (r, &t) in targets.iter().enumerate() {
            confident.set(r, t, 80.0);
        }
        assert!(sequence_loss(&confident, &targets).unwrap() < 1e-30);
        let uniform = Tensor::zeros(3, v);
        assert!((sequence_loss(&uniform, &targets).unwrap() - (v as f64).ln()).abs() < 1e-12);
        let mut skewed = Tensor::zeros(2, v);
        skewed.set(0, 2, 1.5);
        skewed.set(1, 4, 0.7);
        let a = sequence_loss(&skewed, &[2, 4]).unwrap();
        let b = sequence_loss(&skewed, &[4, 2]).unwrap();
        assert!((a - b).abs() > 1e-3);
        assert!(sequence_loss(&uniform, &[1]).is_err());
        assert!(sequence_loss(&Tensor::zeros(1, v), &[v]).is_err());
    }

    #[test]
    fn greedy_token_skips_pad_and_breaks_ties_low() {
        let mut l = vec![0.0; 5];
        l[PAD_ID] = 9.0;
        l[3] = 1.0;
        l[4] = 1.0;
        assert_eq!(greedy_token(&l), 3);
    }

    #[test]
    fn zero_learning_rate_returns_the_initialisation() {
        let f = fixture();
        let engine = Engine::new(&f.bundle, &f.vocab).unwrap();
        let store = AdaptorStore::new(&f.bundle.checksum());
        let cfg = TrainConfig { lr: 0.0, ..quick(Level::Patch) };
        let out = engine.train_task(&f.patch.spec, &f.patch, &store, &cfg).unwrap();
        let seed = derive_seed(cfg.seed, "t_patch");
        let shape = AdaptorShape::for_backbone(f.bundle.config(), &cfg.aggregator);
        let prompt = f.vocab.encode_prompt(&f.patch.spec.prompt).unwrap();
        let init = AdaptorSet::init(f.patch.spec.clone(), prompt, shape.clone(), cfg.lora, derive_seed(seed, "adaptors")).unwrap();
        assert_eq!(out.set, init);
        assert_eq!(out.key, init_key("t_patch", 0, shape.key_len(), seed));
    }

    #[test]
    fn total_loss_is_the_sum_of_its_parts() {
        let f = fixture();
        let engine = Engine::new(&f.bundle, &f.vocab).unwrap();
        let mut store = AdaptorStore::new(&f.bundle.checksum());
        let out = engine.train_task(&f.patch.spec, &f.patch, &store, &quick(Level::Patch)).unwrap();
        store.add_task(out.key, out.set).unwrap();
        let out = engine.train_task(&f.slide.spec, &f.slide, &store, &quick(Level::Slide)).unwrap();
        assert!(!out.trace.steps.is_empty());
        for s in &out.trace.steps {
            assert!((s.total - (s.key_loss + s.seq_loss)).abs() < 1e-6, "{s:?}");
        }
        for e in &out.trace.epochs {
            assert!((e.total - (e.key_loss + e.seq_loss)).abs() < 1e-6);
        }
        assert_eq!(out.trace.to_csv().lines().count(), out.trace.epochs.len() + 1);
    }

    #[test]
    fn training_leaves_backbone_and_store_untouched() {
        let f = fixture();
        let before = f.bundle.checksum();
        let engine = Engine::new(&f.bundle, &f.vocab).unwrap();
        let mut store = AdaptorStore::new(&before);
        let out = engine.train_task(&f.patch.spec, &f.patch, &store, &quick(Level::Patch)).unwrap();
        store.add_task(out.key, out.set).unwrap();
        let snapshot = store.clone();
        let x = &f.patch.items[0].input;
        let prompt = f.vocab.encode_prompt(&f.patch.spec.prompt).unwrap();
        let r0 = engine.infer(x, &prompt, &store, 4).unwrap();
        let out = engine.train_task(&f.slide.spec, &f.slide, &store, &quick(Level::Slide)).unwrap();
        assert_eq!(f.bundle.checksum(), before);
        assert_eq!(store, snapshot);
        store.add_task(out.key, out.set).unwrap();
        assert_eq!(engine.infer_with_task(x, "t_patch", &store, 4).unwrap(), r0);
        let dup = engine.train_task(&f.patch.spec, &f.patch, &store, &quick(Level::Patch));
        assert_eq!(dup.unwrap_err().kind(), "conflict");
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let f = fixture();
        let engine = Engine::new(&f.bundle, &f.vocab).unwrap();
        let mut store = AdaptorStore::new(&f.bundle.checksum());
        let prompt = f.vocab.encode_prompt(&f.slide.spec.prompt).unwrap();
        assert_eq!(
            engine.infer(&f.slide.items[0].input, &prompt, &store, 4).unwrap_err().kind(),
            "no_tasks"
        );
        let out = engine.train_task(&f.slide.spec, &f.slide, &store, &quick(Level::Slide)).unwrap();
        store.add_task(out.key, out.set).unwrap();
        for item in &f.slide.items {
            for max_len in [1, 3] {
                let a = engine.infer(&item.input, &prompt, &store, max_len).unwrap();
                let b = engine.infer(&item.input, &prompt, &store, max_len).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.retrieved_task_id, "t_slide");
                assert!(a.token_ids.len() <= max_len);
                assert!(a.terminated_by_eos || a.token_ids.len() == max_len);
                let att = a.attention.as_ref().unwrap();
                let Input::Bag(bag) = &item.input else { unreachable!() };
                assert_eq!(att.len(), bag.len());
                assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let patch = &f.patch.items[0].input;
        assert_eq!(engine.infer(patch, &prompt, &store, 3).unwrap_err().kind(), "no_tasks");
    }

    #[test]
    fn retrieval_only_considers_tasks_of_the_input_level() {
        let f = fixture();
        let engine = Engine::new(&f.bundle, &f.vocab).unwrap();
        let mut store = AdaptorStore::new(&f.bundle.checksum());
        for data in [&f.patch, &f.slide] {
            let out = engine.train_task(&data.spec, data, &store, &quick(data.spec.level)).unwrap();
            store.add_task(out.key, out.set).unwrap();
        }
        // Either prompt, so the key alone never decides the level.
        for prompt in [&f.patch.spec.prompt, &f.slide.spec.prompt] {
            let prompt = f.vocab.encode_prompt(prompt).unwrap();
            for (data, id) in [(&f.patch, "t_patch"), (&f.slide, "t_slide")] {
                for item in &data.items {
                    assert_eq!(engine.infer(&item.input, &prompt, &store, 3).unwrap().retrieved_task_id, id);
                }
            }
        }
    }

    #[test]
    fn early_stopping_returns_the_best_epoch() {
        let f = fixture();
        let engine = Engine::new(&f.bundle, &f.vocab).unwrap();
        let store = AdaptorStore::new(&f.bundle.checksum());
        let cfg = TrainConfig {
            epochs: 12,
            lr: 0.05,
            early_stopping_patience: Some(2),
            ..quick(Level::Slide)
        };
        let out = engine.train_task(&f.slide.spec, &f.slide, &store, &cfg).unwrap();
        let t = &out.trace;
        let best = t.epochs[t.best_epoch].val_metric;
        assert!(t.epochs.iter().all(|e| e.val_metric >= best));
        assert!(t.epochs[..t.best_epoch].iter().all(|e| e.val_metric > best));
        let val = engine.prepare(&f.slide, Split::Val, false, &out.set.prompt).unwrap();
        let restored = engine.validation_loss(&out.set, &val, true).unwrap();
        assert!((restored - best).abs() < 1e-9);
    }
}
