//! Closed word-level vocabulary over task prompts and class-label phrases.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::TaskSpec;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn terminated(&self) -> bool {
        self.ids.last() == Some(&EOS_ID)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocabulary {
    /// Builds the vocabulary over every prompt and label word of `specs`.
    pub fn build(specs: &[TaskSpec]) -> Result<Self> {
        let mut words = BTreeSet::new();
        for spec in specs {
            if spec.prompt.trim().is_empty() {
                return Err(Error::InvalidTask(format!("task {:?} has an empty prompt", spec.task_id)));
            }
            if spec.labels.is_empty() {
                return Err(Error::InvalidTask(format!("task {:?} has no labels", spec.task_id)));
            }
            for label in &spec.labels {
                if label.trim().is_empty() {
                    return Err(Error::InvalidTask(format!(
                        "task {:?} has an empty label",
                        spec.task_id
                    )));
                }
            }
            for text in std::iter::once(&spec.prompt).chain(&spec.labels) {
                for w in normalize(text).split(' ') {
                    if w != PAD_TOKEN && w != EOS_TOKEN {
                        words.insert(w.to_string());
                    }
                }
            }
        }
        let tokens = [PAD_TOKEN.to_string(), EOS_TOKEN.to_string()]
            .into_iter()
            .chain(words)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, id_of }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.id_of.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Ok(Vec::new());
        }
        norm.split(' ')
            .map(|w| match self.id(w) {
                Some(id) if id != PAD_ID && id != EOS_ID => Ok(id),
                _ => Err(Error::OutOfVocabulary(w.to_string())),
            })
            .collect()
    }

    pub fn encode_prompt(&self, text: &str) -> Result<TokenSequence> {
        Ok(TokenSequence {
            ids: self.encode_words(text)?,
        })
    }

    /// Label words followed by EOS.
    pub fn encode_label(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = self.encode_words(text)?;
        ids.push(EOS_ID);
        Ok(TokenSequence { ids })
    }

    /// Joins tokens with single spaces, dropping EOS and PAD.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .filter(|&&id| id != PAD_ID && id != EOS_ID)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[EOS_ID] != EOS_TOKEN {
            return Err(Error::InvalidData(format!(
                "{} does not start with {PAD_TOKEN} and {EOS_TOKEN}",
                path.display()
            )));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(Error::InvalidData(format!("{} has duplicate tokens", path.display())));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{Level, TaskSpec};
    use proptest::prelude::*;

    fn spec(id: &str, prompt: &str, labels: &[&str]) -> TaskSpec {
        TaskSpec {
            task_id: id.into(),
            organ: "colon".into(),
            category: "cancer grade".into(),
            prompt: prompt.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            level: Level::Patch,
            cancer_labels: vec![],
        }
    }

    fn fixture() -> Vec<TaskSpec> {
        vec![
            spec(
                "a",
                "The cancer grade of this colon tissue is",
                &["benign", "well differentiated cancer"],
            ),
            spec("b", "The metastasis screening of this breast tissue is", &["normal", "cancer"]),
        ]
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocabulary::build(&[]).unwrap();
        assert_eq!(v.tokens(), &[PAD_TOKEN, EOS_TOKEN]);
    }

    #[test]
    fn shared_words_are_deduplicated() {
        let v = Vocabulary::build(&fixture()).unwrap();
        // the cancer grade of this colon tissue is benign well differentiated
        // metastasis screening breast normal -> 15 unique words
        assert_eq!(v.len(), 15 + 2);
        assert_eq!(v.tokens().iter().filter(|t| *t == "cancer").count(), 1);
    }

    #[test]
    fn prompt_words_are_present() {
        let v = Vocabulary::build(&fixture()).unwrap();
        for w in ["the", "cancer", "grade", "of", "this", "colon", "tissue", "is"] {
            assert!(v.id(w).is_some(), "{w}");
        }
    }

    #[test]
    fn empty_label_is_rejected() {
        let err = Vocabulary::build(&[spec("x", "the prompt", &["  "])]).unwrap_err();
        assert!(matches!(err, Error::InvalidTask(_)));
    }

    #[test]
    fn label_encoding_appends_eos() {
        let v = Vocabulary::build(&fixture()).unwrap();
        let seq = v.encode_label("benign").unwrap();
        assert_eq!(seq.ids, vec![v.id("benign").unwrap(), EOS_ID]);
        assert!(seq.terminated());
        assert_eq!(
            v.decode(&v.encode_label("well differentiated cancer").unwrap()),
            "well differentiated cancer"
        );
    }

    #[test]
    fn prompt_encoding_is_case_insensitive() {
        let v = Vocabulary::build(&fixture()).unwrap();
        let a = v.encode_prompt("The Cancer grade of  this colon tissue is").unwrap();
        let b = v.encode_prompt("the cancer grade of this colon tissue is").unwrap();
        assert_eq!(a, b);
        assert!(!a.ids.contains(&EOS_ID));
    }

    #[test]
    fn oov_names_the_word() {
        let v = Vocabulary::build(&fixture()).unwrap();
        match v.encode_prompt("the lung tissue") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, "lung"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&fixture()).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\n<eos>\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn build_is_order_independent(rot in 0usize..2) {
            let mut specs = fixture();
            specs.rotate_left(rot);
            prop_assert_eq!(Vocabulary::build(&specs).unwrap(), Vocabulary::build(&fixture()).unwrap());
        }

        #[test]
        fn label_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 1..4), upper in any::<bool>()) {
            let label = words.join("  ");
            let spec = spec("p", "the prompt", &[&label]);
            let v = Vocabulary::build(&[spec]).unwrap();
            let input = if upper { label.to_uppercase() } else { label.clone() };
            let seq = v.encode_label(&input).unwrap();
            prop_assert!(seq.terminated());
            prop_assert_eq!(v.decode(&seq), normalize(&label));
        }
    }
}
