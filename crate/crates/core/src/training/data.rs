//! Training sequences, loss masks and corpus files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::tokenizer::ByteTokenizer;

/// Which positions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Loss on response tokens only.
    #[default]
    Instruct,
    /// Loss on every token.
    Pretrain,
}

/// A token sequence whose first `prompt_len` tokens are the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub prompt_len: usize,
}

/// Inputs, next-token targets and the loss mask of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn new(inputs: Vec<u32>, targets: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if inputs.len() != targets.len() || targets.len() != mask.len() {
            return Err(Error::Shape("inputs, targets and mask differ in length".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        Ok(Batch { inputs, targets, mask })
    }

    /// Shift `seq` by one; under `Instruct` a target counts only past the prompt.
    pub fn from_sequence(seq: &Sequence, regime: Regime) -> Result<Self> {
        if seq.tokens.len() < 2 {
            return Err(Error::Shape("a training sequence needs at least two tokens".into()));
        }
        let n = seq.tokens.len() - 1;
        let mask = (0..n)
            .map(|t| match regime {
                Regime::Pretrain => true,
                Regime::Instruct => t + 1 >= seq.prompt_len,
            })
            .collect();
        Self::new(seq.tokens[..n].to_vec(), seq.tokens[1..].to_vec(), mask)
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One corpus line: explicit tokens, a prompt/response pair, or plain text.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CorpusLine {
    Tokens {
        tokens: Vec<u32>,
        #[serde(default)]
        prompt_len: usize,
    },
    Pair {
        prompt: String,
        response: String,
    },
    Text {
        text: String,
    },
}

/// Read a JSON-lines corpus. Text is tokenized with the byte tokenizer.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tok = ByteTokenizer;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(match serde_json::from_str::<CorpusLine>(line)? {
            CorpusLine::Tokens { tokens, prompt_len } => Sequence { tokens, prompt_len },
            CorpusLine::Pair { prompt, response } => {
                let mut tokens = tok.encode(&prompt);
                let prompt_len = tokens.len();
                tokens.extend(tok.encode(&response));
                Sequence { tokens, prompt_len }
            }
            CorpusLine::Text { text } => Sequence {
                tokens: tok.encode(&text),
                prompt_len: 0,
            },
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}
