//! Character-level synthetic seq2seq tasks, batching and few-shot splits.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PhaError, Result};
use crate::transformer::TokenGrid;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;
pub const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789<>=*#";
pub const VOCAB_SIZE: usize = SPECIALS + CHARSET.len();
pub const MAX_LEN: usize = 32;
const VOWELS: &str = "aeiou";

pub fn char_id(c: char) -> Result<usize> {
    CHARSET
        .find(c)
        .map(|i| i + SPECIALS)
        .ok_or_else(|| PhaError::Tokenize(format!("character {c:?} is not in the vocabulary")))
}

/// `[BOS, chars.., EOS]`.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    for c in text.chars() {
        out.push(char_id(c)?);
    }
    out.push(EOS);
    Ok(out)
}

/// Inverse of [`tokenize`]: specials are dropped, decoding stops at EOS.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut s = String::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD | BOS => {}
            _ => {
                let c = CHARSET
                    .as_bytes()
                    .get(id - SPECIALS)
                    .ok_or_else(|| PhaError::Tokenize(format!("token id {id} out of range")))?;
                s.push(*c as char);
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Copy,
    Reverse,
    Sort,
    ShiftCipher,
    VowelMask,
    PairCompare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub family: Family,
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Only meaningful for the shift cipher.
    #[serde(default)]
    pub shift: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PhaError::Config(format!("task {:?}: {m}", self.name)));
        if self.alphabet.is_empty() {
            return err("empty alphabet".into());
        }
        for c in self.alphabet.chars() {
            if char_id(c).is_err() {
                return err(format!("alphabet character {c:?} outside vocabulary"));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return err(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        // Longest input must still fit with BOS/EOS.
        let longest = match self.family {
            Family::PairCompare => 2 * self.max_len + 1,
            _ => self.max_len,
        };
        if longest + 2 > MAX_LEN {
            return err(format!("sequences of {longest} characters exceed max_len {MAX_LEN}"));
        }
        if self.family == Family::ShiftCipher && self.shift % self.alphabet.len() == 0 {
            return err("shift cipher with a zero shift is a copy".into());
        }
        Ok(())
    }

    /// The reference transform from input text to target text.
    pub fn apply(&self, input: &str) -> Result<String> {
        Ok(match self.family {
            Family::Copy => input.to_string(),
            Family::Reverse => input.chars().rev().collect(),
            Family::Sort => {
                let mut c: Vec<char> = input.chars().collect();
                c.sort_unstable();
                c.into_iter().collect()
            }
            Family::ShiftCipher => {
                let alpha: Vec<char> = self.alphabet.chars().collect();
                input
                    .chars()
                    .map(|c| {
                        let i = alpha.iter().position(|&a| a == c).ok_or_else(|| {
                            PhaError::Tokenize(format!("{c:?} outside cipher alphabet"))
                        })?;
                        Ok(alpha[(i + self.shift) % alpha.len()])
                    })
                    .collect::<Result<String>>()?
            }
            Family::VowelMask => input
                .chars()
                .map(|c| if VOWELS.contains(c) { '*' } else { c })
                .collect(),
            Family::PairCompare => {
                let (a, b) = input
                    .split_once('=')
                    .ok_or_else(|| PhaError::Tokenize(format!("pair input {input:?} lacks '='")))?;
                match a.cmp(b) {
                    std::cmp::Ordering::Less => "<",
                    std::cmp::Ordering::Equal => "=",
                    std::cmp::Ordering::Greater => ">",
                }
                .to_string()
            }
        })
    }

    fn sample_input<R: Rng>(&self, rng: &mut R) -> String {
        let alpha: Vec<char> = self.alphabet.chars().collect();
        let len = rng.random_range(self.min_len..=self.max_len);
        let word = |rng: &mut R, n: usize| -> String { (0..n).map(|_| alpha[rng.random_range(0..alpha.len())]).collect() };
        match self.family {
            Family::PairCompare => {
                let a = word(rng, len);
                // Equal pairs would otherwise almost never occur.
                let b = if rng.random_bool(0.2) { a.clone() } else { word(rng, len) };
                format!("{a}={b}")
            }
            _ => word(rng, len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub task_id: usize,
}

/// Deterministic stream of `n` examples; the same spec and `seed` always
/// give the same list.
pub fn generate_examples(spec: &TaskSpec, task_id: usize, n: usize, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    if n == 0 {
        return Err(PhaError::Contract("generate_examples with n = 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ seed.rotate_left(17));
    (0..n)
        .map(|_| {
            let input = spec.sample_input(&mut rng);
            let target = spec.apply(&input)?;
            Ok(Example {
                input: tokenize(&input)?,
                target: tokenize(&target)?,
                task_id,
            })
        })
        .collect()
}

/// A padded mini-batch ready for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub src: TokenGrid,
    /// Decoder input: target tokens without the final one.
    pub tgt_in: TokenGrid,
    /// Next-token labels aligned with `tgt_in`, `PAD` where ignored.
    pub labels: Vec<usize>,
    pub task_ids: Vec<usize>,
    /// In-batch count per task.
    pub counts: BTreeMap<usize, usize>,
}

impl TaskBatch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(PhaError::Contract("empty batch".into()));
        }
        let src: Vec<Vec<usize>> = examples.iter().map(|e| e.input.clone()).collect();
        let tin: Vec<Vec<usize>> = examples.iter().map(|e| e.target[..e.target.len() - 1].to_vec()).collect();
        let tout: Vec<Vec<usize>> = examples.iter().map(|e| e.target[1..].to_vec()).collect();
        let src = TokenGrid::from_sequences(&src, PAD)?;
        let tgt_in = TokenGrid::from_sequences(&tin, PAD)?;
        let labels = TokenGrid::from_sequences(&tout, PAD)?.ids;
        let task_ids: Vec<usize> = examples.iter().map(|e| e.task_id).collect();
        let mut counts = BTreeMap::new();
        for &t in &task_ids {
            *counts.entry(t).or_insert(0) += 1;
        }
        Ok(Self {
            src,
            tgt_in,
            labels,
            task_ids,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }
}

/// Draw `batch_size` examples uniformly from the concatenation of all
/// datasets, so each task appears in proportion to its size.
pub fn sample_multitask_batch<R: Rng>(datasets: &[Vec<Example>], batch_size: usize, rng: &mut R) -> Result<TaskBatch> {
    if batch_size < 2 {
        return Err(PhaError::Contract(format!("batch_size {batch_size} < 2")));
    }
    let total: usize = datasets.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(PhaError::Contract("all datasets are empty".into()));
    }
    let mut picked = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut i = rng.random_range(0..total);
        for ds in datasets {
            if i < ds.len() {
                picked.push(&ds[i]);
                break;
            }
            i -= ds.len();
        }
    }
    TaskBatch::from_examples(&picked)
}

/// `k` support examples and the disjoint remainder.
pub fn split_few_shot(dataset: &[Example], k: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if k == 0 || k >= dataset.len() {
        return Err(PhaError::Contract(format!(
            "cannot take {k} shots from {} examples",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let support = idx[..k].iter().map(|&i| dataset[i].clone()).collect();
    let mut rest: Vec<usize> = idx[k..].to_vec();
    rest.sort_unstable();
    Ok((support, rest.into_iter().map(|i| dataset[i].clone()).collect()))
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    task: String,
    input: String,
    target: String,
}

pub fn dump_jsonl<W: Write>(mut out: W, task_names: &[String], examples: &[Example]) -> Result<()> {
    for e in examples {
        let name = task_names
            .get(e.task_id)
            .ok_or_else(|| PhaError::Index(format!("task id {} has no name", e.task_id)))?;
        let rec = JsonlRecord {
            task: name.clone(),
            input: detokenize(&e.input)?,
            target: detokenize(&e.target)?,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl<R: BufRead>(input: R, task_names: &[String]) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)?;
        let task_id = task_names
            .iter()
            .position(|n| *n == rec.task)
            .ok_or_else(|| PhaError::Config(format!("unknown task {:?}", rec.task)))?;
        out.push(Example {
            input: tokenize(&rec.input)?,
            target: tokenize(&rec.target)?,
            task_id,
        });
    }
    Ok(out)
}

fn spec(name: &str, family: Family, alphabet: &str, len: (usize, usize), seed: u64, shift: usize) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        family,
        alphabet: alphabet.into(),
        min_len: len.0,
        max_len: len.1,
        seed,
        shift,
    }
}

/// Six registered tasks, one per family, each with its own input alphabet
/// and length range.
pub fn reference_suite() -> Vec<TaskSpec> {
    vec![
        spec("copy", Family::Copy, "abcdef", (3, 5), 11, 0),
        spec("reverse", Family::Reverse, "ghijkl", (3, 5), 12, 0),
        spec("sort", Family::Sort, "mnopqr", (3, 5), 13, 0),
        spec("cipher", Family::ShiftCipher, "0123456789", (3, 6), 14, 1),
        spec("vowel_mask", Family::VowelMask, "aeiouxyz", (4, 6), 15, 0),
        spec("pair_compare", Family::PairCompare, "stuvw", (2, 3), 16, 0),
    ]
}

/// Shift cipher over the registered cipher's alphabet with a different
/// shift; never trained on.
pub fn held_out_cipher() -> TaskSpec {
    spec("cipher_heldout", Family::ShiftCipher, "0123456789", (3, 6), 17, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_round_trip() {
        assert_eq!(VOCAB_SIZE, 44);
        assert_eq!(detokenize(&tokenize("abc").unwrap()).unwrap(), "abc");
        assert_eq!(tokenize("").unwrap(), vec![BOS, EOS]);
        assert!(matches!(tokenize("aB"), Err(PhaError::Tokenize(_))));
    }

    #[test]
    fn family_rules() {
        let mk = |f| spec("t", f, "abc", (1, 3), 0, 1);
        assert_eq!(mk(Family::Copy).apply("abc").unwrap(), "abc");
        assert_eq!(mk(Family::Reverse).apply("abc").unwrap(), "cba");
        assert_eq!(mk(Family::Sort).apply("bca").unwrap(), "abc");
        assert_eq!(mk(Family::ShiftCipher).apply("abc").unwrap(), "bca");
        assert_eq!(mk(Family::VowelMask).apply("bae").unwrap(), "b**");
        assert_eq!(mk(Family::PairCompare).apply("ab=ac").unwrap(), "<");
        assert_eq!(mk(Family::PairCompare).apply("ab=ab").unwrap(), "=");
    }

    #[test]
    fn suite_is_valid() {
        for s in reference_suite().iter().chain([held_out_cipher()].iter()) {
            s.validate().unwrap();
        }
        let mut bad = held_out_cipher();
        bad.shift = 10;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_alignment() {
        let s = &reference_suite()[0];
        let ex = generate_examples(s, 0, 3, 0).unwrap();
        let b = TaskBatch::from_examples(&ex.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(b.tgt_in.batch, 3);
        for i in 0..3 {
            let t = &ex[i].target;
            let row = &b.tgt_in.ids[i * b.tgt_in.len..][..t.len() - 1];
            assert_eq!(row, &t[..t.len() - 1]);
            let lab = &b.labels[i * b.tgt_in.len..][..t.len() - 1];
            assert_eq!(lab, &t[1..]);
        }
    }

    #[test]
    fn few_shot_split_is_disjoint_and_deterministic() {
        let s = &reference_suite()[1];
        let data: Vec<Example> = generate_examples(s, 0, 40, 0).unwrap();
        let (a, rest) = split_few_shot(&data, 16, 5).unwrap();
        assert_eq!((a.len(), rest.len()), (16, 24));
        let (b, _) = split_few_shot(&data, 16, 5).unwrap();
        assert_eq!(a, b);
        assert!(split_few_shot(&data, 40, 5).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let names: Vec<String> = reference_suite().iter().map(|s| s.name.clone()).collect();
        let ex = generate_examples(&reference_suite()[5], 5, 4, 1).unwrap();
        let mut buf = Vec::new();
        dump_jsonl(&mut buf, &names, &ex).unwrap();
        assert_eq!(load_jsonl(&buf[..], &names).unwrap(), ex);
    }
}
