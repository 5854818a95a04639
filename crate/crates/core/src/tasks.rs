//! Seeded synthetic classification tasks whose label depends on a few marked
//! token positions.
//!
//! Token layout: `0` is padding, `1..=num_classes` is the signal alphabet
//! (token `t` carries value `t - 1`), and every larger id is filler. The label
//! is the sum of the signal values modulo `num_classes`. Labels are drawn in
//! balanced blocks, so any prefix whose length is a multiple of
//! `num_classes` is exactly class-balanced.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Rng;

pub const PAD: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub signal_positions: Vec<usize>,
}

impl Example {
    /// 1 for real tokens, 0 for padding.
    pub fn valid_mask(&self) -> Vec<f64> {
        self.tokens.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
}

/// Parameters of [`gen_sparse_signal_task`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub k_signal: usize,
    /// Shortest sequence; shorter sequences are right-padded. Defaults to
    /// `seq_len` (no padding).
    #[serde(default)]
    pub min_len: Option<usize>,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            seq_len: 32,
            vocab_size: 64,
            num_classes: 4,
            k_signal: 2,
            min_len: None,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        let min_len = self.min_len.unwrap_or(self.seq_len);
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.vocab_size < self.num_classes + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} must be at least num_classes + 2 = {}",
                self.vocab_size,
                self.num_classes + 2
            )));
        }
        if self.k_signal == 0 || self.k_signal > self.seq_len {
            return Err(Error::Config(format!(
                "k_signal {} must lie in [1, seq_len = {}]",
                self.k_signal, self.seq_len
            )));
        }
        if min_len < self.k_signal || min_len > self.seq_len {
            return Err(Error::Config(format!(
                "min_len {min_len} must lie in [k_signal, seq_len]"
            )));
        }
        Ok(())
    }

    fn filler_range(&self) -> (u32, u32) {
        (self.num_classes as u32 + 1, self.vocab_size as u32)
    }
}

/// Whether `token` belongs to the signal alphabet of a task with
/// `num_classes` classes.
pub fn is_signal_token(token: u32, num_classes: usize) -> bool {
    token >= 1 && (token as usize) <= num_classes
}

/// Label as a function of the tokens at the signal positions.
pub fn label_of(tokens: &[u32], signal_positions: &[usize], num_classes: usize) -> usize {
    signal_positions.iter().map(|&p| tokens[p] as usize - 1).sum::<usize>() % num_classes
}

pub fn gen_sparse_signal_task(seed: u64, n_examples: usize, params: &TaskParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = Rng::new(seed);
    let c = params.num_classes;
    let min_len = params.min_len.unwrap_or(params.seq_len);
    let (filler_lo, filler_hi) = params.filler_range();

    let mut labels = Vec::with_capacity(n_examples);
    while labels.len() < n_examples {
        let mut block: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut block);
        labels.extend(block);
    }
    labels.truncate(n_examples);

    let mut examples = Vec::with_capacity(n_examples);
    for label in labels {
        let len = min_len + rng.below(params.seq_len - min_len + 1);
        let mut positions: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut positions);
        positions.truncate(params.k_signal);
        positions.sort_unstable();

        // k-1 free signal values; the last one closes the sum to the label.
        let mut values: Vec<usize> = (0..params.k_signal - 1).map(|_| rng.below(c)).collect();
        let partial: usize = values.iter().sum::<usize>() % c;
        values.push((label + c - partial) % c);

        let mut tokens = vec![PAD; params.seq_len];
        for t in tokens.iter_mut().take(len) {
            *t = filler_lo + rng.below((filler_hi - filler_lo) as usize) as u32;
        }
        for (&p, &v) in positions.iter().zip(&values) {
            tokens[p] = v as u32 + 1;
        }
        examples.push(Example {
            tokens,
            label,
            signal_positions: positions,
        });
    }
    Ok(Dataset {
        examples,
        vocab_size: params.vocab_size,
        seq_len: params.seq_len,
        num_classes: c,
    })
}

/// How a shifted task derives from its base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftRule {
    Identity,
    /// New label is `perm[old label]`.
    PermuteClasses {
        perm: Vec<usize>,
    },
    /// Signal tokens move to fresh positions; labels are unchanged.
    MoveSignal,
}

pub fn gen_shifted_task(base: &Dataset, seed: u64, rule: &ShiftRule) -> Result<Dataset> {
    base.validate()?;
    match rule {
        ShiftRule::Identity => Ok(base.clone()),
        ShiftRule::PermuteClasses { perm } => {
            let mut seen = vec![false; base.num_classes];
            if perm.len() != base.num_classes {
                return Err(Error::Config(format!(
                    "permutation has {} entries for {} classes",
                    perm.len(),
                    base.num_classes
                )));
            }
            for &p in perm {
                if p >= base.num_classes || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::Config(format!("{perm:?} is not a permutation")));
                }
            }
            let mut out = base.clone();
            for ex in &mut out.examples {
                ex.label = perm[ex.label];
            }
            Ok(out)
        }
        ShiftRule::MoveSignal => {
            let mut rng = Rng::new(seed);
            let mut out = base.clone();
            for ex in &mut out.examples {
                let len = ex.tokens.iter().filter(|&&t| t != PAD).count();
                let k = ex.signal_positions.len();
                if k == len {
                    return Err(Error::Config(
                        "cannot move signal positions when every position is signal".into(),
                    ));
                }
                let new_positions = loop {
                    let mut candidates: Vec<usize> = if 2 * k <= len {
                        (0..len).filter(|p| !ex.signal_positions.contains(p)).collect()
                    } else {
                        (0..len).collect()
                    };
                    rng.shuffle(&mut candidates);
                    candidates.truncate(k);
                    candidates.sort_unstable();
                    if candidates != ex.signal_positions {
                        break candidates;
                    }
                };
                let signal: Vec<u32> = ex.signal_positions.iter().map(|&p| ex.tokens[p]).collect();
                let filler: Vec<u32> = (0..len)
                    .filter(|p| !ex.signal_positions.contains(p))
                    .map(|p| ex.tokens[p])
                    .collect();
                let mut filler = filler.into_iter();
                let mut signal_iter = signal.into_iter();
                for p in 0..len {
                    ex.tokens[p] = if new_positions.contains(&p) {
                        signal_iter.next().expect("one value per position")
                    } else {
                        filler.next().expect("filler count matches")
                    };
                }
                ex.signal_positions = new_positions;
            }
            Ok(out)
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.tokens.len() != self.seq_len {
                return Err(Error::Contract(format!(
                    "example {i} has {} tokens, expected {}",
                    ex.tokens.len(),
                    self.seq_len
                )));
            }
            if ex.tokens.iter().any(|&t| t as usize >= self.vocab_size) {
                return Err(Error::Contract(format!(
                    "example {i} has a token outside the vocabulary"
                )));
            }
            if ex.label >= self.num_classes {
                return Err(Error::Contract(format!("example {i} has label {}", ex.label)));
            }
            if ex.signal_positions.iter().any(|&p| p >= self.seq_len) {
                return Err(Error::Contract(format!(
                    "example {i} has a signal position out of range"
                )));
            }
        }
        Ok(())
    }

    /// Splits off the last `n_val` examples as the validation set.
    pub fn split(&self, n_val: usize) -> Result<(Dataset, Dataset)> {
        if n_val >= self.len() {
            return Err(Error::Config(format!(
                "validation size {n_val} leaves no training examples out of {}",
                self.len()
            )));
        }
        let cut = self.len() - n_val;
        let part = |examples: &[Example]| Dataset {
            examples: examples.to_vec(),
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            num_classes: self.num_classes,
        };
        Ok((part(&self.examples[..cut]), part(&self.examples[cut..])))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for ex in &self.examples {
            h[ex.label] += 1;
        }
        h
    }

    /// One example per line: space-separated token ids, a tab, the label.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            for (i, t) in ex.tokens.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{t}").expect("write to String");
            }
            writeln!(out, "\t{}", ex.label).expect("write to String");
        }
        out
    }

    /// Inverse of [`Dataset::to_text`]. Signal positions are recovered from
    /// the signal alphabet.
    pub fn from_text(text: &str, vocab_size: usize, num_classes: usize) -> Result<Dataset> {
        let mut examples = Vec::new();
        let mut seq_len = None;
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Config(format!("dataset line {}: {what}", lineno + 1));
            let (toks, label) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let tokens = toks
                .split(' ')
                .map(|t| t.parse::<u32>().map_err(|_| bad("bad token id")))
                .collect::<Result<Vec<_>>>()?;
            let label = label.parse::<usize>().map_err(|_| bad("bad label"))?;
            if *seq_len.get_or_insert(tokens.len()) != tokens.len() {
                return Err(bad("sequence length differs from earlier lines"));
            }
            let signal_positions = tokens
                .iter()
                .enumerate()
                .filter(|(_, &t)| is_signal_token(t, num_classes))
                .map(|(p, _)| p)
                .collect();
            examples.push(Example {
                tokens,
                label,
                signal_positions,
            });
        }
        let ds = Dataset {
            examples,
            vocab_size,
            seq_len: seq_len.unwrap_or(0),
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> TaskParams {
        TaskParams {
            seq_len: 12,
            vocab_size: 20,
            num_classes: 4,
            k_signal: 3,
            min_len: None,
        }
    }

    #[test]
    fn dense_control_task() {
        let p = TaskParams {
            k_signal: 12,
            ..small()
        };
        let ds = gen_sparse_signal_task(3, 50, &p).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.signal_positions, (0..12).collect::<Vec<_>>());
            assert!(ex.tokens.iter().all(|&t| is_signal_token(t, 4)));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_sparse_signal_task(7, 100, &small()).unwrap();
        let b = gen_sparse_signal_task(7, 100, &small()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a, b);
        let c = gen_sparse_signal_task(8, 100, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_match_independent_oracle() {
        let ds = gen_sparse_signal_task(11, 500, &small()).unwrap();
        for ex in &ds.examples {
            // Oracle: scan the whole sequence for signal-alphabet tokens.
            let mut sum = 0;
            let mut count = 0;
            for &t in &ex.tokens {
                if (1..=4).contains(&t) {
                    sum += t - 1;
                    count += 1;
                }
            }
            assert_eq!(count, 3);
            assert_eq!(ex.label, sum as usize % 4);
        }
    }

    #[test]
    fn parameter_violations() {
        for bad in [
            TaskParams { k_signal: 0, ..small() },
            TaskParams {
                k_signal: 13,
                ..small()
            },
            TaskParams {
                vocab_size: 5,
                ..small()
            },
            TaskParams {
                min_len: Some(2),
                ..small()
            },
        ] {
            assert!(matches!(gen_sparse_signal_task(0, 10, &bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn padding_respects_min_len() {
        let p = TaskParams {
            min_len: Some(6),
            ..small()
        };
        let ds = gen_sparse_signal_task(1, 200, &p).unwrap();
        let mut saw_padding = false;
        for ex in &ds.examples {
            let len = ex.tokens.iter().take_while(|&&t| t != PAD).count();
            assert!(len >= 6);
            assert!(ex.tokens[len..].iter().all(|&t| t == PAD));
            assert!(ex.signal_positions.iter().all(|&p| p < len));
            saw_padding |= len < 12;
        }
        assert!(saw_padding);
    }

    #[test]
    fn class_balance_and_majority_baseline() {
        let ds = gen_sparse_signal_task(5, 5120, &TaskParams::default()).unwrap();
        let (train, val) = ds.split(1024).unwrap();
        for part in [&train, &val] {
            let n = part.len() as f64;
            for &count in &part.label_histogram() {
                assert!((count as f64 - n / 4.0).abs() <= 0.1 * n / 4.0);
            }
        }
        let majority = *val.label_histogram().iter().max().unwrap() as f64 / val.len() as f64;
        assert!(majority <= 0.25 + 0.05);
    }

    #[test]
    fn identity_shift_equals_regeneration() {
        let base = gen_sparse_signal_task(2, 64, &small()).unwrap();
        let shifted = gen_shifted_task(&base, 99, &ShiftRule::Identity).unwrap();
        assert_eq!(shifted, gen_sparse_signal_task(2, 64, &small()).unwrap());
    }

    #[test]
    fn class_permutation_permutes_histogram() {
        let base = gen_sparse_signal_task(2, 203, &small()).unwrap();
        let perm = vec![2, 0, 3, 1];
        let shifted = gen_shifted_task(&base, 0, &ShiftRule::PermuteClasses { perm: perm.clone() }).unwrap();
        let hb = base.label_histogram();
        let hs = shifted.label_histogram();
        for c in 0..4 {
            assert_eq!(hs[perm[c]], hb[c]);
        }
        assert!(gen_shifted_task(&base, 0, &ShiftRule::PermuteClasses { perm: vec![0, 0, 1, 2] }).is_err());
    }

    #[test]
    fn moved_signal_differs_everywhere() {
        let base = gen_sparse_signal_task(4, 100, &small()).unwrap();
        let moved = gen_shifted_task(&base, 5, &ShiftRule::MoveSignal).unwrap();
        for (a, b) in base.examples.iter().zip(&moved.examples) {
            assert_ne!(a.signal_positions, b.signal_positions);
            assert_eq!(a.label, b.label);
            assert_eq!(label_of(&b.tokens, &b.signal_positions, 4), b.label);
        }
        let again = gen_shifted_task(&base, 5, &ShiftRule::MoveSignal).unwrap();
        assert_eq!(moved, again);
        let dense = gen_sparse_signal_task(
            4,
            5,
            &TaskParams {
                k_signal: 12,
                ..small()
            },
        )
        .unwrap();
        assert!(gen_shifted_task(&dense, 0, &ShiftRule::MoveSignal).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(seed in any::<u64>(), min_len in 3usize..=12) {
            let p = TaskParams { min_len: Some(min_len), ..small() };
            let ds = gen_sparse_signal_task(seed, 20, &p).unwrap();
            let text = ds.to_text();
            let back = Dataset::from_text(&text, p.vocab_size, p.num_classes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
