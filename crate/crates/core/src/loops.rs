//! Suffix repetition-loop detection over tokenized model outputs.
//!
//! A loop is a unit of 1 to 20 tokens repeated back to back inside the last
//! 256 tokens, ending at most 8 tokens before the end of the output. The
//! final repetition may be cut short. An output is flagged when the looping
//! region spans at least 12 tokens and holds at least 3 whole repetitions.

use serde::{Deserialize, Serialize};
use std::io::BufRead;
use thiserror::Error;

pub const TAIL_TOKENS: usize = 256;
pub const MAX_UNIT: usize = 20;
pub const MAX_TRAILING: usize = 8;
pub const MIN_LOOP_TOKENS: usize = 12;
pub const MIN_REPEATS: usize = 3;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("loop rate needs at least one verdict")]
    Empty,
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopVerdict {
    pub has_loop: bool,
    pub unit_len: usize,
    pub repeats: usize,
    pub loop_tokens: usize,
    pub trailing: usize,
}

impl LoopVerdict {
    /// Applies the flagging thresholds to a candidate region.
    pub fn candidate(unit_len: usize, loop_tokens: usize, trailing: usize) -> Self {
        let repeats = loop_tokens / unit_len;
        Self {
            has_loop: loop_tokens >= MIN_LOOP_TOKENS && repeats >= MIN_REPEATS,
            unit_len,
            repeats,
            loop_tokens,
            trailing,
        }
    }

    /// Ordering among flagged candidates: longer region first, then shorter
    /// unit, then fewer trailing tokens.
    pub fn beats(&self, other: &LoopVerdict) -> bool {
        (self.loop_tokens, std::cmp::Reverse(self.unit_len), std::cmp::Reverse(self.trailing))
            > (other.loop_tokens, std::cmp::Reverse(other.unit_len), std::cmp::Reverse(other.trailing))
    }
}

/// Splits on whitespace, then emits maximal alphanumeric runs and each other
/// character as its own token. Case is kept.
pub fn normalize_and_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn detect_suffix_loop<T: PartialEq>(tokens: &[T]) -> LoopVerdict {
    let tail = &tokens[tokens.len().saturating_sub(TAIL_TOKENS)..];
    let mut best: Option<LoopVerdict> = None;
    for trailing in 0..=MAX_TRAILING.min(tail.len()) {
        let end = tail.len() - trailing;
        for unit in 1..=MAX_UNIT.min(end) {
            // grow the u-periodic region leftward from `end`
            let mut start = end - unit;
            while start > 0 && tail[start - 1] == tail[start - 1 + unit] {
                start -= 1;
            }
            let v = LoopVerdict::candidate(unit, end - start, trailing);
            if v.has_loop && best.is_none_or(|b| v.beats(&b)) {
                best = Some(v);
            }
        }
    }
    best.unwrap_or_default()
}

pub fn detect_text(text: &str) -> LoopVerdict {
    detect_suffix_loop(&normalize_and_tokenize(text))
}

/// Percentage of flagged verdicts.
pub fn loop_rate(verdicts: &[LoopVerdict]) -> Result<f64, LoopError> {
    if verdicts.is_empty() {
        return Err(LoopError::Empty);
    }
    let flagged = verdicts.iter().filter(|v| v.has_loop).count();
    Ok(100.0 * flagged as f64 / verdicts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: serde_json::Value,
    pub text: String,
}

/// Reads `{id, text}` records, one per line; blank lines are skipped.
pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<Prediction>, LoopError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| LoopError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleVerdict {
    pub id: serde_json::Value,
    #[serde(flatten)]
    pub verdict: LoopVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub examples: usize,
    pub flagged: usize,
    pub loop_rate: f64,
    pub verdicts: Vec<ExampleVerdict>,
}

pub fn loop_report(predictions: &[Prediction]) -> Result<LoopReport, LoopError> {
    let verdicts: Vec<ExampleVerdict> = predictions
        .iter()
        .map(|p| ExampleVerdict { id: p.id.clone(), verdict: detect_text(&p.text) })
        .collect();
    let plain: Vec<LoopVerdict> = verdicts.iter().map(|v| v.verdict).collect();
    Ok(LoopReport {
        examples: verdicts.len(),
        flagged: plain.iter().filter(|v| v.has_loop).count(),
        loop_rate: loop_rate(&plain)?,
        verdicts,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive scan: every trailing count, unit length and region start,
    /// checking position by position that the region repeats its first
    /// `unit` tokens. A region that fails stays failed when it is extended
    /// leftward, so each scan stops at its first failure.
    pub(crate) fn brute_force<T: PartialEq>(tokens: &[T]) -> LoopVerdict {
        let tail = &tokens[tokens.len().saturating_sub(TAIL_TOKENS)..];
        let mut best = LoopVerdict::default();
        for trailing in 0..=MAX_TRAILING {
            if trailing > tail.len() {
                break;
            }
            let end = tail.len() - trailing;
            for unit in 1..=MAX_UNIT {
                if unit > end {
                    break;
                }
                for start in (0..=end - unit).rev() {
                    let region = &tail[start..end];
                    if !(0..region.len()).all(|i| region[i] == region[i % unit]) {
                        break;
                    }
                    let len = region.len();
                    let repeats = len / unit;
                    if len >= MIN_LOOP_TOKENS && repeats >= MIN_REPEATS {
                        let v = LoopVerdict { has_loop: true, unit_len: unit, repeats, loop_tokens: len, trailing };
                        if !best.has_loop || v.beats(&best) {
                            best = v;
                        }
                    }
                }
            }
        }
        best
    }

    fn words(s: &str) -> Vec<String> {
        normalize_and_tokenize(s)
    }

    #[test]
    fn tokenizer() {
        assert_eq!(words("a  b"), ["a", "b"]);
        assert_eq!(words("ab, cd"), ["ab", ",", "cd"]);
        assert!(words("").is_empty());
        assert_eq!(words(" \t\n"), Vec::<String>::new());
        assert_eq!(words("Été:42!!"), ["Été", ":", "42", "!", "!"]);
    }

    #[test]
    fn threshold_examples() {
        let v = detect_text(&"x ".repeat(15));
        assert_eq!(v, LoopVerdict { has_loop: true, unit_len: 1, repeats: 15, loop_tokens: 15, trailing: 0 });

        let mut toks: Vec<u32> = (100..120).collect();
        toks.extend([1, 2, 3, 4, 5, 1, 2, 3, 4, 5]);
        assert!(!detect_suffix_loop(&toks).has_loop);

        let distinct: Vec<u32> = (0..300).collect();
        assert_eq!(detect_suffix_loop(&distinct), LoopVerdict::default());

        let mut toks: Vec<u32> = (100..110).collect();
        toks.extend([1, 2, 3, 4].repeat(3));
        let v = detect_suffix_loop(&toks);
        assert_eq!((v.has_loop, v.unit_len, v.repeats, v.loop_tokens), (true, 4, 3, 12));
    }

    #[test]
    fn inclusive_boundaries() {
        // 11 tokens of a unit of 1: too short
        let mut t: Vec<u32> = (100..110).collect();
        t.extend([7; 11]);
        assert!(!detect_suffix_loop(&t).has_loop);
        // unit 5 over 14 tokens: only 2 whole repeats
        let mut t: Vec<u32> = (100..110).collect();
        t.extend([1, 2, 3, 4, 5].iter().cycle().take(14));
        assert!(!detect_suffix_loop(&t).has_loop);
        // unit 20 three times with 8 trailing tokens
        let mut t: Vec<u32> = (1000..1010).collect();
        t.extend((0..20).cycle().take(60));
        t.extend(500..508);
        let v = detect_suffix_loop(&t);
        assert_eq!((v.unit_len, v.repeats, v.loop_tokens, v.trailing), (20, 3, 60, 8));
        // a ninth trailing token hides it
        t.push(508);
        assert!(!detect_suffix_loop(&t).has_loop);
    }

    #[test]
    fn partial_final_unit_counts_tokens_not_repeats() {
        let mut t: Vec<u32> = (100..110).collect();
        t.extend([1, 2, 3, 4, 5].iter().cycle().take(17));
        let v = detect_suffix_loop(&t);
        assert_eq!((v.unit_len, v.repeats, v.loop_tokens), (5, 3, 17));
    }

    #[test]
    fn only_the_tail_counts() {
        let mut t: Vec<u32> = vec![9; 300];
        t.extend(0..250);
        assert!(!detect_suffix_loop(&t).has_loop);
        let mut t: Vec<u32> = (0..100).collect();
        t.extend([9; 300]);
        assert_eq!(detect_suffix_loop(&t).loop_tokens, TAIL_TOKENS);
    }

    #[test]
    fn rates() {
        let yes = LoopVerdict { has_loop: true, ..Default::default() };
        let no = LoopVerdict::default();
        assert_eq!(loop_rate(&[no; 10]).unwrap(), 0.0);
        let mut v = vec![no; 197];
        v.extend([yes; 3]);
        assert_eq!(loop_rate(&v).unwrap(), 1.5);
        assert_eq!(loop_rate(&[yes; 4]).unwrap(), 100.0);
        assert!(loop_rate(&[]).is_err());
    }

    #[test]
    fn predictions_round_trip() {
        let input = "{\"id\": 1, \"text\": \"ok ok ok ok ok ok ok ok ok ok ok ok ok\"}\n\n{\"id\": \"b\", \"text\": \"fine.\"}\n";
        let preds = read_predictions(input.as_bytes()).unwrap();
        let r = loop_report(&preds).unwrap();
        assert_eq!((r.examples, r.flagged, r.loop_rate), (2, 1, 50.0));
        assert!(read_predictions("{nope".as_bytes()).is_err());
    }

    fn looped_sequence() -> impl Strategy<Value = Vec<u8>> {
        (
            prop::collection::vec(0u8..6, 0..280),
            prop::collection::vec(0u8..4, 1..=20),
            0usize..70,
            prop::collection::vec(0u8..6, 0..=10),
        )
            .prop_map(|(mut prefix, unit, len, trailing)| {
                prefix.extend(unit.iter().cycle().take(len));
                prefix.extend(trailing);
                prefix
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn agrees_with_brute_force(t in looped_sequence()) {
            prop_assert_eq!(detect_suffix_loop(&t), brute_force(&t));
        }

        #[test]
        fn reported_region_reconfirms(t in looped_sequence()) {
            let v = detect_suffix_loop(&t);
            if v.has_loop {
                let end = t.len() - v.trailing;
                let again = detect_suffix_loop(&t[end - v.loop_tokens..end]);
                prop_assert!(again.has_loop);
                prop_assert_eq!(again.loop_tokens, v.loop_tokens);
                prop_assert_eq!(again.unit_len, v.unit_len);
            }
        }

        #[test]
        fn nine_fresh_tokens_suppress(t in looped_sequence()) {
            let mut t: Vec<u32> = t.into_iter().map(u32::from).collect();
            t.extend(1000..1009);
            prop_assert!(!detect_suffix_loop(&t).has_loop);
        }
    }
}
