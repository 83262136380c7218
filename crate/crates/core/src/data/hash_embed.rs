//! Deterministic feature-hashing embedder for smoke tests.
//!
//! Not a substitute for a trained encoder: it only gives the four views the
//! right structural relationships. The main view hashes tokens with entity
//! markers inserted; the head (tail) view replaces the head (tail) tokens with
//! a single placeholder; the context view lowercases every token and strips
//! its digits.

use std::ops::Range;

use super::{Instance, InstanceMeta, NUM_VIEWS};
use crate::error::{GpamError, Result};

/// Half-open token range `[start, end)` over the whitespace tokens of a sentence.
pub type TokenSpan = Range<usize>;

const HEAD_OPEN: &str = "<h>";
const HEAD_CLOSE: &str = "</h>";
const TAIL_OPEN: &str = "<t>";
const TAIL_CLOSE: &str = "</t>";
const HEAD_PLACEHOLDER: &str = "[HEAD]";
const TAIL_PLACEHOLDER: &str = "[TAIL]";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn hashed_vector(tokens: &[String], dim: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; dim];
    for t in tokens {
        let h = fnv1a(t.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(GpamError::Input(
            "hashed features cancel to zero; increase dim".into(),
        ));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

#[derive(Clone, Copy, PartialEq)]
enum Replace {
    Nothing,
    Head,
    Tail,
}

fn marked_tokens(
    words: &[&str],
    head: &TokenSpan,
    tail: &TokenSpan,
    replace: Replace,
) -> Vec<String> {
    let mut out = Vec::with_capacity(words.len() + 4);
    for (i, w) in words.iter().enumerate() {
        if i == head.start {
            out.push(HEAD_OPEN.to_string());
        }
        if i == tail.start {
            out.push(TAIL_OPEN.to_string());
        }
        let in_head = head.contains(&i);
        let in_tail = tail.contains(&i);
        match (replace, in_head, in_tail) {
            (Replace::Head, true, _) => {
                if i == head.start {
                    out.push(HEAD_PLACEHOLDER.to_string());
                }
            }
            (Replace::Tail, _, true) => {
                if i == tail.start {
                    out.push(TAIL_PLACEHOLDER.to_string());
                }
            }
            _ => out.push((*w).to_string()),
        }
        if i + 1 == head.end {
            out.push(HEAD_CLOSE.to_string());
        }
        if i + 1 == tail.end {
            out.push(TAIL_CLOSE.to_string());
        }
    }
    out
}

/// Embeds a sentence into the four L2-normalised views.
pub fn hash_embed_text(
    sentence: &str,
    head: TokenSpan,
    tail: TokenSpan,
    dim: usize,
) -> Result<[Vec<f64>; NUM_VIEWS]> {
    if dim == 0 {
        return Err(GpamError::Config("dim must be positive".into()));
    }
    let words: Vec<&str> = sentence.split_whitespace().collect();
    for (name, span) in [("head", &head), ("tail", &tail)] {
        if span.start >= span.end || span.end > words.len() {
            return Err(GpamError::Input(format!(
                "{name} span {span:?} outside sentence of {} tokens",
                words.len()
            )));
        }
    }
    if head.start < tail.end && tail.start < head.end {
        return Err(GpamError::Input(format!(
            "head span {head:?} overlaps tail span {tail:?}"
        )));
    }

    let main = marked_tokens(&words, &head, &tail, Replace::Nothing);
    let head_view = marked_tokens(&words, &head, &tail, Replace::Head);
    let tail_view = marked_tokens(&words, &head, &tail, Replace::Tail);
    let context: Vec<String> = main
        .iter()
        .map(|t| {
            t.to_lowercase()
                .chars()
                .filter(|c| !c.is_ascii_digit())
                .collect()
        })
        .collect();

    Ok([
        hashed_vector(&main, dim)?,
        hashed_vector(&head_view, dim)?,
        hashed_vector(&tail_view, dim)?,
        hashed_vector(&context, dim)?,
    ])
}

/// Builds a full [`Instance`] from text, keeping the text as metadata.
pub fn hash_embed_instance(
    id: &str,
    label: &str,
    sentence: &str,
    head: TokenSpan,
    tail: TokenSpan,
    dim: usize,
) -> Result<Instance> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let views = hash_embed_text(sentence, head.clone(), tail.clone(), dim)?;
    let mut inst = Instance::new(id, label, views);
    inst.meta = Some(InstanceMeta {
        head: Some(words[head].join(" ")),
        tail: Some(words[tail].join(" ")),
        sentence: Some(sentence.to_string()),
    });
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S1: &str = "Minsk Zoo lies near the Svislach River in 2019";
    const S2: &str = "Gomel Zoo lies near the Svislach River in 2019";

    #[test]
    fn deterministic() {
        let a = hash_embed_text(S1, 0..2, 5..7, 64).unwrap();
        let b = hash_embed_text(S1, 0..2, 5..7, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_surface_form_only_changes_non_head_views() {
        let a = hash_embed_text(S1, 0..2, 5..7, 64).unwrap();
        let b = hash_embed_text(S2, 0..2, 5..7, 64).unwrap();
        assert_eq!(a[1], b[1]);
        assert_ne!(a[0], b[0]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn views_are_unit_norm() {
        for dim in [4, 16, 64, 300] {
            for view in hash_embed_text(S1, 0..2, 5..7, dim).unwrap() {
                let n = view.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn overlapping_or_out_of_range_spans_are_rejected() {
        assert!(matches!(
            hash_embed_text(S1, 0..3, 2..4, 16),
            Err(GpamError::Input(_))
        ));
        assert!(matches!(
            hash_embed_text(S1, 0..2, 8..12, 16),
            Err(GpamError::Input(_))
        ));
        assert!(matches!(
            hash_embed_text(S1, 2..2, 5..6, 16),
            Err(GpamError::Input(_))
        ));
    }

    #[test]
    fn instance_carries_metadata() {
        let inst = hash_embed_instance("x1", "P206", S1, 0..2, 5..7, 32).unwrap();
        let meta = inst.meta.unwrap();
        assert_eq!(meta.head.as_deref(), Some("Minsk Zoo"));
        assert_eq!(meta.tail.as_deref(), Some("Svislach River"));
    }
}
