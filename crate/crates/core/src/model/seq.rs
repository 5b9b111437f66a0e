//! Token sequences with per-position segment tags.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which part of the conversation a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Visual,
    Prompt,
    Think,
    Answer,
}

/// Token ids with a parallel list of segment tags.
///
/// Invariants: the lists have equal length, visual positions form a
/// contiguous prefix, and every `Think` position precedes every `Answer`
/// position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedSequence {
    tokens: Vec<usize>,
    segments: Vec<Segment>,
}

impl SegmentedSequence {
    pub fn new(tokens: Vec<usize>, segments: Vec<Segment>) -> Result<Self> {
        if tokens.len() != segments.len() {
            return Err(Error::Validation(format!(
                "token/segment length mismatch: {} vs {}",
                tokens.len(),
                segments.len()
            )));
        }
        let visual_end = segments.iter().take_while(|s| **s == Segment::Visual).count();
        if segments[visual_end..].iter().any(|s| *s == Segment::Visual) {
            return Err(Error::Validation("visual positions must form a contiguous prefix".into()));
        }
        let mut seen_answer = false;
        for s in &segments {
            match s {
                Segment::Answer => seen_answer = true,
                Segment::Think if seen_answer => {
                    return Err(Error::Validation("think positions must precede answer positions".into()))
                }
                _ => {}
            }
        }
        Ok(Self { tokens, segments })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn token(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn segment(&self, i: usize) -> Segment {
        self.segments[i]
    }

    /// Number of leading visual positions.
    pub fn visual_len(&self) -> usize {
        self.segments.iter().take_while(|s| **s == Segment::Visual).count()
    }

    pub fn positions(&self, seg: Segment) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == seg)
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions of generated tokens (think and answer segments).
    pub fn response_positions(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Segment::Think | Segment::Answer))
            .map(|(i, _)| i)
            .collect()
    }

    /// Tokens of the response (think + answer), in order.
    pub fn response_tokens(&self) -> Vec<usize> {
        self.response_positions().into_iter().map(|i| self.tokens[i]).collect()
    }

    /// Tokens tagged `Answer`, in order.
    pub fn answer_tokens(&self) -> Vec<usize> {
        self.positions(Segment::Answer).into_iter().map(|i| self.tokens[i]).collect()
    }

    pub fn has(&self, seg: Segment) -> bool {
        self.segments.iter().any(|s| *s == seg)
    }

    /// Appends a generated token. Panics if it would break the
    /// think-before-answer ordering (callers tag monotonically).
    pub fn push(&mut self, token: usize, segment: Segment) {
        if segment == Segment::Think {
            assert!(!self.has(Segment::Answer), "think token appended after answer tokens");
        }
        self.tokens.push(token);
        self.segments.push(segment);
    }

    /// The prompt prefix (everything before the first generated position).
    pub fn prompt_prefix(&self) -> SegmentedSequence {
        let n = self
            .segments
            .iter()
            .take_while(|s| matches!(s, Segment::Visual | Segment::Prompt))
            .count();
        SegmentedSequence {
            tokens: self.tokens[..n].to_vec(),
            segments: self.segments[..n].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_prefix_visual_block() {
        let res = SegmentedSequence::new(
            vec![0, 5, 0],
            vec![Segment::Visual, Segment::Prompt, Segment::Visual],
        );
        assert!(res.is_err());
    }

    #[test]
    fn rejects_think_after_answer() {
        let res = SegmentedSequence::new(
            vec![0, 1, 2],
            vec![Segment::Visual, Segment::Answer, Segment::Think],
        );
        assert!(res.is_err());
    }

    #[test]
    fn position_queries() {
        let seq = SegmentedSequence::new(
            vec![0, 0, 9, 1, 7, 2, 8],
            vec![
                Segment::Visual,
                Segment::Visual,
                Segment::Prompt,
                Segment::Think,
                Segment::Think,
                Segment::Think,
                Segment::Answer,
            ],
        )
        .unwrap();
        assert_eq!(seq.visual_len(), 2);
        assert_eq!(seq.positions(Segment::Think), vec![3, 4, 5]);
        assert_eq!(seq.response_positions(), vec![3, 4, 5, 6]);
        assert_eq!(seq.answer_tokens(), vec![8]);
        assert_eq!(seq.prompt_prefix().len(), 3);
    }
}
