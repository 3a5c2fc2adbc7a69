//! Input token taxonomy: system prompt, image tokens, user instruction,
//! and generated output.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Sys,
    Img,
    Ins,
    Out,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [Self::Sys, Self::Img, Self::Ins, Self::Out];

    pub fn index(self) -> usize {
        match self {
            Self::Sys => 0,
            Self::Img => 1,
            Self::Ins => 2,
            Self::Out => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sys => "sys",
            Self::Img => "img",
            Self::Ins => "ins",
            Self::Out => "out",
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegmentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sys" => Ok(Self::Sys),
            "img" => Ok(Self::Img),
            "ins" => Ok(Self::Ins),
            "out" => Ok(Self::Out),
            other => Err(format!("unknown segment kind `{other}`")),
        }
    }
}

/// Half-open `[start, end)` span of one segment kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(kind: SegmentKind, start: usize, end: usize) -> Self {
        Self { kind, start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, p: usize) -> bool {
        self.start <= p && p < self.end
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentError {
    #[error("expected spans in order sys, img, ins; got {0:?}")]
    Order(Vec<SegmentKind>),
    #[error("spans {first:?} and {second:?} overlap")]
    Overlap { first: Span, second: Span },
    #[error("gap between spans {first:?} and {second:?}")]
    Gap { first: Span, second: Span },
    #[error("span {0:?} must not be empty")]
    Empty(Span),
    #[error("span {0:?} has end before start")]
    Inverted(Span),
    #[error("spans cover {covered} positions but {tokens} token ids were given")]
    Coverage { covered: usize, tokens: usize },
    #[error("token id {id} at index {index} is outside the vocabulary of {vocab}")]
    IdOutOfVocab {
        index: usize,
        id: TokenId,
        vocab: usize,
    },
    #[error("position {index} is out of range for total length {len}")]
    OutOfRange { index: usize, len: usize },
}

/// On-disk sequence description. Spans follow from the array lengths in
/// the fixed order sys, img, ins.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub sys_ids: Vec<TokenId>,
    pub img_ids: Vec<TokenId>,
    pub ins_ids: Vec<TokenId>,
}

/// A validated prefill sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentedSequence {
    token_ids: Vec<TokenId>,
    spans: [Span; 3],
}

impl SegmentedSequence {
    /// Validates `spans` (sys, img, ins) against the ids and vocabulary.
    pub fn new(
        token_ids: Vec<TokenId>,
        spans: &[Span],
        vocab: usize,
    ) -> Result<Self, SegmentError> {
        let kinds: Vec<SegmentKind> = spans.iter().map(|s| s.kind).collect();
        if kinds != [SegmentKind::Sys, SegmentKind::Img, SegmentKind::Ins] {
            return Err(SegmentError::Order(kinds));
        }
        for s in spans {
            if s.end < s.start {
                return Err(SegmentError::Inverted(*s));
            }
            if s.kind != SegmentKind::Img && s.is_empty() {
                return Err(SegmentError::Empty(*s));
            }
        }
        if spans[0].start != 0 {
            return Err(SegmentError::Gap {
                first: Span::new(SegmentKind::Sys, 0, 0),
                second: spans[0],
            });
        }
        for pair in spans.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.start < a.end {
                return Err(SegmentError::Overlap {
                    first: a,
                    second: b,
                });
            }
            if b.start > a.end {
                return Err(SegmentError::Gap {
                    first: a,
                    second: b,
                });
            }
        }
        if spans[2].end != token_ids.len() {
            return Err(SegmentError::Coverage {
                covered: spans[2].end,
                tokens: token_ids.len(),
            });
        }
        if let Some((index, &id)) = token_ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= vocab)
        {
            return Err(SegmentError::IdOutOfVocab { index, id, vocab });
        }
        Ok(Self {
            token_ids,
            spans: [spans[0], spans[1], spans[2]],
        })
    }

    pub fn from_spec(spec: &SequenceSpec, vocab: usize) -> Result<Self, SegmentError> {
        let a = spec.sys_ids.len();
        let b = a + spec.img_ids.len();
        let c = b + spec.ins_ids.len();
        let ids = spec
            .sys_ids
            .iter()
            .chain(&spec.img_ids)
            .chain(&spec.ins_ids)
            .copied()
            .collect();
        Self::new(
            ids,
            &[
                Span::new(SegmentKind::Sys, 0, a),
                Span::new(SegmentKind::Img, a, b),
                Span::new(SegmentKind::Ins, b, c),
            ],
            vocab,
        )
    }

    pub fn to_spec(&self) -> SequenceSpec {
        let ids = |k: SegmentKind| self.token_ids[self.span(k).range()].to_vec();
        SequenceSpec {
            sys_ids: ids(SegmentKind::Sys),
            img_ids: ids(SegmentKind::Img),
            ins_ids: ids(SegmentKind::Ins),
        }
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn n_input(&self) -> usize {
        self.token_ids.len()
    }

    /// Span of an input segment. `Out` yields the empty span at `n_input`.
    pub fn span(&self, kind: SegmentKind) -> Span {
        match kind {
            SegmentKind::Out => Span::new(SegmentKind::Out, self.n_input(), self.n_input()),
            k => self.spans[k.index()],
        }
    }

    /// Number of input tokens of `kind` (0 for `Out`).
    pub fn count(&self, kind: SegmentKind) -> usize {
        self.span(kind).len()
    }

    /// Kind of position `index` in a sequence whose current total length
    /// (input plus generated) is `total_len`.
    pub fn segment_of(&self, index: usize, total_len: usize) -> Result<SegmentKind, SegmentError> {
        if index >= total_len.max(self.n_input()) {
            return Err(SegmentError::OutOfRange {
                index,
                len: total_len.max(self.n_input()),
            });
        }
        Ok(self.kind_at(index))
    }

    /// Unchecked variant of [`segment_of`](Self::segment_of).
    #[inline]
    pub fn kind_at(&self, index: usize) -> SegmentKind {
        self.spans
            .iter()
            .find(|s| s.contains(index))
            .map_or(SegmentKind::Out, |s| s.kind)
    }
}
