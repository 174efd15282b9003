use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Contiguous run of tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

/// Segment map of one sequence: `visual grid → text → routing → answer`.
///
/// The answer segment's first token is the begin-of-answer marker; position
/// `answer.offset + j` predicts answer token `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    grid: (usize, usize),
    text: Segment,
    routing: usize,
    answer: Segment,
}

impl SequenceLayout {
    pub fn new(grid: (usize, usize), text_len: usize, answer_len: usize) -> Result<Self> {
        let (h, w) = grid;
        if h == 0 || w == 0 {
            return Err(Error::Layout(format!("visual grid {h}x{w} is empty")));
        }
        let visual = h * w;
        Ok(Self {
            grid,
            text: Segment { offset: visual, len: text_len },
            routing: visual + text_len,
            answer: Segment { offset: visual + text_len + 1, len: answer_len },
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn visual(&self) -> Segment {
        Segment { offset: 0, len: self.grid.0 * self.grid.1 }
    }

    pub fn text(&self) -> Segment {
        self.text
    }

    pub fn routing(&self) -> usize {
        self.routing
    }

    pub fn answer(&self) -> Segment {
        self.answer
    }

    /// Everything after the visual grid: text, routing token and answer.
    pub fn tail_len(&self) -> usize {
        self.text.len + 1 + self.answer.len
    }

    pub fn total_len(&self) -> usize {
        self.answer.end()
    }

    /// Same segments with the visual grid replaced by an `h×w` grid.
    pub fn with_grid(&self, grid: (usize, usize)) -> Result<Self> {
        Self::new(grid, self.text.len, self.answer.len)
    }

    pub fn with_answer_len(&self, answer_len: usize) -> Self {
        Self::new(self.grid, self.text.len, answer_len).expect("grid already validated")
    }

    /// Re-derives every offset and checks contiguity and ordering.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(self.grid, self.text.len, self.answer.len)?;
        if fresh != *self {
            return Err(Error::Layout(format!("inconsistent offsets in {self:?}")));
        }
        Ok(())
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if n != self.total_len() {
            return Err(Error::Layout(format!(
                "sequence of {n} tokens does not match layout total {}",
                self.total_len()
            )));
        }
        Ok(())
    }
}

/// The visual block as an `h×w` grid of `[h·w × d]` rows on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Var,
}
