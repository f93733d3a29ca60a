//! Token layout of one sequence: a vision block, then one query group per
//! task, then text. Segments are contiguous and ordered; task order is fixed
//! for a whole run by declaration order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub vision_len: usize,
    pub group_lens: Vec<usize>,
    pub text_len: usize,
}

/// Classification of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Vision { offset: usize },
    QueryGroup { task: usize, offset: usize },
    Text { offset: usize },
}

impl Segment {
    pub fn group(&self) -> Option<usize> {
        match self {
            Segment::QueryGroup { task, .. } => Some(*task),
            _ => None,
        }
    }

    pub fn is_vision(&self) -> bool {
        matches!(self, Segment::Vision { .. })
    }

    pub fn is_text(&self) -> bool {
        matches!(self, Segment::Text { .. })
    }
}

/// Validates segment sizes: every query group needs at least one slot and the
/// text block at least one token. An empty vision block is allowed.
pub fn build_layout(vision_len: usize, group_lens: &[usize], text_len: usize) -> Result<SequenceLayout> {
    if let Some(i) = group_lens.iter().position(|&q| q == 0) {
        return Err(Error::InvalidLayout(format!("query group {i} is empty")));
    }
    if text_len == 0 {
        return Err(Error::InvalidLayout("text block is empty".into()));
    }
    Ok(SequenceLayout {
        vision_len,
        group_lens: group_lens.to_vec(),
        text_len,
    })
}

impl SequenceLayout {
    pub fn num_tasks(&self) -> usize {
        self.group_lens.len()
    }

    pub fn total(&self) -> usize {
        self.vision_len + self.group_lens.iter().sum::<usize>() + self.text_len
    }

    pub fn vision_range(&self) -> std::ops::Range<usize> {
        0..self.vision_len
    }

    pub fn group_range(&self, task: usize) -> Result<std::ops::Range<usize>> {
        if task >= self.group_lens.len() {
            return Err(Error::InvalidTaskIndex(task, self.group_lens.len()));
        }
        let start = self.vision_len + self.group_lens[..task].iter().sum::<usize>();
        Ok(start..start + self.group_lens[task])
    }

    pub fn text_range(&self) -> std::ops::Range<usize> {
        let start = self.vision_len + self.group_lens.iter().sum::<usize>();
        start..self.total()
    }

    pub fn segment_of(&self, position: usize) -> Result<Segment> {
        if position >= self.total() {
            return Err(Error::PositionOutOfRange {
                pos: position,
                len: self.total(),
            });
        }
        if position < self.vision_len {
            return Ok(Segment::Vision { offset: position });
        }
        let mut start = self.vision_len;
        for (task, &q) in self.group_lens.iter().enumerate() {
            if position < start + q {
                return Ok(Segment::QueryGroup {
                    task,
                    offset: position - start,
                });
            }
            start += q;
        }
        Ok(Segment::Text {
            offset: position - start,
        })
    }
}

/// Stack the embedded segments into the S×d input matrix and add learned
/// absolute position rows. MTQ bank rows enter as-is, so gradients flow back
/// into the banks; the position table covers MTQ positions like any other.
pub fn assemble_inputs(
    g: &mut Graph,
    layout: &SequenceLayout,
    vision_embeds: TensorId,
    mtq_banks: &[TensorId],
    text_ids: &[usize],
    embed_table: TensorId,
    pos_table: TensorId,
) -> Result<TensorId> {
    let d = g.shape(embed_table)[1];
    let check = |name: &str, shape: &[usize], rows: usize| -> Result<()> {
        if shape != [rows, d] {
            return Err(Error::ShapeMismatch {
                op: "assemble_inputs",
                detail: format!("{name} has shape {shape:?}, expected [{rows}, {d}]"),
            });
        }
        Ok(())
    };
    check("vision_embeds", g.shape(vision_embeds), layout.vision_len)?;
    if mtq_banks.len() != layout.num_tasks() {
        return Err(Error::ShapeMismatch {
            op: "assemble_inputs",
            detail: format!(
                "{} banks for {} tasks",
                mtq_banks.len(),
                layout.num_tasks()
            ),
        });
    }
    for (i, &bank) in mtq_banks.iter().enumerate() {
        check(&format!("mtq_bank[{i}]"), g.shape(bank), layout.group_lens[i])?;
    }
    if text_ids.len() != layout.text_len {
        return Err(Error::ShapeMismatch {
            op: "assemble_inputs",
            detail: format!(
                "{} text ids for text_len {}",
                text_ids.len(),
                layout.text_len
            ),
        });
    }
    let s = layout.total();
    let pos_rows = g.shape(pos_table)[0];
    if pos_rows < s {
        return Err(Error::PositionOutOfRange {
            pos: s - 1,
            len: pos_rows,
        });
    }

    let text_embeds = g.gather_rows(embed_table, text_ids)?;
    let mut parts = vec![vision_embeds];
    parts.extend_from_slice(mtq_banks);
    parts.push(text_embeds);
    let tokens = g.concat_rows(&parts)?;
    let positions: Vec<usize> = (0..s).collect();
    let pos = g.gather_rows(pos_table, &positions)?;
    g.add(tokens, pos)
}
