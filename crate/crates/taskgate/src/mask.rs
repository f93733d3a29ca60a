//! Gateway attention mask: query groups see vision (and optionally their own
//! earlier slots) but never each other; text sees everything before it;
//! nothing ever sees forward.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sequence::{Segment, SequenceLayout};
use crate::tensor::NEG_MASK;

/// Visibility of a query slot toward earlier slots of its own group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraGroup {
    Causal,
    SelfOnly,
}

impl std::fmt::Display for IntraGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntraGroup::Causal => "causal",
            IntraGroup::SelfOnly => "self_only",
        })
    }
}

#[derive(Debug, Clone)]
pub struct GatewayMask {
    pub layout: SequenceLayout,
    pub intra: IntraGroup,
    allowed: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub row: usize,
    pub col: usize,
    pub expected: bool,
    pub actual: bool,
}

/// Build the mask by filling per-row-block column ranges.
pub fn build_tgm(layout: &SequenceLayout, intra: IntraGroup) -> Result<GatewayMask> {
    let s = layout.total();
    let mut allowed = vec![false; s * s];
    let vision = layout.vision_range();

    for r in vision.clone() {
        for c in 0..=r {
            allowed[r * s + c] = true;
        }
    }
    for task in 0..layout.num_tasks() {
        let range = layout.group_range(task)?;
        for r in range.clone() {
            for c in vision.clone() {
                allowed[r * s + c] = true;
            }
            match intra {
                IntraGroup::Causal => {
                    for c in range.start..=r {
                        allowed[r * s + c] = true;
                    }
                }
                IntraGroup::SelfOnly => {
                    allowed[r * s + r] = true;
                }
            }
        }
    }
    for r in layout.text_range() {
        for c in 0..=r {
            allowed[r * s + c] = true;
        }
    }

    Ok(GatewayMask {
        layout: layout.clone(),
        intra,
        allowed,
    })
}

impl GatewayMask {
    pub fn size(&self) -> usize {
        self.layout.total()
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size() + col]
    }

    /// Flip one entry in place. Exists for fault-injection in validation
    /// tests; normal construction goes through [`build_tgm`].
    pub fn set_allowed(&mut self, row: usize, col: usize, value: bool) {
        let s = self.size();
        self.allowed[row * s + col] = value;
    }

    /// Additive form for pre-softmax application: 0 where allowed, a large
    /// negative constant where blocked.
    pub fn to_additive(&self) -> Vec<f64> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { NEG_MASK })
            .collect()
    }

    /// Header plus one line of `0`/`1` per row.
    pub fn dump(&self) -> String {
        let groups: Vec<String> = self
            .layout
            .group_lens
            .iter()
            .map(ToString::to_string)
            .collect();
        let mut out = format!(
            "S={} K={} groups={} T={} intra={}\n",
            self.size(),
            self.layout.vision_len,
            groups.join(","),
            self.layout.text_len,
            self.intra
        );
        let s = self.size();
        for r in 0..s {
            for c in 0..s {
                out.push(if self.allowed[r * s + c] { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// What a single entry must be, derived straight from the visibility rules.
/// This is the oracle: per-entry, no shared code with the block filler above.
fn rule(layout: &SequenceLayout, intra: IntraGroup, r: usize, c: usize) -> Result<bool> {
    if c > r {
        return Ok(false);
    }
    let rs = layout.segment_of(r)?;
    let cs = layout.segment_of(c)?;
    Ok(match rs {
        Segment::Vision { .. } => cs.is_vision(),
        Segment::QueryGroup { task, .. } => {
            cs.is_vision()
                || (intra == IntraGroup::Causal && cs.group() == Some(task))
                || c == r
        }
        Segment::Text { .. } => true,
    })
}

/// Re-derive every entry independently and report mismatches.
pub fn validate_mask(mask: &GatewayMask) -> Result<Vec<Violation>> {
    let s = mask.size();
    let mut report = Vec::new();
    for r in 0..s {
        for c in 0..s {
            let expected = rule(&mask.layout, mask.intra, r, c)?;
            let actual = mask.allowed(r, c);
            if expected != actual {
                report.push(Violation {
                    row: r,
                    col: c,
                    expected,
                    actual,
                });
            }
        }
    }
    Ok(report)
}
