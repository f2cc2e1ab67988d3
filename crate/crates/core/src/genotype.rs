//! Cell genotypes: encoding, validation, loose-end analysis, the
//! identity-padding embedding between search-space sizes, and the text
//! format.
//!
//! A cell is an ordered list of B blocks. Block b (1-based) consumes either
//! the cell input (index 0) or the output of an earlier block (index j >= 1)
//! and applies one of the six candidate operations. The cell output is the
//! sum of the loose ends: blocks no later block consumes. Summing loose ends
//! rather than all blocks is what makes identity padding an equivalence:
//! each appended identity removes one loose end from the sum and adds back
//! its unchanged image.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{OperationId, ALL_OPERATIONS};
use crate::rng::DetRng;

/// Default blocks per cell; configurable 1..=8.
pub const DEFAULT_BLOCKS: usize = 5;
pub const MAX_BLOCKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellType {
    Normal,
    Reduction,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
        }
    }
}

/// One block: which earlier output it consumes and which operation it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    /// 0 = cell input, j >= 1 = output of block j.
    pub input_index: usize,
    pub op: OperationId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellGenotype {
    pub cell_type: CellType,
    pub blocks: Vec<BlockSpec>,
}

/// A structural problem found by [`CellGenotype::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenotypeIssue {
    /// 1-based block position, or 0 for cell-level problems.
    pub block: usize,
    pub rule: String,
}

impl std::fmt::Display for GenotypeIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.block == 0 {
            write!(f, "cell: {}", self.rule)
        } else {
            write!(f, "block {}: {}", self.block, self.rule)
        }
    }
}

impl CellGenotype {
    pub fn new(cell_type: CellType, blocks: Vec<BlockSpec>) -> Self {
        CellGenotype { cell_type, blocks }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Check the structural rules; returns every violation rather than
    /// stopping at the first.
    pub fn validate(&self) -> std::result::Result<(), Vec<GenotypeIssue>> {
        let mut issues = Vec::new();
        if self.blocks.is_empty() {
            issues.push(GenotypeIssue {
                block: 0,
                rule: "genotype has no blocks".into(),
            });
        }
        for (i, block) in self.blocks.iter().enumerate() {
            let position = i + 1;
            if position == 1 && block.input_index != 0 {
                issues.push(GenotypeIssue {
                    block: 1,
                    rule: "block 1 must consume the cell input (index 0)".into(),
                });
            } else if block.input_index >= position {
                issues.push(GenotypeIssue {
                    block: position,
                    rule: format!(
                        "input index {} references block {} at or after position {}",
                        block.input_index, block.input_index, position
                    ),
                });
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// 1-based indices of blocks whose output no later block consumes.
    /// Never empty for a valid genotype: the last block is always loose.
    pub fn loose_ends(&self) -> BTreeSet<usize> {
        let consumed: BTreeSet<usize> = self
            .blocks
            .iter()
            .map(|b| b.input_index)
            .filter(|&i| i >= 1)
            .collect();
        (1..=self.blocks.len())
            .filter(|i| !consumed.contains(i))
            .collect()
    }

    /// Embed into a larger search space by appending identity blocks, each
    /// consuming the lowest-indexed current loose end. The padded cell
    /// computes the same function.
    pub fn embed(&self, target_blocks: usize) -> Result<CellGenotype> {
        if target_blocks < self.blocks.len() {
            return Err(Error::Genotype(format!(
                "cannot embed {} blocks into {target_blocks}",
                self.blocks.len()
            )));
        }
        let mut blocks = self.blocks.clone();
        let mut cell = CellGenotype::new(self.cell_type, blocks.clone());
        while blocks.len() < target_blocks {
            let lowest = *cell
                .loose_ends()
                .iter()
                .next()
                .expect("valid cell always has a loose end");
            blocks.push(BlockSpec {
                input_index: lowest,
                op: OperationId::Identity,
            });
            cell = CellGenotype::new(self.cell_type, blocks.clone());
        }
        Ok(cell)
    }

    /// Uniform over valid genotypes: input index uniform on `[0, b-1]`,
    /// operation uniform over the six candidates.
    pub fn random(rng: &mut DetRng, blocks: usize, cell_type: CellType) -> Self {
        let blocks = (1..=blocks)
            .map(|position| BlockSpec {
                input_index: rng.below(position),
                op: ALL_OPERATIONS[rng.below(ALL_OPERATIONS.len())],
            })
            .collect();
        CellGenotype::new(cell_type, blocks)
    }
}

/// A normal and a reduction cell sharing one block count.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub normal: CellGenotype,
    pub reduction: CellGenotype,
}

impl Genotype {
    pub fn new(normal: CellGenotype, reduction: CellGenotype) -> Result<Self> {
        if normal.block_count() != reduction.block_count() {
            return Err(Error::Genotype(format!(
                "normal cell has {} blocks, reduction cell {}",
                normal.block_count(),
                reduction.block_count()
            )));
        }
        Ok(Genotype { normal, reduction })
    }

    pub fn block_count(&self) -> usize {
        self.normal.block_count()
    }

    pub fn random(rng: &mut DetRng, blocks: usize) -> Self {
        Genotype {
            normal: CellGenotype::random(rng, blocks, CellType::Normal),
            reduction: CellGenotype::random(rng, blocks, CellType::Reduction),
        }
    }

    pub fn embed(&self, target_blocks: usize) -> Result<Self> {
        Ok(Genotype {
            normal: self.normal.embed(target_blocks)?,
            reduction: self.reduction.embed(target_blocks)?,
        })
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<GenotypeIssue>> {
        let mut issues = Vec::new();
        if let Err(mut e) = self.normal.validate() {
            issues.append(&mut e);
        }
        if let Err(mut e) = self.reduction.validate() {
            issues.append(&mut e);
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

// ---------------------------------------------------------------------------
// Text format: one cell per line, `<cell_type>: <idx> <OP> | <idx> <OP> | ...`
// Comment lines start with '#'. A file holds exactly one normal and one
// reduction line.
// ---------------------------------------------------------------------------

pub fn encode_cell(cell: &CellGenotype) -> String {
    let mut line = format!("{}:", cell.cell_type.name());
    for (i, block) in cell.blocks.iter().enumerate() {
        if i > 0 {
            line.push_str(" |");
        }
        let _ = write!(line, " {} {}", block.input_index, block.op.name());
    }
    line
}

pub fn encode(genotype: &Genotype) -> String {
    format!(
        "{}\n{}\n",
        encode_cell(&genotype.normal),
        encode_cell(&genotype.reduction)
    )
}

fn decode_cell_line(line: &str, line_no: usize) -> Result<CellGenotype> {
    let err = |reason: String| Error::GenotypeDecode {
        line: line_no,
        reason,
    };
    let (head, rest) = line
        .split_once(':')
        .ok_or_else(|| err("missing ':' after cell type".into()))?;
    let cell_type = match head.trim() {
        "normal" => CellType::Normal,
        "reduction" => CellType::Reduction,
        other => return Err(err(format!("unknown cell type {other:?}"))),
    };
    let mut blocks = Vec::new();
    for part in rest.split('|') {
        let mut tokens = part.split_whitespace();
        let idx = tokens
            .next()
            .ok_or_else(|| err("empty block".into()))?
            .parse::<usize>()
            .map_err(|_| err(format!("bad input index in {part:?}")))?;
        let op_text = tokens
            .next()
            .ok_or_else(|| err(format!("missing operation in {part:?}")))?;
        let op = OperationId::parse(op_text).map_err(|e| err(e.to_string()))?;
        if tokens.next().is_some() {
            return Err(err(format!("trailing tokens in {part:?}")));
        }
        blocks.push(BlockSpec {
            input_index: idx,
            op,
        });
    }
    let cell = CellGenotype::new(cell_type, blocks);
    if let Err(issues) = cell.validate() {
        let all = issues
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(err(all));
    }
    Ok(cell)
}

/// Decode a genotype file body. Reports the offending line number on error.
pub fn decode(text: &str) -> Result<Genotype> {
    let mut normal = None;
    let mut reduction = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cell = decode_cell_line(line, line_no)?;
        let slot = match cell.cell_type {
            CellType::Normal => &mut normal,
            CellType::Reduction => &mut reduction,
        };
        if slot.is_some() {
            return Err(Error::GenotypeDecode {
                line: line_no,
                reason: format!("duplicate {} cell", cell.cell_type.name()),
            });
        }
        *slot = Some(cell);
    }
    let normal = normal.ok_or_else(|| Error::Genotype("file has no normal cell".into()))?;
    let reduction =
        reduction.ok_or_else(|| Error::Genotype("file has no reduction cell".into()))?;
    Genotype::new(normal, reduction)
}
