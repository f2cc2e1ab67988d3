//! Macro hyperparameters.

use crate::error::{Error, Result};
use crate::genotype::MAX_BLOCKS;
use crate::model::LayerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Sum the loose-end outputs (default).
    Sum,
    /// Concatenate loose ends, then a 1x1 convolution back to cell width.
    Concat1x1,
}

impl MergeMode {
    pub fn name(self) -> &'static str {
        match self {
            MergeMode::Sum => "sum",
            MergeMode::Concat1x1 => "concat_1x1",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "sum" => Ok(MergeMode::Sum),
            "concat_1x1" => Ok(MergeMode::Concat1x1),
            other => Err(Error::Config(format!("unknown merge mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BypassMode {
    /// Factorized reduction: two offset stride-2 1x1 convolutions (default).
    Factorized,
    /// Two stacked separable 3x3 convolutions, the first at stride 2.
    Sep3x3,
    /// A second reduction cell with independent weights.
    ReductionCell,
}

impl BypassMode {
    pub fn name(self) -> &'static str {
        match self {
            BypassMode::Factorized => "factorized",
            BypassMode::Sep3x3 => "sep3x3",
            BypassMode::ReductionCell => "reduction_cell",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "factorized" => Ok(BypassMode::Factorized),
            "sep3x3" => Ok(BypassMode::Sep3x3),
            "reduction_cell" => Ok(BypassMode::ReductionCell),
            other => Err(Error::Config(format!("unknown bypass mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Blocks per cell (B).
    pub blocks: usize,
    /// Normal cells per stage (N); total layers = 3N + 2.
    pub cells_per_stage: usize,
    /// Stem output channels (f); stages run at f, 2f, 4f.
    pub filters: usize,
    pub num_classes: usize,
    pub merge_mode: MergeMode,
    /// Batch norm after the cell merge.
    pub cell_bn: bool,
    pub bypass_mode: BypassMode,
    /// Drop-path keep probability in (0, 1]; 1 disables drop-path.
    pub drop_path_keep: f64,
    /// Execute MINPOOL3 as average pooling (non-default variant).
    pub minpool_as_avg: bool,
    /// Input spatial extent (square), 32 for CIFAR-10.
    pub input_hw: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 5,
            cells_per_stage: 5,
            filters: 96,
            num_classes: 10,
            merge_mode: MergeMode::Sum,
            cell_bn: false,
            bypass_mode: BypassMode::Factorized,
            drop_path_keep: 0.9,
            minpool_as_avg: false,
            input_hw: 32,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and smoke runs.
    pub fn desk(blocks: usize, cells_per_stage: usize, filters: usize, classes: usize) -> Self {
        ModelConfig {
            blocks,
            cells_per_stage,
            filters,
            num_classes: classes,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.blocks > MAX_BLOCKS {
            return Err(Error::Config(format!(
                "blocks per cell must be 1..={MAX_BLOCKS}, got {}",
                self.blocks
            )));
        }
        if self.cells_per_stage == 0 {
            return Err(Error::Config("cells_per_stage must be >= 1".into()));
        }
        if self.filters == 0 || self.filters % 4 != 0 {
            return Err(Error::Config(format!(
                "filters must be a positive multiple of 4 (splits stay even through both reductions), got {}",
                self.filters
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(self.drop_path_keep > 0.0 && self.drop_path_keep <= 1.0) {
            return Err(Error::Config(format!(
                "drop_path_keep {} outside (0, 1]",
                self.drop_path_keep
            )));
        }
        if self.input_hw < 4 || self.input_hw % 4 != 0 {
            return Err(Error::Config(format!(
                "input extent {} must be a positive multiple of 4",
                self.input_hw
            )));
        }
        Ok(())
    }

    /// Total layers: 3 stages of N normal cells + 2 reduction layers.
    pub fn layer_count(&self) -> usize {
        3 * self.cells_per_stage + 2
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let n = self.cells_per_stage;
        (0..self.layer_count())
            .map(|i| {
                if i == n || i == 2 * n + 1 {
                    LayerKind::Reduction
                } else {
                    LayerKind::Normal
                }
            })
            .collect()
    }

    /// Input channel count of layer `index`: f through stage 1, doubled by
    /// each reduction.
    pub fn layer_width(&self, index: usize) -> usize {
        let n = self.cells_per_stage;
        if index <= n {
            self.filters
        } else if index <= 2 * n + 1 {
            self.filters * 2
        } else {
            self.filters * 4
        }
    }

    /// Channel count entering the head.
    pub fn head_width(&self) -> usize {
        self.filters * 4
    }
}
