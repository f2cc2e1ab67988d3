//! The macro architecture: stem, three stages of N normal layers separated
//! by two reduction layers, head — either as a shared-weight supernet
//! holding every candidate operation, or as a stand-alone model holding only
//! what one genotype selects.
//!
//! Normal layers split the channels in half, run the cell on the first half,
//! concatenate the untouched second half back and shuffle. Reduction layers
//! feed the full input to both the reduction cell (stride-2 ops where the
//! cell input is consumed) and a bypass shortcut, concatenate the two paths
//! (doubling the channel count) and shuffle.

mod config;

pub use config::{BypassMode, MergeMode, ModelConfig};

use crate::error::{Error, Result};
use crate::genotype::{CellGenotype, CellType, Genotype};
use crate::nn::{
    self, apply_candidate, batch_norm, channel_concat, channel_shuffle, channel_split, conv2d,
    drop_path, factorized_reduction, global_avg_pool, norm::alloc_conv_weight, BlockCandidates,
    BnParams, ConvBnParams, FrParams, OperationId, SepParams,
};
use crate::params::{ParamId, ParamRegistry};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Normal,
    Reduction,
}

#[derive(Debug, Clone)]
struct MergeParams {
    /// 1x1 correction conv for concat merge. In a supernet it spans
    /// `B * cell_width` input channels and is sliced to the sampled
    /// genotype's loose-end count; a fixed model allocates the exact width.
    conv: Option<ParamId>,
    bn: Option<BnParams>,
}

#[derive(Debug, Clone)]
enum BypassParams {
    Factorized(FrParams),
    /// Two stacked separable 3x3 convolutions, the first at stride 2.
    Sep(SepParams),
    /// A second reduction cell with independent weights.
    Cell {
        blocks: Vec<BlockCandidates>,
        merge: MergeParams,
    },
}

#[derive(Debug, Clone)]
struct Layer {
    kind: LayerKind,
    /// Input channel count of the layer.
    width: usize,
    /// Channel count the cell operates on (width/2 normal, width reduction).
    cell_width: usize,
    blocks: Vec<BlockCandidates>,
    merge: MergeParams,
    bypass: Option<BypassParams>,
}

#[derive(Debug, Clone)]
struct StemParams {
    conv: ParamId,
    bn: BnParams,
}

#[derive(Debug, Clone)]
struct HeadParams {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum ModelKind {
    Supernet,
    Fixed(Genotype),
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub registry: ParamRegistry<T>,
    layers: Vec<Layer>,
    stem: StemParams,
    head: HeadParams,
    kind: ModelKind,
}

fn layer_key(index: usize) -> String {
    format!("layer{index:02}")
}

impl<T: Scalar> Model<T> {
    /// Build the shared-weight supernet: every candidate operation at every
    /// (layer, block) position is allocated. Weights for a key are reused by
    /// every genotype selecting that operation at that position; the key
    /// deliberately excludes the block's input index, which is legal because
    /// all candidate inputs have equal width.
    pub fn supernet(config: ModelConfig, rng: &mut DetRng) -> Result<Self> {
        Self::build(config, ModelKind::Supernet, rng)
    }

    /// Build a stand-alone model with fresh weights for one genotype; only
    /// the selected operations are allocated.
    pub fn fixed(config: ModelConfig, genotype: Genotype, rng: &mut DetRng) -> Result<Self> {
        if genotype.block_count() != config.blocks {
            return Err(Error::Config(format!(
                "genotype has {} blocks, config expects {}",
                genotype.block_count(),
                config.blocks
            )));
        }
        if let Err(issues) = genotype.validate() {
            return Err(Error::Genotype(
                issues
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
        Self::build(config, ModelKind::Fixed(genotype), rng)
    }

    fn build(config: ModelConfig, kind: ModelKind, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let mut registry = ParamRegistry::new();

        let stem = StemParams {
            conv: alloc_conv_weight(&mut registry, "stem/conv/w", config.filters, 3, 3, rng)?,
            bn: BnParams::alloc(&mut registry, "stem", config.filters)?,
        };

        let mut layers = Vec::with_capacity(config.layer_count());
        for (index, layer_kind) in config.layer_kinds().into_iter().enumerate() {
            let width = config.layer_width(index);
            let cell_width = match layer_kind {
                LayerKind::Normal => width / 2,
                LayerKind::Reduction => width,
            };
            let prefix = layer_key(index);
            let cell_genotype = match (&kind, layer_kind) {
                (ModelKind::Fixed(g), LayerKind::Normal) => Some(g.normal.clone()),
                (ModelKind::Fixed(g), LayerKind::Reduction) => Some(g.reduction.clone()),
                (ModelKind::Supernet, _) => None,
            };
            let blocks = Self::alloc_blocks(
                &mut registry,
                &prefix,
                &config,
                cell_width,
                layer_kind == LayerKind::Reduction,
                cell_genotype.as_ref(),
                rng,
            )?;
            let merge = Self::alloc_merge(
                &mut registry,
                &prefix,
                &config,
                cell_width,
                cell_genotype.as_ref(),
                rng,
            )?;
            let bypass = if layer_kind == LayerKind::Reduction {
                Some(Self::alloc_bypass(
                    &mut registry,
                    &prefix,
                    &config,
                    width,
                    cell_genotype.as_ref(),
                    rng,
                )?)
            } else {
                None
            };
            layers.push(Layer {
                kind: layer_kind,
                width,
                cell_width,
                blocks,
                merge,
                bypass,
            });
        }

        let head_in = config.head_width();
        let head = HeadParams {
            weight: registry.add_normal(
                "head/fc/w",
                vec![head_in, config.num_classes],
                (1.0 / head_in as f64).sqrt(),
                rng,
            )?,
            bias: registry.add_const("head/fc/b", vec![config.num_classes], T::zero())?,
        };

        Ok(Model {
            config,
            registry,
            layers,
            stem,
            head,
            kind,
        })
    }

    /// Allocate candidate parameter sets for every block position of a cell.
    /// With a genotype given (fixed model), only the selected operation of
    /// each block is allocated; identity gets factorized-reduction weights
    /// only at stride-2 positions.
    fn alloc_blocks(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        config: &ModelConfig,
        cell_width: usize,
        reduction: bool,
        genotype: Option<&CellGenotype>,
        rng: &mut DetRng,
    ) -> Result<Vec<BlockCandidates>> {
        let mut blocks = Vec::with_capacity(config.blocks);
        for position in 1..=config.blocks {
            let bp = format!("{prefix}/block{position}");
            let mut cand = BlockCandidates::default();
            let selected = genotype.map(|g| g.blocks[position - 1]);
            let want = |op: OperationId| match selected {
                None => true,
                Some(spec) => spec.op == op,
            };
            if want(OperationId::Sep3) {
                cand.sep3 = Some(SepParams::alloc(reg, &format!("{bp}/sep3"), cell_width, 3, rng)?);
            }
            if want(OperationId::Sep5) {
                cand.sep5 = Some(SepParams::alloc(reg, &format!("{bp}/sep5"), cell_width, 5, rng)?);
            }
            if want(OperationId::Conv1) {
                cand.conv1 = Some(ConvBnParams::alloc(
                    reg,
                    &format!("{bp}/conv1"),
                    cell_width,
                    cell_width,
                    1,
                    rng,
                )?);
            }
            // identity needs weights only where it may run at stride 2
            let identity_stride2 = reduction
                && match selected {
                    None => true,
                    Some(spec) => spec.op == OperationId::Identity && spec.input_index == 0,
                };
            if identity_stride2 {
                cand.identity_fr = Some(FrParams::alloc(
                    reg,
                    &format!("{bp}/identity"),
                    cell_width,
                    cell_width,
                    rng,
                )?);
            }
            blocks.push(cand);
        }
        Ok(blocks)
    }

    fn alloc_merge(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        config: &ModelConfig,
        cell_width: usize,
        genotype: Option<&CellGenotype>,
        rng: &mut DetRng,
    ) -> Result<MergeParams> {
        let conv = match config.merge_mode {
            MergeMode::Sum => None,
            MergeMode::Concat1x1 => {
                let branches = match genotype {
                    None => config.blocks,
                    Some(g) => g.loose_ends().len(),
                };
                Some(alloc_conv_weight(
                    reg,
                    &format!("{prefix}/merge/w"),
                    cell_width,
                    branches * cell_width,
                    1,
                    rng,
                )?)
            }
        };
        let bn = if config.cell_bn {
            Some(BnParams::alloc(reg, &format!("{prefix}/merge"), cell_width)?)
        } else {
            None
        };
        Ok(MergeParams { conv, bn })
    }

    fn alloc_bypass(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        config: &ModelConfig,
        width: usize,
        genotype: Option<&CellGenotype>,
        rng: &mut DetRng,
    ) -> Result<BypassParams> {
        let bp = format!("{prefix}/bypass");
        Ok(match config.bypass_mode {
            BypassMode::Factorized => {
                BypassParams::Factorized(FrParams::alloc(reg, &bp, width, width, rng)?)
            }
            BypassMode::Sep3x3 => {
                BypassParams::Sep(SepParams::alloc(reg, &bp, width, 3, rng)?)
            }
            BypassMode::ReductionCell => {
                let blocks = Self::alloc_blocks(reg, &bp, config, width, true, genotype, rng)?;
                let merge = Self::alloc_merge(reg, &bp, config, width, genotype, rng)?;
                BypassParams::Cell { blocks, merge }
            }
        })
    }

    pub fn is_supernet(&self) -> bool {
        matches!(self.kind, ModelKind::Supernet)
    }

    pub fn fixed_genotype(&self) -> Option<&Genotype> {
        match &self.kind {
            ModelKind::Fixed(g) => Some(g),
            ModelKind::Supernet => None,
        }
    }

    /// Exact trainable parameter count (registry walk).
    pub fn param_count(&self) -> u64 {
        self.registry.trainable_elements()
    }

    /// Trainable elements under one key prefix.
    pub fn param_count_with_prefix(&self, prefix: &str) -> u64 {
        self.registry
            .iter()
            .filter(|(_, s)| s.trainable && s.name.starts_with(prefix))
            .map(|(_, s)| s.numel() as u64)
            .sum()
    }

    /// Registry keys of one (layer, block, operation) parameter group.
    pub fn op_group_keys(&self, layer: usize, block: usize, op: OperationId) -> Vec<String> {
        let prefix = format!("{}/block{}/{}/", layer_key(layer), block, op.key());
        self.registry
            .iter()
            .filter(|(_, s)| s.name.starts_with(&prefix))
            .map(|(_, s)| s.name.clone())
            .collect()
    }

    /// Run the supernet on one sampled genotype. The genotype may have fewer
    /// blocks than the supernet was built with (a smaller search space
    /// embeds into a larger one); its selections execute on the shared
    /// weights of the matching block positions.
    pub fn forward_genotype(
        &mut self,
        tape: &mut Tape<T>,
        genotype: &Genotype,
        x: &Tensor<T>,
        training: bool,
        rng: Option<&mut DetRng>,
    ) -> Result<Tensor<T>> {
        if genotype.block_count() > self.config.blocks {
            return Err(Error::Genotype(format!(
                "genotype has {} blocks, model supports at most {}",
                genotype.block_count(),
                self.config.blocks
            )));
        }
        if let Err(issues) = genotype.validate() {
            return Err(Error::Genotype(
                issues
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
        self.run(tape, genotype, x, training, rng)
    }

    /// Run a fixed model on its stored genotype.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        training: bool,
        rng: Option<&mut DetRng>,
    ) -> Result<Tensor<T>> {
        let genotype = match &self.kind {
            ModelKind::Fixed(g) => g.clone(),
            ModelKind::Supernet => {
                return Err(Error::InvalidArgument(
                    "supernet forward needs a genotype".into(),
                ))
            }
        };
        self.run(tape, &genotype, x, training, rng)
    }

    fn run(
        &mut self,
        tape: &mut Tape<T>,
        genotype: &Genotype,
        x: &Tensor<T>,
        training: bool,
        mut rng: Option<&mut DetRng>,
    ) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.config.input_hw || w != self.config.input_hw {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: format!("expected [n,3,{0},{0}] input", self.config.input_hw),
            });
        }
        if training && self.config.drop_path_keep < 1.0 && rng.is_none() {
            return Err(Error::InvalidArgument(
                "training forward with drop-path needs an rng".into(),
            ));
        }

        // stem: 3x3 conv (no bias) + batch norm
        let stem_w = tape.lease(&self.registry, self.stem.conv);
        let mut cur = conv2d(tape, x, &stem_w, 1)?;
        let stem_bn = self.stem.bn;
        cur = batch_norm(tape, &mut self.registry, &stem_bn, &cur, training)?;

        for li in 0..self.layers.len() {
            cur = self.run_layer(tape, li, genotype, &cur, training, rng.as_deref_mut())?;
        }

        // head: global average pool + fully connected
        let pooled = global_avg_pool(tape, &cur)?;
        let w = tape.lease(&self.registry, self.head.weight);
        let b = tape.lease(&self.registry, self.head.bias);
        let logits = tape.matmul(&pooled, &w)?;
        tape.bias_add(&logits, &b)
    }

    fn run_layer(
        &mut self,
        tape: &mut Tape<T>,
        index: usize,
        genotype: &Genotype,
        x: &Tensor<T>,
        training: bool,
        mut rng: Option<&mut DetRng>,
    ) -> Result<Tensor<T>> {
        let kind = self.layers[index].kind;
        match kind {
            LayerKind::Normal => {
                let (cell_in, skip) = channel_split(tape, x)?;
                let cell_out = self.run_cell(
                    tape,
                    index,
                    CellSite::Main,
                    &genotype.normal,
                    &cell_in,
                    false,
                    training,
                    rng.as_deref_mut(),
                )?;
                let cat = channel_concat(tape, &[&cell_out, &skip])?;
                channel_shuffle(tape, &cat, 2)
            }
            LayerKind::Reduction => {
                let cell_out = self.run_cell(
                    tape,
                    index,
                    CellSite::Main,
                    &genotype.reduction,
                    x,
                    true,
                    training,
                    rng.as_deref_mut(),
                )?;
                let bypass = self.run_bypass(tape, index, genotype, x, training, rng)?;
                let cat = channel_concat(tape, &[&cell_out, &bypass])?;
                channel_shuffle(tape, &cat, 2)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_cell(
        &mut self,
        tape: &mut Tape<T>,
        layer_index: usize,
        site: CellSite,
        cell: &CellGenotype,
        input: &Tensor<T>,
        reduction: bool,
        training: bool,
        mut rng: Option<&mut DetRng>,
    ) -> Result<Tensor<T>> {
        let minpool_as_avg = self.config.minpool_as_avg;
        let mut outputs: Vec<Tensor<T>> = vec![input.clone()];
        for (i, spec) in cell.blocks.iter().enumerate() {
            let src = outputs[spec.input_index].clone();
            let stride = if reduction && spec.input_index == 0 { 2 } else { 1 };
            let params = match site {
                CellSite::Main => self.layers[layer_index].blocks[i].clone(),
                CellSite::Bypass => match self.layers[layer_index].bypass.as_ref() {
                    Some(BypassParams::Cell { blocks, .. }) => blocks[i].clone(),
                    _ => unreachable!("bypass cell params"),
                },
            };
            let out = apply_candidate(
                tape,
                &mut self.registry,
                spec.op,
                &params,
                &src,
                stride,
                training,
                minpool_as_avg,
            )?;
            outputs.push(out);
        }

        // Merge the loose ends. Order them by the block each traces back to
        // through stride-1 identities (ties by block index): identity
        // padding then leaves the accumulation order unchanged, so an
        // embedded genotype reproduces the smaller cell bit-exactly.
        let mut loose: Vec<usize> = cell.loose_ends().into_iter().collect();
        let root_of = |b: usize| -> usize {
            let mut cur = b;
            loop {
                if cur == 0 {
                    return 0;
                }
                let spec = cell.blocks[cur - 1];
                let stride2 = reduction && spec.input_index == 0;
                if spec.op == OperationId::Identity && !stride2 {
                    cur = spec.input_index;
                } else {
                    return cur;
                }
            }
        };
        loose.sort_by_key(|&b| (root_of(b), b));
        let mut branches: Vec<Tensor<T>> = loose.iter().map(|&i| outputs[i].clone()).collect();
        if training && self.config.drop_path_keep < 1.0 {
            let r = rng
                .as_deref_mut()
                .ok_or_else(|| Error::InvalidArgument("drop-path needs an rng".into()))?;
            branches = drop_path(tape, &branches, self.config.drop_path_keep, training, r)?;
        }

        let merge = match site {
            CellSite::Main => self.layers[layer_index].merge.clone(),
            CellSite::Bypass => match self.layers[layer_index].bypass.as_ref() {
                Some(BypassParams::Cell { merge, .. }) => merge.clone(),
                _ => unreachable!("bypass cell merge"),
            },
        };
        let mut merged = match self.config.merge_mode {
            MergeMode::Sum => {
                let mut acc = branches[0].clone();
                for b in &branches[1..] {
                    acc = tape.add(&acc, b)?;
                }
                acc
            }
            MergeMode::Concat1x1 => {
                let refs: Vec<&Tensor<T>> = branches.iter().collect();
                let cat = tape.concat(1, &refs)?;
                let conv_id = merge
                    .conv
                    .ok_or_else(|| Error::InvalidArgument("missing merge conv".into()))?;
                let full = tape.lease(&self.registry, conv_id);
                let needed_in = cat.shape()[1];
                let w = if full.shape()[1] > needed_in {
                    tape.narrow(&full, 1, 0, needed_in)?
                } else {
                    full
                };
                conv2d(tape, &cat, &w, 1)?
            }
        };
        if let Some(bn) = merge.bn {
            merged = batch_norm(tape, &mut self.registry, &bn, &merged, training)?;
        }
        Ok(merged)
    }

    fn run_bypass(
        &mut self,
        tape: &mut Tape<T>,
        layer_index: usize,
        genotype: &Genotype,
        x: &Tensor<T>,
        training: bool,
        rng: Option<&mut DetRng>,
    ) -> Result<Tensor<T>> {
        let bypass = self.layers[layer_index]
            .bypass
            .clone()
            .expect("reduction layer has a bypass");
        match bypass {
            BypassParams::Factorized(fr) => {
                factorized_reduction(tape, &mut self.registry, &fr, x, training)
            }
            BypassParams::Sep(sep) => {
                // two stacked separable 3x3 convolutions, first at stride 2
                let mut cur = x.clone();
                for (rep, ids) in sep.reps.iter().enumerate() {
                    let stride = if rep == 0 { 2 } else { 1 };
                    let r = tape.relu(&cur);
                    let dw = tape.lease(&self.registry, ids.depthwise);
                    let d = nn::depthwise_conv2d(tape, &r, &dw, stride)?;
                    let pw = tape.lease(&self.registry, ids.pointwise);
                    let p = conv2d(tape, &d, &pw, 1)?;
                    cur = batch_norm(tape, &mut self.registry, &ids.bn, &p, training)?;
                }
                Ok(cur)
            }
            BypassParams::Cell { .. } => self.run_cell(
                tape,
                layer_index,
                CellSite::Bypass,
                &genotype.reduction,
                x,
                true,
                training,
                rng,
            ),
        }
    }

    /// Deterministic description dump: layer plan, channel/spatial plan and
    /// per-layer trainable parameter counts.
    pub fn describe(&self) -> String {
        use std::fmt::Write;
        let cfg = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model: {}",
            if self.is_supernet() { "supernet" } else { "fixed" }
        );
        let _ = writeln!(
            out,
            "blocks_per_cell: {}  cells_per_stage: {}  filters: {}  classes: {}",
            cfg.blocks, cfg.cells_per_stage, cfg.filters, cfg.num_classes
        );
        let _ = writeln!(
            out,
            "merge: {}  cell_bn: {}  bypass: {}  drop_path_keep: {}",
            cfg.merge_mode.name(),
            cfg.cell_bn,
            cfg.bypass_mode.name(),
            cfg.drop_path_keep
        );
        let mut spatial = cfg.input_hw;
        let _ = writeln!(
            out,
            "stem   conv3x3+bn   3->{:<4}  {}x{}  params {}",
            cfg.filters,
            spatial,
            spatial,
            self.param_count_with_prefix("stem/")
        );
        for (i, layer) in self.layers.iter().enumerate() {
            let (kind, out_width) = match layer.kind {
                LayerKind::Normal => ("normal   ", layer.width),
                LayerKind::Reduction => ("reduction", layer.width * 2),
            };
            if layer.kind == LayerKind::Reduction {
                spatial /= 2;
            }
            let _ = writeln!(
                out,
                "{}  {}  {}->{:<4}  {}x{}  params {}",
                layer_key(i),
                kind,
                layer.width,
                out_width,
                spatial,
                spatial,
                self.param_count_with_prefix(&format!("{}/", layer_key(i)))
            );
        }
        let _ = writeln!(
            out,
            "head   gap+fc       {}->{:<4}  1x1  params {}",
            cfg.head_width(),
            cfg.num_classes,
            self.param_count_with_prefix("head/")
        );
        let _ = writeln!(out, "total_trainable_params: {}", self.param_count());
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CellSite {
    Main,
    Bypass,
}

#[cfg(test)]
mod tests;
