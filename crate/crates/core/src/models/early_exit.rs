use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::blocks::{bn_slices, flatten, Block, BlockCtx, Core, Head, HeadCtx, LayerKind};
use super::{default_bn_eps, default_bn_momentum, FlexibleModel, ParamSlice, SubModelIndex, SubModelKind};
use crate::error::{Error, Result};
use crate::nn::{AvgPool2, BatchNorm, BatchNormOptions, Linear, Mode, ParamStore};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyExitConfig {
    #[serde(default)]
    pub layer: LayerKind,
    /// Output width (features or channels) of each backbone block.
    pub widths: Vec<usize>,
    /// 1-based blocks after which a classifier is attached. Defaults to
    /// every block.
    #[serde(default)]
    pub exits: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    /// 2×2 average pooling after conv blocks while the feature map is at
    /// least 2×2.
    #[serde(default = "yes")]
    pub pool: bool,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

impl EarlyExitConfig {
    pub fn new(layer: LayerKind, widths: Vec<usize>) -> Self {
        Self {
            layer,
            widths,
            exits: None,
            batch_norm: true,
            pool: true,
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
        }
    }

    pub fn exit_blocks(&self) -> Vec<usize> {
        self.exits.clone().unwrap_or_else(|| (1..=self.widths.len()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("model.widths", "needs at least one block"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("model.widths", "widths must be >= 1"));
        }
        let exits = self.exit_blocks();
        if exits.is_empty() {
            return Err(Error::config("model.exits", "needs at least one exit"));
        }
        if exits[0] == 0 || exits.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("model.exits", "exits must be strictly ascending 1-based block numbers"));
        }
        if *exits.last().unwrap() != self.widths.len() {
            return Err(Error::config("model.exits", "the last exit must follow the last block"));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("model.bn_momentum", "must lie in [0, 1]"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("model.bn_eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EeBlock {
    block: Block,
    bn: Option<BatchNorm>,
    /// Width of the block input.
    inputs: usize,
}

/// Shared backbone with a classifier after selected blocks. Sub-model `i`
/// is the backbone prefix up to exit `i` plus that exit's head.
#[derive(Debug)]
pub struct EarlyExitNet {
    blocks: Vec<EeBlock>,
    heads: Vec<Head>,
    /// 1-based block after which each head sits.
    exit_blocks: Vec<usize>,
    input_shape: Vec<usize>,
    classes: usize,
    dense: bool,
    block_calls: AtomicUsize,
}

pub struct EarlyExitPass<T: Scalar> {
    blocks: Vec<BlockCtx<T>>,
    heads: Vec<HeadCtx<T>>,
}

impl EarlyExitNet {
    /// Registers parameters as `block{b}.*` and `exit{i}.*` (1-based).
    pub fn new<T: Scalar>(
        cfg: &EarlyExitConfig,
        input_shape: &[usize],
        classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        let dense = cfg.layer == LayerKind::Linear;
        let (mut width, mut hw) = match (cfg.layer, input_shape) {
            (LayerKind::Linear, s) if !s.is_empty() => (s.iter().product::<usize>(), None),
            (LayerKind::Conv, &[c, h, w]) => (c, Some((h, w))),
            _ => {
                return Err(Error::config(
                    "model.layer",
                    format!("input shape {input_shape:?} does not suit {:?} blocks", cfg.layer),
                ))
            }
        };
        let opts = BatchNormOptions {
            momentum: cfg.bn_momentum,
            epsilon: cfg.bn_eps,
        };
        let exits = cfg.exit_blocks();
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        for (b, &out) in cfg.widths.iter().enumerate() {
            let name = format!("block{}", b + 1);
            // a bias right before batch norm is cancelled by the mean
            let core = Core::new(cfg.layer, store, &name, width, out, !cfg.batch_norm, rng)?;
            let bn = if cfg.batch_norm {
                Some(BatchNorm::new(store, &format!("{name}.bn"), out, opts)?)
            } else {
                None
            };
            let pool = match hw {
                Some((h, w)) if cfg.pool && h >= 2 && w >= 2 => {
                    hw = Some(AvgPool2::output_hw(h, w));
                    true
                }
                _ => false,
            };
            blocks.push(EeBlock {
                block: Block { core, pool },
                bn,
                inputs: width,
            });
            width = out;
            if exits.contains(&(b + 1)) {
                let e = heads.len() + 1;
                let linear = Linear::new(store, &format!("exit{e}"), out, classes, true, rng)?;
                heads.push(Head { gap: !dense, linear });
            }
        }
        let net = Self {
            blocks,
            heads,
            exit_blocks: exits,
            input_shape: input_shape.to_vec(),
            classes,
            dense,
            block_calls: AtomicUsize::new(0),
        };
        let counts: Vec<usize> = (1..=net.heads.len())
            .map(|i| net.param_count(store, SubModelIndex(i)))
            .collect();
        if counts.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config(
                "model.widths",
                format!("sub-model sizes must increase with the exit index, got {counts:?}"),
            ));
        }
        Ok(net)
    }

    /// Backbone block evaluations since construction or the last reset.
    pub fn block_calls(&self) -> usize {
        self.block_calls.load(Ordering::Relaxed)
    }

    pub fn reset_block_calls(&self) {
        self.block_calls.store(0, Ordering::Relaxed);
    }

    pub fn exit_blocks(&self) -> &[usize] {
        &self.exit_blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn prepare<T: Scalar>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        FlexibleModel::<T>::check_input(self, input)?;
        if self.dense {
            flatten(input)
        } else {
            Ok(input.clone())
        }
    }

    fn out_width(&self, b: usize) -> usize {
        self.blocks[b].block.core.outputs()
    }

    fn tick(&self) {
        self.block_calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl<T: Scalar> FlexibleModel<T> for EarlyExitNet {
    type Pass = EarlyExitPass<T>;

    fn num_submodels(&self) -> usize {
        self.heads.len()
    }

    fn kind(&self) -> SubModelKind {
        SubModelKind::Exit
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn uses_batch_norm(&self) -> bool {
        self.blocks.iter().any(|b| b.bn.is_some())
    }

    fn forward_all(&self, store: &mut ParamStore<T>, input: &Tensor<T>, mode: Mode) -> Result<(Vec<Tensor<T>>, Self::Pass)> {
        let mut h = self.prepare(input)?;
        let mut pass = EarlyExitPass {
            blocks: Vec::with_capacity(self.blocks.len()),
            heads: Vec::with_capacity(self.heads.len()),
        };
        let mut logits = Vec::with_capacity(self.heads.len());
        for (b, blk) in self.blocks.iter().enumerate() {
            self.tick();
            let (next, ctx) = blk.block.forward(store, blk.bn.as_ref(), &h, self.out_width(b), mode)?;
            h = next;
            pass.blocks.push(ctx);
            if let Some(e) = self.exit_blocks.iter().position(|&x| x == b + 1) {
                let (y, ctx) = self.heads[e].forward(store, &h)?;
                logits.push(y);
                pass.heads.push(ctx);
            }
        }
        Ok((logits, pass))
    }

    fn backward_all(&self, store: &mut ParamStore<T>, pass: &Self::Pass, logit_grads: &[Tensor<T>]) -> Result<()> {
        if logit_grads.len() != self.heads.len() || pass.blocks.len() != self.blocks.len() {
            return Err(Error::Usage(format!(
                "expected {} logit gradients, got {}",
                self.heads.len(),
                logit_grads.len()
            )));
        }
        let mut g: Option<Tensor<T>> = None;
        for b in (0..self.blocks.len()).rev() {
            if let Some(e) = self.exit_blocks.iter().position(|&x| x == b + 1) {
                let dh = self.heads[e].backward(store, &pass.heads[e], &logit_grads[e])?;
                g = Some(match g {
                    Some(acc) => acc.add(&dh)?,
                    None => dh,
                });
            }
            let blk = &self.blocks[b];
            let up = g.as_ref().expect("last block always carries an exit");
            g = Some(blk.block.backward(store, blk.bn.as_ref(), &pass.blocks[b], up)?);
        }
        Ok(())
    }

    fn forward_one(&self, store: &mut ParamStore<T>, input: &Tensor<T>, i: SubModelIndex, mode: Mode) -> Result<Tensor<T>> {
        let i = FlexibleModel::<T>::index(self, i.get())?;
        let mut h = self.prepare(input)?;
        for b in 0..self.exit_blocks[i.pos()] {
            self.tick();
            let blk = &self.blocks[b];
            h = blk.block.forward(store, blk.bn.as_ref(), &h, self.out_width(b), mode)?.0;
        }
        Ok(self.heads[i.pos()].forward(store, &h)?.0)
    }

    fn eval_all(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut h = self.prepare(input)?;
        let mut out = Vec::with_capacity(self.heads.len());
        for (b, blk) in self.blocks.iter().enumerate() {
            self.tick();
            h = blk.block.eval(store, blk.bn.as_ref(), &h, self.out_width(b))?;
            if let Some(e) = self.exit_blocks.iter().position(|&x| x == b + 1) {
                out.push(self.heads[e].eval(store, &h)?);
            }
        }
        Ok(out)
    }

    fn eval_one(&self, store: &ParamStore<T>, input: &Tensor<T>, i: SubModelIndex) -> Result<Tensor<T>> {
        let i = FlexibleModel::<T>::index(self, i.get())?;
        let mut h = self.prepare(input)?;
        for b in 0..self.exit_blocks[i.pos()] {
            self.tick();
            let blk = &self.blocks[b];
            h = blk.block.eval(store, blk.bn.as_ref(), &h, self.out_width(b))?;
        }
        self.heads[i.pos()].eval(store, &h)
    }

    /// Backbone blocks up to the exit (shared with every deeper exit) plus
    /// the exit's own head (private).
    fn footprint(&self, store: &ParamStore<T>, i: SubModelIndex) -> Vec<ParamSlice> {
        let mut v = Vec::new();
        for b in 0..self.exit_blocks[i.pos()] {
            let blk = &self.blocks[b];
            v.extend(blk.block.core.slices(store, blk.inputs, self.out_width(b)));
            if let Some(bn) = &blk.bn {
                v.extend(bn_slices(store, bn, true));
            }
        }
        v.extend(self.heads[i.pos()].slices(store, self.out_width(self.exit_blocks[i.pos()] - 1), false));
        v
    }
}
