use serde::{Deserialize, Serialize};

use super::blocks::{bn_slices, flatten, Block, BlockCtx, Core, Head, HeadCtx, LayerKind};
use super::{default_bn_eps, default_bn_momentum, FlexibleModel, ParamSlice, SubModelIndex, SubModelKind, WidthSpec};
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
pub struct SlimmableConfig {
    #[serde(default)]
    pub layer: LayerKind,
    /// Full (multiplier 1.0) width of each hidden layer.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub multipliers: WidthSpec,
    /// Share one gamma/beta per layer across widths (leading slices) instead
    /// of a private pair per width. Running moments stay private either way.
    #[serde(default)]
    pub shared_bn_affine: bool,
    #[serde(default = "yes")]
    pub pool: bool,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

impl SlimmableConfig {
    pub fn new(layer: LayerKind, widths: Vec<usize>, multipliers: WidthSpec) -> Self {
        Self {
            layer,
            widths,
            multipliers,
            shared_bn_affine: false,
            pool: true,
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("model.widths", "needs at least one layer"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("model.widths", "widths must be >= 1"));
        }
        self.multipliers.validate("model.multipliers")?;
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
struct SlimLayer {
    block: Block,
    /// One batch-norm bank per width.
    bns: Vec<BatchNorm>,
}

/// Width-switchable network. Sub-model `k` runs every layer on the leading
/// `ceil(w_k · width)` channels of the shared weights, with its own
/// batch-norm statistics.
#[derive(Debug)]
pub struct SlimmableNet {
    layers: Vec<SlimLayer>,
    head: Head,
    /// `channels[k][l]`: active outputs of layer `l` at width `k`.
    channels: Vec<Vec<usize>>,
    in_width: usize,
    input_shape: Vec<usize>,
    classes: usize,
    dense: bool,
    shared_affine: bool,
}

pub struct SlimmablePass<T: Scalar> {
    widths: Vec<(Vec<BlockCtx<T>>, HeadCtx<T>)>,
}

impl SlimmableNet {
    /// Registers `block{l}.weight`, `block{l}.bn{k}.*` (or `block{l}.bn.*`
    /// for a shared affine) and `head.*`; `l` and `k` are 1-based.
    pub fn new<T: Scalar>(
        cfg: &SlimmableConfig,
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
        let (in_width, mut hw) = match (cfg.layer, input_shape) {
            (LayerKind::Linear, s) if !s.is_empty() => (s.iter().product::<usize>(), None),
            (LayerKind::Conv, &[c, h, w]) => (c, Some((h, w))),
            _ => {
                return Err(Error::config(
                    "model.layer",
                    format!("input shape {input_shape:?} does not suit {:?} layers", cfg.layer),
                ))
            }
        };
        let opts = BatchNormOptions {
            momentum: cfg.bn_momentum,
            epsilon: cfg.bn_eps,
        };
        let mults = cfg.multipliers.multipliers();
        let channels: Vec<Vec<usize>> = mults
            .iter()
            .map(|&w| cfg.widths.iter().map(|&full| WidthSpec::channels(w, full)).collect())
            .collect();

        let mut layers = Vec::new();
        let mut width = in_width;
        for (l, &full) in cfg.widths.iter().enumerate() {
            let name = format!("block{}", l + 1);
            let core = Core::new(cfg.layer, store, &name, width, full, false, rng)?;
            let bns = if cfg.shared_bn_affine {
                let gamma = store.add(&format!("{name}.bn.gamma"), Tensor::full(&[full], T::one()), true)?;
                let beta = store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[full]), true)?;
                (0..mults.len())
                    .map(|k| BatchNorm::with_affine(store, &format!("{name}.bn{}", k + 1), channels[k][l], gamma, beta, opts))
                    .collect::<Result<Vec<_>>>()?
            } else {
                (0..mults.len())
                    .map(|k| BatchNorm::new(store, &format!("{name}.bn{}", k + 1), channels[k][l], opts))
                    .collect::<Result<Vec<_>>>()?
            };
            let pool = match hw {
                Some((h, w)) if cfg.pool && h >= 2 && w >= 2 => {
                    hw = Some(AvgPool2::output_hw(h, w));
                    true
                }
                _ => false,
            };
            layers.push(SlimLayer {
                block: Block { core, pool },
                bns,
            });
            width = full;
        }
        let head = Head {
            gap: !dense,
            linear: Linear::new(store, "head", width, classes, true, rng)?,
        };
        let net = Self {
            layers,
            head,
            channels,
            in_width,
            input_shape: input_shape.to_vec(),
            classes,
            dense,
            shared_affine: cfg.shared_bn_affine,
        };
        let counts: Vec<usize> = (1..=mults.len())
            .map(|k| net.param_count(store, SubModelIndex(k)))
            .collect();
        if counts.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config(
                "model.multipliers",
                format!("sub-model sizes must increase with the width index, got {counts:?}"),
            ));
        }
        Ok(net)
    }

    /// Active channels of every layer at width `k` (1-based).
    pub fn channels(&self, k: SubModelIndex) -> &[usize] {
        &self.channels[k.pos()]
    }

    fn prepare<T: Scalar>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        FlexibleModel::<T>::check_input(self, input)?;
        if self.dense {
            flatten(input)
        } else {
            Ok(input.clone())
        }
    }

    fn run<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        k: usize,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<BlockCtx<T>>, HeadCtx<T>)> {
        let mut h = x.clone();
        let mut ctxs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, ctx) = layer.block.forward(store, Some(&layer.bns[k]), &h, self.channels[k][l], mode)?;
            h = next;
            ctxs.push(ctx);
        }
        let (y, head) = self.head.forward(store, &h)?;
        Ok((y, ctxs, head))
    }

    fn run_eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.block.eval(store, Some(&layer.bns[k]), &h, self.channels[k][l])?;
        }
        self.head.eval(store, &h)
    }
}

impl<T: Scalar> FlexibleModel<T> for SlimmableNet {
    type Pass = SlimmablePass<T>;

    fn num_submodels(&self) -> usize {
        self.channels.len()
    }

    fn kind(&self) -> SubModelKind {
        SubModelKind::Switch
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn forward_all(&self, store: &mut ParamStore<T>, input: &Tensor<T>, mode: Mode) -> Result<(Vec<Tensor<T>>, Self::Pass)> {
        let x = self.prepare(input)?;
        let mut logits = Vec::with_capacity(self.channels.len());
        let mut widths = Vec::with_capacity(self.channels.len());
        for k in 0..self.channels.len() {
            let (y, blocks, head) = self.run(store, &x, k, mode)?;
            logits.push(y);
            widths.push((blocks, head));
        }
        Ok((logits, SlimmablePass { widths }))
    }

    fn backward_all(&self, store: &mut ParamStore<T>, pass: &Self::Pass, logit_grads: &[Tensor<T>]) -> Result<()> {
        if logit_grads.len() != self.channels.len() || pass.widths.len() != self.channels.len() {
            return Err(Error::Usage(format!(
                "expected {} logit gradients, got {}",
                self.channels.len(),
                logit_grads.len()
            )));
        }
        for (k, ((blocks, head), up)) in pass.widths.iter().zip(logit_grads).enumerate() {
            let mut g = self.head.backward(store, head, up)?;
            for (l, layer) in self.layers.iter().enumerate().rev() {
                g = layer.block.backward(store, Some(&layer.bns[k]), &blocks[l], &g)?;
            }
        }
        Ok(())
    }

    fn forward_one(&self, store: &mut ParamStore<T>, input: &Tensor<T>, i: SubModelIndex, mode: Mode) -> Result<Tensor<T>> {
        let i = FlexibleModel::<T>::index(self, i.get())?;
        let x = self.prepare(input)?;
        Ok(self.run(store, &x, i.pos(), mode)?.0)
    }

    fn eval_all(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.prepare(input)?;
        (0..self.channels.len()).map(|k| self.run_eval(store, &x, k)).collect()
    }

    fn eval_one(&self, store: &ParamStore<T>, input: &Tensor<T>, i: SubModelIndex) -> Result<Tensor<T>> {
        let i = FlexibleModel::<T>::index(self, i.get())?;
        let x = self.prepare(input)?;
        self.run_eval(store, &x, i.pos())
    }

    fn footprint(&self, store: &ParamStore<T>, i: SubModelIndex) -> Vec<ParamSlice> {
        let k = i.pos();
        let mut v = Vec::new();
        let mut in_a = self.in_width;
        for (l, layer) in self.layers.iter().enumerate() {
            let out_a = self.channels[k][l];
            v.extend(layer.block.core.slices(store, in_a, out_a));
            v.extend(bn_slices(store, &layer.bns[k], self.shared_affine));
            in_a = out_a;
        }
        v.extend(self.head.slices(store, in_a, true));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_entropy_with_grad, one_hot};
    use crate::nn::grad_check;

    fn toy(layer: LayerKind, shared: bool) -> (SlimmableNet, ParamStore<f64>, Tensor<f64>) {
        let mut cfg = SlimmableConfig::new(layer, vec![4, 4], WidthSpec::new(vec![0.5, 1.0]).unwrap());
        cfg.shared_bn_affine = shared;
        let shape = match layer {
            LayerKind::Linear => vec![5, 3],
            LayerKind::Conv => vec![4, 2, 4, 4],
        };
        let mut store = ParamStore::new();
        let net = SlimmableNet::new(&cfg, &shape[1..], 3, &mut store, &mut RngState::new(5)).unwrap();
        let x = Tensor::rand_normal(&mut RngState::new(9), &shape, 0.0, 1.0).unwrap();
        (net, store, x)
    }

    #[test]
    fn bank_statistics_are_isolated() {
        let (net, mut store, x) = toy(LayerKind::Linear, false);
        let snapshot = |s: &ParamStore<f64>, name: &str| s.value(s.id(name).unwrap()).clone();
        let other = snapshot(&store, "block1.bn2.running_mean");
        net.forward_one(&mut store, &x, SubModelIndex(1), Mode::Train).unwrap();
        assert_ne!(snapshot(&store, "block1.bn1.running_mean").data(), &[0.0, 0.0]);
        assert_eq!(snapshot(&store, "block1.bn2.running_mean"), other);
    }

    #[test]
    fn footprints_are_nested() {
        for shared in [false, true] {
            let (net, store, _) = toy(LayerKind::Conv, shared);
            let small = net.footprint(&store, SubModelIndex(1));
            let big = net.footprint(&store, SubModelIndex(2));
            for s in small.iter().filter(|s| s.shared) {
                assert!(big.iter().any(|b| s.nested_in(b)), "{s:?}");
            }
            assert!(net.param_count(&store, SubModelIndex(1)) < net.param_count(&store, SubModelIndex(2)));
        }
    }

    #[test]
    fn param_count_by_hand() {
        let (net, store, _) = toy(LayerKind::Linear, false);
        // 3→2→2→3 with bn pairs of 2 and a biased head
        assert_eq!(net.param_count(&store, SubModelIndex(1)), 6 + 4 + 4 + 4 + 6 + 3);
        assert_eq!(net.param_count(&store, SubModelIndex(2)), 12 + 8 + 16 + 8 + 12 + 3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (layer, shared) in [
            (LayerKind::Linear, false),
            (LayerKind::Linear, true),
            (LayerKind::Conv, false),
        ] {
            let (net, mut store, x) = toy(layer, shared);
            let labels = one_hot(&[0, 2, 1, 1, 0][..x.rows()], 3).unwrap();
            let r = grad_check(&mut store, |st| {
                let (logits, pass) = net.forward_all(st, &x, Mode::Train)?;
                let mut grads = Vec::new();
                let mut total = 0.0;
                for l in &logits {
                    let (v, g) = cross_entropy_with_grad(l, &labels)?;
                    total += v;
                    grads.push(g);
                }
                net.backward_all(st, &pass, &grads)?;
                Ok(total)
            })
            .unwrap();
            assert!(r.max_relative_error < 1e-5, "{layer:?} shared={shared}: {r:?}");
        }
    }
}
