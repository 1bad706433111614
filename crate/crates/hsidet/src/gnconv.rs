//! Iterative gated convolution gⁿConv and the HSI-Former block.
//!
//! gⁿConv projects the input to 2C channels, splits them into a carrier a₀
//! and gates b₀..b₍ₙ₋₁₎ on a doubling channel schedule, then iterates
//! a₍ᵢ₊₁₎ = hᵢ(aᵢ) ⊗ DWConv(bᵢ) — n elementwise products in sequence, each
//! widening the carrier — and projects back to C channels. The HSI-Former
//! block drops it into a Transformer-encoder skeleton in place of
//! self-attention: pre-norm, gⁿConv residual, pre-norm, MLP residual.

use rand_chacha::ChaCha8Rng;

use crate::analyzer::Census;
use crate::error::{Error, Result};
use crate::nn::{
    batch_norm_forward, register_batch_norm, Act, ConvUnit, Forward, ParamStore,
};
use crate::tensor::graph::Var;
use crate::tensor::ops::Conv2dSpec;
use crate::tensor::{Scalar, Shape};

/// Depthwise kernel size inside gⁿConv; large for context modeling.
pub const GNCONV_DW_KERNEL: usize = 7;

/// Channel widths [C₀..C₍ₙ₋₁₎] with Cᵢ = C / 2^(n-i-1). Together with the
/// carrier a₀ (width C₀) the split consumes exactly 2C channels.
pub fn channel_schedule(channels: usize, order: usize) -> Result<Vec<usize>> {
    if order == 0 {
        return Err(Error::InvalidSpec("gnconv order must be >= 1".into()));
    }
    let denom = 1usize << (order - 1);
    if channels % denom != 0 {
        return Err(Error::InvalidSpec(format!(
            "gnconv needs channels divisible by 2^(n-1): C={channels}, n={order}"
        )));
    }
    Ok((0..order)
        .map(|i| channels / (1 << (order - 1 - i)))
        .collect())
}

/// Hyperparameters of one gⁿConv.
#[derive(Debug, Clone, Copy)]
pub struct GnConvSpec {
    pub channels: usize,
    pub order: usize,
    pub dw_kernel: usize,
}

impl GnConvSpec {
    pub fn new(channels: usize, order: usize) -> Self {
        GnConvSpec {
            channels,
            order,
            dw_kernel: GNCONV_DW_KERNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        channel_schedule(self.channels, self.order)?;
        if self.dw_kernel % 2 == 0 {
            return Err(Error::InvalidSpec("gnconv dw kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GnConv {
    pub name: String,
    pub spec: GnConvSpec,
    schedule: Vec<usize>,
    conv_in: ConvUnit,
    dw: Vec<ConvUnit>,
    projections: Vec<ConvUnit>,
    conv_out: ConvUnit,
}

impl GnConv {
    pub fn new(name: impl Into<String>, spec: GnConvSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let schedule = channel_schedule(spec.channels, spec.order)?;
        let conv_in = ConvUnit::new(
            format!("{name}.conv_in"),
            Conv2dSpec::pointwise(spec.channels, 2 * spec.channels),
            false,
            Act::None,
        );
        let dw = schedule
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                ConvUnit::new(
                    format!("{name}.dw{i}"),
                    Conv2dSpec::depthwise(c, spec.dw_kernel, 1),
                    false,
                    Act::None,
                )
            })
            .collect();
        let projections = (1..spec.order)
            .map(|i| {
                ConvUnit::new(
                    format!("{name}.proj{i}"),
                    Conv2dSpec::pointwise(schedule[i - 1], schedule[i]),
                    false,
                    Act::None,
                )
            })
            .collect();
        let conv_out = ConvUnit::new(
            format!("{name}.conv_out"),
            Conv2dSpec::pointwise(spec.channels, spec.channels),
            false,
            Act::None,
        );
        Ok(GnConv {
            name,
            spec,
            schedule,
            conv_in,
            dw,
            projections,
            conv_out,
        })
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    /// Channel sizes of the split of the 2C-wide projection:
    /// [a₀, b₀, b₁, .., b₍ₙ₋₁₎].
    fn split_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.spec.order + 1);
        sizes.push(self.schedule[0]);
        sizes.extend_from_slice(&self.schedule);
        sizes
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.conv_in.register(store, rng)?;
        for unit in &self.dw {
            unit.register(store, rng)?;
        }
        for unit in &self.projections {
            unit.register(store, rng)?;
        }
        self.conv_out.register(store, rng)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        if cx.graph.shape(x).c != self.spec.channels {
            return Err(Error::shape(
                "gnconv",
                format!(
                    "input has {} channels, spec expects {}",
                    cx.graph.shape(x).c,
                    self.spec.channels
                ),
            ));
        }
        let projected = self.conv_in.forward(cx, x)?;
        let parts = cx.graph.split_channels(projected, &self.split_sizes())?;
        let mut carrier = parts[0];
        for i in 0..self.spec.order {
            let gate = self.dw[i].forward(cx, parts[i + 1])?;
            if i > 0 {
                carrier = self.projections[i - 1].forward(cx, carrier)?;
            }
            carrier = cx.graph.mul(carrier, gate)?;
        }
        self.conv_out.forward(cx, carrier)
    }

    pub fn census(&self, census: &mut Census, input: Shape) -> Result<Shape> {
        let projected = self.conv_in.census(census, input)?;
        census.movement(&format!("{}.split", self.name), "split", projected);
        let mut carrier = Shape::new(input.n, self.schedule[0], input.h, input.w)?;
        for i in 0..self.spec.order {
            let gate_in = Shape::new(input.n, self.schedule[i], input.h, input.w)?;
            let gate = self.dw[i].census(census, gate_in)?;
            if i > 0 {
                carrier = self.projections[i - 1].census(census, carrier)?;
            }
            debug_assert_eq!(carrier, gate);
            census.elementwise(&format!("{}.gate{i}", self.name), "mul", gate);
            carrier = gate;
        }
        self.conv_out.census(census, carrier)
    }
}

/// Hyperparameters of the HSI-Former stack.
#[derive(Debug, Clone, Copy)]
pub struct HsiFormerSpec {
    pub channels: usize,
    pub layers: usize,
    pub order: usize,
    pub mlp_ratio: f64,
}

impl HsiFormerSpec {
    pub fn new(channels: usize, layers: usize, order: usize) -> Self {
        HsiFormerSpec {
            channels,
            layers,
            order,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidSpec("hsi-former needs layers >= 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidSpec("hsi-former mlp_ratio must be > 0".into()));
        }
        GnConvSpec::new(self.channels, self.order).validate()
    }

    fn hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

struct HsiFormerLayer {
    norm1: String,
    gnconv: GnConv,
    norm2: String,
    fc1: ConvUnit,
    fc2: ConvUnit,
}

/// L repetitions of (pre-norm gⁿConv residual, pre-norm MLP residual).
pub struct HsiFormer {
    pub name: String,
    pub spec: HsiFormerSpec,
    layers: Vec<HsiFormerLayer>,
}

impl HsiFormer {
    pub fn new(name: impl Into<String>, spec: HsiFormerSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let hidden = spec.hidden();
        let layers = (0..spec.layers)
            .map(|l| {
                let prefix = format!("{name}.l{l}");
                Ok(HsiFormerLayer {
                    norm1: format!("{prefix}.norm1"),
                    gnconv: GnConv::new(
                        format!("{prefix}.gnconv"),
                        GnConvSpec::new(spec.channels, spec.order),
                    )?,
                    norm2: format!("{prefix}.norm2"),
                    fc1: ConvUnit::new(
                        format!("{prefix}.mlp.fc1"),
                        Conv2dSpec::pointwise(spec.channels, hidden),
                        false,
                        Act::HSwish,
                    ),
                    fc2: ConvUnit::new(
                        format!("{prefix}.mlp.fc2"),
                        Conv2dSpec::pointwise(hidden, spec.channels),
                        false,
                        Act::None,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HsiFormer { name, spec, layers })
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for layer in &self.layers {
            register_batch_norm(store, &layer.norm1, self.spec.channels)?;
            layer.gnconv.register(store, rng)?;
            register_batch_norm(store, &layer.norm2, self.spec.channels)?;
            layer.fc1.register(store, rng)?;
            layer.fc2.register(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut x = x;
        for layer in &self.layers {
            let normed = batch_norm_forward(cx, &layer.norm1, x)?;
            let mixed = layer.gnconv.forward(cx, normed)?;
            x = cx.graph.add(x, mixed)?;
            let normed = batch_norm_forward(cx, &layer.norm2, x)?;
            let hidden = layer.fc1.forward(cx, normed)?;
            let mlp = layer.fc2.forward(cx, hidden)?;
            x = cx.graph.add(x, mlp)?;
        }
        Ok(x)
    }

    pub fn census(&self, census: &mut Census, input: Shape) -> Result<Shape> {
        for layer in &self.layers {
            census.batch_norm(&layer.norm1, input);
            let mixed = layer.gnconv.census(census, input)?;
            census.elementwise(&format!("{}.residual1", layer.gnconv.name), "add", mixed);
            census.batch_norm(&layer.norm2, input);
            let hidden = layer.fc1.census(census, input)?;
            let mlp = layer.fc2.census(census, hidden)?;
            census.elementwise(&format!("{}.residual2", layer.gnconv.name), "add", mlp);
        }
        Ok(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind, random_tensor, test_rng};
    use crate::tensor::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_matches_direct_evaluation() {
        // C=64, n=3: a0 has 16 channels, gates are [16, 32, 64]; total 128.
        assert_eq!(channel_schedule(64, 3).unwrap(), vec![16, 32, 64]);
        // C=4, n=1: plain gated conv, a0 and b0 both C.
        assert_eq!(channel_schedule(4, 1).unwrap(), vec![4]);
        // C=8, n=2: a0 4, gates [4, 8], total 16.
        assert_eq!(channel_schedule(8, 2).unwrap(), vec![4, 8]);
        assert!(channel_schedule(6, 3).is_err());
        assert!(channel_schedule(8, 0).is_err());
    }

    #[test]
    fn split_widths_sum_to_twice_the_channels() {
        for c in (8..=256).step_by(8) {
            for n in 1..=4 {
                if c % (1usize << (n - 1)) != 0 {
                    continue;
                }
                let schedule = channel_schedule(c, n).unwrap();
                let total: usize = schedule[0] + schedule.iter().sum::<usize>();
                assert_eq!(total, 2 * c, "C={c} n={n}");
            }
        }
    }

    fn forward_gnconv(
        spec: GnConvSpec,
        input: &Tensor<f64>,
        seed: u64,
    ) -> (Tensor<f64>, ParamStore<f64>) {
        let block = GnConv::new("gn", spec).unwrap();
        let mut store = ParamStore::new();
        let mut rng = test_rng(seed);
        block.register(&mut store, &mut rng).unwrap();
        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let x = graph.constant(input.clone());
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let y = block.forward(&mut cx, x).unwrap();
        (graph.value(y).clone(), store)
    }

    #[test]
    fn gnconv_preserves_shape_for_all_orders() {
        let mut rng = test_rng(30);
        let input = random_tensor(&mut rng, Shape::new(1, 64, 20, 20).unwrap(), 0.5);
        for n in 1..=4 {
            let (out, _) = forward_gnconv(GnConvSpec::new(64, n), &input, 31);
            assert_eq!(out.shape(), input.shape(), "n={n}");
        }
    }

    #[test]
    fn zero_conv_in_annihilates_output() {
        let spec = GnConvSpec::new(8, 3);
        let block = GnConv::new("gn", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(32);
        block.register(&mut store, &mut rng).unwrap();
        store.zero_matching("gn.conv_in");
        let input = random_tensor(&mut rng, Shape::new(1, 8, 4, 4).unwrap(), 1.0);
        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let x = graph.constant(input);
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let y = block.forward(&mut cx, x).unwrap();
        assert!(graph.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// Hand-unrolled 3rd-order forward using raw tensor kernels, computing
    /// the three gated products explicitly with the same parameters.
    fn unrolled_g3(
        input: &Tensor<f64>,
        store: &ParamStore<f64>,
        c: usize,
    ) -> Tensor<f64> {
        use crate::tensor::ops as t;
        let pw =
            |x: &Tensor<f64>, w: &Tensor<f64>, cin: usize, cout: usize| -> Tensor<f64> {
                t::conv2d(x, w, None, &Conv2dSpec::pointwise(cin, cout)).unwrap()
            };
        let dw = |x: &Tensor<f64>, w: &Tensor<f64>, ch: usize| -> Tensor<f64> {
            t::conv2d(x, w, None, &Conv2dSpec::depthwise(ch, GNCONV_DW_KERNEL, 1)).unwrap()
        };
        let w = |n: &str| store.tensor(&format!("gn.{n}.weight")).unwrap();

        let xp = pw(input, w("conv_in"), c, 2 * c);
        let parts = t::split_channels(&xp, &[c / 4, c / 4, c / 2, c]).unwrap();
        let (a0, b0, b1, b2) = (&parts[0], &parts[1], &parts[2], &parts[3]);
        let a1 = t::mul(a0, &dw(b0, w("dw0"), c / 4)).unwrap();
        let a2 = t::mul(&pw(&a1, w("proj1"), c / 4, c / 2), &dw(b1, w("dw1"), c / 2)).unwrap();
        let a3 = t::mul(&pw(&a2, w("proj2"), c / 2, c), &dw(b2, w("dw2"), c)).unwrap();
        pw(&a3, w("conv_out"), c, c)
    }

    #[test]
    fn order3_forward_matches_unrolled_oracle() {
        let mut rng = test_rng(33);
        let input = random_tensor(&mut rng, Shape::new(1, 8, 4, 4).unwrap(), 1.0);
        let (out, store) = forward_gnconv(GnConvSpec::new(8, 3), &input, 34);
        let oracle = unrolled_g3(&input, &store, 8);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            let rel = (a - b).abs() / b.abs().max(1.0);
            assert!(rel < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn hsi_former_identity_with_zeroed_projections() {
        let spec = HsiFormerSpec::new(8, 2, 2);
        let block = HsiFormer::new("hsi", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(35);
        block.register(&mut store, &mut rng).unwrap();
        for l in 0..2 {
            store.zero_matching(&format!("hsi.l{l}.gnconv.conv_out"));
            store.zero_matching(&format!("hsi.l{l}.mlp.fc2"));
        }
        let input = random_tensor(&mut rng, Shape::new(1, 8, 5, 5).unwrap(), 1.0);
        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let x = graph.constant(input.clone());
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let y = block.forward(&mut cx, x).unwrap();
        assert_eq!(graph.value(y), &input);
    }

    #[test]
    fn hsi_former_shape_and_param_invariance_to_spatial_size() {
        let spec = HsiFormerSpec::new(160, 1, 3);
        let block = HsiFormer::new("hsi", spec).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = test_rng(36);
        block.register(&mut store, &mut rng).unwrap();

        let mut census_small = Census::new();
        block
            .census(&mut census_small, Shape::new(1, 160, 20, 20).unwrap())
            .unwrap();
        let mut census_big = Census::new();
        block
            .census(&mut census_big, Shape::new(1, 160, 40, 40).unwrap())
            .unwrap();
        assert_eq!(census_small.total_params(), census_big.total_params());
        assert_eq!(census_small.total_params(), store.learnable_elements());

        let mut graph = Graph::<f32>::new();
        let bound = bind(&store, &mut graph);
        let mut rng2 = test_rng(37);
        let x = graph.constant(random_tensor(&mut rng2, Shape::new(1, 160, 20, 20).unwrap(), 0.5));
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let y = block.forward(&mut cx, x).unwrap();
        assert_eq!(graph.shape(y), Shape::new(1, 160, 20, 20).unwrap());
    }
}
