//! Lightweight hybrid attention block (LHAB) and its ablation variants.
//!
//! Channel attention pools each plane to a length-C descriptor twice (max and
//! average), runs each descriptor through its own 1-D convolution whose
//! kernel size adapts to the channel count, sums, gates through a sigmoid,
//! and rescales the input. Spatial attention does the dual: channel-pooled
//! maps, two independent 7×7 convolutions, sigmoid gate over positions.
//! Neither path carries biases or normalization; the sigmoid is the only
//! nonlinearity.

use rand_chacha::ChaCha8Rng;

use crate::analyzer::Census;
use crate::error::{Error, Result};
use crate::nn::{random_tensor, Act, ConvUnit, Forward, ParamKind, ParamStore};
use crate::tensor::graph::Var;
use crate::tensor::ops::{Conv2dSpec, PoolMode};
use crate::tensor::{Scalar, Shape};

/// Kernel size of the spatial attention convolutions.
pub const SPATIAL_KERNEL: usize = 7;

/// Adaptive 1-D kernel size: the odd integer nearest to
/// log2(C)/gamma + b/gamma, never below 1. Ties round up.
pub fn psi_kernel_size_with(channels: usize, gamma: f64, b: f64) -> Result<usize> {
    if channels < 1 {
        return Err(Error::InvalidSpec(format!(
            "psi kernel size needs C >= 1, got {channels}"
        )));
    }
    let t = (channels as f64).log2() / gamma + b / gamma;
    let floor = t.floor() as i64;
    let lo = if floor % 2 == 0 { floor - 1 } else { floor };
    let hi = lo + 2;
    let k = if (t - lo as f64) < (hi as f64 - t) {
        lo
    } else {
        hi
    };
    Ok(k.max(1) as usize)
}

/// ψ(C) with the shipped constants γ=2, b=1.
pub fn psi_kernel_size(channels: usize) -> Result<usize> {
    psi_kernel_size_with(channels, 2.0, 1.0)
}

/// Channel attention hyperparameters. The two 1-D convolutions never share
/// weights; both kernel sizes default to ψ(C).
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttnSpec {
    pub channels: usize,
    pub gamma: f64,
    pub b: f64,
    pub k_max: usize,
    pub k_avg: usize,
}

impl ChannelAttnSpec {
    pub fn from_channels(channels: usize) -> Result<Self> {
        let k = psi_kernel_size(channels)?;
        Ok(ChannelAttnSpec {
            channels,
            gamma: 2.0,
            b: 1.0,
            k_max: k,
            k_avg: k,
        })
    }
}

/// Spatial attention hyperparameters: two independent single-channel 7×7
/// convolutions.
#[derive(Debug, Clone, Copy)]
pub struct SpatialAttnSpec {
    pub kernel: usize,
}

impl Default for SpatialAttnSpec {
    fn default() -> Self {
        SpatialAttnSpec {
            kernel: SPATIAL_KERNEL,
        }
    }
}

/// Which attention block a Gbneck carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// No attention at all.
    None,
    /// Channel attention then spatial attention, nothing shared.
    Lhab,
    /// Average-pooled descriptor only, single 1-D convolution.
    EcaAvg,
    /// Max- and average-pooled descriptors through one shared 1-D kernel.
    EcaShared,
    /// Max- and average-pooled descriptors, independent 1-D kernels
    /// (the channel attention block alone).
    EcaNoShare,
}

/// An attention block in any of the supported variants.
#[derive(Debug, Clone)]
pub struct HybridAttention {
    pub name: String,
    pub kind: AttentionKind,
    pub spec: ChannelAttnSpec,
    spatial_max: ConvUnit,
    spatial_avg: ConvUnit,
}

impl HybridAttention {
    pub fn new(name: impl Into<String>, kind: AttentionKind, channels: usize) -> Result<Self> {
        let name = name.into();
        let spec = ChannelAttnSpec::from_channels(channels)?;
        let conv = |suffix: &str| {
            ConvUnit::new(
                format!("{name}.sa.{suffix}"),
                Conv2dSpec::same(1, 1, SPATIAL_KERNEL, 1),
                false,
                Act::None,
            )
        };
        Ok(HybridAttention {
            spatial_max: conv("max"),
            spatial_avg: conv("avg"),
            name,
            kind,
            spec,
        })
    }

    fn kernel_name(&self, which: &str) -> String {
        format!("{}.ca.{which}_kernel", self.name)
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let kernel = |store: &mut ParamStore<T>,
                          rng: &mut ChaCha8Rng,
                          name: String,
                          k: usize|
         -> Result<()> {
            let bound = (6.0 / k as f64).sqrt();
            store.register(
                name,
                vec![k],
                random_tensor(rng, Shape::new(1, 1, 1, k)?, bound),
                ParamKind::Learnable,
            )
        };
        match self.kind {
            AttentionKind::None => {}
            AttentionKind::EcaAvg => {
                kernel(store, rng, self.kernel_name("avg"), self.spec.k_avg)?;
            }
            AttentionKind::EcaShared => {
                kernel(store, rng, self.kernel_name("shared"), self.spec.k_max)?;
            }
            AttentionKind::EcaNoShare | AttentionKind::Lhab => {
                kernel(store, rng, self.kernel_name("max"), self.spec.k_max)?;
                kernel(store, rng, self.kernel_name("avg"), self.spec.k_avg)?;
            }
        }
        if self.kind == AttentionKind::Lhab {
            self.spatial_max.register(store, rng)?;
            self.spatial_avg.register(store, rng)?;
        }
        Ok(())
    }

    /// Channel gate σ(C1D(maxpool) ⊕ C1D(avgpool)) ⊗ u.
    fn channel_forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, u: Var) -> Result<Var> {
        let merged = match self.kind {
            AttentionKind::EcaAvg => {
                let avg = cx.graph.pool_spatial(u, PoolMode::Avg);
                let k = cx.bound.var(&self.kernel_name("avg"))?;
                cx.graph.conv1d_same(avg, k)?
            }
            AttentionKind::EcaShared => {
                let mx = cx.graph.pool_spatial(u, PoolMode::Max);
                let avg = cx.graph.pool_spatial(u, PoolMode::Avg);
                let k = cx.bound.var(&self.kernel_name("shared"))?;
                let a = cx.graph.conv1d_same(mx, k)?;
                let b = cx.graph.conv1d_same(avg, k)?;
                cx.graph.add(a, b)?
            }
            _ => {
                let mx = cx.graph.pool_spatial(u, PoolMode::Max);
                let avg = cx.graph.pool_spatial(u, PoolMode::Avg);
                let km = cx.bound.var(&self.kernel_name("max"))?;
                let ka = cx.bound.var(&self.kernel_name("avg"))?;
                let a = cx.graph.conv1d_same(mx, km)?;
                let b = cx.graph.conv1d_same(avg, ka)?;
                cx.graph.add(a, b)?
            }
        };
        let gate = cx.graph.sigmoid(merged);
        cx.graph.mul(u, gate)
    }

    /// Spatial gate σ(C2D(chan-maxpool) ⊕ C2D(chan-avgpool)) ⊗ u.
    fn spatial_forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, u: Var) -> Result<Var> {
        let mx = cx.graph.pool_channel(u, PoolMode::Max);
        let avg = cx.graph.pool_channel(u, PoolMode::Avg);
        let a = self.spatial_max.forward(cx, mx)?;
        let b = self.spatial_avg.forward(cx, avg)?;
        let merged = cx.graph.add(a, b)?;
        let gate = cx.graph.sigmoid(merged);
        cx.graph.mul(u, gate)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, u: Var) -> Result<Var> {
        match self.kind {
            AttentionKind::None => Ok(u),
            AttentionKind::Lhab => {
                let refined = self.channel_forward(cx, u)?;
                self.spatial_forward(cx, refined)
            }
            _ => self.channel_forward(cx, u),
        }
    }

    pub fn census(&self, census: &mut Census, input: Shape) -> Result<Shape> {
        if self.kind == AttentionKind::None {
            return Ok(input);
        }
        let descriptor = Shape::new(input.n, input.c, 1, 1)?;
        let prefix = &self.name;
        match self.kind {
            AttentionKind::EcaAvg => {
                census.pool(&format!("{prefix}.ca.avgpool"), "pool_spatial", input, descriptor);
                census.conv1d(&format!("{prefix}.ca.avg_kernel"), self.spec.k_avg, descriptor);
            }
            AttentionKind::EcaShared => {
                census.pool(&format!("{prefix}.ca.maxpool"), "pool_spatial", input, descriptor);
                census.pool(&format!("{prefix}.ca.avgpool"), "pool_spatial", input, descriptor);
                census.conv1d(&format!("{prefix}.ca.shared_kernel"), self.spec.k_max, descriptor);
                census.conv1d_reuse(
                    &format!("{prefix}.ca.shared_kernel_second_pass"),
                    self.spec.k_max,
                    descriptor,
                );
                census.elementwise(&format!("{prefix}.ca.merge"), "add", descriptor);
            }
            _ => {
                census.pool(&format!("{prefix}.ca.maxpool"), "pool_spatial", input, descriptor);
                census.pool(&format!("{prefix}.ca.avgpool"), "pool_spatial", input, descriptor);
                census.conv1d(&format!("{prefix}.ca.max_kernel"), self.spec.k_max, descriptor);
                census.conv1d(&format!("{prefix}.ca.avg_kernel"), self.spec.k_avg, descriptor);
                census.elementwise(&format!("{prefix}.ca.merge"), "add", descriptor);
            }
        }
        census.elementwise(&format!("{prefix}.ca.sigmoid"), "sigmoid", descriptor);
        census.elementwise(&format!("{prefix}.ca.scale"), "mul", input);

        if self.kind == AttentionKind::Lhab {
            let plane = Shape::new(input.n, 1, input.h, input.w)?;
            census.pool(&format!("{prefix}.sa.maxpool"), "pool_channel", input, plane);
            census.pool(&format!("{prefix}.sa.avgpool"), "pool_channel", input, plane);
            self.spatial_max.census(census, plane)?;
            self.spatial_avg.census(census, plane)?;
            census.elementwise(&format!("{prefix}.sa.merge"), "add", plane);
            census.elementwise(&format!("{prefix}.sa.sigmoid"), "sigmoid", plane);
            census.elementwise(&format!("{prefix}.sa.scale"), "mul", input);
        }
        Ok(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind, test_rng};
    use crate::tensor::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn psi_matches_direct_evaluation() {
        // Frozen from evaluating log2(C)/2 + 1/2 and rounding to the
        // nearest odd integer before the block was built.
        for (c, k) in [(2usize, 1usize), (16, 3), (40, 3), (112, 3), (160, 5), (960, 5)] {
            assert_eq!(psi_kernel_size(c).unwrap(), k, "C={c}");
        }
        assert_eq!(psi_kernel_size(1).unwrap(), 1);
        // t=1.5 at C=4 is nearer to 1 than to 3.
        assert_eq!(psi_kernel_size(4).unwrap(), 1);
        // True tie: C=8 gives t=2.0, equidistant from 1 and 3; round up.
        assert_eq!(psi_kernel_size(8).unwrap(), 3);
        assert!(psi_kernel_size(0).is_err());
    }

    fn build_block(
        kind: AttentionKind,
        channels: usize,
        seed: u64,
    ) -> (HybridAttention, ParamStore<f64>) {
        let attn = HybridAttention::new("attn", kind, channels).unwrap();
        let mut store = ParamStore::new();
        let mut rng = test_rng(seed);
        attn.register(&mut store, &mut rng).unwrap();
        (attn, store)
    }

    fn forward_values(
        attn: &HybridAttention,
        store: &ParamStore<f64>,
        input: Tensor<f64>,
    ) -> Tensor<f64> {
        let mut graph = Graph::new();
        let bound = bind(store, &mut graph);
        let x = graph.constant(input);
        let mut cx = Forward::new(&mut graph, &bound, store, false);
        let y = attn.forward(&mut cx, x).unwrap();
        graph.value(y).clone()
    }

    #[test]
    fn zero_weights_halve_then_quarter() {
        let (attn, mut store) = build_block(AttentionKind::Lhab, 8, 12);
        store.zero_matching("attn");
        let mut rng = test_rng(13);
        let input = random_tensor(&mut rng, Shape::new(1, 8, 4, 4).unwrap(), 1.0);
        let out = forward_values(&attn, &store, input.clone());
        // Two zero-weight gates: sigmoid(0)^2 = 0.25.
        for (o, i) in out.data().iter().zip(input.data()) {
            assert!((o - 0.25 * i).abs() < 1e-12);
        }

        let (ca_only, mut store2) = build_block(AttentionKind::EcaNoShare, 8, 12);
        store2.zero_matching("attn");
        let input2 = random_tensor(&mut rng, Shape::new(1, 8, 4, 4).unwrap(), 1.0);
        let out2 = forward_values(&ca_only, &store2, input2.clone());
        for (o, i) in out2.data().iter().zip(input2.data()) {
            assert!((o - 0.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_shrink_magnitudes_and_preserve_shape() {
        let (attn, store) = build_block(AttentionKind::Lhab, 16, 14);
        let mut rng = test_rng(15);
        for _ in 0..100 {
            let input = random_tensor(&mut rng, Shape::new(1, 16, 5, 5).unwrap(), 2.0);
            let out = forward_values(&attn, &store, input.clone());
            assert_eq!(out.shape(), input.shape());
            for (o, i) in out.data().iter().zip(input.data()) {
                assert!(o.abs() <= i.abs() + 1e-12, "gate must lie in (0,1)");
                if *i != 0.0 {
                    assert!(o.signum() == i.signum() || *o == 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_plane_gives_equal_descriptors() {
        let (attn, store) = build_block(AttentionKind::EcaNoShare, 6, 16);
        let input = Tensor::full(Shape::new(1, 6, 3, 3).unwrap(), 0.7);
        // With a constant plane, max- and avg-pooled descriptors coincide, so
        // swapping the two kernels changes nothing.
        let mut swapped = ParamStore::<f64>::new();
        for e in store.entries() {
            let name = if e.name.contains("max_kernel") {
                e.name.replace("max_kernel", "avg_kernel")
            } else {
                e.name.replace("avg_kernel", "max_kernel")
            };
            swapped
                .register(name, e.dims.clone(), e.tensor.clone(), e.kind)
                .unwrap();
        }
        let a = forward_values(&attn, &store, input.clone());
        let b = forward_values(&attn, &swapped, input);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn branches_are_independently_trainable() {
        // Perturbing the max-branch kernel leaves the avg-branch descriptor
        // unchanged before the merge.
        let (_attn, mut store) = build_block(AttentionKind::EcaNoShare, 16, 17);
        let mut rng = test_rng(18);
        let input: Tensor<f64> = random_tensor(&mut rng, Shape::new(1, 16, 4, 4).unwrap(), 1.0);

        let avg_descriptor = |store: &ParamStore<f64>| {
            let mut graph = Graph::new();
            let bound = bind(store, &mut graph);
            let x = graph.constant(input.clone());
            let avg = graph.pool_spatial(x, PoolMode::Avg);
            let k = bound.var("attn.ca.avg_kernel").unwrap();
            let out = graph.conv1d_same(avg, k).unwrap();
            graph.value(out).clone()
        };
        let before = avg_descriptor(&store);
        let mut bumped = store.tensor("attn.ca.max_kernel").unwrap().clone();
        bumped.data_mut()[0] += 10.0;
        store.set_tensor("attn.ca.max_kernel", bumped).unwrap();
        let after = avg_descriptor(&store);
        assert_eq!(before, after);
    }

    #[test]
    fn lhab_param_count_formula() {
        // k1 + k2 + 2*(7*7), bias-free, independent of spatial size.
        for c in [16usize, 40, 160] {
            let (_, store) = build_block(AttentionKind::Lhab, c, 19);
            let k = psi_kernel_size(c).unwrap();
            assert_eq!(
                store.learnable_elements(),
                (k + k + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL) as u64,
                "C={c}"
            );
        }
    }

    #[test]
    fn spatial_block_single_channel_pools_are_identity() {
        let (attn, store) = build_block(AttentionKind::Lhab, 1, 20);
        let mut rng = test_rng(21);
        let input: Tensor<f64> = random_tensor(&mut rng, Shape::new(1, 1, 4, 4).unwrap(), 1.0);
        let mut graph = Graph::new();
        let _bound = bind(&store, &mut graph);
        let x = graph.constant(input.clone());
        let (mx, _) = crate::tensor::ops::pool_channel(&input, PoolMode::Max);
        let (av, _) = crate::tensor::ops::pool_channel(&input, PoolMode::Avg);
        assert_eq!(mx, input);
        assert_eq!(av, input);
        let _ = (x, attn);
    }
}
