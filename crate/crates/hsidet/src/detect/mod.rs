//! End-to-end detector: PANet-style neck with the added tiny-object level,
//! per-level 1×1 prediction heads, and the assembled model.

pub mod decode;
pub mod loss;

pub use decode::{box_iou, decode_level, detection_order, iou_cxcywh, nms, Detection};
pub use loss::{detection_loss, GtBox, HeadLayout, LossParts, LossWeights};

use rand_chacha::ChaCha8Rng;

use crate::analyzer::{Census, ComplexityReport};
use crate::anchors::STRIDES;
use crate::backbone::{Backbone, BackboneSpec, FeatureTaps, HsiChoice};
use crate::error::Result;
use crate::ghost::{Gbneck, GbneckSpec};
use crate::io::config::ModelConfig;
use crate::nn::{bind, Act, ConvUnit, Forward, ParamStore};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::ops::Conv2dSpec;
use crate::tensor::{Scalar, Shape, Tensor};

/// Two stacked stride-1 Gbnecks without attention; the neck's fusion unit.
#[derive(Debug)]
struct FusionBlock {
    blocks: [Gbneck; 2],
}

impl FusionBlock {
    fn new(name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        let b0 = Gbneck::new(
            format!("{name}.0"),
            GbneckSpec::new(
                in_c,
                2 * in_c.max(out_c),
                out_c,
                1,
                crate::attention::AttentionKind::None,
            ),
        )?;
        let b1 = Gbneck::new(
            format!("{name}.1"),
            GbneckSpec::new(
                out_c,
                2 * out_c,
                out_c,
                1,
                crate::attention::AttentionKind::None,
            ),
        )?;
        Ok(FusionBlock { blocks: [b0, b1] })
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.blocks[0].register(store, rng)?;
        self.blocks[1].register(store, rng)
    }

    fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.blocks[0].forward(cx, x)?;
        self.blocks[1].forward(cx, y)
    }

    fn census(&self, census: &mut Census, input: Shape) -> Result<Shape> {
        let y = self.blocks[0].census(census, input)?;
        self.blocks[1].census(census, y)
    }
}

/// Four-level (or three-level, with the tiny branch disabled) PANet:
/// a top-down pass fuses deep semantics into shallow maps, then a bottom-up
/// pass rebuilds the deep levels; output channels mirror the tap channels.
pub struct Neck {
    pub tiny: bool,
    tap_channels: [usize; 4],
    lat5: ConvUnit,
    lat4: ConvUnit,
    fuse_td4: FusionBlock,
    fuse_td3: FusionBlock,
    // Tiny-level extension.
    lat3: Option<ConvUnit>,
    fuse_td2: Option<FusionBlock>,
    down2: Option<ConvUnit>,
    fuse_bu3: Option<FusionBlock>,
    down3: ConvUnit,
    fuse_bu4: FusionBlock,
    down4: ConvUnit,
    fuse_bu5: FusionBlock,
}

impl Neck {
    pub fn new(name: &str, tap_channels: [usize; 4], tiny: bool) -> Result<Self> {
        let [c2, c3, c4, c5] = tap_channels;
        let lat = |suffix: &str, from: usize, to: usize| {
            ConvUnit::new(
                format!("{name}.{suffix}"),
                Conv2dSpec::pointwise(from, to),
                true,
                Act::HSwish,
            )
        };
        let down = |suffix: &str, c: usize| {
            ConvUnit::new(
                format!("{name}.{suffix}"),
                Conv2dSpec::same(c, c, 3, 2),
                true,
                Act::HSwish,
            )
        };
        Ok(Neck {
            tiny,
            tap_channels,
            lat5: lat("lat5", c5, c4),
            lat4: lat("lat4", c4, c3),
            fuse_td4: FusionBlock::new(&format!("{name}.td4"), 2 * c4, c4)?,
            fuse_td3: FusionBlock::new(&format!("{name}.td3"), 2 * c3, c3)?,
            lat3: tiny.then(|| lat("lat3", c3, c2)),
            fuse_td2: tiny
                .then(|| FusionBlock::new(&format!("{name}.td2"), 2 * c2, c2))
                .transpose()?,
            down2: tiny.then(|| down("down2", c2)),
            fuse_bu3: tiny
                .then(|| FusionBlock::new(&format!("{name}.bu3"), c2 + c3, c3))
                .transpose()?,
            down3: down("down3", c3),
            fuse_bu4: FusionBlock::new(&format!("{name}.bu4"), c3 + c4, c4)?,
            down4: down("down4", c4),
            fuse_bu5: FusionBlock::new(&format!("{name}.bu5"), 2 * c4, c5)?,
        })
    }

    /// Channels of the fused output maps, shallow to deep.
    pub fn out_channels(&self) -> Vec<usize> {
        let [c2, c3, c4, c5] = self.tap_channels;
        if self.tiny {
            vec![c2, c3, c4, c5]
        } else {
            vec![c3, c4, c5]
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.lat5.register(store, rng)?;
        self.lat4.register(store, rng)?;
        self.fuse_td4.register(store, rng)?;
        self.fuse_td3.register(store, rng)?;
        if let (Some(lat3), Some(td2), Some(down2), Some(bu3)) =
            (&self.lat3, &self.fuse_td2, &self.down2, &self.fuse_bu3)
        {
            lat3.register(store, rng)?;
            td2.register(store, rng)?;
            down2.register(store, rng)?;
            bu3.register(store, rng)?;
        }
        self.down3.register(store, rng)?;
        self.fuse_bu4.register(store, rng)?;
        self.down4.register(store, rng)?;
        self.fuse_bu5.register(store, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Forward<'_, T>,
        taps: &FeatureTaps,
    ) -> Result<Vec<Var>> {
        // Top-down.
        let r5 = self.lat5.forward(cx, taps.p5)?;
        let up5 = cx.graph.upsample_nearest_2x(r5);
        let cat4 = cx.graph.concat_channels(&[up5, taps.p4])?;
        let td4 = self.fuse_td4.forward(cx, cat4)?;

        let r4 = self.lat4.forward(cx, td4)?;
        let up4 = cx.graph.upsample_nearest_2x(r4);
        let cat3 = cx.graph.concat_channels(&[up4, taps.p3])?;
        let td3 = self.fuse_td3.forward(cx, cat3)?;

        let (n_shallow, bu3_in) = if self.tiny {
            let lat3 = self.lat3.as_ref().expect("tiny branch components");
            let r3 = lat3.forward(cx, td3)?;
            let up3 = cx.graph.upsample_nearest_2x(r3);
            let cat2 = cx.graph.concat_channels(&[up3, taps.p2])?;
            let n2 = self.fuse_td2.as_ref().unwrap().forward(cx, cat2)?;

            let d2 = self.down2.as_ref().unwrap().forward(cx, n2)?;
            let cat = cx.graph.concat_channels(&[d2, td3])?;
            let n3 = self.fuse_bu3.as_ref().unwrap().forward(cx, cat)?;
            (Some(n2), n3)
        } else {
            (None, td3)
        };

        // Bottom-up.
        let d3 = self.down3.forward(cx, bu3_in)?;
        let cat4b = cx.graph.concat_channels(&[d3, td4])?;
        let n4 = self.fuse_bu4.forward(cx, cat4b)?;

        let d4 = self.down4.forward(cx, n4)?;
        let cat5b = cx.graph.concat_channels(&[d4, r5])?;
        let n5 = self.fuse_bu5.forward(cx, cat5b)?;

        let mut out = Vec::with_capacity(4);
        if let Some(n2) = n_shallow {
            out.push(n2);
        }
        out.push(bu3_in);
        out.push(n4);
        out.push(n5);
        Ok(out)
    }

    pub fn census(&self, census: &mut Census, taps: [Shape; 4]) -> Result<Vec<Shape>> {
        let cat = |a: Shape, b: Shape| Shape::new(a.n, a.c + b.c, a.h, a.w);
        let up = |s: Shape| Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);

        let r5 = self.lat5.census(census, taps[3])?;
        let up5 = up(r5)?;
        census.movement("neck.up5", "upsample2x", up5);
        let td4 = self.fuse_td4.census(census, cat(up5, taps[2])?)?;

        let r4 = self.lat4.census(census, td4)?;
        let up4 = up(r4)?;
        census.movement("neck.up4", "upsample2x", up4);
        let td3 = self.fuse_td3.census(census, cat(up4, taps[1])?)?;

        let (n2, bu3_in) = if self.tiny {
            let r3 = self.lat3.as_ref().unwrap().census(census, td3)?;
            let up3 = up(r3)?;
            census.movement("neck.up3", "upsample2x", up3);
            let n2 = self
                .fuse_td2
                .as_ref()
                .unwrap()
                .census(census, cat(up3, taps[0])?)?;
            let d2 = self.down2.as_ref().unwrap().census(census, n2)?;
            let n3 = self
                .fuse_bu3
                .as_ref()
                .unwrap()
                .census(census, cat(d2, td3)?)?;
            (Some(n2), n3)
        } else {
            (None, td3)
        };

        let d3 = self.down3.census(census, bu3_in)?;
        let n4 = self.fuse_bu4.census(census, cat(d3, td4)?)?;
        let d4 = self.down4.census(census, n4)?;
        let n5 = self.fuse_bu5.census(census, cat(d4, r5)?)?;

        let mut out = Vec::new();
        if let Some(n2) = n2 {
            out.push(n2);
        }
        out.push(bu3_in);
        out.push(n4);
        out.push(n5);
        Ok(out)
    }
}

/// The assembled detector.
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub heads: Vec<ConvUnit>,
    /// Strides of the active levels, shallow to deep.
    pub strides: Vec<usize>,
    /// Anchor groups of the active levels.
    pub anchors: Vec<[(f64, f64); 3]>,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let backbone = Backbone::new(
            "backbone",
            BackboneSpec {
                width_multiplier: config.width_multiplier,
                attention: config.attention,
                hsi: config.hsi_former.enabled.then(|| HsiChoice {
                    layers: config.hsi_former.layers,
                    order: config.hsi_former.order,
                    mlp_ratio: config.hsi_former.mlp_ratio,
                }),
                ..Default::default()
            },
        )?;
        let taps = backbone.tap_channels();
        let neck = Neck::new("neck", taps, config.tiny_branch)?;

        let level_names: &[&str] = if config.tiny_branch {
            &["p2", "p3", "p4", "p5"]
        } else {
            &["p3", "p4", "p5"]
        };
        let per_anchor = 5 + config.num_classes;
        let heads: Vec<ConvUnit> = neck
            .out_channels()
            .iter()
            .zip(level_names)
            .map(|(&c, name)| {
                ConvUnit::new(
                    format!("head.{name}"),
                    Conv2dSpec::pointwise(c, 3 * per_anchor).with_bias(),
                    false,
                    Act::None,
                )
            })
            .collect();

        let level_offset = if config.tiny_branch { 0 } else { 1 };
        let strides = STRIDES[level_offset..].to_vec();
        let anchors = config.anchors.groups[level_offset..].to_vec();
        Ok(Model {
            config: config.clone(),
            backbone,
            neck,
            heads,
            strides,
            anchors,
        })
    }

    /// Head channel layout for loss computation.
    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            strides: self.strides.clone(),
            anchors: self.anchors.clone(),
            ncls: self.config.num_classes,
        }
    }

    /// Register and initialize all parameters with the given seed.
    /// Objectness biases start at -4 so the untrained model predicts few
    /// objects.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut rng = crate::nn::test_rng(seed);
        self.backbone.register(&mut store, &mut rng)?;
        self.neck.register(&mut store, &mut rng)?;
        for head in &self.heads {
            head.register(&mut store, &mut rng)?;
        }
        let per_anchor = 5 + self.config.num_classes;
        for head in &self.heads {
            let name = format!("{}.bias", head.name);
            let mut bias = store.tensor(&name)?.clone();
            for a in 0..3 {
                bias.data_mut()[a * per_anchor + 4] = T::from_f64(-4.0);
            }
            store.set_tensor(&name, bias)?;
        }
        Ok(store)
    }

    /// Backbone → neck → heads; returns raw per-level head outputs.
    pub fn forward_heads<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Vec<Var>> {
        let taps = self.backbone.forward(cx, x)?;
        let fused = self.neck.forward(cx, &taps)?;
        fused
            .iter()
            .zip(&self.heads)
            .map(|(&f, head)| head.forward(cx, f))
            .collect()
    }

    /// Full inference for a batch: forward, decode, per-image NMS.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<Vec<Vec<Detection>>> {
        let mut graph = Graph::new();
        let bound = bind(store, &mut graph);
        let x = graph.constant(images.clone());
        let mut cx = Forward::new(&mut graph, &bound, store, false);
        let heads = self.forward_heads(&mut cx, x)?;
        let batch = images.shape().n;
        let mut out = Vec::with_capacity(batch);
        for image in 0..batch {
            let mut dets = Vec::new();
            for (level, &head) in heads.iter().enumerate() {
                dets.extend(decode_level(
                    graph.value(head),
                    image,
                    &self.anchors[level],
                    self.strides[level],
                    self.config.num_classes,
                    self.config.conf_threshold,
                )?);
            }
            out.push(nms(
                &dets,
                self.config.iou_threshold,
                self.config.max_detections,
            ));
        }
        Ok(out)
    }

    /// Static complexity walk at the given square input size.
    pub fn complexity(&self, input_size: usize) -> Result<ComplexityReport> {
        let input = Shape::new(1, 3, input_size, input_size)?;
        let mut census = Census::new();
        let taps = self.backbone.census(&mut census, input)?;
        let fused = self.neck.census(&mut census, taps)?;
        for (shape, head) in fused.iter().zip(&self.heads) {
            head.census(&mut census, *shape)?;
        }
        Ok(ComplexityReport::from_census(census, input))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::ModelConfig;

    fn small_config() -> ModelConfig {
        ModelConfig {
            width_multiplier: 0.25,
            input_size: 160,
            ..Default::default()
        }
    }

    #[test]
    fn model_builds_and_heads_have_expected_channel_counts() {
        let model = Model::build(&small_config()).unwrap();
        assert_eq!(model.strides, vec![4, 8, 16, 32]);
        assert_eq!(model.heads.len(), 4);
        for head in &model.heads {
            assert_eq!(head.spec.out_channels, 18);
        }

        let mut cfg3 = small_config();
        cfg3.tiny_branch = false;
        let model3 = Model::build(&cfg3).unwrap();
        assert_eq!(model3.strides, vec![8, 16, 32]);
        assert_eq!(model3.heads.len(), 3);

        let mut multi = small_config();
        multi.num_classes = 3;
        let model_mc = Model::build(&multi).unwrap();
        assert_eq!(model_mc.heads[0].spec.out_channels, 24);
    }

    #[test]
    fn forward_shapes_and_deterministic_inference() {
        let config = small_config();
        let model = Model::build(&config).unwrap();
        let store = model.init_params::<f32>(7).unwrap();
        let mut rng = crate::nn::test_rng(99);
        let images = crate::nn::random_tensor(&mut rng, Shape::new(1, 3, 160, 160).unwrap(), 0.5);

        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let x = graph.constant(images.clone());
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let heads = model.forward_heads(&mut cx, x).unwrap();
        let sizes: Vec<Shape> = heads.iter().map(|&h| graph.shape(h)).collect();
        assert_eq!(sizes[0], Shape::new(1, 18, 40, 40).unwrap());
        assert_eq!(sizes[1], Shape::new(1, 18, 20, 20).unwrap());
        assert_eq!(sizes[2], Shape::new(1, 18, 10, 10).unwrap());
        assert_eq!(sizes[3], Shape::new(1, 18, 5, 5).unwrap());

        let a = model.infer(&store, &images).unwrap();
        let b = model.infer(&store, &images).unwrap();
        assert_eq!(a, b, "inference must be deterministic");
        assert!(a[0].len() <= config.max_detections);
    }

    #[test]
    fn census_matches_registry_and_graph_replay() {
        let config = small_config();
        let model = Model::build(&config).unwrap();
        let store = model.init_params::<f32>(11).unwrap();
        let report = model.complexity(160).unwrap();
        assert_eq!(report.total_params, store.learnable_elements());

        // FLOPs: static walk equals replaying the recorded forward graph.
        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let mut rng = crate::nn::test_rng(5);
        let x = graph.constant(crate::nn::random_tensor(
            &mut rng,
            Shape::new(1, 3, 160, 160).unwrap(),
            0.5,
        ));
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        model.forward_heads(&mut cx, x).unwrap();
        assert_eq!(report.total_flops, graph.count_flops());
    }

    #[test]
    fn flops_scale_with_spatial_area() {
        // Channel-attention descriptors cost a fixed amount per image, so
        // exact area scaling holds for the fully convolutional variant.
        let mut config = small_config();
        config.attention = crate::attention::AttentionKind::None;
        let model = Model::build(&config).unwrap();
        let at160 = model.complexity(160).unwrap();
        let at320 = model.complexity(320).unwrap();
        assert_eq!(at320.total_params, at160.total_params);
        assert_eq!(at320.total_flops, 4 * at160.total_flops);

        // With attention on, the area-independent part is exactly the
        // difference from perfect scaling and parameters are unchanged by
        // input size.
        let full = Model::build(&small_config()).unwrap();
        let a = full.complexity(160).unwrap();
        let b = full.complexity(320).unwrap();
        assert_eq!(a.total_params, b.total_params);
        assert!(b.total_flops < 4 * a.total_flops);
    }

    #[test]
    fn neck_without_tiny_branch_reuses_three_levels() {
        let mut config = small_config();
        config.tiny_branch = false;
        let model = Model::build(&config).unwrap();
        let store = model.init_params::<f32>(3).unwrap();
        let mut rng = crate::nn::test_rng(4);
        let images = crate::nn::random_tensor(&mut rng, Shape::new(1, 3, 96, 96).unwrap(), 0.5);
        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let x = graph.constant(images);
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let heads = model.forward_heads(&mut cx, x).unwrap();
        assert_eq!(heads.len(), 3);
        assert_eq!(graph.shape(heads[0]).h, 12);
        assert_eq!(graph.shape(heads[2]).h, 3);
    }
}
