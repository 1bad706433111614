//! Ghost modules and the LHAB-Gbneck residual block.
//!
//! A Ghost module produces `m` intrinsic feature maps with a standard
//! convolution and `m·s` ghost maps with cheap depthwise convolutions, then
//! concatenates both sets. The Gbneck wraps two Ghost modules (expand,
//! reduce) around an optional stride-2 depthwise stage and an optional
//! attention block, with a residual shortcut.

use rand_chacha::ChaCha8Rng;

use crate::analyzer::Census;
use crate::attention::{AttentionKind, HybridAttention};
use crate::error::{Error, Result};
use crate::nn::{Act, ConvUnit, Forward, ParamStore};
use crate::tensor::graph::Var;
use crate::tensor::ops::Conv2dSpec;
use crate::tensor::{Scalar, Shape};

/// Hyperparameters of one Ghost module.
#[derive(Debug, Clone, Copy)]
pub struct GhostModuleSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Ghost maps generated per intrinsic map.
    pub ratio: usize,
    /// Kernel size of the primary (standard) convolution.
    pub primary_kernel: usize,
    /// Kernel size of the cheap depthwise operation.
    pub cheap_kernel: usize,
    pub act: Act,
}

impl GhostModuleSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        GhostModuleSpec {
            in_channels,
            out_channels,
            ratio: 1,
            primary_kernel: 1,
            cheap_kernel: 3,
            act: Act::Relu,
        }
    }

    pub fn with_ratio(mut self, s: usize) -> Self {
        self.ratio = s;
        self
    }

    pub fn with_act(mut self, act: Act) -> Self {
        self.act = act;
        self
    }

    /// Intrinsic map count m = ceil(D / (1 + s)).
    pub fn intrinsic(&self) -> usize {
        self.out_channels.div_ceil(1 + self.ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.ratio == 0 {
            return Err(Error::InvalidSpec(
                "ghost module channels and ratio must be >= 1".into(),
            ));
        }
        if self.ratio == 1 && self.out_channels % 2 == 1 {
            return Err(Error::InvalidSpec(format!(
                "ghost module with s=1 needs even out_channels, got {}",
                self.out_channels
            )));
        }
        if self.cheap_kernel % 2 == 0 || self.primary_kernel % 2 == 0 {
            return Err(Error::InvalidSpec(
                "ghost module kernels must be odd".into(),
            ));
        }
        debug_assert!(self.intrinsic() * (1 + self.ratio) >= self.out_channels);
        Ok(())
    }
}

/// Ghost module: primary conv to `m` maps, cheap depthwise to `m·s` more,
/// concatenated (and truncated to D when (1+s) does not divide D).
#[derive(Debug, Clone)]
pub struct GhostModule {
    pub name: String,
    pub spec: GhostModuleSpec,
    primary: ConvUnit,
    cheap: ConvUnit,
}

impl GhostModule {
    pub fn new(name: impl Into<String>, spec: GhostModuleSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let m = spec.intrinsic();
        let primary = ConvUnit::new(
            format!("{name}.primary"),
            Conv2dSpec::same(spec.in_channels, m, spec.primary_kernel, 1),
            true,
            spec.act,
        );
        // One depthwise d×d filter per intrinsic map per ghost slot:
        // groups = m, each producing s ghost maps.
        let cheap = ConvUnit::new(
            format!("{name}.cheap"),
            Conv2dSpec {
                in_channels: m,
                out_channels: m * spec.ratio,
                kernel: (spec.cheap_kernel, spec.cheap_kernel),
                stride: (1, 1),
                padding: ((spec.cheap_kernel - 1) / 2, (spec.cheap_kernel - 1) / 2),
                groups: m,
                has_bias: false,
            },
            true,
            spec.act,
        );
        Ok(GhostModule {
            name,
            spec,
            primary,
            cheap,
        })
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.primary.register(store, rng)?;
        self.cheap.register(store, rng)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        if cx.graph.shape(x).c != self.spec.in_channels {
            return Err(Error::shape(
                "ghost_module",
                format!(
                    "input has {} channels, spec expects {}",
                    cx.graph.shape(x).c,
                    self.spec.in_channels
                ),
            ));
        }
        let y1 = self.primary.forward(cx, x)?;
        let y2 = self.cheap.forward(cx, y1)?;
        let cat = cx.graph.concat_channels(&[y1, y2])?;
        let d = self.spec.out_channels;
        if cx.graph.shape(cat).c == d {
            Ok(cat)
        } else {
            cx.graph.slice_channels(cat, 0, d)
        }
    }

    pub fn census(&self, census: &mut Census, input: Shape) -> Result<Shape> {
        let y1 = self.primary.census(census, input)?;
        let y2 = self.cheap.census(census, y1)?;
        let full = Shape::new(y1.n, y1.c + y2.c, y1.h, y1.w)?;
        let out = Shape::new(y1.n, self.spec.out_channels, y1.h, y1.w)?;
        census.movement(&format!("{}.concat", self.name), "concat", full);
        if full.c != out.c {
            census.movement(&format!("{}.slice", self.name), "slice", out);
        }
        Ok(out)
    }
}

/// Hyperparameters of one LHAB-Gbneck row.
#[derive(Debug, Clone, Copy)]
pub struct GbneckSpec {
    pub in_channels: usize,
    pub exp_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub attention: AttentionKind,
    pub dw_kernel: usize,
}

impl GbneckSpec {
    pub fn new(
        in_channels: usize,
        exp_channels: usize,
        out_channels: usize,
        stride: usize,
        attention: AttentionKind,
    ) -> Self {
        GbneckSpec {
            in_channels,
            exp_channels,
            out_channels,
            stride,
            attention,
            dw_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidSpec(format!(
                "gbneck stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.exp_channels < self.in_channels.max(self.out_channels) {
            return Err(Error::InvalidSpec(format!(
                "gbneck expansion {} below max(in {}, out {})",
                self.exp_channels, self.in_channels, self.out_channels
            )));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::InvalidSpec("gbneck dw kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Residual bottleneck built from two Ghost modules.
///
/// Main path: expand → (stride-2 depthwise) → (attention) → reduce, no
/// activation after the second Ghost module. Shortcut: identity when the
/// block keeps shape, otherwise depthwise 3×3 (block stride) + pointwise
/// 1×1, each with batch norm.
#[derive(Debug, Clone)]
pub struct Gbneck {
    pub name: String,
    pub spec: GbneckSpec,
    ghost1: GhostModule,
    dw: Option<ConvUnit>,
    attention: Option<HybridAttention>,
    ghost2: GhostModule,
    shortcut: Option<(ConvUnit, ConvUnit)>,
}

impl Gbneck {
    pub fn new(name: impl Into<String>, spec: GbneckSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let ghost1 = GhostModule::new(
            format!("{name}.ghost1"),
            GhostModuleSpec::new(spec.in_channels, spec.exp_channels),
        )?;
        let dw = (spec.stride == 2).then(|| {
            ConvUnit::new(
                format!("{name}.dw"),
                Conv2dSpec::depthwise(spec.exp_channels, spec.dw_kernel, 2),
                true,
                Act::None,
            )
        });
        let attention = match spec.attention {
            AttentionKind::None => None,
            kind => Some(HybridAttention::new(
                format!("{name}.attn"),
                kind,
                spec.exp_channels,
            )?),
        };
        let ghost2 = GhostModule::new(
            format!("{name}.ghost2"),
            GhostModuleSpec::new(spec.exp_channels, spec.out_channels).with_act(Act::None),
        )?;
        let shortcut = (spec.stride != 1 || spec.in_channels != spec.out_channels).then(|| {
            (
                ConvUnit::new(
                    format!("{name}.short.dw"),
                    Conv2dSpec::depthwise(spec.in_channels, spec.dw_kernel, spec.stride),
                    true,
                    Act::None,
                ),
                ConvUnit::new(
                    format!("{name}.short.pw"),
                    Conv2dSpec::pointwise(spec.in_channels, spec.out_channels),
                    true,
                    Act::None,
                ),
            )
        });
        Ok(Gbneck {
            name,
            spec,
            ghost1,
            dw,
            attention,
            ghost2,
            shortcut,
        })
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.ghost1.register(store, rng)?;
        if let Some(dw) = &self.dw {
            dw.register(store, rng)?;
        }
        if let Some(attn) = &self.attention {
            attn.register(store, rng)?;
        }
        self.ghost2.register(store, rng)?;
        if let Some((dw, pw)) = &self.shortcut {
            dw.register(store, rng)?;
            pw.register(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut main = self.ghost1.forward(cx, x)?;
        if let Some(dw) = &self.dw {
            main = dw.forward(cx, main)?;
        }
        if let Some(attn) = &self.attention {
            main = attn.forward(cx, main)?;
        }
        main = self.ghost2.forward(cx, main)?;
        let short = match &self.shortcut {
            None => x,
            Some((dw, pw)) => {
                let s = dw.forward(cx, x)?;
                pw.forward(cx, s)?
            }
        };
        cx.graph.add(main, short)
    }

    pub fn census(&self, census: &mut Census, input: Shape) -> Result<Shape> {
        let mut main = self.ghost1.census(census, input)?;
        if let Some(dw) = &self.dw {
            main = dw.census(census, main)?;
        }
        if let Some(attn) = &self.attention {
            main = attn.census(census, main)?;
        }
        main = self.ghost2.census(census, main)?;
        if let Some((dw, pw)) = &self.shortcut {
            let s = dw.census(census, input)?;
            let s = pw.census(census, s)?;
            debug_assert_eq!(s, main);
        }
        census.elementwise(&format!("{}.residual_add", self.name), "add", main);
        Ok(main)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::ghost_ratios;
    use crate::nn::{bind, random_tensor, test_rng};
    use crate::tensor::graph::Graph;
    use crate::tensor::Tensor;

    fn run_block<F>(store: &ParamStore<f64>, input: Tensor<f64>, f: F) -> Tensor<f64>
    where
        F: FnOnce(&mut Forward<'_, f64>, Var) -> Result<Var>,
    {
        let mut graph = Graph::new();
        let bound = bind(store, &mut graph);
        let x = graph.constant(input);
        let mut cx = Forward::new(&mut graph, &bound, store, false);
        let y = f(&mut cx, x).unwrap();
        graph.value(y).clone()
    }

    #[test]
    fn ghost_output_channels_and_y1_prefix() {
        // C=16, D=32, s=1: first 16 output channels are the primary maps.
        let spec = GhostModuleSpec::new(16, 32);
        let module = GhostModule::new("g", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(4);
        module.register(&mut store, &mut rng).unwrap();

        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let input = random_tensor(&mut rng, Shape::new(1, 16, 32, 32).unwrap(), 1.0);
        let x = graph.constant(input);
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let y = module.forward(&mut cx, x).unwrap();
        assert_eq!(graph.shape(y), Shape::new(1, 32, 32, 32).unwrap());

        let y1 = module.primary.forward(
            &mut Forward::new(&mut graph, &bound, &store, false),
            x,
        )
        .unwrap();
        let full = graph.value(y).clone();
        let first16 = crate::tensor::ops::slice_channels(&full, 0, 16).unwrap();
        assert_eq!(&first16, graph.value(y1));
    }

    #[test]
    fn ghost_param_count_matches_enumeration() {
        // k=1, d=3, C=16, D=32: primary 1*1*16*16 = 256, cheap 3*3*16 = 144.
        let spec = GhostModuleSpec::new(16, 32);
        let module = GhostModule::new("g", spec).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = test_rng(5);
        module.register(&mut store, &mut rng).unwrap();
        let conv_params: u64 = store
            .entries()
            .iter()
            .filter(|e| e.name.ends_with(".weight"))
            .map(|e| e.tensor.shape().numel() as u64)
            .sum();
        assert_eq!(conv_params, 256 + 144);

        let ratios = ghost_ratios(&spec);
        assert!(ratios.params.equals_pair(400, 512));
    }

    #[test]
    fn ghost_output_channel_count_always_d() {
        for (c, d, s) in [(3, 9, 2), (16, 32, 1), (8, 10, 4), (5, 7, 2)] {
            let spec = GhostModuleSpec::new(c, d).with_ratio(s);
            if spec.validate().is_err() {
                continue;
            }
            let module = GhostModule::new("g", spec).unwrap();
            let mut store = ParamStore::<f64>::new();
            let mut rng = test_rng(6);
            module.register(&mut store, &mut rng).unwrap();
            let input = random_tensor(&mut rng, Shape::new(1, c, 6, 6).unwrap(), 1.0);
            let out = run_block(&store, input, |cx, x| module.forward(cx, x));
            assert_eq!(out.shape().c, d, "C={c} D={d} s={s}");
        }
    }

    #[test]
    fn odd_d_with_s1_rejected_and_zero_input_zero_output() {
        assert!(GhostModuleSpec::new(8, 9).validate().is_err());

        let spec = GhostModuleSpec::new(4, 8).with_act(Act::None);
        let module = GhostModule::new("g", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(7);
        module.register(&mut store, &mut rng).unwrap();
        let zero = Tensor::zeros(Shape::new(1, 4, 5, 5).unwrap());
        let out = run_block(&store, zero, |cx, x| module.forward(cx, x));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gbneck_zero_main_path_is_identity() {
        let spec = GbneckSpec::new(16, 32, 16, 1, AttentionKind::None);
        let block = Gbneck::new("blk", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(8);
        block.register(&mut store, &mut rng).unwrap();
        store.zero_matching("blk.ghost1");
        store.zero_matching("blk.ghost2");

        let mut rng2 = test_rng(9);
        let input = random_tensor(&mut rng2, Shape::new(2, 16, 8, 8).unwrap(), 1.0);
        let out = run_block(&store, input.clone(), |cx, x| block.forward(cx, x));
        assert_eq!(out, input);
    }

    #[test]
    fn gbneck_stride2_shapes_match_stage2_row() {
        // 1x24x160x160 with Out=40, stride 2 -> 1x40x80x80.
        let spec = GbneckSpec::new(24, 72, 40, 2, AttentionKind::Lhab);
        let block = Gbneck::new("blk", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(10);
        block.register(&mut store, &mut rng).unwrap();
        let input = random_tensor(&mut rng, Shape::new(1, 24, 160, 160).unwrap(), 0.5);
        let out = run_block(&store, input, |cx, x| block.forward(cx, x));
        assert_eq!(out.shape(), Shape::new(1, 40, 80, 80).unwrap());

        let mut census = Census::new();
        let cs = block
            .census(&mut census, Shape::new(1, 24, 160, 160).unwrap())
            .unwrap();
        assert_eq!(cs, Shape::new(1, 40, 80, 80).unwrap());
        assert_eq!(census.total_params(), store.learnable_elements());

        assert!(GbneckSpec::new(24, 72, 40, 3, AttentionKind::None)
            .validate()
            .is_err());
    }

    #[test]
    fn gbneck_stride1_preserves_spatial_size() {
        let spec = GbneckSpec::new(12, 24, 12, 1, AttentionKind::None);
        let block = Gbneck::new("blk", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(11);
        block.register(&mut store, &mut rng).unwrap();
        let input = random_tensor(&mut rng, Shape::new(1, 12, 17, 23).unwrap(), 0.5);
        let out = run_block(&store, input, |cx, x| block.forward(cx, x));
        assert_eq!(out.shape(), Shape::new(1, 12, 17, 23).unwrap());
    }

    #[test]
    fn ghost_beats_standard_conv_params_when_c_over_9() {
        // s=1, d=3, k=1: ghost parameter count < standard conv whenever C > 9.
        for c in [10usize, 16, 64, 200] {
            let d = 2 * c;
            let spec = GhostModuleSpec::new(c, d);
            let r = ghost_ratios(&spec);
            assert!(r.params.as_f64() < 1.0, "C={c}");
        }
        let spec = GhostModuleSpec::new(9, 18);
        assert!((ghost_ratios(&spec).params.as_f64() - 1.0).abs() < 1e-12);
        let spec = GhostModuleSpec::new(8, 16);
        assert!(ghost_ratios(&spec).params.as_f64() > 1.0);
    }
}
