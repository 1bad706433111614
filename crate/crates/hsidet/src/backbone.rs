//! LHAB-GhostNet backbone: stem conv, 16 Gbneck rows in five stages, four
//! multi-scale feature taps, and the HSI-Former block at the tail.
//!
//! Taps come off the end of stages 1–3 (strides 4, 8, 16) and the end of
//! stage 5 after the HSI-Former (stride 32). A width multiplier scales every
//! channel count (rounded to the nearest multiple of 4, minimum 4) so the
//! same topology runs at desk scale.

use rand_chacha::ChaCha8Rng;

use crate::analyzer::Census;
use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::ghost::{Gbneck, GbneckSpec};
use crate::gnconv::{HsiFormer, HsiFormerSpec};
use crate::nn::{Act, ConvUnit, Forward, ParamStore};
use crate::tensor::graph::Var;
use crate::tensor::ops::Conv2dSpec;
use crate::tensor::{Scalar, Shape};

/// One Gbneck row of the backbone table.
#[derive(Debug, Clone, Copy)]
pub struct StageRow {
    pub exp: usize,
    pub out: usize,
    pub lhab: bool,
    pub stride: usize,
}

/// The sixteen Gbneck rows of LHAB-GhostNet at width 1.0. The stride-2 row
/// closing each of stages 1–4 halves the spatial size; stage 5 keeps 20².
pub fn lhab_ghostnet_rows() -> Vec<StageRow> {
    let r = |exp, out, lhab, stride| StageRow {
        exp,
        out,
        lhab,
        stride,
    };
    vec![
        // stage 1 (input 320²x16)
        r(16, 16, false, 1),
        r(48, 24, false, 2),
        // stage 2 (160²x24)
        r(72, 24, false, 1),
        r(72, 40, true, 2),
        // stage 3 (80²x40)
        r(120, 40, true, 1),
        r(240, 80, false, 2),
        // stage 4 (40²x80)
        r(184, 80, false, 1),
        r(184, 80, false, 1),
        r(184, 80, false, 1),
        r(480, 112, true, 1),
        r(672, 112, true, 1),
        r(672, 160, true, 2),
        // stage 5 (20²x160)
        r(960, 160, false, 1),
        r(960, 160, true, 1),
        r(960, 160, false, 1),
        r(960, 160, true, 1),
    ]
}

/// Scale a channel count by the width multiplier, rounding to the nearest
/// multiple of 4 and never below 4.
pub fn round_channels(channels: usize, multiplier: f64) -> usize {
    let scaled = channels as f64 * multiplier;
    (((scaled / 4.0).round() as usize) * 4).max(4)
}

/// HSI-Former placement at the backbone tail.
#[derive(Debug, Clone, Copy)]
pub struct HsiChoice {
    pub layers: usize,
    pub order: usize,
    pub mlp_ratio: f64,
}

impl HsiChoice {
    pub fn new(layers: usize, order: usize) -> Self {
        HsiChoice {
            layers,
            order,
            mlp_ratio: 4.0,
        }
    }
}

/// Backbone hyperparameters.
#[derive(Debug, Clone)]
pub struct BackboneSpec {
    pub rows: Vec<StageRow>,
    pub width_multiplier: f64,
    pub stem_channels: usize,
    /// Attention variant used on rows whose LHAB flag is set.
    pub attention: AttentionKind,
    /// HSI-Former at the tail; `None` is the ablation switch.
    pub hsi: Option<HsiChoice>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            rows: lhab_ghostnet_rows(),
            width_multiplier: 1.0,
            stem_channels: 16,
            attention: AttentionKind::Lhab,
            hsi: Some(HsiChoice::new(1, 3)),
        }
    }
}

impl BackboneSpec {
    pub fn with_width(mut self, multiplier: f64) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_multiplier <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "width multiplier must be > 0, got {}",
                self.width_multiplier
            )));
        }
        if self.rows.is_empty() {
            return Err(Error::InvalidSpec("backbone needs at least one row".into()));
        }
        Ok(())
    }
}

/// Indices of the rows whose outputs feed the detector, in tap order
/// (strides 4, 8, 16; the stride-32 tap is the final row + HSI-Former).
const TAP_ROWS: [usize; 3] = [1, 3, 5];

/// The four backbone outputs, one per pyramid stride.
pub struct FeatureTaps {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
}

impl FeatureTaps {
    pub fn as_array(&self) -> [Var; 4] {
        [self.p2, self.p3, self.p4, self.p5]
    }
}

pub struct Backbone {
    pub spec: BackboneSpec,
    stem: ConvUnit,
    blocks: Vec<Gbneck>,
    hsi: Option<HsiFormer>,
}

impl Backbone {
    pub fn new(name: &str, spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let m = spec.width_multiplier;
        let stem_out = round_channels(spec.stem_channels, m);
        let stem = ConvUnit::new(
            format!("{name}.stem"),
            Conv2dSpec::same(3, stem_out, 3, 2),
            true,
            Act::HSwish,
        );
        let mut in_c = stem_out;
        let mut blocks = Vec::with_capacity(spec.rows.len());
        for (i, row) in spec.rows.iter().enumerate() {
            let attention = if row.lhab {
                spec.attention
            } else {
                AttentionKind::None
            };
            let block = Gbneck::new(
                format!("{name}.b{i:02}"),
                GbneckSpec::new(
                    in_c,
                    round_channels(row.exp, m),
                    round_channels(row.out, m),
                    row.stride,
                    attention,
                ),
            )?;
            in_c = round_channels(row.out, m);
            blocks.push(block);
        }
        let hsi = match spec.hsi {
            None => None,
            Some(choice) => Some(HsiFormer::new(
                format!("{name}.hsi"),
                HsiFormerSpec {
                    channels: in_c,
                    layers: choice.layers,
                    order: choice.order,
                    mlp_ratio: choice.mlp_ratio,
                },
            )?),
        };
        Ok(Backbone {
            spec,
            stem,
            blocks,
            hsi,
        })
    }

    /// Output channel counts of the four taps.
    pub fn tap_channels(&self) -> [usize; 4] {
        let c = |i: usize| self.blocks[i].spec.out_channels;
        [
            c(TAP_ROWS[0]),
            c(TAP_ROWS[1]),
            c(TAP_ROWS[2]),
            c(self.blocks.len() - 1),
        ]
    }

    pub fn register<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.stem.register(store, rng)?;
        for block in &self.blocks {
            block.register(store, rng)?;
        }
        if let Some(hsi) = &self.hsi {
            hsi.register(store, rng)?;
        }
        Ok(())
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != 3 {
            return Err(Error::shape(
                "backbone",
                format!("expected 3 input channels, got {}", shape.c),
            ));
        }
        if shape.h % 32 != 0 || shape.w % 32 != 0 {
            return Err(Error::shape(
                "backbone",
                format!("input size {}x{} not divisible by 32", shape.h, shape.w),
            ));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<FeatureTaps> {
        self.check_input(cx.graph.shape(x))?;
        let mut y = self.stem.forward(cx, x)?;
        let mut taps = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(cx, y)?;
            if TAP_ROWS.contains(&i) {
                taps.push(y);
            }
        }
        if let Some(hsi) = &self.hsi {
            y = hsi.forward(cx, y)?;
        }
        Ok(FeatureTaps {
            p2: taps[0],
            p3: taps[1],
            p4: taps[2],
            p5: y,
        })
    }

    /// Static census of the whole backbone; returns the four tap shapes.
    pub fn census(&self, census: &mut Census, input: Shape) -> Result<[Shape; 4]> {
        self.check_input(input)?;
        let mut shape = self.stem.census(census, input)?;
        let mut taps = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            shape = block.census(census, shape)?;
            if TAP_ROWS.contains(&i) {
                taps.push(shape);
            }
        }
        if let Some(hsi) = &self.hsi {
            shape = hsi.census(census, shape)?;
        }
        Ok([taps[0], taps[1], taps[2], shape])
    }

    /// Output shape of the stem and of every row, in order: the per-layer
    /// shape walk the backbone table pins down.
    pub fn shape_walk(&self, input: Shape) -> Result<Vec<Shape>> {
        self.check_input(input)?;
        let mut scratch = Census::new();
        let mut shapes = Vec::with_capacity(1 + self.blocks.len());
        let mut shape = self.stem.census(&mut scratch, input)?;
        shapes.push(shape);
        for block in &self.blocks {
            shape = block.census(&mut scratch, shape)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind, random_tensor, test_rng};
    use crate::tensor::graph::Graph;

    #[test]
    fn table_rows_have_expected_flags_and_strides() {
        let rows = lhab_ghostnet_rows();
        assert_eq!(rows.len(), 16);
        let lhab_count = rows.iter().filter(|r| r.lhab).count();
        assert_eq!(lhab_count, 7);
        let stride2: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.stride == 2)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(stride2, vec![1, 3, 5, 11]);
        // Final Gbneck of stage 4 expands to 672 and outputs 160.
        assert_eq!(rows[11].exp, 672);
        assert_eq!(rows[11].out, 160);
    }

    #[test]
    fn channel_rounding() {
        assert_eq!(round_channels(16, 1.0), 16);
        assert_eq!(round_channels(16, 0.25), 4);
        assert_eq!(round_channels(24, 0.25), 8);
        assert_eq!(round_channels(40, 0.25), 12);
        assert_eq!(round_channels(160, 0.125), 20);
        assert_eq!(round_channels(16, 0.01), 4);
    }

    #[test]
    fn quarter_width_walk_still_halves_per_stage() {
        let spec = BackboneSpec::default().with_width(0.25);
        let backbone = Backbone::new("bb", spec).unwrap();
        let walk = backbone
            .shape_walk(Shape::new(1, 3, 160, 160).unwrap())
            .unwrap();
        assert_eq!(walk[0].h, 80);
        assert_eq!(walk[1].h, 80);
        assert_eq!(walk[2].h, 40);
        assert_eq!(walk[4].h, 20);
        assert_eq!(walk[6].h, 10);
        assert_eq!(walk[12].h, 5);
        assert_eq!(walk[16].h, 5);
        for s in &walk {
            assert_eq!(s.c % 4, 0);
        }
    }

    #[test]
    fn small_input_forward_taps_and_ablation() {
        let spec = BackboneSpec {
            width_multiplier: 0.25,
            ..Default::default()
        };
        let backbone = Backbone::new("bb", spec).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = test_rng(40);
        backbone.register(&mut store, &mut rng).unwrap();

        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let x = graph.constant(random_tensor(&mut rng, Shape::new(1, 3, 96, 96).unwrap(), 0.5));
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let taps = backbone.forward(&mut cx, x).unwrap();
        let chans = backbone.tap_channels();
        assert_eq!(graph.shape(taps.p2), Shape::new(1, chans[0], 24, 24).unwrap());
        assert_eq!(graph.shape(taps.p3), Shape::new(1, chans[1], 12, 12).unwrap());
        assert_eq!(graph.shape(taps.p4), Shape::new(1, chans[2], 6, 6).unwrap());
        assert_eq!(graph.shape(taps.p5), Shape::new(1, chans[3], 3, 3).unwrap());

        // Indivisible input rejected.
        let bad = graph.constant(random_tensor(&mut rng, Shape::new(1, 3, 96, 80).unwrap(), 0.5));
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        assert!(backbone.forward(&mut cx, bad).is_err());
    }

    #[test]
    fn removing_hsi_former_changes_values_only_at_p5() {
        let mk = |hsi: Option<HsiChoice>| {
            let spec = BackboneSpec {
                width_multiplier: 0.25,
                hsi,
                ..Default::default()
            };
            Backbone::new("bb", spec).unwrap()
        };
        let with = mk(Some(HsiChoice::new(1, 3)));
        let without = mk(None);
        let input = Shape::new(1, 3, 64, 64).unwrap();
        let mut census_a = Census::new();
        let mut census_b = Census::new();
        let taps_a = with.census(&mut census_a, input).unwrap();
        let taps_b = without.census(&mut census_b, input).unwrap();
        assert_eq!(taps_a, taps_b);
        assert!(census_a.total_params() > census_b.total_params());
    }

    #[test]
    fn invalid_multiplier_rejected() {
        let spec = BackboneSpec::default().with_width(0.0);
        assert!(Backbone::new("bb", spec).is_err());
        let spec = BackboneSpec::default().with_width(-1.0);
        assert!(Backbone::new("bb", spec).is_err());
    }
}
