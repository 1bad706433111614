//! Exact static accounting of parameters and FLOPs.
//!
//! Conventions (also printed in every report header):
//! - one multiply-accumulate counts as 2 FLOPs;
//! - convolution: 2 · kh·kw·(Cin/groups)·Cout · H'·W' · N, plus Cout·H'·W'·N
//!   when a bias is added;
//! - batch norm (inference form): 2 FLOPs per element;
//! - activations and elementwise arithmetic: 1 FLOP per output element;
//! - pooling reductions: 1 FLOP per input element;
//! - upsampling, concatenation, slicing: 0 (data movement).
//!
//! Parameter counts enumerate learnable tensors only (batch norm contributes
//! 2·C; running statistics are buffers, not parameters).

use serde::Serialize;

use crate::error::Result;
use crate::ghost::GhostModuleSpec;
use crate::tensor::ops::Conv2dSpec;
use crate::tensor::Shape;

pub const FLOP_CONVENTIONS: &str =
    "FLOPs counted as 2*MACs for convolutions; elementwise ops 1 FLOP/element; \
     batch norm 2 FLOPs/element; pooling 1 FLOP/input element; params are learnable elements only";

#[derive(Debug, Clone, Serialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
    pub output: Shape,
}

/// Accumulates per-layer entries during a static shape walk.
#[derive(Debug, Default)]
pub struct Census {
    entries: Vec<LayerEntry>,
}

impl Census {
    pub fn new() -> Self {
        Census::default()
    }

    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    /// Sum of parameters for entries whose name starts with `prefix`.
    pub fn params_under(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.params)
            .sum()
    }

    pub fn flops_under(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.flops)
            .sum()
    }

    pub fn conv2d(&mut self, name: &str, spec: &Conv2dSpec, input: Shape) -> Result<Shape> {
        spec.validate()?;
        let out = spec.output_shape(input)?;
        let mut params = spec.weight_count() as u64;
        let positions = (out.n * out.h * out.w) as u64;
        let mac_per_out =
            (spec.kernel.0 * spec.kernel.1 * (spec.in_channels / spec.groups)) as u64;
        let mut flops = 2 * mac_per_out * spec.out_channels as u64 * positions;
        if spec.has_bias {
            params += spec.out_channels as u64;
            flops += spec.out_channels as u64 * positions;
        }
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: format!(
                "conv {}x{}/{} g{} {}->{}",
                spec.kernel.0,
                spec.kernel.1,
                spec.stride.0,
                spec.groups,
                spec.in_channels,
                spec.out_channels
            ),
            params,
            flops,
            output: out,
        });
        Ok(out)
    }

    pub fn conv1d(&mut self, name: &str, k: usize, descriptor: Shape) {
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: format!("conv1d k{k}"),
            params: k as u64,
            flops: 2 * k as u64 * (descriptor.n * descriptor.c) as u64,
            output: descriptor,
        });
    }

    /// A second pass through an already-counted 1-D kernel: costs FLOPs,
    /// adds no parameters.
    pub fn conv1d_reuse(&mut self, name: &str, k: usize, descriptor: Shape) {
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: format!("conv1d k{k} (shared)"),
            params: 0,
            flops: 2 * k as u64 * (descriptor.n * descriptor.c) as u64,
            output: descriptor,
        });
    }

    pub fn batch_norm(&mut self, name: &str, shape: Shape) {
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: format!("batch_norm c{}", shape.c),
            params: 2 * shape.c as u64,
            flops: 2 * shape.numel() as u64,
            output: shape,
        });
    }

    pub fn activation(&mut self, name: &str, shape: Shape) {
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: "activation".to_string(),
            params: 0,
            flops: shape.numel() as u64,
            output: shape,
        });
    }

    /// Elementwise arithmetic producing `shape`: add, mul, gating, sigmoid.
    pub fn elementwise(&mut self, name: &str, kind: &str, shape: Shape) {
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: kind.to_string(),
            params: 0,
            flops: shape.numel() as u64,
            output: shape,
        });
    }

    /// Pooling reduction reading `input` and producing `output`.
    pub fn pool(&mut self, name: &str, kind: &str, input: Shape, output: Shape) {
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: kind.to_string(),
            params: 0,
            flops: input.numel() as u64,
            output,
        });
    }

    /// Zero-cost bookkeeping entry (upsample, concat, slice).
    pub fn movement(&mut self, name: &str, kind: &str, output: Shape) {
        self.entries.push(LayerEntry {
            name: name.to_string(),
            kind: kind.to_string(),
            params: 0,
            flops: 0,
            output,
        });
    }
}

/// Full complexity report for a model at a fixed input size.
#[derive(Debug, Serialize)]
pub struct ComplexityReport {
    pub conventions: String,
    pub input: Shape,
    pub entries: Vec<LayerEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ComplexityReport {
    pub fn from_census(census: Census, input: Shape) -> Self {
        let total_params = census.total_params();
        let total_flops = census.total_flops();
        ComplexityReport {
            conventions: FLOP_CONVENTIONS.to_string(),
            input,
            entries: census.entries,
            total_params,
            total_flops,
        }
    }

    pub fn giga_flops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn mega_params(&self) -> f64 {
        self.total_params as f64 / 1e6
    }
}

impl std::fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# complexity report (input {})", self.input)?;
        writeln!(f, "# {}", self.conventions)?;
        writeln!(f, "{:<52} {:<26} {:>12} {:>14} {:>16}", "layer", "kind", "params", "flops", "output")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<52} {:<26} {:>12} {:>14} {:>16}",
                e.name,
                e.kind,
                e.params,
                e.flops,
                e.output.to_string()
            )?;
        }
        writeln!(
            f,
            "total: {} params ({:.4}M), {} FLOPs ({:.4} GFLOPs)",
            self.total_params,
            self.mega_params(),
            self.total_flops,
            self.giga_flops()
        )
    }
}

/// Exact ratio of two integer operation counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactRatio {
    pub num: u128,
    pub den: u128,
}

impl ExactRatio {
    pub fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den);
        ExactRatio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact equality against another integer pair, by cross-multiplication.
    pub fn equals_pair(&self, num: u128, den: u128) -> bool {
        self.num * den == num * self.den
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// FLOP speed-up ratio and parameter compression ratio of a Ghost module
/// against the standard convolution producing the same output channels,
/// together with the large-C limit 1/(1+s). Raw convolutions only: batch
/// norm and activation are excluded on both sides.
#[derive(Debug, Clone)]
pub struct GhostRatios {
    pub flops: ExactRatio,
    pub params: ExactRatio,
    pub asymptotic: f64,
}

pub fn ghost_ratios(spec: &GhostModuleSpec) -> GhostRatios {
    let c = spec.in_channels as u128;
    let d = spec.out_channels as u128;
    let s = spec.ratio as u128;
    let k = spec.primary_kernel as u128;
    let dk = spec.cheap_kernel as u128;
    let m = spec.intrinsic() as u128;
    // Per output position the spatial factors H'·W' cancel, so the FLOP
    // ratio reduces to the parameter ratio of the raw convolutions.
    let ghost = k * k * c * m + dk * dk * m * s;
    let standard = k * k * c * d;
    let ratio = ExactRatio::new(ghost, standard);
    GhostRatios {
        flops: ratio,
        params: ratio,
        asymptotic: 1.0 / (1.0 + spec.ratio as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_counts() {
        let mut c = Census::new();
        let spec = Conv2dSpec::pointwise(16, 32);
        let out = c
            .conv2d("pw", &spec, Shape::new(1, 16, 20, 20).unwrap())
            .unwrap();
        assert_eq!(out, Shape::new(1, 32, 20, 20).unwrap());
        assert_eq!(c.total_params(), 512);
        assert_eq!(c.total_flops(), 2 * 16 * 32 * 400);
    }

    #[test]
    fn exact_ratio_reduces_and_compares() {
        let r = ExactRatio::new(73 * 5, 128 * 5);
        assert_eq!(r, ExactRatio::new(73, 128));
        assert!(r.equals_pair(146, 256));
        assert!(!r.equals_pair(73, 129));
        assert!((r.as_f64() - 0.5703125).abs() < 1e-15);
    }
}
