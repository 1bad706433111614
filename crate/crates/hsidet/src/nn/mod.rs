//! Parameter registry, seeded initialization, and the conv/bn/activation
//! building unit shared by every block.

pub mod gradcheck;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analyzer::Census;
use crate::error::{Error, Result};
use crate::tensor::graph::{BnMode, Graph, Var};
use crate::tensor::ops::Conv2dSpec;
use crate::tensor::{Scalar, Shape, Tensor};

/// Batch-norm epsilon used everywhere in the model.
pub const BN_EPS: f64 = 1e-5;

/// Running-statistics update coefficient in train mode.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by SGD, counted by the analyzer, gradient-checked.
    Learnable,
    /// State carried across steps (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    /// Logical dims for serialization, e.g. [C] for a per-channel vector.
    pub dims: Vec<usize>,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameter registry with deterministic (insertion) order.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        tensor: Tensor<T>,
        kind: ParamKind,
    ) -> Result<()> {
        let name = name.into();
        let logical: usize = dims.iter().product();
        if logical != tensor.shape().numel() {
            return Err(Error::Param(format!(
                "{name}: dims {:?} do not match tensor {}",
                dims,
                tensor.shape()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            dims,
            tensor,
            kind,
        });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Param(format!("unknown parameter name {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.tensor)
    }

    pub fn values(&self, name: &str) -> Result<Vec<T>> {
        Ok(self.entry(name)?.tensor.data().to_vec())
    }

    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter name {name}")))?;
        if self.entries[idx].tensor.shape() != tensor.shape() {
            return Err(Error::Param(format!(
                "{name}: shape {} cannot replace {}",
                tensor.shape(),
                self.entries[idx].tensor.shape()
            )));
        }
        self.entries[idx].tensor = tensor;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of learnable parameters; the brute-force side of
    /// the analyzer cross-check.
    pub fn learnable_elements(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.tensor.shape().numel() as u64)
            .sum()
    }

    /// Element count of learnables under a dotted name prefix.
    pub fn learnable_elements_under(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable && e.name.starts_with(prefix))
            .map(|e| e.tensor.shape().numel() as u64)
            .sum()
    }

    /// Zero every learnable whose name starts with `prefix`.
    pub fn zero_matching(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Learnable && e.name.starts_with(prefix) {
                e.tensor = Tensor::zeros(e.tensor.shape());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.register(e.name.clone(), e.dims.clone(), e.tensor.cast(), e.kind)
                .expect("names already unique");
        }
        out
    }
}

/// Graph handles for every learnable in a store, in registration order.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Param(format!("parameter {name} not bound")))
    }
}

/// Register every learnable parameter as a graph leaf.
pub fn bind<T: Scalar>(store: &ParamStore<T>, graph: &mut Graph<T>) -> BoundParams {
    let mut vars = HashMap::new();
    for e in store.entries() {
        if e.kind == ParamKind::Learnable {
            vars.insert(e.name.clone(), graph.leaf(e.tensor.clone()));
        }
    }
    BoundParams { vars }
}

/// Everything a block needs to run its forward pass.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub bound: &'a BoundParams,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    /// Train-mode batch-norm nodes, recorded as (bn name prefix, node) so
    /// the trainer can fold batch statistics into the running buffers.
    pub bn_updates: Vec<(String, Var)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        bound: &'a BoundParams,
        store: &'a ParamStore<T>,
        train: bool,
    ) -> Self {
        Forward {
            graph,
            bound,
            store,
            train,
            bn_updates: Vec::new(),
        }
    }
}

/// Activation applied after a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    HSwish,
}

impl Act {
    pub fn label(&self) -> &'static str {
        match self {
            Act::None => "none",
            Act::Relu => "relu",
            Act::HSwish => "hswish",
        }
    }
}

/// Convolution with optional batch norm and activation; the unit every
/// block is assembled from. Forward, initialization, and complexity
/// accounting all read the same [`Conv2dSpec`].
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub name: String,
    pub spec: Conv2dSpec,
    pub bn: bool,
    pub act: Act,
}

impl ConvUnit {
    pub fn new(name: impl Into<String>, spec: Conv2dSpec, bn: bool, act: Act) -> Self {
        ConvUnit {
            name: name.into(),
            spec,
            bn,
            act,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.spec.validate()?;
        let w = kaiming_conv::<T>(rng, &self.spec);
        let ws = self.spec.weight_shape();
        store.register(
            format!("{}.weight", self.name),
            vec![ws.n, ws.c, ws.h, ws.w],
            w,
            ParamKind::Learnable,
        )?;
        if self.spec.has_bias {
            let c = self.spec.out_channels;
            store.register(
                format!("{}.bias", self.name),
                vec![c],
                Tensor::zeros(Shape::new(1, c, 1, 1)?),
                ParamKind::Learnable,
            )?;
        }
        if self.bn {
            register_batch_norm(store, &format!("{}.bn", self.name), self.spec.out_channels)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = cx.bound.var(&format!("{}.weight", self.name))?;
        let b = if self.spec.has_bias {
            Some(cx.bound.var(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        let mut y = cx.graph.conv2d(x, w, b, &self.spec)?;
        if self.bn {
            y = batch_norm_forward(cx, &format!("{}.bn", self.name), y)?;
        }
        Ok(match self.act {
            Act::None => y,
            Act::Relu => cx.graph.relu(y),
            Act::HSwish => cx.graph.hswish(y),
        })
    }

    pub fn census(&self, census: &mut Census, input: Shape) -> Result<Shape> {
        let out = census.conv2d(&self.name, &self.spec, input)?;
        if self.bn {
            census.batch_norm(&format!("{}.bn", self.name), out);
        }
        if self.act != Act::None {
            census.activation(&format!("{}.{}", self.name, self.act.label()), out);
        }
        Ok(out)
    }
}

/// Register gamma/beta learnables and running-stat buffers for one BN layer.
pub fn register_batch_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    channels: usize,
) -> Result<()> {
    let vec_shape = Shape::new(1, channels, 1, 1)?;
    store.register(
        format!("{name}.gamma"),
        vec![channels],
        Tensor::full(vec_shape, T::one()),
        ParamKind::Learnable,
    )?;
    store.register(
        format!("{name}.beta"),
        vec![channels],
        Tensor::zeros(vec_shape),
        ParamKind::Learnable,
    )?;
    store.register(
        format!("{name}.running_mean"),
        vec![channels],
        Tensor::zeros(vec_shape),
        ParamKind::Buffer,
    )?;
    store.register(
        format!("{name}.running_var"),
        vec![channels],
        Tensor::full(vec_shape, T::one()),
        ParamKind::Buffer,
    )?;
    Ok(())
}

/// Run one BN layer through the graph, in train or eval statistics mode.
pub fn batch_norm_forward<T: Scalar>(
    cx: &mut Forward<'_, T>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let gamma = cx.bound.var(&format!("{name}.gamma"))?;
    let beta = cx.bound.var(&format!("{name}.beta"))?;
    let mode = if cx.train {
        BnMode::Train
    } else {
        BnMode::Eval {
            running_mean: cx.store.values(&format!("{name}.running_mean"))?,
            running_var: cx.store.values(&format!("{name}.running_var"))?,
        }
    };
    let y = cx.graph.batch_norm(x, gamma, beta, T::from_f64(BN_EPS), mode)?;
    if cx.train {
        cx.bn_updates.push((name.to_string(), y));
    }
    Ok(y)
}

/// Fold recorded batch statistics into the running buffers.
pub fn apply_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    graph: &Graph<T>,
    updates: &[(String, Var)],
) -> Result<()> {
    let momentum = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - momentum;
    for (name, var) in updates {
        let Some((mean, batch_var)) = graph.bn_batch_stats(*var) else {
            continue;
        };
        let (mean, batch_var) = (mean.to_vec(), batch_var.to_vec());
        for (suffix, batch) in [("running_mean", mean), ("running_var", batch_var)] {
            let full = format!("{name}.{suffix}");
            let mut t = store.tensor(&full)?.clone();
            for (r, b) in t.data_mut().iter_mut().zip(&batch) {
                *r = keep * *r + momentum * *b;
            }
            store.set_tensor(&full, t)?;
        }
    }
    Ok(())
}

/// Deterministic RNG used for initialization and tests.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-scale, scale).
pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor<T> {
    let data = (0..shape.numel())
        .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

/// He-uniform initialization for a convolution weight.
pub fn kaiming_conv<T: Scalar>(rng: &mut ChaCha8Rng, spec: &Conv2dSpec) -> Tensor<T> {
    let fan_in = (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1;
    let bound = (6.0 / fan_in as f64).sqrt();
    random_tensor(rng, spec.weight_shape(), bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_duplicates_and_unknowns() {
        let mut store = ParamStore::<f32>::new();
        let t = Tensor::zeros(Shape::new(1, 2, 1, 1).unwrap());
        store
            .register("a.weight", vec![2], t.clone(), ParamKind::Learnable)
            .unwrap();
        assert!(store
            .register("a.weight", vec![2], t, ParamKind::Learnable)
            .is_err());
        assert!(store.tensor("missing").is_err());
        assert_eq!(store.learnable_elements(), 2);
    }

    #[test]
    fn conv_unit_round_trips_through_graph_and_census() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = test_rng(1);
        let unit = ConvUnit::new(
            "stem",
            Conv2dSpec::same(3, 8, 3, 2),
            true,
            Act::HSwish,
        );
        unit.register(&mut store, &mut rng).unwrap();

        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let x = graph.constant(random_tensor(&mut rng, Shape::new(1, 3, 8, 8).unwrap(), 1.0));
        let mut cx = Forward::new(&mut graph, &bound, &store, false);
        let y = unit.forward(&mut cx, x).unwrap();
        assert_eq!(graph.shape(y), Shape::new(1, 8, 4, 4).unwrap());

        let mut census = Census::new();
        let out = unit
            .census(&mut census, Shape::new(1, 3, 8, 8).unwrap())
            .unwrap();
        assert_eq!(out, Shape::new(1, 8, 4, 4).unwrap());
        assert_eq!(census.total_params(), store.learnable_elements());
    }
}
