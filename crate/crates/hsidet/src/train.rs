//! Desk-scale training: SGD with momentum and weight decay, linear warmup
//! into a cosine learning-rate schedule, batch-norm running-statistics
//! updates, and a toy-dataset overfit loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::detect::{detection_loss, GtBox, LossParts, LossWeights, Model};
use crate::error::Result;
use crate::io::image::letterbox;
use crate::io::toy::ToyDataset;
use crate::metrics::{evaluate, EvalReport};
use crate::nn::{apply_bn_updates, bind, Forward, ParamKind, ParamStore};
use crate::tensor::graph::Graph;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear learning-rate ramp over the first epochs.
    pub warmup_epochs: usize,
    /// Cosine decays to lr * this factor at the final epoch.
    pub lr_final_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            epochs: 100,
            batch_size: 4,
            warmup_epochs: 10,
            lr_final_factor: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate at a given epoch: linear warmup, then cosine decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = (self.epochs.saturating_sub(self.warmup_epochs)).max(1) as f64;
        let progress = (epoch - self.warmup_epochs) as f64 / span;
        let floor = self.lr * self.lr_final_factor;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// SGD with momentum; weight decay applies to convolution kernels only
/// (rank-4 entries), not to norm parameters or biases.
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(String, Tensor<T>)],
        lr: f64,
    ) -> Result<()> {
        let momentum = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for (name, grad) in grads {
            let entry = store.entry(name)?;
            let decay = if entry.dims.len() == 4 {
                T::from_f64(self.weight_decay)
            } else {
                T::zero()
            };
            let mut param = entry.tensor.clone();
            let velocity = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for ((v, g), p) in velocity
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(param.data_mut().iter_mut())
            {
                *v = momentum * *v + *g + decay * *p;
                *p = *p - lr * *v;
            }
            let name = name.clone();
            store.set_tensor(&name, param)?;
        }
        Ok(())
    }
}

/// One optimization step on a batch; returns the loss parts.
pub fn train_step<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    optimizer: &mut Sgd<T>,
    images: &Tensor<T>,
    targets: &[GtBox],
    weights: &LossWeights,
    lr: f64,
) -> Result<LossParts> {
    let mut graph = Graph::new();
    let bound = bind(store, &mut graph);
    let x = graph.constant(images.clone());
    let mut cx = Forward::new(&mut graph, &bound, store, true);
    let heads = model.forward_heads(&mut cx, x)?;
    let layout = model.head_layout();
    let (loss, parts) = detection_loss(&mut cx, &heads, targets, &layout, weights)?;
    let bn_updates = std::mem::take(&mut cx.bn_updates);
    let grads = graph.backward(loss)?;

    let mut named: Vec<(String, Tensor<T>)> = Vec::new();
    for entry in store.entries() {
        if entry.kind != ParamKind::Learnable {
            continue;
        }
        if let Some(g) = grads.get(bound.var(&entry.name)?) {
            named.push((entry.name.clone(), g.clone()));
        }
    }
    optimizer.step(store, &named, lr)?;
    apply_bn_updates(store, &graph, &bn_updates)?;
    Ok(parts)
}

/// Training loss on the full set, no parameter or statistics updates.
pub fn measure_loss(
    model: &Model,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    targets: &[GtBox],
    weights: &LossWeights,
) -> Result<f64> {
    let mut graph = Graph::new();
    let bound = bind(store, &mut graph);
    let x = graph.constant(images.clone());
    let mut cx = Forward::new(&mut graph, &bound, store, true);
    let heads = model.forward_heads(&mut cx, x)?;
    let layout = model.head_layout();
    let (_, parts) = detection_loss(&mut cx, &heads, targets, &layout, weights)?;
    Ok(parts.total)
}

/// Per-epoch full-set losses and the final evaluation.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_eval: EvalReport,
}

/// Overfit the model on a toy dataset; deterministic for a fixed seed.
/// `on_epoch` is called with (epoch, mean loss) after every epoch.
pub fn train_toy(
    model: &Model,
    store: &mut ParamStore<f32>,
    dataset: &ToyDataset,
    config: &TrainConfig,
    weights: &LossWeights,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let input_size = model.config.input_size;
    let tensors: Vec<Tensor<f32>> = dataset
        .images
        .iter()
        .map(|img| letterbox(img, input_size).map(|(t, _)| t))
        .collect::<Result<_>>()?;
    let boxes: Vec<Vec<GtBox>> = (0..dataset.images.len())
        .map(|i| dataset.gt_boxes(i))
        .collect();

    let mut optimizer = Sgd::new(config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    // Fixed full-set batch used to measure the loss after every epoch; the
    // per-epoch number is then a property of the parameters alone, not of
    // that epoch's batch composition.
    let all: Vec<&Tensor<f32>> = tensors.iter().collect();
    let full_batch = stack_batch(&all)?;
    let full_targets: Vec<GtBox> = boxes
        .iter()
        .enumerate()
        .flat_map(|(i, bs)| bs.iter().map(move |b| GtBox { image: i, ..*b }))
        .collect();

    for epoch in 0..config.epochs {
        let mut rng = crate::nn::test_rng(config.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let views: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &tensors[i]).collect();
            let batch = stack_batch(&views)?;
            let mut targets = Vec::new();
            for (slot, &i) in chunk.iter().enumerate() {
                for b in &boxes[i] {
                    targets.push(GtBox { image: slot, ..*b });
                }
            }
            train_step(model, store, &mut optimizer, &batch, &targets, weights, lr)?;
        }
        let measured = measure_loss(model, store, &full_batch, &full_targets, weights)?;
        epoch_losses.push(measured);
        on_epoch(epoch, measured);
    }

    let final_eval = evaluate_on_toy(model, store, dataset)?;
    Ok(TrainReport {
        epoch_losses,
        final_eval,
    })
}

/// Run inference over a toy dataset and score it against its own boxes.
pub fn evaluate_on_toy(
    model: &Model,
    store: &ParamStore<f32>,
    dataset: &ToyDataset,
) -> Result<EvalReport> {
    let mut dets_per_image = Vec::with_capacity(dataset.images.len());
    let mut gts_per_image = Vec::with_capacity(dataset.images.len());
    for (i, img) in dataset.images.iter().enumerate() {
        let (tensor, _) = letterbox(img, model.config.input_size)?;
        let dets = model.infer(store, &tensor)?;
        dets_per_image.push(dets.into_iter().next().unwrap_or_default());
        gts_per_image.push(dataset.gt_boxes(i));
    }
    Ok(evaluate(
        &dets_per_image,
        &gts_per_image,
        model.config.num_classes,
        0.5,
        model.config.conf_threshold,
    ))
}

/// Stack single-image tensors into one batch along n.
pub fn stack_batch<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images[0].shape();
    let shape = crate::tensor::Shape::new(images.len(), first.c, first.h, first.w)?;
    let mut data = Vec::with_capacity(shape.numel());
    for img in images {
        if img.shape() != first {
            return Err(crate::error::Error::shape(
                "stack_batch",
                format!("image shape {} != {}", img.shape(), first),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::ModelConfig;

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let config = TrainConfig {
            lr: 0.01,
            warmup_epochs: 5,
            epochs: 25,
            ..Default::default()
        };
        assert!((config.lr_at(0) - 0.002).abs() < 1e-12);
        assert!((config.lr_at(4) - 0.01).abs() < 1e-12);
        assert!(config.lr_at(5) <= 0.01 + 1e-12);
        for e in 5..24 {
            assert!(config.lr_at(e + 1) <= config.lr_at(e) + 1e-12);
        }
        assert!(config.lr_at(24) >= 0.01 * config.lr_final_factor - 1e-12);
    }

    #[test]
    fn sgd_moves_params_downhill_with_momentum() {
        let mut store = ParamStore::<f64>::new();
        let shape = crate::tensor::Shape::new(1, 1, 1, 2).unwrap();
        store
            .register(
                "w",
                vec![1, 1, 1, 2],
                Tensor::from_vec(shape, vec![1.0, -2.0]).unwrap(),
                ParamKind::Learnable,
            )
            .unwrap();
        let mut sgd = Sgd::new(0.9, 0.0);
        let grad = Tensor::from_vec(shape, vec![0.5, -0.5]).unwrap();
        sgd.step(&mut store, &[("w".into(), grad.clone())], 0.1).unwrap();
        let w = store.tensor("w").unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-12);
        assert!((w.data()[1] + 1.95).abs() < 1e-12);
        // Second step accumulates momentum: v = 0.9*0.5 + 0.5 = 0.95.
        sgd.step(&mut store, &[("w".into(), grad)], 0.1).unwrap();
        let w = store.tensor("w").unwrap();
        assert!((w.data()[0] - (0.95 - 0.095)).abs() < 1e-12);
    }

    #[test]
    fn one_training_step_reduces_loss_on_repeat() {
        let config = ModelConfig {
            width_multiplier: 0.25,
            input_size: 96,
            ..Default::default()
        };
        let model = Model::build(&config).unwrap();
        let mut store = model.init_params::<f32>(1).unwrap();
        let dataset = crate::io::toy::make_toy_dataset(2, 96, 3).unwrap();
        let tensors: Vec<Tensor<f32>> = dataset
            .images
            .iter()
            .map(|img| letterbox(img, 96).unwrap().0)
            .collect();
        let views: Vec<&Tensor<f32>> = tensors.iter().collect();
        let batch = stack_batch(&views).unwrap();
        let mut targets = Vec::new();
        for i in 0..2 {
            for b in dataset.gt_boxes(i) {
                targets.push(GtBox { image: i, ..b });
            }
        }
        let weights = LossWeights::for_strides(&model.strides);
        let mut sgd = Sgd::new(0.9, 0.0);

        let mut losses = Vec::new();
        for _ in 0..8 {
            let parts = train_step(
                &model,
                &mut store,
                &mut sgd,
                &batch,
                &targets,
                &weights,
                0.005,
            )
            .unwrap();
            losses.push(parts.total);
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "{losses:?}"
        );
    }
}
