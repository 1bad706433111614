// Hyperparameter sweep for the toy overfit: lr x obj_pos_weight.
use hsidet::anchors::{kmeans_1iou, AnchorSet, BoxWH};
use hsidet::detect::{LossWeights, Model};
use hsidet::io::config::ModelConfig;
use hsidet::io::toy::make_toy_dataset;
use hsidet::train::{train_toy, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let pw: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100.0);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let box_w: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);

    let seed = 0u64;
    let mut config = ModelConfig {
        width_multiplier: 0.25,
        input_size: 160,
        ..Default::default()
    };
    let dataset = make_toy_dataset(16, 160, seed).unwrap();
    let boxes: Vec<BoxWH> = dataset
        .annotations
        .iter()
        .map(|a| BoxWH::new(a.w * 160.0, a.h * 160.0).unwrap())
        .collect();
    let clusters = kmeans_1iou(&boxes, 12, seed, 300, 1e-9).unwrap();
    config.anchors = AnchorSet::from_centers(&clusters.centers).unwrap();

    let model = Model::build(&config).unwrap();
    let mut store = model.init_params::<f32>(seed).unwrap();
    let train_config = TrainConfig {
        epochs,
        lr,
        seed,
        batch_size: batch,
        ..Default::default()
    };
    let mut weights = LossWeights::toy_overfit(&model.strides);
    weights.obj_pos_weight = pw;
    weights.box_w = box_w;
    let report = train_toy(&model, &mut store, &dataset, &train_config, &weights, |e, l| {
        if e % 10 == 0 || e == epochs - 1 {
            println!("  epoch {e:3} loss {l:.5}");
        }
    })
    .unwrap();
    // Monotonicity violations after warmup.
    let mut violations = 0;
    for pair in report.epoch_losses[train_config.warmup_epochs..].windows(2) {
        if pair[1] > pair[0] + 1e-12 {
            violations += 1;
        }
    }
    println!(
        "lr={lr} pw={pw} box_w={box_w} batch={batch} epochs={epochs}: recall {:.4} mAP {:.4} precision {:.4} tp {} fp {} violations {}",
        report.final_eval.recall,
        report.final_eval.map,
        report.final_eval.precision,
        report.final_eval.counts.tp,
        report.final_eval.counts.fp,
        violations
    );
}
