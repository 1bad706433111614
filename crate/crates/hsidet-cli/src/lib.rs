//! Command-line front end: analysis, inference, anchor clustering,
//! evaluation, toy training, and self tests.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use hsidet::anchors::{kmeans_1iou, AnchorSet, BoxWH};
use hsidet::detect::{GtBox, LossWeights, Model};
use hsidet::io::annotations::{format_detection_row, read_annotations};
use hsidet::io::config::ModelConfig;
use hsidet::io::image::{encode_ppm, letterbox, load_rgb, RgbImage};
use hsidet::io::toy::make_toy_dataset;
use hsidet::io::weights::{read_weights_file, write_weights_file};
use hsidet::metrics::evaluate;
use hsidet::train::{train_toy, TrainConfig};

#[derive(Parser)]
#[command(
    name = "hsidet",
    version,
    about = "Lightweight ship detector: inference, complexity analysis, anchors, evaluation, toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print exact per-layer parameter and FLOP accounting.
    Analyze(AnalyzeArgs),
    /// Detect ships in images and write a detection CSV.
    Infer(InferArgs),
    /// Cluster annotation boxes into 12 anchors in 4 stride groups.
    ClusterAnchors(ClusterArgs),
    /// Evaluate a model against annotated images (P/R/mAP).
    Eval(EvalArgs),
    /// Overfit a small model on a generated toy dataset.
    TrainToy(TrainArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model configuration JSON; defaults to the shipped configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Width multiplier override.
    #[arg(long)]
    width: Option<f64>,
    /// gnConv order override.
    #[arg(long)]
    order: Option<usize>,
    /// HSI-Former layer count override.
    #[arg(long)]
    layers: Option<usize>,
    /// Square input size override (multiple of 32).
    #[arg(long)]
    size: Option<usize>,
    /// Confidence threshold override.
    #[arg(long)]
    conf: Option<f64>,
    /// NMS IoU threshold override.
    #[arg(long)]
    iou: Option<f64>,
    /// RNG seed for anything randomized.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn base_config(&self) -> Result<ModelConfig, CliError> {
        match &self.config {
            Some(path) => ModelConfig::load(path).map_err(CliError::data),
            None => Ok(ModelConfig::default()),
        }
    }

    fn apply_overrides(&self, config: &mut ModelConfig) {
        if let Some(w) = self.width {
            config.width_multiplier = w;
        }
        if let Some(n) = self.order {
            config.hsi_former.order = n;
        }
        if let Some(l) = self.layers {
            config.hsi_former.layers = l;
        }
        if let Some(s) = self.size {
            config.input_size = s;
        }
        if let Some(c) = self.conf {
            config.conf_threshold = c;
        }
        if let Some(i) = self.iou {
            config.iou_threshold = i;
        }
    }

    fn resolve(&self) -> Result<ModelConfig, CliError> {
        let mut config = self.base_config()?;
        self.apply_overrides(&mut config);
        config.validate().map_err(CliError::data)?;
        println!("resolved config:\n{}", config.to_json());
        Ok(config)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Optional JSON report destination.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Weight container (.hsiw) produced by train-toy.
    #[arg(long)]
    weights: PathBuf,
    /// Image file or directory of .png/.ppm images.
    #[arg(long)]
    input: PathBuf,
    /// Output directory (detections.csv plus annotated image copies).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// Annotation CSV or a dataset directory containing annotations.csv.
    #[arg(long)]
    input: PathBuf,
    /// Optional anchors text destination.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of clusters.
    #[arg(long, default_value_t = 12)]
    k: usize,
    /// Pixel scale for the normalized annotation boxes.
    #[arg(long, default_value_t = 640)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Dataset directory with images and annotations.csv.
    #[arg(long)]
    input: PathBuf,
    /// Optional JSON report destination.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory: dataset, weights, loss log, report.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Number of toy images to generate.
    #[arg(long, default_value_t = 16)]
    count: usize,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum CliError {
    Data(String),
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    fn exit_code(&self) -> i32 {
        2
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) => m,
        }
    }
}

/// Entry point used by `main`; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e)
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    report_thread_cap();
    let outcome = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Infer(args) => cmd_infer(args),
        Command::ClusterAnchors(args) => cmd_cluster(args),
        Command::Eval(args) => cmd_eval(args),
        Command::TrainToy(args) => cmd_train(args),
        Command::Selftest(args) => cmd_selftest(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// HSINET_THREADS caps intra-op parallelism. The engine executes serially
/// (the deterministic mode), so any cap is honored; the value is surfaced
/// for visibility.
fn report_thread_cap() {
    if let Ok(v) = std::env::var("HSINET_THREADS") {
        match v.parse::<usize>() {
            Ok(0) => println!("HSINET_THREADS=0: serial deterministic mode"),
            Ok(n) => println!("HSINET_THREADS={n}: engine runs serially (cap satisfied)"),
            Err(_) => eprintln!("warning: ignoring non-numeric HSINET_THREADS={v}"),
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let config = args.model.resolve()?;
    let model = Model::build(&config).map_err(CliError::data)?;
    let report = model
        .complexity(config.input_size)
        .map_err(CliError::data)?;
    print!("{report}");
    if let Some(path) = args.output {
        let json = serde_json::to_string_pretty(&report).map_err(CliError::data)?;
        std::fs::write(path, json).map_err(CliError::data)?;
    }
    Ok(())
}

fn collect_images(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::Data(format!(
            "input path {} does not exist",
            input.display()
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(CliError::data)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no .png or .ppm images under {}",
            input.display()
        )));
    }
    Ok(paths)
}

fn load_model_with_weights(
    config: &ModelConfig,
    weights: &Path,
) -> Result<(Model, hsidet::nn::ParamStore<f32>), CliError> {
    let model = Model::build(config).map_err(CliError::data)?;
    let mut store = model.init_params::<f32>(0).map_err(CliError::data)?;
    read_weights_file(&mut store, weights).map_err(CliError::data)?;
    Ok((model, store))
}

fn draw_box(image: &mut RgbImage, corners: (f64, f64, f64, f64)) {
    let (x1, y1, x2, y2) = corners;
    let clamp = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
    let (x1, y1) = (clamp(x1, image.width), clamp(y1, image.height));
    let (x2, y2) = (clamp(x2, image.width), clamp(y2, image.height));
    let mut paint = |x: usize, y: usize| {
        let i = (y * image.width + x) * 3;
        image.pixels[i] = 255;
        image.pixels[i + 1] = 32;
        image.pixels[i + 2] = 32;
    };
    for x in x1..=x2 {
        paint(x, y1);
        paint(x, y2);
    }
    for y in y1..=y2 {
        paint(x1, y);
        paint(x2, y);
    }
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let config = args.model.resolve()?;
    // Validate every input before creating any output.
    let paths = collect_images(&args.input)?;
    let (model, store) = load_model_with_weights(&config, &args.weights)?;

    std::fs::create_dir_all(&args.output).map_err(CliError::data)?;
    let mut csv = String::from("# path,class,score,x1,y1,x2,y2\n");
    for path in &paths {
        let image = load_rgb(path).map_err(CliError::data)?;
        let (tensor, transform) = letterbox(&image, config.input_size).map_err(CliError::data)?;
        let detections = model.infer(&store, &tensor).map_err(CliError::data)?;
        let mut annotated = image.clone();
        for d in &detections[0] {
            let mapped = transform.detection_to_source(d);
            csv.push_str(&format_detection_row(
                &path.display().to_string(),
                mapped.class_id,
                mapped.score,
                mapped.corners(),
            ));
            draw_box(&mut annotated, mapped.corners());
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        std::fs::write(
            args.output.join(format!("{name}_detections.ppm")),
            encode_ppm(&annotated),
        )
        .map_err(CliError::data)?;
        println!("{}: {} detections", path.display(), detections[0].len());
    }
    std::fs::write(args.output.join("detections.csv"), csv).map_err(CliError::data)?;
    Ok(())
}

fn annotation_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("annotations.csv")
    } else {
        input.to_path_buf()
    }
}

fn cmd_cluster(args: ClusterArgs) -> Result<(), CliError> {
    let records = read_annotations(&annotation_path(&args.input)).map_err(CliError::data)?;
    let boxes: Vec<BoxWH> = records
        .iter()
        .map(|r| BoxWH::new(r.w * args.size as f64, r.h * args.size as f64))
        .collect::<hsidet::Result<_>>()
        .map_err(CliError::data)?;
    let result = kmeans_1iou(&boxes, args.k, args.seed, 300, 1e-9).map_err(CliError::data)?;
    println!(
        "clustered {} boxes into {} anchors in {} iterations (mean 1-IoU {:.4})",
        boxes.len(),
        args.k,
        result.iterations,
        result.mean_distance
    );
    let text = if args.k == 12 {
        AnchorSet::from_centers(&result.centers)
            .map_err(CliError::data)?
            .to_text()
    } else {
        result
            .centers
            .iter()
            .map(|c| format!("{:.1},{:.1}", c.w, c.h))
            .collect::<Vec<_>>()
            .join(" ")
            + "\n"
    };
    print!("{text}");
    if let Some(path) = args.output {
        std::fs::write(path, text).map_err(CliError::data)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let config = args.model.resolve()?;
    let records = read_annotations(&annotation_path(&args.input)).map_err(CliError::data)?;
    let dir = if args.input.is_dir() {
        args.input.clone()
    } else {
        args.input
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    };
    let (model, store) = load_model_with_weights(&config, &args.weights)?;

    let mut image_names: Vec<String> = records.iter().map(|r| r.path.clone()).collect();
    image_names.sort();
    image_names.dedup();

    let mut dets_per_image = Vec::new();
    let mut gts_per_image = Vec::new();
    for (index, name) in image_names.iter().enumerate() {
        let image = load_rgb(&dir.join(name)).map_err(CliError::data)?;
        let (tensor, transform) = letterbox(&image, config.input_size).map_err(CliError::data)?;
        let dets = model.infer(&store, &tensor).map_err(CliError::data)?;
        dets_per_image.push(
            dets.into_iter()
                .next()
                .unwrap_or_default()
                .iter()
                .map(|d| transform.detection_to_source(d))
                .collect::<Vec<_>>(),
        );
        gts_per_image.push(
            records
                .iter()
                .filter(|r| &r.path == name)
                .map(|r| GtBox {
                    image: index,
                    class: r.class,
                    cx: r.cx * image.width as f64,
                    cy: r.cy * image.height as f64,
                    w: r.w * image.width as f64,
                    h: r.h * image.height as f64,
                })
                .collect::<Vec<_>>(),
        );
    }
    let report = evaluate(
        &dets_per_image,
        &gts_per_image,
        config.num_classes,
        0.5,
        config.conf_threshold,
    );
    print!("{report}");
    if let Some(path) = args.output {
        let json = serde_json::to_string_pretty(&report).map_err(CliError::data)?;
        std::fs::write(path, json).map_err(CliError::data)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = match &args.model.config {
        // Toy defaults: quarter width, 160 input; explicit flags still win.
        None => ModelConfig {
            width_multiplier: 0.25,
            input_size: 160,
            ..Default::default()
        },
        Some(path) => ModelConfig::load(path).map_err(CliError::data)?,
    };
    args.model.apply_overrides(&mut config);
    let seed = args.model.seed;

    let dataset = make_toy_dataset(args.count, config.input_size, seed).map_err(CliError::data)?;

    // Anchors from the data itself, as the detection pipeline prescribes.
    let boxes: Vec<BoxWH> = dataset
        .annotations
        .iter()
        .map(|a| {
            BoxWH::new(
                a.w * config.input_size as f64,
                a.h * config.input_size as f64,
            )
        })
        .collect::<hsidet::Result<_>>()
        .map_err(CliError::data)?;
    if boxes.len() >= 12 {
        let clusters = kmeans_1iou(&boxes, 12, seed, 300, 1e-9).map_err(CliError::data)?;
        config.anchors = AnchorSet::from_centers(&clusters.centers).map_err(CliError::data)?;
    }
    config.validate().map_err(CliError::data)?;
    println!("resolved config:\n{}", config.to_json());

    let model = Model::build(&config).map_err(CliError::data)?;
    let mut store = model.init_params::<f32>(seed).map_err(CliError::data)?;
    std::fs::create_dir_all(&args.output).map_err(CliError::data)?;
    dataset.write_to_dir(&args.output).map_err(CliError::data)?;

    let train_config = TrainConfig {
        epochs: args.epochs,
        seed,
        ..Default::default()
    };
    let weights = LossWeights::toy_overfit(&model.strides);
    let mut loss_log = String::from("epoch,loss,lr\n");
    let report = train_toy(
        &model,
        &mut store,
        &dataset,
        &train_config,
        &weights,
        |epoch, loss| {
            println!(
                "epoch {epoch:3}  loss {loss:.6}  lr {:.5}",
                train_config.lr_at(epoch)
            );
            loss_log.push_str(&format!("{epoch},{loss},{}\n", train_config.lr_at(epoch)));
        },
    )
    .map_err(CliError::data)?;

    std::fs::write(args.output.join("loss_log.csv"), loss_log).map_err(CliError::data)?;
    write_weights_file(&store, &args.output.join("weights.hsiw")).map_err(CliError::data)?;
    std::fs::write(args.output.join("config.json"), config.to_json()).map_err(CliError::data)?;
    let eval_json = serde_json::to_string_pretty(&report.final_eval).map_err(CliError::data)?;
    std::fs::write(args.output.join("eval.json"), eval_json).map_err(CliError::data)?;
    print!("{}", report.final_eval);
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> Result<(), CliError> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("selftest {name}: {}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    check(
        "psi-kernel-rule",
        [(2usize, 1usize), (16, 3), (40, 3), (112, 3), (160, 5), (960, 5)]
            .iter()
            .all(|&(c, k)| hsidet::attention::psi_kernel_size(c).unwrap() == k),
    );

    check("gnconv-schedule", {
        (1..=4).all(|n| {
            (8..=256).step_by(8).all(|c| {
                if c % (1usize << (n - 1)) != 0 {
                    return true;
                }
                let s = hsidet::gnconv::channel_schedule(c, n).unwrap();
                s[0] + s.iter().sum::<usize>() == 2 * c
            })
        })
    });

    check("ghost-ratio-formula", {
        let spec = hsidet::ghost::GhostModuleSpec::new(64, 24);
        let r = hsidet::analyzer::ghost_ratios(&spec);
        r.params.equals_pair(64 + 9, 64 * 2)
    });

    check("weights-round-trip", {
        let config = ModelConfig {
            width_multiplier: 0.25,
            input_size: 96,
            ..Default::default()
        };
        let model = Model::build(&config).unwrap();
        let store = model.init_params::<f32>(args.seed).unwrap();
        let bytes = hsidet::io::weights::save_weights(&store).to_bytes();
        let parsed = hsidet::io::weights::WeightContainer::from_bytes(&bytes).unwrap();
        parsed.to_bytes() == bytes
    });

    check("gradient-check-ghost-module", {
        use hsidet::nn::gradcheck::{check_gradients, GradCheckConfig};
        let module =
            hsidet::ghost::GhostModule::new("g", hsidet::ghost::GhostModuleSpec::new(4, 8))
                .unwrap();
        let mut store = hsidet::nn::ParamStore::<f64>::new();
        let mut rng = hsidet::nn::test_rng(args.seed);
        module.register(&mut store, &mut rng).unwrap();
        let input =
            hsidet::nn::random_tensor(&mut rng, hsidet::Shape::new(1, 4, 6, 6).unwrap(), 1.0);
        let report = check_gradients(
            &mut store,
            &GradCheckConfig {
                coords: 40,
                ..Default::default()
            },
            |cx| {
                let x = cx.graph.constant(input.clone());
                let y = module.forward(cx, x)?;
                Ok(cx.graph.mean(y))
            },
        )
        .unwrap();
        report.max_rel_err < 1e-6
    });

    check("nms-brute-force", {
        use hsidet::detect::{nms, Detection};
        use rand::Rng;
        let mut rng = hsidet::nn::test_rng(args.seed);
        (0..20).all(|_| {
            let dets: Vec<Detection> = (0..30)
                .map(|_| {
                    let score: f64 = rng.gen_range(0.01..1.0);
                    Detection {
                        cx: rng.gen_range(0.0..80.0),
                        cy: rng.gen_range(0.0..80.0),
                        w: rng.gen_range(4.0..30.0),
                        h: rng.gen_range(4.0..30.0),
                        objectness: score,
                        class_id: 0,
                        score,
                    }
                })
                .collect();
            let fast = nms(&dets, 0.45, 100);
            // Quadratic re-derivation.
            let mut alive = vec![true; dets.len()];
            let mut slow: Vec<Detection> = Vec::new();
            loop {
                let best = dets
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| alive[*i])
                    .min_by(|a, b| hsidet::detect::detection_order(a.1, b.1));
                let Some((bi, bd)) = best else { break };
                alive[bi] = false;
                slow.push(*bd);
                for (i, d) in dets.iter().enumerate() {
                    if alive[i] && hsidet::detect::box_iou(bd, d) >= 0.45 {
                        alive[i] = false;
                    }
                }
            }
            fast == slow
        })
    });

    check("metrics-hand-cases", {
        use hsidet::detect::Detection;
        let d = Detection {
            cx: 10.0,
            cy: 10.0,
            w: 4.0,
            h: 4.0,
            objectness: 0.9,
            class_id: 0,
            score: 0.9,
        };
        let g1 = GtBox {
            image: 0,
            class: 0,
            cx: 10.0,
            cy: 10.0,
            w: 4.0,
            h: 4.0,
        };
        let g2 = GtBox {
            image: 0,
            class: 0,
            cx: 50.0,
            cy: 50.0,
            w: 4.0,
            h: 4.0,
        };
        let perfect = evaluate(&[vec![d]], &[vec![g1]], 1, 0.5, 0.25);
        let half = evaluate(&[vec![d]], &[vec![g1, g2]], 1, 0.5, 0.25);
        perfect.map == 1.0 && half.map == 0.5
    });

    check("rle-decode", {
        let b = hsidet::io::annotations::rle_to_bbox("1 3", 4, 4)
            .unwrap()
            .unwrap();
        b.x_min == 0 && b.x_max == 0 && b.y_min == 0 && b.y_max == 2
    });

    if failures == 0 {
        println!("selftest: all suites passed");
        Ok(())
    } else {
        Err(CliError::Data(format!("{failures} selftest suites failed")))
    }
}
