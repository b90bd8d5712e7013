//! `lwdet`: batch front end for the detection toolkit. Subcommands cover
//! annotation conversion, corpus expansion, split manifests, weight init,
//! inference, evaluation, parameter/FLOP counting and a forward benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lwdet_core::dataset::{
    self, expand_dataset, letterbox, parse_voc_xml, parse_yolo_txt, read_ppm, to_yolo_txt,
    write_ppm, yolo_to_voc, DataItem, ImageAnnotation,
};
use lwdet_core::detect::{decode, dump_detections, nms, parse_detections, Detection};
use lwdet_core::eval::{
    aggregate, bench_fps, match_detections, pr_curve_text, summary_table, GroundTruth, MatchResult,
    CLASS_NAMES,
};
use lwdet_core::model::{
    build_model, count_flops, count_params, forward, init_weights, load_weights, save_weights,
    Model, ModelSpec,
};
use lwdet_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "lwdet", about = "Wood-panel defect detection toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of VOC XML annotations to YOLO txt labels
    Convert {
        /// Directory containing *.xml annotation files
        #[arg(long)]
        voc_dir: PathBuf,
        /// Output directory for *.txt label files
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a corpus to a target size with flip and photometric jitter
    Augment {
        /// Directory of source *.ppm images
        #[arg(long)]
        images: PathBuf,
        /// Directory of matching *.txt labels
        #[arg(long)]
        labels: PathBuf,
        /// Output directory (images/ and labels/ are created inside)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total corpus size after expansion
        #[arg(long)]
        target_total: usize,
    },
    /// Write train.txt / test.txt stem manifests for a corpus directory
    Split {
        /// Corpus directory (stems come from images/*.ppm inside it, or *.ppm directly)
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Initialize a weight file with deterministic random weights
    Init {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Run the detector on one image and write the detection dump
    Infer {
        #[arg(long)]
        weights: PathBuf,
        /// Input image (binary PPM)
        #[arg(long)]
        image: PathBuf,
        /// Confidence threshold in [0,1]
        #[arg(long, default_value_t = 0.25)]
        conf: f32,
        /// NMS IoU threshold in [0,1]
        #[arg(long, default_value_t = 0.45)]
        iou: f32,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Evaluate detections against ground-truth labels (VOC-style mAP at one IoU)
    Eval {
        /// Weight file; mutually exclusive with --detections
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Directory of precomputed detection dumps, one *.txt per image stem
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Directory of *.ppm images
        #[arg(long)]
        images: PathBuf,
        /// Directory of ground-truth *.txt labels
        #[arg(long)]
        labels: PathBuf,
        /// Matching IoU threshold in [0,1]
        #[arg(long, default_value_t = 0.5)]
        iou: f32,
        /// Confidence threshold for model inference in [0,1]
        #[arg(long, default_value_t = 0.25)]
        conf: f32,
        /// Directory for per-class precision-recall curve files
        #[arg(long)]
        pr_out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Print parameter and FLOP counts for the default architecture
    Count {
        #[arg(long, default_value_t = 640)]
        input_size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Benchmark forward-pass latency and FPS
    Bench {
        #[arg(long)]
        weights: PathBuf,
        /// Timed iterations (5 warm-up runs are excluded)
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
}

enum CliError {
    Validation(String),
    Internal(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<lwdet_core::dataset::DatasetError> for CliError {
    fn from(e: lwdet_core::dataset::DatasetError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<lwdet_core::model::ModelError> for CliError {
    fn from(e: lwdet_core::model::ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<lwdet_core::detect::DetectError> for CliError {
    fn from(e: lwdet_core::detect::DetectError) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn check_unit(name: &str, v: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
        return Err(validation(format!("{name} must be in [0,1], got {v}")));
    }
    Ok(())
}

/// Sorted file stems with the given extension in a directory.
fn stems_with_ext(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)
        .map_err(|e| validation(format!("cannot read {}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_convert(voc_dir: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let stems = stems_with_ext(voc_dir, "xml")?;
    let mut class_counts = [0usize; 4];
    let mut converted = 0usize;
    let mut failures: Vec<String> = Vec::new();
    for stem in &stems {
        let path = voc_dir.join(format!("{stem}.xml"));
        let result = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| parse_voc_xml(&bytes).map_err(|e| e.to_string()))
            .and_then(|ann| to_yolo_txt(&ann).map(|txt| (ann, txt)).map_err(|e| e.to_string()));
        match result {
            Ok((ann, txt)) => {
                fs::write(out.join(format!("{stem}.txt")), txt)?;
                for o in &ann.objects {
                    if let Some(id) = dataset::class_id(&o.class_name) {
                        class_counts[id] += 1;
                    }
                }
                converted += 1;
            }
            Err(e) => failures.push(format!("{}: {e}", path.display())),
        }
    }
    println!("converted {converted} of {} annotation files", stems.len());
    for (name, count) in CLASS_NAMES.iter().zip(class_counts.iter()) {
        println!("  {name}: {count}");
    }
    println!("  total objects: {}", class_counts.iter().sum::<usize>());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(validation(failures.join("\n")))
    }
}

fn load_item(images: &Path, labels: &Path, stem: &str) -> Result<DataItem> {
    let img = read_ppm(&fs::read(images.join(format!("{stem}.ppm")))?)?;
    let label_path = labels.join(format!("{stem}.txt"));
    let yolo = if label_path.exists() {
        parse_yolo_txt(&fs::read_to_string(&label_path)?)?
    } else {
        Vec::new()
    };
    let objects = yolo
        .iter()
        .map(|l| yolo_to_voc(l, img.width, img.height))
        .collect();
    let ann = ImageAnnotation {
        id: stem.to_string(),
        width: img.width,
        height: img.height,
        objects,
    };
    Ok(DataItem { image: img, ann })
}

fn cmd_augment(
    images: &Path,
    labels: &Path,
    out: &Path,
    seed: u64,
    target_total: usize,
) -> Result<()> {
    let stems = stems_with_ext(images, "ppm")?;
    if stems.is_empty() {
        return Err(validation(format!("no .ppm images in {}", images.display())));
    }
    let corpus: Vec<DataItem> = stems
        .iter()
        .map(|s| load_item(images, labels, s))
        .collect::<Result<_>>()?;
    let expanded = expand_dataset(&corpus, target_total, seed)?;
    let img_out = out.join("images");
    let lbl_out = out.join("labels");
    fs::create_dir_all(&img_out)?;
    fs::create_dir_all(&lbl_out)?;
    for item in &expanded {
        fs::write(img_out.join(format!("{}.ppm", item.ann.id)), write_ppm(&item.image))?;
        fs::write(lbl_out.join(format!("{}.txt", item.ann.id)), to_yolo_txt(&item.ann)?)?;
    }
    println!("expanded {} -> {} items", corpus.len(), expanded.len());
    Ok(())
}

fn cmd_split(dir: &Path, ratio: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(validation(format!("ratio must be in [0,1], got {ratio}")));
    }
    let image_dir = dir.join("images");
    let stems = if image_dir.is_dir() {
        stems_with_ext(&image_dir, "ppm")?
    } else {
        stems_with_ext(dir, "ppm")?
    };
    if stems.is_empty() {
        return Err(validation(format!("no .ppm images under {}", dir.display())));
    }
    let (train, test) = dataset::split(&stems, ratio, seed);
    fs::write(dir.join("train.txt"), train.join("\n") + "\n")?;
    fs::write(dir.join("test.txt"), test.join("\n") + "\n")?;
    println!("split {} stems into {} train / {} test", stems.len(), train.len(), test.len());
    Ok(())
}

fn spec_for(classes: usize) -> ModelSpec {
    ModelSpec {
        class_count: classes,
        ..ModelSpec::default()
    }
}

fn cmd_init(seed: u64, out: &Path, classes: usize) -> Result<()> {
    let mut model = build_model(&spec_for(classes))?;
    init_weights(&mut model, seed);
    let mut file = fs::File::create(out)?;
    save_weights(&model, &mut file)?;
    println!(
        "wrote {} tensors ({} trainable params) to {}",
        model.weights.len(),
        count_params(&model),
        out.display()
    );
    Ok(())
}

fn load_model(weights: &Path, classes: usize) -> Result<Model> {
    let mut file = fs::File::open(weights)
        .map_err(|e| validation(format!("cannot open {}: {e}", weights.display())))?;
    Ok(load_weights(&spec_for(classes), &mut file)?)
}

/// Full single-image pipeline: letterbox, forward, per-level decode, NMS,
/// back-projection into source-image pixels.
fn detect_image(
    model: &Model,
    img: &dataset::Image,
    conf: f32,
    iou: f32,
) -> Result<Vec<Detection>> {
    let lb = letterbox(img, model.spec.input_size as u32);
    let (p3, p4, p5) = forward(model, &lb.tensor).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut dets = Vec::new();
    for (level, raw) in [p3, p4, p5].iter().enumerate() {
        dets.extend(decode(
            raw,
            &model.spec.anchors.levels[level],
            model.spec.strides[level],
            conf,
        )?);
    }
    let mut kept = nms(&dets, iou);
    for d in &mut kept {
        d.boxx = lb.unproject(&d.boxx);
    }
    Ok(kept)
}

fn cmd_infer(
    weights: &Path,
    image: &Path,
    conf: f32,
    iou: f32,
    out: Option<&Path>,
    classes: usize,
) -> Result<()> {
    check_unit("conf", conf)?;
    check_unit("iou", iou)?;
    let model = load_model(weights, classes)?;
    let img = read_ppm(&fs::read(image)?)?;
    let dets = detect_image(&model, &img, conf, iou)?;
    let dump = dump_detections(&dets);
    match out {
        Some(path) => fs::write(path, dump)?,
        None => print!("{dump}"),
    }
    Ok(())
}

fn ground_truths(labels: &Path, stem: &str, img: &dataset::Image) -> Result<Vec<GroundTruth>> {
    let path = labels.join(format!("{stem}.txt"));
    if !path.exists() {
        return Ok(Vec::new());
    }
    let yolo = parse_yolo_txt(&fs::read_to_string(&path)?)?;
    Ok(yolo
        .iter()
        .map(|l| {
            let v = yolo_to_voc(l, img.width, img.height);
            GroundTruth {
                class_id: l.class_id,
                boxx: lwdet_core::detect::Box {
                    x1: v.xmin,
                    y1: v.ymin,
                    x2: v.xmax,
                    y2: v.ymax,
                },
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    weights: Option<&Path>,
    detections: Option<&Path>,
    images: &Path,
    labels: &Path,
    iou: f32,
    conf: f32,
    pr_out: Option<&Path>,
    classes: usize,
) -> Result<()> {
    check_unit("iou", iou)?;
    check_unit("conf", conf)?;
    let model = match (weights, detections) {
        (Some(w), None) => Some(load_model(w, classes)?),
        (None, Some(_)) => None,
        _ => {
            return Err(validation(
                "exactly one of --weights and --detections is required",
            ))
        }
    };
    let stems = stems_with_ext(images, "ppm")?;
    if stems.is_empty() {
        return Err(validation(format!("no .ppm images in {}", images.display())));
    }
    let mut results: Vec<MatchResult> = Vec::new();
    for stem in &stems {
        let img = read_ppm(&fs::read(images.join(format!("{stem}.ppm")))?)?;
        let gts = ground_truths(labels, stem, &img)?;
        let dets = match (&model, detections) {
            (Some(m), _) => detect_image(m, &img, conf, 0.45)?,
            (None, Some(dir)) => {
                let path = dir.join(format!("{stem}.txt"));
                if path.exists() {
                    parse_detections(&fs::read_to_string(&path)?)
                        .ok_or_else(|| validation(format!("malformed dump {}", path.display())))?
                } else {
                    Vec::new()
                }
            }
            _ => unreachable!(),
        };
        results.push(match_detections(&dets, &gts, iou, classes));
    }
    let report = aggregate(&results, classes);
    let (params, flops) = match &model {
        Some(m) => (Some(count_params(m)), Some(count_flops(m, m.spec.input_size))),
        None => (None, None),
    };
    print!("{}", summary_table(&report, params, flops, None));
    if let Some(dir) = pr_out {
        fs::create_dir_all(dir)?;
        for class in &report.per_class {
            let fname = format!("{}.txt", class.name.replace(' ', "_"));
            fs::write(dir.join(fname), pr_curve_text(class))?;
        }
    }
    Ok(())
}

fn cmd_count(input_size: usize, classes: usize) -> Result<()> {
    let model = build_model(&spec_for(classes))?;
    let trainable = model.weights.trainable_params();
    let running = model.weights.running_stat_params();
    let flops = count_flops(&model, input_size);
    println!("params: {trainable} ({:.2}M)", trainable as f64 / 1e6);
    println!("bn running stats: {running}");
    println!(
        "flops @ {input_size}: {flops} ({:.2}G)",
        flops as f64 / 1e9
    );
    println!("reference design: 5.07M params, 9.4 GFLOPs");
    Ok(())
}

fn cmd_bench(weights: &Path, n: usize, classes: usize) -> Result<()> {
    let model = load_model(weights, classes)?;
    let s = model.spec.input_size;
    let input = Tensor::zeros(1, 3, s, s);
    let (ms, fps) =
        bench_fps(&model, &input, n).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("{ms:.2} ms/image, {fps:.1} FPS over {n} iterations");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { voc_dir, out } => cmd_convert(&voc_dir, &out),
        Command::Augment {
            images,
            labels,
            out,
            seed,
            target_total,
        } => cmd_augment(&images, &labels, &out, seed, target_total),
        Command::Split { dir, ratio, seed } => cmd_split(&dir, ratio, seed),
        Command::Init { seed, out, classes } => cmd_init(seed, &out, classes),
        Command::Infer {
            weights,
            image,
            conf,
            iou,
            out,
            classes,
        } => cmd_infer(&weights, &image, conf, iou, out.as_deref(), classes),
        Command::Eval {
            weights,
            detections,
            images,
            labels,
            iou,
            conf,
            pr_out,
            classes,
        } => cmd_eval(
            weights.as_deref(),
            detections.as_deref(),
            &images,
            &labels,
            iou,
            conf,
            pr_out.as_deref(),
            classes,
        ),
        Command::Count {
            input_size,
            classes,
        } => cmd_count(input_size, classes),
        Command::Bench {
            weights,
            n,
            classes,
        } => cmd_bench(&weights, n, classes),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
