use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fdrnet_core::eval::{format_pr_csv, iou_grid, CorpusEval};
use fdrnet_core::gradcam::{compute_gradcam, heatmap_csv, overlay, CamLayer, CamTarget};
use fdrnet_core::labels::read_annotations;
use fdrnet_core::postprocess::{parse_detections, Detection};
use fdrnet_core::train::ablation::{format_table, run_ablation};
use fdrnet_core::train::checkpoint::Checkpoint;
use fdrnet_core::train::corpus::{gen_corpus, list_images, load_corpus};
use fdrnet_core::train::imaging::load_rgb;
use fdrnet_core::train::infer::{infer, InferResult};
use fdrnet_core::train::synth::SynthSceneSpec;
use fdrnet_core::train::trainer::train;
use fdrnet_core::train::TrainConfig;

#[derive(Parser)]
#[command(name = "fdrnet", version, about = "Scene text detector: data, training, inference, evaluation and Grad-CAM")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic corpus (img_XXXX.png + img_XXXX.txt).
    GenData {
        /// Scene spec (flat keys); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a complete config with every key.
    Config {
        /// Full-size defaults instead of the desk-scale ones.
        #[arg(long)]
        full: bool,
    },
    /// Train on a corpus directory; writes the log and checkpoints to --out.
    Train {
        /// Flat keys over the desk defaults (see `config`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect text in one image, or every .png in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON file, or a directory when --image is one.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the checkpoint's short-edge target.
        #[arg(long)]
        short_edge: Option<usize>,
    },
    /// Score predictions (.json from infer, or .txt polygon lists) against
    /// ground truth with the same file stems.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also sweep IoU 0.5..0.95 and write the curve as CSV.
        #[arg(long)]
        pr_curve: Option<PathBuf>,
    },
    /// Heat map of what drives the probability map.
    Gradcam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "stage4")]
        layer: String,
        /// Overlay PNG.
        #[arg(long)]
        out: PathBuf,
        /// Raw heat values at layer resolution.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Restrict the target to x0,y0,x1,y1 in image pixels.
        #[arg(long, value_delimiter = ',')]
        r#box: Option<Vec<f64>>,
        #[arg(long)]
        short_edge: Option<usize>,
    },
    /// Train the four module configurations and compare them.
    Ablate {
        /// Flat keys over the desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation corpus; the training corpus when omitted.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(anyhow::Error::from)
            .and_then(|t| Ok(TrainConfig::desk().merged(&t)?))
            .with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::desk()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { spec, out, count, seed } => {
            let spec = match spec {
                Some(p) => SynthSceneSpec::load(&p).with_context(|| format!("reading spec {}", p.display()))?,
                None => SynthSceneSpec::default(),
            };
            let written = gen_corpus(&spec, count, seed, &out)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Cmd::Config { full } => {
            let c = if full { TrainConfig::default() } else { TrainConfig::desk() };
            print!("{}", c.to_flat_string());
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let samples = load_corpus(&data)?;
            println!("{} images, {} steps, batch {}", samples.len(), cfg.max_iter, cfg.batch_size);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_flat_string())?;
            let t = Instant::now();
            let run = train(cfg, &samples, Some(&out), |r| {
                println!(
                    "iter {:>6}  lr {:.3e}  loss {:.4}  (p {:.4} b {:.4} t {:.4})  {:.0}s",
                    r.iter,
                    r.lr,
                    r.loss.total,
                    r.loss.prob,
                    r.loss.binary,
                    r.loss.thresh,
                    t.elapsed().as_secs_f64()
                )
            })?;
            if let Some(p) = run.final_checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Cmd::Infer {
            ckpt,
            image,
            out,
            short_edge,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let (det, store) = ck.restore()?;
            let mut ic = ck.config.infer;
            if let Some(s) = short_edge {
                ic.short_edge = s;
            }
            let run_one = |img: &Path, dst: &Path| -> Result<usize> {
                let pixels = load_rgb(img).with_context(|| format!("reading image {}", img.display()))?;
                let res = infer(&det, &store, &pixels, &ic)?;
                std::fs::write(dst, serde_json::to_string_pretty(&res)?)?;
                Ok(res.detections.len())
            };
            if image.is_dir() {
                std::fs::create_dir_all(&out)?;
                for img in list_images(&image)? {
                    let stem = img.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    let n = run_one(&img, &out.join(format!("{stem}.json")))?;
                    println!("{stem}: {n} detections");
                }
            } else {
                if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                let n = run_one(&image, &out)?;
                println!("{n} detections -> {}", out.display());
            }
        }
        Cmd::Eval {
            pred_dir,
            gt_dir,
            iou,
            pr_curve,
        } => eval(&pred_dir, &gt_dir, iou, pr_curve.as_deref())?,
        Cmd::Gradcam {
            ckpt,
            image,
            layer,
            out,
            raw,
            r#box,
            short_edge,
        } => {
            let layer: CamLayer = layer.parse()?;
            let ck = load_checkpoint(&ckpt)?;
            let (det, store) = ck.restore()?;
            let short = short_edge.unwrap_or(ck.config.infer.short_edge);
            let pixels = load_rgb(&image).with_context(|| format!("reading image {}", image.display()))?;
            let (_, h, w) = pixels.shape();
            let s = short as f64 / h.min(w) as f64;
            if r#box.as_ref().is_some_and(|b| b.len() != 4) {
                bail!("--box takes x0,y0,x1,y1");
            }
            let region = r#box.map(|b| {
                // image pixels to probability-map pixels
                [(b[0] * s).floor() as usize, (b[1] * s).floor() as usize, (b[2] * s).ceil() as usize, (b[3] * s).ceil() as usize]
            });
            let cam = compute_gradcam(&det, &store, &pixels, short, layer, &CamTarget { region, scale: 1.0 })?;
            overlay(&pixels, &cam.heat)?
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("heat map -> {}", out.display());
            if let Some(p) = raw {
                std::fs::write(&p, heatmap_csv(&cam.raw))?;
                println!("raw values ({}x{}) -> {}", cam.raw.height(), cam.raw.width(), p.display());
            }
        }
        Cmd::Ablate {
            config,
            data,
            eval_data,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let train_set = load_corpus(&data)?;
            let eval_set = match &eval_data {
                Some(d) => load_corpus(d)?,
                None => train_set.clone(),
            };
            let grid = iou_grid(0.5, 0.95, 0.05);
            let every = cfg.log_every;
            let rows = run_ablation(&cfg, &train_set, &eval_set, &grid, Some(&out), |name, r| {
                if r.iter % (every * 10) == 0 {
                    println!("{name:<10} iter {:>6}  loss {:.4}", r.iter, r.loss.total);
                }
            })?;
            print!("{}", format_table(&rows));
            println!("table, JSON and PR curves in {}", out.display());
        }
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let r: InferResult = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(r.detections)
    } else {
        Ok(parse_detections(&text, path)?)
    }
}

fn eval(pred_dir: &Path, gt_dir: &Path, iou: f64, pr_curve: Option<&Path>) -> Result<()> {
    if !(iou > 0.0 && iou <= 1.0) {
        bail!("--iou {iou} outside (0, 1]");
    }
    let mut gts: Vec<PathBuf> = std::fs::read_dir(gt_dir)
        .with_context(|| format!("reading {}", gt_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    gts.sort();
    if gts.is_empty() {
        bail!("no .txt ground truth in {}", gt_dir.display());
    }
    let mut grid = vec![iou];
    if pr_curve.is_some() {
        grid.extend(iou_grid(0.5, 0.95, 0.05).into_iter().filter(|t| (t - iou).abs() > 1e-9));
    }
    let mut acc = CorpusEval::new(grid);
    println!("{:<16} {:>4} {:>4} {:>4} {:>4}", "image", "tp", "fp", "fn", "ign");
    for gt_path in &gts {
        let stem = gt_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let json = pred_dir.join(format!("{stem}.json"));
        let txt = pred_dir.join(format!("{stem}.txt"));
        let dets = if json.exists() {
            read_predictions(&json)?
        } else if txt.exists() {
            read_predictions(&txt)?
        } else {
            Vec::new()
        };
        let polys: Vec<_> = dets.into_iter().map(|d| d.polygon).collect();
        let gt = read_annotations(gt_path)?;
        let c = acc.add_image(&polys, &gt)[0];
        println!("{stem:<16} {:>4} {:>4} {:>4} {:>4}", c.tp, c.fp, c.fn_, c.ignored);
    }
    let curve = acc.curve();
    let head = curve[0];
    println!(
        "IoU {:.2}: precision {:.4} recall {:.4} F {:.4}",
        head.iou, head.precision, head.recall, head.f_score
    );
    println!("{}", serde_json::to_string(&head)?);
    if let Some(p) = pr_curve {
        let mut sweep: Vec<_> = curve[1..].to_vec();
        if (0.5..=0.95).contains(&iou) {
            sweep.push(head);
        }
        sweep.sort_by(|a, b| a.iou.total_cmp(&b.iou));
        for pt in &sweep {
            println!("{}", serde_json::to_string(pt)?);
        }
        std::fs::write(p, format_pr_csv(&sweep))?;
        println!("PR curve -> {}", p.display());
    }
    Ok(())
}
