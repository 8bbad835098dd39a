//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on runtime failure, 2 on usage errors.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::graph::{build_affinity, build_laplacian, extract_features, knn_search, GraphConfig};
use crate::gradcheck::{run_suite, SuiteOptions};
use crate::io::{self, Checkpoint, CropMode, DatasetSpec, MapFormats};
use crate::loss::LossConfig;
use crate::model::{fuse_guidance, FusionLayer, SsgConfig, SsgNet};
use crate::optim::AdamState;
use crate::spectral::{reference_softseg, smallest_eigs};
use crate::train::{predict, train, write_trace_csv, Dataset, LaplacianCache, TrainConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SSG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "ssgnet", about = "Scene-structure guidance maps from single images", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GraphArgs {
    /// Neighbours per pixel.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Weight of the spatial coordinates in the pixel feature.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
}

impl GraphArgs {
    fn config(&self) -> GraphConfig {
        GraphConfig { k: self.k, eta: self.eta }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Affinity,
    Laplacian,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropArg {
    Resize,
    Center,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the pixel graph of an image and report its size.
    Graph {
        image: PathBuf,
        #[command(flatten)]
        graph: GraphArgs,
        /// Write the matrix in MatrixMarket coordinate format.
        #[arg(long)]
        mtx: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MatrixKind::Laplacian)]
        kind: MatrixKind,
    },
    /// Reference soft segmentation from the exact smallest eigenvectors.
    Eigs {
        image: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long = "n-eigen", default_value_t = 3)]
        n_eigen: usize,
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Train a network on a directory of PNG/PPM images.
    Train {
        /// Directory of training images.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the trace, checkpoints and final weights.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 40.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long = "n-eigen", default_value_t = 3)]
        n_eigen: usize,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long = "crop-mode", value_enum, default_value_t = CropArg::Resize)]
        crop_mode: CropArg,
        /// Divide both loss terms by the pixel count.
        #[arg(long = "normalize-per-pixel")]
        normalize_per_pixel: bool,
        /// Write a checkpoint every this many steps (0 disables).
        #[arg(long = "checkpoint-every", default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Run a trained network on one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Mix a network's maps into one guidance map with a 1x1 layer.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        /// Output PNG.
        #[arg(long, short)]
        out: PathBuf,
        /// Comma-separated mixing weights, one per map; a seeded random
        /// layer is used when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every gradient.
    Gradcheck,
    /// Print the version.
    Version,
}

fn configure_threads() {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_model(path: &Path) -> Result<SsgNet<f32>> {
    Checkpoint::load(path)?.to_model()
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Graph { image, graph, mtx, kind } => {
            let img = io::load_image::<f64>(&image)?;
            let feats = extract_features(&img, graph.eta)?;
            let nbrs = knn_search(&feats, graph.k)?;
            let w = build_affinity(&feats, &nbrs)?;
            let l = build_laplacian(&w)?;
            println!(
                "nodes {} edges {} components {}",
                l.n_nodes(),
                w.edge_count(),
                w.component_count()
            );
            if let Some(path) = mtx {
                let m = if kind == MatrixKind::Affinity { &w } else { &l };
                m.write_matrix_market(BufWriter::new(fs::File::create(&path)?))?;
                println!("wrote {}", path.display());
            }
        }
        Command::Eigs { image, out, n_eigen, graph } => {
            let img = io::load_image::<f64>(&image)?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let l = crate::graph::image_laplacian(&img, graph.config())?;
            let comps = l.component_count();
            let pairs = smallest_eigs(&l, (n_eigen + comps).min(l.n_nodes()))?;
            println!("eigenvalues {:?}", pairs.values);
            let maps = reference_softseg::<f32>(&pairs, n_eigen, h, w)?;
            for p in io::save_maps(&maps, &out, "eig", MapFormats::default())? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train {
            data,
            out,
            lambda,
            gamma,
            n_eigen,
            graph,
            lr,
            batch,
            steps,
            seed,
            resolution,
            crop_mode,
            normalize_per_pixel,
            checkpoint_every,
        } => {
            let mode = match crop_mode {
                CropArg::Resize => CropMode::ResizeBilinear,
                CropArg::Center => CropMode::CenterCrop,
            };
            let spec = DatasetSpec::discover(&data, resolution, mode)?;
            let loss = LossConfig {
                lambda,
                gamma,
                normalize_per_pixel,
            };
            loss.validate()?;
            let mut cache = LaplacianCache::new();
            let dataset = Dataset::new(spec.load()?, graph.config(), &mut cache)?;
            let model_cfg = SsgConfig {
                n_eigenmaps: n_eigen,
                ..SsgConfig::default()
            };
            let mut net = SsgNet::new(model_cfg, seed)?;
            let mut adam = AdamState::new(lr);
            let cfg = TrainConfig {
                steps,
                batch,
                lr,
                seed,
                loss,
            };
            fs::create_dir_all(&out)?;
            log::info!("training on {} images, {} parameters", dataset.len(), net.param_count());
            let report = train(&mut net, &mut adam, &dataset, &cfg, |row, net, adam| {
                let done = row.step + 1;
                if checkpoint_every > 0 && done % checkpoint_every == 0 {
                    Checkpoint::from_model(net, Some(adam)).save(out.join(format!("step_{done:06}.ssgn")))?;
                }
                Ok(())
            })?;
            write_trace_csv(&report.trace, BufWriter::new(fs::File::create(out.join("trace.csv"))?))?;
            Checkpoint::from_model(&net, Some(&adam)).save(out.join("final.ssgn"))?;
            println!(
                "loss {:.6} -> {:.6} (eigen {:.6}, spatial {:.6})",
                report.initial.total, report.final_.total, report.final_.eigen, report.final_.spatial
            );
        }
        Command::Infer { checkpoint, image, out } => {
            let net = load_model(&checkpoint)?;
            let img = io::load_image::<f32>(&image)?;
            let maps = predict(&net, &img)?;
            for p in io::save_maps(&maps, &out, "map", MapFormats::default())? {
                println!("wrote {}", p.display());
            }
        }
        Command::Fuse {
            checkpoint,
            image,
            out,
            weights,
            seed,
        } => {
            let net = load_model(&checkpoint)?;
            let img = io::load_image::<f32>(&image)?;
            let maps = predict(&net, &img)?;
            let layer = match weights {
                Some(w) if w.len() != maps.n() => {
                    return Err(Error::Contract(format!("{} weights for {} maps", w.len(), maps.n())));
                }
                Some(w) => FusionLayer::from_weights(&[w])?,
                None => FusionLayer::new(maps.n(), 1, seed)?,
            };
            let fused = fuse_guidance(&layer, &maps)?;
            let lo = fused.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = fused.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            io::save_plane_png(fused.data(), maps.height(), maps.width(), &out)?;
            println!("fused range [{lo}, {hi}], wrote {}", out.display());
        }
        Command::Gradcheck => {
            let report = run_suite(&SuiteOptions::default())?;
            for c in &report.checks {
                println!(
                    "{:<6} {:<4} {:<28} rel {:.3e} < {:.0e} ({} entries, {} refined)",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.precision,
                    c.name,
                    c.rel_error,
                    c.threshold,
                    c.entries,
                    c.refined
                );
            }
            println!("{:.1}s", report.seconds);
            if !report.passed() {
                return Err(Error::Contract("gradient check failed".into()));
            }
        }
        Command::Version => println!("ssgnet {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}
