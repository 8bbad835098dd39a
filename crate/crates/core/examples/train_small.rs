//! Trains the network on a handful of synthetic scenes and saves the
//! loss trace and a checkpoint.
//!
//! ```text
//! cargo run --release --example train_small -- [steps] [out_dir]
//! ```

use std::io::BufWriter;
use std::path::PathBuf;

use ssgnet::io::Checkpoint;
use ssgnet::synthetic::scenes;
use ssgnet::train::write_trace_csv;
use ssgnet::{train, AdamState, Dataset, GraphConfig, LaplacianCache, SsgConfig, SsgNet, TrainConfig};

fn run(steps: usize, out: PathBuf) -> ssgnet::Result<()> {
    let mut cache = LaplacianCache::new();
    let data = Dataset::new(scenes(5, 32, 32, 7), GraphConfig::default(), &mut cache)?;
    let mut net = SsgNet::new(SsgConfig::default(), 7)?;
    let cfg = TrainConfig {
        steps,
        lr: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(cfg.lr);
    let report = train(&mut net, &mut adam, &data, &cfg, |row, _, _| {
        if row.step % 25 == 0 {
            println!("step {:4}  eigen {:8.4}  spatial {:8.4}  total {:9.4}", row.step, row.loss.eigen, row.loss.spatial, row.loss.total);
        }
        Ok(())
    })?;
    println!("dataset loss {:.4} -> {:.4}", report.initial.total, report.final_.total);

    std::fs::create_dir_all(&out)?;
    write_trace_csv(&report.trace, BufWriter::new(std::fs::File::create(out.join("trace.csv"))?))?;
    Checkpoint::from_model(&net, Some(&adam)).save(out.join("final.ssgn"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ssgnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|v| v.parse().ok()).unwrap_or(100);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ssgnet_train"));
    run(steps, out)
}
