//! Trains the same network with several weights on the sparsity term and
//! compares how distinct the output maps are. With no sparsity the maps
//! collapse towards each other; with too much, the graph energy suffers.
//!
//! ```text
//! cargo run --release --example lambda_sweep -- [steps]
//! ```

use ssgnet::loss::LossConfig;
use ssgnet::synthetic::scenes;
use ssgnet::train::{evaluate_dataset, predict_dataset};
use ssgnet::{train, AdamState, Dataset, GraphConfig, LaplacianCache, SsgConfig, SsgNet, TrainConfig};

fn run(steps: usize, lambdas: &[f64]) -> ssgnet::Result<()> {
    let mut cache = LaplacianCache::new();
    let data = Dataset::new(scenes(5, 32, 32, 7), GraphConfig::default(), &mut cache)?;
    println!("{:>8} {:>10} {:>10} {:>10} {:>10}", "lambda", "eigen", "spatial", "max-chan", "l1-apart");
    for &lambda in lambdas {
        let loss = LossConfig {
            lambda,
            ..LossConfig::default()
        };
        let cfg = TrainConfig {
            steps,
            lr: 1e-3,
            seed: 5,
            loss,
            ..TrainConfig::default()
        };
        let mut net = SsgNet::new(SsgConfig::default(), 5)?;
        let mut adam = AdamState::new(cfg.lr);
        train(&mut net, &mut adam, &data, &cfg, |_, _, _| Ok(()))?;
        let fin = evaluate_dataset(&net, &data, &loss)?;
        let maps = predict_dataset(&net, &data)?;
        let n = maps.len() as f64;
        let max_chan = maps.iter().map(|m| m.mean_max_channel()).sum::<f64>() / n;
        let apart = maps.iter().map(|m| m.mean_interchannel_l1()).sum::<f64>() / n;
        println!("{lambda:>8} {:>10.4} {:>10.4} {max_chan:>10.4} {apart:>10.4}", fin.eigen, fin.spatial);
    }
    Ok(())
}

fn main() -> ssgnet::Result<()> {
    let steps = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(100);
    run(steps, &[0.0, 40.0, 1000.0])
}
