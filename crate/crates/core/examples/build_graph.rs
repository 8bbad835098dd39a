//! Builds the KNN pixel graph of an image and prints its structure.
//!
//! ```text
//! cargo run --example build_graph -- [image.png] [k] [eta]
//! ```
//! Without an image a synthetic scene is used. The Laplacian is written in
//! MatrixMarket format next to the system temp dir.

use std::io::BufWriter;
use std::path::PathBuf;

use ssgnet::graph::{build_affinity, build_laplacian, extract_features, knn_search};
use ssgnet::synthetic::scene;

fn run(image: Option<PathBuf>, k: usize, eta: f64) -> ssgnet::Result<()> {
    let img = match image {
        Some(p) => ssgnet::io::load_image::<f64>(p)?,
        None => scene(0, 32, 32, 1),
    };
    let features = extract_features(&img, eta)?;
    let neighbors = knn_search(&features, k)?;
    let w = build_affinity(&features, &neighbors)?;
    let l = build_laplacian(&w)?;
    println!("pixels      {}", l.n_nodes());
    println!("edges       {}", w.edge_count());
    println!("components  {}", w.component_count());
    println!("mean degree {:.3}", (0..l.n_nodes()).map(|i| l.get(i, i)).sum::<f64>() / l.n_nodes() as f64);

    // L 1 = 0 and y'Ly agrees with the edge sum
    let ones = vec![1.0; l.n_nodes()];
    let residual = l.matvec(&ones)?.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let y: Vec<f64> = (0..l.n_nodes()).map(|i| (i as f64 * 0.37).sin()).collect();
    println!("|L 1|_inf   {residual:.2e}");
    println!("y'Ly        {:.6} (edge sum {:.6})", l.quadratic_form(&y)?, l.quadratic_form_edges(&y)?);

    let path = std::env::temp_dir().join("ssgnet_laplacian.mtx");
    l.write_matrix_market(BufWriter::new(std::fs::File::create(&path)?))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ssgnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let image = args.next().map(PathBuf::from);
    let k = args.next().and_then(|v| v.parse().ok()).unwrap_or(10);
    let eta = args.next().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    run(image, k, eta)
}
