//! Classical spectral soft segmentation: the smallest eigenvectors of the
//! image Laplacian, scaled into simplex-valued maps. This is what the
//! network learns to approximate.
//!
//! ```text
//! cargo run --example spectral_reference -- [image.png] [out_dir]
//! ```

use std::path::PathBuf;

use ssgnet::io::{save_maps, MapFormats};
use ssgnet::loss::{evaluate, LossConfig};
use ssgnet::spectral::{dense_smallest_eigs, lanczos_smallest_eigs, reference_softseg, LanczosOptions};
use ssgnet::synthetic::scene;
use ssgnet::{image_laplacian, GraphConfig};

const N_MAPS: usize = 3;

fn run(image: Option<PathBuf>, out: PathBuf) -> ssgnet::Result<()> {
    let img = match image {
        Some(p) => ssgnet::io::load_image::<f64>(p)?,
        None => scene(2, 24, 24, 1),
    };
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let l = image_laplacian(&img, GraphConfig::default())?;
    let m = (N_MAPS + l.component_count()).min(l.n_nodes());

    let lanczos = lanczos_smallest_eigs(&l, m, &LanczosOptions::default())?;
    println!("lanczos {:?}", lanczos.values);
    if l.n_nodes() <= 4096 {
        let dense = dense_smallest_eigs(&l, m)?;
        let gap = dense.values.iter().zip(&lanczos.values).fold(0.0f64, |g, (a, b)| g.max((a - b).abs()));
        println!("dense   {:?}", dense.values);
        println!("max eigenvalue difference {gap:.2e}");
    }

    let maps = reference_softseg::<f64>(&lanczos, N_MAPS, h, w)?;
    let losses = evaluate(&maps, &[&l], &LossConfig::default())?;
    println!("loss of the reference maps: eigen {:.4}, spatial {:.4}", losses.eigen, losses.spatial);
    for p in save_maps(&maps, &out, "ref", MapFormats::default())? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ssgnet::Result<()> {
    let mut args = std::env::args_os().skip(1);
    let image = args.next().map(PathBuf::from);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ssgnet_reference"));
    run(image, out)
}
