//! Runs a network on one image, saves its maps, and mixes them into a
//! single guidance map with a 1x1 fusion layer.
//!
//! ```text
//! cargo run --release --example infer_and_fuse -- [checkpoint.ssgn] [image.png] [out_dir]
//! ```
//! Without a checkpoint a freshly initialized network is used; without an
//! image, a synthetic scene of odd size (padding is handled internally).

use std::path::PathBuf;

use ssgnet::io::{load_raw_maps, save_maps, save_plane_png, Checkpoint, MapFormats};
use ssgnet::synthetic::scene;
use ssgnet::{fuse_guidance, predict, FusionLayer, SsgConfig, SsgNet};

fn run(checkpoint: Option<PathBuf>, image: Option<PathBuf>, out: PathBuf) -> ssgnet::Result<()> {
    let net = match checkpoint {
        Some(p) => Checkpoint::load(p)?.to_model()?,
        None => SsgNet::new(SsgConfig::default(), 0)?,
    };
    let img = match image {
        Some(p) => ssgnet::io::load_image::<f32>(p)?,
        None => scene(4, 37, 45, 3),
    };
    let maps = predict(&net, &img)?;
    let (sum_err, min) = maps.simplex_error();
    println!("{} maps of {}x{}", maps.n(), maps.height(), maps.width());
    println!("max |sum - 1| {sum_err:.2e}, min value {min:.3}");
    println!("mean max-channel {:.3}", maps.mean_max_channel());

    let written = save_maps(&maps, &out, "map", MapFormats::default())?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    if let Some(raw) = written.iter().find(|p| p.extension().is_some_and(|e| e == "ssgm")) {
        let back = load_raw_maps(raw)?;
        println!("raw maps reload bit-exact: {}", back.maps.data() == maps.maps.data());
    }

    // pick the first map, then an even mix
    for (name, weights) in [("first", vec![1.0, 0.0, 0.0]), ("mix", vec![1.0 / 3.0; 3])] {
        if weights.len() != maps.n() {
            continue;
        }
        let fused = fuse_guidance(&FusionLayer::<f32>::from_weights(&[weights])?, &maps)?;
        let path = out.join(format!("fused_{name}.png"));
        save_plane_png(fused.data(), maps.height(), maps.width(), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ssgnet::Result<()> {
    let mut args = std::env::args_os().skip(1);
    let checkpoint = args.next().map(PathBuf::from);
    let image = args.next().map(PathBuf::from);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ssgnet_infer"));
    run(checkpoint, image, out)
}
