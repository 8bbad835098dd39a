//! Writes the five bundled 64x64 scenes used by the smoke tests.
//!
//! ```text
//! cargo run --example make_scenes -- [out_dir]
//! ```

use std::path::PathBuf;

use ssgnet::io::save_rgb_png;
use ssgnet::synthetic::{scene, LAYOUTS};

const SIZE: usize = 64;
const SEED: u64 = 7;

fn run(out: PathBuf) -> ssgnet::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    for i in 0..LAYOUTS {
        let path = out.join(format!("scene_{i}.png"));
        save_rgb_png(&scene::<f32>(i, SIZE, SIZE, SEED), &path)?;
        written.push(path);
    }
    Ok(written)
}

fn main() -> ssgnet::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/scenes"));
    for p in run(out)? {
        println!("{}", p.display());
    }
    Ok(())
}
