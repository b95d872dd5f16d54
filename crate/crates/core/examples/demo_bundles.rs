//! Writes the demo bundles: `cargo run --example demo_bundles -- <out-dir>`.

use scenectx::demo;
use scenectx::io::save_bundle;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    for (name, ctx) in [("bedroom", demo::bedroom()), ("two_cubes", demo::two_cubes())] {
        let dir = root.join(name);
        save_bundle(&ctx, &dir)?;
        println!("{} ({} points)", dir.display(), ctx.cloud.len());
    }
    Ok(())
}
