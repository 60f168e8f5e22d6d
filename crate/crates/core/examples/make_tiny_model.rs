//! Writes a small randomly initialised model directory.
//!
//! `cargo run -p attnlens --example make_tiny_model -- models/tiny [seed] [max_positions]`

use attnlens::fixture;

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "models/tiny".into());
    let seed = args.next().map_or(7, |s| s.parse().expect("seed must be an integer"));
    let mut config = fixture::tiny_config();
    if let Some(max) = args.next() {
        config.max_positions = max.parse().expect("max_positions must be an integer");
    }
    fixture::write_model_dir(&dir, &config, seed)?;
    println!("wrote {dir}");
    Ok(())
}
