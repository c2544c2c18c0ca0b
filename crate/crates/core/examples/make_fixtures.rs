//! Regenerates the bundled fixtures.
//!
//! ```text
//! cargo run -p riscore --example make_fixtures -- crates/core/fixtures
//! ```

use std::env;
use std::path::PathBuf;

use riscore::synth::{bundled_configs, generate};

fn main() -> riscore::Result<()> {
    let root = PathBuf::from(env::args().nth(1).unwrap_or_else(|| "crates/core/fixtures".into()));
    for (name, cfg) in bundled_configs() {
        generate(&cfg)?.write_to(root.join(name))?;
        println!("wrote {}", root.join(name).display());
    }
    Ok(())
}
