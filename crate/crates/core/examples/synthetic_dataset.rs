//! Writes the synthetic 100-site, 1895-row dataset.
//!
//! cargo run --release --example synthetic_dataset -- <out-dir> [seed]

use std::path::PathBuf;

use rpareto::geometry::{save_data, save_sites};
use rpareto::synthetic::{generate, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let seed: u64 = args.next().map_or(Ok(2024), |s| s.parse())?;
    std::fs::create_dir_all(&dir)?;
    let (sites, data) = generate(&SyntheticSpec::default(), seed)?;
    let note = format!("synthetic dataset seed={seed}");
    save_sites(dir.join("sites.csv"), &sites, Some(&note))?;
    save_data(dir.join("data.csv"), &data, Some(&note))?;
    println!("wrote {} sites x {} rows to {}", data.ncols(), data.nrows(), dir.display());
    Ok(())
}
