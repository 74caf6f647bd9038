//! Renders one scene per family and writes RGB, depth and mask files.
//!
//! `cargo run --release --example synth_scene -- out/scenes`

use std::path::PathBuf;

use vardepth::io::write_sample;
use vardepth::synth::{generate_scene, normalize_depth, NormalizationSpec, SceneConfig, SceneFamily};

fn main() -> vardepth::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/scenes".into()));
    for (i, family) in [SceneFamily::Indoor, SceneFamily::Roadway, SceneFamily::Empty].into_iter().enumerate() {
        let sample = generate_scene(42, &SceneConfig::new(48, 64, family))?;
        let valid: Vec<f32> = sample.depth.data().iter().zip(&sample.valid).filter(|(_, &v)| v).map(|(&d, _)| d).collect();
        let lo = valid.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = valid.iter().cloned().fold(0.0, f32::max);
        let (_, range) = normalize_depth(&sample.depth, &sample.valid, &NormalizationSpec::default())?;
        let files = write_sample(&out, i, &sample)?;
        println!(
            "{family:?}: {} valid px, depth {lo:.2}..{hi:.2} m, window {:.2}..{:.2} m -> {}",
            valid.len(),
            range.lo,
            range.hi,
            files.depth.display()
        );
    }
    Ok(())
}
