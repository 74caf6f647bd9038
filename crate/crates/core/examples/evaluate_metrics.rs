//! Affine alignment and the AbsRel / delta1 metrics on a rendered scene.

use vardepth::eval::{align_affine, score, AlignMode, EvalTarget};
use vardepth::synth::{generate_scene, SceneConfig, SceneFamily};

fn main() -> vardepth::Result<()> {
    let s = generate_scene(5, &SceneConfig::new(48, 64, SceneFamily::Indoor))?;
    let target = EvalTarget { depth: s.depth.data(), valid: &s.valid };

    // A prediction off by an unknown scale and shift scores perfectly.
    let shifted: Vec<f32> = s.depth.data().iter().map(|d| 0.2 * d - 3.0).collect();
    let fit = align_affine(&shifted, s.depth.data(), &s.valid)?;
    println!("recovered s = {:.4}, t = {:.4}", fit.s, fit.t);
    let r = score(0, &shifted, &target, AlignMode::Linear)?;
    println!("scaled copy: AbsRel {:.4} delta1 {:.1}", r.abs_rel, r.delta1);

    // Squashing the depth range is not affine and costs accuracy.
    let squashed: Vec<f32> = s.depth.data().iter().map(|d| d.sqrt()).collect();
    let r = score(0, &squashed, &target, AlignMode::Linear)?;
    println!("sqrt depth:  AbsRel {:.4} delta1 {:.1}", r.abs_rel, r.delta1);
    Ok(())
}
