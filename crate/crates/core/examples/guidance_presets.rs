//! The guidance presets and what the combination does to two branch values.

use vardepth::sampler::{combine_guidance, make_schedule};
use vardepth::Tensor;

fn main() -> vardepth::Result<()> {
    for preset in ["none", "constant", "optimized"] {
        println!("{preset:>9}: {:?}", make_schedule(preset, 10)?.weights);
    }
    let f_c = Tensor::new(&[2, 1, 1], vec![2.0, -1.0])?;
    let f_u = Tensor::new(&[2, 1, 1], vec![1.0, 0.5])?;
    println!("f_c = {:?}, f_u = {:?}", f_c.data(), f_u.data());
    for w in [-1.0, 0.0, 1.0, 3.5] {
        println!("w = {w:>4}: {:?}", combine_guidance(&f_c, &f_u, w)?.data());
    }
    Ok(())
}
