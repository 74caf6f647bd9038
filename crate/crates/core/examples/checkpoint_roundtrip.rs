//! Saves an untrained prior, reads it back and checks every parameter bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vardepth::io::{load_prior, save_prior, Checkpoint};
use vardepth::prior::{Prior, PriorConfig};
use vardepth::tokenizer::ScaleSchedule;

fn main() -> vardepth::Result<()> {
    let cfg = PriorConfig { d_model: 32, blocks: 2, ..PriorConfig::new(64, 8, ScaleSchedule::desk()) };
    let prior = Prior::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let dir = std::env::temp_dir().join("vardepth-checkpoint-example");
    let path = dir.join("prior.vard");
    save_prior(&prior, None).write(&path)?;
    let bytes = std::fs::metadata(&path).map_err(|source| vardepth::Error::Io { path: path.clone(), source })?.len();
    let (back, _) = load_prior(&Checkpoint::read(&path)?)?;
    let same = prior
        .params
        .iter()
        .zip(back.params.iter())
        .all(|((na, a), (nb, b))| na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("{} tensors, {bytes} bytes at {}, bit-exact: {same}", prior.params.len(), path.display());
    Ok(())
}
