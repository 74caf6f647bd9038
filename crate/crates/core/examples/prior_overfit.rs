//! Teacher-forced training of the scale-wise prior on a single sample until
//! the cross entropy collapses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vardepth::config::RunConfig;
use vardepth::prior::{Prior, PriorTrainConfig, PriorTrainer};
use vardepth::recipe::{prior_samples, synthetic_splits};
use vardepth::tokenizer::Tokenizer;

fn main() -> vardepth::Result<()> {
    let mut cfg = RunConfig::default();
    (cfg.data.n_train, cfg.data.n_val, cfg.data.n_test) = (1, 0, 0);
    cfg.model.d_model = 64;
    cfg.model.blocks = 2;
    let [train, _, _] = synthetic_splits(&cfg)?;
    let depth = Tokenizer::new(cfg.depth_tokenizer(), &mut ChaCha8Rng::seed_from_u64(1))?;
    let rgb = Tokenizer::new(cfg.rgb_tokenizer(), &mut ChaCha8Rng::seed_from_u64(2))?;
    let data = prior_samples(&depth, &rgb, &train)?;
    let mut prior = Prior::new(cfg.prior(), &mut ChaCha8Rng::seed_from_u64(3))?;
    println!("{} parameters, {} tokens per sample", prior.params.num_scalars(), depth.schedule().total_tokens());
    let train_cfg = PriorTrainConfig {
        phase_a_epochs: 0,
        phase_b_epochs: 300,
        batch_size: 1,
        lr: 2e-3,
        cond_dropout: 0.0,
        ..PriorTrainConfig::default()
    };
    PriorTrainer::new(&prior, train_cfg).run(&mut prior, &[], &data, |r| {
        if r.step % 25 == 0 {
            println!("step {:>3} loss {:.4}", r.step, r.loss);
        }
    })?;
    let cond = prior.project_condition(&data[0].cond)?;
    println!("final teacher-forcing loss {:.4}", prior.teacher_forcing_loss(&data[0].tokens, &cond)?);
    Ok(())
}
