//! Trains every model at a reduced size, then samples depth for held-out
//! images with each guidance preset and scores it.

use std::time::Instant;

use vardepth::config::RunConfig;
use vardepth::eval::AlignMode;
use vardepth::recipe::{evaluate_models, synthetic_splits, train_all, Progress};
use vardepth::sampler::make_schedule;

fn main() -> vardepth::Result<()> {
    let mut cfg = RunConfig::default();
    (cfg.data.n_train, cfg.data.n_val, cfg.data.n_test) = (40, 0, 8);
    cfg.model.vocab = 64;
    cfg.model.channels = 8;
    cfg.model.d_model = 48;
    cfg.model.blocks = 2;
    cfg.model.upsampler_widths = [8, 16, 32];
    cfg.train.tokenizer.epochs = 4;
    (cfg.train.prior.phase_a_epochs, cfg.train.prior.phase_b_epochs) = (1, 4);
    cfg.train.upsampler.epochs = 4;

    let started = Instant::now();
    let [train, _, test] = synthetic_splits(&cfg)?;
    let models = train_all(&cfg, &train, |p| match p {
        Progress::Tokenizer { which, stats } => println!("{which} tokenizer epoch {} mse {:.4}", stats.epoch, stats.mse),
        Progress::Prior(r) if r.step % 10 == 0 => println!("prior step {} loss {:.3}", r.step, r.loss),
        Progress::Upsampler { step, loss } if step % 10 == 0 => println!("upsampler step {step} loss {loss:.4}"),
        _ => {}
    })?;
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());

    for preset in ["none", "constant", "optimized"] {
        let report = evaluate_models(&models, &test, &make_schedule(preset, 10)?, AlignMode::Linear)?;
        let per_scale: Vec<String> = report.latency.iter().map(|l| format!("{:.1}", l.p50_ms)).collect();
        println!("{preset:>9}: AbsRel {:.2} delta1 {:.1} | ms per scale {}", report.abs_rel, report.delta1, per_scale.join(" "));
    }
    Ok(())
}
