//! Trains a small depth tokenizer for a few epochs, then encodes a held-out
//! depth map scale by scale and reports how the residual shrinks.

use vardepth::config::RunConfig;
use vardepth::recipe::{synthetic_splits, train_tokenizer_on};

fn main() -> vardepth::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.n_train = 48;
    cfg.data.n_val = 0;
    cfg.data.n_test = 1;
    cfg.model.vocab = 64;
    cfg.model.channels = 8;
    cfg.train.tokenizer.epochs = 15;
    let [train, _, test] = synthetic_splits(&cfg)?;
    let images: Vec<_> = train.iter().map(|p| p.depth_image.clone()).collect();
    let tok = train_tokenizer_on(&cfg, false, &images, |s| {
        println!("epoch {:>2} loss {:.4} mse {:.4} usage entropy {:.2}", s.epoch, s.loss, s.mse, s.usage_entropy);
    })?;

    let x = &test[0].depth_image;
    let f = tok.encode_image(x)?;
    let enc = tok.encode_multiscale(&f)?;
    for (k, (r, norm)) in enc.tokens.iter().zip(&enc.residual_norms).enumerate() {
        let distinct = {
            let mut v = r.indices().to_vec();
            v.sort();
            v.dedup();
            v.len()
        };
        println!("scale {:>2} {}x{} distinct codes {distinct:>3} residual {norm:.4}", k + 1, r.height(), r.width());
    }
    let y = tok.decode_image(&tok.decode_multiscale(&enc.tokens)?)?;
    let mse = y.sub(x)?.data().iter().map(|v| v * v).sum::<f32>() / y.numel() as f32;
    println!("held-out reconstruction mse {mse:.4}");
    Ok(())
}
