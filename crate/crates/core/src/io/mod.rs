//! File formats: PFM depth maps, 8/16-bit PNG, the `VARD` checkpoint
//! container and the on-disk dataset layout.

mod checkpoint;
mod dataset;
mod image;

pub use checkpoint::{
    load_prior, load_tokenizer, load_upsampler, save_prior, save_tokenizer, save_upsampler, Checkpoint, ModelKind,
    CHECKPOINT_VERSION,
};
pub use dataset::{list_samples, read_sample, write_sample, SampleFiles};
pub use image::{colormap, read_pfm, read_png, write_pfm, write_png_gray16, write_png_gray8, write_png_rgb8, Image};
