//! Synthetic micrographs, coordinate rasterization and on-disk datasets.

mod manifest;
mod pgm;
mod synth;

pub use manifest::{
    coords_csv, coords_path, image_path, mask_path, parse_coords, read_samples, split, stem_for, stem_index,
    write_dataset, DatasetManifest,
};
pub use pgm::{decode as decode_pgm, encode as encode_pgm, load_image, load_mask, quantize, save_image, save_mask, Pgm};
pub use synth::{generate, generate_one, rasterize, Domain, Particle, Polarity, Sample, SyntheticConfig};
