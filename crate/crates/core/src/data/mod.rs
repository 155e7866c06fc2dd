//! Synthetic slides, field-of-view patch extraction, and file formats.

mod checkpoint;
mod dataset;
mod extract;
mod fov;
mod io;
mod ppm;
mod slide;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoredTensor, MAGIC, VERSION};
pub use dataset::{
    class_dir, is_test_slide, patch_index, read_dataset, read_json_file, read_manifest, read_slide, read_slide_manifest,
    write_dataset, write_json_report, write_slide_set, Manifest, SlideSetManifest, MANIFEST, SLIDES_MANIFEST,
};
pub use extract::{extract_patches, resize, Extraction, BACKGROUND_VARIANCE};
pub use fov::{fov_of, pixel_extent_of, PatchSpec, Preset};
pub use io::atomic_write;
pub use ppm::{
    decode_ppm, encode_ppm, from_u8, image_to_rgb8, load_ppm, load_rgb8, rgb8_to_image, save_ppm, save_rgb8, to_u8,
    Rgb8,
};
pub use slide::{
    generate_slide, generate_slide_with, slide_seed, SyntheticSlide, TextureParams, DEFAULT_EXTENT, DEFAULT_MPP,
    NUM_CLASSES,
};
