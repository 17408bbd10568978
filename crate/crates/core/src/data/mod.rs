//! CT slices on disk, Hounsfield windowing, manifests and splits, and
//! synthetic phantoms.

mod format;
mod manifest;
mod synth;
mod window;

pub use format::{
    decode_image, decode_mask, encode_image, encode_mask, read_image, read_mask, read_png,
    write_atomic, write_image, write_mask, write_mask_png, write_png, HuImage, Mask, IMAGE_MAGIC,
    MASK_MAGIC,
};
pub use manifest::{
    load_manifest, read_all, read_slice, split_dataset, split_train_val_test, write_manifest,
    Manifest, ManifestEntry, SliceSample, MANIFEST_HEADER,
};
pub use synth::{synth_generate, synth_phantoms, Ellipse, Phantom, BACKGROUND_HU, ORGAN_HU};
pub use window::{hu_window, WindowSpec};

/// Windowed preview in 8-bit gray.
pub fn preview_pixels(image: &HuImage, window: WindowSpec) -> crate::Result<Vec<u8>> {
    Ok(hu_window(&image.data, window)?
        .into_iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect())
}
