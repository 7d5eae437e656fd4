//! Image output: the binary record format plus an 8-bit graymap.

use std::io::Write;
use std::path::{Path, PathBuf};

use eit_core::dataset::{write_atomically, write_images};
use eit_core::{PixelImage, Result};

/// Path of the graymap written next to `path`.
pub fn graymap_path(path: &Path) -> PathBuf {
    path.with_extension("pgm")
}

/// Min–max normalized gray levels; a constant image maps to 0.
pub fn gray_levels(image: &PixelImage) -> Vec<u8> {
    let (lo, hi) = (image.min(), image.max());
    image
        .values()
        .iter()
        .map(|&v| {
            if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_graymap(image: &PixelImage, path: &Path) -> Result<()> {
    write_atomically(path, |w| {
        write!(w, "P5\n{} {}\n255\n", image.side(), image.side())?;
        w.write_all(&gray_levels(image))?;
        Ok(())
    })
}

/// Write `image` to `path` in the binary record format and a `.pgm`
/// rendering alongside it.
pub fn export_image(image: &PixelImage, path: &Path) -> Result<()> {
    write_images(path, std::slice::from_ref(image))?;
    write_graymap(image, &graymap_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use eit_core::dataset::read_images;

    #[test]
    fn constant_image_is_flat() {
        let img = PixelImage::filled(4, 0.7).unwrap();
        assert!(gray_levels(&img).iter().all(|&g| g == 0));
    }

    #[test]
    fn levels_span_full_range() {
        let img = PixelImage::from_fn(2, |r, c| (r * 2 + c) as f64).unwrap();
        assert_eq!(gray_levels(&img), vec![0, 85, 170, 255]);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        // Pixels are stored as f32.
        let img = PixelImage::from_fn(5, |r, c| (r as f64 * 0.37 - c as f64).sin() as f32 as f64).unwrap();
        export_image(&img, &path).unwrap();
        assert_eq!(read_images(&path).unwrap(), vec![img.clone()]);
        let pgm = std::fs::read(graymap_path(&path)).unwrap();
        assert!(pgm.starts_with(b"P5\n5 5\n255\n"));
        assert_eq!(pgm.len(), 11 + 25);
    }
}
