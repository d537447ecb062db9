//! Minimal binary PGM (P5) reader/writer for the emitted raster panels.

use std::io::Write;
use std::path::Path;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(pixels)
}
