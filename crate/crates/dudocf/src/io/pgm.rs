//! Binary PGM dumps of volume slices for quick human inspection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// Write one 2D image (row-major, `w` x `h`) normalized to the image maximum.
pub fn save_pgm(path: &Path, data: &[f64], w: usize, h: usize) -> Result<()> {
    assert_eq!(data.len(), w * h);
    let max = data.iter().cloned().fold(0.0_f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.max(0.0) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Dump mid-axial, mid-coronal and mid-sagittal slices of a volume with
/// extents (nx, ny, nz) stored row-major.
pub fn save_mid_slices(dir: &Path, stem: &str, data: &[f64], (nx, ny, nz): (usize, usize, usize)) -> Result<()> {
    let at = |x: usize, y: usize, z: usize| data[(x * ny + y) * nz + z];

    // axial: fixed z, image over (x, y)
    let z0 = nz / 2;
    let axial: Vec<f64> = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).map(|(x, y)| at(x, y, z0)).collect();
    save_pgm(&dir.join(format!("{stem}_axial.pgm")), &axial, nx, ny)?;

    // coronal: fixed y, image over (x, z)
    let y0 = ny / 2;
    let coronal: Vec<f64> = (0..nz).flat_map(|z| (0..nx).map(move |x| (x, z))).map(|(x, z)| at(x, y0, z)).collect();
    save_pgm(&dir.join(format!("{stem}_coronal.pgm")), &coronal, nx, nz)?;

    // sagittal: fixed x, image over (y, z)
    let x0 = nx / 2;
    let sagittal: Vec<f64> = (0..nz).flat_map(|z| (0..ny).map(move |y| (y, z))).map(|(y, z)| at(x0, y, z)).collect();
    save_pgm(&dir.join(format!("{stem}_sagittal.pgm")), &sagittal, ny, nz)?;
    Ok(())
}
