//! Binary PGM/PPM writers for reconstruction dumps. Values are interpreted on
//! a [0,1] range and clamped.

use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1,H,W]` or `[H,W]` tensor as binary PGM (P5).
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        _ => {
            return Err(CoreError::InvalidShape {
                op: "write_pgm",
                shape: t.shape.clone(),
                reason: "expects [1,H,W] or [H,W]".into(),
            })
        }
    };
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = t.data.iter().map(|&v| to_byte(v)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Writes a `[3,H,W]` tensor as binary PPM (P6), interleaving the planes.
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape.as_slice() {
        [3, h, w] => (*h, *w),
        _ => {
            return Err(CoreError::InvalidShape {
                op: "write_ppm",
                shape: t.shape.clone(),
                reason: "expects [3,H,W]".into(),
            })
        }
    };
    let plane = h * w;
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        bytes.push(to_byte(t.data[i]));
        bytes.push(to_byte(t.data[plane + i]));
        bytes.push(to_byte(t.data[2 * plane + i]));
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Picks PGM for 1-channel tensors and PPM for 3-channel ones; returns the
/// path actually written (extension adjusted).
pub fn write_image(path_no_ext: &Path, t: &Tensor) -> Result<std::path::PathBuf> {
    match t.shape.first() {
        Some(3) => {
            let p = path_no_ext.with_extension("ppm");
            write_ppm(&p, t)?;
            Ok(p)
        }
        _ => {
            let p = path_no_ext.with_extension("pgm");
            write_pgm(&p, t)?;
            Ok(p)
        }
    }
}
