//! Binary PGM/PPM (P5/P6) writers for predicted maps.

use std::io::Write;
use std::path::Path;

use dpbridge::{Error, Result, Tensor};

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Write an `H x W x C` tensor in `[-1, 1]` as P5 (1 channel) or P6
/// (3 channels).
pub fn write_pnm(path: &Path, img: &Tensor) -> Result<()> {
    if img.shape().len() != 3 {
        return Err(Error::ShapeMismatch("pnm wants H x W x C".into()));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        other => {
            return Err(Error::ShapeMismatch(format!(
                "pnm supports 1 or 3 channels, got {other}"
            )))
        }
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?,
        );
        let hdr = format!("{magic}\n{w} {h}\n255\n");
        f.write_all(hdr.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        let bytes: Vec<u8> = img.data().iter().map(|v| to_byte(*v)).collect();
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
