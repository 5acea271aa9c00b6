use std::path::Path;

use image::RgbImage;
use log::debug;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Largest centered square.
pub fn center_crop(img: &RgbImage) -> RgbImage {
    let side = img.width().min(img.height());
    let (x0, y0) = ((img.width() - side) / 2, (img.height() - side) / 2);
    image::imageops::crop_imm(img, x0, y0, side, side).to_image()
}

/// Bilinear resampling with corner pixels aligned: destination pixel `i`
/// samples source coordinate `i·(src−1)/(dst−1)`.
pub fn resize_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let coord = |i: u32, dst: u32, src: usize| -> (usize, usize, f64) {
        if dst <= 1 || src <= 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (x.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    RgbImage::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = coord(x, width, sw);
        let (y0, y1, fy) = coord(y, height, sh);
        let px = |xx: usize, yy: usize, c: usize| img.get_pixel(xx as u32, yy as u32).0[c] as f64;
        image::Rgb([0, 1, 2].map(|c| {
            let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
            let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            (v + 0.5).floor().clamp(0.0, 255.0) as u8
        }))
    })
}

/// Center-crops to a square and resizes to `size × size`.
pub fn fit_square(img: &RgbImage, size: usize) -> RgbImage {
    let square = center_crop(img);
    if square.width() as usize == size {
        square
    } else {
        resize_bilinear(&square, size as u32, size as u32)
    }
}

fn decode(path: &Path) -> Result<RgbImage, String> {
    let img = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    Ok(img.to_rgb8())
}

/// Decodes one image file of any supported format into 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    decode(path).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason: reason.replace('\n', " "),
    })
}

/// Encodes `img` as PNG at `path`.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads every decodable image in `dir` (sorted by file name), center-crops
/// it to a square and resizes it to `target_size`. Files that fail to
/// decode are skipped and listed in the dataset's load report.
pub fn load_image_dir(dir: &Path, target_size: usize) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut samples = Vec::new();
    let mut report = Vec::new();
    for path in paths {
        match decode(&path) {
            Ok(img) => {
                samples.push(Sample::from_rgb(fit_square(&img, target_size)));
            }
            Err(reason) => {
                let reason = reason.replace('\n', " ");
                debug!("skipping {}: {reason}", path.display());
                report.push(format!("SKIP {} {reason}", path.display()));
            }
        }
    }
    Ok(Dataset {
        source: format!("dir:{}", dir.display()),
        image_size: target_size,
        samples,
        report,
    })
}
