//! Image loading and the resize/tile steps that feed the crop encoder.
//! Images live in tensors as [H, W, 3] with channel values in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vision::crop::{plan_crops, CropPlan};

/// Decode a PNG or PPM file to an [H, W, 3] tensor scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Quantize an [H, W, 3] tensor back to 8-bit RGB and write it; the format
/// follows the file extension (.png or .ppm).
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Data(format!("cannot write image {}: {e}", path.display())))
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(Error::shape("image", "[H, W, 3]", format!("{other:?}"))),
    }
}

/// Bilinear resample to out_h x out_w (half-pixel centers, clamped at the
/// borders). Resizing to the source dims reproduces the input exactly.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be >= 1 per side".into()));
    }
    let src = img.data();
    let mut out = vec![0.0; out_h * out_w * 3];
    let sy_scale = h as f64 / out_h as f64;
    let sx_scale = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..3 {
                let p = |y: usize, x: usize| src[(y * w + x) * 3 + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * out_w + ox) * 3 + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, 3], out)
}

/// Cut an image whose sides are exact multiples of `c` into row-major
/// [c, c, 3] crops.
pub fn split_crops(img: &Tensor, c: usize) -> Result<Vec<Tensor>> {
    let (h, w) = image_dims(img)?;
    if c == 0 || h % c != 0 || w % c != 0 {
        return Err(Error::shape(
            "split_crops",
            format!("dims divisible by {c}"),
            format!("{h}x{w}"),
        ));
    }
    let src = img.data();
    let (rows, cols) = (h / c, w / c);
    let mut crops = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for cc in 0..cols {
            let mut data = Vec::with_capacity(c * c * 3);
            for y in 0..c {
                let row_start = ((r * c + y) * w + cc * c) * 3;
                data.extend_from_slice(&src[row_start..row_start + c * 3]);
            }
            crops.push(Tensor::new(vec![c, c, 3], data)?);
        }
    }
    Ok(crops)
}

/// Plan, resize, and tile one image for the encoder.
pub fn prepare_image(img: &Tensor, c: usize, max_crops: usize) -> Result<(CropPlan, Vec<Tensor>)> {
    let (h, w) = image_dims(img)?;
    let plan = plan_crops(h, w, c, max_crops)?;
    let resized = if (h, w) == (plan.resize_h, plan.resize_w) {
        img.clone()
    } else {
        bilinear_resize(img, plan.resize_h, plan.resize_w)?
    };
    let crops = split_crops(&resized, c)?;
    Ok((plan, crops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn checker(h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = ((y + x) % 2) as f64;
                // Components sit on the 1/255 grid so 8-bit round trips
                // are exact.
                data.extend_from_slice(&[v, v * 128.0 / 255.0, 1.0 - v]);
            }
        }
        Tensor::new(vec![h, w, 3], data).unwrap()
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        // Values on the 1/255 grid survive quantization exactly.
        let mut data = Vec::new();
        for k in 0..5 * 7 * 3 {
            data.push((k % 256) as f64 / 255.0);
        }
        let img = Tensor::new(vec![5, 7, 3], data).unwrap();
        let path = dir.path().join("t.ppm");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.bit_equal(&img));
    }

    #[test]
    fn png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = checker(6, 4);
        let path = dir.path().join("t.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.bit_equal(&img));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut rng = SplitMix64::new(21);
        let img = Tensor::randn(&[9, 13, 3], 1.0, &mut rng);
        let img = Tensor::new(
            vec![9, 13, 3],
            img.data().iter().map(|v| v.abs().fract()).collect(),
        )
        .unwrap();
        let same = bilinear_resize(&img, 9, 13).unwrap();
        assert!(same.bit_equal(&img));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Tensor::full(&[10, 6, 3], 0.25);
        let up = bilinear_resize(&img, 23, 17).unwrap();
        assert_eq!(up.shape(), &[23, 17, 3]);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let down = bilinear_resize(&img, 3, 2).unwrap();
        assert!(down.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn resize_stays_in_range() {
        let img = checker(20, 31);
        let out = bilinear_resize(&img, 13, 57).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn split_extracts_exact_regions() {
        let img = checker(4, 8);
        let crops = split_crops(&img, 4).unwrap();
        assert_eq!(crops.len(), 2);
        // Left crop row 0 equals image row 0, columns 0..4.
        assert_eq!(crops[0].data()[..12], img.data()[..12]);
        // Right crop row 0 equals image row 0, columns 4..8.
        assert_eq!(crops[1].data()[..12], img.data()[12..24]);
        assert!(split_crops(&img, 3).is_err());
    }

    #[test]
    fn prepare_produces_planned_crop_count() {
        let img = checker(20, 50);
        let (plan, crops) = prepare_image(&img, 16, 16).unwrap();
        assert_eq!((plan.rows, plan.cols), (2, 4));
        assert_eq!(crops.len(), 8);
        for crop in &crops {
            assert_eq!(crop.shape(), &[16, 16, 3]);
        }
    }

    #[test]
    fn prepare_skips_resize_when_dims_already_fit() {
        let img = checker(32, 16);
        let (plan, crops) = prepare_image(&img, 16, 16).unwrap();
        assert!(!plan.fallback_used);
        assert_eq!(crops.len(), 2);
        let glued: Vec<f64> = crops[0]
            .data()
            .iter()
            .chain(crops[1].data())
            .copied()
            .collect();
        assert_eq!(glued, img.data());
    }
}
