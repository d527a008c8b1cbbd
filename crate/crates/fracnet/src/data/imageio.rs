//! Image decoding and bilinear resizing into normalized tensors.

use std::path::Path;

use crate::tensor::Tensor;

use super::DataError;

/// Decoded single- or three-plane image, one `Vec<f32>` per plane in [0, 255].
struct Planes {
    width: usize,
    height: usize,
    planes: Vec<Vec<f32>>,
}

fn decode_planes(path: &Path, channels: usize) -> Result<Planes, DataError> {
    let img = image::ImageReader::open(path)
        .map_err(|e| DataError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| DataError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grayscale_source = img.color().channel_count() < 3;
    let planes = if channels == 1 || grayscale_source {
        // One decoded plane; replicated later if more channels are wanted.
        let luma = img.to_luma8();
        vec![luma.as_raw().iter().map(|&v| v as f32).collect()]
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let mut planes: Vec<Vec<f32>> = (0..3).map(|_| Vec::with_capacity(w * h)).collect();
        for px in raw.chunks_exact(3) {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(px[c] as f32);
            }
        }
        planes
    };
    Ok(Planes {
        width: w,
        height: h,
        planes,
    })
}

/// Bilinear resampling with half-pixel centers: the source coordinate of
/// destination pixel `d` is `(d + 0.5) * src/dst - 0.5`, clamped to the
/// source extents. Resizing to the same extent is the identity.
pub fn bilinear_resize(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h);
    let mut out = vec![0.0f32; dst_w * dst_h];
    let sx = src_w as f64 / dst_w as f64;
    let sy = src_h as f64 / dst_h as f64;
    for dy in 0..dst_h {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = (fy - y0 as f64) as f32;
        for dx in 0..dst_w {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = (fx - x0 as f64) as f32;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bottom = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out[dy * dst_w + dx] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

/// Decodes an image, resizes to `target` (height, width), replicates
/// grayscale across `channels` (or passes RGB through), and scales to [0, 1].
pub fn load_and_resize(
    path: &Path,
    target: (usize, usize),
    channels: usize,
) -> Result<Tensor<f32>, DataError> {
    assert!(channels >= 1);
    let (th, tw) = target;
    let decoded = decode_planes(path, channels)?;
    let mut data = Vec::with_capacity(channels * th * tw);
    for c in 0..channels {
        let plane = if decoded.planes.len() == 1 {
            &decoded.planes[0]
        } else {
            &decoded.planes[c.min(decoded.planes.len() - 1)]
        };
        let resized = bilinear_resize(plane, decoded.width, decoded.height, tw, th);
        data.extend(resized.into_iter().map(|v| v / 255.0));
    }
    Tensor::from_vec(&[channels, th, tw], data).map_err(|e| DataError::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
