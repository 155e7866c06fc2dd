use rayon::prelude::*;

use super::fov::PatchSpec;
use super::slide::SyntheticSlide;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Patches whose pixel variance (values in `[-1, 1]`) is below this are
/// treated as background and dropped.
pub const BACKGROUND_VARIANCE: f64 = 1e-3;

/// Separable resampling weights for one axis: for each output index the
/// first contributing input index and normalised weights. Bilinear with the
/// triangle support widened by the downscale factor, so downsampling
/// averages every covered input pixel.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let filter_scale = scale.max(1.0);
    let support = filter_scale;
    (0..n_out)
        .map(|i| {
            let centre = (i as f64 + 0.5) * scale;
            let lo = ((centre - support).floor().max(0.0)) as usize;
            let hi = ((centre + support).ceil() as usize).min(n_in);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5 - centre) / filter_scale).abs();
                    (1.0 - d).max(0.0)
                })
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (lo, w)
        })
        .collect()
}

/// Resizes a `[c, h, w]` image (or `[n, c, h, w]` batch) spatially.
pub fn resize<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter("resize target must be non-empty".into()));
    }
    match image.rank() {
        3 => {
            let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
            let data = resize_planes(image.data(), c, h, w, out_h, out_w);
            Tensor::new(vec![c, out_h, out_w], data)
        }
        4 => {
            let items: Vec<Tensor<T>> = (0..image.batch_len())
                .map(|i| resize(&image.item_tensor(i), out_h, out_w))
                .collect::<Result<_>>()?;
            if items.is_empty() {
                let s = image.shape();
                return Ok(Tensor::empty_batch(&[s[1], out_h, out_w]));
            }
            Tensor::stack(&items)
        }
        _ => Err(Error::Contract(format!("expected [c, h, w] or [n, c, h, w], got {:?}", image.shape()))),
    }
}

fn resize_planes<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let wx = axis_weights(w, out_w);
    let wy = axis_weights(h, out_h);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut tmp = vec![0.0; h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (x, (lo, ws)) in wx.iter().enumerate() {
                tmp[y * out_w + x] = ws.iter().enumerate().map(|(k, wk)| wk * plane[y * w + lo + k].as_f64()).sum();
            }
        }
        for (lo, ws) in &wy {
            for x in 0..out_w {
                let v: f64 = ws.iter().enumerate().map(|(k, wk)| wk * tmp[(lo + k) * out_w + x]).sum();
                out.push(T::of(v));
            }
        }
    }
    out
}

/// Patches cut from one slide, with the top-left corner of each crop.
#[derive(Debug, Clone)]
pub struct Extraction<T: Scalar = f64> {
    pub patches: Vec<Tensor<T>>,
    pub origins: Vec<(usize, usize)>,
    /// Crop extent in slide pixels.
    pub crop_px: usize,
    /// Grid positions rejected as background.
    pub dropped: usize,
}

/// Crops `spec.fov` squares on a `stride` grid (slide pixels), resizes each
/// to `out_size_px` and maps to `[-1, 1]`. Low-variance crops are dropped.
pub fn extract_patches<T: Scalar>(
    slide: &SyntheticSlide,
    spec: &PatchSpec,
    stride: usize,
    out_size_px: usize,
) -> Result<Extraction<T>> {
    if stride == 0 || out_size_px == 0 {
        return Err(Error::Parameter("stride and output size must be positive".into()));
    }
    if slide.mpp > spec.resolution_mpp() * (1.0 + 1e-12) {
        return Err(Error::Extraction(format!(
            "slide resolution {} mpp is coarser than the requested {} mpp",
            slide.mpp,
            spec.resolution_mpp()
        )));
    }
    let crop = spec.crop_extent(slide.mpp)?;
    if crop > slide.extent {
        return Err(Error::Extraction(format!(
            "field of view {} µm needs {crop} px but the slide is {} px",
            spec.fov_microns(),
            slide.extent
        )));
    }
    let steps = (slide.extent - crop) / stride + 1;
    let origins: Vec<(usize, usize)> = (0..steps)
        .flat_map(|gy| (0..steps).map(move |gx| (gx * stride, gy * stride)))
        .collect();
    let results: Vec<Option<Tensor<T>>> = origins
        .par_iter()
        .map(|&(x0, y0)| {
            let plane = crop * crop;
            let mut chw = vec![0.0f64; 3 * plane];
            for y in 0..crop {
                for x in 0..crop {
                    let rgb = slide.rgb(x0 + x, y0 + y);
                    for c in 0..3 {
                        chw[c * plane + y * crop + x] = rgb[c] as f64 / 127.5 - 1.0;
                    }
                }
            }
            let resized = resize_planes(&chw, 3, crop, crop, out_size_px, out_size_px);
            let n = resized.len() as f64;
            let mean = resized.iter().sum::<f64>() / n;
            let var = resized.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var < BACKGROUND_VARIANCE {
                return None;
            }
            let data = resized.into_iter().map(T::of).collect();
            Some(Tensor::new(vec![3, out_size_px, out_size_px], data).expect("patch"))
        })
        .collect();
    let mut out = Extraction {
        patches: Vec::new(),
        origins: Vec::new(),
        crop_px: crop,
        dropped: 0,
    };
    for (o, r) in origins.into_iter().zip(results) {
        match r {
            Some(p) => {
                out.patches.push(p);
                out.origins.push(o);
            }
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constants() {
        let img: Tensor<f64> = Tensor::full(&[3, 20, 20], 0.3);
        for (h, w) in [(5, 5), (20, 20), (33, 17)] {
            let r = resize(&img, h, w).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn integer_downscale_averages_blocks() {
        let img = Tensor::<f64>::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize(&img, 1, 1).unwrap();
        assert!((r.data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn weights_normalised() {
        for (a, b) in [(256, 32), (32, 48), (7, 3)] {
            for (_, w) in axis_weights(a, b) {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
