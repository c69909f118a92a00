//! Pixel kernels behind `apply_op`. All kernels allocate a fresh output and
//! leave the input untouched.

use ndarray::Array4;

fn dims(data: &Array4<f32>) -> (usize, usize, usize, usize) {
    let s = data.shape();
    (s[0], s[1], s[2], s[3])
}

/// Inverse-mapped affine resampling with nearest-neighbor lookup and zero
/// padding. `m` maps output coordinates to source coordinates:
/// `sx = m0*x + m1*y + m2`, `sy = m3*x + m4*y + m5`.
pub(super) fn affine_nearest(data: &Array4<f32>, m: [f64; 6]) -> Array4<f32> {
    let (n, c, h, w) = dims(data);
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let src = data.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            let yf = y as f64;
            let row = base + y * w;
            for x in 0..w {
                let xf = x as f64;
                let sx = (m[0] * xf + m[1] * yf + m[2]).round();
                let sy = (m[3] * xf + m[4] * yf + m[5]).round();
                if sx >= 0.0 && sx < w as f64 && sy >= 0.0 && sy < h as f64 {
                    dst[row + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Multiply every pixel by `factor`, clamped back to `[0, 1]`.
pub(super) fn brightness(data: &Array4<f32>, factor: f64) -> Array4<f32> {
    data.mapv(|p| (p as f64 * factor).clamp(0.0, 1.0) as f32)
}

/// Scale every pixel's distance from its image's mean by `factor`.
pub(super) fn contrast(data: &Array4<f32>, factor: f64) -> Array4<f32> {
    if factor == 1.0 {
        // Exact identity; the mean round trip below would not be bit-exact.
        return data.clone();
    }
    let (n, c, h, w) = dims(data);
    let mut out = data.clone();
    let plane = c * h * w;
    let src = data.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for i in 0..n {
        let img = &src[i * plane..(i + 1) * plane];
        let mean = img.iter().map(|&p| p as f64).sum::<f64>() / plane as f64;
        for (d, &s) in dst[i * plane..(i + 1) * plane].iter_mut().zip(img) {
            *d = (mean + factor * (s as f64 - mean)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Invert every pixel at or above the threshold.
pub(super) fn solarize(data: &Array4<f32>, threshold: f32) -> Array4<f32> {
    data.mapv(|p| if p >= threshold { 1.0 - p } else { p })
}

/// Quantize pixels to `bits` significant bits of their 8-bit value.
/// 8 bits retained is a bit-exact identity.
pub(super) fn posterize(data: &Array4<f32>, bits: u32) -> Array4<f32> {
    if bits >= 8 {
        return data.clone();
    }
    let mask: u8 = !(0xFFu8 >> bits);
    data.mapv(|p| {
        let q = (p * 255.0).round() as u8;
        (q & mask) as f32 / 255.0
    })
}

/// Zero a `side x side` patch centered at `(cx, cy)`, clipped to the image.
pub(super) fn cutout(data: &Array4<f32>, side: i64, cx: i64, cy: i64) -> Array4<f32> {
    let (n, c, h, w) = dims(data);
    let mut out = data.clone();
    if side <= 0 {
        return out;
    }
    let x0 = (cx - side / 2).clamp(0, w as i64) as usize;
    let x1 = (cx - side / 2 + side).clamp(0, w as i64) as usize;
    let y0 = (cy - side / 2).clamp(0, h as i64) as usize;
    let y1 = (cy - side / 2 + side).clamp(0, h as i64) as usize;
    let dst = out.as_slice_mut().expect("standard layout");
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in y0..y1 {
            dst[base + y * w + x0..base + y * w + x1].fill(0.0);
        }
    }
    out
}
