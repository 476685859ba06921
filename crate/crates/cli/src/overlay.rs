//! Netpbm images: grayscale probability maps and colour mask overlays.

use std::io::{self, Write};

pub const TRUTH_RGB: [u8; 3] = [0, 255, 0];
pub const PREDICTED_RGB: [u8; 3] = [255, 0, 0];
pub const BOTH_RGB: [u8; 3] = [255, 255, 0];

/// Binary PGM (P5), one byte per pixel.
pub fn write_pgm(mut w: impl Write, width: usize, height: usize, gray: &[u8]) -> io::Result<()> {
    assert_eq!(gray.len(), width * height);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)
}

/// Binary PPM (P6), three bytes per pixel.
pub fn write_ppm(mut w: impl Write, width: usize, height: usize, rgb: &[u8]) -> io::Result<()> {
    assert_eq!(rgb.len(), 3 * width * height);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)
}

pub fn to_gray(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Mask pixels with at least one 4-neighbour outside the mask (image
/// borders count as outside).
pub fn contour(mask: &[u8], height: usize, width: usize) -> Vec<bool> {
    let inside = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < height
            && (c as usize) < width
            && mask[r as usize * width + c as usize] != 0
    };
    let mut out = vec![false; height * width];
    for r in 0..height as isize {
        for c in 0..width as isize {
            if inside(r, c) {
                out[r as usize * width + c as usize] = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dr, dc)| !inside(r + dr, c + dc));
            }
        }
    }
    out
}

/// Grayscale background with truth contours in green, predicted contours
/// in red and coinciding contour pixels in yellow.
pub fn overlay(background: &[f32], truth: &[u8], predicted: &[u8], height: usize, width: usize) -> Vec<u8> {
    let t = contour(truth, height, width);
    let p = contour(predicted, height, width);
    let gray = to_gray(background);
    let mut rgb = Vec::with_capacity(3 * height * width);
    for i in 0..height * width {
        let px = match (t[i], p[i]) {
            (true, true) => BOTH_RGB,
            (true, false) => TRUTH_RGB,
            (false, true) => PREDICTED_RGB,
            (false, false) => [gray[i]; 3],
        };
        rgb.extend_from_slice(&px);
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_of_a_square() {
        let mut mask = vec![0u8; 25];
        for r in 1..4 {
            for c in 1..4 {
                mask[r * 5 + c] = 1;
            }
        }
        let edge = contour(&mask, 5, 5);
        assert_eq!(edge.iter().filter(|&&e| e).count(), 8);
        assert!(!edge[2 * 5 + 2]);
    }

    #[test]
    fn headers() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 2, 1, &[0, 255]).unwrap();
        assert_eq!(buf, b"P5\n2 1\n255\n\x00\xff");
        let mut buf = Vec::new();
        write_ppm(&mut buf, 1, 1, &[1, 2, 3]).unwrap();
        assert_eq!(buf, b"P6\n1 1\n255\n\x01\x02\x03");
    }
}
