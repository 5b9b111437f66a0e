//! Heatmap rendering for visual inspection: the base image dimmed, the
//! saliency map blended into the red channel, and box outlines in green.

use crate::error::Result;
use crate::image::Image;
use crate::reward::BoundingBox;
use crate::saliency::SaliencyMap;

const DIM: f64 = 0.35;
const HEAT: f64 = 0.65;

/// Pure function of its inputs; identical inputs produce byte-identical
/// files. An all-zero map (with no boxes) leaves just the dimmed image.
pub fn render_heatmap(map: &SaliencyMap, image: &Image, boxes: &[BoundingBox]) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    let patch_px = w / map.grid_cols;
    let max = map.values.iter().cloned().fold(0.0f64, f64::max);

    let mut out = Image::blank(w, h);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = image.pixel(x, y);
            let heat = if max > 0.0 { map.cell(y / patch_px, x / patch_px) / max } else { 0.0 };
            out.set_pixel(
                x,
                y,
                [
                    (r * DIM + heat * HEAT).clamp(0.0, 1.0),
                    g * DIM,
                    b * DIM,
                ],
            );
        }
    }
    for bx in boxes {
        for x in bx.x0..bx.x1.min(w) {
            for &y in &[bx.y0, bx.y1 - 1] {
                if y < h {
                    let [r, _, b] = out.pixel(x, y);
                    out.set_pixel(x, y, [r, 1.0, b]);
                }
            }
        }
        for y in bx.y0..bx.y1.min(h) {
            for &x in &[bx.x0, bx.x1 - 1] {
                if x < w {
                    let [r, _, b] = out.pixel(x, y);
                    out.set_pixel(x, y, [r, 1.0, b]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_image() -> Image {
        let mut img = Image::blank(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set_pixel(x, y, [0.4, 0.6, 0.8]);
            }
        }
        img
    }

    #[test]
    fn zero_map_yields_dimmed_base() {
        let img = base_image();
        let map = SaliencyMap::zeros(2, 2);
        let out = render_heatmap(&map, &img, &[]).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let [r, g, b] = out.pixel(x, y);
                assert!((r - 0.4 * DIM).abs() < 1e-12);
                assert!((g - 0.6 * DIM).abs() < 1e-12);
                assert!((b - 0.8 * DIM).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rendering_is_byte_deterministic() {
        let img = base_image();
        let map = SaliencyMap::new(2, 2, vec![0.1, 0.9, 0.0, 0.4]).unwrap();
        let boxes = [BoundingBox::new(0, 0, 4, 4)];
        let mut a = Vec::new();
        let mut b = Vec::new();
        render_heatmap(&map, &img, &boxes).unwrap().write_ppm(&mut a).unwrap();
        render_heatmap(&map, &img, &boxes).unwrap().write_ppm(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn peak_cell_is_hottest() {
        let img = base_image();
        let map = SaliencyMap::new(2, 2, vec![0.1, 0.9, 0.0, 0.4]).unwrap();
        let mut buf = Vec::new();
        render_heatmap(&map, &img, &[]).unwrap().write_ppm(&mut buf).unwrap();
        let re_read = Image::read_ppm(&mut buf.as_slice()).unwrap();
        let mut best = (0usize, 0usize, -1.0f64);
        for y in 0..8 {
            for x in 0..8 {
                let r = re_read.pixel(x, y)[0];
                if r > best.2 {
                    best = (x, y, r);
                }
            }
        }
        // Peak cell is (0, 1) -> pixels x in 4..8, y in 0..4.
        assert!(best.0 >= 4 && best.1 < 4, "hottest pixel at ({}, {})", best.0, best.1);
    }
}
