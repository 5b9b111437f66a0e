//! The closed synthetic vocabulary: colors, shapes, counts, grid
//! coordinates, and question-template words, after the reserved ids.

use crate::model::special;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "white"];
pub const SHAPES: [&str; 5] = ["square", "circle", "triangle", "cross", "diamond"];
pub const COUNTS: [&str; 5] = ["zero", "one", "two", "three", "four"];
pub const GRID_COORDS: usize = 6;
pub const TEMPLATE: [&str; 16] = [
    "what", "color", "shape", "count", "of", "the", "at", "is", "in", "look", "row", "top",
    "bottom", "left", "right", "?",
];

pub const COLOR_BASE: usize = special::FIRST_WORD;
pub const SHAPE_BASE: usize = COLOR_BASE + COLORS.len();
pub const COUNT_BASE: usize = SHAPE_BASE + SHAPES.len();
pub const ROW_BASE: usize = COUNT_BASE + COUNTS.len();
pub const COL_BASE: usize = ROW_BASE + GRID_COORDS;
pub const TEMPLATE_BASE: usize = COL_BASE + GRID_COORDS;

pub fn color_token(color: usize) -> usize {
    COLOR_BASE + color
}

pub fn shape_token(shape: usize) -> usize {
    SHAPE_BASE + shape
}

pub fn count_token(count: usize) -> usize {
    COUNT_BASE + count
}

pub fn row_token(row: usize) -> usize {
    ROW_BASE + row
}

pub fn col_token(col: usize) -> usize {
    COL_BASE + col
}

pub fn template_token(word: &str) -> usize {
    TEMPLATE_BASE + TEMPLATE.iter().position(|w| *w == word).expect("unknown template word")
}

/// RGB triples on the exact 1/255 grid, indexed like [`COLORS`].
pub fn color_rgb(color: usize) -> [f64; 3] {
    let bytes: [[u8; 3]; 8] = [
        [255, 0, 0],
        [0, 255, 0],
        [0, 0, 255],
        [255, 255, 0],
        [255, 0, 255],
        [255, 128, 0],
        [0, 255, 255],
        [255, 255, 255],
    ];
    let [r, g, b] = bytes[color];
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

/// Which pixels of a `patch_px × patch_px` block a shape lights up.
pub fn shape_mask(shape: usize, patch_px: usize) -> Vec<bool> {
    let p = patch_px;
    let c = (p as f64 - 1.0) / 2.0;
    let r = p as f64 / 2.0;
    let mut mask = vec![false; p * p];
    for y in 0..p {
        for x in 0..p {
            let (fx, fy) = (x as f64, y as f64);
            mask[y * p + x] = match shape {
                0 => true,                                                   // square: filled
                1 => (fx - c).powi(2) + (fy - c).powi(2) <= r * r,           // circle: disc
                2 => x <= y,                                                 // triangle: lower-left
                3 => x == y || x + y == p - 1,                              // cross: diagonals
                4 => {
                    let d = (fx - c).abs() + (fy - c).abs();
                    d > r - 1.0 && d <= r                                    // diamond: ring
                }
                _ => panic!("unknown shape index {}", shape),
            };
        }
    }
    mask
}

/// Full id → name listing for the standard vocabulary.
pub fn names(vocab_size: usize) -> Vec<String> {
    let mut out = vec!["<img>".to_string(), "<think>".into(), "</think>".into(), "<eos>".into()];
    for w in COLORS.iter().chain(&SHAPES).chain(&COUNTS) {
        out.push((*w).to_string());
    }
    for r in 0..GRID_COORDS {
        out.push(format!("r{}", r));
    }
    for c in 0..GRID_COORDS {
        out.push(format!("c{}", c));
    }
    for w in &TEMPLATE {
        out.push((*w).to_string());
    }
    while out.len() < vocab_size {
        out.push(format!("tok{}", out.len()));
    }
    out.truncate(vocab_size);
    out
}

pub fn decode(tokens: &[usize], names: &[String]) -> String {
    tokens
        .iter()
        .map(|t| names.get(*t).map(|s| s.as_str()).unwrap_or("<?>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits_in_64_ids() {
        let n = names(64);
        assert_eq!(n.len(), 64);
        assert!(TEMPLATE_BASE + TEMPLATE.len() <= 64);
        assert_eq!(n[COLOR_BASE], "red");
        assert_eq!(n[SHAPE_BASE], "square");
        assert_eq!(n[template_token("look")], "look");
        assert_eq!(n[row_token(2)], "r2");
        assert_eq!(n[col_token(5)], "c5");
    }

    #[test]
    fn shape_masks_are_distinct_and_nonempty() {
        let masks: Vec<Vec<bool>> = (0..SHAPES.len()).map(|s| shape_mask(s, 4)).collect();
        for (i, m) in masks.iter().enumerate() {
            assert!(m.iter().any(|b| *b), "shape {} is empty", i);
            for other in masks.iter().skip(i + 1) {
                assert_ne!(m, other);
            }
        }
    }

    #[test]
    fn colors_round_trip_through_bytes() {
        for c in 0..COLORS.len() {
            for v in color_rgb(c) {
                let byte = (v * 255.0).round();
                assert_eq!(byte / 255.0, v);
            }
        }
    }
}
