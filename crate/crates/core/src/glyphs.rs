//! Bitmap text rendering from the bundled 5x7 glyph atlas. Used by the
//! synthetic corpus generator and for region labels in constructed images.

use std::collections::HashMap;
use std::sync::OnceLock;

use image::Rgb;

use crate::geometry::{BBox, Raster};

const ATLAS: &str = include_str!("../assets/glyphs_5x7.txt");

pub const GLYPH_ROWS: u32 = 7;

#[derive(Debug, Clone)]
pub struct Glyph {
    /// Ink columns after trimming blank columns on either side.
    pub width: u32,
    /// `rows[y][x]` is true where the glyph has ink.
    pub rows: Vec<Vec<bool>>,
}

fn atlas() -> &'static HashMap<char, Glyph> {
    static CELL: OnceLock<HashMap<char, Glyph>> = OnceLock::new();
    CELL.get_or_init(|| parse_atlas(ATLAS))
}

fn parse_atlas(src: &str) -> HashMap<char, Glyph> {
    let mut out = HashMap::new();
    let mut lines = src.lines().filter(|l| !l.starts_with("# "));
    while let Some(head) = lines.next() {
        let Some(ch) = head.strip_prefix("= ").and_then(|s| s.chars().next()) else {
            continue;
        };
        let raw: Vec<Vec<bool>> = (0..GLYPH_ROWS)
            .map(|_| lines.next().unwrap_or("").chars().map(|c| c == '#').collect())
            .collect();
        let cols = raw.iter().map(Vec::len).max().unwrap_or(0);
        let inked = |c: usize| raw.iter().any(|r| r.get(c).copied().unwrap_or(false));
        let first = (0..cols).find(|&c| inked(c)).unwrap_or(0);
        let last = (0..cols).rev().find(|&c| inked(c)).unwrap_or(0);
        let rows = raw
            .iter()
            .map(|r| (first..=last).map(|c| r.get(c).copied().unwrap_or(false)).collect())
            .collect();
        out.insert(
            ch,
            Glyph {
                width: (last - first + 1) as u32,
                rows,
            },
        );
    }
    out
}

pub fn glyph(ch: char) -> Option<&'static Glyph> {
    atlas().get(&ch.to_ascii_uppercase())
}

/// Characters the atlas can draw (space excluded).
pub fn charset() -> impl Iterator<Item = char> {
    let mut v: Vec<char> = atlas().keys().copied().collect();
    v.sort_unstable();
    v.into_iter()
}

/// Pixel advance of a space at the given scale.
pub fn space_advance(scale: u32) -> u32 {
    12 * scale
}

/// Width in pixels of `text` rendered at `scale` without vertical jitter.
pub fn text_width(text: &str, scale: u32) -> u32 {
    let mut w = 0;
    let mut prev_glyph = false;
    for ch in text.chars() {
        if ch == ' ' {
            w += space_advance(scale);
            prev_glyph = false;
            continue;
        }
        if let Some(g) = glyph(ch) {
            if prev_glyph {
                w += scale;
            }
            w += g.width * scale;
            prev_glyph = true;
        }
    }
    w
}

/// Draws `text` with its top-left at `(x, y)`; glyph `i` is shifted
/// vertically by `dy(i)`. Returns the exact ink box, or `None` when nothing
/// was drawn. Pixels falling outside the canvas are dropped.
pub fn draw_text(
    canvas: &mut Raster,
    x: u32,
    y: u32,
    text: &str,
    scale: u32,
    color: Rgb<u8>,
    mut dy: impl FnMut(usize) -> i32,
) -> Option<BBox> {
    let (cw, ch) = canvas.dimensions();
    let mut ink: Option<[u32; 4]> = None;
    let mut pen = x;
    let mut prev_glyph = false;
    for (i, c) in text.chars().enumerate() {
        if c == ' ' {
            pen += space_advance(scale);
            prev_glyph = false;
            continue;
        }
        let Some(g) = glyph(c) else { continue };
        if prev_glyph {
            pen += scale;
        }
        let top = (y as i64 + dy(i) as i64).max(0) as u32;
        for (gy, row) in g.rows.iter().enumerate() {
            for (gx, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                let px = pen + gx as u32 * scale;
                let py = top + gy as u32 * scale;
                for sy in 0..scale {
                    for sx in 0..scale {
                        let (qx, qy) = (px + sx, py + sy);
                        if qx < cw && qy < ch {
                            canvas.put_pixel(qx, qy, color);
                            let e = ink.get_or_insert([qx, qy, qx + 1, qy + 1]);
                            e[0] = e[0].min(qx);
                            e[1] = e[1].min(qy);
                            e[2] = e[2].max(qx + 1);
                            e[3] = e[3].max(qy + 1);
                        }
                    }
                }
            }
        }
        pen += g.width * scale;
        prev_glyph = true;
    }
    ink.map(|[x1, y1, x2, y2]| BBox { x1, y1, x2, y2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atlas_covers_alphanumerics_and_label_punctuation() {
        for c in ('A'..='Z').chain('0'..='9').chain("():,.&/-".chars()) {
            let g = glyph(c).unwrap_or_else(|| panic!("missing glyph {c:?}"));
            assert_eq!(g.rows.len(), GLYPH_ROWS as usize);
            assert!(g.rows.iter().all(|r| r.len() == g.width as usize));
        }
        assert_eq!(glyph('I').unwrap().width, 3);
        assert_eq!(glyph('.').unwrap().width, 1);
        assert_eq!(glyph('W').unwrap().width, 5);
    }

    #[test]
    fn every_trimmed_glyph_has_ink_in_edge_columns() {
        for c in charset() {
            let g = glyph(c).unwrap();
            let col = |x: usize| g.rows.iter().any(|r| r[x]);
            assert!(col(0) && col(g.width as usize - 1), "glyph {c:?}");
        }
    }

    #[test]
    fn drawn_ink_box_matches_width() {
        let mut canvas = Raster::from_pixel(200, 40, Rgb([255, 255, 255]));
        let b = draw_text(&mut canvas, 10, 5, "TEXAS", 2, Rgb([0, 0, 0]), |_| 0).unwrap();
        assert_eq!(b.x1, 10);
        assert_eq!(b.width(), text_width("TEXAS", 2));
        assert_eq!(b.y1, 5);
        assert_eq!(b.height(), 14);
    }
}
