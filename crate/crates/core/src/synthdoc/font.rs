//! Built-in 5x7 bitmap font placed in 8x8 cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CELL_WIDTH: usize = 8;
pub const CELL_HEIGHT: usize = 8;
const GLYPH_COL_OFFSET: usize = 1;

const FONT_5X7: &[(char, [&str; 7])] = &[
    ('a', [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"]),
    ('b', ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."]),
    ('c', [".....", ".....", ".###.", "#....", "#....", "#...#", ".###."]),
    ('d', ["....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"]),
    ('e', [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."]),
    ('f', ["..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."]),
    ('g', [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."]),
    ('h', ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"]),
    ('i', ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."]),
    ('j', ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."]),
    ('k', ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."]),
    ('l', [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('m', [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"]),
    ('n', [".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"]),
    ('o', [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."]),
    ('p', [".....", ".....", "####.", "#...#", "####.", "#....", "#...."]),
    ('q', [".....", ".....", ".##.#", "#..##", ".####", "....#", "....#"]),
    ('r', [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."]),
    ('s', [".....", ".....", ".###.", "#....", ".###.", "....#", "####."]),
    ('t', [".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."]),
    ('u', [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"]),
    ('v', [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('w', [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."]),
    ('x', [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),
    ('y', [".....", ".....", "#...#", "#...#", ".####", "....#", ".###."]),
    ('z', [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"]),
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
];

/// Binary glyph bitmap, `true` = ink.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Glyph {
    pub ink: Vec<bool>,
}

/// Fixed-width glyph set: every character maps to a bitmap of identical size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphAtlas {
    glyph_height: usize,
    glyph_width: usize,
    glyphs: BTreeMap<char, Glyph>,
}

impl GlyphAtlas {
    /// Lowercase `a`-`z` and digits in 8x8 cells.
    pub fn builtin() -> Self {
        let mut glyphs = BTreeMap::new();
        for (ch, rows) in FONT_5X7 {
            let mut ink = vec![false; CELL_HEIGHT * CELL_WIDTH];
            for (r, row) in rows.iter().enumerate() {
                for (c, px) in row.chars().enumerate() {
                    if px == '#' {
                        ink[r * CELL_WIDTH + c + GLYPH_COL_OFFSET] = true;
                    }
                }
            }
            glyphs.insert(*ch, Glyph { ink });
        }
        GlyphAtlas {
            glyph_height: CELL_HEIGHT,
            glyph_width: CELL_WIDTH,
            glyphs,
        }
    }

    pub fn new(glyph_height: usize, glyph_width: usize, glyphs: BTreeMap<char, Glyph>) -> Result<Self> {
        if glyph_height == 0 || glyph_width == 0 {
            return Err(Error::InvalidArgument("glyph dimensions must be positive".into()));
        }
        for (ch, g) in &glyphs {
            if g.ink.len() != glyph_height * glyph_width {
                return Err(Error::InvalidArgument(format!(
                    "glyph {ch:?} has {} pixels, expected {}",
                    g.ink.len(),
                    glyph_height * glyph_width
                )));
            }
        }
        Ok(GlyphAtlas {
            glyph_height,
            glyph_width,
            glyphs,
        })
    }

    pub fn glyph_height(&self) -> usize {
        self.glyph_height
    }

    pub fn glyph_width(&self) -> usize {
        self.glyph_width
    }

    pub fn glyph(&self, ch: char) -> Option<&Glyph> {
        self.glyphs.get(&ch)
    }

    /// Characters in alphabet (code point) order.
    pub fn characters(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, &Glyph)> {
        self.glyphs.iter().map(|(c, g)| (*c, g))
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_lowercase_and_digits() {
        let atlas = GlyphAtlas::builtin();
        assert_eq!(atlas.len(), 36);
        for ch in ('a'..='z').chain('0'..='9') {
            assert!(atlas.glyph(ch).is_some(), "missing {ch}");
        }
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let atlas = GlyphAtlas::builtin();
        let all: Vec<_> = atlas.iter().collect();
        for (i, (a, ga)) in all.iter().enumerate() {
            assert!(ga.ink.iter().any(|&b| b), "{a} has no ink");
            for (b, gb) in &all[i + 1..] {
                assert_ne!(ga.ink, gb.ink, "{a} and {b} share a bitmap");
            }
        }
    }
}
