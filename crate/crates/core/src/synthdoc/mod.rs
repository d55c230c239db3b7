//! Deterministic synthetic word-strip datasets with controlled degradations.

mod dataset;
mod degrade;
mod font;

pub use dataset::{
    generate_dataset, load_manifest, parse_manifest, write_manifest, Dataset, DegradationRanges, GeneratorConfig,
    ManifestRecord, Split, SplitCounts, SynthDocument, TextStrip, MANIFEST_FILE,
};
pub use degrade::{degrade, DegradationConfig};
pub use font::{Glyph, GlyphAtlas, CELL_HEIGHT, CELL_WIDTH};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Default blank border around a rendered word, in pixels.
pub const DEFAULT_MARGIN: usize = 2;

/// The shipped word list (lowercase letters and digits, 2 to 8 characters).
pub fn builtin_words() -> Vec<String> {
    include_str!("../../assets/words.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Render `text` black-on-white on the fixed-width glyph grid.
pub fn render_clean(text: &str, atlas: &GlyphAtlas, margin: usize) -> Result<Image> {
    let chars: Vec<char> = text.chars().collect();
    let (gh, gw) = (atlas.glyph_height(), atlas.glyph_width());
    let height = gh + 2 * margin;
    let width = gw * chars.len() + 2 * margin;
    let mut img = Image::filled(height, width, 1.0);
    for (cell, ch) in chars.iter().enumerate() {
        let glyph = atlas
            .glyph(*ch)
            .ok_or_else(|| Error::InvalidArgument(format!("character {ch:?} is not in the glyph atlas")))?;
        for r in 0..gh {
            for c in 0..gw {
                if glyph.ink[r * gw + c] {
                    img.set(margin + r, margin + cell * gw + c, 0.0);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_margin_only() {
        let atlas = GlyphAtlas::builtin();
        let img = render_clean("", &atlas, 3).unwrap();
        assert_eq!(img.width(), 6);
        assert_eq!(img.height(), atlas.glyph_height() + 6);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn repeated_characters_render_identical_cells() {
        let atlas = GlyphAtlas::builtin();
        let m = DEFAULT_MARGIN;
        let img = render_clean("aa", &atlas, m).unwrap();
        assert_eq!(img.width(), 2 * atlas.glyph_width() + 2 * m);
        for r in 0..img.height() {
            for c in 0..atlas.glyph_width() {
                assert_eq!(img.get(r, m + c), img.get(r, m + atlas.glyph_width() + c));
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let atlas = GlyphAtlas::builtin();
        let a = render_clean("receipt42", &atlas, 2).unwrap();
        let b = render_clean("receipt42", &atlas, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn unknown_character_is_named() {
        let atlas = GlyphAtlas::builtin();
        let err = render_clean("aB", &atlas, 2).unwrap_err();
        assert!(err.to_string().contains("'B'"), "{err}");
    }

    #[test]
    fn word_list_fits_atlas() {
        let atlas = GlyphAtlas::builtin();
        let words = builtin_words();
        assert!(words.len() > 500);
        for w in &words {
            assert!(w.chars().all(|c| atlas.glyph(c).is_some()), "{w}");
            assert!((2..=8).contains(&w.len()));
        }
    }
}
