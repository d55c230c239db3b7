use serde::{Deserialize, Serialize};

use crate::imaging::Gray8;
use crate::synthdoc::{GlyphAtlas, DEFAULT_MARGIN};

/// Template-matching recognizer over the known fixed-width glyph grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedEngineConfig {
    /// Pixels darker than this (on a `[0, 1]` scale) count as ink.
    pub binarize_threshold: f64,
    /// Cells whose best Jaccard distance exceeds this yield no character.
    pub reject_distance: f64,
    pub margin: usize,
}

impl Default for SimulatedEngineConfig {
    fn default() -> Self {
        SimulatedEngineConfig {
            binarize_threshold: 0.5,
            reject_distance: 0.4,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl SimulatedEngineConfig {
    pub fn is_valid(&self) -> bool {
        self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0 && self.reject_distance >= 0.0
    }
}

/// Binarize, cut the interior into glyph-width cells (a trailing partial cell
/// is ignored) and emit the nearest template per cell by Jaccard distance
/// between ink sets. Distance ties go to the earlier character; a cell with no
/// ink on either side has distance 1.
pub fn simulated_recognize(cfg: &SimulatedEngineConfig, atlas: &GlyphAtlas, image: &Gray8) -> String {
    let (gh, gw) = (atlas.glyph_height(), atlas.glyph_width());
    if image.height < gh || gw == 0 {
        return String::new();
    }
    let row0 = cfg.margin.min(image.height - gh);
    let col0 = cfg.margin.min(image.width);
    let interior = image.width.saturating_sub(col0 + cfg.margin);
    let cells = interior / gw;
    let cutoff = cfg.binarize_threshold * 255.0;

    let mut out = String::new();
    let mut cell_ink = vec![false; gh * gw];
    for cell in 0..cells {
        for r in 0..gh {
            for c in 0..gw {
                let px = image.pixels[(row0 + r) * image.width + col0 + cell * gw + c];
                cell_ink[r * gw + c] = (px as f64) < cutoff;
            }
        }
        let mut best: Option<(char, f64)> = None;
        for (ch, glyph) in atlas.iter() {
            let (mut inter, mut union) = (0usize, 0usize);
            for (a, b) in cell_ink.iter().zip(&glyph.ink) {
                inter += usize::from(*a && *b);
                union += usize::from(*a || *b);
            }
            let dist = if union == 0 { 1.0 } else { 1.0 - inter as f64 / union as f64 };
            if best.map_or(true, |(_, d)| dist < d) {
                best = Some((ch, dist));
            }
        }
        if let Some((ch, d)) = best {
            if d <= cfg.reject_distance {
                out.push(ch);
            }
        }
    }
    out
}
