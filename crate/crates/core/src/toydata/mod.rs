//! Procedural toy videos, edit tasks with programmatic oracles, and
//! similarity-band pair mining.

mod edits;
mod pairs;
mod scene;
pub mod vocab;

pub use edits::{
    cell_position, gen_edit_case, gen_edit_case_family, palette_swap, CaseConfig, EditCase, EditFamily, Oracle,
    OracleScore, EDIT_THRESHOLD, KEPT_THRESHOLD,
};
pub use pairs::{mine_pairs, similarity, PairRecord, MAX_PAIRS_PER_ORIGIN, SIMILARITY_BAND};
pub use scene::{
    anchor_cell, cell_anchor, gen_scene, gen_scene_with, place_object, Placement, Shape, ToyObject, ToyScene, BACKGROUND,
    NUM_COLORS,
};

/// Channels of a rendered pixel: RGB plus occupancy.
pub const CHANNELS: usize = 4;

/// RGB + occupancy for each palette entry; entry 0 is the background.
pub const PALETTE: [[f64; CHANNELS]; NUM_COLORS] = [
    [0.0, 0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0, 1.0],
    [0.0, 0.0, 1.0, 1.0],
    [1.0, 1.0, 0.0, 1.0],
    [1.0, 0.0, 1.0, 1.0],
    [0.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0],
];

/// Nearest palette entry to a pixel feature vector.
pub fn nearest_color(px: &[f64]) -> u8 {
    let mut best = (f64::INFINITY, 0u8);
    for (i, p) in PALETTE.iter().enumerate() {
        let d: f64 = p.iter().zip(px).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i as u8);
        }
    }
    best.1
}

/// Pixel features `[T*H*W, CHANNELS]` for a grid of color ids.
pub fn color_features(colors: &[u8]) -> Vec<f64> {
    colors.iter().flat_map(|&c| PALETTE[c as usize]).collect()
}

/// Color ids back from pixel features.
pub fn features_to_colors(features: &[f64]) -> Vec<u8> {
    features.chunks(CHANNELS).map(nearest_color).collect()
}
