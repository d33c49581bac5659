//! Toy instruction vocabulary shared by the planner and renderer.

use super::scene::{Shape, NUM_COLORS};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const DRAW: usize = 3;
pub const RECOLOR: usize = 4;
pub const ADD: usize = 5;
pub const REMOVE: usize = 6;
pub const REPLACE: usize = 7;
pub const MOVE: usize = 8;
pub const SWAP: usize = 9;
pub const ANIMATE: usize = 10;
pub const REF: usize = 11;
pub const TO: usize = 12;
pub const AT: usize = 13;
/// Object colors `1..NUM_COLORS` map to `COLOR0 + id - 1`.
pub const COLOR0: usize = 14;
pub const SHAPE0: usize = COLOR0 + NUM_COLORS - 1;
pub const DIR0: usize = SHAPE0 + 3;
pub const CELL0: usize = DIR0 + 5;
/// Coarse placement cells per side.
pub const CELLS_PER_SIDE: usize = 4;
/// Instruction of a mined pair: "make a similar clip".
pub const VARY: usize = CELL0 + CELLS_PER_SIDE * CELLS_PER_SIDE;
pub const VOCAB_SIZE: usize = VARY + 1;
const _: () = assert!(VOCAB_SIZE <= 64);

const DIRS: [&str; 5] = ["STILL", "UP", "DOWN", "LEFT", "RIGHT"];
const DIR_VECTORS: [(i32, i32); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];
const COLOR_NAMES: [&str; NUM_COLORS] = ["black", "red", "green", "blue", "yellow", "magenta", "cyan", "white"];

pub fn color(c: u8) -> usize {
    debug_assert!(c >= 1 && (c as usize) < NUM_COLORS);
    COLOR0 + c as usize - 1
}

pub fn color_of(token: usize) -> Option<u8> {
    (COLOR0..SHAPE0).contains(&token).then(|| (token - COLOR0 + 1) as u8)
}

pub fn shape(s: Shape) -> usize {
    SHAPE0 + s as usize
}

pub fn cell(c: usize) -> usize {
    CELL0 + c
}

/// Token for a unit velocity; `None` for anything else.
pub fn direction(v: (i32, i32)) -> Option<usize> {
    DIR_VECTORS.iter().position(|&d| d == v).map(|i| DIR0 + i)
}

pub fn direction_vector(token: usize) -> Option<(i32, i32)> {
    token.checked_sub(DIR0).and_then(|i| DIR_VECTORS.get(i).copied())
}

pub fn unit_directions() -> &'static [(i32, i32)] {
    &DIR_VECTORS
}

/// Human-readable form of a token.
pub fn word(token: usize) -> String {
    const OPS: [&str; 14] = [
        "<pad>", "<s>", "</s>", "DRAW", "RECOLOR", "ADD", "REMOVE", "REPLACE", "MOVE", "SWAP", "ANIMATE", "REF",
        "TO", "AT",
    ];
    if token < COLOR0 {
        return OPS[token].to_string();
    }
    if token < SHAPE0 {
        return COLOR_NAMES[token - COLOR0 + 1].to_string();
    }
    if token < DIR0 {
        return Shape::ALL[token - SHAPE0].name().to_string();
    }
    if token < CELL0 {
        return DIRS[token - DIR0].to_string();
    }
    if token < VARY {
        return format!("c{}", token - CELL0);
    }
    if token == VARY {
        return "VARY".to_string();
    }
    format!("<{token}?>")
}

pub fn render(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}
