use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::sequence::Grid3;

use super::vocab::CELLS_PER_SIDE;

/// Palette size including the background entry.
pub const NUM_COLORS: usize = 8;
pub const BACKGROUND: u8 = 0;

const MAX_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Bar => "bar",
        }
    }

    /// Cell offsets relative to the anchor (top-left of the bounding box).
    pub fn offsets(self) -> &'static [(i32, i32)] {
        match self {
            Shape::Square => &[(0, 0), (0, 1), (1, 0), (1, 1)],
            Shape::Circle => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
            Shape::Bar => &[(0, 0), (0, 1), (0, 2)],
        }
    }

    pub fn extent(self) -> (i32, i32) {
        match self {
            Shape::Square => (2, 2),
            Shape::Circle => (3, 3),
            Shape::Bar => (1, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyObject {
    pub shape: Shape,
    pub color: u8,
    /// Anchor `(row, col)` at frame 0.
    pub start: (i32, i32),
    /// Anchor displacement per frame.
    pub velocity: (i32, i32),
}

impl ToyObject {
    pub fn anchor(&self, frame: usize) -> (i32, i32) {
        let f = frame as i32;
        (self.start.0 + self.velocity.0 * f, self.start.1 + self.velocity.1 * f)
    }

    pub fn cells(&self, frame: usize) -> impl Iterator<Item = (i32, i32)> + '_ {
        let (r, c) = self.anchor(frame);
        self.shape.offsets().iter().map(move |&(dr, dc)| (r + dr, c + dc))
    }

    pub fn in_bounds(&self, grid: Grid3) -> bool {
        (0..grid.t).all(|f| {
            self.cells(f)
                .all(|(r, c)| r >= 0 && c >= 0 && (r as usize) < grid.h && (c as usize) < grid.w)
        })
    }
}

/// Where new objects may be anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Any in-bounds cell, any unit velocity.
    Free,
    /// Anchors on the coarse placement lattice, any unit velocity.
    Coarse,
    /// Anchors on the coarse lattice, no motion.
    CoarseStatic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyScene {
    pub grid: Grid3,
    pub background: u8,
    pub objects: Vec<ToyObject>,
}

impl ToyScene {
    pub fn empty(grid: Grid3) -> Self {
        Self {
            grid,
            background: BACKGROUND,
            objects: Vec::new(),
        }
    }

    /// Color ids in `(t, h, w)` row-major order.
    pub fn frames(&self) -> Vec<u8> {
        let g = self.grid;
        let mut out = vec![self.background; g.count()];
        for o in &self.objects {
            for f in 0..g.t {
                for (r, c) in o.cells(f) {
                    if r >= 0 && c >= 0 && (r as usize) < g.h && (c as usize) < g.w {
                        out[(f * g.h + r as usize) * g.w + c as usize] = o.color;
                    }
                }
            }
        }
        out
    }

    /// First frame as a single-frame scene with motion removed.
    pub fn first_frame(&self) -> ToyScene {
        ToyScene {
            grid: Grid3::new(1, self.grid.h, self.grid.w),
            background: self.background,
            objects: self
                .objects
                .iter()
                .map(|o| ToyObject {
                    velocity: (0, 0),
                    ..*o
                })
                .collect(),
        }
    }

    /// Same content repeated over `t` frames with motion removed.
    pub fn held(&self, t: usize) -> ToyScene {
        let mut s = self.first_frame();
        s.grid.t = t;
        s
    }

    pub fn find(&self, color: u8) -> Option<usize> {
        self.objects.iter().position(|o| o.color == color)
    }

    pub fn free_colors(&self) -> Vec<u8> {
        (1..NUM_COLORS as u8)
            .filter(|c| self.find(*c).is_none())
            .collect()
    }

    /// Checks bounds, pairwise disjointness per frame and color uniqueness.
    pub fn validate(&self) -> Result<()> {
        let g = self.grid;
        let mut seen = [false; NUM_COLORS];
        for o in &self.objects {
            if o.color == self.background || o.color as usize >= NUM_COLORS {
                return Err(Error::Generation(format!("bad object color {}", o.color)));
            }
            if std::mem::replace(&mut seen[o.color as usize], true) {
                return Err(Error::Generation(format!("duplicate color {}", o.color)));
            }
            if !o.in_bounds(g) {
                return Err(Error::Generation(format!("object {o:?} leaves the grid")));
            }
        }
        for f in 0..g.t {
            let mut occ = vec![false; g.h * g.w];
            for o in &self.objects {
                for (r, c) in o.cells(f) {
                    let i = r as usize * g.w + c as usize;
                    if std::mem::replace(&mut occ[i], true) {
                        return Err(Error::Generation("objects overlap".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether `obj` can join the scene without breaking [`Self::validate`].
    pub fn accepts(&self, obj: &ToyObject) -> bool {
        let mut s = self.clone();
        s.objects.push(*obj);
        s.validate().is_ok()
    }
}

/// Anchor of coarse cell `cell` on `grid`.
pub fn cell_anchor(grid: Grid3, cell: usize) -> (i32, i32) {
    let (row, col) = (cell / CELLS_PER_SIDE, cell % CELLS_PER_SIDE);
    ((row * grid.h / CELLS_PER_SIDE) as i32, (col * grid.w / CELLS_PER_SIDE) as i32)
}

/// Coarse cell whose anchor equals `anchor`, if any.
pub fn anchor_cell(grid: Grid3, anchor: (i32, i32)) -> Option<usize> {
    (0..CELLS_PER_SIDE * CELLS_PER_SIDE).find(|&c| cell_anchor(grid, c) == anchor)
}

/// Random object with the given color that fits in `scene`.
pub fn place_object(rng: &mut Rng, scene: &ToyScene, color: u8, shape: Option<Shape>, placement: Placement) -> Option<ToyObject> {
    let g = scene.grid;
    let dirs = super::vocab::unit_directions();
    for _ in 0..MAX_TRIES {
        let shape = shape.unwrap_or_else(|| Shape::ALL[rng.below(3)]);
        let start = match placement {
            Placement::Free => (rng.below(g.h) as i32, rng.below(g.w) as i32),
            Placement::Coarse | Placement::CoarseStatic => {
                cell_anchor(g, rng.below(CELLS_PER_SIDE * CELLS_PER_SIDE))
            }
        };
        let velocity = match placement {
            Placement::CoarseStatic => (0, 0),
            _ if g.t == 1 => (0, 0),
            _ => dirs[rng.below(dirs.len())],
        };
        let obj = ToyObject {
            shape,
            color,
            start,
            velocity,
        };
        if scene.accepts(&obj) {
            return Some(obj);
        }
    }
    None
}

fn pick_colors(rng: &mut Rng, n: usize) -> Vec<u8> {
    let mut colors: Vec<u8> = (1..NUM_COLORS as u8).collect();
    rng.shuffle(&mut colors);
    colors.truncate(n);
    colors
}

/// Scene with `n_objects` non-overlapping objects of distinct colors.
pub fn gen_scene(rng: &mut Rng, grid: Grid3, n_objects: usize) -> Result<ToyScene> {
    gen_scene_with(rng, grid, n_objects, Placement::Free)
}

pub fn gen_scene_with(rng: &mut Rng, grid: Grid3, n_objects: usize, placement: Placement) -> Result<ToyScene> {
    if grid.count() == 0 {
        return Err(Error::dim("scene grid", &[grid.t, grid.h, grid.w], &[1, 1, 1]));
    }
    if n_objects >= NUM_COLORS {
        return Err(Error::Generation(format!(
            "{n_objects} objects need more than {} distinct colors",
            NUM_COLORS - 1
        )));
    }
    for _ in 0..MAX_TRIES {
        let mut scene = ToyScene::empty(grid);
        let mut ok = true;
        for color in pick_colors(rng, n_objects) {
            match place_object(rng, &scene, color, None, placement) {
                Some(o) => scene.objects.push(o),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "could not fit {n_objects} objects in a {}x{}x{} grid",
        grid.t, grid.h, grid.w
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: Grid3 = Grid3::new(2, 8, 8);

    #[test]
    fn empty_scene_is_background() {
        let mut rng = Rng::new(0);
        let s = gen_scene(&mut rng, G, 0).unwrap();
        assert!(s.frames().iter().all(|&c| c == BACKGROUND));
    }

    #[test]
    fn deterministic_and_valid() {
        let a = gen_scene(&mut Rng::new(7), G, 3).unwrap();
        let b = gen_scene(&mut Rng::new(7), G, 3).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(8);
        for i in 0..1000 {
            let s = gen_scene(&mut rng, G, i % 5).unwrap();
            s.validate().unwrap();
            assert_eq!(s.objects.len(), i % 5);
        }
    }

    #[test]
    fn too_crowded_is_an_error() {
        let mut rng = Rng::new(1);
        assert!(matches!(
            gen_scene(&mut rng, Grid3::new(1, 2, 2), 3),
            Err(Error::Generation(_))
        ));
        assert!(gen_scene(&mut rng, G, 8).is_err());
    }

    #[test]
    fn coarse_cells_round_trip() {
        for c in 0..16 {
            assert_eq!(anchor_cell(G, cell_anchor(G, c)), Some(c));
        }
        assert_eq!(cell_anchor(G, 5), (2, 2));
    }
}
