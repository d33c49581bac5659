use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::schedules::TaskKind;
use crate::sequence::Grid3;

use super::scene::{anchor_cell, cell_anchor, gen_scene_with, place_object, Placement, Shape, ToyObject, ToyScene, NUM_COLORS};
use super::vocab;

const MAX_TRIES: usize = 100;

/// Minimum agreement on edited cells for an edit to count as done.
pub const EDIT_THRESHOLD: f64 = 0.8;
/// Minimum agreement on cells of objects the edit must leave alone.
pub const KEPT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditFamily {
    Recolor,
    Add,
    Remove,
    ReplaceShape,
    Move,
    PaletteSwap,
    Draw,
    Animate,
    ReferenceAdd,
}

impl EditFamily {
    /// Families available to the source-editing tasks.
    pub const EDITS: [EditFamily; 6] = [
        EditFamily::Recolor,
        EditFamily::Add,
        EditFamily::Remove,
        EditFamily::ReplaceShape,
        EditFamily::Move,
        EditFamily::PaletteSwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditFamily::Recolor => "recolor",
            EditFamily::Add => "add",
            EditFamily::Remove => "remove",
            EditFamily::ReplaceShape => "replace_shape",
            EditFamily::Move => "move",
            EditFamily::PaletteSwap => "palette_swap",
            EditFamily::Draw => "draw",
            EditFamily::Animate => "animate",
            EditFamily::ReferenceAdd => "reference_add",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::EDITS
            .iter()
            .chain(&[EditFamily::Draw, EditFamily::Animate, EditFamily::ReferenceAdd])
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown edit family `{s}`")))
    }

    /// Families that `task` can be generated with.
    pub fn for_task(task: TaskKind) -> &'static [EditFamily] {
        match task {
            TaskKind::T2I | TaskKind::T2V => &[EditFamily::Draw],
            TaskKind::I2V => &[EditFamily::Animate],
            TaskKind::IV2V => &[EditFamily::ReferenceAdd],
            TaskKind::I2I | TaskKind::V2V => &Self::EDITS,
        }
    }
}

/// Generator settings shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseConfig {
    /// Video grid; image tasks use one frame of it.
    pub grid: Grid3,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self {
            grid: Grid3::new(2, 8, 8),
            min_objects: 1,
            max_objects: 3,
        }
    }
}

impl CaseConfig {
    pub fn grid_for(&self, task: TaskKind) -> Grid3 {
        if task.is_image() {
            Grid3::new(1, self.grid.h, self.grid.w)
        } else {
            self.grid
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub task: TaskKind,
    pub family: EditFamily,
    pub instruction: Vec<usize>,
    /// Source video or image; absent for generation tasks.
    pub source: Option<ToyScene>,
    /// Single reference frame (image-to-video and reference-guided edits).
    pub reference: Option<ToyScene>,
    pub target: ToyScene,
}

impl EditCase {
    pub fn oracle(&self) -> Oracle {
        let baseline = match (&self.source, &self.reference) {
            (Some(s), _) => s.frames(),
            (None, Some(r)) => r.held(self.target.grid.t).frames(),
            (None, None) => ToyScene::empty(self.target.grid).frames(),
        };
        Oracle {
            grid: self.target.grid,
            background: self.target.background,
            baseline,
            expected: self.target.frames(),
        }
    }

    pub fn describe(&self) -> String {
        format!("{} {}: {}", self.task, self.family.name(), vocab::render(&self.instruction))
    }
}

/// Cell-level verdict on a candidate output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScore {
    /// Agreement with the expected output on cells the edit changes.
    pub edit_agreement: f64,
    /// Agreement on cells of objects the edit keeps.
    pub kept_agreement: f64,
    /// Agreement with the unedited input on every cell the edit keeps.
    pub untouched_agreement: f64,
    pub passed: bool,
}

/// Programmatic checker built from the unedited input and the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub grid: Grid3,
    pub background: u8,
    pub baseline: Vec<u8>,
    pub expected: Vec<u8>,
}

impl Oracle {
    pub fn edited_cells(&self) -> usize {
        self.baseline.iter().zip(&self.expected).filter(|(a, b)| a != b).count()
    }

    pub fn score(&self, candidate: &[u8]) -> Result<OracleScore> {
        if candidate.len() != self.expected.len() {
            return Err(Error::dim("oracle", &[candidate.len()], &[self.expected.len()]));
        }
        let (mut edit, mut edit_n, mut kept, mut kept_n, mut same, mut same_n) = (0, 0, 0, 0, 0, 0);
        for ((&b, &e), &c) in self.baseline.iter().zip(&self.expected).zip(candidate) {
            if b != e {
                edit_n += 1;
                edit += (c == e) as usize;
            } else {
                same_n += 1;
                same += (c == b) as usize;
                if e != self.background {
                    kept_n += 1;
                    kept += (c == e) as usize;
                }
            }
        }
        let frac = |k: usize, n: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
        let (edit_agreement, kept_agreement) = (frac(edit, edit_n), frac(kept, kept_n));
        Ok(OracleScore {
            edit_agreement,
            kept_agreement,
            untouched_agreement: frac(same, same_n),
            passed: edit_n > 0 && edit_agreement >= EDIT_THRESHOLD && kept_agreement >= KEPT_THRESHOLD,
        })
    }
}

fn object_words(o: &ToyObject) -> [usize; 2] {
    [vocab::color(o.color), vocab::shape(o.shape)]
}

fn sentence(body: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(body.len() + 2);
    v.push(vocab::BOS);
    v.extend_from_slice(body);
    v.push(vocab::EOS);
    v
}

fn n_objects(rng: &mut Rng, cfg: &CaseConfig, min: usize) -> usize {
    let lo = cfg.min_objects.max(min);
    let hi = cfg.max_objects.max(lo);
    lo + rng.below(hi - lo + 1)
}

/// Random case for `task` with a family drawn from [`EditFamily::for_task`].
pub fn gen_edit_case(rng: &mut Rng, task: TaskKind) -> Result<EditCase> {
    let families = EditFamily::for_task(task);
    let family = families[rng.below(families.len())];
    gen_edit_case_family(rng, &CaseConfig::default(), task, family)
}

pub fn gen_edit_case_family(rng: &mut Rng, cfg: &CaseConfig, task: TaskKind, family: EditFamily) -> Result<EditCase> {
    if !EditFamily::for_task(task).contains(&family) {
        return Err(Error::Config(format!("{task} cases cannot use the {} family", family.name())));
    }
    for _ in 0..MAX_TRIES {
        if let Some(case) = try_case(rng, cfg, task, family)? {
            debug_assert!(case.target.validate().is_ok());
            return Ok(case);
        }
    }
    Err(Error::Generation(format!("no valid {} case for {task}", family.name())))
}

fn try_case(rng: &mut Rng, cfg: &CaseConfig, task: TaskKind, family: EditFamily) -> Result<Option<EditCase>> {
    let grid = cfg.grid_for(task);
    let case = |instruction, source, reference, target| EditCase {
        task,
        family,
        instruction,
        source,
        reference,
        target,
    };
    match family {
        EditFamily::Draw => {
            let n = n_objects(rng, cfg, 1);
            let target = gen_scene_with(rng, grid, n, Placement::Coarse)?;
            let mut body = vec![];
            for o in &target.objects {
                body.push(vocab::DRAW);
                body.extend(object_words(o));
                body.extend([vocab::AT, vocab::cell(anchor_cell(grid, o.start).expect("coarse"))]);
                body.push(vocab::direction(o.velocity).expect("unit velocity"));
            }
            Ok(Some(case(sentence(&body), None, None, target)))
        }
        EditFamily::Animate => {
            let n = n_objects(rng, cfg, 1);
            let target = gen_scene_with(rng, grid, n, Placement::Free)?;
            if target.objects.iter().all(|o| o.velocity == (0, 0)) {
                return Ok(None);
            }
            let mut body = vec![vocab::ANIMATE];
            for o in &target.objects {
                body.extend(object_words(o));
                body.push(vocab::direction(o.velocity).expect("unit velocity"));
            }
            let reference = target.first_frame();
            Ok(Some(case(sentence(&body), None, Some(reference), target)))
        }
        EditFamily::ReferenceAdd => {
            let n = n_objects(rng, cfg, 0).min(NUM_COLORS - 2);
            let source = gen_scene_with(rng, grid, n, Placement::Free)?;
            let free = source.free_colors();
            let color = free[rng.below(free.len())];
            let Some(obj) = place_object(rng, &source, color, None, Placement::CoarseStatic) else {
                return Ok(None);
            };
            let ref_grid = Grid3::new(1, grid.h, grid.w);
            let ref_scene = ToyScene::empty(ref_grid);
            let Some(shown) = place_object(rng, &ref_scene, color, Some(obj.shape), Placement::Free) else {
                return Ok(None);
            };
            let reference = ToyScene {
                objects: vec![shown],
                ..ref_scene
            };
            let mut target = source.clone();
            target.objects.push(obj);
            let cell = anchor_cell(grid, obj.start).expect("coarse");
            let body = [vocab::ADD, vocab::REF, vocab::AT, vocab::cell(cell)];
            Ok(Some(case(sentence(&body), Some(source), Some(reference), target)))
        }
        edit => {
            let min = if edit == EditFamily::Add { 0 } else { 1 };
            let n = n_objects(rng, cfg, min);
            let source = gen_scene_with(rng, grid, n, Placement::Free)?;
            let Some((body, target)) = apply_edit(rng, &source, edit) else {
                return Ok(None);
            };
            if target.validate().is_err() || target.frames() == source.frames() {
                return Ok(None);
            }
            Ok(Some(case(sentence(&body), Some(source), None, target)))
        }
    }
}

fn apply_edit(rng: &mut Rng, source: &ToyScene, family: EditFamily) -> Option<(Vec<usize>, ToyScene)> {
    let mut target = source.clone();
    let pick = |rng: &mut Rng| (!source.objects.is_empty()).then(|| rng.below(source.objects.len()));
    match family {
        EditFamily::Recolor => {
            let i = pick(rng)?;
            let free = source.free_colors();
            let to = *free.get(rng.below(free.len().max(1)))?;
            let o = source.objects[i];
            target.objects[i].color = to;
            let mut body = vec![vocab::RECOLOR];
            body.extend(object_words(&o));
            body.extend([vocab::TO, vocab::color(to)]);
            Some((body, target))
        }
        EditFamily::Add => {
            let free = source.free_colors();
            let color = *free.get(rng.below(free.len().max(1)))?;
            let obj = place_object(rng, source, color, None, Placement::CoarseStatic)?;
            target.objects.push(obj);
            let mut body = vec![vocab::ADD];
            body.extend(object_words(&obj));
            body.extend([vocab::AT, vocab::cell(anchor_cell(source.grid, obj.start)?)]);
            Some((body, target))
        }
        EditFamily::Remove => {
            let i = pick(rng)?;
            let o = target.objects.remove(i);
            let mut body = vec![vocab::REMOVE];
            body.extend(object_words(&o));
            Some((body, target))
        }
        EditFamily::ReplaceShape => {
            let i = pick(rng)?;
            let o = source.objects[i];
            let others: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != o.shape).collect();
            let to = others[rng.below(others.len())];
            target.objects[i].shape = to;
            let mut body = vec![vocab::REPLACE];
            body.extend(object_words(&o));
            body.extend([vocab::TO, vocab::shape(to)]);
            Some((body, target))
        }
        EditFamily::Move => {
            let i = pick(rng)?;
            let o = source.objects[i];
            let dirs = &vocab::unit_directions()[1..];
            let d = dirs[rng.below(dirs.len())];
            target.objects[i].start = (o.start.0 + 2 * d.0, o.start.1 + 2 * d.1);
            let mut body = vec![vocab::MOVE];
            body.extend(object_words(&o));
            body.push(vocab::direction(d)?);
            Some((body, target))
        }
        EditFamily::PaletteSwap => {
            if source.objects.is_empty() {
                return None;
            }
            for o in &mut target.objects {
                o.color = palette_swap(o.color);
            }
            Some((vec![vocab::SWAP], target))
        }
        EditFamily::Draw | EditFamily::Animate | EditFamily::ReferenceAdd => None,
    }
}

/// The fixed color permutation used by the style-swap edit.
pub fn palette_swap(c: u8) -> u8 {
    let k = (NUM_COLORS - 1) as u8;
    (c % k) + 1
}

/// Re-anchors a coarse cell token to grid coordinates (for instruction parsing).
pub fn cell_position(grid: Grid3, token: usize) -> Option<(i32, i32)> {
    let c = token.checked_sub(vocab::CELL0)?;
    (c < vocab::CELLS_PER_SIDE * vocab::CELLS_PER_SIDE).then(|| cell_anchor(grid, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recolor_oracle_sanity() {
        let mut rng = Rng::new(3);
        let cfg = CaseConfig::default();
        for _ in 0..50 {
            let case = gen_edit_case_family(&mut rng, &cfg, TaskKind::V2V, EditFamily::Recolor).unwrap();
            let oracle = case.oracle();
            assert!(oracle.score(&case.target.frames()).unwrap().passed);
            assert!(!oracle.score(&case.source.as_ref().unwrap().frames()).unwrap().passed);
            assert_eq!(case.instruction[1], vocab::RECOLOR);
        }
    }

    #[test]
    fn remove_drops_one_object() {
        let mut rng = Rng::new(4);
        let cfg = CaseConfig::default();
        for _ in 0..50 {
            let case = gen_edit_case_family(&mut rng, &cfg, TaskKind::V2V, EditFamily::Remove).unwrap();
            let src = case.source.as_ref().unwrap();
            assert_eq!(case.target.objects.len(), src.objects.len() - 1);
        }
    }

    #[test]
    fn every_task_generates_sound_cases() {
        let mut rng = Rng::new(5);
        for task in TaskKind::ALL {
            for _ in 0..40 {
                let case = gen_edit_case(&mut rng, task).unwrap();
                case.target.validate().unwrap();
                let oracle = case.oracle();
                assert!(oracle.edited_cells() > 0, "{}", case.describe());
                assert!(oracle.score(&case.target.frames()).unwrap().passed);
                assert!(!oracle.score(&oracle.baseline).unwrap().passed);
                assert!(case.instruction.iter().all(|&t| t < vocab::VOCAB_SIZE));
                assert_eq!(case.target.grid.t, if task.is_image() { 1 } else { 2 });
            }
        }
    }

    #[test]
    fn wrong_family_is_rejected() {
        let mut rng = Rng::new(1);
        let cfg = CaseConfig::default();
        assert!(gen_edit_case_family(&mut rng, &cfg, TaskKind::T2V, EditFamily::Remove).is_err());
    }

    #[test]
    fn palette_swap_is_a_permutation_of_object_colors() {
        let mut seen: Vec<u8> = (1..NUM_COLORS as u8).map(palette_swap).collect();
        seen.sort();
        assert_eq!(seen, (1..NUM_COLORS as u8).collect::<Vec<_>>());
        assert!((1..NUM_COLORS as u8).all(|c| palette_swap(c) != c));
    }

    #[test]
    fn score_counts_regions() {
        let o = Oracle {
            grid: Grid3::new(1, 1, 4),
            background: 0,
            baseline: vec![0, 1, 1, 0],
            expected: vec![0, 2, 1, 0],
        };
        let s = o.score(&[0, 2, 3, 0]).unwrap();
        assert_eq!(s.edit_agreement, 1.0);
        assert_eq!(s.kept_agreement, 0.0);
        assert!((s.untouched_agreement - 2.0 / 3.0).abs() < 1e-15);
        assert!(!s.passed);
        assert!(o.score(&[0]).is_err());
    }
}
