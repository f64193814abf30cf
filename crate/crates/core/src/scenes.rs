//! Synthetic HOI scenes and their deterministic feature-grid encoding.
//!
//! The encoder stands in for a CNN backbone plus transformer encoder: every
//! grid cell holds the class embeddings of the instances covering it, scaled
//! by the covered fraction of the cell, plus a 2D sine-cosine positional code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;

/// One labeled human-object pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiPair {
    pub human: BBox,
    pub object: BBox,
    pub object_class: usize,
    /// Multi-hot over verb classes.
    pub verbs: Vec<bool>,
}

impl HoiPair {
    pub fn active_verbs(&self) -> impl Iterator<Item = usize> + '_ {
        self.verbs
            .iter()
            .enumerate()
            .filter_map(|(v, &on)| on.then_some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub pairs: Vec<HoiPair>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Generator settings. Box sizes are fractions of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub num_verbs: usize,
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub min_box: f64,
    pub max_box: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_verbs: 4,
            min_pairs: 1,
            max_pairs: 3,
            grid_h: 16,
            grid_w: 16,
            min_box: 0.15,
            max_box: 0.45,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_verbs == 0 {
            return Err(config_err("need at least one object class and one verb"));
        }
        if self.min_pairs == 0 || self.min_pairs > self.max_pairs {
            return Err(config_err(format!(
                "pair range [{}, {}] is empty or allows zero pairs",
                self.min_pairs, self.max_pairs
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(config_err("grid must be non-empty"));
        }
        if !(0.0 < self.min_box && self.min_box <= self.max_box && self.max_box <= 1.0) {
            return Err(config_err("box size range must satisfy 0 < min <= max <= 1"));
        }
        Ok(())
    }
}

/// Verb labels as a fixed function of class and geometry.
///
/// The primary verb hashes (object class, which side the human stands on,
/// whether the object is large relative to the human). Overlapping boxes add
/// the next verb as a second label.
pub fn verb_rule(human: BBox, object: BBox, object_class: usize, num_verbs: usize) -> Vec<bool> {
    let side = usize::from(human.cx > object.cx);
    let large = usize::from(object.area() >= 0.5 * human.area());
    let primary = (object_class + 2 * side + large) % num_verbs;
    let mut verbs = vec![false; num_verbs];
    verbs[primary] = true;
    let [x0, y0, x1, y1] = object.corners();
    if human.overlap_with_rect(x0, y0, x1, y1) > 0.0 {
        verbs[(primary + 1) % num_verbs] = true;
    }
    verbs
}

fn sample_box<R: Rng>(rng: &mut R, w_range: (f64, f64), h_range: (f64, f64), near: Option<(f64, f64)>) -> BBox {
    let w = rng.gen_range(w_range.0..=w_range.1);
    let h = rng.gen_range(h_range.0..=h_range.1);
    let (cx, cy) = match near {
        Some((x, y)) => (
            x + rng.gen_range(-0.3..=0.3),
            y + rng.gen_range(-0.3..=0.3),
        ),
        None => (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)),
    };
    BBox::new(
        cx.clamp(0.5 * w, 1.0 - 0.5 * w),
        cy.clamp(0.5 * h, 1.0 - 0.5 * h),
        w,
        h,
    )
}

/// Attempts per pair at placing it clear of the pairs already in the scene.
pub const PLACEMENT_ATTEMPTS: usize = 32;

fn sample_pair<R: Rng>(spec: &SceneSpec, rng: &mut R) -> HoiPair {
    let (lo, hi) = (spec.min_box, spec.max_box);
    let mid = 0.5 * (lo + hi);
    let human = sample_box(rng, (lo, mid), (mid, hi), None);
    let object_class = rng.gen_range(0..spec.num_classes);
    let object = sample_box(rng, (lo, mid), (lo, mid), Some((human.cx, human.cy)));
    let verbs = verb_rule(human, object, object_class, spec.num_verbs);
    HoiPair {
        human,
        object,
        object_class,
        verbs,
    }
}

fn overlaps(a: BBox, b: BBox) -> bool {
    let [x0, y0, x1, y1] = b.corners();
    a.overlap_with_rect(x0, y0, x1, y1) > 0.0
}

/// Pairs are drawn one after another; a pair whose boxes touch a box of an
/// earlier pair is redrawn, up to [`PLACEMENT_ATTEMPTS`] times, after which
/// the last draw is kept.
pub fn generate_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Scene {
    let n = rng.gen_range(spec.min_pairs..=spec.max_pairs);
    let mut pairs: Vec<HoiPair> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pair = sample_pair(spec, rng);
        for _ in 1..PLACEMENT_ATTEMPTS {
            let clear = pairs.iter().all(|p| {
                [p.human, p.object]
                    .iter()
                    .all(|&b| !overlaps(b, pair.human) && !overlaps(b, pair.object))
            });
            if clear {
                break;
            }
            pair = sample_pair(spec, rng);
        }
        pairs.push(pair);
    }
    Scene {
        pairs,
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
    }
}

/// A generated split: scene `i` is drawn from a generator seeded with `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub split: String,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, seed: u64, split: &str, count: usize) -> Result<Self> {
        spec.validate()?;
        let scenes = (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                generate_scene(spec, &mut rng)
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            seed,
            split: split.to_string(),
            scenes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.spec.validate()?;
        for scene in &ds.scenes {
            validate_scene(scene, &ds.spec)?;
        }
        Ok(ds)
    }
}

fn validate_scene(scene: &Scene, spec: &SceneSpec) -> Result<()> {
    use crate::error::HqmError;
    if scene.pairs.is_empty() {
        return Err(HqmError::Format("scene without pairs".into()));
    }
    for p in &scene.pairs {
        if p.object_class >= spec.num_classes
            || p.verbs.len() != spec.num_verbs
            || !p.verbs.iter().any(|&v| v)
            || !p.human.is_valid()
            || !p.object.is_valid()
        {
            return Err(HqmError::Format(format!("invalid pair {p:?}")));
        }
    }
    Ok(())
}

/// Encoded scene: `features` already include the positional code.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub features: Tensor,
    pub pos_embed: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl FeatureGrid {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// 2D sine-cosine positional code, one row per cell in row-major order.
///
/// Channel layout with `q = dim / 4`: `[sin(y·f), cos(y·f), sin(x·f), cos(x·f)]`
/// with frequencies `f_i = 10000^(-i/q)` and integer cell coordinates.
pub fn positional_embedding(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 4 != 0 {
        return Err(config_err(format!(
            "positional embedding width must be a positive multiple of 4, got {dim}"
        )));
    }
    let q = dim / 4;
    let freqs: Vec<f64> = (0..q)
        .map(|i| 10000f64.powf(-(i as f64) / q as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let (y, x) = (r as f64, c as f64);
            data.extend(freqs.iter().map(|f| (y * f).sin()));
            data.extend(freqs.iter().map(|f| (y * f).cos()));
            data.extend(freqs.iter().map(|f| (x * f).sin()));
            data.extend(freqs.iter().map(|f| (x * f).cos()));
        }
    }
    Tensor::new(vec![grid_h * grid_w, dim], data)
}

/// Fixed random embeddings: rows `0..C` for object classes, row `C` for humans.
pub fn class_table(num_classes: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_5EED);
    let data = (0..(num_classes + 1) * dim)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    Tensor::from_parts(vec![num_classes + 1, dim], data)
}

/// Fraction of each grid cell covered by `b`, row-major.
pub fn coverage(b: BBox, grid_h: usize, grid_w: usize) -> Vec<f64> {
    let (ch, cw) = (1.0 / grid_h as f64, 1.0 / grid_w as f64);
    let mut out = vec![0.0; grid_h * grid_w];
    let [x0, y0, x1, y1] = b.corners();
    let c_lo = ((x0 / cw).floor().max(0.0)) as usize;
    let c_hi = ((x1 / cw).ceil().max(0.0) as usize).min(grid_w);
    let r_lo = ((y0 / ch).floor().max(0.0)) as usize;
    let r_hi = ((y1 / ch).ceil().max(0.0) as usize).min(grid_h);
    for r in r_lo..r_hi {
        for c in c_lo..c_hi {
            let cell_x0 = c as f64 * cw;
            let cell_y0 = r as f64 * ch;
            let a = b.overlap_with_rect(cell_x0, cell_y0, cell_x0 + cw, cell_y0 + ch);
            out[r * grid_w + c] = a / (cw * ch);
        }
    }
    out
}

pub fn encode_scene(scene: &Scene, class_table: &Tensor) -> Result<FeatureGrid> {
    let dim = class_table.cols();
    let human_row = class_table.rows() - 1;
    let pos = positional_embedding(scene.grid_h, scene.grid_w, dim)?;
    let mut features = pos.clone();
    let mut add_instance = |b: BBox, row: usize| {
        let emb = class_table.row(row).to_vec();
        for (cell, frac) in coverage(b, scene.grid_h, scene.grid_w).into_iter().enumerate() {
            if frac == 0.0 {
                continue;
            }
            let dst = &mut features.data_mut()[cell * dim..(cell + 1) * dim];
            dst.iter_mut().zip(&emb).for_each(|(d, e)| *d += frac * e);
        }
    };
    for p in &scene.pairs {
        if p.object_class >= human_row {
            return Err(config_err(format!(
                "object class {} outside class table with {} rows",
                p.object_class,
                class_table.rows()
            )));
        }
        add_instance(p.human, human_row);
        add_instance(p.object, p.object_class);
    }
    Ok(FeatureGrid {
        features,
        pos_embed: pos,
        grid_h: scene.grid_h,
        grid_w: scene.grid_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_spec() {
        let spec = SceneSpec {
            min_pairs: 1,
            max_pairs: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(generate_scene(&spec, &mut rng).pairs.len(), 1);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        let b = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn pairs_rarely_touch_each_other() {
        let ds = Dataset::generate(&SceneSpec::default(), 9, "train", 500).unwrap();
        let (mut checked, mut touching) = (0, 0);
        for scene in &ds.scenes {
            for (i, a) in scene.pairs.iter().enumerate() {
                for b in &scene.pairs[..i] {
                    checked += 1;
                    let boxes = [b.human, b.object];
                    if boxes.iter().any(|&x| overlaps(x, a.human) || overlaps(x, a.object)) {
                        touching += 1;
                    }
                }
            }
        }
        assert!(checked > 200);
        assert!(touching * 100 <= checked, "{touching} of {checked}");
    }

    #[test]
    fn generated_boxes_are_inside_image_and_labeled() {
        let spec = SceneSpec::default();
        let ds = Dataset::generate(&spec, 5, "train", 200).unwrap();
        for scene in &ds.scenes {
            assert!((1..=3).contains(&scene.pairs.len()));
            for p in &scene.pairs {
                for b in [p.human, p.object] {
                    let [x0, y0, x1, y1] = b.corners();
                    assert!(x0 >= -1e-12 && y0 >= -1e-12 && x1 <= 1.0 + 1e-12 && y1 <= 1.0 + 1e-12);
                }
                assert!(p.verbs.iter().any(|&v| v));
                assert_eq!(p.verbs, verb_rule(p.human, p.object, p.object_class, 4));
            }
        }
    }

    #[test]
    fn every_verb_is_common_enough() {
        let ds = Dataset::generate(&SceneSpec::default(), 0, "train", 1000).unwrap();
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for p in ds.scenes.iter().flat_map(|s| &s.pairs) {
            total += 1;
            for v in p.active_verbs() {
                counts[v] += 1;
            }
        }
        for c in counts {
            assert!(c as f64 / total as f64 >= 0.02, "{counts:?} of {total}");
        }
    }

    #[test]
    fn dataset_json_is_reproducible() {
        let spec = SceneSpec::default();
        let a = Dataset::generate(&spec, 42, "val", 16).unwrap().to_json().unwrap();
        let b = Dataset::generate(&spec, 42, "val", 16).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let back = Dataset::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
    }

    #[test]
    fn rejects_malformed_dataset() {
        let spec = SceneSpec::default();
        let mut ds = Dataset::generate(&spec, 1, "val", 2).unwrap();
        ds.scenes[0].pairs[0].object_class = 9;
        assert!(Dataset::from_json(&ds.to_json().unwrap()).is_err());
    }

    #[test]
    fn positional_embedding_basics() {
        let pe = positional_embedding(4, 4, 16).unwrap();
        let first = pe.row(0);
        assert!(first[0..4].iter().all(|&v| v == 0.0));
        assert!(first[4..8].iter().all(|&v| v == 1.0));
        assert!(first[8..12].iter().all(|&v| v == 0.0));
        assert!(first[12..16].iter().all(|&v| v == 1.0));
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(positional_embedding(4, 4, 30).is_err());
    }

    #[test]
    fn positional_rows_are_distinct_up_to_64x64() {
        let (h, w, d) = (64, 64, 32);
        let pe = positional_embedding(h, w, d).unwrap();
        let n = h * w;
        for i in 0..n {
            for j in (i + 1)..n {
                let same = pe.row(i).iter().zip(pe.row(j)).all(|(a, b)| a == b);
                assert!(!same, "cells {i} and {j} collide");
            }
        }
    }

    fn one_pair_scene(human: BBox, object: BBox, class: usize) -> Scene {
        Scene {
            pairs: vec![HoiPair {
                human,
                object,
                object_class: class,
                verbs: verb_rule(human, object, class, 4),
            }],
            grid_h: 4,
            grid_w: 4,
        }
    }

    #[test]
    fn empty_cells_hold_only_position() {
        let table = class_table(5, 8, 0);
        // human in the top-left cell, object in the cell to its right
        let scene = one_pair_scene(
            BBox::new(0.125, 0.125, 0.25, 0.25),
            BBox::new(0.375, 0.125, 0.25, 0.25),
            2,
        );
        let grid = encode_scene(&scene, &table).unwrap();
        for cell in 2..16 {
            assert_eq!(grid.features.row(cell), grid.pos_embed.row(cell));
        }
        let expect: Vec<f64> = grid
            .pos_embed
            .row(1)
            .iter()
            .zip(table.row(2))
            .map(|(p, c)| p + c)
            .collect();
        assert_eq!(grid.features.row(1), expect.as_slice());
        let expect: Vec<f64> = grid
            .pos_embed
            .row(0)
            .iter()
            .zip(table.row(5))
            .map(|(p, c)| p + c)
            .collect();
        assert_eq!(grid.features.row(0), expect.as_slice());
    }

    #[test]
    fn encoding_is_linear_in_coverage() {
        let table = class_table(5, 8, 0);
        // object covers the left half of cell (row 2, col 2): x ∈ [0.5, 0.625]
        let object = BBox::new(0.5625, 0.625, 0.125, 0.25);
        let human = BBox::new(0.125, 0.125, 0.25, 0.25);
        let grid = encode_scene(&one_pair_scene(human, object, 1), &table).unwrap();
        // analytic rectangle intersection: 0.125·0.25 over a 0.25·0.25 cell
        let frac = (0.125 * 0.25) / (0.25 * 0.25);
        assert_eq!(frac, 0.5);
        let cell = 2 * 4 + 2;
        for ch in 0..8 {
            let delta = grid.features.get(cell, ch) - grid.pos_embed.get(cell, ch);
            assert!((delta - frac * table.get(1, ch)).abs() < 1e-15);
        }
    }

    #[test]
    fn coverage_of_full_image_box_is_one_everywhere() {
        let cov = coverage(BBox::new(0.5, 0.5, 1.0, 1.0), 3, 5);
        assert!(cov.iter().all(|&c| (c - 1.0).abs() < 1e-12));
    }
}
