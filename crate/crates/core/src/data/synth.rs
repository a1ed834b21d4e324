//! Synthetic bi-temporal scenes with exact change masks and template captions.
//!
//! A scene is a textured ground plane with a few buildings and at most one
//! road. Some objects appear or disappear between the frames; those, and
//! only those, make up the change mask and the caption. Distractors (a
//! global brightness shift and patches of vegetation noise) alter the
//! second frame without touching mask or caption.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::BiTemporalPair;
use crate::numerics::rng_stream;
use crate::raster::{BinaryMask, Raster};

use super::{Instance, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Building,
    Road,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Appear,
    Disappear,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.height).contains(&r) && (self.col..self.col + self.width).contains(&c)
    }

    /// True if the rectangles come within `gap` pixels of each other.
    fn near(&self, other: &Rect, gap: usize) -> bool {
        self.row < other.row + other.height + gap
            && other.row < self.row + self.height + gap
            && self.col < other.col + other.width + gap
            && other.col < self.col + self.width + gap
    }

    fn center(&self) -> (f64, f64) {
        (self.row as f64 + self.height as f64 / 2.0, self.col as f64 + self.width as f64 / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub rect: Rect,
    pub event: Event,
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn horizontal(&self) -> bool {
        self.rect.width > self.rect.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distractors {
    /// Added to every channel of the second frame.
    pub brightness: f64,
    /// Vegetation patches as (center row, center col, radius).
    pub vegetation: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub objects: Vec<SceneObject>,
    pub texture_seed: u64,
    pub distractors: Option<Distractors>,
}

impl SceneSpec {
    pub fn events(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(|o| o.event != Event::None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
    pub distractors: bool,
    pub val: usize,
    pub test: usize,
}

impl GenerateOptions {
    /// `n` instances split 80/10/10 into train/val/test.
    pub fn new(n: usize, seed: u64) -> Self {
        GenerateOptions { n, seed, image_size: 64, distractors: true, val: n / 10, test: n / 10 }
    }

    fn split_of(&self, index: usize) -> Split {
        let train = self.n.saturating_sub(self.val + self.test);
        if index < train {
            Split::Train
        } else if index < train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

const GRASS: [f64; 3] = [0.25, 0.38, 0.18];
const SOIL: [f64; 3] = [0.42, 0.35, 0.25];
const VEGETATION: [f64; 3] = [0.06, 0.22, 0.05];
const ROAD: [f64; 3] = [0.62, 0.60, 0.58];
const ROOFS: [[f64; 3]; 3] = [[0.95, 0.55, 0.45], [0.55, 0.75, 0.95], [0.95, 0.95, 0.92]];

pub const LOCATIONS: [[&str; 3]; 3] =
    [["top left", "top", "top right"], ["left", "center", "right"], ["bottom left", "bottom", "bottom right"]];

pub const NO_CHANGE: [&str; 4] =
    ["the scene is the same", "there is no change", "nothing has changed", "no change has occurred in the scene"];
const BUILDING_APPEAR: [&str; 4] = [
    "a building appears in the {loc}",
    "a new building is built in the {loc}",
    "a building is constructed in the {loc}",
    "there is a new building in the {loc}",
];
const BUILDING_DISAPPEAR: [&str; 3] = [
    "a building is removed from the {loc}",
    "a building disappears from the {loc}",
    "a building is demolished in the {loc}",
];
const ROAD_APPEAR: [&str; 3] = [
    "a {dir} road is built across the scene",
    "a new {dir} road appears across the scene",
    "a {dir} road is constructed across the scene",
];
const ROAD_DISAPPEAR: [&str; 2] = ["a {dir} road is removed from the scene", "a {dir} road disappears from the scene"];

/// Location phrase of a rectangle's center on a 3×3 grid.
pub fn location_of(rect: &Rect, size: usize) -> &'static str {
    let (cy, cx) = rect.center();
    let band = |v: f64| ((v * 3.0 / size as f64) as usize).min(2);
    LOCATIONS[band(cy)][band(cx)]
}

fn sample_scene(rng: &mut impl Rng, size: usize, distractors: bool) -> SceneSpec {
    let n_events = *[0usize, 1, 1, 1, 2, 2].choose(rng).expect("non-empty");
    let n_static = rng.random_range(0..=2usize);
    let mut objects: Vec<SceneObject> = Vec::new();
    for k in 0..n_events + n_static {
        let event = if k < n_events {
            if rng.random_bool(0.5) {
                Event::Appear
            } else {
                Event::Disappear
            }
        } else {
            Event::None
        };
        let has_road = objects.iter().any(|o| o.kind == ObjectKind::Road);
        let want_road = !has_road && rng.random_bool(0.25);
        for _ in 0..50 {
            let (kind, rect, color) = if want_road {
                let offset = rng.random_range(4..size - 10);
                let rect = if rng.random_bool(0.5) {
                    Rect { row: offset, col: 0, height: 6, width: size }
                } else {
                    Rect { row: 0, col: offset, height: size, width: 6 }
                };
                (ObjectKind::Road, rect, ROAD)
            } else {
                let h = rng.random_range(14..=20);
                let w = rng.random_range(14..=20);
                let rect = Rect {
                    row: rng.random_range(2..=size - 2 - h),
                    col: rng.random_range(2..=size - 2 - w),
                    height: h,
                    width: w,
                };
                (ObjectKind::Building, rect, *ROOFS.choose(rng).expect("non-empty"))
            };
            if objects.iter().all(|o| !o.rect.near(&rect, 2)) {
                objects.push(SceneObject { kind, rect, event, color });
                break;
            }
        }
    }
    // events lead; placement failures can drop objects, so re-sort stably
    objects.sort_by_key(|o| o.event == Event::None);

    let distractors = distractors.then(|| {
        let brightness = rng.random_range(-0.1..=0.1);
        let patches = rng.random_range(1..=3usize);
        let mut vegetation = Vec::new();
        for _ in 0..patches {
            for _ in 0..30 {
                let radius = rng.random_range(4..=7usize);
                let r = rng.random_range(radius..size - radius);
                let c = rng.random_range(radius..size - radius);
                let bbox = Rect { row: r - radius, col: c - radius, height: 2 * radius + 1, width: 2 * radius + 1 };
                if objects.iter().all(|o| !o.rect.near(&bbox, 1)) {
                    vegetation.push((r, c, radius));
                    break;
                }
            }
        }
        Distractors { brightness, vegetation }
    });
    SceneSpec { size, objects, texture_seed: rng.random(), distractors }
}

fn render_background(spec: &SceneSpec) -> Raster {
    let mut rng = rng_stream(spec.texture_seed, "texture");
    let n = spec.size;
    let (fa, fb): (f64, f64) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
    let (pa, pb): (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut img = Raster::filled(n, n, [0.0; 3]);
    for r in 0..n {
        for c in 0..n {
            let t = 0.5 + 0.5 * (fa * r as f64 + pa).sin() * (fb * c as f64 + pb).cos();
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = GRASS[ch] * (1.0 - t) + SOIL[ch] * t + rng.random_range(-0.04..0.04);
            }
            img.set_pixel(r, c, px);
        }
    }
    img
}

fn paint(img: &mut Raster, rect: &Rect, color: [f64; 3]) {
    for r in rect.row..rect.row + rect.height {
        for c in rect.col..rect.col + rect.width {
            img.set_pixel(r, c, color);
        }
    }
}

/// Renders both frames and the exact change mask.
pub fn render(spec: &SceneSpec) -> (Raster, Raster, BinaryMask) {
    let n = spec.size;
    let background = render_background(spec);
    let mut a = background.clone();
    let mut b = background;
    let mut mask = BinaryMask::zeros(n, n);
    for o in &spec.objects {
        match o.event {
            Event::None => {
                paint(&mut a, &o.rect, o.color);
                paint(&mut b, &o.rect, o.color);
            }
            Event::Appear => paint(&mut b, &o.rect, o.color),
            Event::Disappear => paint(&mut a, &o.rect, o.color),
        }
        if o.event != Event::None {
            for r in 0..n {
                for c in 0..n {
                    if o.rect.contains(r, c) {
                        mask.set(r, c, true);
                    }
                }
            }
        }
    }
    if let Some(d) = &spec.distractors {
        let mut rng = rng_stream(spec.texture_seed, "vegetation");
        for &(cr, cc, radius) in &d.vegetation {
            let rad2 = (radius * radius) as isize;
            for r in cr - radius..=cr + radius {
                for c in cc - radius..=cc + radius {
                    let (dr, dc) = (r as isize - cr as isize, c as isize - cc as isize);
                    if dr * dr + dc * dc > rad2 || !rng.random_bool(0.7) {
                        continue;
                    }
                    let px = b.pixel(r, c);
                    let mix: f64 = rng.random_range(0.5..0.95);
                    b.set_pixel(r, c, std::array::from_fn(|ch| px[ch] * (1.0 - mix) + VEGETATION[ch] * mix));
                }
            }
        }
        for v in &mut b.data {
            *v += d.brightness;
        }
    }
    a.quantize();
    b.quantize();
    (a, b, mask)
}

fn fill(template: &str, obj: &SceneObject, size: usize) -> String {
    let dir = if obj.horizontal() { "horizontal" } else { "vertical" };
    template.replace("{loc}", location_of(&obj.rect, size)).replace("{dir}", dir)
}

/// One caption: a clause per event in scene order, joined by "and".
pub fn caption(spec: &SceneSpec, rng: &mut impl Rng) -> String {
    let clauses: Vec<String> = spec
        .events()
        .map(|o| {
            let pool: &[&str] = match (o.kind, o.event) {
                (ObjectKind::Building, Event::Appear) => &BUILDING_APPEAR,
                (ObjectKind::Building, _) => &BUILDING_DISAPPEAR,
                (ObjectKind::Road, Event::Appear) => &ROAD_APPEAR,
                (ObjectKind::Road, _) => &ROAD_DISAPPEAR,
            };
            fill(pool.choose(rng).expect("non-empty"), o, spec.size)
        })
        .collect();
    if clauses.is_empty() {
        NO_CHANGE.choose(rng).expect("non-empty").to_string()
    } else {
        clauses.join(" and ")
    }
}

/// Scene, images, mask and 1–5 distinct reference captions for one index.
pub fn generate_one(opts: &GenerateOptions, index: usize) -> (SceneSpec, Instance) {
    let mut rng = rng_stream(opts.seed, &format!("scene.{index}"));
    let spec = sample_scene(&mut rng, opts.image_size, opts.distractors);
    let (a, b, mask) = render(&spec);
    let wanted = rng.random_range(1..=5usize);
    let mut captions: Vec<String> = Vec::new();
    if spec.events().next().is_none() {
        captions.push(NO_CHANGE[0].to_string());
    }
    for _ in 0..4 * wanted {
        let c = caption(&spec, &mut rng);
        if !captions.contains(&c) {
            captions.push(c);
        }
        if captions.len() >= wanted {
            break;
        }
    }
    let pair = BiTemporalPair { image_a: a, image_b: b, mask: Some(mask), captions };
    let instance = Instance { id: format!("{index:05}"), split: opts.split_of(index), pair };
    (spec, instance)
}

pub fn generate(opts: &GenerateOptions) -> Vec<Instance> {
    generate_parallel(opts, 1)
}

/// Same output as `generate`; indices are split across `threads` workers.
pub fn generate_parallel(opts: &GenerateOptions, threads: usize) -> Vec<Instance> {
    let threads = threads.clamp(1, opts.n.max(1));
    if threads == 1 {
        return (0..opts.n).map(|i| generate_one(opts, i).1).collect();
    }
    let chunk = opts.n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = t * chunk..((t + 1) * chunk).min(opts.n);
                s.spawn(move || range.map(|i| generate_one(opts, i).1).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread panicked")).collect()
    })
}
