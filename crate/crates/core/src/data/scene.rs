//! Deterministic synthetic scenes: colored shapes on a land-cover background,
//! with templated captions, questions, and grounding queries.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

pub const DEFAULT_SIZE: usize = 32;
const MIN_SIDE: usize = 7;
const MAX_SIDE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Square,
    Circle,
    Triangle,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Square, Category::Circle, Category::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Category::Square => "square",
            Category::Circle => "circle",
            Category::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Category::Square => "squares",
            Category::Circle => "circles",
            Category::Triangle => "triangles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Yellow,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Yellow, Color::White, Color::Black];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Yellow => [240, 210, 40],
            Color::White => [245, 245, 245],
            Color::Black => [20, 20, 20],
        }
    }
}

/// Scene-level class, used by zero-shot classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LandCover {
    Desert,
    Forest,
    Water,
    Urban,
}

impl LandCover {
    pub const ALL: [LandCover; 4] = [LandCover::Desert, LandCover::Forest, LandCover::Water, LandCover::Urban];

    pub fn word(self) -> &'static str {
        match self {
            LandCover::Desert => "desert",
            LandCover::Forest => "forest",
            LandCover::Water => "water",
            LandCover::Urban => "urban",
        }
    }

    pub fn from_word(w: &str) -> Option<LandCover> {
        LandCover::ALL.into_iter().find(|l| l.word() == w)
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            LandCover::Desert => [200, 170, 110],
            LandCover::Forest => [50, 110, 50],
            LandCover::Water => [60, 90, 170],
            LandCover::Urban => [140, 140, 140],
        }
    }
}

/// Pixel box; `(x1, y1)` inclusive top-left, `(x2, y2)` exclusive bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl PixelBox {
    pub fn to_array(self) -> [usize; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        PixelBox {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
        }
    }

    fn separated(&self, other: &PixelBox) -> bool {
        self.x2 < other.x1 || other.x2 < self.x1 || self.y2 < other.y1 || other.y2 < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    pub color: Color,
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub image: Image,
    pub land_cover: LandCover,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Presence,
    Count,
    Comparison,
}

impl AnswerType {
    pub const ALL: [AnswerType; 3] = [AnswerType::Presence, AnswerType::Count, AnswerType::Comparison];

    pub fn name(self) -> &'static str {
        match self {
            AnswerType::Presence => "presence",
            AnswerType::Count => "count",
            AnswerType::Comparison => "comparison",
        }
    }

    /// Recovers the template family from question text.
    pub fn of_question(question: &str) -> Option<AnswerType> {
        let q = question.trim_start().to_lowercase();
        if q.starts_with("is there") {
            Some(AnswerType::Presence)
        } else if q.starts_with("how many") {
            Some(AnswerType::Count)
        } else if q.starts_with("are there more") {
            Some(AnswerType::Comparison)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub kind: AnswerType,
}

/// A scene with every text the generator derives from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub caption_short: String,
    pub caption_long: String,
    pub qa: QaPair,
    pub grounding_query: String,
    pub grounding_box: PixelBox,
}

const NUMBERS: [&str; 5] = ["zero", "one", "two", "three", "four"];

/// 3x3 grid cell of a box center, as (row, col).
fn cell(b: &PixelBox, width: usize, height: usize) -> (usize, usize) {
    let cx = (b.x1 + b.x2) as f64 / 2.0;
    let cy = (b.y1 + b.y2) as f64 / 2.0;
    let bin = |c: f64, extent: usize| ((c * 3.0 / extent as f64) as usize).min(2);
    (bin(cy, height), bin(cx, width))
}

fn position_phrase(row: usize, col: usize) -> &'static str {
    const P: [[&str; 3]; 3] = [
        ["top left", "top", "top right"],
        ["left", "center", "right"],
        ["bottom left", "bottom", "bottom right"],
    ];
    P[row][col]
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn position_of(&self, obj: &SceneObject) -> &'static str {
        let (r, c) = cell(&obj.bbox, self.width(), self.height());
        position_phrase(r, c)
    }

    pub fn count(&self, category: Category) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    pub fn count_colored(&self, category: Category, color: Color) -> usize {
        self.objects
            .iter()
            .filter(|o| o.category == category && o.color == color)
            .count()
    }

    /// "two red squares and one white circle in a forest area"
    pub fn short_caption(&self) -> String {
        let mut groups: Vec<(Category, Color, usize)> = Vec::new();
        for cat in Category::ALL {
            for col in Color::ALL {
                let n = self.count_colored(cat, col);
                if n > 0 {
                    groups.push((cat, col, n));
                }
            }
        }
        let phrases: Vec<String> = groups
            .iter()
            .map(|&(cat, col, n)| {
                let noun = if n == 1 { cat.word() } else { cat.plural() };
                format!("{} {} {}", NUMBERS[n], col.word(), noun)
            })
            .collect();
        format!("{} in a {} area", phrases.join(" and "), self.land_cover.word())
    }

    /// One phrase per object in reading order, with its grid position.
    pub fn long_caption(&self) -> String {
        let mut objs: Vec<&SceneObject> = self.objects.iter().collect();
        objs.sort_by_key(|o| {
            let (r, c) = cell(&o.bbox, self.width(), self.height());
            (r, c, o.bbox.x1, o.bbox.y1)
        });
        let phrases: Vec<String> = objs
            .iter()
            .map(|o| {
                format!(
                    "a {} {} in the {}",
                    o.color.word(),
                    o.category.word(),
                    self.position_of(o)
                )
            })
            .collect();
        format!("{} in a {} area", phrases.join(" and "), self.land_cover.word())
    }

    /// Shortest description that matches `target` and no other object.
    pub fn referring_expression(&self, target: usize) -> String {
        let t = &self.objects[target];
        let base = format!("the {} {}", t.color.word(), t.category.word());
        if self.count_colored(t.category, t.color) == 1 {
            base
        } else {
            format!("{base} in the {}", self.position_of(t))
        }
    }

    /// Every templated question the scene supports.
    pub fn question_pool(&self) -> Vec<QaPair> {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        let mut pool = Vec::new();
        for cat in Category::ALL {
            for col in Color::ALL {
                pool.push(QaPair {
                    question: format!("is there a {} {} ?", col.word(), cat.word()),
                    answer: yes_no(self.count_colored(cat, col) > 0),
                    kind: AnswerType::Presence,
                });
            }
        }
        for cat in Category::ALL {
            pool.push(QaPair {
                question: format!("how many {} are there ?", cat.plural()),
                answer: NUMBERS[self.count(cat)].to_string(),
                kind: AnswerType::Count,
            });
        }
        for a in Category::ALL {
            for b in Category::ALL {
                if a != b {
                    pool.push(QaPair {
                        question: format!("are there more {} than {} ?", a.plural(), b.plural()),
                        answer: yes_no(self.count(a) > self.count(b)),
                        kind: AnswerType::Comparison,
                    });
                }
            }
        }
        pool
    }

    /// Objects matched by a referring expression, by exhaustive attribute match.
    pub fn matching_objects(&self, query: &str) -> Vec<usize> {
        let words: Vec<&str> = query.split_whitespace().collect();
        let phrase = query.split(" in the ").nth(1);
        (0..self.objects.len())
            .filter(|&i| {
                let o = &self.objects[i];
                words.contains(&o.color.word())
                    && words.contains(&o.category.word())
                    && phrase.is_none_or(|p| p == self.position_of(o))
            })
            .collect()
    }
}

/// Draws `n` balanced questions from the pool: answer families cycle, and
/// yes/no families alternate between the two answers where possible.
pub fn sample_questions(pool: &[QaPair], n: usize, rng: &mut impl Rng) -> Vec<QaPair> {
    let mut remaining: Vec<QaPair> = pool.to_vec();
    remaining.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    let mut kinds: Vec<AnswerType> = AnswerType::ALL.to_vec();
    kinds.shuffle(rng);
    let mut want_yes = rng.random_bool(0.5);
    let mut k = 0;
    while out.len() < n && !remaining.is_empty() {
        let kind = kinds[k % kinds.len()];
        k += 1;
        let pick = remaining
            .iter()
            .position(|q| q.kind == kind && (kind == AnswerType::Count || (q.answer == "yes") == want_yes))
            .or_else(|| remaining.iter().position(|q| q.kind == kind));
        if let Some(i) = pick {
            if kind != AnswerType::Count {
                want_yes = !want_yes;
            }
            out.push(remaining.swap_remove(i));
        } else if k > 3 * pool.len() {
            break;
        }
    }
    out
}

fn jitter(rgb: [u8; 3], rng: &mut impl Rng, amount: i32) -> [u8; 3] {
    rgb.map(|c| (i32::from(c) + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn inside(cat: Category, b: &PixelBox, x: usize, y: usize) -> bool {
    let side = (b.x2 - b.x1) as f64;
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    match cat {
        Category::Square => true,
        Category::Circle => {
            let (cx, cy) = ((b.x1 + b.x2) as f64 / 2.0, (b.y1 + b.y2) as f64 / 2.0);
            let r = side / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        Category::Triangle => {
            let cx = (b.x1 + b.x2) as f64 / 2.0;
            let depth = (py - b.y1 as f64) / side;
            (px - cx).abs() <= depth * side / 2.0 + 0.25
        }
    }
}

fn place_objects(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<SceneObject> {
    loop {
        let n = rng.random_range(1..=4usize);
        let mut objs: Vec<SceneObject> = Vec::with_capacity(n);
        let mut attempts = 0;
        while objs.len() < n && attempts < 200 {
            attempts += 1;
            let side = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let x1 = rng.random_range(0..=width - side);
            let y1 = rng.random_range(0..=height - side);
            let bbox = PixelBox {
                x1,
                y1,
                x2: x1 + side,
                y2: y1 + side,
            };
            let obj = SceneObject {
                category: *Category::ALL.choose(rng).expect("non-empty"),
                color: *Color::ALL.choose(rng).expect("non-empty"),
                bbox,
            };
            let here = cell(&bbox, width, height);
            let clash = objs.iter().any(|o| {
                !o.bbox.separated(&bbox)
                    || (o.category == obj.category && o.color == obj.color && cell(&o.bbox, width, height) == here)
            });
            if !clash {
                objs.push(obj);
            }
        }
        if objs.len() == n {
            return objs;
        }
    }
}

/// Renders a scene and derives its texts; deterministic in `seed`.
pub fn generate_scene(seed: u64) -> GeneratedScene {
    generate_scene_sized(seed, DEFAULT_SIZE, DEFAULT_SIZE)
}

pub fn generate_scene_sized(seed: u64, width: usize, height: usize) -> GeneratedScene {
    assert!(width > MAX_SIDE && height > MAX_SIDE, "scene too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let land_cover = *LandCover::ALL.choose(&mut rng).expect("non-empty");
    let objects = place_objects(&mut rng, width, height);

    let mut image = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            image.set(x, y, jitter(land_cover.rgb(), &mut rng, 12));
        }
    }
    for o in &objects {
        for y in o.bbox.y1..o.bbox.y2 {
            for x in o.bbox.x1..o.bbox.x2 {
                if inside(o.category, &o.bbox, x, y) {
                    image.set(x, y, jitter(o.color.rgb(), &mut rng, 6));
                }
            }
        }
    }
    let scene = Scene {
        image,
        land_cover,
        objects,
    };

    let pool = scene.question_pool();
    let qa = sample_questions(&pool, 1, &mut rng).pop().expect("pool is never empty");
    let target = rng.random_range(0..scene.objects.len());
    GeneratedScene {
        caption_short: scene.short_caption(),
        caption_long: scene.long_caption(),
        qa,
        grounding_query: scene.referring_expression(target),
        grounding_box: scene.objects[target].bbox,
        scene,
    }
}

/// Integer `round(100 * c / extent)` with halves rounded up.
fn scale_coord(c: usize, extent: usize) -> i64 {
    ((200 * c + extent) / (2 * extent)) as i64
}

/// Maps a pixel box onto the `[0, 100]` coordinate grid, widening boxes that
/// collapse under rounding so that `x1 < x2` and `y1 < y2` always hold.
pub fn normalize_bbox(bbox: PixelBox, width: usize, height: usize) -> Result<[i64; 4]> {
    if width == 0 || height == 0 || bbox.x1 >= bbox.x2 || bbox.y1 >= bbox.y2 || bbox.x2 > width || bbox.y2 > height {
        return Err(Error::InvalidArgument(format!(
            "box {:?} invalid for {width}x{height}",
            bbox.to_array()
        )));
    }
    let mut x1 = scale_coord(bbox.x1, width);
    let mut y1 = scale_coord(bbox.y1, height);
    let mut x2 = scale_coord(bbox.x2, width);
    let mut y2 = scale_coord(bbox.y2, height);
    let widen = |lo: &mut i64, hi: &mut i64| {
        if lo >= hi {
            if *hi < 100 {
                *hi = *lo + 1;
            } else {
                *lo = *hi - 1;
            }
        }
    };
    widen(&mut x1, &mut x2);
    widen(&mut y1, &mut y2);
    Ok([x1, y1, x2, y2])
}
