//! Procedural shape scenes and the referring-expression grammar over them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TemplateSet;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::text::tokenize;

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    /// Corners of the RGB cube.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Cyan => [0, 255, 255],
            Color::Magenta => [255, 0, 255],
            Color::White => [255, 255, 255],
            Color::Black => [0, 0, 0],
        }
    }
}

impl SizeClass {
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }

    /// Radius as a fraction of the image side.
    fn radius_fraction(self) -> f64 {
        match self {
            SizeClass::Small => 0.09,
            SizeClass::Large => 0.14,
        }
    }
}

fn parse_word<T: Copy>(all: &[T], word: impl Fn(T) -> &'static str, token: &str) -> Option<T> {
    all.iter().copied().find(|&v| word(v) == token)
}

/// Every word the grammar can emit.
pub const VOCABULARY: &[&str] = &[
    "the", "one", "on", "in", "at", "of", "left", "right", "top", "bottom", "center", "above",
    "below", "red", "green", "blue", "yellow", "cyan", "magenta", "white", "black", "small",
    "large", "circle", "square", "triangle",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    /// `(row, col)` in the 3×3 grid.
    pub cell: (usize, usize),
    /// `(x, y)` in pixels.
    pub center: (f64, f64),
    pub radius: f64,
}

impl SceneObject {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let r = self.radius;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                let h = r * std::f64::consts::PI.sqrt() / 2.0;
                dx.abs() <= h && dy.abs() <= h
            }
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Pixels whose centres fall inside the shape.
    pub fn rasterize(&self, size: usize) -> Mask {
        let mut m = Mask::empty(size, size);
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_size: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// 2–4 objects in distinct cells with random attributes and a small jitter.
    pub fn random(rng: &mut ChaCha8Rng, image_size: usize) -> Self {
        let n = rng.gen_range(2..=4);
        let mut cells: Vec<(usize, usize)> = (0..9).map(|i| (i / 3, i % 3)).collect();
        cells.shuffle(rng);
        let s = image_size as f64;
        let jitter = 0.02 * s;
        let objects = cells[..n]
            .iter()
            .map(|&(row, col)| {
                let shape = *Shape::ALL.choose(rng).expect("nonempty");
                let color = *Color::ALL.choose(rng).expect("nonempty");
                let size = if rng.gen_bool(0.5) { SizeClass::Small } else { SizeClass::Large };
                let cx = (col as f64 + 0.5) * s / 3.0 + rng.gen_range(-jitter..=jitter);
                let cy = (row as f64 + 0.5) * s / 3.0 + rng.gen_range(-jitter..=jitter);
                SceneObject {
                    shape,
                    color,
                    size,
                    cell: (row, col),
                    center: (cx, cy),
                    radius: size.radius_fraction() * s,
                }
            })
            .collect();
        Self { image_size, objects }
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::filled(self.image_size, self.image_size, BACKGROUND);
        for o in &self.objects {
            let m = o.rasterize(self.image_size);
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.get(y, x) {
                        img.put(y, x, o.color.rgb());
                    }
                }
            }
        }
        img
    }
}

/// Absolute location on the 3×3 grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Row(usize),
    Col(usize),
    Cell(usize, usize),
}

impl Position {
    fn matches(self, cell: (usize, usize)) -> bool {
        match self {
            Position::Row(r) => cell.0 == r,
            Position::Col(c) => cell.1 == c,
            Position::Cell(r, c) => cell == (r, c),
        }
    }

    fn phrase(self) -> String {
        let row = |r| if r == 0 { "top" } else { "bottom" };
        let col = |c| if c == 0 { "left" } else { "right" };
        match self {
            Position::Row(r) => format!("at the {}", row(r)),
            Position::Col(c) => format!("on the {}", col(c)),
            Position::Cell(1, 1) => "in the center".into(),
            Position::Cell(r, c) => format!("in the {} {}", row(r), col(c)),
        }
    }

    /// Phrases that can describe an object in `cell`.
    fn describing(cell: (usize, usize)) -> Vec<Position> {
        let (r, c) = cell;
        let mut out = Vec::new();
        if r != 1 {
            out.push(Position::Row(r));
        }
        if c != 1 {
            out.push(Position::Col(c));
        }
        if (r != 1 && c != 1) || (r, c) == (1, 1) {
            out.push(Position::Cell(r, c));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    fn holds(self, subject: (usize, usize), landmark: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => subject.1 < landmark.1,
            Relation::RightOf => subject.1 > landmark.1,
            Relation::Above => subject.0 < landmark.0,
            Relation::Below => subject.0 > landmark.0,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

/// The attribute filter an expression denotes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Description {
    pub size: Option<SizeClass>,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
    pub position: Option<Position>,
    /// Relation to a landmark named by colour and shape.
    pub relation: Option<(Relation, Color, Shape)>,
}

impl Description {
    pub fn uses_location(&self) -> bool {
        self.position.is_some() || self.relation.is_some()
    }

    pub fn render(&self) -> String {
        let mut words = vec!["the".to_string()];
        words.extend(self.size.map(|s| s.word().to_string()));
        words.extend(self.color.map(|c| c.word().to_string()));
        words.push(self.shape.map_or("one", Shape::word).to_string());
        if let Some(p) = self.position {
            words.push(p.phrase());
        }
        if let Some((rel, c, s)) = self.relation {
            words.push(format!("{} the {} {}", rel.phrase(), c.word(), s.word()));
        }
        words.join(" ")
    }

    /// Inverse of [`Description::render`].
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = tokenize(text);
        let bad = || Error::Data(format!("`{text}` is outside the expression grammar"));
        let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
        // split off a trailing relation clause
        let rel_at = t.iter().position(|&w| w == "above" || w == "below" || w == "of");
        let (head, relation) = match rel_at {
            Some(i) => {
                let (rel, head_end) = match t[i] {
                    "above" => (Relation::Above, i),
                    "below" => (Relation::Below, i),
                    _ => match t.get(i.wrapping_sub(1)) {
                        Some(&"left") => (Relation::LeftOf, i - 1),
                        Some(&"right") => (Relation::RightOf, i - 1),
                        _ => return Err(bad()),
                    },
                };
                let tail = &t[i + 1..];
                if tail.len() != 3 || tail[0] != "the" {
                    return Err(bad());
                }
                let c = parse_word(&Color::ALL, Color::word, tail[1]).ok_or_else(bad)?;
                let s = parse_word(&Shape::ALL, Shape::word, tail[2]).ok_or_else(bad)?;
                (&t[..head_end], Some((rel, c, s)))
            }
            None => (&t[..], None),
        };
        if head.first() != Some(&"the") {
            return Err(bad());
        }
        let mut d = Description {
            relation,
            ..Default::default()
        };
        let mut i = 1;
        if let Some(s) = head.get(i).and_then(|w| parse_word(&[SizeClass::Small, SizeClass::Large], SizeClass::word, w)) {
            d.size = Some(s);
            i += 1;
        }
        if let Some(c) = head.get(i).and_then(|w| parse_word(&Color::ALL, Color::word, w)) {
            d.color = Some(c);
            i += 1;
        }
        match head.get(i) {
            Some(&"one") => {}
            Some(w) => d.shape = Some(parse_word(&Shape::ALL, Shape::word, w).ok_or_else(bad)?),
            None => return Err(bad()),
        }
        i += 1;
        let rest = &head[i..];
        let row = |w: &str| match w {
            "top" => Some(0),
            "bottom" => Some(2),
            _ => None,
        };
        let col = |w: &str| match w {
            "left" => Some(0),
            "right" => Some(2),
            _ => None,
        };
        d.position = match rest {
            [] => None,
            ["at", "the", w] => Some(Position::Row(row(w).ok_or_else(bad)?)),
            ["on", "the", w] => Some(Position::Col(col(w).ok_or_else(bad)?)),
            ["in", "the", "center"] => Some(Position::Cell(1, 1)),
            ["in", "the", r, c] => Some(Position::Cell(row(r).ok_or_else(bad)?, col(c).ok_or_else(bad)?)),
            _ => return Err(bad()),
        };
        Ok(d)
    }

    fn attributes_match(&self, o: &SceneObject) -> bool {
        self.size.is_none_or(|s| s == o.size)
            && self.color.is_none_or(|c| c == o.color)
            && self.shape.is_none_or(|s| s == o.shape)
            && self.position.is_none_or(|p| p.matches(o.cell))
    }

    /// Indices of the scene objects this description denotes. A relation
    /// whose landmark is not unique denotes nothing.
    pub fn matches(&self, scene: &Scene) -> Vec<usize> {
        let landmark = match self.relation {
            Some((rel, c, s)) => {
                let hits: Vec<&SceneObject> =
                    scene.objects.iter().filter(|o| o.color == c && o.shape == s).collect();
                if hits.len() != 1 {
                    return Vec::new();
                }
                Some((rel, hits[0].cell))
            }
            None => None,
        };
        scene
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| self.attributes_match(o))
            .filter(|(_, o)| landmark.is_none_or(|(rel, cell)| o.cell != cell && rel.holds(o.cell, cell)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Exhaustive filter over the scene; anything but exactly one match is an error.
pub fn resolve_expression(scene: &Scene, expression: &str) -> Result<usize> {
    let d = Description::parse(expression)?;
    let hits = d.matches(scene);
    match hits.as_slice() {
        [one] => Ok(*one),
        _ => Err(Error::Ambiguous {
            expression: expression.to_string(),
            matches: hits.len(),
        }),
    }
}

/// All grammatical descriptions of `object` that pick it out uniquely.
pub fn unique_descriptions(scene: &Scene, object: usize, templates: TemplateSet) -> Vec<Description> {
    let o = &scene.objects[object];
    let mut out = Vec::new();
    for mask in 0u8..8 {
        let base = Description {
            size: (mask & 1 != 0).then_some(o.size),
            color: (mask & 2 != 0).then_some(o.color),
            shape: (mask & 4 != 0).then_some(o.shape),
            ..Default::default()
        };
        if templates != TemplateSet::PositionRich && mask != 0 {
            out.push(base.clone());
        }
        if templates == TemplateSet::PositionFree {
            continue;
        }
        for p in Position::describing(o.cell) {
            out.push(Description {
                position: Some(p),
                ..base.clone()
            });
        }
        if mask == 0 {
            continue;
        }
        for (j, l) in scene.objects.iter().enumerate() {
            if j == object {
                continue;
            }
            for rel in Relation::ALL {
                if rel.holds(o.cell, l.cell) {
                    out.push(Description {
                        relation: Some((rel, l.color, l.shape)),
                        ..base.clone()
                    });
                }
            }
        }
    }
    out.retain(|d| d.matches(scene) == [object]);
    out
}
