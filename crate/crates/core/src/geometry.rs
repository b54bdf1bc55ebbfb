//! Shared vocabulary for shapes, colors and spatial relations, plus the
//! center-offset rule table used both to annotate generated scenes and to read
//! relations back from detections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Default alignment tolerance in pixels.
pub const RELATION_TOLERANCE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(Error::Input(format!("unknown shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Color {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "red" => Ok(Color::Red),
            "blue" => Ok(Color::Blue),
            other => Err(Error::Input(format!("unknown color {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationLabel {
    Above,
    Below,
    Left,
    Right,
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
    InFront,
    Behind,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 10] = [
        RelationLabel::Above,
        RelationLabel::Below,
        RelationLabel::Left,
        RelationLabel::Right,
        RelationLabel::UpperLeft,
        RelationLabel::UpperRight,
        RelationLabel::LowerLeft,
        RelationLabel::LowerRight,
        RelationLabel::InFront,
        RelationLabel::Behind,
    ];

    pub const PLANAR: [RelationLabel; 8] = [
        RelationLabel::Above,
        RelationLabel::Below,
        RelationLabel::Left,
        RelationLabel::Right,
        RelationLabel::UpperLeft,
        RelationLabel::UpperRight,
        RelationLabel::LowerLeft,
        RelationLabel::LowerRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationLabel::Above => "above",
            RelationLabel::Below => "below",
            RelationLabel::Left => "left",
            RelationLabel::Right => "right",
            RelationLabel::UpperLeft => "upper_left",
            RelationLabel::UpperRight => "upper_right",
            RelationLabel::LowerLeft => "lower_left",
            RelationLabel::LowerRight => "lower_right",
            RelationLabel::InFront => "in_front",
            RelationLabel::Behind => "behind",
        }
    }

    pub fn is_planar(self) -> bool {
        !matches!(self, RelationLabel::InFront | RelationLabel::Behind)
    }

    /// The relation that holds with the two objects swapped.
    pub fn converse(self) -> RelationLabel {
        use RelationLabel::*;
        match self {
            Above => Below,
            Below => Above,
            Left => Right,
            Right => Left,
            UpperLeft => LowerRight,
            LowerRight => UpperLeft,
            UpperRight => LowerLeft,
            LowerLeft => UpperRight,
            InFront => Behind,
            Behind => InFront,
        }
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationLabel::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown relation {s:?}")))
    }
}

/// Planar relation of object 1 relative to object 2 from `dx = x1 - x2`,
/// `dy = y1 - y2` (image coordinates, y grows downward).
///
/// Vertical alignment wins ties: `|dx| <= tol` is above/below even when
/// `|dy| <= tol` as well.
pub fn relation_from_offsets(dx: f64, dy: f64, tol: f64) -> RelationLabel {
    use RelationLabel::*;
    if dx.abs() <= tol {
        if dy < 0.0 {
            Above
        } else {
            Below
        }
    } else if dy.abs() <= tol {
        if dx < 0.0 {
            Left
        } else {
            Right
        }
    } else if dx < 0.0 && dy < 0.0 {
        UpperLeft
    } else if dx < 0.0 && dy > 0.0 {
        LowerLeft
    } else if dx > 0.0 && dy < 0.0 {
        UpperRight
    } else {
        LowerRight
    }
}

/// Relation between two centers `(x, y)`.
pub fn relation_from_centers(c1: (f64, f64), c2: (f64, f64), tol: f64) -> RelationLabel {
    relation_from_offsets(c1.0 - c2.0, c1.1 - c2.1, tol)
}
