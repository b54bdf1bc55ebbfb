//! Caption grammar: `[color1] shape1 is <paraphrase> [color2] shape2`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Color, RelationLabel, ShapeKind};

use super::SceneSpec;

/// Paraphrase variants per relation. Index 0 is the canonical phrasing.
pub fn paraphrases(relation: RelationLabel) -> &'static [&'static str] {
    use RelationLabel::*;
    match relation {
        UpperLeft => &[
            "to the upper left of",
            "above and to the left of",
            "diagonally up and left from",
        ],
        UpperRight => &[
            "to the upper right of",
            "above and to the right of",
            "diagonally up and right from",
        ],
        LowerLeft => &[
            "to the lower left of",
            "below and to the left of",
            "diagonally down and left from",
        ],
        LowerRight => &[
            "to the lower right of",
            "below and to the right of",
            "diagonally down and right from",
        ],
        Above => &["above", "directly above", "higher than"],
        Below => &["below", "directly below", "lower than"],
        Left => &["to the left of", "left of"],
        Right => &["to the right of", "right of"],
        InFront => &["in front of", "overlapping and in front of"],
        Behind => &["behind", "overlapped by"],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    pub paraphrase: usize,
    pub color1_dropped: bool,
    pub color2_dropped: bool,
}

/// Renders a caption with single spaces and no dangling separators.
pub fn format_caption(
    shape1: ShapeKind,
    shape2: ShapeKind,
    relation: RelationLabel,
    paraphrase: usize,
    color1: Option<Color>,
    color2: Option<Color>,
) -> Result<String> {
    let phrases = paraphrases(relation);
    let phrase = phrases.get(paraphrase).ok_or_else(|| {
        Error::Input(format!(
            "relation {relation} has {} paraphrases, index {paraphrase} requested",
            phrases.len()
        ))
    })?;
    let mut words: Vec<&str> = Vec::with_capacity(12);
    if let Some(c) = color1 {
        words.push(c.name());
    }
    words.push(shape1.name());
    words.push("is");
    words.extend(phrase.split_whitespace());
    if let Some(c) = color2 {
        words.push(c.name());
    }
    words.push(shape2.name());
    Ok(words.join(" "))
}

/// Samples a paraphrase uniformly and drops each color adjective
/// independently with probability `color_drop_prob`.
pub fn make_caption<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R, color_drop_prob: f64) -> Caption {
    let phrases = paraphrases(spec.relation);
    let paraphrase = rng.gen_range(0..phrases.len());
    let color1_dropped = rng.gen_bool(color_drop_prob);
    let color2_dropped = rng.gen_bool(color_drop_prob);
    let text = format_caption(
        spec.shape1,
        spec.shape2,
        spec.relation,
        paraphrase,
        (!color1_dropped).then_some(spec.color1),
        (!color2_dropped).then_some(spec.color2),
    )
    .expect("paraphrase index drawn from the table");
    Caption {
        text,
        paraphrase,
        color1_dropped,
        color2_dropped,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCaption {
    pub color1: Option<Color>,
    pub shape1: ShapeKind,
    pub relation: RelationLabel,
    pub paraphrase: usize,
    pub color2: Option<Color>,
    pub shape2: ShapeKind,
}

/// Inverse of [`format_caption`]. Trailing periods are ignored.
pub fn parse_caption(text: &str) -> Result<ParsedCaption> {
    let cleaned = text.trim().trim_end_matches('.').to_lowercase();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    let bad = || Error::Input(format!("caption {text:?} does not follow the grammar"));

    let mut head = 0;
    let color1 = words.first().and_then(|w| w.parse::<Color>().ok());
    if color1.is_some() {
        head += 1;
    }
    let shape1: ShapeKind = words.get(head).ok_or_else(bad)?.parse().map_err(|_| bad())?;
    head += 1;
    if words.get(head) != Some(&"is") {
        return Err(bad());
    }
    head += 1;

    let shape2: ShapeKind = words.last().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let mut tail = words.len() - 1;
    let color2 = if tail > head {
        words[tail - 1].parse::<Color>().ok()
    } else {
        None
    };
    if color2.is_some() {
        tail -= 1;
    }
    if tail <= head {
        return Err(bad());
    }
    let phrase = words[head..tail].join(" ");
    for relation in RelationLabel::ALL {
        if let Some(paraphrase) = paraphrases(relation).iter().position(|p| *p == phrase) {
            return Ok(ParsedCaption {
                color1,
                shape1,
                relation,
                paraphrase,
                color2,
                shape2,
            });
        }
    }
    Err(bad())
}

/// Every distinct word the caption grammar can produce, in a fixed order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec!["red", "blue", "circle", "square", "triangle", "is"];
    for relation in RelationLabel::ALL {
        for phrase in paraphrases(relation) {
            for w in phrase.split_whitespace() {
                if !words.contains(&w) {
                    words.push(w);
                }
            }
        }
    }
    words
}
