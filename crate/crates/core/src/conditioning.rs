//! Prompt template, its parser, and the numeric condition encoder.
//!
//! Prompts are the human-facing surface and are stored verbatim in
//! manifests. Models never see text: they consume the 12-dimensional
//! [`ConditionVector`] produced by [`encode_condition`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{CityStyle, Class, ClassPercents, ObjectCounts};

/// Count values at or above this saturate in the condition vector.
pub const COUNT_CAP: u32 = 16;
pub const CONDITION_DIM: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub style: CityStyle,
    pub proportions: ClassPercents,
    pub counts: ObjectCounts,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConditionError {
    #[error("prompt does not match the template at byte {position}: expected {expected}")]
    Parse { position: usize, expected: String },
    #[error("{class} percent {value} is outside [0, 100]")]
    Domain { class: String, value: f64 },
    #[error("unknown class '{0}'")]
    UnknownClass(String),
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<(), ConditionError> {
        for c in Class::LISTED {
            let v = self.proportions.get(c);
            if !v.is_finite() || !(0.0..=100.0).contains(&v) {
                return Err(ConditionError::Domain { class: c.name().to_string(), value: v });
            }
        }
        Ok(())
    }

    /// Rounds every percent to hundredths, the precision carried by prompts.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| (v * 100.0).round() / 100.0;
        let mut out = *self;
        out.proportions = ClassPercents::from_array(self.proportions.as_array().map(q));
        out
    }
}

pub fn build_prompt(spec: &ConditionSpec) -> String {
    let p = &spec.proportions;
    let n = &spec.counts;
    format!(
        "The image is captured from {}. The scene contains {:.2}% road, {:.2}% sidewalk, {:.2}% building, \
         {:.2}% sky, {:.2}% tree, and {:.2}% person. The image includes {} cars, {} persons, {} bicycles, \
         and {} buses.",
        spec.style.city(),
        p.road,
        p.sidewalk,
        p.building,
        p.sky,
        p.tree,
        p.person,
        n.cars,
        n.persons,
        n.bicycles,
        n.buses
    )
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, expected: impl Into<String>) -> Result<T, ConditionError> {
        Err(ConditionError::Parse { position: self.pos, expected: expected.into() })
    }

    fn literal(&mut self, lit: &str) -> Result<(), ConditionError> {
        if self.text[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.fail(format!("{lit:?}"))
        }
    }

    fn digits(&mut self) -> &'a str {
        let start = self.pos;
        let rest = &self.text[start..];
        let len = rest.bytes().take_while(u8::is_ascii_digit).count();
        self.pos += len;
        &self.text[start..start + len]
    }

    fn number(&mut self) -> Result<f64, ConditionError> {
        let start = self.pos;
        if self.digits().is_empty() {
            return self.fail("a number");
        }
        if self.text[self.pos..].starts_with('.') {
            self.pos += 1;
            if self.digits().is_empty() {
                return self.fail("decimal digits");
            }
        }
        Ok(self.text[start..self.pos].parse().expect("digits parse"))
    }

    fn count(&mut self) -> Result<u32, ConditionError> {
        let at = self.pos;
        let d = self.digits();
        if d.is_empty() {
            return self.fail("an integer count");
        }
        d.parse().map_err(|_| ConditionError::Parse { position: at, expected: "a count that fits u32".into() })
    }

    fn city(&mut self) -> Result<CityStyle, ConditionError> {
        for style in CityStyle::ALL {
            if self.text[self.pos..].starts_with(style.city()) {
                self.pos += style.city().len();
                return Ok(style);
            }
        }
        self.fail("a city name (Chicago or Orlando)")
    }
}

/// Exact inverse of [`build_prompt`].
pub fn parse_prompt(text: &str) -> Result<ConditionSpec, ConditionError> {
    let mut c = Cursor { text, pos: 0 };
    c.literal("The image is captured from ")?;
    let style = c.city()?;
    c.literal(". The scene contains ")?;
    let mut pct = [0.0; 6];
    let names = ["road", "sidewalk", "building", "sky", "tree", "person"];
    for (i, name) in names.iter().enumerate() {
        if i == 5 {
            c.literal("and ")?;
        }
        pct[i] = c.number()?;
        c.literal(&format!("% {name}"))?;
        c.literal(if i == 5 { ". " } else { ", " })?;
    }
    c.literal("The image includes ")?;
    let mut counts = [0u32; 4];
    let objects = ["cars", "persons", "bicycles", "buses"];
    for (i, name) in objects.iter().enumerate() {
        if i == 3 {
            c.literal("and ")?;
        }
        counts[i] = c.count()?;
        c.literal(&format!(" {name}"))?;
        c.literal(if i == 3 { "." } else { ", " })?;
    }
    if c.pos != text.len() {
        return c.fail("end of prompt");
    }
    let spec = ConditionSpec {
        style,
        proportions: ClassPercents::from_array(pct),
        counts: ObjectCounts::from_array(counts),
    };
    spec.validate()?;
    Ok(spec)
}

/// Fixed-length model input: style one-hot, proportions / 100, capped counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector(pub [f32; CONDITION_DIM]);

impl ConditionVector {
    pub fn values(&self) -> &[f32; CONDITION_DIM] {
        &self.0
    }
}

pub fn encode_condition(spec: &ConditionSpec) -> ConditionVector {
    let mut v = [0f32; CONDITION_DIM];
    match spec.style {
        CityStyle::Dense => v[0] = 1.0,
        CityStyle::Sprawl => v[1] = 1.0,
    }
    for (i, p) in spec.proportions.as_array().iter().enumerate() {
        v[2 + i] = (*p / 100.0) as f32;
    }
    for (i, n) in spec.counts.as_array().iter().enumerate() {
        v[8 + i] = (*n).min(COUNT_CAP) as f32 / COUNT_CAP as f32;
    }
    ConditionVector(v)
}

/// Adds signed percentage-point deltas to named classes, clamping to
/// `[0, 100]`. Other classes are untouched and nothing is renormalised.
pub fn perturb_targets<'a>(
    spec: &ConditionSpec,
    deltas: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<ConditionSpec, ConditionError> {
    let mut out = *spec;
    for (name, delta) in deltas {
        let class = Class::from_name(name)
            .filter(|c| *c != Class::Other)
            .ok_or_else(|| ConditionError::UnknownClass(name.to_string()))?;
        let v = (out.proportions.get(class) + delta).clamp(0.0, 100.0);
        out.proportions.set(class, (v * 100.0).round() / 100.0);
    }
    Ok(out)
}
