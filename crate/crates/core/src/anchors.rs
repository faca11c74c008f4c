//! Emotion anchors: the reference (valence, arousal) position of every
//! categorical emotion.
//!
//! Category names are normalized to lower case on the way in. No stemming is
//! applied, so `disgust` and `disgusted` are different categories; the anchor
//! file decides the spelling.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{AvError, Result};

pub const NEUTRAL: &str = "neutral";

/// Canonical form of a category name.
pub fn normalize_label(name: &str) -> String {
    name.trim().to_lowercase()
}

/// A 2-D point on the arousal-valence plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Av {
    pub valence: f64,
    pub arousal: f64,
}

impl Av {
    pub const fn new(valence: f64, arousal: f64) -> Self {
        Av { valence, arousal }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.valence, self.arousal]
    }
}

/// Map from category name to anchor position.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTable {
    entries: BTreeMap<String, Av>,
}

/// Circumplex positions for ten categories, plus neutral at the
/// origin.
const DEFAULT_ANCHORS: [(&str, f64, f64); 11] = [
    ("angry", -0.51, 0.59),
    ("boredom", -0.65, -0.62),
    ("contempt", -0.80, 0.20),
    ("disgusted", -0.60, 0.35),
    ("excited", 0.62, 0.75),
    ("fearful", -0.64, 0.60),
    ("frustrated", -0.64, 0.52),
    ("happy", 0.81, 0.51),
    ("sad", -0.63, -0.27),
    ("surprised", 0.40, 0.67),
    (NEUTRAL, 0.0, 0.0),
];

impl AnchorTable {
    /// Validates and builds a table. Names are normalized; `neutral` must be
    /// present and sit exactly at the origin.
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Av)>,
        S: AsRef<str>,
    {
        let mut map = BTreeMap::new();
        for (name, av) in entries {
            let key = normalize_label(name.as_ref());
            if key.is_empty() {
                return Err(AvError::input("anchor with empty name"));
            }
            for v in [av.valence, av.arousal] {
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(AvError::input(format!("anchor `{key}` has value {v} outside [-1, 1]")));
                }
            }
            if map.insert(key.clone(), av).is_some() {
                return Err(AvError::input(format!("duplicate anchor `{key}`")));
            }
        }
        match map.get(NEUTRAL) {
            None => return Err(AvError::input("anchor table has no `neutral` entry")),
            Some(av) if av.valence != 0.0 || av.arousal != 0.0 => {
                return Err(AvError::input("`neutral` anchor must be (0, 0)"))
            }
            Some(_) => {}
        }
        Ok(AnchorTable { entries: map })
    }

    pub fn default_table() -> Self {
        let entries = DEFAULT_ANCHORS.iter().map(|&(name, v, a)| (name, Av::new(v, a)));
        AnchorTable::new(entries).expect("built-in anchors are valid")
    }

    /// Looks up a category, normalizing the name first.
    pub fn get(&self, name: &str) -> Option<Av> {
        self.entries.get(&normalize_label(name)).copied()
    }

    pub fn lookup(&self, name: &str) -> Result<Av> {
        self.get(name).ok_or_else(|| AvError::UnknownLabel(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(&normalize_label(name))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Av)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, [f64; 2]> = serde_json::from_str(text)?;
        AnchorTable::new(raw.into_iter().map(|(k, [v, a])| (k, Av::new(v, a))))
    }

    /// Canonical JSON: sorted lower-case keys, pretty printed, trailing newline.
    pub fn to_json_string(&self) -> String {
        let raw: BTreeMap<&str, [f64; 2]> = self.entries.iter().map(|(k, v)| (k.as_str(), v.to_array())).collect();
        let mut s = serde_json::to_string_pretty(&raw).expect("anchor map serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AvError::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            AvError::Json(j) => AvError::format(path, j.to_string()),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| AvError::io(path, e))
    }
}

impl Default for AnchorTable {
    fn default() -> Self {
        AnchorTable::default_table()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_matches_reference_values() {
        let t = AnchorTable::default_table();
        assert_eq!(t.len(), 11);
        let expected = [
            ("Angry", -0.51, 0.59),
            ("Boredom", -0.65, -0.62),
            ("Contempt", -0.80, 0.20),
            ("Disgusted", -0.60, 0.35),
            ("Excited", 0.62, 0.75),
            ("Fearful", -0.64, 0.60),
            ("Frustrated", -0.64, 0.52),
            ("Happy", 0.81, 0.51),
            ("Sad", -0.63, -0.27),
            ("Surprised", 0.40, 0.67),
            ("Neutral", 0.0, 0.0),
        ];
        for (name, v, a) in expected {
            assert_eq!(t.lookup(name).unwrap(), Av::new(v, a), "{name}");
        }
    }

    #[test]
    fn missing_neutral_is_an_error() {
        let err = AnchorTable::from_json_str(r#"{"happy": [0.81, 0.51]}"#).unwrap_err();
        assert!(err.to_string().contains("neutral"));
    }

    #[test]
    fn out_of_range_is_rejected() {
        let err = AnchorTable::from_json_str(r#"{"neutral": [0, 0], "x": [1.5, 0.0]}"#).unwrap_err();
        assert!(matches!(err, AvError::Input(_)));
        assert!(AnchorTable::from_json_str(r#"{"neutral": [0.1, 0]}"#).is_err());
    }

    #[test]
    fn spelling_variants_stay_distinct() {
        let t = AnchorTable::from_json_str(r#"{"neutral": [0, 0], "disgust": [-0.6, 0.3], "Disgusted": [-0.6, 0.35]}"#)
            .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.lookup("DISGUSTED").unwrap().arousal, 0.35);
        assert_eq!(t.lookup("disgust").unwrap().arousal, 0.3);
    }

    #[test]
    fn canonical_json_round_trips() {
        let t = AnchorTable::default_table();
        let s = t.to_json_string();
        let back = AnchorTable::from_json_str(&s).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json_string(), s);
    }
}
