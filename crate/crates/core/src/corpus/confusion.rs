//! Phoneme confusion classes: substitutions made by the phoneme channel stay
//! inside the class of the original phoneme.

use std::path::Path;

use crate::corpus::phone::Phone;
use crate::error::{Error, Result};

const BUILTIN_CLASSES: &str = include_str!("../../data/confusion_classes.txt");

#[derive(Clone, Debug)]
pub struct ConfusionClasses {
    classes: Vec<Vec<Phone>>,
    class_of: Vec<usize>,
}

impl ConfusionClasses {
    /// Vowels plus consonants grouped by manner of articulation.
    pub fn builtin() -> ConfusionClasses {
        ConfusionClasses::parse(BUILTIN_CLASSES).expect("builtin confusion table is well formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ConfusionClasses> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ConfusionClasses::parse(&text)
    }

    /// One class per non-empty line. Every ARPABET symbol must appear in exactly
    /// one class and every class needs at least two members.
    pub fn parse(text: &str) -> Result<ConfusionClasses> {
        let bad = |line: usize, message: String| Error::Parse {
            what: "confusion table",
            line,
            message,
        };
        let mut classes = Vec::new();
        let mut class_of = vec![usize::MAX; Phone::COUNT - 1];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut members = Vec::new();
            for sym in line.split_whitespace() {
                let p = Phone::parse(sym)
                    .filter(|p| !p.is_pause())
                    .ok_or_else(|| bad(lineno + 1, format!("unknown phoneme `{sym}`")))?;
                if class_of[p.index()] != usize::MAX {
                    return Err(bad(lineno + 1, format!("`{sym}` listed twice")));
                }
                class_of[p.index()] = classes.len();
                members.push(p);
            }
            if members.len() < 2 {
                return Err(bad(lineno + 1, "class needs at least two phonemes".into()));
            }
            classes.push(members);
        }
        if let Some(missing) = Phone::all_phonemes().find(|p| class_of[p.index()] == usize::MAX) {
            return Err(bad(0, format!("`{missing}` belongs to no class")));
        }
        Ok(ConfusionClasses { classes, class_of })
    }

    pub fn classes(&self) -> &[Vec<Phone>] {
        &self.classes
    }

    /// Members of the class containing `p`; `None` for the pause.
    pub fn class_of(&self, p: Phone) -> Option<&[Phone]> {
        if p.is_pause() {
            return None;
        }
        Some(&self.classes[self.class_of[p.index()]])
    }

    pub fn same_class(&self, a: Phone, b: Phone) -> bool {
        !a.is_pause() && !b.is_pause() && self.class_of[a.index()] == self.class_of[b.index()]
    }
}
