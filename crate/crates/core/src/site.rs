use std::fmt;

use serde::{Deserialize, Serialize};

/// A vertex of the site set.
///
/// Ordering is derived and used to break ties inside breadth-first layers,
/// so windows are reproducible bit-for-bit.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum Site {
    /// Integer coordinate (half-lines, lines).
    Int(i64),
    /// Path word from the root of a tree; the empty word is the root.
    Word(Vec<u8>),
    /// Opaque key, used by explicit finite models.
    Named(String),
}

impl Site {
    pub fn root_word() -> Site {
        Site::Word(Vec::new())
    }

    pub fn named(s: impl Into<String>) -> Site {
        Site::Named(s.into())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Site::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_word(&self) -> Option<&[u8]> {
        match self {
            Site::Word(w) => Some(w),
            _ => None,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Int(i) => write!(f, "{i}"),
            Site::Word(w) => {
                f.write_str("o")?;
                for c in w {
                    write!(f, ".{c}")?;
                }
                Ok(())
            }
            Site::Named(s) => f.write_str(s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_keys() {
        assert_eq!(Site::Int(-3).to_string(), "-3");
        assert_eq!(Site::root_word().to_string(), "o");
        assert_eq!(Site::Word(vec![0, 2, 1]).to_string(), "o.0.2.1");
        assert_eq!(Site::named("a").to_string(), "a");
    }

    #[test]
    fn ordering_is_by_variant_then_value() {
        let mut v = vec![Site::Int(2), Site::Int(-1), Site::Word(vec![1]), Site::Word(vec![0])];
        v.sort();
        assert_eq!(v, vec![Site::Int(-1), Site::Int(2), Site::Word(vec![0]), Site::Word(vec![1])]);
    }
}
