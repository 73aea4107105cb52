//! Class-name embeddings, prompt templates, and the relationship
//! descriptor `concat(T ⊙ g, T)`.
//!
//! The class table stands in for a frozen text encoder. Each template
//! string is embedded as the normalized sum of per-word unit vectors, where
//! every word's vector is drawn from a generator keyed by a hash of the
//! seed and the word. Class names sharing words ("red disk", "red ring")
//! therefore share embedding directions, which is what makes transfer to
//! unseen compositions possible at all. A class row is the renormalized
//! mean over its expanded templates.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{concat_last, Tape, Tensor, Var};

/// The fifteen augmented prompt templates; `{}` marks the class name.
pub const AUGMENTED_TEMPLATES: [&str; 15] = [
    "A photo of a {}.",
    "A photo of a small {}.",
    "A photo of a medium {}.",
    "A photo of a large {}.",
    "This is a photo of a {}.",
    "This is a photo of a small {}.",
    "This is a photo of a medium {}.",
    "This is a photo of a large {}.",
    "A {} in the scene.",
    "A photo of a {} in the scene.",
    "There is a {} in the scene.",
    "There is the {} in the scene.",
    "This is a {} in the scene.",
    "This is the {} in the scene.",
    "This is one {} in the scene.",
];

pub const SINGLE_TEMPLATE: &str = "A photo of a {}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TemplateMode {
    #[default]
    Single,
    Augmented,
}

impl std::str::FromStr for TemplateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TemplateMode::Single),
            "augmented" => Ok(TemplateMode::Augmented),
            _ => Err(Error::Config(format!("unknown template mode {s:?}"))),
        }
    }
}

pub fn expand_templates(class_name: &str, mode: TemplateMode) -> Result<Vec<String>> {
    if class_name.trim().is_empty() {
        return Err(Error::invalid("class name must be nonempty"));
    }
    let templates: &[&str] = match mode {
        TemplateMode::Single => &[SINGLE_TEMPLATE],
        TemplateMode::Augmented => &AUGMENTED_TEMPLATES,
    };
    Ok(templates
        .iter()
        .map(|t| t.replace("{}", class_name))
        .collect())
}

fn word_vector(word: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(word.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let t = Tensor::randn([dim], 1.0, &mut rng);
    normalized(t.into_data())
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

fn words(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Embeds one sentence as the normalized sum of its word vectors.
pub fn embed_sentence(sentence: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for word in words(sentence) {
        for (a, b) in acc.iter_mut().zip(word_vector(&word, seed, dim)) {
            *a += b;
        }
    }
    normalized(acc)
}

/// Frozen `C×d` table of unit-norm class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    pub names: Vec<String>,
    pub table: Tensor,
    pub frozen: bool,
}

impl ClassEmbeddingTable {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Table restricted to the given rows, in that order.
    pub fn select(&self, rows: &[usize]) -> Result<ClassEmbeddingTable> {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut names = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::invalid(format!("class row {r} out of range")));
            }
            data.extend_from_slice(self.table.row(r));
            names.push(self.names[r].clone());
        }
        Ok(ClassEmbeddingTable {
            names,
            table: Tensor::matrix(rows.len(), d, data)?,
            frozen: self.frozen,
        })
    }
}

pub fn embed_classes(
    class_names: &[String],
    seed: u64,
    dim: usize,
    mode: TemplateMode,
) -> Result<ClassEmbeddingTable> {
    if class_names.is_empty() {
        return Err(Error::invalid("no class names"));
    }
    let mut seen = HashSet::new();
    for n in class_names {
        if !seen.insert(n.as_str()) {
            return Err(Error::invalid(format!("duplicate class name {n:?}")));
        }
    }
    let prompts: Vec<Vec<String>> = class_names
        .iter()
        .map(|n| expand_templates(n, mode))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(class_names.len() * dim);
    for prompts in &prompts {
        let mut mean = vec![0.0; dim];
        for p in prompts {
            for (m, v) in mean.iter_mut().zip(embed_sentence(p, seed, dim)) {
                *m += v / prompts.len() as f64;
            }
        }
        data.extend(normalized(mean));
    }
    Ok(ClassEmbeddingTable {
        names: class_names.to_vec(),
        table: Tensor::matrix(class_names.len(), dim, data)?,
        frozen: true,
    })
}

/// `T̂ ∈ ℝ^{C×2d}`; the first `d` columns are `T ⊙ g`, the rest `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipDescriptor(pub Tensor);

pub fn relationship_descriptor(table: &Tensor, g: &Tensor) -> Result<RelationshipDescriptor> {
    let tape = Tape::new();
    let t = tape.constant(table.clone());
    let g = tape.constant(g.clone());
    let out = descriptor(t, g)?;
    Ok(RelationshipDescriptor(out.value().as_ref().clone()))
}

/// Differentiable form of [`relationship_descriptor`].
pub fn descriptor<'t>(table: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let (ts, gs) = (table.shape(), g.shape());
    let d = *ts.last().unwrap_or(&0);
    if ts.len() != 2 || gs != [1, d] {
        return Err(Error::ShapeMismatch {
            op: "relationship_descriptor",
            lhs: ts,
            rhs: gs,
        });
    }
    concat_last(&[table.mul(g)?, table])
}

/// Seen/unseen membership of a class list, in global class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub names: Vec<String>,
    pub seen: Vec<bool>,
}

impl ClassSplit {
    pub fn new(names: Vec<String>, seen: Vec<bool>) -> Result<Self> {
        if names.len() != seen.len() {
            return Err(Error::invalid("split names and flags differ in length"));
        }
        Ok(ClassSplit { names, seen })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.seen[i]).collect()
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.get(class).copied().unwrap_or(false)
    }

    /// Parses lines of `<class name> <seen|unseen>`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, tag) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| Error::Config(format!("line {}: expected `name tag`", lineno + 1)))?;
            let flag = match tag {
                "seen" => true,
                "unseen" => false,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: tag must be seen|unseen, got {other:?}",
                        lineno + 1
                    )))
                }
            };
            names.push(name.trim().to_string());
            seen.push(flag);
        }
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("duplicate class in split".into()));
        }
        ClassSplit::new(names, seen)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (n, &f) in self.names.iter().zip(&self.seen) {
            let _ = writeln!(s, "{n} {}", if f { "seen" } else { "unseen" });
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&crate::error::read_text(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_template() {
        assert_eq!(
            expand_templates("cow", TemplateMode::Single).unwrap(),
            vec!["A photo of a cow."]
        );
        assert!(expand_templates("", TemplateMode::Augmented).is_err());
        assert!(expand_templates("", TemplateMode::Single).is_err());
    }

    #[test]
    fn ninth_augmented_template() {
        let t = expand_templates("grass", TemplateMode::Augmented).unwrap();
        assert_eq!(t.len(), 15);
        assert_eq!(t[8], "A grass in the scene.");
    }

    #[test]
    fn table_rows_are_unit_and_distinct() {
        let t = embed_classes(&names(&["cat", "dog"]), 7, 64, TemplateMode::Augmented).unwrap();
        assert_eq!(t.table.shape(), &[2, 64]);
        for r in 0..2 {
            let n: f64 = t.table.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_ne!(t.table.row(0), t.table.row(1));
        assert!(t.frozen);
    }

    #[test]
    fn deterministic_and_permutation_equivariant() {
        let a = embed_classes(&names(&["red disk", "blue ring", "sky"]), 3, 16, TemplateMode::Single).unwrap();
        let b = embed_classes(&names(&["red disk", "blue ring", "sky"]), 3, 16, TemplateMode::Single).unwrap();
        assert_eq!(a, b);
        let p = embed_classes(&names(&["sky", "red disk", "blue ring"]), 3, 16, TemplateMode::Single).unwrap();
        assert_eq!(p.table.row(0), a.table.row(2));
        assert_eq!(p.table.row(1), a.table.row(0));
        assert_eq!(p.table.row(2), a.table.row(1));
    }

    #[test]
    fn duplicates_rejected() {
        assert!(embed_classes(&names(&["a", "a"]), 0, 8, TemplateMode::Single).is_err());
    }

    #[test]
    fn shared_words_raise_similarity() {
        let t = embed_classes(
            &names(&["red disk", "red ring", "blue square"]),
            11,
            64,
            TemplateMode::Single,
        )
        .unwrap();
        let dot = |i: usize, j: usize| -> f64 {
            t.table.row(i).iter().zip(t.table.row(j)).map(|(a, b)| a * b).sum()
        };
        assert!(dot(0, 1) > dot(0, 2));
    }

    #[test]
    fn descriptor_identities() {
        let table = Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0.5, 2.]).unwrap();
        let ones = relationship_descriptor(&table, &Tensor::ones([1, 3])).unwrap().0;
        assert_eq!(ones.row(0), &[1., 2., 3., 1., 2., 3.]);
        let zeros = relationship_descriptor(&table, &Tensor::zeros([1, 3])).unwrap().0;
        assert_eq!(zeros.row(1), &[0., 0., 0., -1., 0.5, 2.]);
        assert!(relationship_descriptor(&table, &Tensor::ones([1, 4])).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let text = "# toy split\nbackground seen\nred disk seen\nred ring unseen\n";
        let s = ClassSplit::parse(text).unwrap();
        assert_eq!(s.names, names(&["background", "red disk", "red ring"]));
        assert_eq!(s.seen_ids(), vec![0, 1]);
        assert_eq!(s.unseen_ids(), vec![2]);
        assert_eq!(ClassSplit::parse(&s.to_text()).unwrap(), s);
        assert!(ClassSplit::parse("cow maybe").is_err());
        assert!(ClassSplit::parse("cow seen\ncow unseen").is_err());
    }
}
