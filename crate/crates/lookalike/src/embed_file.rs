//! Embedding interchange files: a `dim=<d> count=<n>` header followed by
//! `label<TAB>v1,v2,...,vd` rows, values in 9-significant-digit decimal.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Labelled vectors of one shared dimension, indexed by label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> EmbeddingSet {
        EmbeddingSet {
            dim,
            labels: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, label: String, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Invalid(format!(
                "vector for `{label}` has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&label) {
            return Err(Error::Invalid(format!("duplicate label `{label}`")));
        }
        self.index.insert(label.clone(), self.labels.len());
        self.labels.push(label);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.index.get(label).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.labels
            .iter()
            .zip(&self.vectors)
            .map(|(l, v)| (l.as_str(), v.as_slice()))
    }
}

fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("dim={} count={}\n", set.dim(), set.len()));
    for (label, vector) in set.iter() {
        out.push_str(label);
        out.push('\t');
        let mut first = true;
        for v in vector {
            if !first {
                out.push(',');
            }
            out.push_str(&format_value(*v));
            first = false;
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Strict parser for the embedding file format.
pub fn parse_embeddings(content: &str, file: &str) -> Result<EmbeddingSet> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(file, 1, "missing header"))?;
    let mut dim: Option<usize> = None;
    let mut count: Option<usize> = None;
    for part in header.trim_end_matches('\r').split(' ') {
        match part.split_once('=') {
            Some(("dim", v)) => {
                dim = Some(v.parse().map_err(|_| Error::parse(file, 1, "bad dim"))? );
            }
            Some(("count", v)) => {
                count = Some(v.parse().map_err(|_| Error::parse(file, 1, "bad count"))?);
            }
            _ => return Err(Error::parse(file, 1, format!("unexpected header field `{part}`"))),
        }
    }
    let dim = dim.ok_or_else(|| Error::parse(file, 1, "header missing dim"))?;
    let count = count.ok_or_else(|| Error::parse(file, 1, "header missing count"))?;
    if dim == 0 {
        return Err(Error::parse(file, 1, "dim must be positive"));
    }

    let mut set = EmbeddingSet::new(dim);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (label, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(file, lineno, "expected label<TAB>values"))?;
        if label.is_empty() {
            return Err(Error::parse(file, lineno, "empty label"));
        }
        let mut vector = Vec::with_capacity(dim);
        for v in values.split(',') {
            let x: f64 = v
                .parse()
                .map_err(|_| Error::parse(file, lineno, format!("bad value `{v}`")))?;
            if !x.is_finite() {
                return Err(Error::parse(file, lineno, format!("non-finite value `{v}`")));
            }
            vector.push(x);
        }
        if vector.len() != dim {
            return Err(Error::parse(
                file,
                lineno,
                format!("expected {} values, found {}", dim, vector.len()),
            ));
        }
        set.push(label.to_string(), vector)
            .map_err(|e| Error::parse(file, lineno, e.to_string()))?;
    }
    if set.len() != count {
        return Err(Error::Invalid(format!(
            "{file}: header count {count} does not match {} rows",
            set.len()
        )));
    }
    Ok(set)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let file = path.display().to_string();
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_embeddings(&content, &file)
}
