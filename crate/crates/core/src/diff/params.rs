use std::ops::Range;

use super::DiffError;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter storage with a registry of named, contiguous blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its range.
    pub fn register(&mut self, name: impl Into<String>, values: &[f64]) -> Range<usize> {
        let offset = self.values.len();
        self.values.extend_from_slice(values);
        self.entries.push(ParamEntry {
            name: name.into(),
            offset,
            len: values.len(),
        });
        offset..offset + values.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&[f64], DiffError> {
        let e = self
            .entry(name)
            .ok_or_else(|| DiffError::UnknownBlock(name.to_string()))?;
        Ok(&self.values[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64], DiffError> {
        let r = self
            .entry(name)
            .ok_or_else(|| DiffError::UnknownBlock(name.to_string()))?
            .range();
        Ok(&mut self.values[r])
    }

    /// Same registry with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != self.values.len() {
            return Err(DiffError::Length {
                what: "values",
                got: values.len(),
                expected: self.values.len(),
            });
        }
        Ok(Self {
            values,
            entries: self.entries.clone(),
        })
    }

    /// Boolean mask over coordinates selecting blocks whose name satisfies `pred`.
    pub fn mask(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        let mut m = vec![false; self.values.len()];
        for e in &self.entries {
            if pred(&e.name) {
                m[e.range()].iter_mut().for_each(|b| *b = true);
            }
        }
        m
    }

    /// Name of the block holding `coordinate`.
    pub fn block_of(&self, coordinate: usize) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.range().contains(&coordinate))
            .map(|e| e.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_contiguous() {
        let mut p = ParamVector::new();
        assert_eq!(p.register("a", &[1.0, 2.0]), 0..2);
        assert_eq!(p.register("b", &[3.0]), 2..3);
        assert_eq!(p.register("c", &[4.0, 5.0, 6.0]), 3..6);
        let total: usize = p.entries().iter().map(|e| e.len).sum();
        assert_eq!(total, p.len());
        assert_eq!(p.get("c").unwrap(), &[4.0, 5.0, 6.0]);
        p.get_mut("b").unwrap()[0] = 9.0;
        assert_eq!(p.as_slice()[2], 9.0);
        assert_eq!(p.block_of(4), Some("c"));
        assert_eq!(p.mask(|n| n == "a"), vec![true, true, false, false, false, false]);
        assert!(p.get("zz").is_err());
        assert!(p.with_values(vec![0.0]).is_err());
    }
}
