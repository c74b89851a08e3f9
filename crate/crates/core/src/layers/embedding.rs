use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init, Param, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

/// `V × d` lookup table. Row 0 is padding: zero at init, never updated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Embedding {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let mut w = init::xavier::<f32>(self.vocab, self.dim, rng);
        w.data_mut()[..self.dim].fill(0.0);
        ps.insert_param(
            self.name.clone(),
            Param {
                value: w,
                frozen: false,
                pad_row: true,
            },
        )
    }

    pub fn num_elements(&self) -> usize {
        self.vocab * self.dim
    }

    /// One output row per id.
    pub fn lookup<S: Scalar>(&self, g: &mut Graph<'_, S>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Index(format!(
                "{}: id {bad} outside vocabulary of {}",
                self.name, self.vocab
            )));
        }
        let table = g.param(&self.name)?;
        g.gather_rows(table, ids)
    }

    /// Loads vectors from a text file with one `token v1 ... vd` per line.
    /// Tokens the lookup does not know are skipped; returns rows filled.
    pub fn import_text(
        &self,
        ps: &mut ParamStore,
        path: &Path,
        lookup: impl Fn(&str) -> Option<usize>,
    ) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let table = ps
            .get_mut(&self.name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {}", self.name)))?;
        let mut filled = 0;
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(str::parse::<f32>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            if values.len() != self.dim {
                return Err(Error::Data(format!(
                    "{}:{}: {} values, expected {}",
                    path.display(),
                    lineno + 1,
                    values.len(),
                    self.dim
                )));
            }
            match lookup(token) {
                Some(id) if id > 0 && id < self.vocab => {
                    table.value.data_mut()[id * self.dim..(id + 1) * self.dim].copy_from_slice(&values);
                    filled += 1;
                }
                _ => {}
            }
        }
        Ok(filled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    #[test]
    fn pad_row_is_zero_and_flagged() {
        let e = Embedding::new("emb", 5, 3);
        let mut ps = ParamStore::new();
        e.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = ps.get("emb").unwrap();
        assert!(p.pad_row);
        assert_eq!(&p.value.data()[..3], &[0.0; 3]);
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let e = Embedding::new("emb", 5, 3);
        let mut ps = ParamStore::new();
        e.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new(&ps, Mode::Eval, 0);
        let rows = e.lookup(&mut g, &[4, 1]).unwrap();
        assert_eq!(g.shape(rows), (2, 3));
        assert!(matches!(e.lookup(&mut g, &[5]), Err(Error::Index(_))));
    }

    #[test]
    fn text_import_fills_known_rows() {
        let e = Embedding::new("emb", 4, 2);
        let mut ps = ParamStore::new();
        e.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "alpha 1.5 -2").unwrap();
        writeln!(f, "unknown 9 9").unwrap();
        let n = e
            .import_text(&mut ps, f.path(), |t| (t == "alpha").then_some(2))
            .unwrap();
        assert_eq!(n, 1);
        assert_eq!(ps.value("emb").unwrap().row(2), &[1.5, -2.0]);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "alpha 1.5").unwrap();
        assert!(e.import_text(&mut ps, bad.path(), |_| Some(2)).is_err());
    }
}
