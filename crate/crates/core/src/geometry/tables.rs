//! Per-type chemistry read from an editable JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT: &str = "prior-bridge-atom-tables";
const VERSION: u32 = 1;
const BUILTIN: &str = include_str!("../../data/atom_tables.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomType {
    pub symbol: String,
    pub covalent_radius: f64,
    pub valency: u32,
    pub charge: f64,
}

impl AtomType {
    pub fn new(symbol: &str, covalent_radius: f64, valency: u32, charge: f64) -> Self {
        Self {
            symbol: symbol.to_string(),
            covalent_radius,
            valency,
            charge,
        }
    }
}

/// Ordered type list; the position of a type is its one-hot channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomTables {
    pub format: String,
    pub version: u32,
    pub lj_sigma: f64,
    pub coulomb_kappa: f64,
    pub types: Vec<AtomType>,
}

impl AtomTables {
    pub fn from_types(types: Vec<AtomType>, lj_sigma: f64, coulomb_kappa: f64) -> Result<Self> {
        let t = Self {
            format: FORMAT.into(),
            version: VERSION,
            lj_sigma,
            coulomb_kappa,
            types,
        };
        t.validate()?;
        Ok(t)
    }

    /// Tables shipped in `data/atom_tables.json`.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled atom tables are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tables serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Table(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Table(format!("unsupported tables version {}", self.version)));
        }
        if !(self.lj_sigma > 0.0 && self.lj_sigma.is_finite()) {
            return Err(Error::Table("lj_sigma must be positive".into()));
        }
        if !(self.coulomb_kappa > 0.0 && self.coulomb_kappa.is_finite()) {
            return Err(Error::Table("coulomb_kappa must be positive".into()));
        }
        if self.types.is_empty() {
            return Err(Error::Table("no atom types".into()));
        }
        for (i, t) in self.types.iter().enumerate() {
            if !(t.covalent_radius > 0.0 && t.covalent_radius.is_finite()) || t.valency == 0 || !(t.charge > 0.0 && t.charge.is_finite()) {
                return Err(Error::Table(format!("type {:?} has a non-positive entry", t.symbol)));
            }
            if self.types[..i].iter().any(|o| o.symbol == t.symbol) {
                return Err(Error::Table(format!("duplicate symbol {:?}", t.symbol)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&AtomType> {
        self.types
            .get(index)
            .ok_or_else(|| Error::Table(format!("no table entry for type index {index}")))
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        self.types
            .iter()
            .position(|t| t.symbol.eq_ignore_ascii_case(symbol))
            .ok_or_else(|| Error::Table(format!("unknown atom symbol {symbol:?}")))
    }

    pub fn symbols(&self) -> Vec<String> {
        self.types.iter().map(|t| t.symbol.clone()).collect()
    }

    /// Restriction to the given symbols, in that order.
    pub fn select<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Self> {
        let types = symbols
            .iter()
            .map(|s| self.index_of(s.as_ref()).map(|i| self.types[i].clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_types(types, self.lj_sigma, self.coulomb_kappa)
    }
}
