//! Country to region / subregion association (ISO 3166 codes, UN M49
//! grouping).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub region: String,
    pub subregion: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionMap {
    entries: BTreeMap<String, RegionEntry>,
}

/// `(country, region, subregion)` for the three regions and nine subregions
/// used for restricted portfolios, plus a few Eastern European countries
/// that belong to a region but none of the nine subregions.
const DEFAULT_MAP: &[(&str, &str, &str)] = &[
    ("US", "America", "Northern America"),
    ("CA", "America", "Northern America"),
    ("BM", "America", "Northern America"),
    ("MX", "America", "Latin America and the Caribbean"),
    ("BR", "America", "Latin America and the Caribbean"),
    ("AR", "America", "Latin America and the Caribbean"),
    ("CL", "America", "Latin America and the Caribbean"),
    ("CO", "America", "Latin America and the Caribbean"),
    ("PE", "America", "Latin America and the Caribbean"),
    ("PA", "America", "Latin America and the Caribbean"),
    ("KY", "America", "Latin America and the Caribbean"),
    ("PR", "America", "Latin America and the Caribbean"),
    ("CN", "Asia", "Eastern Asia"),
    ("JP", "Asia", "Eastern Asia"),
    ("KR", "Asia", "Eastern Asia"),
    ("HK", "Asia", "Eastern Asia"),
    ("TW", "Asia", "Eastern Asia"),
    ("MO", "Asia", "Eastern Asia"),
    ("SG", "Asia", "South-eastern Asia"),
    ("MY", "Asia", "South-eastern Asia"),
    ("TH", "Asia", "South-eastern Asia"),
    ("ID", "Asia", "South-eastern Asia"),
    ("PH", "Asia", "South-eastern Asia"),
    ("VN", "Asia", "South-eastern Asia"),
    ("IN", "Asia", "Southern Asia"),
    ("PK", "Asia", "Southern Asia"),
    ("BD", "Asia", "Southern Asia"),
    ("LK", "Asia", "Southern Asia"),
    ("IL", "Asia", "Western Asia"),
    ("TR", "Asia", "Western Asia"),
    ("SA", "Asia", "Western Asia"),
    ("AE", "Asia", "Western Asia"),
    ("QA", "Asia", "Western Asia"),
    ("KW", "Asia", "Western Asia"),
    ("CY", "Asia", "Western Asia"),
    ("GB", "Europe", "Northern Europe"),
    ("IE", "Europe", "Northern Europe"),
    ("SE", "Europe", "Northern Europe"),
    ("NO", "Europe", "Northern Europe"),
    ("DK", "Europe", "Northern Europe"),
    ("FI", "Europe", "Northern Europe"),
    ("IS", "Europe", "Northern Europe"),
    ("JE", "Europe", "Northern Europe"),
    ("IT", "Europe", "Southern Europe"),
    ("ES", "Europe", "Southern Europe"),
    ("PT", "Europe", "Southern Europe"),
    ("GR", "Europe", "Southern Europe"),
    ("MT", "Europe", "Southern Europe"),
    ("SI", "Europe", "Southern Europe"),
    ("DE", "Europe", "Western Europe"),
    ("FR", "Europe", "Western Europe"),
    ("NL", "Europe", "Western Europe"),
    ("BE", "Europe", "Western Europe"),
    ("CH", "Europe", "Western Europe"),
    ("AT", "Europe", "Western Europe"),
    ("LU", "Europe", "Western Europe"),
    ("PL", "Europe", ""),
    ("CZ", "Europe", ""),
    ("HU", "Europe", ""),
    ("RU", "Europe", ""),
];

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    country: String,
    region: String,
    subregion: String,
}

impl RegionMap {
    pub fn iso_default() -> Self {
        let mut map = RegionMap::default();
        for (c, r, s) in DEFAULT_MAP {
            map.insert(c, r, (!s.is_empty()).then_some(*s)).expect("default map has no duplicates");
        }
        map
    }

    pub fn insert(&mut self, country: &str, region: &str, subregion: Option<&str>) -> Result<()> {
        if self.entries.contains_key(country) {
            return Err(Error::Invalid(format!("country {country} mapped twice")));
        }
        self.entries.insert(
            country.to_string(),
            RegionEntry {
                region: region.to_string(),
                subregion: subregion.map(str::to_string),
            },
        );
        Ok(())
    }

    pub fn get(&self, country: &str) -> Option<&RegionEntry> {
        self.entries.get(country)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn countries(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Distinct region names, sorted.
    pub fn regions(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.values().map(|e| e.region.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Distinct subregion names, sorted.
    pub fn subregions(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.values().filter_map(|e| e.subregion.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn countries_in_region(&self, region: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.region == region)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn countries_in_subregion(&self, subregion: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.subregion.as_deref() == Some(subregion))
            .map(|(c, _)| c.as_str())
            .collect()
    }

    /// Reads `country,region,subregion` rows; an empty subregion means none.
    pub fn read_csv<R: Read>(input: R, file: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["country", "region", "subregion"] {
            return Err(Error::Parse {
                file: file.to_string(),
                line: 1,
                message: "expected header country,region,subregion".into(),
            });
        }
        let mut map = RegionMap::default();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| Error::Parse {
                file: file.to_string(),
                line,
                message: e.to_string(),
            })?;
            if row.country.is_empty() || row.region.is_empty() {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line,
                    message: "country and region must be non-empty".into(),
                });
            }
            if map.get(&row.country).is_some() {
                return Err(Error::Conflict {
                    file: file.to_string(),
                    line,
                    key: row.country,
                });
            }
            let sub = (!row.subregion.is_empty()).then_some(row.subregion.as_str());
            map.insert(&row.country, &row.region, sub)?;
        }
        Ok(map)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (country, e) in &self.entries {
            w.serialize(Row {
                country: country.clone(),
                region: e.region.clone(),
                subregion: e.subregion.clone().unwrap_or_default(),
            })?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}
