//! Labeled feature rows grouped by website, with CSV persistence.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use super::{extract_features, feature_names, FeatureError};
use crate::traces::{to_cell_sequence, Dataset, DEFAULT_CELL_SIZE};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("row for {website}/{visit} has {got} values, expected {expected}")]
    Width {
        website: String,
        visit: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {website}/{visit}")]
    NonFinite { website: String, visit: String },
    #[error("feature table is empty")]
    Empty,
    #[error("unknown website {0}")]
    UnknownWebsite(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad csv value {value:?} on line {line}")]
    Parse { line: u64, value: String },
    #[error("csv header must start with website_id,visit_id")]
    Header,
}

/// Observations of one website.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRows {
    pub website: String,
    pub visits: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Feature rows grouped by website, websites in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    names: Vec<String>,
    classes: Vec<ClassRows>,
}

impl FeatureTable {
    /// Builds a table from `(website, visit, values)` rows. Websites are
    /// sorted; rows keep input order within a website.
    pub fn new(names: Vec<String>, rows: Vec<(String, String, Vec<f64>)>) -> Result<Self, TableError> {
        let width = names.len();
        let mut classes: Vec<ClassRows> = Vec::new();
        for (website, visit, values) in rows {
            if values.len() != width {
                return Err(TableError::Width {
                    website,
                    visit,
                    expected: width,
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TableError::NonFinite { website, visit });
            }
            match classes.iter_mut().find(|c| c.website == website) {
                Some(c) => {
                    c.visits.push(visit);
                    c.rows.push(values);
                }
                None => classes.push(ClassRows {
                    website,
                    visits: vec![visit],
                    rows: vec![values],
                }),
            }
        }
        if classes.is_empty() {
            return Err(TableError::Empty);
        }
        classes.sort_by(|a, b| a.website.cmp(&b.website));
        Ok(FeatureTable { names, classes })
    }

    /// Unnamed columns `f0, f1, ...`; convenient for synthetic worlds where
    /// `per_class[c]` holds the rows of website `c`.
    pub fn from_classes(per_class: Vec<Vec<Vec<f64>>>) -> Result<Self, TableError> {
        let width = per_class.iter().flatten().next().map_or(0, Vec::len);
        let digits = per_class.len().to_string().len();
        let rows = per_class
            .into_iter()
            .enumerate()
            .flat_map(|(c, rows)| {
                rows.into_iter()
                    .enumerate()
                    .map(move |(i, r)| (format!("site{c:0digits$}"), i.to_string(), r))
            })
            .collect();
        FeatureTable::new((0..width).map(|j| format!("f{j}")).collect(), rows)
    }

    /// Extracts the full fingerprint of every trace (converted to cells
    /// first if needed). Traces that fail extraction are reported and left
    /// out.
    pub fn from_dataset(dataset: &Dataset) -> Result<(Self, Vec<(String, String, FeatureError)>), TableError> {
        let traces: Vec<_> = dataset.iter().collect();
        let extracted: Vec<_> = traces
            .par_iter()
            .map(|t| {
                let cells;
                let t = if t.is_cell_form() {
                    *t
                } else {
                    cells = to_cell_sequence(t, DEFAULT_CELL_SIZE);
                    &cells
                };
                extract_features(t)
            })
            .collect();
        let mut rows = Vec::new();
        let mut failed = Vec::new();
        for (t, r) in traces.iter().zip(extracted) {
            match r {
                Ok(f) => rows.push((t.website_id.clone(), t.visit_id.clone(), f.into_values())),
                Err(e) => failed.push((t.website_id.clone(), t.visit_id.clone(), e)),
            }
        }
        Ok((FeatureTable::new(feature_names(), rows)?, failed))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn classes(&self) -> &[ClassRows] {
        &self.classes
    }

    pub fn websites(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.website.clone()).collect()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Total number of rows.
    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values of feature `f` over all rows, website-major.
    pub fn column(&self, f: usize) -> Vec<f64> {
        self.classes
            .iter()
            .flat_map(|c| c.rows.iter().map(move |r| r[f]))
            .collect()
    }

    /// Rows of one class restricted to `features`.
    pub fn class_projection(&self, class: usize, features: &[usize]) -> Vec<Vec<f64>> {
        self.classes[class]
            .rows
            .iter()
            .map(|r| features.iter().map(|&f| r[f]).collect())
            .collect()
    }

    /// Keeps only the listed websites, in sorted order.
    pub fn restrict(&self, websites: &[String]) -> Result<FeatureTable, TableError> {
        let mut classes = Vec::with_capacity(websites.len());
        for w in websites {
            let c = self
                .classes
                .iter()
                .find(|c| &c.website == w)
                .ok_or_else(|| TableError::UnknownWebsite(w.clone()))?;
            classes.push(c.clone());
        }
        classes.sort_by(|a, b| a.website.cmp(&b.website));
        Ok(FeatureTable {
            names: self.names.clone(),
            classes,
        })
    }

    /// Replaces each class's rows with the rows at `picks[class]`.
    pub fn reindexed(&self, picks: &[Vec<usize>]) -> FeatureTable {
        let classes = self
            .classes
            .iter()
            .zip(picks)
            .map(|(c, idx)| ClassRows {
                website: c.website.clone(),
                visits: idx.iter().map(|&i| c.visits[i].clone()).collect(),
                rows: idx.iter().map(|&i| c.rows[i].clone()).collect(),
            })
            .collect();
        FeatureTable {
            names: self.names.clone(),
            classes,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TableError> {
        self.write_csv_to(csv::Writer::from_path(path)?)
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv_to(csv::Writer::from_writer(&mut buf))
            .expect("in-memory csv");
        buf
    }

    fn write_csv_to<W: std::io::Write>(&self, mut w: csv::Writer<W>) -> Result<(), TableError> {
        w.write_record(
            ["website_id", "visit_id"]
                .into_iter()
                .chain(self.names.iter().map(String::as_str)),
        )?;
        for c in &self.classes {
            for (visit, row) in c.visits.iter().zip(&c.rows) {
                let mut record = vec![c.website.clone(), visit.clone()];
                record.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&record)?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<FeatureTable, TableError> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "website_id" || &header[1] != "visit_id" {
            return Err(TableError::Header);
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let values = record
                .iter()
                .skip(2)
                .map(|v| {
                    v.parse::<f64>().map_err(|_| TableError::Parse {
                        line,
                        value: v.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((record[0].to_string(), record[1].to_string(), values));
        }
        FeatureTable::new(names, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FEATURE_COUNT;
    use crate::traces::Trace;

    #[test]
    fn groups_and_sorts_websites() {
        let t = FeatureTable::new(
            vec!["a".into(), "b".into()],
            vec![
                ("w2".into(), "0".into(), vec![1.0, 2.0]),
                ("w1".into(), "0".into(), vec![3.0, 4.0]),
                ("w2".into(), "1".into(), vec![5.0, 6.0]),
            ],
        )
        .unwrap();
        assert_eq!(t.websites(), vec!["w1", "w2"]);
        assert_eq!(t.column(1), vec![4.0, 2.0, 6.0]);
        assert_eq!(t.class_projection(1, &[1]), vec![vec![2.0], vec![6.0]]);
        assert!(FeatureTable::new(vec!["a".into()], vec![("w".into(), "0".into(), vec![1.0, 2.0])]).is_err());
        assert!(FeatureTable::new(vec!["a".into()], vec![("w".into(), "0".into(), vec![f64::NAN])]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = FeatureTable::from_classes(vec![vec![vec![0.1, 2.0]], vec![vec![1.0 / 3.0, -4.5], vec![7.0, 8.0]]])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        t.write_csv(&path).unwrap();
        assert_eq!(FeatureTable::read_csv(&path).unwrap(), t);
    }

    #[test]
    fn extracts_full_width() {
        let traces = vec![
            Trace::from_cells(&[(0.0, 1), (0.1, -1)]).unwrap().with_labels("a", "0"),
            Trace::from_cells(&[(0.0, -1), (0.5, 1), (0.6, 1)])
                .unwrap()
                .with_labels("b", "0"),
        ];
        let (t, failed) = FeatureTable::from_dataset(&Dataset::from_traces(traces)).unwrap();
        assert!(failed.is_empty());
        assert_eq!(t.width(), FEATURE_COUNT);
        assert_eq!(t.len(), 2);
        assert_eq!(t.names()[0], "cat1_0");
    }
}
