//! Multi-site tabular datasets: CSV ingestion and emission, site-level splits.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Column roles for CSV ingestion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub site: String,
    pub features: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub targets: Vec<String>,
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Schema whose feature/covariate/target columns are taken from `ds`.
    pub fn for_dataset(ds: &Dataset) -> Self {
        Schema {
            site: "site".into(),
            features: ds.feature_names.clone(),
            covariates: ds.covariate_names.clone(),
            targets: ds.target_names.clone(),
        }
    }
}

/// Feature matrix, covariates and site membership for N samples.
///
/// Site ids are opaque strings; dense site codes follow first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    covariates: Matrix,
    targets: Matrix,
    site_of: Vec<String>,
    site_codes: Vec<usize>,
    sites: Vec<String>,
    rows_by_site: Vec<Vec<usize>>,
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with generated column names and no targets.
    pub fn new(features: Matrix, covariates: Matrix, site_of: Vec<String>) -> Result<Self> {
        let g = features.ncols();
        let p = covariates.ncols();
        let n = features.nrows();
        Self::with_targets(features, covariates, Matrix::zeros(n, 0), site_of)?.named(
            (1..=g).map(|j| format!("f{j}")).collect(),
            (1..=p).map(|j| format!("x{j}")).collect(),
            Vec::new(),
        )
    }

    pub fn with_targets(
        features: Matrix,
        covariates: Matrix,
        targets: Matrix,
        site_of: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::InvalidDataset("dataset has no rows".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidDataset("dataset has no feature columns".into()));
        }
        if covariates.nrows() != n || site_of.len() != n || targets.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "features have {n} rows, covariates {}, targets {}, site labels {}",
                covariates.nrows(),
                targets.nrows(),
                site_of.len()
            )));
        }
        if !features.is_finite() || !covariates.is_finite() || !targets.is_finite() {
            return Err(Error::InvalidDataset("non-finite value in dataset".into()));
        }
        let mut sites = Vec::new();
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut site_codes = Vec::with_capacity(n);
        let mut rows_by_site: Vec<Vec<usize>> = Vec::new();
        for (row, s) in site_of.iter().enumerate() {
            let code = *lookup.entry(s.as_str()).or_insert_with(|| {
                sites.push(s.clone());
                rows_by_site.push(Vec::new());
                sites.len() - 1
            });
            site_codes.push(code);
            rows_by_site[code].push(row);
        }
        let (g, p, t) = (features.ncols(), covariates.ncols(), targets.ncols());
        Ok(Dataset {
            features,
            covariates,
            targets,
            site_of,
            site_codes,
            sites,
            rows_by_site,
            feature_names: (1..=g).map(|j| format!("f{j}")).collect(),
            covariate_names: (1..=p).map(|j| format!("x{j}")).collect(),
            target_names: (1..=t).map(|j| format!("t{j}")).collect(),
        })
    }

    pub fn named(
        mut self,
        feature_names: Vec<String>,
        covariate_names: Vec<String>,
        target_names: Vec<String>,
    ) -> Result<Self> {
        if feature_names.len() != self.n_features()
            || covariate_names.len() != self.n_covariates()
            || target_names.len() != self.targets.ncols()
        {
            return Err(Error::DimensionMismatch("column name count does not match data".into()));
        }
        self.feature_names = feature_names;
        self.covariate_names = covariate_names;
        self.target_names = target_names;
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn covariates(&self) -> &Matrix {
        &self.covariates
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    /// Site ids in first-appearance order; position = dense site code.
    pub fn site_ids(&self) -> &[String] {
        &self.sites
    }

    pub fn site_of(&self) -> &[String] {
        &self.site_of
    }

    /// Dense site code of every row.
    pub fn site_codes(&self) -> &[usize] {
        &self.site_codes
    }

    pub fn rows_of_site(&self, code: usize) -> &[usize] {
        &self.rows_by_site[code]
    }

    pub fn site_sizes(&self) -> Vec<usize> {
        self.rows_by_site.iter().map(Vec::len).collect()
    }

    pub fn site_code(&self, id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == id)
    }

    /// Same rows and metadata with a replaced feature matrix.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::DimensionMismatch(format!(
                "replacement features are {:?}, dataset is {:?}",
                features.shape(),
                self.features.shape()
            )));
        }
        Ok(Dataset {
            features,
            ..self.clone()
        })
    }

    /// Rows in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        let ds = Dataset::with_targets(
            self.features.select_rows(rows),
            self.covariates.select_rows(rows),
            self.targets.select_rows(rows),
            rows.iter().map(|&r| self.site_of[r].clone()).collect(),
        )?;
        ds.named(
            self.feature_names.clone(),
            self.covariate_names.clone(),
            self.target_names.clone(),
        )
    }

    /// All rows whose site is in `ids`, file order preserved.
    pub fn subset_sites<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let keep: BTreeSet<&str> = ids.iter().map(AsRef::as_ref).collect();
        let rows: Vec<usize> = (0..self.n_samples())
            .filter(|&r| keep.contains(self.site_of[r].as_str()))
            .collect();
        self.subset_rows(&rows)
    }

    /// One single-site dataset per site, in site-code order.
    pub fn split_per_site(&self) -> Result<Vec<Dataset>> {
        self.rows_by_site.iter().map(|rows| self.subset_rows(rows)).collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["site".to_string()];
        header.extend(self.feature_names.iter().cloned());
        header.extend(self.covariate_names.iter().cloned());
        header.extend(self.target_names.iter().cloned());
        out.write_record(&header)?;
        for r in 0..self.n_samples() {
            let mut rec = vec![self.site_of[r].clone()];
            rec.extend(self.features.row(r).iter().map(f64::to_string));
            rec.extend(self.covariates.row(r).iter().map(f64::to_string));
            rec.extend(self.targets.row(r).iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Reads a CSV file with one header row; columns are bound by `schema`.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    if schema.features.is_empty() {
        return Err(Error::Schema("at least one feature column is required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let locate = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let site_col = locate(&schema.site)?;
    let feat_cols = schema.features.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;
    let cov_cols = schema.covariates.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;
    let tgt_cols = schema.targets.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;

    let mut feats = Vec::new();
    let mut covs = Vec::new();
    let mut tgts = Vec::new();
    let mut sites = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // 1-based data row numbering, header excluded
        let row = i + 1;
        let cell = |col: usize| -> Result<f64> {
            let name = header.get(col).unwrap_or_default().to_string();
            let raw = rec.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(Error::MissingValue { row, column: name });
            }
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, column: name });
            }
            Ok(v)
        };
        let site = rec.get(site_col).unwrap_or("").trim();
        if site.is_empty() {
            return Err(Error::MissingValue {
                row,
                column: schema.site.clone(),
            });
        }
        sites.push(site.to_string());
        for &c in &feat_cols {
            feats.push(cell(c)?);
        }
        for &c in &cov_cols {
            covs.push(cell(c)?);
        }
        for &c in &tgt_cols {
            tgts.push(cell(c)?);
        }
    }
    let n = sites.len();
    let ds = Dataset::with_targets(
        Matrix::from_vec(n, feat_cols.len(), feats)?,
        Matrix::from_vec(n, cov_cols.len(), covs)?,
        Matrix::from_vec(n, tgt_cols.len(), tgts)?,
        sites,
    )?;
    ds.named(
        schema.features.clone(),
        schema.covariates.clone(),
        schema.targets.clone(),
    )
}

/// Which sites went to training and which to testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSplit {
    pub train_sites: BTreeSet<String>,
    pub test_sites: BTreeSet<String>,
}

/// Holds out `n_test_sites` whole sites, chosen by a seeded shuffle.
pub fn split_by_sites(
    ds: &Dataset,
    n_test_sites: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, SiteSplit)> {
    let m = ds.n_sites();
    if n_test_sites == 0 || n_test_sites >= m {
        return Err(Error::InvalidArgument(format!(
            "n_test_sites must be in 1..{m}, got {n_test_sites}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test: BTreeSet<String> = order[..n_test_sites]
        .iter()
        .map(|&c| ds.site_ids()[c].clone())
        .collect();
    let train: BTreeSet<String> = ds
        .site_ids()
        .iter()
        .filter(|s| !test.contains(*s))
        .cloned()
        .collect();
    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
        (0..ds.n_samples()).partition(|&r| train.contains(&ds.site_of()[r]));
    Ok((
        ds.subset_rows(&train_rows)?,
        ds.subset_rows(&test_rows)?,
        SiteSplit {
            train_sites: train,
            test_sites: test,
        },
    ))
}
