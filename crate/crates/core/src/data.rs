//! Dataset loading, synthesis, and preprocessing.
//!
//! CSV files must carry a header. A [`SchemaConfig`] names the sensitive
//! column (and optionally a label column); every other column is a
//! feature. Discrete sensitive values and labels may be arbitrary
//! integers; they are remapped to dense ids by sorted value. All parsing
//! failures report the 1-based file line and column name.

use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::SensitiveBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveMode {
    Discrete,
    Continuous,
}

/// How to interpret a CSV file: which column holds the sensitive
/// attribute, how to read it, and (optionally) which column holds class
/// labels. Stored as JSON next to the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub sensitive_column: String,
    pub mode: SensitiveMode,
    #[serde(default)]
    pub label_column: Option<String>,
    /// Explicit feature columns. When absent, every column other than the
    /// sensitive and label columns is a feature.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Whether consumers should z-score the features before training.
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Feeds the sensitive column to the model as a feature as well.
    #[serde(default)]
    pub include_sensitive_in_features: bool,
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

impl SchemaConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Sensitive attribute for a whole dataset.
#[derive(Debug, Clone)]
pub enum Sensitive {
    /// Dense group ids in 0..n_groups, remapped from the raw values by
    /// sorted order.
    Discrete { groups: Vec<usize>, n_groups: usize },
    Continuous { values: Vec<f64> },
}

impl Sensitive {
    pub fn len(&self) -> usize {
        match self {
            Sensitive::Discrete { groups, .. } => groups.len(),
            Sensitive::Continuous { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> SensitiveMode {
        match self {
            Sensitive::Discrete { .. } => SensitiveMode::Discrete,
            Sensitive::Continuous { .. } => SensitiveMode::Continuous,
        }
    }

    /// Group ids, or an error in continuous mode (for metrics that need
    /// discrete groups).
    pub fn groups(&self) -> Result<(&[usize], usize)> {
        match self {
            Sensitive::Discrete { groups, n_groups } => Ok((groups, *n_groups)),
            Sensitive::Continuous { .. } => Err(Error::invalid(
                "operation needs discrete sensitive groups",
            )),
        }
    }

    pub fn values(&self) -> Result<&[f64]> {
        match self {
            Sensitive::Continuous { values } => Ok(values),
            Sensitive::Discrete { .. } => Err(Error::invalid(
                "operation needs a continuous sensitive attribute",
            )),
        }
    }

    /// Extracts the rows at `idx` as a batch for the fairness head.
    pub fn batch(&self, idx: &[usize]) -> SensitiveBatch {
        match self {
            Sensitive::Discrete { groups, n_groups } => SensitiveBatch::Discrete {
                groups: idx.iter().map(|&i| groups[i]).collect(),
                n_groups: *n_groups,
            },
            Sensitive::Continuous { values } => SensitiveBatch::Continuous {
                values: idx.iter().map(|&i| values[i]).collect(),
            },
        }
    }

    pub fn full_batch(&self) -> SensitiveBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub x: Array2<f64>,
    pub sensitive: Sensitive,
    /// Dense class ids, present when the schema names a label column.
    pub labels: Option<Vec<usize>>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Fingerprint of the feature layout and sensitive mode, stored in
    /// checkpoints so evaluation rejects mismatched data.
    pub fn schema_digest(&self) -> String {
        let mut text = self.feature_names.join("\x1f");
        text.push('\x1f');
        match &self.sensitive {
            Sensitive::Discrete { n_groups, .. } => {
                text.push_str(&format!("discrete:{n_groups}"));
            }
            Sensitive::Continuous { .. } => text.push_str("continuous"),
        }
        fnv1a_hex(text.as_bytes())
    }
}

/// 64-bit FNV-1a digest, lowercase hex.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Per-feature affine normalization fitted on one dataset and reused on
/// others (population statistics; a zero-variance feature is centered but
/// not scaled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Standardizer {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn inverse(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }

    fn check_dim(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.mean.len() {
            return Err(Error::invalid(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok(())
    }
}

/// Loads a CSV per the schema. The header row is required; the sensitive
/// column must exist; a named label column must exist. Errors carry the
/// 1-based file line (header is line 1).
pub fn load_csv(path: &Path, schema: &SchemaConfig) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::config("delimiter must be a single ASCII character"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(schema.delimiter as u8)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let sens_idx = find(&schema.sensitive_column).ok_or_else(|| {
        Error::data(format!(
            "sensitive column '{}' not found in header",
            schema.sensitive_column
        ))
    })?;
    let label_idx = match &schema.label_column {
        Some(name) => Some(find(name).ok_or_else(|| {
            Error::data(format!("label column '{name}' not found in header"))
        })?),
        None => None,
    };
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(names) => {
            let mut idx = Vec::with_capacity(names.len());
            for name in names {
                let j = find(name).ok_or_else(|| {
                    Error::data(format!("feature column '{name}' not found in header"))
                })?;
                if j == sens_idx && !schema.include_sensitive_in_features {
                    return Err(Error::config(format!(
                        "sensitive column '{name}' listed as a feature without \
                         include_sensitive_in_features"
                    )));
                }
                idx.push(j);
            }
            idx
        }
        None => (0..headers.len())
            .filter(|&j| {
                (j != sens_idx || schema.include_sensitive_in_features) && Some(j) != label_idx
            })
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::data("no feature columns remain"));
    }
    let feature_names: Vec<String> = feature_idx.iter().map(|&j| headers[j].to_string()).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_sensitive: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::data(format!(
                "line {line}: expected {} cells, found {}",
                headers.len(),
                record.len()
            )));
        }
        let cell = |j: usize| -> Result<f64> {
            let text = record[j].trim();
            if text.is_empty() {
                return Err(Error::data(format!(
                    "line {line}: column '{}' is empty",
                    &headers[j]
                )));
            }
            let v: f64 = text.parse().map_err(|_| {
                Error::data(format!(
                    "line {line}: column '{}' is not numeric: '{text}'",
                    &headers[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "line {line}: column '{}' is not finite: '{text}'",
                    &headers[j]
                )));
            }
            Ok(v)
        };

        rows.push(feature_idx.iter().map(|&j| cell(j)).collect::<Result<_>>()?);
        let s = cell(sens_idx)?;
        if schema.mode == SensitiveMode::Discrete && s.fract() != 0.0 {
            return Err(Error::data(format!(
                "line {line}: discrete sensitive value {s} is not an integer"
            )));
        }
        raw_sensitive.push(s);
        if let Some(j) = label_idx {
            let l = cell(j)?;
            if l.fract() != 0.0 {
                return Err(Error::data(format!(
                    "line {line}: label value {l} is not an integer"
                )));
            }
            raw_labels.push(l);
        }
    }
    if rows.is_empty() {
        return Err(Error::data("no data rows"));
    }

    let n = rows.len();
    let d = feature_idx.len();
    let x = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);

    let sensitive = match schema.mode {
        SensitiveMode::Discrete => {
            let (groups, n_groups) = remap_dense(&raw_sensitive);
            if n_groups < 2 {
                return Err(Error::data(
                    "discrete sensitive column has fewer than 2 distinct values",
                ));
            }
            Sensitive::Discrete { groups, n_groups }
        }
        SensitiveMode::Continuous => Sensitive::Continuous {
            values: raw_sensitive,
        },
    };
    let labels = label_idx.map(|_| remap_dense(&raw_labels).0);

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(Dataset {
        name,
        x,
        sensitive,
        labels,
        feature_names,
    })
}

/// Maps raw numeric codes to dense ids ordered by value. Exact f64
/// comparison is safe here because the values passed integer checks.
fn remap_dense(raw: &[f64]) -> (Vec<usize>, usize) {
    let mut distinct = raw.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let ids = raw
        .iter()
        .map(|v| {
            distinct
                .binary_search_by(|d| d.total_cmp(v))
                .expect("value came from the same slice")
        })
        .collect();
    (ids, distinct.len())
}

/// Writes the dataset with its feature names plus `sensitive` and (when
/// labels are present) `label` columns. Floats are written so they parse
/// back bit-identically.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ds.feature_names.clone();
    header.push("sensitive".to_string());
    if ds.labels.is_some() {
        header.push("label".to_string());
    }
    writer.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row: Vec<String> = (0..ds.dim()).map(|j| format!("{}", ds.x[[i, j]])).collect();
        match &ds.sensitive {
            Sensitive::Discrete { groups, .. } => row.push(format!("{}", groups[i])),
            Sensitive::Continuous { values } => row.push(format!("{}", values[i])),
        }
        if let Some(labels) = &ds.labels {
            row.push(format!("{}", labels[i]));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Schema matching [`write_csv`] output.
pub fn written_schema(mode: SensitiveMode, with_labels: bool) -> SchemaConfig {
    SchemaConfig {
        sensitive_column: "sensitive".to_string(),
        mode,
        label_column: with_labels.then(|| "label".to_string()),
        feature_columns: None,
        delimiter: ',',
        standardize: true,
        include_sensitive_in_features: false,
    }
}

/// Synthetic benchmark layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_cluster: usize,
    pub k: usize,
    pub d: usize,
    /// Strength of the sensitive attribute's entanglement, in [0, 1].
    pub bias: f64,
    pub mode: SensitiveMode,
    pub seed: u64,
}

/// Gaussian blobs with a controllable sensitive attribute.
///
/// Blob centers sit on scaled coordinate axes at exact pairwise distance
/// 8; when k <= d - 1 coordinate 0 is left flat so the sensitive signal
/// can live there without moving the cluster geometry. Unit isotropic
/// noise is added per sample.
///
/// Discrete mode: g ~ Bernoulli(0.5 + bias * (-1)^blob / 2) and
/// coordinate 0 is shifted by ±2 * bias with the sign of g, so groups
/// are both cluster-skewed and feature-visible.
///
/// Continuous mode: g = bias * standardized(x[:,0]) + (1 - bias) * noise,
/// appended as an extra final feature column (the attribute is visible to
/// the encoder but independent of the blob identity).
pub fn synth_blobs(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.k < 2 {
        return Err(Error::invalid("need at least 2 clusters"));
    }
    if cfg.n_per_cluster == 0 {
        return Err(Error::invalid("need at least 1 sample per cluster"));
    }
    if !(0.0..=1.0).contains(&cfg.bias) {
        return Err(Error::invalid(format!("bias must be in [0, 1], got {}", cfg.bias)));
    }
    // Prefer axes 1..k so coordinate 0 stays flat across centers.
    let axis_offset = if cfg.k <= cfg.d.saturating_sub(1) {
        1
    } else if cfg.k <= cfg.d {
        0
    } else {
        return Err(Error::invalid(format!(
            "k = {} clusters need at least d = {} dimensions",
            cfg.k,
            cfg.k + 1
        )));
    };
    let center_scale = 8.0 / std::f64::consts::SQRT_2;

    let n = cfg.n_per_cluster * cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Array2::zeros((n, cfg.d));
    let mut labels = Vec::with_capacity(n);
    for blob in 0..cfg.k {
        for s in 0..cfg.n_per_cluster {
            let i = blob * cfg.n_per_cluster + s;
            for j in 0..cfg.d {
                x[[i, j]] = StandardNormal.sample(&mut rng);
            }
            x[[i, blob + axis_offset]] += center_scale;
            labels.push(blob);
        }
    }

    let (x, sensitive, extra_feature) = match cfg.mode {
        SensitiveMode::Discrete => {
            let mut groups = Vec::with_capacity(n);
            for (i, &blob) in labels.iter().enumerate() {
                let sign = if blob % 2 == 0 { 1.0 } else { -1.0 };
                let p_one = 0.5 + cfg.bias * sign / 2.0;
                let g = usize::from(rng.random::<f64>() < p_one);
                x[[i, 0]] += 2.0 * cfg.bias * (2.0 * g as f64 - 1.0);
                groups.push(g);
            }
            (x, Sensitive::Discrete { groups, n_groups: 2 }, false)
        }
        SensitiveMode::Continuous => {
            let col0: Vec<f64> = x.column(0).to_vec();
            let m = col0.iter().sum::<f64>() / n as f64;
            let sd = (col0.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            let values: Vec<f64> = col0
                .iter()
                .map(|v| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    cfg.bias * (v - m) / sd + (1.0 - cfg.bias) * eps
                })
                .collect();
            let mut wide = Array2::zeros((n, cfg.d + 1));
            for i in 0..n {
                for j in 0..cfg.d {
                    wide[[i, j]] = x[[i, j]];
                }
                wide[[i, cfg.d]] = values[i];
            }
            (wide, Sensitive::Continuous { values }, true)
        }
    };

    let d_out = cfg.d + usize::from(extra_feature);
    let feature_names = (0..d_out).map(|j| format!("f_{j}")).collect();
    let mode_tag = match cfg.mode {
        SensitiveMode::Discrete => "discrete",
        SensitiveMode::Continuous => "continuous",
    };
    Ok(Dataset {
        name: format!("synth_{mode_tag}_k{}_d{}", cfg.k, cfg.d),
        x,
        sensitive,
        labels: Some(labels),
        feature_names,
    })
}

/// Result of [`split_fewshot`]. Both index lists are sorted.
#[derive(Debug, Clone)]
pub struct FewshotSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Label classes that exist in the dataset but drew no training
    /// sample. The split is still returned; callers decide whether a
    /// missing class is fatal.
    pub missing_train_classes: Vec<usize>,
}

/// Uniform random split without replacement: `n_train` indices for
/// training, the rest for testing, deterministic per seed.
pub fn split_fewshot(ds: &Dataset, n_train: usize, seed: u64) -> Result<FewshotSplit> {
    let n = ds.n();
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "n_train must be in 1..{n}, got {n_train}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut train: Vec<usize> = idx[..n_train].to_vec();
    let mut test: Vec<usize> = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    let mut missing_train_classes = Vec::new();
    if let Some(labels) = &ds.labels {
        let n_classes = labels.iter().max().unwrap() + 1;
        let mut in_train = vec![false; n_classes];
        for &i in &train {
            in_train[labels[i]] = true;
        }
        let mut exists = vec![false; n_classes];
        for &l in labels {
            exists[l] = true;
        }
        for c in 0..n_classes {
            if exists[c] && !in_train[c] {
                missing_train_classes.push(c);
            }
        }
        if !missing_train_classes.is_empty() {
            log::warn!(
                "few-shot split of {n_train} misses classes {missing_train_classes:?}"
            );
        }
    }
    Ok(FewshotSplit {
        train,
        test,
        missing_train_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn discrete_schema() -> SchemaConfig {
        SchemaConfig {
            sensitive_column: "sex".to_string(),
            mode: SensitiveMode::Discrete,
            label_column: Some("y".to_string()),
            ..written_schema(SensitiveMode::Discrete, true)
        }
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex(b"a"), "af63dc4c8601ec8c");
        assert_eq!(fnv1a_hex(b"foobar"), "85944171f73967e8");
    }

    #[test]
    fn standardizer_hand_case() {
        let x = array![[1.0, 10.0], [3.0, 10.0]];
        let s = Standardizer::fit(&x);
        assert_eq!(s.mean, vec![2.0, 10.0]);
        // Population std of [1, 3] is 1; constant column keeps scale 1.
        assert_eq!(s.scale, vec![1.0, 1.0]);
        let t = s.transform(&x).unwrap();
        assert_eq!(t, array![[-1.0, 0.0], [1.0, 0.0]]);
        let back = s.inverse(&t).unwrap();
        assert_eq!(back, x);
        assert!(s.transform(&array![[1.0]]).is_err());
    }

    #[test]
    fn standardize_is_idempotent_up_to_tolerance() {
        let ds = synth_blobs(&synth_discrete(0.5, 2)).unwrap();
        let once = Standardizer::fit(&ds.x).transform(&ds.x).unwrap();
        let refit = Standardizer::fit(&once);
        for j in 0..once.ncols() {
            assert!(refit.mean[j].abs() < 1e-9, "mean {}", refit.mean[j]);
            assert!((refit.scale[j] - 1.0).abs() < 1e-9, "scale {}", refit.scale[j]);
        }
    }

    #[test]
    fn blob_geometry_is_trivially_clusterable() {
        // Anchor for downstream tests: raw-feature k-means separates the
        // blobs essentially perfectly at separation 8.
        let ds = synth_blobs(&SynthConfig {
            n_per_cluster: 200,
            k: 3,
            d: 8,
            bias: 0.5,
            mode: SensitiveMode::Discrete,
            seed: 17,
        })
        .unwrap();
        let fit = crate::cluster::kmeans_fit(&ds.x, 3, 17).unwrap();
        let acc = crate::metrics::acc(&fit.assignments, ds.labels.as_ref().unwrap()).unwrap();
        assert!(acc > 0.99, "got {acc}");
    }

    #[test]
    fn load_csv_happy_path_with_remapping() {
        let f = write_temp("a,sex,b,y\n1.5,5,-2,7\n2.5,-1,0,3\n3.5,5,1,7\n");
        let ds = load_csv(f.path(), &discrete_schema()).unwrap();
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.x, array![[1.5, -2.0], [2.5, 0.0], [3.5, 1.0]]);
        // Sensitive values 5, -1 remap by sorted order: -1 -> 0, 5 -> 1.
        let (groups, n_groups) = ds.sensitive.groups().unwrap();
        assert_eq!(groups, &[1, 0, 1]);
        assert_eq!(n_groups, 2);
        // Labels 7, 3 remap to 1, 0.
        assert_eq!(ds.labels, Some(vec![1, 0, 1]));
        assert_eq!(ds.n_classes(), Some(2));
    }

    #[test]
    fn load_csv_continuous_sensitive() {
        let schema = SchemaConfig {
            sensitive_column: "g".to_string(),
            mode: SensitiveMode::Continuous,
            label_column: None,
            ..written_schema(SensitiveMode::Continuous, false)
        };
        let f = write_temp("x,g\n1.0,0.25\n2.0,-0.5\n");
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.sensitive.values().unwrap(), &[0.25, -0.5]);
        assert!(ds.labels.is_none());
        assert_eq!(ds.feature_names, vec!["x"]);

        // The same column can also be fed to the model as a feature.
        let with_flag = SchemaConfig {
            include_sensitive_in_features: true,
            ..schema
        };
        let ds = load_csv(f.path(), &with_flag).unwrap();
        assert_eq!(ds.feature_names, vec!["x", "g"]);
        assert_eq!(ds.x.column(1).to_vec(), vec![0.25, -0.5]);
    }

    #[test]
    fn load_csv_explicit_features_and_delimiter() {
        let f = write_temp("a;b;sex;y\n1;2;0;1\n3;4;1;0\n");
        let schema = SchemaConfig {
            feature_columns: Some(vec!["b".to_string()]),
            delimiter: ';',
            ..discrete_schema()
        };
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.feature_names, vec!["b"]);
        assert_eq!(ds.x, array![[2.0], [4.0]]);

        // Unknown feature column.
        let bad = SchemaConfig {
            feature_columns: Some(vec!["zzz".to_string()]),
            delimiter: ';',
            ..discrete_schema()
        };
        assert!(load_csv(f.path(), &bad).is_err());

        // Sensitive column listed as a feature needs the explicit switch.
        let sneaky = SchemaConfig {
            feature_columns: Some(vec!["a".to_string(), "sex".to_string()]),
            delimiter: ';',
            ..discrete_schema()
        };
        assert!(load_csv(f.path(), &sneaky).is_err());
        let allowed = SchemaConfig {
            include_sensitive_in_features: true,
            ..sneaky
        };
        let ds = load_csv(f.path(), &allowed).unwrap();
        assert_eq!(ds.feature_names, vec!["a", "sex"]);
    }

    #[test]
    fn load_csv_error_cases_name_the_line() {
        let schema = discrete_schema();
        // Missing sensitive column.
        let f = write_temp("a,b,y\n1,2,3\n");
        let err = load_csv(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("sex"), "{err}");

        // Non-integer discrete sensitive value.
        let f = write_temp("a,sex,y\n1.0,0,1\n2.0,0.5,1\n");
        let err = load_csv(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("integer"), "{err}");

        // Empty cell.
        let f = write_temp("a,sex,y\n1.0,0,1\n,1,0\n");
        let err = load_csv(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("'a'"), "{err}");

        // Unparsable feature.
        let f = write_temp("a,sex,y\nabc,0,1\n2.0,1,0\n");
        let err = load_csv(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("abc"), "{err}");

        // Non-finite value.
        let f = write_temp("a,sex,y\nnan,0,1\n2.0,1,0\n");
        let err = load_csv(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        // A single distinct group is useless.
        let f = write_temp("a,sex,y\n1.0,2,1\n2.0,2,0\n");
        let err = load_csv(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("distinct"), "{err}");

        // No data rows.
        let f = write_temp("a,sex,y\n");
        assert!(load_csv(f.path(), &schema).is_err());
    }

    fn synth_discrete(bias: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_per_cluster: 500,
            k: 2,
            d: 4,
            bias,
            mode: SensitiveMode::Discrete,
            seed,
        }
    }

    #[test]
    fn synth_shapes_and_labels() {
        let ds = synth_blobs(&synth_discrete(0.5, 1)).unwrap();
        assert_eq!(ds.n(), 1000);
        assert_eq!(ds.dim(), 4);
        let labels = ds.labels.as_ref().unwrap();
        assert!(labels[..500].iter().all(|&l| l == 0));
        assert!(labels[500..].iter().all(|&l| l == 1));

        let cont = synth_blobs(&SynthConfig {
            mode: SensitiveMode::Continuous,
            ..synth_discrete(0.5, 1)
        })
        .unwrap();
        // Continuous mode appends the attribute as a feature.
        assert_eq!(cont.dim(), 5);
        assert_eq!(cont.feature_names.last().unwrap(), "f_4");
    }

    #[test]
    fn synth_centers_sit_at_distance_eight() {
        let ds = synth_blobs(&SynthConfig {
            n_per_cluster: 2000,
            k: 3,
            d: 6,
            bias: 0.0,
            mode: SensitiveMode::Discrete,
            seed: 3,
        })
        .unwrap();
        let mean_of = |range: std::ops::Range<usize>| -> Vec<f64> {
            let rows = range.len() as f64;
            (0..ds.dim())
                .map(|j| range.clone().map(|i| ds.x[[i, j]]).sum::<f64>() / rows)
                .collect()
        };
        let m0 = mean_of(0..2000);
        let m1 = mean_of(2000..4000);
        let dist: f64 = m0
            .iter()
            .zip(&m1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 8.0).abs() < 0.2, "got {dist}");
        // Coordinate 0 is flat: centers of both blobs near 0 there.
        assert!(m0[0].abs() < 0.1 && m1[0].abs() < 0.1);
    }

    #[test]
    fn synth_discrete_bias_skews_groups() {
        let ds = synth_blobs(&synth_discrete(0.8, 5)).unwrap();
        let (groups, _) = ds.sensitive.groups().unwrap();
        // Blob 0 draws group 1 with probability 0.9.
        let p0 = groups[..500].iter().filter(|&&g| g == 1).count() as f64 / 500.0;
        let p1 = groups[500..].iter().filter(|&&g| g == 1).count() as f64 / 500.0;
        assert!((p0 - 0.9).abs() < 0.05, "blob 0 rate {p0}");
        assert!((p1 - 0.1).abs() < 0.05, "blob 1 rate {p1}");
    }

    #[test]
    fn synth_discrete_shift_makes_the_group_feature_visible() {
        let bias = 0.8;
        let ds = synth_blobs(&synth_discrete(bias, 5)).unwrap();
        let (groups, _) = ds.sensitive.groups().unwrap();
        let mean_x0 = |want: usize| {
            let vals: Vec<f64> = groups
                .iter()
                .enumerate()
                .filter(|(_, &g)| g == want)
                .map(|(i, _)| ds.x[[i, 0]])
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        // Shifts of ±2 * bias put the group means 4 * bias apart.
        let gap = mean_x0(1) - mean_x0(0);
        assert!((gap - 4.0 * bias).abs() < 0.2, "gap {gap}");
    }

    #[test]
    fn synth_continuous_attribute_tracks_first_coordinate() {
        let ds = synth_blobs(&SynthConfig {
            mode: SensitiveMode::Continuous,
            ..synth_discrete(0.9, 7)
        })
        .unwrap();
        let g = ds.sensitive.values().unwrap();
        let x0: Vec<f64> = ds.x.column(0).to_vec();
        let n = g.len() as f64;
        let (mg, mx) = (g.iter().sum::<f64>() / n, x0.iter().sum::<f64>() / n);
        let cov: f64 = g.iter().zip(&x0).map(|(a, b)| (a - mg) * (b - mx)).sum();
        let vg: f64 = g.iter().map(|v| (v - mg) * (v - mg)).sum();
        let vx: f64 = x0.iter().map(|v| (v - mx) * (v - mx)).sum();
        let corr = cov / (vg * vx).sqrt();
        assert!(corr > 0.9, "got {corr}");
        // The appended feature column is exactly the attribute.
        assert_eq!(ds.x.column(4).to_vec(), g.to_vec());
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_blobs(&synth_discrete(0.5, 11)).unwrap();
        let b = synth_blobs(&synth_discrete(0.5, 11)).unwrap();
        let c = synth_blobs(&synth_discrete(0.5, 12)).unwrap();
        assert_eq!(a.x, b.x);
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn synth_validates_geometry() {
        assert!(synth_blobs(&SynthConfig { k: 5, d: 4, ..synth_discrete(0.5, 1) }).is_err());
        assert!(synth_blobs(&SynthConfig { bias: 1.5, ..synth_discrete(0.5, 1) }).is_err());
        assert!(synth_blobs(&SynthConfig { k: 1, ..synth_discrete(0.5, 1) }).is_err());
        assert!(synth_blobs(&SynthConfig { n_per_cluster: 0, ..synth_discrete(0.5, 1) }).is_err());
        // k == d uses axis 0 as a center direction rather than failing.
        let tight = synth_blobs(&SynthConfig { k: 4, d: 4, ..synth_discrete(0.0, 1) }).unwrap();
        assert_eq!(tight.dim(), 4);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        for mode in [SensitiveMode::Discrete, SensitiveMode::Continuous] {
            let ds = synth_blobs(&SynthConfig {
                n_per_cluster: 20,
                k: 2,
                d: 3,
                bias: 0.6,
                mode,
                seed: 9,
            })
            .unwrap();
            write_csv(&path, &ds).unwrap();
            let schema = written_schema(mode, true);
            let back = load_csv(&path, &schema).unwrap();
            assert_eq!(back.x, ds.x);
            assert_eq!(back.labels, ds.labels);
            match (&back.sensitive, &ds.sensitive) {
                (Sensitive::Discrete { groups: a, .. }, Sensitive::Discrete { groups: b, .. }) => {
                    assert_eq!(a, b)
                }
                (
                    Sensitive::Continuous { values: a },
                    Sensitive::Continuous { values: b },
                ) => assert_eq!(a, b),
                _ => panic!("mode changed in roundtrip"),
            }
            assert_eq!(back.schema_digest(), ds.schema_digest());
        }
    }

    #[test]
    fn fewshot_split_partitions_deterministically() {
        let ds = synth_blobs(&SynthConfig {
            n_per_cluster: 500,
            ..synth_discrete(0.5, 13)
        })
        .unwrap();
        let split = split_fewshot(&ds, 128, 13).unwrap();
        assert_eq!(split.train.len(), 128);
        assert_eq!(split.test.len(), 872);
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        // 128 uniform draws from two half classes miss neither.
        assert!(split.missing_train_classes.is_empty());

        let again = split_fewshot(&ds, 128, 13).unwrap();
        assert_eq!(split.train, again.train);
        let other = split_fewshot(&ds, 128, 14).unwrap();
        assert_ne!(split.train, other.train);

        assert!(split_fewshot(&ds, 0, 1).is_err());
        assert!(split_fewshot(&ds, 1000, 1).is_err());
    }

    #[test]
    fn fewshot_split_reports_missing_classes_consistently() {
        let mut ds = synth_blobs(&synth_discrete(0.5, 13)).unwrap();
        // Shrink class 1 to two members so a 5-shot draw usually misses it.
        let labels = ds.labels.as_mut().unwrap();
        for l in labels.iter_mut().skip(502) {
            *l = 0;
        }
        for seed in 0..10_u64 {
            let split = split_fewshot(&ds, 5, seed).unwrap();
            let labels = ds.labels.as_ref().unwrap();
            let has_one = split.train.iter().any(|&i| labels[i] == 1);
            assert_eq!(split.missing_train_classes.contains(&1), !has_one);
        }
    }

    #[test]
    fn schema_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.json");
        let schema = discrete_schema();
        schema.to_file(&path).unwrap();
        let back = SchemaConfig::from_file(&path).unwrap();
        assert_eq!(back.sensitive_column, "sex");
        assert_eq!(back.mode, SensitiveMode::Discrete);
        assert_eq!(back.label_column, Some("y".to_string()));
    }

    #[test]
    fn sensitive_batch_extraction() {
        let s = Sensitive::Discrete {
            groups: vec![0, 1, 0, 1],
            n_groups: 2,
        };
        match s.batch(&[1, 3]) {
            SensitiveBatch::Discrete { groups, n_groups } => {
                assert_eq!(groups, vec![1, 1]);
                assert_eq!(n_groups, 2);
            }
            _ => panic!("mode changed"),
        }
    }
}
