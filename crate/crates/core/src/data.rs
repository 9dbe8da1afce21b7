//! Datasets: synthetic multilinear data, IDX images, CSV tables, splits and
//! the embedding step that turns records into model inputs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{image_to_nodes, FeatureMap, MinMaxScaler};
use crate::kv::KvWriter;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw records, before any scaling or embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    /// Byte images stored row-major.
    Images { rows: usize, cols: usize, pixels: Vec<Vec<u8>> },
    /// Numeric feature columns.
    Table { columns: Vec<String>, rows: Vec<Vec<f64>> },
    /// Already node-structured inputs.
    Nodes(Vec<Vec<Vec<f64>>>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Images { pixels, .. } => pixels.len(),
            Records::Table { rows, .. } => rows.len(),
            Records::Nodes(n) => n.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Records {
        match self {
            Records::Images { rows, cols, pixels } => Records::Images {
                rows: *rows,
                cols: *cols,
                pixels: idx.iter().map(|&i| pixels[i].clone()).collect(),
            },
            Records::Table { columns, rows } => Records::Table {
                columns: columns.clone(),
                rows: idx.iter().map(|&i| rows[i].clone()).collect(),
            },
            Records::Nodes(n) => Records::Nodes(idx.iter().map(|&i| n[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One-hot vector for a class, `[value]` for regression.
    pub fn vector(&self, i: usize) -> Vec<f64> {
        match self {
            Targets::Classes { labels, n_classes } => {
                let mut v = vec![0.0; *n_classes];
                v[labels[i]] = 1.0;
                v
            }
            Targets::Values(v) => vec![v[i]],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Values(_) => 1,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Meta {
    pub source: String,
    pub split: SplitTag,
    pub seed: Option<u64>,
    pub fraction: f64,
}

impl Meta {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            split: SplitTag::Full,
            seed: None,
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Records,
    pub targets: Targets,
    pub meta: Meta,
}

impl Dataset {
    pub fn new(records: Records, targets: Targets, meta: Meta) -> Result<Self> {
        if records.len() != targets.len() {
            return Err(Error::CountMismatch {
                images: records.len(),
                labels: targets.len(),
            });
        }
        if let Targets::Classes { labels, n_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *n_classes) {
                return Err(Error::ClassOutOfRange {
                    class: bad,
                    classes: *n_classes,
                });
            }
        }
        Ok(Self { records, targets, meta })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: self.records.select(idx),
            targets: self.targets.select(idx),
            meta: self.meta.clone(),
        }
    }
}

// ---------------------------------------------------------------- synthetic

/// Third-order multilinear regression data:
/// `y = sum w1_i a_i + sum w2_ij a_i b_j + sum w3_ijk a_i b_j c_k`
/// over three input vectors `a, b, c` of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub d: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub weight_variance: f64,
    pub input_variance: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(d: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            d,
            n_train,
            n_test,
            weight_variance: 0.1,
            input_variance: 0.5,
            seed,
        }
    }

    /// `Var(y)` over weights and inputs jointly.
    pub fn target_variance(&self) -> f64 {
        let (w, x, d) = (self.weight_variance, self.input_variance, self.d as f64);
        w * x * d + w * x * x * d * d + w * x * x * x * d * d * d
    }
}

/// Ground-truth weights, shared by both splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWeights {
    pub d: usize,
    pub w1: Vec<f64>,
    /// Row-major `d x d`.
    pub w2: Vec<f64>,
    /// Row-major `d x d x d`.
    pub w3: Vec<f64>,
}

impl SynthWeights {
    pub fn evaluate(&self, a: &[f64], b: &[f64], c: &[f64]) -> f64 {
        let d = self.d;
        let mut y = 0.0;
        for i in 0..d {
            let mut inner = self.w1[i];
            for j in 0..d {
                let row = &self.w3[(i * d + j) * d..(i * d + j + 1) * d];
                let cubic: f64 = row.iter().zip(c).map(|(w, x)| w * x).sum();
                inner += b[j] * (self.w2[i * d + j] + cubic);
            }
            y += a[i] * inner;
        }
        y
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, Dataset, SynthWeights)> {
    if spec.d == 0 || spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Hyperparameter(format!(
            "synthetic data needs d, n_train, n_test >= 1, got {}, {}, {}",
            spec.d, spec.n_train, spec.n_test
        )));
    }
    for v in [spec.weight_variance, spec.input_variance] {
        if !(v > 0.0) {
            return Err(Error::NonPositiveVariance(v));
        }
    }
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let wdist = Normal::new(0.0, spec.weight_variance.sqrt()).expect("positive std");
    let xdist = Normal::new(0.0, spec.input_variance.sqrt()).expect("positive std");
    let mut draw = |n: usize, dist: &Normal<f64>| -> Vec<f64> { (0..n).map(|_| dist.sample(&mut rng)).collect() };
    let weights = SynthWeights {
        d,
        w1: draw(d, &wdist),
        w2: draw(d * d, &wdist),
        w3: draw(d * d * d, &wdist),
    };
    let mut make = |n: usize, split: SplitTag| -> Result<Dataset> {
        let mut nodes = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<Vec<f64>> = (0..3).map(|_| draw(d, &xdist)).collect();
            ys.push(weights.evaluate(&x[0], &x[1], &x[2]));
            nodes.push(x);
        }
        let mut meta = Meta::new(format!("synthetic:d={d}"));
        meta.split = split;
        meta.seed = Some(spec.seed);
        Dataset::new(Records::Nodes(nodes), Targets::Values(ys), meta)
    };
    let train = make(spec.n_train, SplitTag::Train)?;
    let test = make(spec.n_test, SplitTag::Test)?;
    Ok((train, test, weights))
}

/// Writes a node-structured regression dataset with header
/// `n1_1,..,n1_d,n2_1,..,y`.
pub fn write_node_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let (Records::Nodes(nodes), Targets::Values(ys)) = (&ds.records, &ds.targets) else {
        return Err(Error::Parse("only node-structured regression data can be exported".into()));
    };
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = nodes.first() {
        let mut header: Vec<String> = Vec::new();
        for (k, node) in first.iter().enumerate() {
            header.extend((0..node.len()).map(|i| format!("n{}_{}", k + 1, i + 1)));
        }
        header.push("y".into());
        w.write_record(&header)?;
    }
    for (x, y) in nodes.iter().zip(ys) {
        let mut row: Vec<String> = x.iter().flatten().map(|v| format!("{v:e}")).collect();
        row.push(format!("{y:e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_node_csv`].
pub fn load_node_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let table = load_csv(path, "y", b',')?;
    let Records::Table { columns, rows } = table.records else {
        unreachable!("load_csv returns a table")
    };
    let mut layout: Vec<usize> = Vec::new();
    for c in &columns {
        let (node, _) = c
            .strip_prefix('n')
            .and_then(|s| s.split_once('_'))
            .ok_or_else(|| Error::Parse(format!("column '{c}' is not of the form n<node>_<index>")))?;
        let node: usize = node.parse().map_err(|_| Error::Parse(format!("bad column '{c}'")))?;
        if node == layout.len() + 1 {
            layout.push(0);
        } else if node != layout.len() || node == 0 {
            return Err(Error::Parse(format!("column '{c}' out of order")));
        }
        *layout.last_mut().expect("pushed") += 1;
    }
    let nodes = rows
        .into_iter()
        .map(|row| {
            let mut it = row.into_iter();
            layout.iter().map(|&n| it.by_ref().take(n).collect()).collect()
        })
        .collect();
    Dataset::new(Records::Nodes(nodes), table.targets, Meta::new(path.display().to_string()))
}

/// Train and test CSVs plus a `synth.meta` sidecar in `dir`.
pub fn export_synth(spec: &SynthSpec, train: &Dataset, test: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_node_csv(train, dir.join("train.csv"))?;
    write_node_csv(test, dir.join("test.csv"))?;
    let mut meta = KvWriter::new();
    meta.set("kind", "synthetic")
        .set("d", spec.d)
        .set("n_train", spec.n_train)
        .set("n_test", spec.n_test)
        .set("weight_variance", spec.weight_variance)
        .set("input_variance", spec.input_variance)
        .set("seed", spec.seed);
    meta.write(dir.join("synth.meta"))
}

// ---------------------------------------------------------------------- IDX

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, n_dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * n_dims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, no magic number", bytes.len()),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Magic {
            path: path.into(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs {header}", bytes.len()),
        });
    }
    let dims: Vec<usize> = (0..n_dims).map(|k| be_u32(bytes, 4 + 4 * k) as usize).collect();
    let body: usize = dims.iter().product();
    if bytes.len() < header + body {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, dims {dims:?} need {}", bytes.len(), header + body),
        });
    }
    Ok(dims)
}

/// Reads an IDX image/label pair (MNIST layout: `u8` pixels, labels 0..=9).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = fs::read(ip)?;
    let lb = fs::read(lp)?;
    let dims = idx_header(ip, &ib, IDX_IMAGES_MAGIC, 3)?;
    let ldims = idx_header(lp, &lb, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let pixels = ib[16..16 + n * rows * cols]
        .chunks_exact(rows * cols)
        .map(|c| c.to_vec())
        .collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&l| l as usize).collect();
    Dataset::new(
        Records::Images { rows, cols, pixels },
        Targets::Classes { labels, n_classes: 10 },
        Meta::new(ip.display().to_string()),
    )
}

/// The four standard IDX files under `dir`, as `(train, test)`.
pub fn load_idx_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let mut test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    train.meta.split = SplitTag::Train;
    test.meta.split = SplitTag::Test;
    Ok((train, test))
}

// ---------------------------------------------------------------------- CSV

/// Header-led numeric CSV; `target_column` becomes a scalar regression
/// target and the remaining columns are features, in file order.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str, delimiter: u8) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let target = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn(target_column.to_string()))?;
    let columns: Vec<String> = header.iter().enumerate().filter(|&(j, _)| j != target).map(|(_, h)| h.clone()).collect();
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(columns.len());
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row: i + 1,
                column: header.get(j).cloned().unwrap_or_default(),
                value: cell.to_string(),
            })?;
            if j == target {
                ys.push(v);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    Dataset::new(
        Records::Table { columns, rows },
        Targets::Values(ys),
        Meta::new(path.display().to_string()),
    )
}

// ------------------------------------------------------------------ splits

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffles by `seed`, then takes `floor(fraction * n)` rows for training
/// and the rest for testing.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidFraction(train_fraction));
    }
    let n = ds.len();
    let n_train = (train_fraction * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::DegenerateSplit(format!(
            "{n} rows at fraction {train_fraction} gives {n_train} / {}",
            n - n_train
        )));
    }
    let idx = permutation(n, seed);
    let mut train = ds.select(&idx[..n_train]);
    let mut test = ds.select(&idx[n_train..]);
    for (part, tag) in [(&mut train, SplitTag::Train), (&mut test, SplitTag::Test)] {
        part.meta.split = tag;
        part.meta.seed = Some(seed);
    }
    Ok((train, test))
}

/// `round(fraction * n)` rows drawn without replacement.
pub fn subsample_fraction(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    let m = (fraction * ds.len() as f64).round() as usize;
    if m == 0 {
        return Err(Error::DegenerateSplit(format!("{} rows at fraction {fraction} leaves none", ds.len())));
    }
    let idx = permutation(ds.len(), seed);
    let mut out = ds.select(&idx[..m]);
    out.meta.fraction = ds.meta.fraction * fraction;
    out.meta.seed = Some(seed);
    Ok(out)
}

// --------------------------------------------------------------- embedding

/// Model-ready inputs: one list of node vectors per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub xs: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Vec<f64>>,
    /// Class labels for classification data.
    pub labels: Option<Vec<usize>>,
    /// Feature values clamped into range by the scaler.
    pub clamped: usize,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn node_dims(&self) -> Vec<usize> {
        self.xs.first().map(|x| x.iter().map(Vec::len).collect()).unwrap_or_default()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Mean of `sum_i x(k)_i^2` per node.
    pub fn input_stats(&self) -> Vec<f64> {
        let n = self.xs.len() as f64;
        let mut acc = vec![0.0; self.node_dims().len()];
        for x in &self.xs {
            for (a, node) in acc.iter_mut().zip(x) {
                *a += node.iter().map(|v| v * v).sum::<f64>();
            }
        }
        acc.iter().map(|a| a / n).collect()
    }
}

/// Record-to-node mapping, fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    /// Pixels to `[0, 1]`, 2x2 average pooling, trig map per pooled pixel.
    Image { side: usize },
    /// Min-max scaling from the training split, then a feature map.
    Table { scaler: MinMaxScaler, map: FeatureMap },
    /// Node records used as given.
    Identity,
}

impl Embedding {
    pub fn fit(train: &Dataset, map: FeatureMap) -> Result<Self> {
        match &train.records {
            Records::Images { rows, cols, .. } => {
                if rows != cols || rows % 2 != 0 {
                    return Err(Error::BadImageSide { rows: *rows, cols: *cols });
                }
                Ok(Embedding::Image { side: *rows })
            }
            Records::Table { rows, .. } => Ok(Embedding::Table {
                scaler: MinMaxScaler::fit(rows)?,
                map,
            }),
            Records::Nodes(_) => Ok(Embedding::Identity),
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Embedded> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut clamped = 0;
        let xs: Vec<Vec<Vec<f64>>> = match (self, &ds.records) {
            (Embedding::Image { side }, Records::Images { pixels, .. }) => {
                pixels.par_iter().map(|p| image_to_nodes(p, *side)).collect::<Result<_>>()?
            }
            (Embedding::Table { scaler, map }, Records::Table { rows, .. }) => rows
                .iter()
                .map(|r| {
                    let (s, c) = scaler.transform(r)?;
                    clamped += c;
                    map.apply(&s)
                })
                .collect::<Result<_>>()?,
            (Embedding::Identity, Records::Nodes(n)) => n.clone(),
            _ => return Err(Error::ShapeMismatch("embedding fitted on a different record kind".into())),
        };
        let targets = (0..ds.len()).map(|i| ds.targets.vector(i)).collect();
        let labels = match &ds.targets {
            Targets::Classes { labels, .. } => Some(labels.clone()),
            Targets::Values(_) => None,
        };
        Ok(Embedded {
            xs,
            targets,
            labels,
            clamped,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::io::Write;

    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset::new(
            Records::Table {
                columns: vec!["a".into()],
                rows: (0..n).map(|i| vec![i as f64]).collect(),
            },
            Targets::Values((0..n).map(|i| i as f64).collect()),
            Meta::new("toy"),
        )
        .unwrap()
    }

    fn ids(ds: &Dataset) -> Vec<usize> {
        match &ds.records {
            Records::Table { rows, .. } => rows.iter().map(|r| r[0] as usize).collect(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn synth_unit_weights() {
        let w = SynthWeights {
            d: 1,
            w1: vec![1.0],
            w2: vec![1.0],
            w3: vec![1.0],
        };
        assert_eq!(w.evaluate(&[2.0], &[3.0], &[4.0]), 32.0);
        assert_eq!(w.evaluate(&[0.0], &[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn synth_matches_brute_force_sum() {
        let (train, _, w) = synth_generate(&SynthSpec::new(3, 5, 2, 4)).unwrap();
        let Records::Nodes(xs) = &train.records else { unreachable!() };
        let Targets::Values(ys) = &train.targets else { unreachable!() };
        let d = 3;
        for (x, y) in xs.iter().zip(ys) {
            let mut e = 0.0;
            for i in 0..d {
                e += w.w1[i] * x[0][i];
                for j in 0..d {
                    e += w.w2[i * d + j] * x[0][i] * x[1][j];
                    for k in 0..d {
                        e += w.w3[(i * d + j) * d + k] * x[0][i] * x[1][j] * x[2][k];
                    }
                }
            }
            assert!((e - y).abs() < 1e-12);
        }
    }

    #[test]
    fn synth_deterministic_and_shared_weights() {
        let spec = SynthSpec::new(4, 20, 10, 11);
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthSpec::new(4, 20, 10, 12)).unwrap();
        assert_ne!(a.2, c.2);
        assert_eq!(a.0.len(), 20);
        assert_eq!(a.1.len(), 10);
        assert!(synth_generate(&SynthSpec::new(0, 1, 1, 0)).is_err());
    }

    #[test]
    fn synth_target_variance_reading() {
        // Pooled over weight draws: E[y^2] = 0.05 d + 0.025 d^2 + 0.0125 d^3.
        for d in [1usize, 2, 4] {
            let mut sum = 0.0;
            let mut n = 0;
            for seed in 0..2000 {
                let (train, _, _) = synth_generate(&SynthSpec::new(d, 50, 1, seed)).unwrap();
                let Targets::Values(ys) = &train.targets else { unreachable!() };
                sum += ys.iter().map(|y| y * y).sum::<f64>();
                n += ys.len();
            }
            let var = sum / n as f64;
            let expected = SynthSpec::new(d, 1, 1, 0).target_variance();
            assert!((var / expected - 1.0).abs() < 0.1, "d={d}: {var} vs {expected}");
        }
    }

    #[test]
    fn split_sizes() {
        for (n, tr, te) in [(506, 354, 152), (107, 74, 33), (10, 7, 3)] {
            let (a, b) = split(&toy(n), 0.7, 1).unwrap();
            assert_eq!((a.len(), b.len()), (tr, te));
        }
        assert!(matches!(split(&toy(1), 0.3, 0), Err(Error::DegenerateSplit(_))));
        assert!(split(&toy(10), 1.0, 0).is_err());
    }

    #[test]
    fn split_and_subsample_partition() {
        let ds = toy(300);
        let (a, b) = split(&ds, 0.6, 9).unwrap();
        let mut all: Vec<usize> = ids(&a).into_iter().chain(ids(&b)).collect();
        all.sort();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        let s = subsample_fraction(&a, 0.5, 3).unwrap();
        let sub: BTreeSet<usize> = ids(&s).into_iter().collect();
        assert_eq!(sub.len(), 90);
        assert!(sub.is_subset(&ids(&a).into_iter().collect()));
    }

    #[test]
    fn subsample_counts() {
        let ds = toy(60000);
        assert_eq!(subsample_fraction(&ds, 0.01, 0).unwrap().len(), 600);
        let full = subsample_fraction(&toy(100), 1.0, 5).unwrap();
        let mut got = ids(&full);
        assert_ne!(got, (0..100).collect::<Vec<_>>());
        got.sort();
        assert_eq!(got, (0..100).collect::<Vec<_>>());
        let a: BTreeSet<usize> = ids(&subsample_fraction(&toy(100), 0.5, 1).unwrap()).into_iter().collect();
        let b: BTreeSet<usize> = ids(&subsample_fraction(&toy(100), 0.5, 2).unwrap()).into_iter().collect();
        assert_ne!(a, b);
        assert!(subsample_fraction(&toy(10), 0.0, 0).is_err());
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn idx_images(n: u32, side: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, side, side] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * side * side).map(|i| (i % 256) as u8));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn idx_parsing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_images(3, 4));
        let lab = write(dir.path(), "lab", &idx_labels(&[7, 2, 1]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 3);
        let Records::Images { rows, cols, pixels } = &ds.records else { unreachable!() };
        assert_eq!((*rows, *cols), (4, 4));
        assert_eq!(pixels[1][0], 16);
        assert_eq!(ds.targets.vector(0)[7], 1.0);

        let empty = write(dir.path(), "empty", &[]);
        assert!(matches!(load_idx(&empty, &lab), Err(Error::Truncated { .. })));
        let mut short = idx_images(3, 4);
        short.pop();
        let short = write(dir.path(), "short", &short);
        assert!(matches!(load_idx(&short, &lab), Err(Error::Truncated { .. })));
        assert!(matches!(
            load_idx(&img, &img),
            Err(Error::Magic { expected: IDX_LABELS_MAGIC, .. })
        ));
        let two = write(dir.path(), "two", &idx_labels(&[1, 2]));
        assert!(matches!(load_idx(&img, &two), Err(Error::CountMismatch { images: 3, labels: 2 })));
        let bad = write(dir.path(), "bad", &idx_labels(&[1, 2, 12]));
        assert!(matches!(load_idx(&img, &bad), Err(Error::ClassOutOfRange { class: 12, .. })));
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", b"x1,price,x2\n1.5,10,2\n-3,20,4e-1\n");
        let ds = load_csv(&p, "price", b',').unwrap();
        assert_eq!(
            ds.records,
            Records::Table {
                columns: vec!["x1".into(), "x2".into()],
                rows: vec![vec![1.5, 2.0], vec![-3.0, 0.4]]
            }
        );
        assert_eq!(ds.targets, Targets::Values(vec![10.0, 20.0]));
        let q = write(dir.path(), "b.csv", b"x1;price;x2\n1.5;10;2\n-3;20;4e-1\n");
        assert_eq!(load_csv(&q, "price", b';').unwrap().records, ds.records);
        match load_csv(&p, "medv", b',') {
            Err(e @ Error::MissingColumn(_)) => assert!(e.to_string().contains("medv")),
            other => panic!("{other:?}"),
        }
        let bad = write(dir.path(), "c.csv", b"x1,price\n1,2\n3,abc\n");
        match load_csv(&bad, "price", b',') {
            Err(Error::NonNumeric { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "price")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synth_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(2, 6, 3, 1);
        let (train, test, _) = synth_generate(&spec).unwrap();
        export_synth(&spec, &train, &test, dir.path()).unwrap();
        let back = load_node_csv(dir.path().join("train.csv")).unwrap();
        assert_eq!(back.records, train.records);
        assert_eq!(back.targets, train.targets);
        let meta = crate::kv::read_kv(dir.path().join("synth.meta")).unwrap();
        assert!(meta.contains(&("seed".into(), "1".into())));
    }

    #[test]
    fn embedding_scales_on_train_only() {
        let train = toy(5);
        let mut test = toy(3);
        if let Records::Table { rows, .. } = &mut test.records {
            rows[2][0] = 9.0;
        }
        let emb = Embedding::fit(&train, FeatureMap::Raw).unwrap();
        let e = emb.apply(&test).unwrap();
        assert_eq!(e.xs[1], vec![vec![0.25]]);
        assert_eq!(e.xs[2], vec![vec![1.0]]);
        assert_eq!(e.clamped, 1);
        let t = Embedding::fit(&train, FeatureMap::Trig).unwrap().apply(&train).unwrap();
        assert_eq!(t.node_dims(), vec![2]);
        for s in t.input_stats() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
