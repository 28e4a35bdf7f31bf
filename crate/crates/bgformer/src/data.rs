//! Backbone surrogate: synthetic Gaussian-cluster embeddings, embedding-file
//! ingestion (CSV and binary), the optional trainable linear adapter, and the
//! class-balanced PK mini-batch sampler.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::matrix::{matmul, Matrix};
use crate::numerics::params::{ParamGroup, ParamTensor};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{NodeId, Tape};

pub const BINARY_MAGIC: &[u8; 4] = b"BGE1";

/// Embedding collection with a class -> row-indices index.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<i64>,
    class_index: BTreeMap<i64, Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<i64>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::contract(format!(
                "feature rows {} != label count {}",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::contract(
                "dataset features contain non-finite values".to_string(),
            ));
        }
        let mut class_index: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            class_index.entry(label).or_default().push(row);
        }
        Ok(Dataset {
            features,
            labels,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn classes(&self) -> impl Iterator<Item = i64> + '_ {
        self.class_index.keys().copied()
    }

    pub fn class_rows(&self, label: i64) -> Option<&[usize]> {
        self.class_index.get(&label).map(|v| v.as_slice())
    }

    /// Class-disjoint split: the first `ceil(frac * #classes)` class ids (in
    /// ascending order) go to the first dataset, the rest to the second.
    pub fn split_by_class(&self, frac: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::contract(format!(
                "split fraction must lie in [0, 1], got {frac}"
            )));
        }
        let classes: Vec<i64> = self.classes().collect();
        let cut = ((classes.len() as f64) * frac).ceil() as usize;
        let first: std::collections::BTreeSet<i64> = classes.iter().take(cut).copied().collect();
        let mut rows_a = Vec::new();
        let mut rows_b = Vec::new();
        for (row, &label) in self.labels.iter().enumerate() {
            if first.contains(&label) {
                rows_a.push(row);
            } else {
                rows_b.push(row);
            }
        }
        Ok((self.subset(&rows_a)?, self.subset(&rows_b)?))
    }

    fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let mut features = Matrix::zeros(rows.len(), self.dim());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            features.row_mut(i).copy_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        Dataset::new(features, labels)
    }
}

/// Mini-batch with exact PK composition: `p` classes, `k_pc` rows each.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub features: Matrix,
    pub labels: Vec<i64>,
    pub p: usize,
    pub k_pc: usize,
}

impl LabeledBatch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Trainable linear map standing in for backbone fine-tuning. Disabled, it is
/// the identity on its input.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub w: ParamTensor,
    pub b: ParamTensor,
    pub enabled: bool,
}

pub struct AdapterIds {
    pub w: NodeId,
    pub b: NodeId,
}

impl AdapterParams {
    /// Identity-initialized square adapter: starts as a no-op and fine-tunes
    /// from there.
    pub fn identity(dim: usize) -> Self {
        AdapterParams {
            w: ParamTensor::new(
                "adapter.w",
                Matrix::identity(dim),
                ParamGroup::BackboneAdapter,
            ),
            b: ParamTensor::new(
                "adapter.b",
                Matrix::zeros(1, dim),
                ParamGroup::BackboneAdapter,
            ),
            enabled: true,
        }
    }

    pub fn disabled(dim: usize) -> Self {
        let mut a = AdapterParams::identity(dim);
        a.enabled = false;
        a
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        if self.enabled {
            vec![&self.w, &self.b]
        } else {
            vec![]
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        if self.enabled {
            vec![&mut self.w, &mut self.b]
        } else {
            vec![]
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AdapterIds {
        let mut reg = |p: &ParamTensor| {
            if trainable && self.enabled {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        };
        AdapterIds {
            w: reg(&self.w),
            b: reg(&self.b),
        }
    }

    pub fn read_grads(&mut self, tape: &Tape, ids: &AdapterIds) {
        if self.enabled {
            self.w.grad = tape.grad(ids.w);
            self.b.grad = tape.grad(ids.b);
        }
    }
}

/// X w + b when enabled; the input unchanged when disabled.
pub fn adapter_forward(x: &Matrix, a: &AdapterParams) -> Result<Matrix> {
    if !a.enabled {
        return Ok(x.clone());
    }
    let mut out = matmul(x, &a.w.value)?;
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(a.b.value.row(0)) {
            *v += b;
        }
    }
    Ok(out)
}

/// Adapter on a tape; identity wiring when disabled.
pub fn adapter_on_tape(
    tape: &mut Tape,
    x: NodeId,
    a: &AdapterParams,
    ids: &AdapterIds,
) -> Result<NodeId> {
    if !a.enabled {
        return Ok(x);
    }
    let proj = tape.matmul(x, ids.w)?;
    tape.add_bias(proj, ids.b)
}

/// Per class: a unit-norm random center, then `per_class` samples at
/// center + spread * Normal(0, I). Class ids run 0..num_classes.
pub fn gen_synthetic(
    rng: &mut Rng,
    num_classes: usize,
    per_class: usize,
    c_in: usize,
    spread: f64,
) -> Result<Dataset> {
    let m = num_classes * per_class;
    let mut features = Matrix::zeros(m, c_in);
    let mut labels = Vec::with_capacity(m);
    let mut row = 0;
    for class in 0..num_classes {
        let mut center: Vec<f64> = (0..c_in).map(|_| rng.normal()).collect();
        let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut center {
                *v /= norm;
            }
        }
        for _ in 0..per_class {
            for (dst, &c) in features.row_mut(row).iter_mut().zip(&center) {
                *dst = c + spread * rng.normal();
            }
            labels.push(class as i64);
            row += 1;
        }
    }
    Dataset::new(features, labels)
}

/// Draw `p` distinct classes uniformly, then `k_pc` distinct members of each,
/// and shuffle the row order.
pub fn sample_batch(ds: &Dataset, p: usize, k_pc: usize, rng: &mut Rng) -> Result<LabeledBatch> {
    if p == 0 || k_pc == 0 {
        return Err(Error::contract(format!(
            "batch composition requires p >= 1 and k_pc >= 1, got p={p}, k_pc={k_pc}"
        )));
    }
    let classes: Vec<i64> = ds.classes().collect();
    if classes.len() < p {
        return Err(Error::contract(format!(
            "dataset has {} classes but the batch needs p={p}",
            classes.len()
        )));
    }
    let chosen = rng.sample_indices(classes.len(), p);
    let mut picked_rows = Vec::with_capacity(p * k_pc);
    for idx in chosen {
        let label = classes[idx];
        let rows = ds.class_rows(label).expect("class listed in index");
        if rows.len() < k_pc {
            return Err(Error::contract(format!(
                "class {label} has {} samples but the batch needs k_pc={k_pc}",
                rows.len()
            )));
        }
        for member in rng.sample_indices(rows.len(), k_pc) {
            picked_rows.push(rows[member]);
        }
    }
    rng.shuffle(&mut picked_rows);
    let mut features = Matrix::zeros(picked_rows.len(), ds.dim());
    let mut labels = Vec::with_capacity(picked_rows.len());
    for (i, &r) in picked_rows.iter().enumerate() {
        features.row_mut(i).copy_from_slice(ds.features().row(r));
        labels.push(ds.labels()[r]);
    }
    Ok(LabeledBatch {
        features,
        labels,
        p,
        k_pc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "binary" => Ok(FileFormat::Binary),
            other => Err(Error::contract(format!(
                "unknown dataset format '{other}' (expected csv or binary)"
            ))),
        }
    }
}

pub fn save_embeddings(path: &Path, ds: &Dataset, format: FileFormat) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    match format {
        FileFormat::Csv => write_csv(&mut w, ds),
        FileFormat::Binary => write_binary(&mut w, ds),
    }
}

pub fn load_embeddings(path: &Path, format: FileFormat) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    match format {
        FileFormat::Csv => read_csv(BufReader::new(file)),
        FileFormat::Binary => read_binary(BufReader::new(file)),
    }
}

fn write_csv<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    let c = ds.dim();
    let mut header = String::from("label");
    for j in 0..c {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..ds.len() {
        let mut line = ds.labels()[i].to_string();
        for v in ds.features().row(i) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn read_csv<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty file"))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::parse("line 1", "header must start with 'label'"));
    }
    let c = cols.len() - 1;
    for (j, name) in cols.iter().skip(1).enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::parse(
                "line 1",
                format!("expected header column f{j}, found '{name}'"),
            ));
        }
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row_no = idx + 1; // data rows are 1-based; the header is line 1
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != c + 1 {
            return Err(Error::parse(
                format!("row {row_no}"),
                format!("expected {} columns, found {}", c + 1, fields.len()),
            ));
        }
        let label: i64 = fields[0].parse().map_err(|_| {
            Error::parse(
                format!("row {row_no}"),
                format!("bad label '{}'", fields[0]),
            )
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(format!("row {row_no}"), format!("bad value '{f}'")))?;
            data.push(v);
        }
    }
    let rows = labels.len();
    Dataset::new(Matrix::from_vec(rows, c, data), labels)
}

fn write_binary<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.dim() as u32).to_le_bytes())?;
    for &l in ds.labels() {
        w.write_all(&l.to_le_bytes())?;
    }
    for &v in ds.features().data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_binary<R: Read>(mut r: R) -> Result<Dataset> {
    let mut offset = 0usize;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::parse(
            "offset 0",
            format!("bad magic {magic:?}, expected {BINARY_MAGIC:?}"),
        ));
    }
    let m = read_u32_at(&mut r, &mut offset)? as usize;
    let c = read_u32_at(&mut r, &mut offset)? as usize;
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let mut buf = [0u8; 8];
        read_exact_at(&mut r, &mut buf, &mut offset)?;
        labels.push(i64::from_le_bytes(buf));
    }
    let mut data = Vec::with_capacity(m * c);
    for _ in 0..m * c {
        let mut buf = [0u8; 8];
        read_exact_at(&mut r, &mut buf, &mut offset)?;
        data.push(f64::from_le_bytes(buf));
    }
    Dataset::new(Matrix::from_vec(m, c, data), labels)
}

pub(crate) fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut usize) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        Error::parse(
            format!("offset {offset}"),
            format!("truncated: expected {} more bytes", buf.len()),
        )
    })?;
    *offset += buf.len();
    Ok(())
}

pub(crate) fn read_u32_at<R: Read>(r: &mut R, offset: &mut usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::fd_check;

    #[test]
    fn synthetic_zero_spread_collapses_classes() {
        let mut rng = Rng::new(1);
        let ds = gen_synthetic(&mut rng, 3, 4, 5, 0.0).unwrap();
        for label in ds.classes().collect::<Vec<_>>() {
            let rows = ds.class_rows(label).unwrap();
            let first = ds.features().row(rows[0]).to_vec();
            for &r in rows {
                assert_eq!(ds.features().row(r), first.as_slice());
            }
        }
    }

    #[test]
    fn synthetic_seed_determinism() {
        let a = gen_synthetic(&mut Rng::new(9), 4, 5, 6, 0.1).unwrap();
        let b = gen_synthetic(&mut Rng::new(9), 4, 5, 6, 0.1).unwrap();
        assert!(a.features().bits_eq(b.features()));
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn synthetic_tight_clusters_are_nearest_neighbor_separable() {
        let mut rng = Rng::new(3);
        let ds = gen_synthetic(&mut rng, 20, 10, 32, 0.05).unwrap();
        // 1-NN classification in input space.
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let d: f64 = ds
                    .features()
                    .row(i)
                    .iter()
                    .zip(ds.features().row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            if ds.labels()[best.1] == ds.labels()[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.95, "1-NN accuracy {acc}");
    }

    #[test]
    fn full_scale_batch_composition() {
        let mut rng = Rng::new(5);
        let ds = gen_synthetic(&mut rng, 120, 9, 8, 0.2).unwrap();
        let b = sample_batch(&ds, 100, 9, &mut rng).unwrap();
        assert_eq!(b.size(), 900);
    }

    #[test]
    fn single_class_batch_has_uniform_labels() {
        let mut rng = Rng::new(6);
        let ds = gen_synthetic(&mut rng, 5, 8, 4, 0.2).unwrap();
        let b = sample_batch(&ds, 1, 6, &mut rng).unwrap();
        assert!(b.labels.iter().all(|&l| l == b.labels[0]));
    }

    #[test]
    fn batch_histogram_is_exact_over_many_draws() {
        let mut rng = Rng::new(7);
        let ds = gen_synthetic(&mut rng, 12, 7, 4, 0.2).unwrap();
        for _ in 0..1000 {
            let b = sample_batch(&ds, 5, 3, &mut rng).unwrap();
            let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
            for &l in &b.labels {
                *hist.entry(l).or_insert(0) += 1;
            }
            assert_eq!(hist.len(), 5);
            assert!(hist.values().all(|&c| c == 3));
        }
    }

    #[test]
    fn sampler_errors_name_the_deficit() {
        let mut rng = Rng::new(8);
        let ds = gen_synthetic(&mut rng, 4, 3, 4, 0.2).unwrap();
        let err = sample_batch(&ds, 9, 2, &mut rng).unwrap_err().to_string();
        assert!(err.contains("4 classes") && err.contains("p=9"), "{err}");
        let err = sample_batch(&ds, 2, 5, &mut rng).unwrap_err().to_string();
        assert!(err.contains("3 samples") && err.contains("k_pc=5"), "{err}");
    }

    #[test]
    fn adapter_identity_paths() {
        let mut rng = Rng::new(10);
        let x = rng.normal_matrix(5, 4, 1.0);
        let disabled = AdapterParams::disabled(4);
        assert!(adapter_forward(&x, &disabled).unwrap().bits_eq(&x));
        let ident = AdapterParams::identity(4);
        assert!(adapter_forward(&x, &ident).unwrap().bits_eq(&x));
    }

    #[test]
    fn adapter_gradient_is_exact() {
        let mut rng = Rng::new(11);
        let x = rng.normal_matrix(5, 3, 1.0);
        let w = rng.normal_matrix(3, 3, 1.0);
        let b = rng.normal_matrix(1, 3, 1.0);
        let err = fd_check(
            |t: &mut Tape, ids: &[NodeId]| {
                let xc = t.constant(x.clone());
                let p = t.matmul(xc, ids[0])?;
                let p = t.add_bias(p, ids[1])?;
                Ok(t.sum(p))
            },
            &[w, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "adapter fd error {err}");
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let mut rng = Rng::new(12);
        let ds = gen_synthetic(&mut rng, 3, 4, 5, 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_embeddings(&path, &ds, FileFormat::Csv).unwrap();
        let back = load_embeddings(&path, FileFormat::Csv).unwrap();
        assert!(back.features().bits_eq(ds.features()));
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn csv_wrong_column_count_cites_row() {
        let mut text = String::from("label,f0,f1\n");
        for i in 0..10 {
            if i == 6 {
                text.push_str("3,0.5\n"); // row 7: one column short
            } else {
                text.push_str("1,0.5,0.25\n");
            }
        }
        let err = read_csv(std::io::Cursor::new(text))
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 7"), "{err}");
    }

    #[test]
    fn binary_round_trip_and_bad_magic() {
        let mut rng = Rng::new(13);
        let ds = gen_synthetic(&mut rng, 2, 3, 4, 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_embeddings(&path, &ds, FileFormat::Binary).unwrap();
        let back = load_embeddings(&path, FileFormat::Binary).unwrap();
        assert!(back.features().bits_eq(ds.features()));
        assert_eq!(back.labels(), ds.labels());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_embeddings(&path, FileFormat::Binary)
            .unwrap_err()
            .to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn class_disjoint_split() {
        let mut rng = Rng::new(14);
        let ds = gen_synthetic(&mut rng, 10, 4, 3, 0.2).unwrap();
        let (train, test) = ds.split_by_class(0.5).unwrap();
        assert_eq!(train.num_classes(), 5);
        assert_eq!(test.num_classes(), 5);
        let train_classes: Vec<i64> = train.classes().collect();
        let test_classes: Vec<i64> = test.classes().collect();
        assert!(train_classes.iter().all(|c| !test_classes.contains(c)));
        assert_eq!(train.len() + test.len(), ds.len());
    }
}
