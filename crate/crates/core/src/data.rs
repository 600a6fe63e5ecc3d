//! Datasets and checkpoints on disk, and the synthetic block-model generator.
//!
//! A dataset directory holds UTF-8, tab-separated, LF-terminated files:
//!
//! | file          | line `i`                                        |
//! |---------------|-------------------------------------------------|
//! | `meta.tsv`    | `key<TAB>value`; needs `n`, `d_raw`, `classes`, `name` |
//! | `graph.tsv`   | one undirected edge `u<TAB>v[<TAB>weight]`, `u < v` |
//! | `features.tsv`| `d_raw` floats for node `i`                     |
//! | `labels.tsv`  | class of node `i`                               |
//! | `splits.tsv`  | optional; `train`, `val` or `test` for node `i` |
//!
//! A checkpoint is the magic `CMX1`, a little-endian `u32` header length,
//! the UTF-8 header (`key=value` lines, then one `tensor=<name> <dims>` line
//! per tensor), and the raw little-endian `f64` data in header order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::config;
use crate::error::{Error, Result};
use crate::graph::{CsrGraph, Edge};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::training::Split;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graph: CsrGraph,
    /// `N×d_raw`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Option<Vec<Split>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let (rows, _) = self.features.dims2("features")?;
        if rows != n || self.labels.len() != n {
            return Err(Error::Dataset(format!(
                "{n} nodes, {rows} feature rows, {} labels",
                self.labels.len()
            )));
        }
        if self.classes == 0 {
            return Err(Error::Dataset("class count must be positive".into()));
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.classes) {
            return Err(Error::Dataset(format!("node {i} has label {y} outside [0, {})", self.classes)));
        }
        if !self.features.is_finite() {
            return Err(Error::Dataset("non-finite feature value".into()));
        }
        if let Some(splits) = &self.splits {
            if splits.len() != n {
                return Err(Error::Dataset(format!("{} split entries for {n} nodes", splits.len())));
            }
            let present: BTreeSet<usize> = splits
                .iter()
                .zip(&self.labels)
                .filter(|(s, _)| **s == Split::Train)
                .map(|(_, &y)| y)
                .collect();
            if present.len() < self.classes {
                log::warn!(
                    "{}: only {} of {} classes appear in the training split",
                    self.name,
                    present.len(),
                    self.classes
                );
            }
        }
        Ok(())
    }

    /// Relabels node `i` as `perm[i]` throughout.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let graph = self.graph.permuted(perm)?;
        let n = self.n();
        let d = self.features.shape()[1];
        let mut feats = vec![0.0; n * d];
        let mut labels = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            feats[p * d..(p + 1) * d].copy_from_slice(self.features.row(i));
            labels[p] = self.labels[i];
        }
        let splits = self.splits.as_ref().map(|s| {
            let mut out = vec![Split::Train; n];
            for (i, &p) in perm.iter().enumerate() {
                out[p] = s[i];
            }
            out
        });
        Ok(Self {
            name: self.name.clone(),
            graph,
            features: Tensor::new(&[n, d], feats)?,
            labels,
            classes: self.classes,
            splits,
        })
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_field<T: std::str::FromStr>(file: &str, line: usize, what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(file, line, format!("bad {what} `{s}`")))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_text = read(&dir.join("meta.tsv"))?;
    let mut meta = HashMap::new();
    for (ln, line) in lines(&meta_text) {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("meta.tsv", ln, "expected key<TAB>value"))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| parse_err("meta.tsv", 0, format!("missing key `{k}`")))
    };
    let n: usize = parse_field("meta.tsv", 0, "n", &get("n")?)?;
    let d_raw: usize = parse_field("meta.tsv", 0, "d_raw", &get("d_raw")?)?;
    let classes: usize = parse_field("meta.tsv", 0, "classes", &get("classes")?)?;
    let name = get("name")?;

    let mut edges: Vec<Edge> = Vec::new();
    for (ln, line) in lines(&read(&dir.join("graph.tsv"))?) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&f.len()) {
            return Err(parse_err("graph.tsv", ln, format!("expected 2 or 3 fields, got {}", f.len())));
        }
        let u: usize = parse_field("graph.tsv", ln, "node", f[0])?;
        let v: usize = parse_field("graph.tsv", ln, "node", f[1])?;
        let w: f64 = match f.get(2) {
            Some(s) => parse_field("graph.tsv", ln, "weight", s)?,
            None => 1.0,
        };
        if u >= v && u != v {
            return Err(parse_err("graph.tsv", ln, "edges must be listed with u < v"));
        }
        edges.push((u, v, w));
    }
    let self_loops = edges.iter().any(|e| e.0 == e.1);
    let graph = CsrGraph::build(n, &edges, true, self_loops)?;

    let mut feats = Vec::with_capacity(n * d_raw);
    let mut rows = 0;
    for (ln, line) in lines(&read(&dir.join("features.tsv"))?) {
        let before = feats.len();
        for s in line.split('\t') {
            feats.push(parse_field::<f64>("features.tsv", ln, "float", s)?);
        }
        if feats.len() - before != d_raw {
            return Err(parse_err(
                "features.tsv",
                ln,
                format!("expected {d_raw} values, got {}", feats.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != n {
        return Err(parse_err("features.tsv", rows, format!("expected {n} rows, got {rows}")));
    }

    let mut labels = Vec::with_capacity(n);
    for (ln, line) in lines(&read(&dir.join("labels.tsv"))?) {
        let y: usize = parse_field("labels.tsv", ln, "label", line)?;
        if y >= classes {
            return Err(parse_err("labels.tsv", ln, format!("label {y} outside [0, {classes})")));
        }
        labels.push(y);
    }
    if labels.len() != n {
        return Err(parse_err("labels.tsv", labels.len(), format!("expected {n} labels")));
    }

    let split_path = dir.join("splits.tsv");
    let splits = if split_path.exists() {
        let mut s = Vec::with_capacity(n);
        for (ln, line) in lines(&read(&split_path)?) {
            s.push(line.parse::<Split>().map_err(|e| parse_err("splits.tsv", ln, e.to_string()))?);
        }
        Some(s)
    } else {
        None
    };

    let ds = Dataset {
        name,
        graph,
        features: Tensor::new(&[n, d_raw], feats)?,
        labels,
        classes,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

/// Formats a float with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d_raw = ds.features.shape()[1];
    write(
        &dir.join("meta.tsv"),
        &format!("n\t{}\nd_raw\t{d_raw}\nclasses\t{}\nname\t{}\n", ds.n(), ds.classes, ds.name),
    )?;

    let mut graph = String::new();
    for (u, v, w) in ds.graph.undirected_edges() {
        if w == 1.0 {
            graph.push_str(&format!("{u}\t{v}\n"));
        } else {
            graph.push_str(&format!("{u}\t{v}\t{}\n", format_float(w)));
        }
    }
    write(&dir.join("graph.tsv"), &graph)?;

    let mut feats = String::new();
    for i in 0..ds.n() {
        let row: Vec<String> = ds.features.row(i).iter().map(|&v| format_float(v)).collect();
        feats.push_str(&row.join("\t"));
        feats.push('\n');
    }
    write(&dir.join("features.tsv"), &feats)?;

    let labels: String = ds.labels.iter().map(|y| format!("{y}\n")).collect();
    write(&dir.join("labels.tsv"), &labels)?;

    let split_path = dir.join("splits.tsv");
    match &ds.splits {
        Some(s) => write(&split_path, &s.iter().map(|x| format!("{x}\n")).collect::<String>())?,
        None if split_path.exists() => fs::remove_file(&split_path).map_err(|e| Error::io(&split_path, e))?,
        None => {}
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbmParams {
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub feat_sep: f64,
    pub seed: u64,
}

/// Stochastic block model with Gaussian features.
///
/// Node `i` belongs to block `i / (n/B)`. Each pair `u < v` is linked
/// independently with probability `p_in` inside a block and `p_out` across.
/// Block `b`'s feature mean is `feat_sep` along axis `b`, plus unit
/// Gaussian noise per coordinate.
pub fn gen_sbm(p: &SbmParams) -> Result<Dataset> {
    let SbmParams {
        nodes: n,
        blocks: b,
        p_in,
        p_out,
        feat_dim,
        feat_sep,
        seed,
    } = *p;
    if b < 2 || n == 0 || n % b != 0 {
        return Err(Error::InvalidArgument(format!("{n} nodes cannot be split into {b} equal blocks (need B >= 2)")));
    }
    if !(0.0 <= p_out && p_out < p_in && p_in <= 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")));
    }
    if feat_dim < b {
        return Err(Error::InvalidArgument(format!("feat_dim {feat_dim} cannot hold {b} orthogonal block means")));
    }
    if !feat_sep.is_finite() || feat_sep < 0.0 {
        return Err(Error::InvalidArgument(format!("feat_sep must be a non-negative number, got {feat_sep}")));
    }
    let size = n / b;
    let block = |i: usize| i / size;

    let mut rng = stream_rng(seed, Stream::SbmEdges);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block(u) == block(v) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v, 1.0));
            }
        }
    }
    let graph = CsrGraph::build(n, &edges, true, false)?;

    let mut rng = stream_rng(seed, Stream::SbmFeatures);
    let mut feats = Vec::with_capacity(n * feat_dim);
    for i in 0..n {
        for c in 0..feat_dim {
            let mean = if c == block(i) { feat_sep } else { 0.0 };
            feats.push(mean + rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(Dataset {
        name: format!("sbm-n{n}-b{b}-seed{seed}"),
        graph,
        features: Tensor::new(&[n, feat_dim], feats)?,
        labels: (0..n).map(block).collect(),
        classes: b,
        splits: None,
    })
}

/// Converts the raw Planetoid citation release (`<name>.content`, one
/// `<id> <features…> <label>` line per paper, and `<name>.cites`, one
/// `<cited> <citing>` pair per line) into a [`Dataset`].
///
/// Citations in both directions collapse into one undirected edge;
/// self-citations and citations to unknown papers are dropped. Classes are
/// numbered in sorted label-name order, nodes in file order.
pub fn import_planetoid(content: &Path, cites: &Path, name: &str, row_normalize: bool) -> Result<Dataset> {
    let content_text = read(content)?;
    let mut ids = HashMap::new();
    let mut feats = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = None;
    for (ln, line) in lines(&content_text) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 3 {
            return Err(parse_err("content", ln, "expected id, features and label"));
        }
        let d = f.len() - 2;
        if *width.get_or_insert(d) != d {
            return Err(parse_err("content", ln, format!("ragged row: {d} features")));
        }
        let mut row: Vec<f64> = f[1..f.len() - 1]
            .iter()
            .map(|s| parse_field("content", ln, "feature", s))
            .collect::<Result<_>>()?;
        if row_normalize {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        if ids.insert(f[0].to_string(), raw_labels.len()).is_some() {
            return Err(parse_err("content", ln, format!("duplicate paper id `{}`", f[0])));
        }
        feats.extend(row);
        raw_labels.push(f[f.len() - 1].to_string());
    }
    let n = raw_labels.len();
    let names: BTreeMap<&str, usize> = raw_labels
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|s| names[s.as_str()]).collect();

    let mut pairs = BTreeSet::new();
    let mut dropped = 0usize;
    for (ln, line) in lines(&read(cites)?) {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f[..] {
            [] => continue,
            [a, b] => match (ids.get(a), ids.get(b)) {
                (Some(&u), Some(&v)) if u != v => {
                    pairs.insert((u.min(v), u.max(v)));
                }
                _ => dropped += 1,
            },
            _ => return Err(parse_err("cites", ln, "expected two paper ids")),
        }
    }
    if dropped > 0 {
        log::info!("{name}: dropped {dropped} self or dangling citations");
    }
    let edges: Vec<Edge> = pairs.into_iter().map(|(u, v)| (u, v, 1.0)).collect();
    let ds = Dataset {
        name: name.to_string(),
        graph: CsrGraph::build(n, &edges, true, false)?,
        features: Tensor::new(&[n, width.unwrap_or(1)], feats)?,
        labels,
        classes: names.len(),
        splits: None,
    };
    ds.validate()?;
    Ok(ds)
}

const MAGIC: &[u8; 4] = b"CMX1";
const FORMAT_VERSION: &str = "1";

/// Writes a checkpoint. `extra` pairs are stored in the header verbatim and
/// returned by [`load_checkpoint`].
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, extra: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = format!("format_version={FORMAT_VERSION}\n");
    for (k, v) in config::model_pairs(cfg) {
        header.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in extra {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("header entry `{k}` is not a single key=value line")));
        }
        header.push_str(&format!("extra.{k}={v}\n"));
    }
    let tensors = params.named_tensors();
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor={name} {}\n", dims.join(",")));
    }
    let mut buf = Vec::with_capacity(8 + header.len() + 8 * params.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// A loaded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub extra: Vec<(String, String)>,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("truncated before header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header = std::str::from_utf8(body).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;

    let mut cfg = ModelConfig::default();
    let mut extra = Vec::new();
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    let mut version = None;
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
        if k == "format_version" {
            version = Some(v.to_string());
        } else if k == "tensor" {
            let (name, dims) = v
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor entry `{v}`")))?;
            let shape = dims
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape for `{name}`")))?;
            manifest.push((name.to_string(), shape));
        } else if let Some(key) = k.strip_prefix("extra.") {
            extra.push((key.to_string(), v.to_string()));
        } else if !config::set_model(&mut cfg, k, v)? {
            return Err(Error::Checkpoint(format!("unknown header key `{k}`")));
        }
    }
    match version.as_deref() {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Checkpoint(format!("unsupported format version {v}"))),
        None => return Err(Error::Checkpoint("missing format version".into())),
    }

    let expected = ModelParams::expected_manifest(&cfg);
    if manifest != expected {
        return Err(Error::Checkpoint("tensor manifest does not match the embedded config".into()));
    }
    let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let data = &bytes[8 + hlen..];
    if data.len() != 8 * total {
        return Err(Error::Checkpoint(format!(
            "truncated or oversized data: {} bytes for {total} values",
            data.len()
        )));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = manifest
        .iter()
        .map(|(_, shape)| {
            let len = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(len).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        params: ModelParams::from_tensors(&cfg, tensors)?,
        config: cfg,
        extra,
    })
}

/// Fails with every tensor whose shape differs between the checkpoint's
/// config and the run's config.
pub fn check_compatible(ckpt: &ModelConfig, run: &ModelConfig) -> Result<()> {
    let have = ModelParams::expected_manifest(ckpt);
    let want = ModelParams::expected_manifest(run);
    let have_map: HashMap<&str, &Vec<usize>> = have.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let mut problems = Vec::new();
    for (name, shape) in &want {
        match have_map.get(name.as_str()) {
            Some(s) if *s == shape => {}
            Some(s) => problems.push(format!("{name}: checkpoint {s:?}, run {shape:?}")),
            None => problems.push(format!("{name}: missing from checkpoint")),
        }
    }
    let want_names: BTreeSet<&str> = want.iter().map(|(n, _)| n.as_str()).collect();
    for (name, _) in &have {
        if !want_names.contains(name.as_str()) {
            problems.push(format!("{name}: not used by this run"));
        }
    }
    if problems.is_empty() && (ckpt.aggregator != run.aggregator || ckpt.extractor != run.extractor) {
        problems.push("aggregator or extractor differs".to_string());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::shape("checkpoint", problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p3_dataset() -> Dataset {
        Dataset {
            name: "p3".into(),
            graph: CsrGraph::build(3, &[(0, 1, 1.0), (1, 2, 2.5)], true, false).unwrap(),
            features: Tensor::from_rows(&[[0.1, -2.0], [1.0 / 3.0, 1e-300], [5.0, 7.25]]).unwrap(),
            labels: vec![0, 1, 0],
            classes: 2,
            splits: Some(vec![Split::Train, Split::Val, Split::Test]),
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = p3_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let graph = fs::read_to_string(dir.path().join("graph.tsv")).unwrap();
        assert_eq!(graph.lines().count(), 2);
    }

    #[test]
    fn empty_graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            graph: CsrGraph::empty(3),
            splits: None,
            ..p3_dataset()
        };
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("graph.tsv")).unwrap(), "");
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn bad_files_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&p3_dataset(), dir.path()).unwrap();
        fs::write(dir.path().join("labels.tsv"), "0\n2\n0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("labels.tsv:2"), "{err}");

        save_dataset(&p3_dataset(), dir.path()).unwrap();
        fs::write(dir.path().join("features.tsv"), "1\t2\n3\n4\t5\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("features.tsv:2"), "{err}");

        fs::remove_file(dir.path().join("meta.tsv")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn sbm_examples() {
        let p = SbmParams {
            nodes: 8,
            blocks: 2,
            p_in: 1.0,
            p_out: 0.0,
            feat_dim: 2,
            feat_sep: 1.0,
            seed: 3,
        };
        let ds = gen_sbm(&p).unwrap();
        assert_eq!(ds, gen_sbm(&p).unwrap());
        let mut expect = Vec::new();
        for base in [0, 4] {
            for u in base..base + 4 {
                for v in u + 1..base + 4 {
                    expect.push((u, v, 1.0));
                }
            }
        }
        assert_eq!(ds.graph.undirected_edges(), expect);
        assert_eq!(ds.labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(gen_sbm(&SbmParams { nodes: 9, ..p.clone() }).is_err());
        assert!(gen_sbm(&SbmParams { p_out: 1.0, ..p.clone() }).is_err());
        assert!(gen_sbm(&SbmParams { blocks: 1, ..p }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            input_dim: 3,
            k: 2,
            hidden: 4,
            token_hidden: 5,
            channel_hidden: 6,
            classes: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 8).unwrap();
        let extra = vec![("seed".to_string(), "8".to_string())];
        save_checkpoint(&params, &cfg, &extra, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.config, cfg);
        assert_eq!(back.extra, extra);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn compatibility_names_gamma() {
        let base = ModelConfig {
            input_dim: 3,
            ..ModelConfig::default()
        };
        let k5 = ModelConfig { k: 5, ..base.clone() };
        let err = check_compatible(&base, &k5).unwrap_err().to_string();
        assert!(err.contains("agg.gamma"), "{err}");
        assert!(check_compatible(&base, &base).is_ok());
    }

    #[test]
    fn permutation_moves_everything() {
        let ds = p3_dataset();
        let p = ds.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.labels, vec![1, 0, 0]);
        assert_eq!(p.features.row(2), ds.features.row(0));
        assert_eq!(p.graph.weight(0, 1), Some(2.5));
        assert_eq!(p.splits.unwrap()[2], Split::Train);
    }
}
