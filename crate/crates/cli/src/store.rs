//! Text checkpoints and CSV files.
//!
//! Every float is written with 17 significant digits (`{:.16e}`), which
//! round-trips an `f64` exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use adaptmeta::autodiff::Tensor;
use adaptmeta::ensemble::TrajectoryLog;

const MAGIC: &str = "adaptmeta-checkpoint 1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}: {msg}")]
    Content { path: PathBuf, msg: String },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(path: &Path, line: u64, msg: impl Into<String>) -> Self {
        StoreError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    pub fn content(path: &Path, msg: impl Into<String>) -> Self {
        StoreError::Content {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn read_text(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(|e| StoreError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), StoreError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| StoreError::io(path, e))
}

/// Named arrays plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(module: &str) -> Self {
        let mut c = Checkpoint::default();
        c.metadata.insert("module".into(), module.into());
        c
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn extend(&mut self, prefix: &str, tensors: &[Tensor]) {
        for (i, t) in tensors.iter().enumerate() {
            self.push(format!("{prefix}.{i}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// `prefix.0`, `prefix.1`, ... until the first gap.
    pub fn series(&self, prefix: &str) -> Vec<Tensor> {
        (0..)
            .map_while(|i| self.get(&format!("{prefix}.{i}")).cloned())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        for (k, v) in &self.metadata {
            s.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.arrays {
            let mut head = vec!["array".to_string(), name.clone(), t.rank().to_string()];
            head.extend(t.shape().iter().map(|d| d.to_string()));
            s.push_str(&head.join(" "));
            s.push('\n');
            for v in t.data() {
                s.push_str(&fmt_f64(*v));
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, StoreError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(StoreError::parse(path, 1, format!("expected header {MAGIC:?}"))),
        }
        let mut c = Checkpoint::default();
        while let Some((no, line)) = lines.next() {
            let mut words = line.split(' ');
            match words.next() {
                Some("meta") => {
                    let key = words
                        .next()
                        .ok_or_else(|| StoreError::parse(path, no, "meta without key"))?;
                    let value: Vec<&str> = words.collect();
                    c.metadata.insert(key.into(), value.join(" "));
                }
                Some("array") => {
                    let name = words
                        .next()
                        .ok_or_else(|| StoreError::parse(path, no, "array without name"))?;
                    let nums: Vec<usize> = words
                        .filter(|w| !w.is_empty())
                        .map(|w| {
                            w.parse()
                                .map_err(|_| StoreError::parse(path, no, format!("bad dimension {w:?}")))
                        })
                        .collect::<Result<_, _>>()?;
                    let (&rank, dims) = nums
                        .split_first()
                        .ok_or_else(|| StoreError::parse(path, no, "array without rank"))?;
                    if dims.len() != rank {
                        return Err(StoreError::parse(
                            path,
                            no,
                            format!("rank {rank} with {} dimensions", dims.len()),
                        ));
                    }
                    let n: usize = dims.iter().product();
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        let (vno, v) = lines
                            .next()
                            .ok_or_else(|| StoreError::parse(path, no, format!("array {name} truncated")))?;
                        data.push(
                            v.trim()
                                .parse::<f64>()
                                .map_err(|_| StoreError::parse(path, vno, format!("bad value {v:?}")))?,
                        );
                    }
                    let t = Tensor::new(dims.to_vec(), data).map_err(|e| StoreError::parse(path, no, e.to_string()))?;
                    c.arrays.push((name.into(), t));
                }
                Some("") if line.trim().is_empty() => {}
                _ => return Err(StoreError::parse(path, no, format!("unexpected line {line:?}"))),
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn meta_str(&self, key: &str, path: &Path) -> Result<&str, StoreError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| StoreError::content(path, format!("missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T, StoreError> {
        let s = self.meta_str(key, path)?;
        s.parse()
            .map_err(|_| StoreError::content(path, format!("metadata {key:?} has bad value {s:?}")))
    }

    /// Shapes of `prefix.*` must match `like` exactly.
    pub fn series_like(&self, prefix: &str, like: &[Tensor], path: &Path) -> Result<Vec<Tensor>, StoreError> {
        let got = self.series(prefix);
        if got.len() != like.len() || got.iter().zip(like).any(|(a, b)| a.shape() != b.shape()) {
            return Err(StoreError::content(
                path,
                format!("arrays {prefix}.* do not match the expected layout"),
            ));
        }
        Ok(got)
    }
}

/// Rows of strings under a header; floats should already be formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| StoreError::content(path, e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| StoreError::content(path, e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("utf-8"))
}

/// Records after the header, checked against `header`, with their line numbers.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>, StoreError> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let got = r
        .headers()
        .map_err(|e| StoreError::parse(path, 1, e.to_string()))?
        .clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(StoreError::parse(
            path,
            1,
            format!("header {:?}, expected {header:?}", got.iter().collect::<Vec<_>>()),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            StoreError::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        out.push((line, rec));
    }
    Ok(out)
}

pub fn field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
) -> Result<T, StoreError> {
    let raw = rec
        .get(i)
        .ok_or_else(|| StoreError::parse(path, line, format!("missing column {name}")))?;
    raw.trim()
        .parse()
        .map_err(|_| StoreError::parse(path, line, format!("bad {name} {raw:?}")))
}

pub const TRAJECTORY_HEADER: [&str; 10] = ["t", "x", "y", "phi", "xdot", "ydot", "phidot", "u1", "u2", "u3"];

pub fn write_trajectory(path: &Path, log: &TrajectoryLog) -> Result<(), StoreError> {
    let rows = (0..log.times.len()).map(|k| {
        std::iter::once(log.times[k])
            .chain(log.states[k])
            .chain(log.controls[k])
            .map(fmt_f64)
            .collect()
    });
    write_csv(path, &TRAJECTORY_HEADER, rows)
}

/// Reads one trajectory; the time column must increase strictly.
pub fn read_trajectory(path: &Path, id: usize, wind: Option<f64>) -> Result<TrajectoryLog, StoreError> {
    let recs = read_csv(path, &TRAJECTORY_HEADER)?;
    let mut times = Vec::with_capacity(recs.len());
    let mut states = Vec::with_capacity(recs.len());
    let mut controls = Vec::with_capacity(recs.len());
    for (line, rec) in &recs {
        let mut vals = [0.0f64; 10];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = field(path, *line, rec, i, TRAJECTORY_HEADER[i])?;
            if !v.is_finite() {
                return Err(StoreError::parse(
                    path,
                    *line,
                    format!("non-finite {}", TRAJECTORY_HEADER[i]),
                ));
            }
        }
        if let Some(&prev) = times.last() {
            if vals[0] <= prev {
                return Err(StoreError::parse(
                    path,
                    *line,
                    format!("time {} does not increase", vals[0]),
                ));
            }
        }
        times.push(vals[0]);
        states.push(std::array::from_fn(|i| vals[1 + i]));
        controls.push(std::array::from_fn(|i| vals[7 + i]));
    }
    TrajectoryLog::new(times, states, controls, wind)
        .map(|l| l.with_id(id))
        .map_err(|e| StoreError::content(path, e.to_string()))
}
