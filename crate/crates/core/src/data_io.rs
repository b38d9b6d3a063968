//! Datasets, problem specs, synthetic recipes, model files and reports.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::consistency::{
    sample_simplex, ApproxGapRecord, Atom, BoundCheckReport, CalibrationCurve,
    ConditionalDistribution, DiscreteProblem, GapReport,
};
use crate::error::{Error, Result};
use crate::finite_sample::CoverageReport;
use crate::hypothesis::{hex, Metrics, Model, ModelMetadata, ModelSpec, WeightedSample};
use crate::losses::CostModel;

/// Sum tolerance for hand-written problem specs.
pub const SPEC_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Tabular data

/// Labeled rows with labels stored as indices into `label_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub n: usize,
    pub d: usize,
}

impl TabularDataset {
    pub fn m(&self) -> usize {
        self.labels.len()
    }

    /// Original label of row `i`.
    pub fn label_name(&self, i: usize) -> &str {
        &self.label_names[self.labels[i]]
    }

    /// Writes the dataset with feature columns first and the label last.
    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = self.feature_names.clone();
        header.push(label_column.to_string());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(self.label_names[y].clone());
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<&TabularDataset> for WeightedSample {
    type Error = Error;

    fn try_from(data: &TabularDataset) -> Result<Self> {
        WeightedSample::uniform(data.features.clone(), data.labels.clone(), data.n)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Numeric labels sort by value, anything else lexicographically.
fn sorted_labels(mut names: Vec<String>) -> Vec<String> {
    names.sort();
    names.dedup();
    let numeric: Option<Vec<f64>> = names.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(vals) = numeric {
        let mut idx: Vec<usize> = (0..names.len()).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        return idx.into_iter().map(|i| names[i].clone()).collect();
    }
    names
}

struct RawCsv {
    feature_names: Vec<String>,
    rows: Vec<(usize, Vec<f64>, String)>,
}

fn read_raw_csv(path: &Path, label_column: &str) -> Result<RawCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| parse_err(1, format!("missing label column '{label_column}'")))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut x = Vec::with_capacity(feature_names.len());
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_err(line, format!("non-numeric feature '{}' = {cell:?}", header[i].to_string()))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature '{}'", &header[i])));
            }
            x.push(v);
        }
        let label = rec[label_idx].trim().to_string();
        if label.is_empty() {
            return Err(parse_err(line, "empty label".into()));
        }
        rows.push((line, x, label));
    }
    if rows.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    Ok(RawCsv {
        feature_names,
        rows,
    })
}

/// Loads a CSV with a header row. Features are every non-label column in
/// header order; labels are mapped to `0..n` in sorted order.
pub fn load_csv(path: &Path, label_column: &str) -> Result<TabularDataset> {
    let raw = read_raw_csv(path, label_column)?;
    let names = sorted_labels(raw.rows.iter().map(|r| r.2.clone()).collect());
    if names.len() < 2 {
        return Err(Error::Parse {
            path: path.into(),
            line: 2,
            message: "need at least two distinct labels".into(),
        });
    }
    finish_csv(path, raw, names)
}

/// Loads a CSV against a fixed label mapping; labels outside it are an error.
pub fn load_csv_with_labels(
    path: &Path,
    label_column: &str,
    label_names: &[String],
) -> Result<TabularDataset> {
    let raw = read_raw_csv(path, label_column)?;
    finish_csv(path, raw, label_names.to_vec())
}

fn finish_csv(path: &Path, raw: RawCsv, names: Vec<String>) -> Result<TabularDataset> {
    let mut features = Vec::with_capacity(raw.rows.len());
    let mut labels = Vec::with_capacity(raw.rows.len());
    for (line, x, label) in raw.rows {
        let y = names.iter().position(|n| *n == label).ok_or_else(|| Error::Parse {
            path: path.into(),
            line,
            message: format!("label '{label}' is not in the label mapping"),
        })?;
        features.push(x);
        labels.push(y);
    }
    Ok(TabularDataset {
        d: raw.feature_names.len(),
        n: names.len(),
        features,
        labels,
        label_names: names,
        feature_names: raw.feature_names,
    })
}

// ---------------------------------------------------------------------------
// Problem specs

/// Parses the line format
///
/// ```text
/// n=<int> c=<real>
/// <weight> <p1> ... <pn> [| <f1> ... <fd>]
/// ```
///
/// with `#` comments.
pub fn parse_problem_spec(text: &str, path: &Path) -> Result<DiscreteProblem> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty problem spec".into()))?;
    let (mut n, mut c) = (None, None);
    for tok in header.split_whitespace() {
        match tok.split_once('=') {
            Some(("n", v)) => n = v.parse::<usize>().ok(),
            Some(("c", v)) => c = v.parse::<f64>().ok(),
            _ => return Err(err(hline, format!("unexpected header token '{tok}'"))),
        }
    }
    let n = n.ok_or_else(|| err(hline, "header needs n=<int>".into()))?;
    let c = c.ok_or_else(|| err(hline, "header needs c=<real>".into()))?;
    let cost = CostModel::new(c).map_err(|e| err(hline, e.to_string()))?;

    let mut atoms = Vec::new();
    let mut lines_of = Vec::new();
    for (line, body) in lines {
        let (left, right) = match body.split_once('|') {
            Some((l, r)) => (l, Some(r)),
            None => (body, None),
        };
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(line, format!("bad number '{t}'")))
                })
                .collect()
        };
        let vals = nums(left)?;
        if vals.len() != n + 1 {
            return Err(err(
                line,
                format!("expected a weight and {n} probabilities, got {} numbers", vals.len()),
            ));
        }
        let dist = ConditionalDistribution::with_tolerance(vals[1..].to_vec(), cost, SPEC_TOL)
            .map_err(|e| err(line, e.to_string()))?;
        let features = right.map(nums).transpose()?;
        if matches!(&features, Some(f) if f.is_empty()) {
            return Err(err(line, "empty feature list after '|'".into()));
        }
        atoms.push(Atom {
            weight: vals[0],
            dist,
            features,
        });
        lines_of.push(line);
    }
    if atoms.is_empty() {
        return Err(err(hline, "problem spec has no atoms".into()));
    }
    for (i, a) in atoms.iter().enumerate() {
        if let Some(f) = &a.features {
            if atoms[..i].iter().any(|b| b.features.as_ref() == Some(f)) {
                return Err(err(lines_of[i], "duplicate feature vector".into()));
            }
        }
    }
    let last = *lines_of.last().unwrap();
    DiscreteProblem::with_tolerance(atoms, SPEC_TOL).map_err(|e| err(last, e.to_string()))
}

pub fn load_problem_spec(path: &Path) -> Result<DiscreteProblem> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_problem_spec(&text, path)
}

/// Inverse of [`parse_problem_spec`]; numbers use shortest round-trip text.
pub fn format_problem_spec(problem: &DiscreteProblem) -> String {
    let mut out = format!("n={} c={}\n", problem.n(), problem.cost().value());
    for a in problem.atoms() {
        out.push_str(&a.weight.to_string());
        for p in a.dist.p() {
            out.push(' ');
            out.push_str(&p.to_string());
        }
        if let Some(f) = &a.features {
            out.push_str(" |");
            for v in f {
                out.push(' ');
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_problem_spec(path: &Path, problem: &DiscreteProblem) -> Result<()> {
    fs::write(path, format_problem_spec(problem)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic recipes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    SeparableMargin,
    LabelNoise,
    ChowStress,
}

impl std::str::FromStr for RecipeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable_margin" | "separable" => Ok(Self::SeparableMargin),
            "label_noise" => Ok(Self::LabelNoise),
            "chow_stress" => Ok(Self::ChowStress),
            _ => Err(Error::InvalidArgument(format!(
                "unknown recipe '{s}' (separable_margin, label_noise, chow_stress)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecipe {
    pub kind: RecipeKind,
    pub n: usize,
    pub d: usize,
    pub c: f64,
    /// Margin of the generating separator (separable and label-noise).
    pub margin: f64,
    /// Label-flip probability (label-noise only).
    pub noise: f64,
    pub atoms: usize,
    pub seed: u64,
}

impl SyntheticRecipe {
    pub fn separable(n: usize, d: usize, c: f64, margin: f64, atoms: usize, seed: u64) -> Self {
        Self {
            kind: RecipeKind::SeparableMargin,
            n,
            d,
            c,
            margin,
            noise: 0.0,
            atoms,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        CostModel::new(self.c)?;
        if self.n < 2 {
            return bad(format!("recipe needs n >= 2, got {}", self.n));
        }
        if self.atoms == 0 {
            return bad("recipe needs at least one atom".into());
        }
        match self.kind {
            RecipeKind::SeparableMargin | RecipeKind::LabelNoise => {
                if self.d < 2 {
                    return bad(format!("margin recipes need d >= 2, got {}", self.d));
                }
                if !(self.margin.is_finite() && self.margin > 0.0) {
                    return bad(format!("margin must be > 0, got {}", self.margin));
                }
                if !(0.0..=0.5).contains(&self.noise) {
                    return bad(format!("noise rate must lie in [0, 0.5], got {}", self.noise));
                }
            }
            RecipeKind::ChowStress => {
                if self.d == 0 {
                    return bad("chow_stress needs d >= 1".into());
                }
                if self.atoms < 2 {
                    return bad("chow_stress needs at least two atoms".into());
                }
            }
        }
        Ok(())
    }
}

/// Unit class directions spread on a circle in the first two coordinates.
pub fn class_directions(n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            let mut u = vec![0.0; d];
            u[0] = t.cos();
            u[1] = t.sin();
            u
        })
        .collect()
}

/// `min_{j≠y} (w_y − w_j)·x / ‖w_y − w_j‖`.
pub fn multiclass_margin(w: &[Vec<f64>], x: &[f64], y: usize) -> f64 {
    (0..w.len())
        .filter(|&j| j != y)
        .map(|j| {
            let diff: Vec<f64> = w[y].iter().zip(&w[j]).map(|(a, b)| a - b).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            diff.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / norm
        })
        .fold(f64::INFINITY, f64::min)
}

const MAX_TRIES_PER_ATOM: usize = 10_000;

/// Box points whose class under [`class_directions`] holds with margin.
fn margin_points(r: &SyntheticRecipe, rng: &mut ChaCha8Rng) -> Result<Vec<(Vec<f64>, usize)>> {
    let dirs = class_directions(r.n, r.d);
    let mut out = Vec::with_capacity(r.atoms);
    let mut tries = 0;
    while out.len() < r.atoms {
        tries += 1;
        if tries > MAX_TRIES_PER_ATOM * r.atoms {
            return Err(Error::InfeasibleRecipe(format!(
                "margin {} not reachable in [-1, 1]^{} for n = {}",
                r.margin, r.d, r.n
            )));
        }
        let x: Vec<f64> = (0..r.d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let y = (0..r.n)
            .max_by(|&a, &b| {
                let sa: f64 = dirs[a].iter().zip(&x).map(|(u, v)| u * v).sum();
                let sb: f64 = dirs[b].iter().zip(&x).map(|(u, v)| u * v).sum();
                sa.total_cmp(&sb)
            })
            .unwrap();
        if multiclass_margin(&dirs, &x, y) >= r.margin && !out.iter().any(|(f, _)| *f == x) {
            out.push((x, y));
        }
    }
    Ok(out)
}

/// Top-label probability near or away from `1 − c`, and the remaining mass
/// spread so the runner-up trails by at least 0.05.
fn chow_stress_dist(
    r: &SyntheticRecipe,
    near: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    const GAP: f64 = 0.05;
    let n = r.n as f64;
    let t = 1.0 - r.c;
    let lo = (1.0 + GAP * (n - 1.0)) / n;
    let infeasible = || {
        Error::InfeasibleRecipe(format!(
            "no admissible top probability around {t} for n = {}",
            r.n
        ))
    };
    let top = if near {
        let minus = t - 0.05 >= lo;
        let plus = t + 0.05 <= 1.0;
        let u = rng.gen_range(0.01..=0.05);
        match (minus, plus) {
            (true, true) => {
                if rng.gen_bool(0.5) {
                    t + u
                } else {
                    t - u
                }
            }
            (true, false) => t - u,
            (false, true) => t + u,
            (false, false) => return Err(infeasible()),
        }
    } else {
        let below = (lo, t - 0.06);
        let above = (t + 0.06, 1.0);
        let lb = (below.1 - below.0).max(0.0);
        let la = (above.1 - above.0).max(0.0);
        if lb + la <= 0.0 {
            return Err(infeasible());
        }
        let u = rng.gen_range(0.0..lb + la);
        if u < lb {
            below.0 + u
        } else {
            above.0 + (u - lb)
        }
    };
    let rest = 1.0 - top;
    let cap = top - GAP;
    let mut others = vec![rest / (n - 1.0); r.n - 1];
    for _ in 0..100 {
        let s = sample_simplex(rng, r.n - 1);
        if s.iter().all(|v| v * rest <= cap) {
            others = s.into_iter().map(|v| v * rest).collect();
            break;
        }
    }
    let y = rng.gen_range(0..r.n);
    let mut p = Vec::with_capacity(r.n);
    let mut it = others.into_iter();
    for k in 0..r.n {
        p.push(if k == y { top } else { it.next().unwrap() });
    }
    Ok(p)
}

/// Draws i.i.d. datasets from a generated problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSampler {
    pub problem: DiscreteProblem,
    pub seed: u64,
}

impl DatasetSampler {
    /// Draw `index` of size `m`; the same `(seed, index)` gives the same rows.
    pub fn sample(&self, m: usize, index: u64) -> Result<TabularDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let s = self.problem.sample(m, &mut rng)?;
        let d = s.dim();
        Ok(TabularDataset {
            features: s.features,
            labels: s.labels,
            label_names: (1..=self.problem.n()).map(|k| k.to_string()).collect(),
            feature_names: (1..=d).map(|k| format!("f{k}")).collect(),
            n: self.problem.n(),
            d,
        })
    }
}

/// Builds the problem described by `recipe` with uniform atom weights.
pub fn generate(recipe: &SyntheticRecipe) -> Result<(DiscreteProblem, DatasetSampler)> {
    recipe.validate()?;
    let cost = CostModel::new(recipe.c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let w = 1.0 / recipe.atoms as f64;
    let atoms = match recipe.kind {
        RecipeKind::SeparableMargin | RecipeKind::LabelNoise => margin_points(recipe, &mut rng)?
            .into_iter()
            .map(|(x, y)| {
                let rho = if recipe.kind == RecipeKind::LabelNoise {
                    recipe.noise
                } else {
                    0.0
                };
                let other = rho / (recipe.n - 1) as f64;
                let p = (0..recipe.n)
                    .map(|k| if k == y { 1.0 - rho } else { other })
                    .collect();
                Ok(Atom {
                    weight: w,
                    dist: ConditionalDistribution::new(p, cost)?,
                    features: Some(x),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        RecipeKind::ChowStress => (0..recipe.atoms)
            .map(|i| {
                let x: Vec<f64> = (0..recipe.d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let p = chow_stress_dist(recipe, i < recipe.atoms / 2, &mut rng)?;
                Ok(Atom {
                    weight: w,
                    dist: ConditionalDistribution::new(p, cost)?,
                    features: Some(x),
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let problem = DiscreteProblem::new(atoms)?;
    let sampler = DatasetSampler {
        problem: problem.clone(),
        seed: recipe.seed ^ 0x5eed_da7a,
    };
    Ok((problem, sampler))
}

// ---------------------------------------------------------------------------
// Model files

pub const MODEL_FORMAT: &str = "abstention-model";
pub const MODEL_VERSION: u32 = 1;
const PARAMS_PER_LINE: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    spec: ModelSpec,
    metadata: ModelMetadata,
    param_count: usize,
    sha256: String,
}

fn param_block(params: &[f64]) -> String {
    let mut out = String::new();
    for chunk in params.chunks(PARAMS_PER_LINE) {
        let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Text form: a JSON header line, then the parameters in decimal.
pub fn model_to_string(model: &Model) -> Result<String> {
    let body = param_block(model.params());
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        spec: *model.spec(),
        metadata: model.metadata.clone(),
        param_count: model.params().len(),
        sha256: hex(&Sha256::digest(body.as_bytes())),
    };
    Ok(format!("{}\n{}", serde_json::to_string(&header)?, body))
}

pub fn model_from_str(text: &str) -> Result<Model> {
    let (head, body) = text.split_once('\n').ok_or(Error::Checksum)?;
    let value: Value = serde_json::from_str(head).map_err(|_| Error::Checksum)?;
    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or(Error::Checksum)? as u32;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let header: ModelHeader = serde_json::from_value(value)?;
    if header.format != MODEL_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "not a model file (format '{}')",
            header.format
        )));
    }
    if hex(&Sha256::digest(body.as_bytes())) != header.sha256 {
        return Err(Error::Checksum);
    }
    let params: Vec<f64> = body
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Checksum))
        .collect::<Result<_>>()?;
    if params.len() != header.param_count {
        return Err(Error::Checksum);
    }
    let mut model = Model::from_params(header.spec, params)?;
    model.metadata = header.metadata;
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, model_to_string(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let k = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex(&h.finalize()))
}

// ---------------------------------------------------------------------------
// Reports

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Metrics of one or more models on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub cost: f64,
    pub dataset: String,
    pub m: usize,
    pub models: Vec<ModelEvaluation>,
    pub mean_abstention_loss: f64,
    /// Sample standard deviation; only with two or more models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_abstention_loss: Option<f64>,
    pub mean_rejection_rate: f64,
}

impl MetricsRecord {
    pub fn new(cost: f64, dataset: String, m: usize, models: Vec<ModelEvaluation>) -> Self {
        let k = models.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| models.iter().map(|e| f(&e.metrics)).sum::<f64>() / k;
        let mean_abstention_loss = mean(|m| m.abstention_loss);
        let mean_rejection_rate = mean(|m| m.rejection_rate);
        let std_abstention_loss = (models.len() > 1).then(|| {
            let v = models
                .iter()
                .map(|e| (e.metrics.abstention_loss - mean_abstention_loss).powi(2))
                .sum::<f64>()
                / (k - 1.0);
            v.sqrt()
        });
        Self {
            cost,
            dataset,
            m,
            models,
            mean_abstention_loss,
            std_abstention_loss,
            mean_rejection_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSweepRow {
    pub mu: f64,
    #[serde(rename = "closed_form_V")]
    pub closed_form_v: f64,
    #[serde(rename = "numeric_V")]
    pub numeric_v: f64,
    pub oracle_residual: f64,
}

/// `V(μ, c)` over a μ grid at fixed `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSweep {
    pub c: f64,
    pub rows: Vec<GapSweepRow>,
    pub max_abs_error: f64,
    pub monotone_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizableRun {
    pub c: f64,
    pub two_stage_loss: f64,
    pub single_stage_loss: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizableRecord {
    pub recipe: SyntheticRecipe,
    pub certified_margin: f64,
    pub threshold: f64,
    pub runs: Vec<RealizableRun>,
    pub passed: bool,
}

/// Everything `write_report` accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    BoundCheck(BoundCheckReport),
    Gap(GapReport),
    GapSweep(GapSweep),
    Metrics(MetricsRecord),
    Coverage(CoverageReport),
    Calibration(CalibrationCurve),
    ApproxGap(ApproxGapRecord),
    Realizable(RealizableRecord),
}

/// JSON object with `schema_version` and `kind` fields.
pub fn report_to_json(report: &Report) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    if let Value::Object(map) = &mut v {
        map.insert("schema_version".into(), Value::from(REPORT_SCHEMA_VERSION));
    }
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn report_from_json(text: &str) -> Result<Report> {
    let mut v: Value = serde_json::from_str(text)?;
    let found = v
        .as_object_mut()
        .and_then(|m| m.remove("schema_version"))
        .and_then(|s| s.as_u64())
        .ok_or_else(|| Error::InvalidArgument("report lacks schema_version".into()))?
        as u32;
    if found != REPORT_SCHEMA_VERSION {
        return Err(Error::Version {
            found,
            supported: REPORT_SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(v)?)
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => Some(String::new()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        _ => None,
    }
}

fn flatten_scalars(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    if let Some(s) = scalar_text(v) {
        out.push((prefix.to_string(), s));
    } else if let Value::Object(m) = v {
        for (k, x) in m {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            flatten_scalars(&key, x, out);
        }
    }
}

/// Flat table of a report: scalar fields repeat on every row, numeric
/// arrays and arrays of records become per-row columns.
pub fn report_to_csv(report: &Report) -> Result<String> {
    let v = serde_json::to_value(report)?;
    let map: Map<String, Value> = match v {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let mut scalars = Vec::new();
    let mut columns: Vec<(String, Vec<String>)> = Vec::new();
    for (k, x) in &map {
        match x {
            Value::Array(items) if items.iter().all(|i| scalar_text(i).is_some()) => {
                columns.push((k.clone(), items.iter().filter_map(scalar_text).collect()));
            }
            Value::Array(items) if items.iter().all(Value::is_object) => {
                let mut names: Vec<String> = Vec::new();
                let rows: Vec<Vec<(String, String)>> = items
                    .iter()
                    .map(|i| {
                        let mut f = Vec::new();
                        flatten_scalars(k, i, &mut f);
                        f
                    })
                    .collect();
                for r in &rows {
                    for (name, _) in r {
                        if !names.contains(name) {
                            names.push(name.clone());
                        }
                    }
                }
                for name in names {
                    let col = rows
                        .iter()
                        .map(|r| {
                            r.iter()
                                .find(|(n, _)| *n == name)
                                .map(|(_, s)| s.clone())
                                .unwrap_or_default()
                        })
                        .collect();
                    columns.push((name, col));
                }
            }
            Value::Array(_) => {}
            other => flatten_scalars(k, other, &mut scalars),
        }
    }
    let rows = columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0).max(1);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = scalars.iter().map(|(k, _)| k.clone()).collect();
    if !columns.is_empty() {
        header.push("row".into());
    }
    header.extend(columns.iter().map(|(k, _)| k.clone()));
    let to_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record(&header).map_err(to_err)?;
    for r in 0..rows {
        let mut rec: Vec<String> = scalars.iter().map(|(_, s)| s.clone()).collect();
        if !columns.is_empty() {
            rec.push(r.to_string());
        }
        rec.extend(columns.iter().map(|(_, c)| c.get(r).cloned().unwrap_or_default()));
        w.write_record(&rec).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Path of the CSV written next to a JSON report.
pub fn csv_sidecar(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes `path` (JSON) and its CSV sidecar.
pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    fs::write(path, report_to_json(report)?).map_err(|e| Error::io(path, e))?;
    let side = csv_sidecar(path);
    fs::write(&side, report_to_csv(report)?).map_err(|e| Error::io(&side, e))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    report_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        (dir, p)
    }

    #[test]
    fn csv_three_rows() {
        let (_d, p) = tmp("a.csv", "f1,f2,y\n1,2,b\n3,4,a\n5,6,b\n");
        let ds = load_csv(&p, "y").unwrap();
        assert_eq!((ds.m(), ds.d, ds.n), (3, 2, 2));
        assert_eq!(ds.label_names, vec!["a", "b"]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
        assert_eq!(ds.label_name(0), "b");
    }

    #[test]
    fn csv_errors() {
        let (_d, p) = tmp("a.csv", "f1,f2,y\n");
        assert!(matches!(load_csv(&p, "y"), Err(Error::Parse { .. })));
        let (_d, p) = tmp("b.csv", "f1,f2,y\n1,2,a\n1,NaN,b\n");
        match load_csv(&p, "y") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let (_d, p) = tmp("c.csv", "f1,f2,y\n1,2,a\n1,x,b\n");
        assert!(load_csv(&p, "y").unwrap_err().to_string().contains("line 3"));
        assert!(load_csv(&p, "label").is_err());
    }

    #[test]
    fn numeric_labels_sort_by_value() {
        let names = sorted_labels(vec!["10".into(), "2".into(), "1".into()]);
        assert_eq!(names, vec!["1", "2", "10"]);
    }

    #[test]
    fn spec_examples() {
        let p = Path::new("t");
        let ok = parse_problem_spec("# two atoms\nn=2 c=0.2\n0.5 1 0\n0.5 0 1\n", p).unwrap();
        assert_eq!(ok.atoms().len(), 2);
        assert!(parse_problem_spec("n=2 c=0.2\n1 0.5 0.48\n", p).is_err());
        assert!(parse_problem_spec("n=2 c=1.0\n1 1 0\n", p).is_err());
        assert!(parse_problem_spec("n=2 c=0.2\n0.5 1 0 | 1\n0.5 0 1 | 1\n", p).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let text = "n=3 c=0.3\n0.25 0.2 0.3 0.5 | 1 -2\n0.75 0 0 1 | 0.5 0.25\n";
        let a = parse_problem_spec(text, Path::new("t")).unwrap();
        let first = format_problem_spec(&a);
        let b = parse_problem_spec(&first, Path::new("t")).unwrap();
        assert_eq!(a, b);
        assert_eq!(first, format_problem_spec(&b));
    }

    #[test]
    fn model_file_errors() {
        let spec = ModelSpec {
            kind: crate::hypothesis::ModelKind::Mlp { width: 3 },
            input_dim: 2,
            output_count: 3,
            clamp: Some(2.0),
        };
        let model = Model::new(spec, 4).unwrap();
        let text = model_to_string(&model).unwrap();
        let back = model_from_str(&text).unwrap();
        assert_eq!(back.param_hash(), model.param_hash());
        assert!(matches!(
            model_from_str(&text[..text.len() - 5]),
            Err(Error::Checksum)
        ));
        let future = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            model_from_str(&future),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
