//! Perceptual distances between categories and the category-attribute matrix
//! that embeds them.

mod density;
mod embed;

pub use density::{
    beta_pdf, kde_eval, kde_kl_with_grad, kl_beta_vs_kde, silverman_bandwidth, Bandwidth,
    BetaParams, DensityEstimate, DensityGrid, DENSITY_FLOOR, MIN_BANDWIDTH,
};
pub use embed::{pairwise_stress, solve_category_attribute_matrix, SolveReport, SolverConfig};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Yes/no answers to "are these two categories similar?" for one ordered pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub a: usize,
    pub b: usize,
    pub yes: u64,
    pub no: u64,
}

/// Raw similarity judgments; the JSON form is a bare list of [`Judgment`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityJudgments {
    pub entries: Vec<Judgment>,
}

impl SimilarityJudgments {
    pub fn categories(&self) -> usize {
        self.entries.iter().map(|j| j.a.max(j.b) + 1).max().unwrap_or(0)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Row-major K×M matrix with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", &[rows, cols], &[data.len()]));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// CSV with a `# K=<rows> M=<cols>` header line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# K={} M={}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Data("empty matrix csv".into()))?;
        let bad_header = || Error::Data(format!("bad matrix header {header:?}, want '# K=<k> M=<m>'"));
        let rest = header.trim().strip_prefix('#').ok_or_else(bad_header)?;
        let mut dims = BTreeMap::new();
        for tok in rest.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(bad_header)?;
            dims.insert(k, v.parse::<usize>().map_err(|_| bad_header())?);
        }
        let (rows, cols) = match (dims.get("K"), dims.get("M")) {
            (Some(&k), Some(&m)) => (k, m),
            _ => return Err(bad_header()),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("matrix row {i}: {e}")))?;
            if vals.len() != cols {
                return Err(Error::Data(format!("matrix row {i} has {} values, want {cols}", vals.len())));
            }
            data.extend(vals);
        }
        if data.len() != rows * cols {
            return Err(Error::Data(format!("matrix has {} rows, header says {rows}", data.len() / cols.max(1))));
        }
        Matrix::new(rows, cols, data).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Symmetric K×K dissimilarities in [0,1] with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualDistanceMatrix(Matrix);

impl PerceptualDistanceMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        let k = m.rows();
        if m.cols() != k {
            return Err(Error::Data(format!("distance matrix must be square, got {k}x{}", m.cols())));
        }
        for i in 0..k {
            if m.get(i, i) != 0.0 {
                return Err(Error::Data(format!("distance matrix diagonal entry {i} is not 0")));
            }
            for j in 0..k {
                let v = m.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!("distance ({i},{j}) = {v} outside [0,1]")));
                }
                if v != m.get(j, i) {
                    return Err(Error::Data(format!("distance matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(PerceptualDistanceMatrix(m))
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Distances produced by rows of `a` under the √M-normalized Euclidean metric.
    pub fn from_embedding(a: &CategoryAttributeMatrix) -> Result<Self> {
        let k = a.k();
        let mut d = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let v = embedding_distance(a.row(i), a.row(j)).min(1.0);
                d[i * k + j] = v;
                d[j * k + i] = v;
            }
        }
        Self::new(Matrix::new(k, k, d)?)
    }

    /// Drops category `k` (row and column).
    pub fn without(&self, k: usize) -> Result<Self> {
        let n = self.k();
        if k >= n || n < 3 {
            return Err(Error::Invalid(format!("cannot remove category {k} of {n}")));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| i != k).collect();
        let data = keep.iter().flat_map(|&i| keep.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        Self::new(Matrix::new(n - 1, n - 1, data)?)
    }
}

/// `‖x − y‖₂ / √M`.
pub fn embedding_distance(x: &[f64], y: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    (s / x.len() as f64).sqrt()
}

/// K×M target attribute probabilities, one row per category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryAttributeMatrix(Matrix);

impl CategoryAttributeMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if let Some(v) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("category-attribute entry {v} outside [0,1]")));
        }
        Ok(CategoryAttributeMatrix(m))
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn m(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.0.row(k)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Drops row `k`, keeping the attribute count.
    pub fn without_row(&self, k: usize) -> Result<Self> {
        if k >= self.k() || self.k() < 3 {
            return Err(Error::Invalid(format!("cannot remove row {k} of {}", self.k())));
        }
        let data = (0..self.k()).filter(|&r| r != k).flat_map(|r| self.row(r).to_vec()).collect();
        Self::new(Matrix::new(self.k() - 1, self.m(), data)?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(Matrix::from_csv(&text)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.0.to_csv()).map_err(|e| Error::io(path, e))
    }
}

impl PerceptualDistanceMatrix {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(Matrix::from_csv(&text)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.0.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Pools (k,l) and (l,k) answers and takes the fraction of "no" as distance.
pub fn build_distance_matrix(j: &SimilarityJudgments) -> Result<PerceptualDistanceMatrix> {
    let k = j.categories();
    if k < 2 {
        return Err(Error::Data("judgments cover fewer than 2 categories".into()));
    }
    let mut yes = vec![0u64; k * k];
    let mut no = vec![0u64; k * k];
    for e in &j.entries {
        let (a, b) = (e.a.min(e.b), e.a.max(e.b));
        yes[a * k + b] += e.yes;
        no[a * k + b] += e.no;
    }
    let missing: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
        .filter(|&(a, b)| yes[a * k + b] + no[a * k + b] == 0)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("no judgments for category pairs {missing:?}")));
    }
    let mut d = vec![0.0; k * k];
    for a in 0..k {
        for b in a + 1..k {
            let (y, n) = (yes[a * k + b], no[a * k + b]);
            let v = n as f64 / (y + n) as f64;
            d[a * k + b] = v;
            d[b * k + a] = v;
        }
    }
    PerceptualDistanceMatrix::new(Matrix::new(k, k, d)?)
}
