//! Areal units, their neighborhood graph and the ICAR precision structure.
//!
//! Files use 1-based subregion indices; everything in memory is 0-based.
//! Row `i` of a data file is subregion `i` of the adjacency file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use faer::Mat;

use crate::error::{Error, Result};
use crate::smallmat;

/// One undirected edge, stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted graph of subregions. Always connected once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    n: usize,
    edges: Vec<Edge>,
}

impl NeighborhoodGraph {
    /// Validates and builds a graph from 0-based `(i, j, weight)` triples.
    ///
    /// Repeated undirected edges must carry the same weight.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no vertices".into()));
        }
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({}, {}) out of range for {n} vertices",
                    i + 1,
                    j + 1
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {}", i + 1)));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidGraph(format!(
                    "edge ({}, {}) has invalid weight {w}",
                    i + 1,
                    j + 1
                )));
            }
            let key = (i.min(j), i.max(j));
            match merged.get(&key) {
                Some(&prev) if prev != w => {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({}, {}) listed with conflicting weights {prev} and {w}",
                        key.0 + 1,
                        key.1 + 1
                    )));
                }
                Some(_) => {}
                None => {
                    merged.insert(key, w);
                }
            }
        }
        let edges: Vec<Edge> = merged
            .into_iter()
            .map(|((i, j), weight)| Edge { i, j, weight })
            .collect();
        let components = count_components(n, &edges);
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(Self { n, edges })
    }

    /// Path graph 1 - 2 - ... - n with unit weights.
    pub fn chain(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i, 1.0)))
    }

    /// Rook-adjacency lattice with `rows * cols` cells, unit weights.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        Self::lattice(rows * cols, cols)
    }

    /// Near-square rook lattice holding exactly `n` cells filled row by row;
    /// the last row may be partial.
    pub fn grid_with_size(n: usize) -> Result<Self> {
        let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
        Self::lattice(n, cols)
    }

    fn lattice(n: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::with_capacity(2 * n);
        for v in 0..n {
            let (r, c) = (v / cols, v % cols);
            if c + 1 < cols && v + 1 < n {
                edges.push((v, v + 1, 1.0));
            }
            if r > 0 {
                edges.push((v - cols, v, 1.0));
            }
        }
        Self::new(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Writes the graph in the 1-based edge-list format.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&format!("{} {} {}\n", e.i + 1, e.j + 1, e.weight));
        }
        out
    }
}

/// True iff the positive-weight edges join all `n` vertices into one component.
pub fn check_connected(n: usize, edges: &[Edge]) -> bool {
    count_components(n, edges) == 1
}

fn count_components(n: usize, edges: &[Edge]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for e in edges.iter().filter(|e| e.weight > 0.0) {
        let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    components
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyFormat {
    /// `i j [w]` per line, 1-based, `#` comments.
    EdgeList,
    /// Dense `n x n` similarity matrix as CSV.
    MatrixCsv,
}

impl AdjacencyFormat {
    /// `.csv` files are read as matrices, anything else as edge lists.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => AdjacencyFormat::MatrixCsv,
            _ => AdjacencyFormat::EdgeList,
        }
    }
}

pub fn load_adjacency(path: &Path, format: AdjacencyFormat) -> Result<NeighborhoodGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let label = path.display().to_string();
    match format {
        AdjacencyFormat::EdgeList => parse_edge_list(&text, &label),
        AdjacencyFormat::MatrixCsv => parse_matrix_csv(&text, &label),
    }
}

pub fn parse_edge_list(text: &str, label: &str) -> Result<NeighborhoodGraph> {
    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        path: label.to_string(),
        line,
        column,
        message,
    };
    let mut edges = Vec::new();
    let mut n = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = Vec::new();
        let mut col = 0usize;
        for tok in raw.split_whitespace() {
            let offset = raw[col..].find(tok).map(|o| col + o).unwrap_or(col);
            fields.push((offset + 1, tok));
            col = offset + tok.len();
        }
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(
                line,
                1,
                format!("expected `i j [w]`, found {} fields", fields.len()),
            ));
        }
        let index = |k: usize| -> Result<usize> {
            let (c, tok) = fields[k];
            let v: usize = tok
                .parse()
                .map_err(|_| parse_err(line, c, format!("`{tok}` is not a vertex index")))?;
            if v == 0 {
                return Err(parse_err(line, c, "vertex indices are 1-based".into()));
            }
            Ok(v - 1)
        };
        let i = index(0)?;
        let j = index(1)?;
        let w = match fields.get(2) {
            Some(&(c, tok)) => tok
                .parse::<f64>()
                .map_err(|_| parse_err(line, c, format!("`{tok}` is not a number")))?,
            None => 1.0,
        };
        n = n.max(i + 1).max(j + 1);
        edges.push((i, j, w));
    }
    NeighborhoodGraph::new(n, edges)
}

pub fn parse_matrix_csv(text: &str, label: &str) -> Result<NeighborhoodGraph> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: label.to_string(),
            line: r + 1,
            column: 1,
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(record.len());
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: label.to_string(),
                line: r + 1,
                column: c + 1,
                message: format!("`{field}` is not a number"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    let n = rows.len();
    if let Some((r, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != n) {
        return Err(Error::Parse {
            path: label.to_string(),
            line: r + 1,
            column: row.len(),
            message: format!("expected {n} columns for a square matrix, found {}", row.len()),
        });
    }
    let mut edges = Vec::new();
    for i in 0..n {
        if rows[i][i] != 0.0 {
            return Err(Error::InvalidGraph(format!(
                "diagonal entry {} is {}, must be zero",
                i + 1,
                rows[i][i]
            )));
        }
        for j in (i + 1)..n {
            let (a, b) = (rows[i][j], rows[j][i]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                return Err(Error::InvalidGraph(format!(
                    "matrix is asymmetric at ({}, {}): {a} vs {b}",
                    i + 1,
                    j + 1
                )));
            }
            let w = 0.5 * (a + b);
            if w < 0.0 {
                return Err(Error::InvalidGraph(format!(
                    "negative similarity {w} at ({}, {})",
                    i + 1,
                    j + 1
                )));
            }
            if w > 0.0 {
                edges.push((i, j, w));
            }
        }
    }
    NeighborhoodGraph::new(n, edges)
}

/// The ICAR structure matrix `H`: `-g_ij` off the diagonal, row sums zero.
#[derive(Debug, Clone)]
pub struct PrecisionStructure {
    matrix: Mat<f64>,
}

impl PrecisionStructure {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.matrix
    }

    /// Builds `H` from an explicit symmetric matrix (used by tests and the
    /// eigen cache); the caller is responsible for the ICAR structure.
    pub fn from_matrix(matrix: Mat<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Dimension("H must be square".into()));
        }
        Ok(Self { matrix })
    }

    /// Little-endian bytes of `H` in column-major order, the input to the
    /// eigen-cache content hash.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n * 8);
        for j in 0..n {
            for i in 0..n {
                out.extend_from_slice(&self.matrix[(i, j)].to_le_bytes());
            }
        }
        out
    }
}

pub fn build_precision(graph: &NeighborhoodGraph) -> PrecisionStructure {
    let n = graph.n();
    let mut h = Mat::<f64>::zeros(n, n);
    for e in graph.edges() {
        h[(e.i, e.j)] = -e.weight;
        h[(e.j, e.i)] = -e.weight;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| h[(i, j)]).sum();
        h[(i, i)] = -off;
    }
    PrecisionStructure { matrix: h }
}

/// Response and design for the full candidate model.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    /// `n x p`, column 0 is the intercept.
    x: Mat<f64>,
    names: Vec<String>,
}

impl Dataset {
    /// Prepends the intercept to `regressors` (one vector per column) and
    /// validates the design.
    pub fn new(y: Vec<f64>, regressors: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        let k = regressors.len();
        if names.len() != k {
            return Err(Error::Dimension(format!(
                "{k} regressor columns but {} names",
                names.len()
            )));
        }
        if let Some((j, col)) = regressors.iter().enumerate().find(|(_, c)| c.len() != n) {
            return Err(Error::Dimension(format!(
                "regressor `{}` has {} rows, response has {n}",
                names[j],
                col.len()
            )));
        }
        let p = k + 1;
        if n <= p {
            return Err(Error::InvalidData(format!(
                "need more observations than design columns (n = {n}, p = {p})"
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("response has non-finite values".into()));
        }
        for (col, name) in regressors.iter().zip(&names) {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("regressor `{name}` has non-finite values")));
            }
        }
        let x = Mat::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { regressors[j - 1][i] });
        check_full_rank(&x, &names)?;
        Ok(Self { y, x, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of candidate regressors (excluding the intercept).
    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &Mat<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Columns of the full design picked by index (0 is the intercept).
    pub fn design_columns(&self, columns: &[usize]) -> Mat<f64> {
        Mat::from_fn(self.n(), columns.len(), |i, j| self.x[(i, columns[j])])
    }

    /// Writes `intercept,<names...>,<response>` CSV.
    pub fn to_csv(&self, response: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["intercept".to_string()];
        header.extend(self.names.iter().cloned());
        header.push(response.to_string());
        w.write_record(&header)
            .map_err(|e| Error::InvalidData(e.to_string()))?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = (0..self.x.ncols()).map(|j| self.x[(i, j)].to_string()).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(|e| Error::InvalidData(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn check_full_rank(x: &Mat<f64>, names: &[String]) -> Result<()> {
    let (n, p) = (x.nrows(), x.ncols());
    let norms: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| x[(i, j)] * x[(i, j)]).sum::<f64>().sqrt())
        .collect();
    if let Some(j) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::RankDeficient(format!("regressor `{}` is identically zero", names[j - 1])));
    }
    // Cholesky of the correlation-scaled Gram matrix; a collapsing pivot
    // flags a (near) linear dependence.
    let mut gram = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..=a {
            let s: f64 = (0..n).map(|i| x[(i, a)] * x[(i, b)]).sum::<f64>() / (norms[a] * norms[b]);
            gram[a * p + b] = s;
            gram[b * p + a] = s;
        }
    }
    match smallmat::Cholesky::new_with_tol(&gram, p, 1e-10) {
        Some(_) => Ok(()),
        None => Err(Error::RankDeficient(
            "design columns are linearly dependent (including the intercept)".into(),
        )),
    }
}

/// Which data columns enter the design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegressorSelection {
    /// Every column except the response and a column named `intercept`.
    All,
    Named(Vec<String>),
}

impl RegressorSelection {
    /// Parses `all` or a comma-separated list; an empty string selects nothing.
    pub fn parse(spec: &str) -> Self {
        if spec.trim().eq_ignore_ascii_case("all") {
            RegressorSelection::All
        } else {
            RegressorSelection::Named(
                spec.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect(),
            )
        }
    }
}

pub fn load_dataset(path: &Path, response: &str, regressors: &RegressorSelection) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string(), response, regressors)
}

pub fn parse_dataset(
    text: &str,
    label: &str,
    response: &str,
    regressors: &RegressorSelection,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: label.to_string(),
            line: 1,
            column: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let column_of = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidData(format!("column `{name}` not found in {label}")))
    };
    let y_col = column_of(response)?;
    let names: Vec<String> = match regressors {
        RegressorSelection::All => header
            .iter()
            .filter(|h| h.as_str() != response && !h.eq_ignore_ascii_case("intercept"))
            .cloned()
            .collect(),
        RegressorSelection::Named(list) => list.clone(),
    };
    let mut seen = std::collections::HashSet::new();
    for name in &names {
        if name == response {
            return Err(Error::InvalidData(format!("`{name}` is the response")));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::RankDeficient(format!("regressor `{name}` listed twice")));
        }
    }
    let x_cols: Vec<usize> = names.iter().map(|n| column_of(n)).collect::<Result<_>>()?;

    let mut y = Vec::new();
    let mut regs: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse {
            path: label.to_string(),
            line,
            column: 1,
            message: e.to_string(),
        })?;
        let cell = |c: usize| -> Result<f64> {
            let field = record.get(c).unwrap_or("");
            field.parse::<f64>().map_err(|_| Error::Parse {
                path: label.to_string(),
                line,
                column: c + 1,
                message: format!("`{field}` in column `{}` is not numeric", header[c]),
            })
        };
        y.push(cell(y_col)?);
        for (dst, &c) in regs.iter_mut().zip(&x_cols) {
            dst.push(cell(c)?);
        }
    }
    Dataset::new(y, regs, names)
}
