//! Network data model, covariate coding and file I/O.
//!
//! A [`Network`] holds a symmetric binary adjacency matrix without
//! self-loops together with a symmetric edge-covariate tensor. Covariates
//! can be supplied directly per edge or coded from per-node descriptors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::GofError;

/// Symmetric n x n x d covariate tensor, stored row-major per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTensor {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl CovariateTensor {
    pub fn zeros(n: usize, d: usize) -> Self {
        CovariateTensor {
            n,
            d,
            data: vec![0.0; n * n * d],
        }
    }

    pub fn empty(n: usize) -> Self {
        Self::zeros(n, 0)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.n + j) * self.d;
        &self.data[base..base + self.d]
    }

    /// Writes the same value vector for (i, j) and (j, i).
    pub fn set_symmetric(&mut self, i: usize, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.d);
        let base = (i * self.n + j) * self.d;
        self.data[base..base + self.d].copy_from_slice(values);
        let base = (j * self.n + i) * self.d;
        self.data[base..base + self.d].copy_from_slice(values);
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }

    /// Centers and scales each covariate column to unit variance over the
    /// unordered pairs i < j. Constant columns are left centered only.
    pub fn standardize(&mut self) {
        if self.d == 0 || self.n < 2 {
            return;
        }
        let m = (self.n * (self.n - 1) / 2) as f64;
        for c in 0..self.d {
            let mut mean = 0.0;
            for i in 0..self.n {
                for j in (i + 1)..self.n {
                    mean += self.get(i, j)[c];
                }
            }
            mean /= m;
            let mut var = 0.0;
            for i in 0..self.n {
                for j in (i + 1)..self.n {
                    let v = self.get(i, j)[c] - mean;
                    var += v * v;
                }
            }
            var /= m;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.n {
                for j in 0..self.n {
                    if i != j {
                        let base = (i * self.n + j) * self.d;
                        self.data[base + c] = (self.data[base + c] - mean) / scale;
                    }
                }
            }
        }
    }
}

/// Undirected binary network with edge covariates.
///
/// The diagonal of the adjacency matrix is never read; self-loops are
/// discarded on construction.
#[derive(Debug, Clone)]
pub struct Network {
    n: usize,
    adjacency: DMatrix<f64>,
    covariates: CovariateTensor,
    node_names: Vec<String>,
}

impl Network {
    pub fn new(adjacency: DMatrix<f64>, covariates: CovariateTensor) -> Result<Self, GofError> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(GofError::InvalidNetwork(format!(
                "adjacency must be square, got {}x{}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        if covariates.n != n {
            return Err(GofError::InvalidNetwork(format!(
                "covariate tensor is for {} nodes, adjacency has {}",
                covariates.n, n
            )));
        }
        let mut adjacency = adjacency;
        for i in 0..n {
            adjacency[(i, i)] = 0.0;
            for j in (i + 1)..n {
                let y = adjacency[(i, j)];
                if y != adjacency[(j, i)] {
                    return Err(GofError::InvalidNetwork(format!(
                        "adjacency not symmetric at ({i}, {j})"
                    )));
                }
                if y != 0.0 && y != 1.0 {
                    return Err(GofError::InvalidNetwork(format!(
                        "adjacency entries must be 0 or 1, got {y} at ({i}, {j})"
                    )));
                }
            }
        }
        if !covariates.is_symmetric() {
            return Err(GofError::InvalidNetwork(
                "edge covariates are not symmetric in (i, j)".into(),
            ));
        }
        let node_names = (1..=n).map(|i| i.to_string()).collect();
        Ok(Network {
            n,
            adjacency,
            covariates,
            node_names,
        })
    }

    pub fn with_node_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.n);
        self.node_names = names;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.covariates.d
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn y(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn covariates(&self) -> &CovariateTensor {
        &self.covariates
    }

    pub fn covariate(&self, i: usize, j: usize) -> &[f64] {
        self.covariates.get(i, j)
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    /// Edge density over unordered pairs.
    pub fn density(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mut edges = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                edges += self.adjacency[(i, j)];
            }
        }
        edges / (self.n * (self.n - 1) / 2) as f64
    }

    /// Replaces the covariate tensor, e.g. to refit with d = 0.
    pub fn with_covariates(&self, covariates: CovariateTensor) -> Result<Self, GofError> {
        Network::new(self.adjacency.clone(), covariates)
            .map(|net| net.with_node_names(self.node_names.clone()))
    }
}

/// Kind of a node descriptor column.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    Quantitative,
    /// Values in {1, ..., levels}.
    Ordinal { levels: usize },
    /// Values from the declared level set.
    Qualitative { levels: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct DescriptorColumn {
    pub name: String,
    pub kind: ColumnKind,
    /// One entry per node; `None` marks a missing value.
    pub values: Vec<Option<String>>,
}

/// Per-node descriptor table used to code edge covariates.
#[derive(Debug, Clone)]
pub struct NodeDescriptorTable {
    n: usize,
    columns: Vec<DescriptorColumn>,
}

impl NodeDescriptorTable {
    pub fn new(n: usize, columns: Vec<DescriptorColumn>) -> Result<Self, GofError> {
        for col in &columns {
            if col.values.len() != n {
                return Err(GofError::Covariates(format!(
                    "column '{}' has {} values, expected {n}",
                    col.name,
                    col.values.len()
                )));
            }
        }
        Ok(NodeDescriptorTable { n, columns })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn columns(&self) -> &[DescriptorColumn] {
        &self.columns
    }

    /// Reads a CSV whose header cells are `name:kind[:levels]` with kind one
    /// of `quant`, `ord`, `qual`. Ordinal columns declare the level count
    /// (`grade:ord:6`); qualitative columns may declare their level set
    /// (`party:qual:left|right`) or have it inferred from the data.
    pub fn from_csv(path: &Path) -> Result<Self, GofError> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| GofError::Parse {
                path: display.clone(),
                line: 1,
                message: e.to_string(),
            })?;

        let headers = reader
            .headers()
            .map_err(|e| GofError::Parse {
                path: display.clone(),
                line: 1,
                message: e.to_string(),
            })?
            .clone();

        let mut specs = Vec::new();
        for h in headers.iter() {
            let parts: Vec<&str> = h.split(':').collect();
            if parts.len() < 2 {
                return Err(GofError::Parse {
                    path: display.clone(),
                    line: 1,
                    message: format!("header cell '{h}' must be name:kind[:levels]"),
                });
            }
            let name = parts[0].to_string();
            let kind = match parts[1] {
                "quant" | "quantitative" => ColumnKind::Quantitative,
                "ord" | "ordinal" => {
                    let levels = parts.get(2).and_then(|s| s.parse::<usize>().ok()).ok_or(
                        GofError::Parse {
                            path: display.clone(),
                            line: 1,
                            message: format!("ordinal column '{name}' needs a level count"),
                        },
                    )?;
                    ColumnKind::Ordinal { levels }
                }
                "qual" | "qualitative" => {
                    let levels = parts
                        .get(2)
                        .map(|s| s.split('|').map(str::to_string).collect())
                        .unwrap_or_default();
                    ColumnKind::Qualitative { levels }
                }
                other => {
                    return Err(GofError::Parse {
                        path: display.clone(),
                        line: 1,
                        message: format!("unknown column kind '{other}' in '{h}'"),
                    })
                }
            };
            specs.push((name, kind));
        }

        let mut values: Vec<Vec<Option<String>>> = vec![Vec::new(); specs.len()];
        for (row_idx, record) in reader.records().enumerate() {
            let record = record.map_err(|e| GofError::Parse {
                path: display.clone(),
                line: row_idx + 2,
                message: e.to_string(),
            })?;
            if record.len() != specs.len() {
                return Err(GofError::Parse {
                    path: display.clone(),
                    line: row_idx + 2,
                    message: format!("expected {} cells, got {}", specs.len(), record.len()),
                });
            }
            for (c, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                if cell.is_empty() || cell == "NA" {
                    values[c].push(None);
                } else {
                    values[c].push(Some(cell.to_string()));
                }
            }
        }

        let n = values.first().map(|v| v.len()).unwrap_or(0);
        let mut columns = Vec::new();
        for ((name, mut kind), vals) in specs.into_iter().zip(values) {
            // Infer qualitative levels from the data when not declared.
            if let ColumnKind::Qualitative { levels } = &mut kind {
                if levels.is_empty() {
                    let mut seen: Vec<String> =
                        vals.iter().flatten().cloned().collect::<Vec<_>>();
                    seen.sort();
                    seen.dedup();
                    *levels = seen;
                }
            }
            columns.push(DescriptorColumn {
                name,
                kind,
                values: vals,
            });
        }
        NodeDescriptorTable::new(n, columns)
    }
}

/// Options controlling `code_covariates` and network reading.
#[derive(Debug, Clone, Copy, Default)]
pub struct CodingOptions {
    /// Column-mean imputation for missing quantitative node descriptors.
    /// Missing values in other column kinds are always an error.
    pub impute_mean: bool,
    /// Standardize the coded tensor to zero mean and unit variance per
    /// column over pairs.
    pub standardize: bool,
}

/// Codes edge covariates from node descriptors and optional raw edge
/// descriptors.
///
/// Column order in the output: raw edge descriptors first, then for each
/// node column its coding: quantitative -> |x_i - x_j|; ordinal with L
/// levels -> L - 1 indicators for |x_i - x_j| = 1..L-1; qualitative with L
/// levels -> per level, a both-have-it indicator and an exactly-one
/// indicator.
pub fn code_covariates(
    nodes: &NodeDescriptorTable,
    edges: Option<&CovariateTensor>,
    options: CodingOptions,
) -> Result<CovariateTensor, GofError> {
    let n = nodes.n;
    if let Some(tensor) = edges {
        if tensor.n != n {
            return Err(GofError::Covariates(format!(
                "edge tensor is for {} nodes, node table has {n}",
                tensor.n
            )));
        }
        if !tensor.is_symmetric() {
            return Err(GofError::Covariates(
                "edge descriptor tensor is not symmetric".into(),
            ));
        }
    }

    // Parse node columns into typed values.
    enum Parsed {
        Quant(Vec<f64>),
        Ord { levels: usize, values: Vec<usize> },
        Qual { levels: usize, values: Vec<usize> },
    }

    let mut parsed = Vec::new();
    for col in &nodes.columns {
        match &col.kind {
            ColumnKind::Quantitative => {
                let mut vals = Vec::with_capacity(n);
                let mut missing = Vec::new();
                for (i, v) in col.values.iter().enumerate() {
                    match v {
                        Some(s) => {
                            let x = s.parse::<f64>().map_err(|_| {
                                GofError::Covariates(format!(
                                    "column '{}' row {}: '{}' is not a number",
                                    col.name,
                                    i + 1,
                                    s
                                ))
                            })?;
                            vals.push(x);
                        }
                        None => {
                            missing.push(i);
                            vals.push(f64::NAN);
                        }
                    }
                }
                if !missing.is_empty() {
                    if !options.impute_mean {
                        return Err(GofError::Covariates(format!(
                            "column '{}' has {} missing value(s); rerun with --impute-mean \
                             or complete the data",
                            col.name,
                            missing.len()
                        )));
                    }
                    let observed: Vec<f64> =
                        vals.iter().cloned().filter(|x| x.is_finite()).collect();
                    if observed.is_empty() {
                        return Err(GofError::Covariates(format!(
                            "column '{}' is entirely missing",
                            col.name
                        )));
                    }
                    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                    for &i in &missing {
                        vals[i] = mean;
                    }
                }
                parsed.push(Parsed::Quant(vals));
            }
            ColumnKind::Ordinal { levels } => {
                let mut vals = Vec::with_capacity(n);
                for (i, v) in col.values.iter().enumerate() {
                    let s = v.as_ref().ok_or_else(|| {
                        GofError::Covariates(format!(
                            "column '{}' row {}: missing ordinal value",
                            col.name,
                            i + 1
                        ))
                    })?;
                    let x = s.parse::<usize>().ok().filter(|x| (1..=*levels).contains(x));
                    match x {
                        Some(x) => vals.push(x),
                        None => {
                            return Err(GofError::Covariates(format!(
                                "column '{}' row {}: '{}' outside ordinal range 1..={}",
                                col.name,
                                i + 1,
                                s,
                                levels
                            )))
                        }
                    }
                }
                parsed.push(Parsed::Ord {
                    levels: *levels,
                    values: vals,
                });
            }
            ColumnKind::Qualitative { levels } => {
                let mut vals = Vec::with_capacity(n);
                for (i, v) in col.values.iter().enumerate() {
                    let s = v.as_ref().ok_or_else(|| {
                        GofError::Covariates(format!(
                            "column '{}' row {}: missing qualitative value",
                            col.name,
                            i + 1
                        ))
                    })?;
                    let idx = levels.iter().position(|l| l == s).ok_or_else(|| {
                        GofError::Covariates(format!(
                            "column '{}' row {}: level '{}' not in declared set {:?}",
                            col.name,
                            i + 1,
                            s,
                            levels
                        ))
                    })?;
                    vals.push(idx);
                }
                parsed.push(Parsed::Qual {
                    levels: levels.len(),
                    values: vals,
                });
            }
        }
    }

    let d_edges = edges.map(|t| t.d).unwrap_or(0);
    let d_coded: usize = parsed
        .iter()
        .map(|p| match p {
            Parsed::Quant(_) => 1,
            Parsed::Ord { levels, .. } => levels - 1,
            Parsed::Qual { levels, .. } => 2 * levels,
        })
        .sum();

    let mut out = CovariateTensor::zeros(n, d_edges + d_coded);
    let mut row = vec![0.0; d_edges + d_coded];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut c = 0;
            if let Some(tensor) = edges {
                row[..d_edges].copy_from_slice(tensor.get(i, j));
                c = d_edges;
            }
            for p in &parsed {
                match p {
                    Parsed::Quant(vals) => {
                        row[c] = (vals[i] - vals[j]).abs();
                        c += 1;
                    }
                    Parsed::Ord { levels, values } => {
                        let diff = values[i].abs_diff(values[j]);
                        for level in 1..*levels {
                            row[c] = if diff == level { 1.0 } else { 0.0 };
                            c += 1;
                        }
                    }
                    Parsed::Qual { levels, values } => {
                        for level in 0..*levels {
                            let hi = values[i] == level;
                            let hj = values[j] == level;
                            row[c] = if hi && hj { 1.0 } else { 0.0 };
                            row[c + 1] = if hi ^ hj { 1.0 } else { 0.0 };
                            c += 2;
                        }
                    }
                }
            }
            out.set_symmetric(i, j, &row);
        }
    }

    if options.standardize {
        out.standardize();
    }
    Ok(out)
}

/// Where edge covariates come from when reading a network.
#[derive(Debug, Clone, Default)]
pub enum CovariateSource {
    #[default]
    None,
    /// CSV rows (i, j, v1, ..., vd).
    EdgeCsv(std::path::PathBuf),
    /// Node descriptor CSV; `code_covariates` is applied.
    NodeTable(std::path::PathBuf),
}

fn read_lines(path: &Path) -> Result<Vec<String>, GofError> {
    let text =
        fs::read_to_string(path).map_err(|e| GofError::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads a whitespace-separated `i j` edge list. Self-loop rows are dropped
/// with a warning. Returns node names in first-appearance order and the
/// edges as index pairs.
pub fn read_edge_list(path: &Path) -> Result<(Vec<String>, Vec<(usize, usize)>), GofError> {
    let display = path.display().to_string();
    let mut names = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut edges = Vec::new();
    for (line_no, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (a, b) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(GofError::Parse {
                    path: display,
                    line: line_no + 1,
                    message: format!("expected 'i j', got '{line}'"),
                })
            }
        };
        if a == b {
            log::warn!("{display}:{}: self-loop '{a} {b}' dropped", line_no + 1);
            // still register the node
            let next = names.len();
            index.entry(a.to_string()).or_insert_with(|| {
                names.push(a.to_string());
                next
            });
            continue;
        }
        let mut id_of = |s: &str| -> usize {
            if let Some(&i) = index.get(s) {
                i
            } else {
                let i = names.len();
                names.push(s.to_string());
                index.insert(s.to_string(), i);
                i
            }
        };
        let ia = id_of(a);
        let ib = id_of(b);
        edges.push((ia, ib));
    }
    Ok((names, edges))
}

/// Reads a network from an edge list plus an optional covariate source.
///
/// When a node table is given, its row count fixes n and edge-list
/// identifiers must be 1-based row numbers. Without one, identifiers are
/// arbitrary tokens mapped to dense indices in first-appearance order.
pub fn read_network(
    edge_list_path: &Path,
    covariates: &CovariateSource,
    options: CodingOptions,
) -> Result<Network, GofError> {
    let (names, edges) = read_edge_list(edge_list_path)?;

    match covariates {
        CovariateSource::None => {
            let n = names.len();
            let adjacency = adjacency_from_edges(n, &edges);
            let net = Network::new(adjacency, CovariateTensor::empty(n))?;
            Ok(net.with_node_names(names))
        }
        CovariateSource::NodeTable(table_path) => {
            let table = NodeDescriptorTable::from_csv(table_path)?;
            let n = table.n();
            let resolve = numeric_ids(edge_list_path, &names, n)?;
            let edges: Vec<(usize, usize)> =
                edges.iter().map(|&(a, b)| (resolve[a], resolve[b])).collect();
            let adjacency = adjacency_from_edges(n, &edges);
            let tensor = code_covariates(&table, None, options)?;
            let net = Network::new(adjacency, tensor)?;
            Ok(net.with_node_names((1..=n).map(|i| i.to_string()).collect()))
        }
        CovariateSource::EdgeCsv(cov_path) => {
            let n = names.len();
            let mut index: HashMap<&str, usize> = HashMap::new();
            for (i, name) in names.iter().enumerate() {
                index.insert(name.as_str(), i);
            }
            let tensor = read_edge_covariates(cov_path, &index, n)?;
            let mut tensor = tensor;
            if options.standardize {
                tensor.standardize();
            }
            let adjacency = adjacency_from_edges(n, &edges);
            let net = Network::new(adjacency, tensor)?;
            Ok(net.with_node_names(names))
        }
    }
}

fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut adjacency = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        adjacency[(i, j)] = 1.0;
        adjacency[(j, i)] = 1.0;
    }
    adjacency
}

/// Maps first-appearance names to 1-based numeric identifiers in 0..n.
fn numeric_ids(path: &Path, names: &[String], n: usize) -> Result<Vec<usize>, GofError> {
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let id = name.parse::<usize>().ok().filter(|&i| i >= 1 && i <= n);
        match id {
            Some(i) => out.push(i - 1),
            None => {
                return Err(GofError::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    message: format!(
                        "node id '{name}' is not in 1..={n} (node table declares {n} nodes)"
                    ),
                })
            }
        }
    }
    Ok(out)
}

fn read_edge_covariates(
    path: &Path,
    index: &HashMap<&str, usize>,
    n: usize,
) -> Result<CovariateTensor, GofError> {
    let display = path.display().to_string();
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut d = None;
    for (line_no, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() < 3 {
            return Err(GofError::Parse {
                path: display,
                line: line_no + 1,
                message: "expected i, j, v1, ..., vd".into(),
            });
        }
        let lookup = |s: &str| -> Result<usize, GofError> {
            index
                .get(s)
                .copied()
                .or_else(|| s.parse::<usize>().ok().filter(|&i| i >= 1 && i <= n).map(|i| i - 1))
                .ok_or_else(|| GofError::Parse {
                    path: display.clone(),
                    line: line_no + 1,
                    message: format!("unknown node '{s}'"),
                })
        };
        let i = lookup(cells[0])?;
        let j = lookup(cells[1])?;
        let mut vals = Vec::with_capacity(cells.len() - 2);
        for c in &cells[2..] {
            vals.push(c.parse::<f64>().map_err(|_| GofError::Parse {
                path: display.clone(),
                line: line_no + 1,
                message: format!("'{c}' is not a number"),
            })?);
        }
        if let Some(d) = d {
            if vals.len() != d {
                return Err(GofError::Parse {
                    path: display,
                    line: line_no + 1,
                    message: format!("expected {d} covariates, got {}", vals.len()),
                });
            }
        } else {
            d = Some(vals.len());
        }
        rows.push((i, j, vals));
    }

    let d = d.unwrap_or(0);
    let mut tensor = CovariateTensor::zeros(n, d);
    let mut seen: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for (i, j, vals) in rows {
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if let Some(prev) = seen.get(&key) {
            if prev != &vals {
                return Err(GofError::InvalidNetwork(format!(
                    "asymmetric edge covariates for pair ({}, {})",
                    key.0 + 1,
                    key.1 + 1
                )));
            }
        } else {
            tensor.set_symmetric(i, j, &vals);
            seen.insert(key, vals);
        }
    }
    Ok(tensor)
}
