//! CSV rendering of results. Numbers are written with 17 significant digits
//! so that files round-trip exactly and are byte-stable across platforms.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grids::{EGrid, GridFunction};
use crate::splitting::{l1_distance, linf_distance, RateReport, SchemeResult};

/// `x` with 17 significant digits, e.g. `2.5000000000000000e-1`.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn render(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `e,value` rows, one per grid node.
pub fn solution_csv(result: &SchemeResult) -> Result<Vec<u8>> {
    let nodes = result.grid.nodes();
    render(
        &["e", "value"],
        nodes
            .iter()
            .zip(result.values.values())
            .map(|(e, v)| vec![fmt_num(*e), fmt_num(*v)]),
    )
}

/// `key,value` rows.
pub fn key_value_csv(pairs: &[(String, String)]) -> Result<Vec<u8>> {
    render(&["key", "value"], pairs.iter().map(|(k, v)| vec![k.clone(), v.clone()]))
}

/// A solution table read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionTable {
    pub grid: EGrid,
    pub values: GridFunction,
}

/// Parses an `e,value` table and rebuilds its uniform grid. Nodes that do not
/// lie on a uniform grid are rejected.
pub fn parse_solution_csv(bytes: &[u8]) -> Result<SolutionTable> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["e", "value"] {
        return Err(Error::InvalidParameter(format!("expected header e,value, got {:?}", header)));
    }
    let mut es = Vec::new();
    let mut vs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidParameter(format!("bad number in row {:?}", rec)))
        };
        es.push(parse(0)?);
        vs.push(parse(1)?);
    }
    if es.len() < 3 {
        return Err(Error::InvalidParameter("solution table needs at least 3 rows".into()));
    }
    let grid = EGrid::new(es.len(), es[0], *es.last().unwrap())?;
    let tol = 1e-9 * grid.spacing();
    if es.iter().enumerate().any(|(j, e)| (e - grid.node(j)).abs() > tol) {
        return Err(Error::GridMismatch("solution table nodes are not uniform".into()));
    }
    Ok(SolutionTable {
        grid,
        values: GridFunction(vs),
    })
}

pub fn read_solution_csv(path: &Path) -> Result<SolutionTable> {
    parse_solution_csv(&std::fs::read(path)?)
}

/// Comparison of two solutions on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub table: Vec<u8>,
    pub summary: Vec<u8>,
    pub l1: f64,
    pub linf: f64,
}

/// `e,value_a,value_b,abs_diff` rows and the summary row
/// `l1,linf,runtime_a_s,runtime_b_s`.
pub fn comparison_csv(a: &SolutionTable, b: &SolutionTable, runtime_a: f64, runtime_b: f64) -> Result<Comparison> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.grid, b.grid)));
    }
    let nodes = a.grid.nodes();
    let (va, vb) = (a.values.values(), b.values.values());
    let table = render(
        &["e", "value_a", "value_b", "abs_diff"],
        (0..nodes.len()).map(|j| {
            vec![
                fmt_num(nodes[j]),
                fmt_num(va[j]),
                fmt_num(vb[j]),
                fmt_num((va[j] - vb[j]).abs()),
            ]
        }),
    )?;
    let l1 = l1_distance(&a.grid, va, vb);
    let linf = linf_distance(va, vb);
    let summary = render(
        &["l1", "linf", "runtime_a_s", "runtime_b_s"],
        [vec![fmt_num(l1), fmt_num(linf), fmt_num(runtime_a), fmt_num(runtime_b)]],
    )?;
    Ok(Comparison { table, summary, l1, linf })
}

/// `N,l1` rows followed by `slope,<fitted>`.
pub fn rate_csv(report: &RateReport) -> Result<Vec<u8>> {
    let mut rows: Vec<Vec<String>> = report.points.iter().map(|(n, e)| vec![n.to_string(), fmt_num(*e)]).collect();
    rows.push(vec!["slope".into(), fmt_num(report.slope)]);
    render(&["N", "l1"], rows)
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
