//! Text file formats shared by every module.
//!
//! - Field snapshot: header line `nx ny lx ly`, then `nx * ny` decimal floats,
//!   row-major (x fastest), newline-separated.
//! - Boundary file `bc.txt`: four lines `edge kind value`.
//! - Obstacle file `obstacle.txt`: one line `cx cy r t_obj` per circle.
//! - Metrics CSV: `case_id,mae,linf,residual,iters` plus an aggregate row
//!   (wall times go to a separate timings CSV so metrics stay byte-stable
//!   across reruns).
//! - Trace CSV: `iter,epsilon,millis`.
//!
//! Floats are written with the shortest representation that round-trips, so
//! write-read cycles are bit-exact.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fdm::{BcKind, BoundarySpec, Circle, Edge, EdgeBc, ObstacleSpec};
use crate::grid::{Field, Grid};
use crate::solver::ConvergenceTrace;

// ---------------------------------------------------------------------------
// Field snapshot format
// ---------------------------------------------------------------------------

pub fn field_to_string(field: &Field) -> String {
    let g = field.grid();
    let mut out = String::with_capacity(field.values().len() * 20 + 32);
    let _ = writeln!(out, "{} {} {:?} {:?}", g.nx(), g.ny(), g.lx(), g.ly());
    for v in field.values() {
        let _ = writeln!(out, "{v:?}");
    }
    out
}

pub fn parse_field(text: &str) -> Result<Field> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty field file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!(
            "field header needs 'nx ny lx ly', got '{header}'"
        )));
    }
    let nx: usize = parts[0]
        .parse()
        .map_err(|_| Error::Parse(format!("bad nx '{}'", parts[0])))?;
    let ny: usize = parts[1]
        .parse()
        .map_err(|_| Error::Parse(format!("bad ny '{}'", parts[1])))?;
    let lx: f64 = parts[2]
        .parse()
        .map_err(|_| Error::Parse(format!("bad lx '{}'", parts[2])))?;
    let ly: f64 = parts[3]
        .parse()
        .map_err(|_| Error::Parse(format!("bad ly '{}'", parts[3])))?;
    // bound allocations before reading values (2048^2 cells is far beyond
    // any grid this crate solves)
    if nx.checked_mul(ny).is_none() || nx * ny > 4_194_304 {
        return Err(Error::Parse("field size out of range".into()));
    }
    let grid = Grid::new(nx, ny, lx, ly).map_err(|e| Error::Parse(e.to_string()))?;
    let mut values = Vec::with_capacity(nx * ny);
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::Parse(format!("bad field value '{line}'")))?;
        values.push(v);
    }
    if values.len() != nx * ny {
        return Err(Error::Parse(format!(
            "field has {} values, header declares {}",
            values.len(),
            nx * ny
        )));
    }
    Field::from_values(grid, values).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_field(field: &Field, path: &Path) -> Result<()> {
    std::fs::write(path, field_to_string(field))?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<Field> {
    parse_field(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Boundary and obstacle files
// ---------------------------------------------------------------------------

pub fn bc_to_string(bc: &BoundarySpec) -> Result<String> {
    let mut out = String::new();
    for edge in Edge::ALL {
        let ebc = bc.edge(edge);
        let value = ebc.constant_value().ok_or_else(|| {
            Error::Config("bc files store per-edge constants only".into())
        })?;
        let _ = writeln!(out, "{} {} {:?}", edge.name(), ebc.kind.name(), value);
    }
    Ok(out)
}

pub fn parse_bc(text: &str) -> Result<BoundarySpec> {
    let mut edges: [Option<EdgeBc>; 4] = [None, None, None, None];
    let mut count = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("bc line needs 'edge kind value', got '{line}'")));
        }
        let edge = Edge::parse(parts[0])?;
        let kind = BcKind::parse(parts[1])?;
        let value: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad bc value '{}'", parts[2])))?;
        if !value.is_finite() {
            return Err(Error::Parse("bc value must be finite".into()));
        }
        let slot = match edge {
            Edge::Left => 0,
            Edge::Right => 1,
            Edge::Bottom => 2,
            Edge::Top => 3,
        };
        if edges[slot].is_some() {
            return Err(Error::Parse(format!("duplicate edge '{}'", parts[0])));
        }
        edges[slot] = Some(EdgeBc::constant(kind, value));
        count += 1;
    }
    if count != 4 {
        return Err(Error::Parse(format!("bc file needs 4 edges, got {count}")));
    }
    let mut it = edges.into_iter();
    Ok(BoundarySpec {
        left: it.next().unwrap().unwrap(),
        right: it.next().unwrap().unwrap(),
        bottom: it.next().unwrap().unwrap(),
        top: it.next().unwrap().unwrap(),
    })
}

pub fn obstacle_to_string(obstacle: &ObstacleSpec) -> String {
    let mut out = String::new();
    for c in &obstacle.circles {
        let _ = writeln!(out, "{:?} {:?} {:?} {:?}", c.cx, c.cy, c.r, obstacle.t_obj);
    }
    out
}

pub fn parse_obstacle(text: &str) -> Result<ObstacleSpec> {
    let mut circles = Vec::new();
    let mut t_obj: Option<f64> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!(
                "obstacle line needs 'cx cy r t_obj', got '{line}'"
            )));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad obstacle number '{p}'")))
            })
            .collect::<Result<_>>()?;
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("obstacle values must be finite".into()));
        }
        match t_obj {
            None => t_obj = Some(nums[3]),
            Some(t) if t == nums[3] => {}
            Some(t) => {
                return Err(Error::Parse(format!(
                    "inconsistent obstacle values {t} vs {}",
                    nums[3]
                )))
            }
        }
        circles.push(Circle {
            cx: nums[0],
            cy: nums[1],
            r: nums[2],
        });
    }
    Ok(ObstacleSpec {
        circles,
        t_obj: t_obj.unwrap_or(0.0),
    })
}

// ---------------------------------------------------------------------------
// Metrics / trace CSV
// ---------------------------------------------------------------------------

/// One evaluated case. Wall time is reported separately (timings CSV).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case_id: String,
    pub mae: f64,
    pub linf: f64,
    pub residual: f64,
    pub iters: usize,
}

pub const METRICS_HEADER: &str = "case_id,mae,linf,residual,iters";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{METRICS_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{}",
            r.case_id, r.mae, r.linf, r.residual, r.iters
        );
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean_iters = rows.iter().map(|r| r.iters).sum::<usize>() as f64 / n;
        let _ = writeln!(
            out,
            "aggregate,{:?},{:?},{:?},{:?}",
            mean(|r| r.mae),
            mean(|r| r.linf),
            mean(|r| r.residual),
            mean_iters
        );
    }
    out
}

pub fn timings_to_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("case_id,millis\n");
    for (id, ms) in rows {
        let _ = writeln!(out, "{id},{ms:.3}");
    }
    out
}

pub fn trace_to_csv(trace: &ConvergenceTrace) -> String {
    let mut out = String::from("iter,epsilon,millis\n");
    for e in &trace.entries {
        let _ = writeln!(out, "{},{:?},{:.3}", e.iter, e.epsilon, e.millis);
    }
    out
}

// ---------------------------------------------------------------------------
// Hashing and manifests
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of a directory: the hash of its sorted `name:filehash` lines
/// (one level of nesting, which covers bundles and case directories).
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut entries = Vec::new();
    collect_files(dir, dir, &mut entries)?;
    entries.sort();
    let mut acc = String::new();
    for (rel, hash) in entries {
        let _ = writeln!(acc, "{rel}:{hash}");
    }
    Ok(sha256_hex(acc.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    paths.sort();
    for path in paths {
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| Error::Pipeline("path outside hash root".into()))?
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, hash_file(&path)?));
        }
    }
    Ok(())
}

/// Writes a deterministic `manifest.txt` of `key = value` lines.
pub fn write_manifest(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::from("manifest v1\n");
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn field_round_trip_bitwise() {
        let g = Grid::new(16, 8, 1.0, 1.0).unwrap();
        let f = Field::from_fn(g, |x, y| (31.7 * x).sin() * y + 1e-17 * x);
        let text = field_to_string(&f);
        let back = parse_field(&text).unwrap();
        assert_eq!(back.grid(), g);
        for (a, b) in f.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn field_parser_rejects_malformed() {
        assert!(parse_field("").is_err());
        assert!(parse_field("4 4 1.0").is_err()); // short header
        assert!(parse_field("4 4 1.0 1.0\n1\n2\n3").is_err()); // too few values
        assert!(parse_field("2 2 1.0 1.0\n1\n2\n3\nnan").is_err()); // non-finite
        assert!(parse_field("2 2 1.0 1.0\n1\n2\n3\nx").is_err()); // junk value
        assert!(parse_field("0 4 1.0 1.0\n").is_err()); // bad grid
        assert!(parse_field("99999999 99999999 1 1\n").is_err()); // absurd size
    }

    #[test]
    fn bc_round_trip_and_errors() {
        let bc = BoundarySpec {
            left: EdgeBc::dirichlet(0.25),
            right: EdgeBc::neumann(-0.75),
            bottom: EdgeBc::dirichlet(1.0),
            top: EdgeBc::dirichlet(0.0),
        };
        let text = bc_to_string(&bc).unwrap();
        assert_eq!(parse_bc(&text).unwrap(), bc);
        assert!(parse_bc("left dirichlet 0.5").is_err()); // missing edges
        assert!(parse_bc(&format!("{text}left dirichlet 0.1\n")).is_err()); // duplicate
        assert!(parse_bc("left sideways 0.5\nright dirichlet 0\nbottom dirichlet 0\ntop dirichlet 0").is_err());
        assert!(parse_bc("left dirichlet inf\nright dirichlet 0\nbottom dirichlet 0\ntop dirichlet 0").is_err());
    }

    #[test]
    fn obstacle_round_trip() {
        let o = ObstacleSpec {
            circles: vec![
                Circle { cx: 0.4, cy: 0.6, r: 0.1 },
                Circle { cx: 0.75, cy: 0.2, r: 0.05 },
            ],
            t_obj: 1.0,
        };
        let text = obstacle_to_string(&o);
        assert_eq!(parse_obstacle(&text).unwrap(), o);
        assert!(parse_obstacle("0.5 0.5 0.1 1.0\n0.2 0.2 0.05 2.0").is_err()); // mixed t_obj
        assert!(parse_obstacle("0.5 0.5 0.1").is_err());
        assert_eq!(parse_obstacle("").unwrap(), ObstacleSpec { circles: vec![], t_obj: 0.0 });
    }

    #[test]
    fn metrics_csv_deterministic_and_aggregated() {
        let rows = vec![
            MetricsRow {
                case_id: "case_0000".into(),
                mae: 0.01,
                linf: 0.05,
                residual: 0.3,
                iters: 40,
            },
            MetricsRow {
                case_id: "case_0001".into(),
                mae: 0.03,
                linf: 0.07,
                residual: 0.5,
                iters: 60,
            },
        ];
        let a = metrics_to_csv(&rows);
        let b = metrics_to_csv(&rows);
        assert_eq!(a, b);
        assert!(a.starts_with("case_id,mae,linf,residual,iters\n"));
        let agg = a.lines().last().unwrap();
        assert!(agg.starts_with("aggregate,0.02,"), "aggregate row: {agg}");
        assert!(agg.ends_with(",50.0"), "aggregate row: {agg}");
    }

    #[test]
    fn dir_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "hello").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/b.txt"), "world").unwrap();
        let h1 = hash_dir(dir.path()).unwrap();
        let h2 = hash_dir(dir.path()).unwrap();
        assert_eq!(h1, h2);
        std::fs::write(dir.path().join("sub/b.txt"), "world!").unwrap();
        assert_ne!(hash_dir(dir.path()).unwrap(), h1);
    }
}
