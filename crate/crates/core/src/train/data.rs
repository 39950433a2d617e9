//! CSV ingestion and synthetic data generation.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Dataset, LikelihoodKind};
use crate::rng::{stream_rng, Stream};

/// Reads a dataset with a header row, a `y` response column and numeric covariates.
///
/// Line numbers in errors are 1-based and count the header as line 1.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let y_col = names.iter().position(|h| h == "y").ok_or_else(|| Error::Parse {
        line: 1,
        message: "header has no `y` column".into(),
    })?;
    let covariates: Vec<String> = names.iter().enumerate().filter(|(i, _)| *i != y_col).map(|(_, h)| h.clone()).collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let fallback = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(fallback, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(fallback, |p| p.line() as usize);
        if rec.len() != names.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", names.len(), rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: `{cell}` is not a number", names[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column `{}` is not finite", names[c]),
                });
            }
            if c == y_col {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let x = Matrix::new(ys.len(), covariates.len(), xs)?;
    Dataset::new(x, ys, covariates)
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = data.names().to_vec();
    header.push("y".into());
    w.write_record(&header).map_err(csv_io)?;
    for r in 0..data.n() {
        let mut row: Vec<String> = data.x().row(r).iter().map(|v| v.to_string()).collect();
        row.push(data.y()[r].to_string());
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Synthetic data specification for the `gen` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub kind: LikelihoodKind,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    /// Observation noise for linear data.
    #[serde(default = "one")]
    pub sigma_obs: f64,
    /// Label-flip probability for logistic data.
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    /// Pairwise correlation of the covariates within a row.
    #[serde(default)]
    pub x_corr: f64,
}

fn one() -> f64 {
    1.0
}

fn default_flip() -> f64 {
    0.1
}

/// Draws `X` with standard-normal entries and `z* ~ N(0, I)`.
///
/// Linear: `y = X z* + σ ε`. Logistic: `y = 1[x·z* > 0]`, flipped with probability `flip_prob`.
pub fn generate(spec: &GenSpec) -> Result<(Dataset, Vec<f64>)> {
    if spec.n == 0 || spec.d == 0 {
        return Err(Error::config("gen needs n >= 1 and d >= 1"));
    }
    if !(0.0..=1.0).contains(&spec.flip_prob) || !(spec.sigma_obs > 0.0) {
        return Err(Error::config("flip_prob must lie in [0, 1] and sigma_obs must be positive"));
    }
    if !(0.0..1.0).contains(&spec.x_corr) {
        return Err(Error::config("x_corr must lie in [0, 1)"));
    }
    let mut rng = stream_rng(spec.seed, Stream::Gen);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let z_star: Vec<f64> = (0..spec.d).map(|_| normal()).collect();
    let mut cells = Vec::with_capacity(spec.n * spec.d);
    if spec.x_corr == 0.0 {
        cells.extend((0..spec.n * spec.d).map(|_| normal()));
    } else {
        let (shared, own) = (spec.x_corr.sqrt(), (1.0 - spec.x_corr).sqrt());
        for _ in 0..spec.n {
            let f = normal();
            cells.extend((0..spec.d).map(|_| shared * f + own * normal()));
        }
    }
    let x = Matrix::new(spec.n, spec.d, cells)?;
    let s = x.matvec(&z_star);
    let y = match spec.kind {
        LikelihoodKind::Linear => s.iter().map(|m| m + spec.sigma_obs * normal()).collect(),
        LikelihoodKind::Logistic => {
            let mut flip = stream_rng(spec.seed ^ 0x9e37_79b9_7f4a_7c15, Stream::Gen);
            s.iter()
                .map(|m| {
                    let label = *m > 0.0;
                    f64::from(label ^ flip.random_bool(spec.flip_prob))
                })
                .collect()
        }
    };
    Ok((Dataset::from_parts(x, y)?, z_star))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        read_csv(s.as_bytes())
    }

    #[test]
    fn minimal_file() {
        let d = parse("x1,y\n1,0\n2,1\n").unwrap();
        assert_eq!((d.n(), d.d()), (2, 1));
        assert_eq!(d.y(), &[0.0, 1.0]);
    }

    #[test]
    fn column_order_follows_the_header() {
        let a = parse("a,b,y\n1,2,0\n3,4,1\n").unwrap();
        let b = parse("y,a,b\n0,1,2\n1,3,4\n").unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        assert_eq!(a.names(), b.names());
    }

    #[test]
    fn errors_cite_the_line() {
        let text = "x1,x2,y\n1,2,0\n1,2,0\n1,2,0\n1,2,0\n1,2,0\n1,oops,0\n";
        match parse(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("x2"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("x1,x2\n1,2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("x1,y\n1,2\n3\n"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn csv_round_trip_and_generators() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            kind: LikelihoodKind::Logistic,
            n: 50,
            d: 3,
            seed: 4,
            sigma_obs: 1.0,
            flip_prob: 0.1,
            x_corr: 0.0,
        };
        let (data, z) = generate(&spec).unwrap();
        assert!(data.is_binary() && z.len() == 3);
        let path = dir.path().join("d.csv");
        write_csv(&path, &data).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.x(), data.x());
        assert_eq!(back.y(), data.y());
        assert_eq!(generate(&spec).unwrap().0.y(), data.y());

        let lin = GenSpec {
            kind: LikelihoodKind::Linear,
            ..spec
        };
        let (data, _) = generate(&lin).unwrap();
        assert!(!data.is_binary());
        assert!(load_csv(&dir.path().join("missing.csv")).is_err());
    }
}
