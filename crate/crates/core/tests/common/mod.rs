#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use vnsde::diffcore::{ParamSet, Tape, Tensor, Var};
use vnsde::sdesolve::LatentDynamics;

pub fn fixture_anchors() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/anchors_synthetic.csv")
}

pub fn vnsde(args: &[&str]) -> i32 {
    let argv = std::iter::once("vnsde").chain(args.iter().copied());
    vnsde::cli::run_from(argv)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Col {
    /// Non-negative integer.
    Index,
    /// Finite float.
    Float,
    /// Non-empty text.
    Text,
}

#[derive(Debug)]
pub enum Cell {
    Index(u64),
    Float(f64),
    Text(String),
}

impl Cell {
    pub fn f(&self) -> f64 {
        match self {
            Cell::Float(v) => *v,
            Cell::Index(v) => *v as f64,
            Cell::Text(t) => panic!("expected number, got {t}"),
        }
    }

    pub fn i(&self) -> u64 {
        match self {
            Cell::Index(v) => *v,
            other => panic!("expected index, got {other:?}"),
        }
    }

    pub fn s(&self) -> &str {
        match self {
            Cell::Text(t) => t,
            other => panic!("expected text, got {other:?}"),
        }
    }
}

/// Strict CSV check: exact header, fixed field count, every cell of the
/// declared kind, trailing newline, no blank lines.
pub fn read_strict(path: &Path, header: &[&str], cols: &[Col]) -> Vec<Vec<Cell>> {
    assert_eq!(header.len(), cols.len());
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(text.ends_with('\n'), "{}: missing final newline", path.display());
    assert!(!text.contains("\n\n"), "{}: blank line", path.display());
    assert!(!text.contains('\r'), "{}: carriage return", path.display());
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let got: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(got, header, "{}: header", path.display());
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.unwrap_or_else(|e| panic!("{} line {}: {e}", path.display(), k + 2));
        assert_eq!(rec.len(), cols.len(), "{} line {}", path.display(), k + 2);
        let row = rec
            .iter()
            .zip(cols)
            .map(|(raw, col)| match col {
                Col::Index => Cell::Index(raw.parse().unwrap_or_else(|_| {
                    panic!("{} line {}: `{raw}` is not an index", path.display(), k + 2)
                })),
                Col::Float => {
                    let v: f64 = raw.parse().unwrap_or_else(|_| {
                        panic!("{} line {}: `{raw}` is not a float", path.display(), k + 2)
                    });
                    assert!(v.is_finite(), "{} line {}: non-finite", path.display(), k + 2);
                    Cell::Float(v)
                }
                Col::Text => {
                    assert!(!raw.is_empty(), "{} line {}: empty text", path.display(), k + 2);
                    Cell::Text(raw.to_string())
                }
            })
            .collect();
        rows.push(row);
    }
    rows
}

pub fn loss_curve(path: &Path) -> Vec<Vec<Cell>> {
    use Col::*;
    read_strict(path, &["epoch", "nll", "kl", "beta", "total"], &[Index, Float, Float, Float, Float])
}

pub fn eval_table(path: &Path) -> Vec<Vec<Cell>> {
    read_strict(path, &["district", "nll"], &[Col::Text, Col::Float])
}

pub fn prediction(path: &Path) -> Vec<Vec<Cell>> {
    use Col::*;
    read_strict(
        path,
        &["month", "observed", "mean", "lower", "upper"],
        &[Index, Float, Float, Float, Float],
    )
}

pub fn panel_rows(path: &Path) -> Vec<Vec<Cell>> {
    use Col::*;
    read_strict(path, &["district_id", "month", "indicator_id", "value"], &[Index, Index, Index, Float])
}

/// Every regular file in `dir` except the manifest, sorted by name.
pub fn output_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Scalar Ornstein–Uhlenbeck dynamics `dz = −θ z dt + σ dW`.
pub struct Ou {
    pub theta: f64,
    pub sigma: f64,
    pub params: ParamSet,
}

impl Ou {
    pub fn new(theta: f64, sigma: f64) -> Self {
        Self {
            theta,
            sigma,
            params: ParamSet::new(),
        }
    }
}

impl LatentDynamics for Ou {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn latent_dim(&self) -> usize {
        1
    }

    fn context(&self, tape: &mut Tape<'_>, _district: usize) -> vnsde::Result<Var> {
        Ok(tape.leaf(Tensor::vector(vec![])))
    }

    fn coefficients(&self, tape: &mut Tape<'_>, z: Var, _ctx: Var) -> vnsde::Result<(Var, Var)> {
        let f = tape.scale(z, -self.theta)?;
        let g = tape.leaf(Tensor::vector(vec![self.sigma]));
        Ok((f, g))
    }
}

/// SplitMix64 with Box–Muller, independent of the library's streams.
pub struct OracleRng(u64);

impl OracleRng {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let (u1, u2) = (self.uniform(), self.uniform());
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
