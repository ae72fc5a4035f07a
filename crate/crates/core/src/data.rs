//! Survey anchors, bridge-interpolated monthly panels, z-score normalization
//! and the on-disk panel format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::stochastic::{brownian_bridge, BridgeSpec, RngStream, StreamKind};
use crate::{Error, Result};

pub const INDICATORS: usize = 6;
pub const MONTHS: usize = 168;
pub const SURVEY_YEARS: [u32; 3] = [2007, 2015, 2020];
/// Month index of each survey year's anchor (January).
pub const ANCHOR_MONTHS: [usize; 3] = [0, 96, 156];
pub const MONTH0: &str = "2007-01";
pub const DEFAULT_SIGMA: f64 = 1.5;

pub const ANCHOR_HEADER: [&str; 5] = ["district", "district_id", "indicator_id", "year", "value"];
pub const PANEL_HEADER: [&str; 4] = ["district_id", "month", "indicator_id", "value"];

/// Survey values for every (district, indicator, year).
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTable {
    names: Vec<String>,
    /// `[district][indicator][year slot]`
    values: Vec<[[f64; 3]; INDICATORS]>,
}

impl AnchorTable {
    pub fn districts(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn records(&self) -> usize {
        self.names.len() * INDICATORS * SURVEY_YEARS.len()
    }

    pub fn value(&self, district: usize, indicator: usize, year_slot: usize) -> f64 {
        self.values[district][indicator][year_slot]
    }
}

fn year_slot(year: u32) -> Option<usize> {
    SURVEY_YEARS.iter().position(|&y| y == year)
}

pub fn load_anchors(path: &Path) -> Result<AnchorTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_anchors(&text).map_err(|e| match e {
        Error::Validation(msg) => Error::validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parse and validate anchor CSV text. Row numbers in errors are file lines
/// (the header is line 1).
pub fn parse_anchors(text: &str) -> Result<AnchorTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(ANCHOR_HEADER.iter().copied()) {
        return Err(Error::validation(format!(
            "anchor header must be `{}`, got `{}`",
            ANCHOR_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut names: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize, usize), (f64, usize)> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::validation(format!("line {line}: {e}")))?;
        if record.len() != ANCHOR_HEADER.len() {
            return Err(Error::validation(format!(
                "line {line}: expected {} fields, got {}",
                ANCHOR_HEADER.len(),
                record.len()
            )));
        }
        let name = record[0].to_string();
        if name.is_empty() {
            return Err(Error::validation(format!("line {line}: empty district name")));
        }
        let district: usize = parse_field(&record[1], "district_id", line)?;
        let indicator: usize = parse_field(&record[2], "indicator_id", line)?;
        let year: u32 = parse_field(&record[3], "year", line)?;
        let value: f64 = parse_field(&record[4], "value", line)?;

        match names.get(district) {
            Some(known) if *known != name => {
                return Err(Error::validation(format!(
                    "line {line}: district_id {district} is `{known}` earlier but `{name}` here"
                )))
            }
            Some(_) => {}
            None if district == names.len() => {
                if let Some(other) = names.iter().position(|n| *n == name) {
                    return Err(Error::validation(format!(
                        "line {line}: district `{name}` already has id {other}"
                    )));
                }
                names.push(name);
            }
            None => {
                return Err(Error::validation(format!(
                    "line {line}: district_id {district} skips ahead; ids must appear in order starting at 0 (next is {})",
                    names.len()
                )))
            }
        }
        if indicator >= INDICATORS {
            return Err(Error::validation(format!(
                "line {line}: indicator_id {indicator} outside 0..{}",
                INDICATORS - 1
            )));
        }
        let slot = year_slot(year).ok_or_else(|| {
            Error::validation(format!("line {line}: year {year} is not one of {SURVEY_YEARS:?}"))
        })?;
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::validation(format!(
                "line {line}: value {value} outside [0, 100]"
            )));
        }
        if let Some((_, first)) = cells.insert((district, indicator, slot), (value, line)) {
            return Err(Error::validation(format!(
                "line {line}: duplicate (district {district}, indicator {indicator}, year {year}); first seen on line {first}"
            )));
        }
    }
    if names.is_empty() {
        return Err(Error::validation("anchor file has no records"));
    }

    let mut gaps = Vec::new();
    let mut values = vec![[[0.0; 3]; INDICATORS]; names.len()];
    for (d, name) in names.iter().enumerate() {
        for i in 0..INDICATORS {
            for (s, year) in SURVEY_YEARS.iter().enumerate() {
                match cells.get(&(d, i, s)) {
                    Some(&(v, _)) => values[d][i][s] = v,
                    None => gaps.push(format!("({name}, indicator {i}, {year})")),
                }
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::validation(format!(
            "{} missing anchor(s): {}",
            gaps.len(),
            gaps.join(", ")
        )));
    }
    Ok(AnchorTable { names, values })
}

fn parse_field<T: std::str::FromStr>(raw: &str, field: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::validation(format!("line {line}: cannot parse {field} `{raw}`")))
}

/// District × month × indicator observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    values: Tensor,
    districts: Vec<String>,
    month0: String,
}

impl Panel {
    pub fn new(values: Tensor, districts: Vec<String>, month0: impl Into<String>) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape.iter().any(|&s| s == 0) {
            return Err(Error::validation(format!(
                "panel must be a non-empty districts × months × indicators array, got shape {shape:?}"
            )));
        }
        if districts.len() != shape[0] {
            return Err(Error::validation(format!(
                "panel has {} districts but {} names",
                shape[0],
                districts.len()
            )));
        }
        if !values.all_finite() {
            return Err(Error::validation("panel contains non-finite values"));
        }
        Ok(Panel {
            values,
            districts,
            month0: month0.into(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn districts(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn months(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn indicators(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn names(&self) -> &[String] {
        &self.districts
    }

    pub fn month0(&self) -> &str {
        &self.month0
    }

    pub fn get(&self, district: usize, month: usize, indicator: usize) -> f64 {
        let (t, n) = (self.months(), self.indicators());
        self.values.data()[(district * t + month) * n + indicator]
    }

    /// The `months × indicators` block of one district.
    pub fn series(&self, district: usize) -> Tensor {
        let block = self.months() * self.indicators();
        let data = self.values.data()[district * block..(district + 1) * block].to_vec();
        Tensor::new(vec![self.months(), self.indicators()], data).expect("block shape")
    }

    /// Keep the first `districts` districts and `months` months.
    pub fn truncated(&self, districts: usize, months: usize) -> Result<Panel> {
        if districts == 0 || districts > self.districts() || months == 0 || months > self.months() {
            return Err(Error::contract(format!(
                "cannot truncate {}×{} panel to {districts}×{months}",
                self.districts(),
                self.months()
            )));
        }
        let n = self.indicators();
        let mut data = Vec::with_capacity(districts * months * n);
        for d in 0..districts {
            let start = d * self.months() * n;
            data.extend_from_slice(&self.values.data()[start..start + months * n]);
        }
        Panel::new(
            Tensor::new(vec![districts, months, n], data)?,
            self.districts[..districts].to_vec(),
            self.month0.clone(),
        )
    }

    /// Resolve a district given by exact name or numeric index.
    pub fn resolve_district(&self, key: &str) -> Result<usize> {
        if let Some(d) = self.districts.iter().position(|n| n == key) {
            return Ok(d);
        }
        if let Ok(d) = key.parse::<usize>() {
            if d < self.districts() {
                return Ok(d);
            }
        }
        Err(Error::validation(format!(
            "unknown district `{key}`; valid names: {}",
            self.districts.join(", ")
        )))
    }

    /// SHA-256 over shape, names and the bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in self.values.shape() {
            h.update((*s as u64).to_le_bytes());
        }
        for name in &self.districts {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        for v in self.values.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub clipped: usize,
    pub cells: usize,
}

/// Build the monthly panel: bridges between anchor months, a driftless
/// random walk past the last anchor, then clipping to [0, 100].
///
/// Series `(d, i)` draws from the bridge stream with index
/// `(d·INDICATORS + i)·3 + segment`.
pub fn synthesize(anchors: &AnchorTable, sigma: f64, seed: u64) -> Result<(Panel, SynthesisReport)> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::validation(format!("sigma must be >= 0, got {sigma}")));
    }
    let d_count = anchors.districts();
    let series: Vec<(Vec<f64>, usize)> = (0..d_count * INDICATORS)
        .into_par_iter()
        .map(|pair| {
            let (d, i) = (pair / INDICATORS, pair % INDICATORS);
            let stream = |segment: u64| {
                RngStream::for_kind(seed, StreamKind::Bridge, 0, pair as u64 * 3 + segment)
            };
            let mut path = vec![0.0; MONTHS];
            for seg in 0..2 {
                let (a, b) = (ANCHOR_MONTHS[seg], ANCHOR_MONTHS[seg + 1]);
                let spec = BridgeSpec {
                    t_a: a as f64,
                    t_b: b as f64,
                    x_a: anchors.value(d, i, seg),
                    x_b: anchors.value(d, i, seg + 1),
                    sigma,
                };
                let times: Vec<f64> = (a..=b).map(|t| t as f64).collect();
                let values = brownian_bridge(&spec, &times, stream(seg as u64))?;
                path[a..=b].copy_from_slice(&values);
            }
            let last = ANCHOR_MONTHS[2];
            let mut walk = stream(2).normals();
            for t in last + 1..MONTHS {
                path[t] = path[t - 1] + sigma * walk.next();
            }
            let mut clipped = 0;
            for v in &mut path {
                let c = v.clamp(0.0, 100.0);
                if c != *v {
                    clipped += 1;
                    *v = c;
                }
            }
            Ok((path, clipped))
        })
        .collect::<Result<_>>()?;

    let mut data = vec![0.0; d_count * MONTHS * INDICATORS];
    let mut clipped = 0;
    for (pair, (path, c)) in series.into_iter().enumerate() {
        let (d, i) = (pair / INDICATORS, pair % INDICATORS);
        for (t, v) in path.into_iter().enumerate() {
            data[(d * MONTHS + t) * INDICATORS + i] = v;
        }
        clipped += c;
    }
    let panel = Panel::new(
        Tensor::new(vec![d_count, MONTHS, INDICATORS], data)?,
        anchors.names().to_vec(),
        MONTH0,
    )?;
    let cells = d_count * MONTHS * INDICATORS;
    Ok((panel, SynthesisReport { clipped, cells }))
}

/// Per-indicator mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(panel: &Panel) -> Result<Self> {
        let n = panel.indicators();
        let count = (panel.districts() * panel.months()) as f64;
        let mut mean = vec![0.0; n];
        for row in panel.values().data().chunks(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for row in panel.values().data().chunks(n) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / count).sqrt()).collect();
        let stats = NormStats { mean, std };
        stats.validate(n)?;
        Ok(stats)
    }

    pub fn validate(&self, indicators: usize) -> Result<()> {
        if self.mean.len() != indicators || self.std.len() != indicators {
            return Err(Error::validation(format!(
                "normalization stats cover {} indicators, panel has {indicators}",
                self.mean.len()
            )));
        }
        for (i, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            if !m.is_finite() || !(s > 0.0) || !s.is_finite() {
                return Err(Error::validation(format!(
                    "indicator {i} has zero or invalid variance (mean {m}, std {s})"
                )));
            }
        }
        Ok(())
    }

    pub fn to_normalized(&self, indicator: usize, raw: f64) -> f64 {
        (raw - self.mean[indicator]) / self.std[indicator]
    }

    pub fn to_raw(&self, indicator: usize, z: f64) -> f64 {
        z * self.std[indicator] + self.mean[indicator]
    }

    fn map(&self, panel: &Panel, f: impl Fn(&Self, usize, f64) -> f64) -> Result<Panel> {
        self.validate(panel.indicators())?;
        let n = panel.indicators();
        let data = panel
            .values()
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(self, k % n, v))
            .collect();
        Panel::new(
            Tensor::new(panel.values().shape().to_vec(), data)?,
            panel.names().to_vec(),
            panel.month0(),
        )
    }

    pub fn denormalize(&self, panel: &Panel) -> Result<Panel> {
        self.map(panel, |s, i, v| s.to_raw(i, v))
    }
}

/// Z-score `panel` per indicator, with fresh stats unless `stats` is given.
pub fn normalize(panel: &Panel, stats: Option<&NormStats>) -> Result<(Panel, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::compute(panel)?,
    };
    let out = stats.map(panel, |s, i, v| s.to_normalized(i, v))?;
    Ok((out, stats))
}

/// JSON sidecar stored next to a panel CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub seed: u64,
    pub sigma: f64,
    pub month0: String,
    pub districts: Vec<String>,
    pub months: usize,
    pub indicators: usize,
    pub norm: NormStats,
    pub clipped: usize,
}

pub fn sidecar_path(panel_path: &Path) -> PathBuf {
    panel_path.with_extension("json")
}

/// Write the long-format CSV and its sidecar. Values use shortest round-trip
/// formatting so reading back is bit-exact.
pub fn write_panel(path: &Path, panel: &Panel, meta: &PanelMeta) -> Result<()> {
    let mut out = String::with_capacity(panel.values().len() * 24);
    out.push_str(&PANEL_HEADER.join(","));
    out.push('\n');
    for d in 0..panel.districts() {
        for t in 0..panel.months() {
            for i in 0..panel.indicators() {
                out.push_str(&format!("{d},{t},{i},{}\n", panel.get(d, t, i)));
            }
        }
    }
    write_file(path, out.as_bytes())?;
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    write_file(&sidecar_path(path), json.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_panel(path: &Path) -> Result<(Panel, PanelMeta)> {
    let side = sidecar_path(path);
    let meta_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: PanelMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::validation(format!("{}: {e}", side.display())))?;
    let (d_count, t_count, n) = (meta.districts.len(), meta.months, meta.indicators);
    if d_count == 0 || t_count == 0 || n == 0 {
        return Err(Error::validation(format!("{}: empty panel dimensions", side.display())));
    }
    meta.norm.validate(n)?;

    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = |msg: String| Error::validation(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(PANEL_HEADER.iter().copied()) {
        return Err(ctx(format!("panel header must be `{}`", PANEL_HEADER.join(","))));
    }
    let total = d_count * t_count * n;
    let mut data = vec![f64::NAN; total];
    let mut seen = vec![false; total];
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| ctx(format!("line {line}: {e}")))?;
        if record.len() != PANEL_HEADER.len() {
            return Err(ctx(format!("line {line}: expected 4 fields")));
        }
        let d: usize = parse_field(&record[0], "district_id", line).map_err(|e| ctx(e.to_string()))?;
        let t: usize = parse_field(&record[1], "month", line).map_err(|e| ctx(e.to_string()))?;
        let i: usize = parse_field(&record[2], "indicator_id", line).map_err(|e| ctx(e.to_string()))?;
        let v: f64 = parse_field(&record[3], "value", line).map_err(|e| ctx(e.to_string()))?;
        if d >= d_count || t >= t_count || i >= n {
            return Err(ctx(format!("line {line}: index ({d}, {t}, {i}) out of range")));
        }
        if !v.is_finite() {
            return Err(ctx(format!("line {line}: non-finite value")));
        }
        let idx = (d * t_count + t) * n + i;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(ctx(format!("line {line}: duplicate cell ({d}, {t}, {i})")));
        }
        data[idx] = v;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let (d, rest) = (missing / (t_count * n), missing % (t_count * n));
        return Err(ctx(format!(
            "missing cell (district {d}, month {}, indicator {})",
            rest / n,
            rest % n
        )));
    }
    let panel = Panel::new(
        Tensor::new(vec![d_count, t_count, n], data)?,
        meta.districts.clone(),
        meta.month0.clone(),
    )?;
    Ok((panel, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_text() -> String {
        fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/anchors_synthetic.csv"))
            .unwrap()
    }

    fn small_anchors(districts: usize) -> String {
        let mut s = ANCHOR_HEADER.join(",") + "\n";
        for d in 0..districts {
            for i in 0..INDICATORS {
                for (k, y) in SURVEY_YEARS.iter().enumerate() {
                    let v = 10.0 + 5.0 * i as f64 + 7.0 * k as f64 + d as f64;
                    s.push_str(&format!("d{d},{d},{i},{y},{v}\n"));
                }
            }
        }
        s
    }

    fn msg(e: Error) -> String {
        e.to_string()
    }

    #[test]
    fn fixture_has_540_records() {
        let a = parse_anchors(&fixture_text()).unwrap();
        assert_eq!(a.districts(), 30);
        assert_eq!(a.records(), 540);
        assert_eq!(a.names()[0], "syn-district-01");
    }

    #[test]
    fn out_of_range_value_reports_line() {
        let text = small_anchors(1).replacen(",2015,17", ",2015,101", 1);
        let e = msg(parse_anchors(&text).unwrap_err());
        assert!(e.contains("line 3") && e.contains("101"), "{e}");
    }

    #[test]
    fn duplicate_rejected() {
        let mut text = small_anchors(1);
        text.push_str("d0,0,0,2007,12\n");
        let e = msg(parse_anchors(&text).unwrap_err());
        assert!(e.contains("duplicate"), "{e}");
    }

    #[test]
    fn gaps_listed() {
        let text: String = small_anchors(2)
            .lines()
            .filter(|l| !l.starts_with("d1,1,3,2020") && !l.starts_with("d0,0,5,2007"))
            .map(|l| format!("{l}\n"))
            .collect();
        let e = msg(parse_anchors(&text).unwrap_err());
        assert!(e.contains("2 missing"), "{e}");
        assert!(e.contains("(d0, indicator 5, 2007)") && e.contains("(d1, indicator 3, 2020)"), "{e}");
    }

    #[test]
    fn bad_header_year_indicator_and_ids() {
        let e = msg(parse_anchors("district,id,indicator_id,year,value\n").unwrap_err());
        assert!(e.contains("header"), "{e}");
        let e = msg(parse_anchors(&small_anchors(1).replacen(",2007,", ",2008,", 1)).unwrap_err());
        assert!(e.contains("2008"), "{e}");
        let e = msg(parse_anchors(&small_anchors(1).replacen("d0,0,0,", "d0,0,6,", 1)).unwrap_err());
        assert!(e.contains("indicator_id 6"), "{e}");
        let e = msg(parse_anchors(&small_anchors(2).replace("d1,1,", "d1,2,")).unwrap_err());
        assert!(e.contains("skips"), "{e}");
        let e = msg(parse_anchors(&small_anchors(2).replace("d1,1,", "d0,1,")).unwrap_err());
        assert!(e.contains("already has id"), "{e}");
    }

    fn linear_oracle(a: &AnchorTable, d: usize, i: usize, t: usize) -> f64 {
        let seg = if t <= 96 { 0 } else { 1 };
        let (ta, tb) = (ANCHOR_MONTHS[seg] as f64, ANCHOR_MONTHS[seg + 1] as f64);
        let (xa, xb) = (a.value(d, i, seg), a.value(d, i, seg + 1));
        let t = (t as f64).min(tb);
        xa + (t - ta) / (tb - ta) * (xb - xa)
    }

    #[test]
    fn sigma_zero_is_piecewise_linear() {
        let a = parse_anchors(&fixture_text()).unwrap();
        let (p, rep) = synthesize(&a, 0.0, 3).unwrap();
        assert_eq!(rep.clipped, 0);
        for d in [0, 17, 29] {
            for i in 0..INDICATORS {
                for t in 0..MONTHS {
                    assert!((p.get(d, t, i) - linear_oracle(&a, d, i, t)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn anchors_exact_and_clipping_rare_on_fixture() {
        let a = parse_anchors(&fixture_text()).unwrap();
        for seed in [0, 1, 99] {
            let (p, rep) = synthesize(&a, DEFAULT_SIGMA, seed).unwrap();
            assert_eq!(p.values().shape(), &[30, 168, 6]);
            for d in 0..30 {
                for i in 0..INDICATORS {
                    for (s, &m) in ANCHOR_MONTHS.iter().enumerate() {
                        assert_eq!(p.get(d, m, i).to_bits(), a.value(d, i, s).to_bits());
                    }
                }
            }
            assert!(p.values().data().iter().all(|v| (0.0..=100.0).contains(v)));
            assert!((rep.clipped as f64) < 0.01 * rep.cells as f64, "{rep:?}");
        }
    }

    #[test]
    fn synthesis_deterministic_and_series_independent() {
        let text = small_anchors(3);
        let a = parse_anchors(&text).unwrap();
        let (p1, _) = synthesize(&a, 1.5, 11).unwrap();
        let (p2, _) = synthesize(&a, 1.5, 11).unwrap();
        assert_eq!(p1.digest(), p2.digest());
        let (p3, _) = synthesize(&a, 1.5, 12).unwrap();
        assert_ne!(p1.digest(), p3.digest());

        let changed = parse_anchors(&text.replacen("d2,2,4,2020,46", "d2,2,4,2020,47", 1)).unwrap();
        let (p4, _) = synthesize(&changed, 1.5, 11).unwrap();
        for d in 0..3 {
            for i in 0..INDICATORS {
                let same = (0..MONTHS).all(|t| p1.get(d, t, i) == p4.get(d, t, i));
                assert_eq!(same, !(d == 2 && i == 4), "series ({d}, {i})");
            }
        }
    }

    #[test]
    fn normalize_moments_and_round_trip() {
        let a = parse_anchors(&fixture_text()).unwrap();
        let (p, _) = synthesize(&a, DEFAULT_SIGMA, 5).unwrap();
        let (z, stats) = normalize(&p, None).unwrap();
        let count = (30 * MONTHS) as f64;
        for i in 0..INDICATORS {
            let col: Vec<f64> = z.values().data().iter().skip(i).step_by(INDICATORS).copied().collect();
            let m = col.iter().sum::<f64>() / count;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            assert!(m.abs() < 1e-10 && (v.sqrt() - 1.0).abs() < 1e-10, "{i}: {m} {v}");
        }
        let back = stats.denormalize(&z).unwrap();
        assert!(back.values().max_abs_diff(p.values()) < 1e-10);

        let (z2, _) = normalize(&p, Some(&stats)).unwrap();
        assert_eq!(z2, z);
    }

    #[test]
    fn constant_indicator_rejected() {
        let mut data = vec![0.0; 2 * 3 * 2];
        for (k, v) in data.iter_mut().enumerate() {
            *v = if k % 2 == 0 { 42.0 } else { k as f64 };
        }
        let p = Panel::new(Tensor::new(vec![2, 3, 2], data).unwrap(), vec!["a".into(), "b".into()], MONTH0).unwrap();
        let e = msg(normalize(&p, None).unwrap_err());
        assert!(e.contains("indicator 0"), "{e}");
    }

    #[test]
    fn panel_file_round_trip_is_bit_exact() {
        let a = parse_anchors(&small_anchors(2)).unwrap();
        let (p, rep) = synthesize(&a, 1.5, 8).unwrap();
        let norm = NormStats::compute(&p).unwrap();
        let meta = PanelMeta {
            seed: 8,
            sigma: 1.5,
            month0: MONTH0.into(),
            districts: p.names().to_vec(),
            months: MONTHS,
            indicators: INDICATORS,
            norm,
            clipped: rep.clipped,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel(&path, &p, &meta).unwrap();
        let (q, meta2) = read_panel(&path).unwrap();
        assert_eq!(q.digest(), p.digest());
        assert_eq!(meta2, meta);
    }

    #[test]
    fn panel_file_rejects_missing_cell() {
        let a = parse_anchors(&small_anchors(1)).unwrap();
        let (p, _) = synthesize(&a, 1.0, 1).unwrap();
        let meta = PanelMeta {
            seed: 1,
            sigma: 1.0,
            month0: MONTH0.into(),
            districts: p.names().to_vec(),
            months: MONTHS,
            indicators: INDICATORS,
            norm: NormStats::compute(&p).unwrap(),
            clipped: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel(&path, &p, &meta).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().filter(|l| *l != text.lines().nth(7).unwrap()).collect();
        fs::write(&path, cut.join("\n") + "\n").unwrap();
        let e = msg(read_panel(&path).unwrap_err());
        assert!(e.contains("missing cell"), "{e}");
    }

    #[test]
    fn resolve_district_by_name_or_index() {
        let a = parse_anchors(&small_anchors(3)).unwrap();
        let (p, _) = synthesize(&a, 0.0, 0).unwrap();
        assert_eq!(p.resolve_district("d2").unwrap(), 2);
        assert_eq!(p.resolve_district("1").unwrap(), 1);
        let e = msg(p.resolve_district("nowhere").unwrap_err());
        assert!(e.contains("d0, d1, d2"), "{e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn anchors_pinned_for_any_seed(seed in any::<u64>(), sigma in 0.0f64..5.0) {
            let a = parse_anchors(&small_anchors(1)).unwrap();
            let (p, _) = synthesize(&a, sigma, seed).unwrap();
            for i in 0..INDICATORS {
                for (s, &m) in ANCHOR_MONTHS.iter().enumerate() {
                    prop_assert_eq!(p.get(0, m, i).to_bits(), a.value(0, i, s).to_bits());
                }
            }
        }

        #[test]
        fn normalize_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let p = Panel::new(Tensor::new(vec![2, 3, 2], vals).unwrap(), vec!["a".into(), "b".into()], MONTH0).unwrap();
            if let Ok((z, s)) = normalize(&p, None) {
                let back = s.denormalize(&z).unwrap();
                prop_assert!(back.values().max_abs_diff(p.values()) < 1e-10);
            }
        }
    }
}
