//! Datasets and their CSV formats.
//!
//! The canonical schema holds one menu per row:
//!
//! | column | content |
//! |---|---|
//! | `menu_id` | opaque string, unique |
//! | `left_outcomes`, `left_probs` | semicolon-joined reals |
//! | `right_outcomes`, `right_probs` | semicolon-joined reals |
//! | `n_trials` | positive integer or empty |
//! | `left_choice_rate` | real in [0, 1] or empty |
//!
//! Two adapters read the public choice-prediction-competition formats. Both
//! describe a lottery by `H, pH, L, LotShape, LotNum` per option (suffix `a`
//! for the left option, `b` for the right):
//!
//! | source column | meaning |
//! |---|---|
//! | `Ha`/`Hb`, `pHa`/`pHb`, `La`/`Lb` | high payoff, its probability, low payoff |
//! | `LotShapeA`/`LotShapeB` | `-`, `Symm`, `R-skew` or `L-skew`: how `H` is spread into a lottery |
//! | `LotNumA`/`LotNumB` | number of outcomes of that spread |
//! | `Amb` | ambiguous option (dropped) |
//! | `Feedback` | choices13k: feedback was shown (kept) |
//! | `bRate` | choices13k: share choosing the right option |
//! | `n` | choices13k: number of choices behind `bRate` |
//! | `Problem` | choices13k: problem id |
//! | `GameID`, `B` | CPC18 trial rows: problem id and right-option choice (0/1) |

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::rescale_factor;
use crate::lottery::{canonicalize, Lottery, Menu, SUM_TOL};

/// One binary choice by one participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Index into [`Dataset::menus`].
    pub menu: usize,
    pub chose_left: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub schema: String,
    pub rows_read: usize,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub menus: Vec<Menu>,
    pub rescale_factor: f64,
    pub provenance: Provenance,
    pub trials: Option<Vec<TrialRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schema {
    Canonical,
    Choices13k,
    Cpc18,
}

impl std::str::FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" => Ok(Schema::Canonical),
            "choices13k" => Ok(Schema::Choices13k),
            "cpc18" => Ok(Schema::Cpc18),
            other => Err(Error::InvalidArgument(format!("unknown schema {other}"))),
        }
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, menus: Vec<Menu>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &menus {
            if !seen.insert(m.id.as_str()) {
                return Err(Error::SchemaViolation(format!("duplicate menu id {}", m.id)));
            }
        }
        let factor = rescale_factor(&menus)?;
        Ok(Dataset {
            name: name.into(),
            menus,
            rescale_factor: factor,
            provenance,
            trials: None,
        })
    }

    pub fn len(&self) -> usize {
        self.menus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.menus.is_empty()
    }

    /// Observed left-choice rates; errors if any menu lacks one.
    pub fn targets(&self) -> Result<Vec<f64>> {
        self.menus
            .iter()
            .map(|m| m.choice_rate.ok_or_else(|| Error::MissingChoiceRate(m.id.clone())))
            .collect()
    }

    pub fn trial_counts(&self) -> Option<Vec<f64>> {
        self.menus.iter().map(|m| m.n_trials.map(f64::from)).collect()
    }

    pub fn load(path: &Path, schema: Schema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let source = path.display().to_string();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let mut ds = match schema {
            Schema::Canonical => read_canonical(file, &source)?,
            Schema::Choices13k => read_choices13k(file, &source)?,
            Schema::Cpc18 => read_cpc18(file, &source)?,
        };
        ds.name = name;
        Ok(ds)
    }

    pub fn write_canonical<W: Write>(&self, out: W) -> Result<()> {
        write_canonical(&self.menus, out)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn split_reals(s: &str, row: usize, col: &str) -> Result<Vec<f64>> {
    s.split(';')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| Error::ParseError {
                row,
                message: format!("{col}: cannot parse {t:?}"),
            })
        })
        .collect()
}

struct Columns {
    headers: csv::StringRecord,
}

impl Columns {
    fn index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::SchemaViolation(format!("missing column {name}")))
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, row: usize, col: &str) -> Result<T> {
    let s = rec.get(idx).unwrap_or("").trim();
    s.parse::<T>().map_err(|_| Error::ParseError {
        row,
        message: format!("{col}: cannot parse {s:?}"),
    })
}

fn parse_optional<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    row: usize,
    col: &str,
) -> Result<Option<T>> {
    if rec.get(idx).unwrap_or("").trim().is_empty() {
        Ok(None)
    } else {
        parse_field(rec, idx, row, col).map(Some)
    }
}

/// Parse a lottery, rejecting probability vectors that do not sum to one.
fn lottery_at(xs: &[f64], ps: &[f64], row: usize) -> Result<Lottery> {
    let sum: f64 = ps.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::ProbabilityNotNormalized(sum));
    }
    canonicalize(xs, ps).map_err(|e| match e {
        Error::ProbabilityNotNormalized(_) => e,
        other => Error::ParseError {
            row,
            message: other.to_string(),
        },
    })
}

pub fn read_canonical<R: Read>(input: R, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let cols = Columns {
        headers: rdr.headers()?.clone(),
    };
    let names = [
        "menu_id",
        "left_outcomes",
        "left_probs",
        "right_outcomes",
        "right_probs",
        "n_trials",
        "left_choice_rate",
    ];
    let idx: Vec<usize> = names.iter().map(|n| cols.index(n)).collect::<Result<_>>()?;
    let mut menus = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec?;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let left = lottery_at(
            &split_reals(get(1), row, names[1])?,
            &split_reals(get(2), row, names[2])?,
            row,
        )?;
        let right = lottery_at(
            &split_reals(get(3), row, names[3])?,
            &split_reals(get(4), row, names[4])?,
            row,
        )?;
        let n: Option<u32> = parse_optional(&rec, idx[5], row, names[5])?;
        let p: Option<f64> = parse_optional(&rec, idx[6], row, names[6])?;
        let menu = Menu::new(get(0), left, right, p, n).map_err(|e| Error::ParseError {
            row,
            message: e.to_string(),
        })?;
        menus.push(menu);
    }
    let rows_read = menus.len();
    Dataset::new(
        "dataset",
        menus,
        Provenance {
            source: source.into(),
            schema: "canonical".into(),
            rows_read,
            filters: Vec::new(),
        },
    )
}

pub fn write_canonical<W: Write>(menus: &[Menu], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "menu_id",
        "left_outcomes",
        "left_probs",
        "right_outcomes",
        "right_probs",
        "n_trials",
        "left_choice_rate",
    ])?;
    for m in menus {
        w.write_record([
            m.id.clone(),
            join(m.left.outcomes()),
            join(m.left.probs()),
            join(m.right.outcomes()),
            join(m.right.probs()),
            m.n_trials.map_or(String::new(), |n| n.to_string()),
            m.choice_rate.map_or(String::new(), |p| p.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Lottery from the competition parameterization: with probability `1 − pH`
/// the low payoff `L`; with probability `pH` the high payoff `H`, possibly
/// spread into `lot_num` outcomes according to `shape`.
pub fn competition_lottery(h: f64, ph: f64, l: f64, shape: &str, lot_num: u32) -> Result<Lottery> {
    let mut xs = Vec::new();
    let mut ps = Vec::new();
    match shape.trim() {
        "-" | "" => {
            xs.push(h);
            ps.push(ph);
        }
        "Symm" => {
            if lot_num == 0 {
                return Err(Error::SchemaViolation("Symm lottery needs LotNum >= 1".into()));
            }
            let k = lot_num - 1;
            for i in 0..=k {
                xs.push(h - k as f64 / 2.0 + i as f64);
                ps.push(ph * binomial_half(k, i));
            }
        }
        "R-skew" | "L-skew" => {
            if lot_num == 0 {
                return Err(Error::SchemaViolation("skewed lottery needs LotNum >= 1".into()));
            }
            let (c, sign) = if shape.trim() == "R-skew" {
                (-1.0 - lot_num as f64, 1.0)
            } else {
                (1.0 + lot_num as f64, -1.0)
            };
            for i in 1..=lot_num {
                xs.push(h + c + sign * 2f64.powi(i as i32));
                let p = ph / 2f64.powi(i as i32);
                ps.push(if i == lot_num { 2.0 * p } else { p });
            }
        }
        other => return Err(Error::SchemaViolation(format!("unknown lottery shape {other:?}"))),
    }
    xs.push(l);
    ps.push(1.0 - ph);
    canonicalize(&xs, &ps)
}

fn binomial_half(k: u32, i: u32) -> f64 {
    let mut c = 1.0;
    for j in 0..i {
        c = c * (k - j) as f64 / (j + 1) as f64;
    }
    c / 2f64.powi(k as i32)
}

struct OptionColumns {
    h: usize,
    ph: usize,
    l: usize,
    shape: usize,
    num: usize,
}

impl OptionColumns {
    fn find(cols: &Columns, suffix: char) -> Result<Self> {
        let upper = suffix.to_ascii_uppercase();
        Ok(OptionColumns {
            h: cols.index(&format!("H{suffix}"))?,
            ph: cols.index(&format!("pH{suffix}"))?,
            l: cols.index(&format!("L{suffix}"))?,
            shape: cols.index(&format!("LotShape{upper}"))?,
            num: cols.index(&format!("LotNum{upper}"))?,
        })
    }

    fn lottery(&self, rec: &csv::StringRecord, row: usize) -> Result<Lottery> {
        let h: f64 = parse_field(rec, self.h, row, "H")?;
        let ph: f64 = parse_field(rec, self.ph, row, "pH")?;
        let l: f64 = parse_field(rec, self.l, row, "L")?;
        let num: f64 = parse_field(rec, self.num, row, "LotNum")?;
        let shape = rec.get(self.shape).unwrap_or("").trim();
        competition_lottery(h, ph, l, shape, num.round() as u32).map_err(|e| match e {
            Error::SchemaViolation(_) => e,
            other => Error::ParseError {
                row,
                message: other.to_string(),
            },
        })
    }
}

fn truthy(s: &str) -> bool {
    matches!(
        s.trim().to_ascii_lowercase().as_str(),
        "1" | "true" | "t" | "yes" | "1.0"
    )
}

/// choices13k problem-level file. Keeps unambiguous feedback problems; the
/// left option is `A`, and the left-choice rate is `1 − bRate`. Repeated rows
/// for a problem are pooled with weights `n`.
pub fn read_choices13k<R: Read>(input: R, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let cols = Columns {
        headers: rdr.headers()?.clone(),
    };
    let a = OptionColumns::find(&cols, 'a')?;
    let b = OptionColumns::find(&cols, 'b')?;
    let problem = cols.index("Problem")?;
    let amb = cols.index("Amb")?;
    let feedback = cols.index("Feedback")?;
    let brate = cols.index("bRate")?;
    let n_col = cols.index("n")?;

    struct Acc {
        left: Lottery,
        right: Lottery,
        weighted_left: f64,
        n: f64,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    let mut order = Vec::new();
    let mut rows_read = 0;
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec?;
        rows_read += 1;
        if truthy(rec.get(amb).unwrap_or("")) || !truthy(rec.get(feedback).unwrap_or("")) {
            continue;
        }
        let id = rec.get(problem).unwrap_or("").trim().to_string();
        let rate: f64 = parse_field(&rec, brate, row, "bRate")?;
        let n: f64 = parse_field(&rec, n_col, row, "n")?;
        let left = a.lottery(&rec, row)?;
        let right = b.lottery(&rec, row)?;
        let e = acc.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc {
                left,
                right,
                weighted_left: 0.0,
                n: 0.0,
            }
        });
        e.weighted_left += n * (1.0 - rate);
        e.n += n;
    }
    let mut menus = Vec::with_capacity(order.len());
    for id in order {
        let e = acc.remove(&id).expect("accumulated");
        let p = if e.n > 0.0 { e.weighted_left / e.n } else { 0.5 };
        let n = (e.n.round() as u32).max(1);
        menus.push(Menu::new(id, e.left, e.right, Some(p.clamp(0.0, 1.0)), Some(n))?);
    }
    Dataset::new(
        "choices13k",
        menus,
        Provenance {
            source: source.into(),
            schema: "choices13k".into(),
            rows_read,
            filters: vec!["Amb == false".into(), "Feedback == true".into()],
        },
    )
}

/// CPC18 trial-level file. Keeps risk problems (`Amb == 0`), aggregates trials
/// per `GameID` and retains every trial for trial-level scoring.
pub fn read_cpc18<R: Read>(input: R, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let cols = Columns {
        headers: rdr.headers()?.clone(),
    };
    let a = OptionColumns::find(&cols, 'a')?;
    let b = OptionColumns::find(&cols, 'b')?;
    let game = cols.index("GameID")?;
    let amb = cols.index("Amb")?;
    let choice = cols.index("B")?;

    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut lots: Vec<(String, Lottery, Lottery)> = Vec::new();
    let mut trials = Vec::new();
    let mut rows_read = 0;
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec?;
        rows_read += 1;
        if truthy(rec.get(amb).unwrap_or("")) {
            continue;
        }
        let id = rec.get(game).unwrap_or("").trim().to_string();
        let chose_right: f64 = parse_field(&rec, choice, row, "B")?;
        let m = match index.get(&id) {
            Some(&m) => m,
            None => {
                let m = lots.len();
                lots.push((id.clone(), a.lottery(&rec, row)?, b.lottery(&rec, row)?));
                index.insert(id, m);
                m
            }
        };
        trials.push(TrialRecord {
            menu: m,
            chose_left: chose_right < 0.5,
        });
    }
    let mut left_counts = vec![0u32; lots.len()];
    let mut totals = vec![0u32; lots.len()];
    for t in &trials {
        totals[t.menu] += 1;
        left_counts[t.menu] += t.chose_left as u32;
    }
    let menus = lots
        .into_iter()
        .enumerate()
        .map(|(m, (id, l, r))| {
            Menu::new(
                id,
                l,
                r,
                Some(left_counts[m] as f64 / totals[m] as f64),
                Some(totals[m]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(
        "cpc18",
        menus,
        Provenance {
            source: source.into(),
            schema: "cpc18".into(),
            rows_read,
            filters: vec!["Amb == 0".into()],
        },
    )?;
    ds.trials = Some(trials);
    Ok(ds)
}
