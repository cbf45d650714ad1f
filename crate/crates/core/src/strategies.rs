//! Scripted edit policies standing in for a human at intervention epochs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::snapshot::{LatentSnapshot, PointId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("snapshot has no points")]
    EmptySnapshot,
    #[error("merge class {0} is not present in the snapshot")]
    MissingClass(usize),
    #[error("schedule has no entry for epoch {0}")]
    ScheduleGap(u32),
    #[error("cannot invert {0}")]
    NotInvertible(String),
    #[error("invalid strategy parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot parse `{input}`: {detail}")]
    Parse { input: String, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "lowercase")]
pub enum Strategy {
    /// Pull every point toward its class center by factor `gamma`.
    Compactness(f64),
    /// Scale class centers away from their common mean by `beta`.
    Separation(f64),
    /// Move the listed classes so their centers coincide.
    Merge(Vec<usize>),
    Keep,
    /// Applied left to right, each on the previous result.
    Composite(Vec<Strategy>),
    /// Per-epoch choice.
    Schedule(Vec<(u32, Strategy)>),
}

impl Strategy {
    pub fn validate(&self) -> Result<(), StrategyError> {
        match self {
            Strategy::Compactness(g) if !(*g >= 0.0 && g.is_finite()) => {
                Err(StrategyError::InvalidParameter(format!("compactness factor {g} must be >= 0")))
            }
            Strategy::Separation(b) if !(*b > 0.0 && b.is_finite()) => {
                Err(StrategyError::InvalidParameter(format!("separation factor {b} must be > 0")))
            }
            Strategy::Merge(set) if set.len() < 2 => {
                Err(StrategyError::InvalidParameter("merge needs at least two classes".into()))
            }
            Strategy::Composite(parts) => parts.iter().try_for_each(Strategy::validate),
            Strategy::Schedule(entries) => entries.iter().try_for_each(|(_, s)| s.validate()),
            _ => Ok(()),
        }
    }

    /// Edited positions for the snapshot's points. `Keep` yields no edits;
    /// every other policy reports the final position of each point it touched.
    pub fn apply(&self, snapshot: &LatentSnapshot) -> Result<BTreeMap<PointId, [f32; 2]>, StrategyError> {
        if snapshot.points.is_empty() {
            return Err(StrategyError::EmptySnapshot);
        }
        let mut work = Working {
            labels: snapshot.points.iter().map(|p| p.label).collect(),
            pos: snapshot.points.iter().map(|p| [p.position[0] as f64, p.position[1] as f64]).collect(),
            touched: false,
        };
        self.apply_to(&mut work, snapshot.epoch)?;
        if !work.touched {
            return Ok(BTreeMap::new());
        }
        Ok(snapshot.points.iter().zip(&work.pos).map(|(p, q)| (p.point_id, [q[0] as f32, q[1] as f32])).collect())
    }

    fn apply_to(&self, w: &mut Working, epoch: u32) -> Result<(), StrategyError> {
        self.validate()?;
        match self {
            Strategy::Keep => {}
            Strategy::Compactness(gamma) => {
                let centers = w.centers();
                for (p, l) in w.pos.iter_mut().zip(&w.labels) {
                    let c = centers[l];
                    *p = [c[0] + gamma * (p[0] - c[0]), c[1] + gamma * (p[1] - c[1])];
                }
                w.touched = true;
            }
            Strategy::Separation(beta) => {
                let centers = w.centers();
                let g = mean_point(centers.values());
                let shifts: BTreeMap<usize, [f64; 2]> = centers
                    .iter()
                    .map(|(&c, m)| (c, [(beta - 1.0) * (m[0] - g[0]), (beta - 1.0) * (m[1] - g[1])]))
                    .collect();
                w.translate(&shifts);
            }
            Strategy::Merge(set) => {
                let centers = w.centers();
                if let Some(&missing) = set.iter().find(|c| !centers.contains_key(c)) {
                    return Err(StrategyError::MissingClass(missing));
                }
                let joint = mean_point(set.iter().map(|c| &centers[c]));
                let shifts: BTreeMap<usize, [f64; 2]> =
                    set.iter().map(|c| (*c, [joint[0] - centers[c][0], joint[1] - centers[c][1]])).collect();
                w.translate(&shifts);
            }
            Strategy::Composite(parts) => {
                for s in parts {
                    s.apply_to(w, epoch)?;
                }
            }
            Strategy::Schedule(entries) => {
                let (_, s) = entries.iter().find(|(e, _)| *e == epoch).ok_or(StrategyError::ScheduleGap(epoch))?;
                s.apply_to(w, epoch)?;
            }
        }
        Ok(())
    }

    /// The "do the exact opposite" variant: reciprocal factors.
    /// Composites and schedules invert component-wise.
    pub fn adversarial_invert(&self) -> Result<Strategy, StrategyError> {
        match self {
            Strategy::Compactness(g) if *g > 0.0 => Ok(Strategy::Compactness(1.0 / g)),
            Strategy::Separation(b) if *b > 0.0 => Ok(Strategy::Separation(1.0 / b)),
            Strategy::Composite(parts) => {
                Ok(Strategy::Composite(parts.iter().map(Strategy::adversarial_invert).collect::<Result<_, _>>()?))
            }
            Strategy::Schedule(entries) => Ok(Strategy::Schedule(
                entries.iter().map(|(e, s)| Ok((*e, s.adversarial_invert()?))).collect::<Result<_, StrategyError>>()?,
            )),
            other => Err(StrategyError::NotInvertible(other.to_string())),
        }
    }

    /// The study-analog default: tighten clusters, then push them apart.
    pub fn study_analog() -> Self {
        Strategy::Composite(alloc::vec![Strategy::Compactness(0.6), Strategy::Separation(1.5)])
    }
}

struct Working {
    labels: Vec<usize>,
    pos: Vec<[f64; 2]>,
    touched: bool,
}

impl Working {
    fn centers(&self) -> BTreeMap<usize, [f64; 2]> {
        let mut acc: BTreeMap<usize, ([f64; 2], usize)> = BTreeMap::new();
        for (p, &l) in self.pos.iter().zip(&self.labels) {
            let e = acc.entry(l).or_insert(([0.0, 0.0], 0));
            e.0[0] += p[0];
            e.0[1] += p[1];
            e.1 += 1;
        }
        acc.into_iter().map(|(c, (s, n))| (c, [s[0] / n as f64, s[1] / n as f64])).collect()
    }

    fn translate(&mut self, shifts: &BTreeMap<usize, [f64; 2]>) {
        for (p, l) in self.pos.iter_mut().zip(&self.labels) {
            if let Some(d) = shifts.get(l) {
                p[0] += d[0];
                p[1] += d[1];
            }
        }
        self.touched = true;
    }
}

fn mean_point<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> [f64; 2] {
    let (mut s, mut n) = ([0.0, 0.0], 0usize);
    for p in points {
        s[0] += p[0];
        s[1] += p[1];
        n += 1;
    }
    [s[0] / n as f64, s[1] / n as f64]
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Compactness(g) => write!(f, "compact:{g}"),
            Strategy::Separation(b) => write!(f, "sep:{b}"),
            Strategy::Merge(set) => {
                f.write_str("merge:")?;
                for (i, c) in set.iter().enumerate() {
                    if i > 0 {
                        f.write_str("/")?;
                    }
                    write!(f, "{c}")?;
                }
                Ok(())
            }
            Strategy::Keep => f.write_str("keep"),
            Strategy::Composite(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
            Strategy::Schedule(entries) => {
                for (i, (e, s)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(";")?;
                    }
                    write!(f, "{s}@{e}")?;
                }
                Ok(())
            }
        }
    }
}

/// A strategy with the epochs at which it is applied, as written on the
/// command line: `compact:0.6+sep:1.5@25,30,35,40`.
///
/// Grammar: segments separated by `;`, each `expr@e1,e2,...`; an expr is
/// terms joined by `+`; a term is `compact:G`, `sep:B`, `merge:a/b[/c...]`
/// or `keep`, optionally prefixed with `~` to invert it. Several segments
/// build a per-epoch schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub strategy: Strategy,
    pub epochs: Vec<u32>,
}

impl InterventionPlan {
    pub fn inverted(&self) -> Result<Self, StrategyError> {
        Ok(InterventionPlan { strategy: self.strategy.adversarial_invert()?, epochs: self.epochs.clone() })
    }
}

fn parse_error(input: &str, detail: impl Into<String>) -> StrategyError {
    StrategyError::Parse { input: input.to_string(), detail: detail.into() }
}

fn parse_term(term: &str) -> Result<Strategy, StrategyError> {
    let (invert, body) = match term.strip_prefix('~') {
        Some(rest) => (true, rest),
        None => (false, term),
    };
    let (name, param) = match body.split_once(':') {
        Some((n, p)) => (n.trim(), Some(p.trim())),
        None => (body.trim(), None),
    };
    let number = |p: Option<&str>| -> Result<f64, StrategyError> {
        let p = p.ok_or_else(|| parse_error(term, "missing parameter"))?;
        p.parse::<f64>().map_err(|_| parse_error(term, format!("`{p}` is not a number")))
    };
    let s = match name {
        "compact" | "compactness" => Strategy::Compactness(number(param)?),
        "sep" | "separation" => Strategy::Separation(number(param)?),
        "merge" => {
            let p = param.ok_or_else(|| parse_error(term, "missing class list"))?;
            let set = p
                .split('/')
                .map(|c| c.trim().parse::<usize>().map_err(|_| parse_error(term, format!("bad class `{c}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            Strategy::Merge(set)
        }
        "keep" if param.is_none() => Strategy::Keep,
        _ => return Err(parse_error(term, "unknown strategy")),
    };
    s.validate().map_err(|e| parse_error(term, e.to_string()))?;
    if invert {
        s.adversarial_invert()
    } else {
        Ok(s)
    }
}

fn parse_expr(expr: &str) -> Result<Strategy, StrategyError> {
    let mut terms = expr.split('+').map(str::trim).map(parse_term).collect::<Result<Vec<_>, _>>()?;
    Ok(if terms.len() == 1 { terms.pop().expect("one term") } else { Strategy::Composite(terms) })
}

impl FromStr for InterventionPlan {
    type Err = StrategyError;

    fn from_str(input: &str) -> Result<Self, Self::Err> {
        let mut segments = Vec::new();
        for seg in input.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (expr, epochs) = seg.split_once('@').ok_or_else(|| parse_error(seg, "missing '@epochs'"))?;
            let strategy = parse_expr(expr)?;
            let epochs = epochs
                .split(',')
                .map(|e| e.trim().parse::<u32>().map_err(|_| parse_error(seg, format!("bad epoch `{e}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            segments.push((strategy, epochs));
        }
        if segments.is_empty() {
            return Err(parse_error(input, "empty plan"));
        }
        let mut epochs: Vec<u32> = segments.iter().flat_map(|(_, e)| e.iter().copied()).collect();
        epochs.sort_unstable();
        if epochs.windows(2).any(|w| w[0] == w[1]) {
            return Err(parse_error(input, "an epoch is listed twice"));
        }
        let strategy = if segments.len() == 1 {
            segments.pop().expect("one segment").0
        } else {
            let mut entries: Vec<(u32, Strategy)> =
                segments.iter().flat_map(|(s, es)| es.iter().map(move |e| (*e, s.clone()))).collect();
            entries.sort_by_key(|(e, _)| *e);
            Strategy::Schedule(entries)
        };
        Ok(InterventionPlan { strategy, epochs })
    }
}

impl fmt::Display for InterventionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.strategy {
            Strategy::Schedule(entries) => {
                for (i, (e, s)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(";")?;
                    }
                    write!(f, "{s}@{e}")?;
                }
                Ok(())
            }
            s => {
                write!(f, "{s}@")?;
                for (i, e) in self.epochs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
        }
    }
}
