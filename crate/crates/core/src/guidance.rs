//! Teacher signal from edited layouts and the composite training loss.
//!
//! An edited 2D layout is summarized as per-class target centers `t_c`,
//! target spreads `rho_c` and pairwise center distances `delta_ij`. During a
//! batch, with `mu_c` / `r_c` the center and mean distance-to-center of the
//! class-`c` projections:
//!
//! ```text
//! T_center = mean_c ||mu_c - t_c||^2                  over classes in the batch
//! T_spread = mean_c (r_c - rho_c)^2                   over classes with >= 2 samples
//! T_sep    = (1/K) sum_{i<j} (||mu_i - mu_j|| - delta_ij)^2,  K = n(n-1)/2
//! L_human  = w_center T_center + w_spread T_spread + w_sep T_sep
//! L_global = alpha L_CE + (1 - alpha) L_human + lambda |1 - scale_model|
//! ```
//!
//! `scale_model` is the pooled population std of the batch projections
//! divided by the projector's freeze-time reference. Without an active
//! layout the loss is plain cross-entropy.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Var};
use crate::projection::pooled_std;
use crate::snapshot::{LatentSnapshot, PointId};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidanceError {
    #[error("no active layout")]
    NoActiveLayout,
    #[error("batch contains no class covered by the layout")]
    NoClassesInBatch,
    #[error("unknown point id {0}")]
    UnknownPoint(PointId),
    #[error("snapshot has no points")]
    EmptySnapshot,
    #[error("scale needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("no reference scale: projector not frozen yet")]
    MissingReferenceScale,
    #[error("invalid guidance config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: usize,
    pub center: [f64; 2],
    /// Absent for classes with a single point.
    pub spread: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Sorted by class index.
    pub classes: Vec<ClassStat>,
}

impl ClassStats {
    pub fn get(&self, class: usize) -> Option<&ClassStat> {
        self.classes.iter().find(|s| s.class == class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub center: f64,
    pub spread: f64,
    pub separation: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights { center: 1.0, spread: 1.0, separation: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub lambda: f64,
    #[serde(default)]
    pub weights: TermWeights,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { alpha: 0.5, lambda: 0.1, weights: TermWeights::default() }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: &str| Err(GuidanceError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        let w = self.weights;
        if [w.center, w.spread, w.separation].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("term weights must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTarget {
    pub class: usize,
    pub center: [f64; 2],
    pub spread: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

/// The committed teacher signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetLayout {
    pub layout_id: u64,
    pub committed_epoch: u32,
    pub targets: Vec<ClassTarget>,
    /// One entry per class pair `i < j`, derived from `targets`.
    pub separations: Vec<Separation>,
    /// `"human"` or the name of the scripted strategy.
    pub source: String,
}

/// `||a - b||` evaluated with the same single-precision arithmetic the
/// training graph uses, so derived separations are exact fixed points.
fn center_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::from_f64(&[2], &a).expect("point"));
    let b = g.input(Tensor::from_f64(&[2], &b).expect("point"));
    let d = g.sub(a, b).expect("same shape");
    let n = g.norm_last(d);
    g.value(n).item() as f64
}

impl TargetLayout {
    pub fn new(layout_id: u64, committed_epoch: u32, mut targets: Vec<ClassTarget>, source: &str) -> Self {
        targets.sort_by_key(|t| t.class);
        let separations = Self::derive_separations(&targets);
        TargetLayout { layout_id, committed_epoch, targets, separations, source: source.to_string() }
    }

    fn derive_separations(targets: &[ClassTarget]) -> Vec<Separation> {
        let mut out = Vec::with_capacity(targets.len() * targets.len().saturating_sub(1) / 2);
        for (a, ta) in targets.iter().enumerate() {
            for tb in &targets[a + 1..] {
                out.push(Separation { i: ta.class, j: tb.class, distance: center_distance(ta.center, tb.center) });
            }
        }
        out
    }

    pub fn target(&self, class: usize) -> Option<&ClassTarget> {
        self.targets.iter().find(|t| t.class == class)
    }

    pub fn separation(&self, i: usize, j: usize) -> Option<f64> {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.separations.iter().find(|s| s.i == i && s.j == j).map(|s| s.distance)
    }

    /// True when the stored separations match the ones derived from the targets.
    pub fn is_consistent(&self) -> bool {
        self.separations == Self::derive_separations(&self.targets)
    }
}

struct ClassNodes {
    class: usize,
    count: usize,
    center: Var,
    spread: Option<Var>,
}

fn group_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

/// Per-class center and spread nodes for the classes present in `labels`.
fn class_geometry<T: Real>(
    g: &mut Graph<T>,
    p: Var,
    labels: &[usize],
    keep: impl Fn(usize) -> bool,
) -> Result<Vec<ClassNodes>, DiffError> {
    let mut out = Vec::new();
    for (class, idx) in group_by_class(labels) {
        if !keep(class) {
            continue;
        }
        let pts = g.gather_rows(p, &idx)?;
        let center = g.mean_rows(pts);
        let spread = if idx.len() >= 2 {
            let offsets = g.sub(pts, center)?;
            let dist = g.norm_last(offsets);
            Some(g.mean(dist))
        } else {
            None
        };
        out.push(ClassNodes { class, count: idx.len(), center, spread });
    }
    Ok(out)
}

/// Centers, spreads and counts of each class present in `p` (`[B, 2]`).
pub fn batch_class_stats<T: Real>(p: &Tensor<T>, labels: &[usize]) -> Result<ClassStats, GuidanceError> {
    let mut g = Graph::new();
    let pv = g.input(p.clone());
    let nodes = class_geometry(&mut g, pv, labels, |_| true)?;
    let classes = nodes
        .iter()
        .map(|n| {
            let c = g.value(n.center).data();
            ClassStat {
                class: n.class,
                center: [c[0].f64(), c[1].f64()],
                spread: n.spread.map(|s| g.value(s).item().f64()),
                count: n.count,
            }
        })
        .collect();
    Ok(ClassStats { classes })
}

/// Builds a layout from a snapshot with some points moved. Unedited points
/// keep their snapshot positions; singleton classes get target spread 0.
pub fn commit_layout(
    edits: &BTreeMap<PointId, [f32; 2]>,
    base: &LatentSnapshot,
    source: &str,
    layout_id: u64,
) -> Result<TargetLayout, GuidanceError> {
    if base.points.is_empty() {
        return Err(GuidanceError::EmptySnapshot);
    }
    if let Some(&id) = edits.keys().find(|id| base.point(**id).is_none()) {
        return Err(GuidanceError::UnknownPoint(id));
    }
    let mut data = Vec::with_capacity(base.points.len() * 2);
    for pt in &base.points {
        let pos = edits.get(&pt.point_id).copied().unwrap_or(pt.position);
        data.extend_from_slice(&pos);
    }
    let positions = Tensor::new(vec![base.points.len(), 2], data)?;
    let stats = batch_class_stats(&positions, &base.labels())?;
    let targets = stats
        .classes
        .iter()
        .map(|s| ClassTarget { class: s.class, center: s.center, spread: s.spread.unwrap_or(0.0) })
        .collect();
    Ok(TargetLayout::new(layout_id, base.epoch, targets, source))
}

/// Unweighted term values of one `L_human` evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HumanTerms {
    pub center: f64,
    pub spread: f64,
    pub separation: f64,
    pub total: f64,
}

fn constant<T: Real>(g: &mut Graph<T>, values: &[f64]) -> Var {
    g.input(Tensor::from_f64(&[values.len()], values).expect("constant"))
}

fn mean_of<T: Real>(g: &mut Graph<T>, parts: &[Var]) -> Result<Option<Var>, DiffError> {
    if parts.is_empty() {
        return Ok(None);
    }
    let all = g.concat(parts, 0)?;
    Ok(Some(g.mean(all)))
}

/// `L_human` on the batch projections `p` (`[B, 2]`). Classes absent from
/// the layout are ignored.
pub fn human_loss<T: Real>(
    g: &mut Graph<T>,
    p: Var,
    labels: &[usize],
    layout: &TargetLayout,
    weights: &TermWeights,
) -> Result<(Var, HumanTerms), GuidanceError> {
    let nodes = class_geometry(g, p, labels, |c| layout.target(c).is_some())?;
    if nodes.is_empty() {
        return Err(GuidanceError::NoClassesInBatch);
    }
    let mut center_parts = Vec::with_capacity(nodes.len());
    let mut spread_parts = Vec::new();
    for n in &nodes {
        let t = layout.target(n.class).expect("filtered");
        let tc = constant(g, &t.center);
        let d = g.sq_diff(n.center, tc)?;
        center_parts.push(g.sum(d));
        if let Some(r) = n.spread {
            let rho = constant(g, &[t.spread]);
            spread_parts.push(g.sq_diff(r, rho)?);
        }
    }
    let mut sep_parts = Vec::new();
    for (a, na) in nodes.iter().enumerate() {
        for nb in &nodes[a + 1..] {
            let delta = layout.separation(na.class, nb.class).expect("pair of layout classes");
            let diff = g.sub(na.center, nb.center)?;
            let dist = g.norm_last(diff);
            let target = constant(g, &[delta]);
            sep_parts.push(g.sq_diff(dist, target)?);
        }
    }
    let t_center = mean_of(g, &center_parts)?.expect("non-empty");
    let t_spread = mean_of(g, &spread_parts)?;
    // mean over the K_B = n(n-1)/2 pairs present
    let t_sep = mean_of(g, &sep_parts)?;

    let mut total = g.scale(t_center, weights.center);
    let mut terms = HumanTerms { center: g.value(t_center).item().f64(), ..HumanTerms::default() };
    if let Some(s) = t_spread {
        terms.spread = g.value(s).item().f64();
        let w = g.scale(s, weights.spread);
        total = g.add(total, w)?;
    }
    if let Some(s) = t_sep {
        terms.separation = g.value(s).item().f64();
        let w = g.scale(s, weights.separation);
        total = g.add(total, w)?;
    }
    terms.total = g.value(total).item().f64();
    Ok((total, terms))
}

/// `scale_model = pooled_std(p) / sigma_ref` and `lambda * |1 - scale_model|`.
/// The absolute value uses subgradient 0 at its kink.
pub fn scale_penalty<T: Real>(
    g: &mut Graph<T>,
    p: Var,
    sigma_ref: f64,
    lambda: f64,
) -> Result<(Var, Var), GuidanceError> {
    if !(sigma_ref > 0.0) {
        return Err(GuidanceError::MissingReferenceScale);
    }
    let n = g.value(p).numel();
    let rows = g.value(p).rows();
    if rows < 2 {
        return Err(GuidanceError::TooFewPoints(rows));
    }
    let flat = g.reshape(p, &[n, 1])?;
    let mean = g.mean(flat);
    let dev = g.sq_diff(flat, mean)?;
    let var = g.mean(dev);
    let std = g.sqrt(var);
    let scale_model = g.scale(std, 1.0 / sigma_ref);
    let gap = g.add_scalar(scale_model, -1.0);
    let gap = g.abs(gap);
    Ok((scale_model, g.scale(gap, lambda)))
}

/// Loss values of one evaluation of [`global_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_human: f64,
    pub center_term: f64,
    pub spread_term: f64,
    pub separation_term: f64,
    pub scale_model: f64,
    pub scale_penalty: f64,
    pub l_global: f64,
}

/// Full training objective. With `layout = None` the returned node is the
/// cross-entropy node itself; `scale_model` is still reported (as a plain
/// value) once a reference scale exists.
#[allow(clippy::too_many_arguments)]
pub fn global_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    p: Var,
    layout: Option<&TargetLayout>,
    cfg: &GuidanceConfig,
    sigma_ref: Option<f64>,
) -> Result<(Var, LossBreakdown), GuidanceError> {
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let l_ce = g.value(ce).item().f64();
    let Some(layout) = layout else {
        let scale_model = match sigma_ref {
            Some(s) if g.value(p).rows() >= 2 => pooled_std(g.value(p)) / s,
            _ => 0.0,
        };
        let b = LossBreakdown { l_ce, l_global: l_ce, scale_model, ..LossBreakdown::default() };
        return Ok((ce, b));
    };
    let sigma_ref = sigma_ref.ok_or(GuidanceError::MissingReferenceScale)?;
    let (human, terms) = human_loss(g, p, labels, layout, &cfg.weights)?;
    let (scale_model, penalty) = scale_penalty(g, p, sigma_ref, cfg.lambda)?;
    let a = g.scale(ce, cfg.alpha);
    let h = g.scale(human, 1.0 - cfg.alpha);
    let total = g.add(a, h)?;
    let total = g.add(total, penalty)?;
    let b = LossBreakdown {
        l_ce,
        l_human: terms.total,
        center_term: terms.center,
        spread_term: terms.spread,
        separation_term: terms.separation,
        scale_model: g.value(scale_model).item().f64(),
        scale_penalty: g.value(penalty).item().f64(),
        l_global: g.value(total).item().f64(),
    };
    Ok((total, b))
}
