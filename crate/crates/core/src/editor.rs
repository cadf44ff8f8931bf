//! Query construction and conditioned style interpolation.
//!
//! A local edit transfers the appearance of one part from a reference image
//! to a target image by mixing their per-layer styles channel by channel:
//!
//! ```text
//! sigma_G = sigma_S + diag(q) · (sigma_R - sigma_S),   q ∈ [0, 1]^C
//! ```
//!
//! `q` comes from the part's attribution row at that layer, either by
//! scaling it (`q = min(1, λ·M)`) or by the budgeted greedy fill in
//! [`query_sequential`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, LocalityReport, MetricsError, RoiMask};
use crate::minigen::{Generator, GeneratorError, RenderResult, StyleSet};
use crate::semantics::{SemanticCatalog, SemanticsError};

pub const DEFAULT_RHO_RATIO: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 40.0;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter {field}: {message}")]
    InvalidParams { field: &'static str, message: String },
    #[error("unknown part {0:?}")]
    UnknownPart(String),
    #[error("no attribution for layer {0}")]
    MissingLayerAttribution(usize),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Semantics(SemanticsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<SemanticsError> for EditError {
    fn from(e: SemanticsError) -> Self {
        match e {
            SemanticsError::UnknownPart(p) => EditError::UnknownPart(p),
            SemanticsError::MissingLayerAttribution(l) => EditError::MissingLayerAttribution(l),
            other => EditError::Semantics(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, EditError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Global,
    Simultaneous,
    Sequential,
}

impl std::fmt::Display for EditMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EditMode::Global => "global",
            EditMode::Simultaneous => "simultaneous",
            EditMode::Sequential => "sequential",
        })
    }
}

impl std::str::FromStr for EditMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global" => Ok(EditMode::Global),
            "simultaneous" => Ok(EditMode::Simultaneous),
            "sequential" => Ok(EditMode::Sequential),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EditParams {
    /// Uniform interpolation, `q = λ` everywhere.
    Global { lambda: f64 },
    /// `q = min(1, λ·M)`.
    Simultaneous { lambda: f64 },
    /// Greedy fill under an out-of-ROI budget.
    Sequential { epsilon: f64, rho_ratio: f64 },
}

impl EditParams {
    pub fn sequential(epsilon: f64) -> Self {
        EditParams::Sequential {
            epsilon,
            rho_ratio: DEFAULT_RHO_RATIO,
        }
    }

    pub fn mode(&self) -> EditMode {
        match self {
            EditParams::Global { .. } => EditMode::Global,
            EditParams::Simultaneous { .. } => EditMode::Simultaneous,
            EditParams::Sequential { .. } => EditMode::Sequential,
        }
    }

    /// λ for the interpolating modes, ε for the sequential one.
    pub fn strength(&self) -> f64 {
        match *self {
            EditParams::Global { lambda } | EditParams::Simultaneous { lambda } => lambda,
            EditParams::Sequential { epsilon, .. } => epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |field, message: &str| {
            Err(EditError::InvalidParams {
                field,
                message: message.to_string(),
            })
        };
        match *self {
            EditParams::Global { lambda } => {
                if !(0.0..=1.0).contains(&lambda) {
                    return invalid("lambda", "must lie in [0, 1]");
                }
            }
            EditParams::Simultaneous { lambda } => {
                if !(lambda.is_finite() && lambda >= 0.0) {
                    return invalid("lambda", "must be finite and non-negative");
                }
            }
            EditParams::Sequential { epsilon, rho_ratio } => {
                if !(epsilon.is_finite() && epsilon >= 0.0) {
                    return invalid("epsilon", "must be finite and non-negative");
                }
                if !(0.0..1.0).contains(&rho_ratio) {
                    return invalid("rho_ratio", "must lie in [0, 1)");
                }
            }
        }
        Ok(())
    }
}

/// Diagonal of the interpolation matrix for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVector {
    pub layer_id: usize,
    pub q: Vec<f64>,
}

impl QueryVector {
    pub fn support(&self) -> Vec<usize> {
        self.q
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Out-of-ROI cost `Σ q_c (1 − M_c)`.
    pub fn budget_used(&self, m_row: &[f32]) -> f64 {
        self.q.iter().zip(m_row).map(|(q, &m)| q * (1.0 - m as f64)).sum()
    }
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(EditError::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

#[inline]
fn lerp(s: f32, r: f32, q: f64) -> f32 {
    // endpoints are exact: q = 0 gives s, q = 1 gives r
    ((1.0 - q) * s as f64 + q * r as f64) as f32
}

/// `sigma_S + λ (sigma_R − sigma_S)`.
pub fn interpolate_global(sigma_s: &[f32], sigma_r: &[f32], lambda: f64) -> Result<Vec<f32>> {
    check_lengths(sigma_s.len(), sigma_r.len(), "style lengths")?;
    Ok(sigma_s.iter().zip(sigma_r).map(|(&s, &r)| lerp(s, r, lambda)).collect())
}

/// `sigma_S + diag(q) (sigma_R − sigma_S)`.
pub fn interpolate_conditioned(sigma_s: &[f32], sigma_r: &[f32], q: &[f64]) -> Result<Vec<f32>> {
    check_lengths(sigma_s.len(), sigma_r.len(), "style lengths")?;
    check_lengths(sigma_s.len(), q.len(), "query length")?;
    Ok(sigma_s
        .iter()
        .zip(sigma_r)
        .zip(q)
        .map(|((&s, &r), &q)| lerp(s, r, q))
        .collect())
}

/// `q_c = min(1, λ·M_c)`.
pub fn query_simultaneous(m_row: &[f32], lambda: f64) -> Vec<f64> {
    m_row.iter().map(|&m| (lambda * m as f64).min(1.0)).collect()
}

/// Greedy budgeted query.
///
/// Channels with `M_c > rho_ratio` are visited by decreasing `M_c` (ties by
/// index) and set to 1 while the out-of-ROI cost `Σ q_c (1 − M_c)` stays
/// within `epsilon`. The first channel that would overflow gets the leftover
/// budget as a fractional weight; everything after it stays 0.
pub fn query_sequential(m_row: &[f32], epsilon: f64, rho_ratio: f64) -> Vec<f64> {
    let mut q = vec![0.0; m_row.len()];
    // compared at the attribution's own precision so M = 0.1 is excluded at ρ = 0.1
    let rho = rho_ratio as f32;
    let mut order: Vec<usize> = (0..m_row.len()).filter(|&c| m_row[c] > rho).collect();
    order.sort_by(|&a, &b| m_row[b].total_cmp(&m_row[a]).then(a.cmp(&b)));

    let mut cost = 0.0f64;
    for c in order {
        let weight = 1.0 - m_row[c] as f64;
        if cost + weight <= epsilon {
            q[c] = 1.0;
            cost += weight;
        } else {
            q[c] = ((epsilon - cost) / weight).clamp(0.0, 1.0);
            break;
        }
    }
    q
}

/// Where a style comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StyleSource {
    Seed(u64),
    Styles(StyleSet),
}

impl StyleSource {
    pub fn resolve(&self, generator: &Generator) -> Result<StyleSet> {
        match self {
            StyleSource::Seed(seed) => Ok(generator.styles_for_seed(*seed)),
            StyleSource::Styles(s) => {
                generator.check_styles(s)?;
                Ok(s.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub target: StyleSource,
    pub reference: StyleSource,
    pub part_id: usize,
    pub params: EditParams,
    /// Layers to edit; `None` edits every styled layer.
    pub layers: Option<BTreeSet<usize>>,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub edited: RenderResult,
    pub target: RenderResult,
    pub reference: RenderResult,
    pub edited_styles: StyleSet,
    pub queries: BTreeMap<usize, QueryVector>,
}

/// Query for one layer under the given parameters.
pub fn build_query(params: &EditParams, m_row: &[f32]) -> Vec<f64> {
    match *params {
        EditParams::Global { lambda } => vec![lambda; m_row.len()],
        EditParams::Simultaneous { lambda } => query_simultaneous(m_row, lambda),
        EditParams::Sequential { epsilon, rho_ratio } => query_sequential(m_row, epsilon, rho_ratio),
    }
}

/// Run one local edit. The same parameters apply independently at every
/// edited layer, each with that layer's part attribution row.
pub fn edit(request: &EditRequest, catalog: &SemanticCatalog, generator: &Generator) -> Result<EditOutcome> {
    request.params.validate()?;
    catalog.part(request.part_id)?;
    let sigma_s = request.target.resolve(generator)?;
    let sigma_r = request.reference.resolve(generator)?;

    let mut edited_styles = sigma_s.clone();
    let mut queries = BTreeMap::new();
    for l in 0..generator.num_layers() {
        if request.layers.as_ref().is_some_and(|f| !f.contains(&l)) {
            continue;
        }
        let m_row = catalog.part_attribution(request.part_id, l)?;
        check_lengths(m_row.len(), sigma_s.sigma[l].len(), "attribution row vs style")?;
        let q = build_query(&request.params, &m_row);
        edited_styles.sigma[l] = interpolate_conditioned(&sigma_s.sigma[l], &sigma_r.sigma[l], &q)?;
        queries.insert(l, QueryVector { layer_id: l, q });
    }

    let capture: BTreeSet<usize> = [catalog.base_layer_id].into();
    Ok(EditOutcome {
        edited: generator.synthesize(&edited_styles, &capture)?,
        target: generator.synthesize(&sigma_s, &capture)?,
        reference: generator.synthesize(&sigma_r, &capture)?,
        edited_styles,
        queries,
    })
}

/// ROI of the part in the target image and the In/Out-MSE of the edit.
pub fn evaluate_locality(
    outcome: &EditOutcome,
    catalog: &SemanticCatalog,
    part_id: usize,
) -> Result<(RoiMask, LocalityReport)> {
    let part = catalog.part(part_id)?;
    let base = outcome
        .target
        .captures
        .get(&catalog.base_layer_id)
        .ok_or(EditError::MissingLayerAttribution(catalog.base_layer_id))?;
    let u = catalog.membership_for(base)?;
    let img = &outcome.target.image;
    let mask = metrics::roi_mask(&u, 0, &part.members, part_id, img.height(), img.width())?;
    let report = metrics::locality(img, &outcome.edited.image, &mask)?;
    Ok((mask, report))
}

/// A target/reference pair and the part whose appearance is transferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPair {
    pub pair_id: usize,
    pub target_seed: u64,
    pub reference_seed: u64,
    pub part_id: usize,
}

/// Smallest and largest ROI fraction accepted by [`plan_pairs`].
pub const ROI_FRACTION_RANGE: (f64, f64) = (0.02, 0.6);

/// Deterministic edit pairs. Pair `i` uses seeds `first_seed + 2i` and
/// `first_seed + 2i + 1`; its part is the first one, cycling from `i`, whose
/// ROI in the target falls inside [`ROI_FRACTION_RANGE`].
pub fn plan_pairs(
    catalog: &SemanticCatalog,
    generator: &Generator,
    n: usize,
    first_seed: u64,
) -> Result<Vec<EditPair>> {
    if catalog.parts.is_empty() {
        return Err(EditError::UnknownPart("catalog has no parts".into()));
    }
    let capture: BTreeSet<usize> = [catalog.base_layer_id].into();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let target_seed = first_seed + 2 * i as u64;
        let render = generator.render_seed(target_seed, &capture);
        let u = catalog.membership_for(&render.captures[&catalog.base_layer_id])?;
        let (h, w) = (render.image.height(), render.image.width());
        let np = catalog.parts.len();
        let mut chosen = catalog.parts[i % np].id;
        for j in 0..np {
            let part = &catalog.parts[(i + j) % np];
            let mask = metrics::roi_mask(&u, 0, &part.members, part.id, h, w)?;
            let frac = mask.area() as f64 / (h * w) as f64;
            if (ROI_FRACTION_RANGE.0..=ROI_FRACTION_RANGE.1).contains(&frac) {
                chosen = part.id;
                break;
            }
        }
        pairs.push(EditPair {
            pair_id: i,
            target_seed,
            reference_seed: target_seed + 1,
            part_id: chosen,
        });
    }
    Ok(pairs)
}

/// Locality of one pair under one parameter setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: EditMode,
    pub strength: f64,
    pub pair_id: usize,
    pub part_id: usize,
    pub report: LocalityReport,
    pub queries: BTreeMap<usize, QueryVector>,
}

/// Evaluate every pair under every parameter setting. Target renders and
/// ROIs are computed once per pair. Rows come out grouped by setting, in the
/// order given.
pub fn sweep(
    catalog: &SemanticCatalog,
    generator: &Generator,
    pairs: &[EditPair],
    settings: &[EditParams],
) -> Result<Vec<SweepRow>> {
    for p in settings {
        p.validate()?;
    }
    let capture: BTreeSet<usize> = [catalog.base_layer_id].into();
    let none = BTreeSet::new();
    struct Prepared {
        sigma_s: StyleSet,
        sigma_r: StyleSet,
        target: RenderResult,
        mask: RoiMask,
        rows: BTreeMap<usize, Vec<f32>>,
    }
    let prepared = pairs
        .iter()
        .map(|pair| {
            let part = catalog.part(pair.part_id)?;
            let sigma_s = generator.styles_for_seed(pair.target_seed);
            let sigma_r = generator.styles_for_seed(pair.reference_seed);
            let target = generator.synthesize(&sigma_s, &capture)?;
            let u = catalog.membership_for(&target.captures[&catalog.base_layer_id])?;
            let (h, w) = (target.image.height(), target.image.width());
            let mask = metrics::roi_mask(&u, 0, &part.members, part.id, h, w)?;
            let rows = (0..generator.num_layers())
                .map(|l| Ok((l, catalog.part_attribution(part.id, l)?)))
                .collect::<Result<_>>()?;
            Ok(Prepared {
                sigma_s,
                sigma_r,
                target,
                mask,
                rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(pairs.len() * settings.len());
    for params in settings {
        for (pair, prep) in pairs.iter().zip(&prepared) {
            let mut styles = prep.sigma_s.clone();
            let mut queries = BTreeMap::new();
            for (&l, m_row) in &prep.rows {
                let q = build_query(params, m_row);
                styles.sigma[l] = interpolate_conditioned(&prep.sigma_s.sigma[l], &prep.sigma_r.sigma[l], &q)?;
                queries.insert(l, QueryVector { layer_id: l, q });
            }
            let edited = generator.synthesize(&styles, &none)?;
            out.push(SweepRow {
                mode: params.mode(),
                strength: params.strength(),
                pair_id: pair.pair_id,
                part_id: pair.part_id,
                report: metrics::locality(&prep.target.image, &edited.image, &prep.mask)?,
                queries,
            });
        }
    }
    Ok(out)
}

/// Mean In-MSE and Out-MSE over rows where both sides are defined.
pub fn mean_locality<'a>(rows: impl IntoIterator<Item = &'a SweepRow>) -> Option<(f64, f64)> {
    let (mut sin, mut sout, mut n) = (0.0, 0.0, 0usize);
    for r in rows {
        if let (Some(i), Some(o)) = (r.report.in_mse, r.report.out_mse) {
            sin += i;
            sout += o;
            n += 1;
        }
    }
    (n > 0).then(|| (sin / n as f64, sout / n as f64))
}
