//! Segmentation metrics: MAE, max F-measure, S-/E-measure aggregation and mIoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Shape, Tensor};

pub const BETA2: f64 = 0.3;
pub const S_MEASURE_M: f64 = 0.5;
pub const UNIFORM_LEVELS: usize = 256;

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.channels() != 1 {
        return Err(Error::invalid(
            op,
            format!("prediction must have 1 channel, got {}", pred.shape()),
        ));
    }
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, pred.shape(), gt.shape()));
    }
    if pred.is_empty() {
        return Err(Error::invalid(op, "empty map"));
    }
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(
            op,
            format!("prediction value {v} outside [0, 1]"),
        ));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(
            op,
            format!("ground truth value {v} is not binary"),
        ));
    }
    Ok(())
}

/// Mean absolute error between a probability map and a binary mask.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// How binarization thresholds are chosen for the max-F and max-E sweeps.
/// A pixel is foreground at level `t` when `pred > t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Thresholds {
    /// `n` levels `k / (n - 1)`.
    Uniform(usize),
    /// Every distinct prediction value.
    Distinct,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Uniform(UNIFORM_LEVELS)
    }
}

impl Thresholds {
    /// Strictly increasing threshold levels for `pred`.
    pub fn levels(&self, pred: &Tensor) -> Result<Vec<f64>> {
        match *self {
            Thresholds::Uniform(n) => {
                if n < 2 {
                    return Err(Error::invalid(
                        "Thresholds",
                        format!("need at least 2 uniform levels, got {n}"),
                    ));
                }
                Ok((0..n).map(|k| k as f64 / (n - 1) as f64).collect())
            }
            Thresholds::Distinct => {
                let mut v = pred.data().to_vec();
                v.sort_by(f64::total_cmp);
                v.dedup();
                Ok(v)
            }
        }
    }
}

fn binarize(pred: &Tensor, level: f64) -> Vec<bool> {
    pred.data().iter().map(|&p| p > level).collect()
}

/// F-measure of a binary foreground against a binary mask; 0 when nothing is predicted.
pub fn f_measure(fg: &[bool], gt: &Tensor, beta2: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&f, &g) in fg.iter().zip(gt.data()) {
        match (f, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    (1.0 + beta2) * p * r / (beta2 * p + r)
}

/// Maximum F-measure over the threshold sweep.
pub fn f_measure_max(
    pred: &Tensor,
    gt: &Tensor,
    beta2: f64,
    thresholds: Thresholds,
) -> Result<f64> {
    check_pair("f_measure_max", pred, gt)?;
    if !(beta2 > 0.0 && beta2.is_finite()) {
        return Err(Error::invalid(
            "f_measure_max",
            format!("beta2 {beta2} must be positive"),
        ));
    }
    if gt.data().iter().all(|&g| g == 0.0) {
        return Err(Error::invalid(
            "f_measure_max",
            "ground truth has no foreground; recall is undefined",
        ));
    }
    let mut best = 0.0f64;
    for level in thresholds.levels(pred)? {
        best = best.max(f_measure(&binarize(pred, level), gt, beta2));
    }
    Ok(best)
}

/// `m * s_o + (1 - m) * s_r`.
pub fn s_measure(s_o: f64, s_r: f64, m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid("s_measure", format!("m {m} outside [0, 1]")));
    }
    for (name, v) in [("s_o", s_o), ("s_r", s_r)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(
                "s_measure",
                format!("{name} {v} outside [0, 1]"),
            ));
        }
    }
    Ok(m * s_o + (1.0 - m) * s_r)
}

/// Object-aware and region-aware structural similarity, supplied by the caller.
pub trait StructureSimilarity {
    fn object_aware(&self, pred: &Tensor, gt: &Tensor) -> Result<f64>;
    fn region_aware(&self, pred: &Tensor, gt: &Tensor) -> Result<f64>;
}

pub fn s_measure_with(
    pred: &Tensor,
    gt: &Tensor,
    m: f64,
    sim: &impl StructureSimilarity,
) -> Result<f64> {
    check_pair("s_measure", pred, gt)?;
    s_measure(sim.object_aware(pred, gt)?, sim.region_aware(pred, gt)?, m)
}

/// Per-pixel enhanced alignment score θ(ξ) of a binarized prediction against the mask.
pub trait Alignment {
    fn theta(&self, fg: &[bool], gt: &Tensor) -> Result<Vec<f64>>;
}

/// Maximum over thresholds of the mean alignment score.
pub fn e_measure_max(
    pred: &Tensor,
    gt: &Tensor,
    thresholds: Thresholds,
    align: &impl Alignment,
) -> Result<f64> {
    check_pair("e_measure_max", pred, gt)?;
    let mut best = f64::NEG_INFINITY;
    for level in thresholds.levels(pred)? {
        let theta = align.theta(&binarize(pred, level), gt)?;
        if theta.len() != pred.len() {
            return Err(Error::invalid(
                "e_measure_max",
                format!(
                    "alignment returned {} values for {} pixels",
                    theta.len(),
                    pred.len()
                ),
            ));
        }
        best = best.max(theta.iter().sum::<f64>() / theta.len() as f64);
    }
    Ok(best)
}

/// Class-index image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid(
                "LabelMap",
                format!("{} labels for a {height}×{width} map", labels.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    /// Foreground (1) where `prob > 0.5`, else background (0).
    pub fn from_probabilities(prob: &Tensor) -> Result<Self> {
        if prob.channels() != 1 {
            return Err(Error::invalid(
                "LabelMap",
                format!("expected 1 channel, got {}", prob.shape()),
            ));
        }
        let labels = prob.data().iter().map(|&p| (p > 0.5) as u32).collect();
        LabelMap::new(prob.height(), prob.width(), labels)
    }

    pub fn from_mask(mask: &Tensor) -> Result<Self> {
        LabelMap::from_probabilities(mask)
    }

    pub fn shape(&self) -> Shape {
        Shape::new(1, self.height, self.width)
    }
}

/// Mean IoU over the classes that occur in the ground truth or the prediction.
/// Pixels whose ground-truth label is `ignore_label` are skipped.
pub fn miou(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    ignore_label: Option<u32>,
) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("miou", pred.shape(), gt.shape()));
    }
    let valid = |l: u32| (l as usize) < num_classes || Some(l) == ignore_label;
    if let Some(l) = pred.labels.iter().chain(&gt.labels).find(|&&l| !valid(l)) {
        return Err(Error::invalid(
            "miou",
            format!("label {l} is neither < {num_classes} nor the ignore label"),
        ));
    }
    let mut inter = vec![0usize; num_classes];
    let mut in_pred = vec![0usize; num_classes];
    let mut in_gt = vec![0usize; num_classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if Some(g) == ignore_label {
            continue;
        }
        in_gt[g as usize] += 1;
        if Some(p) != ignore_label {
            in_pred[p as usize] += 1;
            if p == g {
                inter[p as usize] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let union = in_pred[c] + in_gt[c] - inter[c];
        if union > 0 {
            sum += inter[c] as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::invalid("miou", "no labelled pixels"));
    }
    Ok(sum / present as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub thresholds: Thresholds,
    pub beta2: f64,
    pub m: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            thresholds: Thresholds::default(),
            beta2: BETA2,
            m: S_MEASURE_M,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub f_beta_max: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_measure: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub e_measure_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    pub config: MetricsConfig,
}

impl MetricsReport {
    /// MAE, max F and two-class mIoU of a probability map against a binary mask.
    pub fn binary(pred: &Tensor, gt: &Tensor, config: MetricsConfig) -> Result<Self> {
        let mae = mae(pred, gt)?;
        let f_beta_max = f_measure_max(pred, gt, config.beta2, config.thresholds)?;
        let miou = miou(
            &LabelMap::from_probabilities(pred)?,
            &LabelMap::from_mask(gt)?,
            2,
            None,
        )?;
        Ok(MetricsReport {
            mae,
            f_beta_max,
            s_measure: None,
            e_measure_max: None,
            miou: Some(miou),
            config,
        })
    }

    /// Per-field mean over `reports`, in order; an optional field is kept only if every report has it.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::invalid("MetricsReport::mean", "no reports"))?;
        if reports.iter().any(|r| r.config != first.config) {
            return Err(Error::invalid(
                "MetricsReport::mean",
                "reports use different metric settings",
            ));
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            reports
                .iter()
                .map(f)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n)
        };
        Ok(MetricsReport {
            mae: avg(&|r| r.mae),
            f_beta_max: avg(&|r| r.f_beta_max),
            s_measure: avg_opt(&|r| r.s_measure),
            e_measure_max: avg_opt(&|r| r.e_measure_max),
            miou: avg_opt(&|r| r.miou),
            config: first.config.clone(),
        })
    }
}
