//! Evaluation metrics for the angle and box tasks.
//!
//! Invalid responses are excluded from MAE, geodesic error and box accuracy
//! and counted separately in the invalid-answer ratios. Any metric over an
//! empty set is reported as [`Metric::Undefined`], never zero or NaN.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::responses::{BBox, EulerTriple};

/// Front/back boundary on ground-truth |yaw|, inclusive on the front side.
pub const FRONT_MAX_YAW: f64 = 90.0;
pub const IOU_THRESHOLD: f64 = 0.5;
const ORTHONORMAL_TOL: f64 = 1e-4;

/// Wrap-aware |a - b| in `[0, 180]`.
pub fn circular_abs_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRecord {
    /// `None` when the response was invalid.
    pub pred: Option<EulerTriple>,
    pub gt: EulerTriple,
}

impl AngleRecord {
    pub fn valid(pred: EulerTriple, gt: EulerTriple) -> Self {
        Self { pred: Some(pred), gt }
    }

    pub fn invalid(gt: EulerTriple) -> Self {
        Self { pred: None, gt }
    }

    pub fn is_valid(&self) -> bool {
        self.pred.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleMae {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub mean: f64,
    pub n: usize,
}

/// Per-angle circular MAE over valid records; `None` when there are none.
pub fn circular_mae(records: &[AngleRecord]) -> Option<AngleMae> {
    let mut sums = [0f64; 3];
    let mut n = 0usize;
    for r in records {
        let Some(pred) = r.pred else { continue };
        let (p, g) = (pred.as_array(), r.gt.as_array());
        for axis in 0..3 {
            sums[axis] += circular_abs_diff(p[axis], g[axis]);
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let [yaw, pitch, roll] = sums.map(|s| s / n as f64);
    Some(AngleMae {
        yaw,
        pitch,
        roll,
        mean: (yaw + pitch + roll) / 3.0,
        n,
    })
}

/// Axis assignment for Euler angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EulerConvention {
    /// Intrinsic yaw about z, then pitch about y, then roll about x:
    /// `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    #[default]
    Zyx,
    /// Pitch about x, yaw about y, roll about z:
    /// `R = Rx(pitch) Ry(yaw) Rz(roll)`.
    Xyz,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn rot_x(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_y(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn rot_z(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self(out)
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self(std::array::from_fn(|i| std::array::from_fn(|j| m[j][i])))
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max-abs entry of `RᵀR - I`, plus `|det - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.transpose().mul(self);
        let mut worst = (self.det() - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.0[i][j] - target).abs());
            }
        }
        if worst.is_nan() {
            f64::INFINITY
        } else {
            worst
        }
    }
}

pub fn euler_to_rotmat(t: &EulerTriple, convention: EulerConvention) -> RotationMatrix {
    match convention {
        EulerConvention::Zyx => RotationMatrix::rot_z(t.yaw)
            .mul(&RotationMatrix::rot_y(t.pitch))
            .mul(&RotationMatrix::rot_x(t.roll)),
        EulerConvention::Xyz => RotationMatrix::rot_x(t.pitch)
            .mul(&RotationMatrix::rot_y(t.yaw))
            .mul(&RotationMatrix::rot_z(t.roll)),
    }
}

/// Angle of the relative rotation `r1ᵀ r2`, in degrees.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr - 1) / 2` and
/// `sin θ` from the skew-symmetric part, which equals the arccos form but
/// stays accurate near 0° and 180°.
pub fn geodesic_error(r1: &RotationMatrix, r2: &RotationMatrix) -> Result<f64> {
    for r in [r1, r2] {
        let err = r.orthonormality_error();
        if err > ORTHONORMAL_TOL {
            return Err(Error::NotOrthonormal(err));
        }
    }
    let m = r1.transpose().mul(r2).0;
    let cos = ((m[0][0] + m[1][1] + m[2][2]) - 1.0) / 2.0;
    let axis = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    let sin = axis.iter().map(|v| v * v).sum::<f64>().sqrt() / 2.0;
    Ok(sin.atan2(cos.clamp(-1.0, 1.0)).to_degrees().clamp(0.0, 180.0))
}

fn check_box(b: &BBox) -> Result<()> {
    if b.x1 > b.x0 && b.y1 > b.y0 {
        Ok(())
    } else {
        Err(Error::DegenerateBox(b.as_array()))
    }
}

fn area(b: &BBox) -> i64 {
    (b.x1 - b.x0) * (b.y1 - b.y0)
}

/// Intersection over union with half-open pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0);
    let inter = w * h;
    Ok(inter as f64 / (area(a) + area(b) - inter) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBoxEvalRecord {
    pub pred: Option<BBox>,
    pub gt: BBox,
}

/// Accurate (IoU strictly above 0.5) over valid predictions.
pub fn bbox_accuracy(records: &[BBoxEvalRecord]) -> Result<Option<f64>> {
    let (hits, valid) = bbox_hits(records)?;
    Ok((valid > 0).then(|| hits as f64 / valid as f64))
}

fn bbox_hits(records: &[BBoxEvalRecord]) -> Result<(usize, usize)> {
    let mut hits = 0;
    let mut valid = 0;
    for r in records {
        let Some(pred) = r.pred else { continue };
        valid += 1;
        if iou(&pred, &r.gt)? > IOU_THRESHOLD {
            hits += 1;
        }
    }
    Ok((hits, valid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidityCounts {
    pub e_angle: u64,
    pub t_angle: u64,
    pub e_bbox: u64,
    pub t_bbox: u64,
}

fn ratio(e: u64, t: u64) -> Option<f64> {
    (t > 0).then(|| e as f64 / t as f64)
}

/// `(E_angle, E_bbox)`; a ratio with zero total is undefined.
pub fn error_ratios(c: &ValidityCounts) -> (Option<f64>, Option<f64>) {
    (ratio(c.e_angle, c.t_angle), ratio(c.e_bbox, c.t_bbox))
}

fn signed_yaw(y: f64) -> f64 {
    if y > 180.0 {
        y - 360.0
    } else {
        y
    }
}

/// Partitions by ground-truth yaw: front is `|yaw| <= 90`.
pub fn front_back_split(records: &[AngleRecord]) -> (Vec<AngleRecord>, Vec<AngleRecord>) {
    records
        .iter()
        .partition(|r| signed_yaw(r.gt.yaw).abs() <= FRONT_MAX_YAW)
}

/// A metric value or an explicit "undefined" (empty denominator).
/// Serializes as a number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Undefined => None,
        }
    }

    /// Fixed-point rendering for tables; `-` when undefined.
    pub fn render(&self, decimals: usize) -> String {
        match self {
            Metric::Value(v) => format!("{v:.decimals$}"),
            Metric::Undefined => "-".to_string(),
        }
    }
}

impl From<Option<f64>> for Metric {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Metric::Undefined, Metric::Value)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v}"),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric::Value(v)),
            Raw::Text(t) if t == "undefined" => Ok(Metric::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected metric '{t}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleSummary {
    pub n_total: usize,
    pub n_valid: usize,
    pub mae_yaw: Metric,
    pub mae_pitch: Metric,
    pub mae_roll: Metric,
    pub mae_mean: Metric,
    pub geodesic_mean: Metric,
    pub e_angle: Metric,
}

impl AngleSummary {
    pub fn from_records(records: &[AngleRecord], convention: EulerConvention) -> Result<Self> {
        let mae = circular_mae(records);
        let mut geo_sum = 0f64;
        let mut n_valid = 0usize;
        for r in records {
            let Some(pred) = r.pred else { continue };
            geo_sum += geodesic_error(
                &euler_to_rotmat(&pred, convention),
                &euler_to_rotmat(&r.gt, convention),
            )?;
            n_valid += 1;
        }
        let n_total = records.len();
        let pick = |f: fn(&AngleMae) -> f64| Metric::from(mae.as_ref().map(f));
        Ok(Self {
            n_total,
            n_valid,
            mae_yaw: pick(|m| m.yaw),
            mae_pitch: pick(|m| m.pitch),
            mae_roll: pick(|m| m.roll),
            mae_mean: pick(|m| m.mean),
            geodesic_mean: ((n_valid > 0).then(|| geo_sum / n_valid as f64)).into(),
            e_angle: ratio((n_total - n_valid) as u64, n_total as u64).into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBoxSummary {
    pub n_total: usize,
    pub n_valid: usize,
    pub n_accurate: usize,
    pub accuracy: Metric,
    pub e_bbox: Metric,
}

impl BBoxSummary {
    pub fn from_records(records: &[BBoxEvalRecord]) -> Result<Self> {
        let (hits, valid) = bbox_hits(records)?;
        let n_total = records.len();
        Ok(Self {
            n_total,
            n_valid: valid,
            n_accurate: hits,
            accuracy: ratio(hits as u64, valid as u64).into(),
            e_bbox: ratio((n_total - valid) as u64, n_total as u64).into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub angle: Option<AngleSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub front: Option<AngleSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub back: Option<AngleSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bbox: Option<BBoxSummary>,
}

impl MetricsSummary {
    /// Overall angle metrics plus front/back sub-summaries.
    pub fn for_angles(records: &[AngleRecord], convention: EulerConvention) -> Result<Self> {
        let (front, back) = front_back_split(records);
        Ok(Self {
            angle: Some(AngleSummary::from_records(records, convention)?),
            front: Some(AngleSummary::from_records(&front, convention)?),
            back: Some(AngleSummary::from_records(&back, convention)?),
            bbox: None,
        })
    }

    pub fn for_bboxes(records: &[BBoxEvalRecord]) -> Result<Self> {
        Ok(Self {
            bbox: Some(BBoxSummary::from_records(records)?),
            ..Self::default()
        })
    }

    pub const CSV_HEADER: &'static str =
        "split,n_total,n_valid,acc,e_bbox,mae,e_angle,geodesic,mae_yaw,mae_pitch,mae_roll";

    /// One row per split in the column order of the results tables. Ratios
    /// and errors are rendered to four decimals, undefined cells as `-`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let dash = || "-".to_string();
        if let Some(b) = &self.bbox {
            out.push_str(&format!(
                "all,{},{},{},{},-,-,-,-,-,-\n",
                b.n_total,
                b.n_valid,
                b.accuracy.render(4),
                b.e_bbox.render(4),
            ));
        }
        for (split, summary) in [("all", &self.angle), ("front", &self.front), ("back", &self.back)] {
            let Some(a) = summary else { continue };
            out.push_str(&format!(
                "{split},{},{},{},{},{},{},{},{},{},{}\n",
                a.n_total,
                a.n_valid,
                dash(),
                dash(),
                a.mae_mean.render(4),
                a.e_angle.render(4),
                a.geodesic_mean.render(4),
                a.mae_yaw.render(4),
                a.mae_pitch.render(4),
                a.mae_roll.render(4),
            ));
        }
        out
    }
}
