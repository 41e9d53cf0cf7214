//! Overlap and surface-distance metrics, in voxel units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_mask, exact_edt, BinaryMask};

pub const METRIC_CSV_SCHEMA: u32 = 1;
pub const METRIC_CSV_HEADER: &str = "case_id,dice,jaccard,asd,hd95,degenerate_flag";
/// Written in place of a surface metric that is undefined for a case.
pub const UNDEFINED: &str = "undefined";

fn check_shapes(a: &BinaryMask, b: &BinaryMask, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(2|A∩B| / (|A|+|B|), |A∩B| / |A∪B|)`; two empty masks score `(1, 1)`.
pub fn dice_jaccard(pred: &BinaryMask, truth: &BinaryMask) -> Result<(f64, f64)> {
    check_shapes(pred, truth, "dice_jaccard")?;
    let inter = pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(&a, &b)| a == 1 && b == 1)
        .count() as f64;
    let (na, nb) = (pred.count() as f64, truth.count() as f64);
    if na + nb == 0.0 {
        return Ok((1.0, 1.0));
    }
    Ok((2.0 * inter / (na + nb), inter / (na + nb - inter)))
}

/// Distances from every surface voxel of `a` to the surface of `b` and back, pooled.
/// `None` when either surface is empty.
pub fn pooled_surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Option<Vec<f64>>> {
    check_shapes(a, b, "surface_distances")?;
    let (sa, sb) = (boundary_mask(a), boundary_mask(b));
    if sa.count() == 0 || sb.count() == 0 {
        return Ok(None);
    }
    let (da, db) = (exact_edt(&sa)?, exact_edt(&sb)?);
    let mut out = Vec::with_capacity(sa.count() + sb.count());
    out.extend(sa.data().iter().zip(&db).filter(|(&s, _)| s == 1).map(|(_, &d)| d));
    out.extend(sb.data().iter().zip(&da).filter(|(&s, _)| s == 1).map(|(_, &d)| d));
    Ok(Some(out))
}

/// Percentile `q` in `[0, 100]` with linear interpolation at rank `q/100 (n-1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub asd: f64,
    pub hd95: f64,
}

/// Symmetric average surface distance and 95th-percentile Hausdorff distance.
/// `None` (undefined) when either mask has no surface.
pub fn surface_distances(pred: &BinaryMask, truth: &BinaryMask) -> Result<Option<SurfaceDistances>> {
    surface_distances_at(pred, truth, 95.0)
}

/// Like [`surface_distances`] with a custom percentile; 100 gives the Hausdorff distance.
pub fn surface_distances_at(pred: &BinaryMask, truth: &BinaryMask, q: f64) -> Result<Option<SurfaceDistances>> {
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    Ok(pooled_surface_distances(pred, truth)?.map(|d| SurfaceDistances {
        asd: d.iter().sum::<f64>() / d.len() as f64,
        hd95: percentile(&d, q),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when undefined; the case is then flagged degenerate.
    pub surface: Option<SurfaceDistances>,
}

impl CaseMetrics {
    pub fn compute(case_id: &str, pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        let (dice, jaccard) = dice_jaccard(pred, truth)?;
        Ok(CaseMetrics {
            case_id: case_id.into(),
            dice,
            jaccard,
            surface: surface_distances(pred, truth)?,
        })
    }

    pub fn degenerate(&self) -> bool {
        self.surface.is_none()
    }

    pub fn csv_row(&self) -> String {
        let (asd, hd) = match self.surface {
            Some(s) => (s.asd.to_string(), s.hd95.to_string()),
            None => (UNDEFINED.into(), UNDEFINED.into()),
        };
        format!(
            "{},{},{},{},{},{}",
            self.case_id,
            self.dice,
            self.jaccard,
            asd,
            hd,
            u8::from(self.degenerate())
        )
    }
}

/// Mean over cases; surface metrics average the defined cases only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    pub cases: usize,
    pub degenerate_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("no cases to aggregate".into()));
        }
        let n = cases.len() as f64;
        let defined: Vec<SurfaceDistances> = cases.iter().filter_map(|c| c.surface).collect();
        let mean_of = |f: fn(&SurfaceDistances) -> f64| {
            (!defined.is_empty()).then(|| defined.iter().map(f).sum::<f64>() / defined.len() as f64)
        };
        let aggregate = AggregateMetrics {
            dice: cases.iter().map(|c| c.dice).sum::<f64>() / n,
            jaccard: cases.iter().map(|c| c.jaccard).sum::<f64>() / n,
            asd: mean_of(|s| s.asd),
            hd95: mean_of(|s| s.hd95),
            cases: cases.len(),
            degenerate_cases: cases.len() - defined.len(),
        };
        Ok(MetricReport { cases, aggregate })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema_version={METRIC_CSV_SCHEMA}\n{METRIC_CSV_HEADER}\n");
        for c in &self.cases {
            s.push_str(&c.csv_row());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, on: &[usize]) -> BinaryMask {
        BinaryMask::from_fn(vec![n], |i| on.contains(&i[0]))
    }

    #[test]
    fn overlap_by_hand() {
        let a = BinaryMask::from_fn(vec![300], |i| i[0] < 100);
        let b = BinaryMask::from_fn(vec![300], |i| (50..150).contains(&i[0]));
        let (d, j) = dice_jaccard(&a, &b).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::zeros(vec![4]);
        assert_eq!(dice_jaccard(&e, &e).unwrap(), (1.0, 1.0));
        assert_eq!(dice_jaccard(&a, &BinaryMask::from_fn(vec![300], |i| i[0] >= 200)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn single_voxels_three_apart() {
        let s = surface_distances(&line(8, &[1]), &line(8, &[4])).unwrap().unwrap();
        assert_eq!((s.asd, s.hd95), (3.0, 3.0));
        let same = surface_distances(&line(8, &[1, 2]), &line(8, &[1, 2])).unwrap().unwrap();
        assert_eq!((same.asd, same.hd95), (0.0, 0.0));
    }

    #[test]
    fn empty_is_undefined() {
        assert!(surface_distances(&line(8, &[]), &line(8, &[3])).unwrap().is_none());
        let c = CaseMetrics::compute("x", &line(8, &[]), &line(8, &[3])).unwrap();
        assert!(c.csv_row().ends_with("undefined,undefined,1"));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 95.0) - 3.8).abs() < 1e-12);
    }
}
