//! Agreement metrics between predicted and reference AV values.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorTable;
use crate::error::{AvError, Result};
use crate::formats::AvRecord;

/// Concordance correlation coefficient and the moments it was built from.
/// All moments use the population divisor `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccResult {
    pub ccc: f64,
    /// `None` when either input is constant.
    pub pearson: Option<f64>,
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    /// Set when the denominator vanished (both inputs constant and equal).
    pub degenerate: bool,
}

fn check_pair(x: &[f64], y: &[f64], min_len: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(AvError::shape(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min_len {
        return Err(AvError::input(format!(
            "need at least {min_len} values, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AvError::numerical("non-finite input to metric"));
    }
    Ok(())
}

/// Constant inputs return their value exactly, so their deviations vanish.
fn mean(v: &[f64]) -> f64 {
    if v.iter().all(|&x| x == v[0]) {
        return v[0];
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// `2 cov(x, y) / (var x + var y + (mean x - mean y)^2)`.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<CccResult> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    let (vx, vy, cov) = (sxx / n, syy / n, sxy / n);
    let denom = vx + vy + (mx - my) * (mx - my);
    let (ccc, degenerate) = if denom > 0.0 {
        ((2.0 * cov / denom).clamp(-1.0, 1.0), false)
    } else {
        log::warn!("CCC denominator is zero; both inputs are constant and equal");
        (0.0, true)
    };
    let (sx, sy) = (vx.sqrt(), vy.sqrt());
    let pearson = (sx > 0.0 && sy > 0.0).then(|| (cov / (sx * sy)).clamp(-1.0, 1.0));
    Ok(CccResult {
        ccc,
        pearson,
        mean_x: mx,
        mean_y: my,
        std_x: sx,
        std_y: sy,
        degenerate,
    })
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// How cluster-to-anchor errors are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorMaeWeighting {
    /// Every label counts once.
    #[default]
    PerLabel,
    /// Labels weighted by their number of points.
    PerUtterance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorMae {
    pub valence: f64,
    pub arousal: f64,
}

/// Mean absolute distance between each label's centroid and its anchor.
pub fn cluster_anchor_mae<'a, I>(points: I, anchors: &AnchorTable, weighting: AnchorMaeWeighting) -> Result<AnchorMae>
where
    I: IntoIterator<Item = (f64, f64, &'a str)>,
{
    // label -> (sum valence, sum arousal, count)
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (v, a, label) in points {
        let key = crate::anchors::normalize_label(label);
        if !anchors.contains(&key) {
            return Err(AvError::UnknownLabel(label.to_string()));
        }
        let e = acc.entry(key).or_insert((0.0, 0.0, 0));
        e.0 += v;
        e.1 += a;
        e.2 += 1;
    }
    if acc.is_empty() {
        return Err(AvError::input("no labeled points"));
    }
    let (mut ev, mut ea, mut total) = (0.0, 0.0, 0.0);
    for (label, (sv, sa, count)) in &acc {
        let anchor = anchors.lookup(label)?;
        let c = *count as f64;
        let w = match weighting {
            AnchorMaeWeighting::PerLabel => 1.0,
            AnchorMaeWeighting::PerUtterance => c,
        };
        ev += w * (sv / c - anchor.valence).abs();
        ea += w * (sa / c - anchor.arousal).abs();
        total += w;
    }
    Ok(AnchorMae {
        valence: ev / total,
        arousal: ea / total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub ccc: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub valence: DimensionReport,
    pub arousal: DimensionReport,
}

/// Joins predictions with references on utterance id and scores both axes.
pub fn evaluate(pred: &[AvRecord], reference: &[AvRecord]) -> Result<EvalReport> {
    let mut ref_by_id: HashMap<&str, &AvRecord> = HashMap::with_capacity(reference.len());
    for r in reference {
        if ref_by_id.insert(&r.utterance_id, r).is_some() {
            return Err(AvError::DuplicateId(r.utterance_id.clone()));
        }
    }
    let mut seen = HashSet::with_capacity(pred.len());
    let (mut pv, mut pa, mut rv, mut ra) = (vec![], vec![], vec![], vec![]);
    for p in pred {
        if !seen.insert(p.utterance_id.as_str()) {
            return Err(AvError::DuplicateId(p.utterance_id.clone()));
        }
        let r = ref_by_id
            .get(p.utterance_id.as_str())
            .ok_or_else(|| AvError::input(format!("prediction `{}` has no reference", p.utterance_id)))?;
        pv.push(p.valence);
        pa.push(p.arousal);
        rv.push(r.valence);
        ra.push(r.arousal);
    }
    if pv.is_empty() {
        return Err(AvError::input("no predictions to evaluate"));
    }
    Ok(EvalReport {
        n: pv.len(),
        valence: DimensionReport {
            ccc: ccc(&pv, &rv)?.ccc,
            mae: mae(&pv, &rv)?,
        },
        arousal: DimensionReport {
            ccc: ccc(&pa, &ra)?.ccc,
            mae: mae(&pa, &ra)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccc_examples() {
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().ccc, 1.0);
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().ccc, -1.0);
        let c = ccc(&[1.0, 2.0, 3.0, 4.0], &[2.0; 4]).unwrap();
        assert_eq!(c.ccc, 0.0);
        assert_eq!(c.pearson, None);
        assert!(!c.degenerate);
    }

    #[test]
    fn ccc_degenerate_and_errors() {
        let c = ccc(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.ccc, 0.0);
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ccc_penalizes_scale() {
        let x = [0.1, -0.4, 0.3, 0.9];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let c = ccc(&x, &y).unwrap();
        assert!(c.ccc < 1.0);
        assert!((c.pearson.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.5, -0.25, 0.0], &[0.0, 0.0, 0.0]).unwrap(), 0.25);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn anchor_mae_examples() {
        let t = AnchorTable::default_table();
        let exact = [(0.81, 0.51, "happy"), (-0.63, -0.27, "sad")];
        let m = cluster_anchor_mae(exact, &t, AnchorMaeWeighting::PerLabel).unwrap();
        assert_eq!((m.valence, m.arousal), (0.0, 0.0));

        // Centroid (0.91, 0.31) vs anchor (0.81, 0.51).
        let off = [(0.86, 0.21, "happy"), (0.96, 0.41, "happy")];
        let m = cluster_anchor_mae(off, &t, AnchorMaeWeighting::PerLabel).unwrap();
        assert!((m.valence - 0.1).abs() < 1e-12 && (m.arousal - 0.2).abs() < 1e-12);

        // Offsets: happy (+0.1, -0.2) x2 points, sad (-0.3, 0.0), angry (0.05, 0.4).
        let pts = [
            (0.91, 0.31, "happy"),
            (0.91, 0.31, "happy"),
            (-0.93, -0.27, "sad"),
            (-0.46, 0.99, "angry"),
        ];
        let m = cluster_anchor_mae(pts, &t, AnchorMaeWeighting::PerLabel).unwrap();
        assert!((m.valence - 0.15).abs() < 1e-12, "{}", m.valence);
        assert!((m.arousal - 0.2).abs() < 1e-12);
        let m = cluster_anchor_mae(pts, &t, AnchorMaeWeighting::PerUtterance).unwrap();
        assert!((m.valence - 0.1375).abs() < 1e-12);
        assert!((m.arousal - 0.2).abs() < 1e-12);

        assert!(cluster_anchor_mae([(0.0, 0.0, "nope")], &t, AnchorMaeWeighting::PerLabel).is_err());
    }

    fn rec(id: &str, v: f64, a: f64) -> AvRecord {
        AvRecord {
            utterance_id: id.into(),
            valence: v,
            arousal: a,
            label: None,
        }
    }

    #[test]
    fn evaluate_identical_and_negated() {
        let r = vec![rec("a", -0.5, 0.2), rec("b", 0.5, 0.4), rec("c", 0.0, -0.1)];
        let rep = evaluate(&r, &r).unwrap();
        assert_eq!(rep.valence, DimensionReport { ccc: 1.0, mae: 0.0 });
        assert_eq!(rep.arousal, DimensionReport { ccc: 1.0, mae: 0.0 });

        let neg: Vec<AvRecord> = r.iter().map(|x| rec(&x.utterance_id, -x.valence, x.arousal)).collect();
        let rep = evaluate(&neg, &r).unwrap();
        assert!((rep.valence.ccc + 1.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_errors() {
        let r = vec![rec("a", 0.0, 0.0), rec("b", 1.0, 1.0)];
        assert!(evaluate(&[rec("z", 0.0, 0.0)], &r).is_err());
        assert!(evaluate(&[], &r).is_err());
        let dup = vec![rec("a", 0.0, 0.0), rec("a", 1.0, 1.0)];
        assert!(matches!(evaluate(&dup, &r), Err(AvError::DuplicateId(_))));
    }
}
