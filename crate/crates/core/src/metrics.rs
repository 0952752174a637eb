//! Dice scoring, cohort aggregation and report output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::organ::{OrganId, NUM_ORGANS};
use crate::volume::LabelVolume;

fn same_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SegError::DimsMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for one organ; `None` when the organ is absent
/// from the ground truth.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, organ: OrganId) -> Result<Option<f64>> {
    same_dims(pred, gt)?;
    let id = organ.get();
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == id, b == id);
        p += u64::from(ia);
        g += u64::from(ib);
        both += u64::from(ia && ib);
    }
    if g == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (p + g) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    /// Organ order 1..=13; `None` marks an organ excluded for this case.
    pub dice: Vec<Option<f64>>,
}

impl CaseScores {
    /// Mean over scored organs.
    pub fn mean(&self) -> Option<f64> {
        mean(self.dice.iter().flatten().copied())
    }
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores every organ in a single pass over the voxels.
pub fn evaluate_case(case_id: &str, pred: &LabelVolume, gt: &LabelVolume) -> Result<CaseScores> {
    same_dims(pred, gt)?;
    let mut p = [0u64; NUM_ORGANS + 1];
    let mut g = [0u64; NUM_ORGANS + 1];
    let mut both = [0u64; NUM_ORGANS + 1];
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (usize::from(a.min(14)), usize::from(b.min(14)));
        if a <= NUM_ORGANS {
            p[a] += 1;
        }
        if b <= NUM_ORGANS {
            g[b] += 1;
            if a == b {
                both[b] += 1;
            }
        }
    }
    let dice = (1..=NUM_ORGANS)
        .map(|a| (g[a] > 0).then(|| 2.0 * both[a] as f64 / (p[a] + g[a]) as f64))
        .collect();
    Ok(CaseScores {
        case_id: case_id.to_string(),
        dice,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganStat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub label: String,
    pub cases: usize,
    /// Organ order 1..=13; `None` when no case scored the organ.
    pub organs: Vec<Option<OrganStat>>,
    /// Unweighted mean of the per-organ means.
    pub average: Option<f64>,
    pub per_case: Vec<CaseScores>,
}

pub fn aggregate(label: &str, cohort: &[CaseScores]) -> Result<CohortReport> {
    if cohort.is_empty() {
        return Err(SegError::Empty("cohort"));
    }
    let organs: Vec<Option<OrganStat>> = (0..NUM_ORGANS)
        .map(|a| {
            let vals: Vec<f64> = cohort.iter().filter_map(|c| c.dice.get(a).copied().flatten()).collect();
            let m = mean(vals.iter().copied())?;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            Some(OrganStat {
                mean: m,
                std: var.sqrt(),
                n: vals.len(),
            })
        })
        .collect();
    let average = mean(organs.iter().flatten().map(|s| s.mean));
    Ok(CohortReport {
        label: label.to_string(),
        cases: cohort.len(),
        organs,
        average,
        per_case: cohort.to_vec(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

/// Comma-separated table, one row per report, organ columns in fixed order.
pub fn to_csv(reports: &[CohortReport]) -> String {
    let mut out = String::from("method");
    for o in OrganId::all() {
        out.push(',');
        out.push_str(o.short_name());
    }
    out.push_str(",AVG\n");
    for r in reports {
        out.push_str(&r.label);
        for s in &r.organs {
            let _ = write!(out, ",{}", cell(s.map(|s| s.mean)));
        }
        let _ = writeln!(out, ",{}", cell(r.average));
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[CohortReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.csv")), to_csv(reports))?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(reports)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Spacing, Volume};

    fn vol(dims: [usize; 3]) -> LabelVolume {
        Volume::filled(dims, Spacing::new(1.0, 1.0, 1.0).unwrap(), 0).unwrap()
    }

    fn cube(v: &mut LabelVolume, at: [usize; 3], id: u8) {
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    v.set(at[0] + x, at[1] + y, at[2] + z, id);
                }
            }
        }
    }

    fn o(i: u8) -> OrganId {
        OrganId::new(i).unwrap()
    }

    #[test]
    fn dice_hand_counts() {
        let mut gt = vol([6, 6, 6]);
        cube(&mut gt, [0, 0, 0], 1);
        assert_eq!(dice(&gt, &gt, o(1)).unwrap(), Some(1.0));
        let mut far = vol([6, 6, 6]);
        cube(&mut far, [4, 4, 4], 1);
        assert_eq!(dice(&far, &gt, o(1)).unwrap(), Some(0.0));
        let mut half = vol([6, 6, 6]);
        cube(&mut half, [1, 0, 0], 1);
        assert_eq!(dice(&half, &gt, o(1)).unwrap(), Some(0.5));
        assert_eq!(dice(&half, &gt, o(2)).unwrap(), None);
    }

    #[test]
    fn case_evaluation_excludes_absent() {
        let mut gt = vol([6, 6, 6]);
        cube(&mut gt, [0, 0, 0], 1);
        cube(&mut gt, [3, 3, 3], 2);
        let s = evaluate_case("c", &gt, &gt).unwrap();
        assert_eq!(s.dice[0], Some(1.0));
        assert_eq!(s.dice[1], Some(1.0));
        assert!(s.dice[3].is_none());
        let empty = evaluate_case("c", &vol([6, 6, 6]), &gt).unwrap();
        assert_eq!(empty.dice[0], Some(0.0));
        assert_eq!(empty.dice[1], Some(0.0));
        for a in 1..=13u8 {
            assert_eq!(s.dice[a as usize - 1], dice(&gt, &gt, o(a)).unwrap());
        }
    }

    #[test]
    fn aggregate_two_point() {
        let mk = |v: f64| CaseScores {
            case_id: "x".into(),
            dice: std::iter::once(Some(v)).chain(std::iter::repeat_n(None, 12)).collect(),
        };
        let r = aggregate("m", &[mk(0.8), mk(0.9)]).unwrap();
        let s = r.organs[0].unwrap();
        assert!((s.mean - 0.85).abs() < 1e-12);
        assert!((s.std - 0.05).abs() < 1e-12);
        assert!(r.organs[1].is_none());
        assert!((r.average.unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(aggregate("m", &[mk(0.7)]).unwrap().organs[0].unwrap().std, 0.0);
        assert!(matches!(aggregate("m", &[]), Err(SegError::Empty(_))));
    }

    #[test]
    fn csv_columns_follow_organ_order() {
        let csv = to_csv(&[]);
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        assert_eq!(header.len(), 15);
        assert_eq!(header[1], OrganId::new(1).unwrap().short_name());
        assert_eq!(header[14], "AVG");
    }
}
