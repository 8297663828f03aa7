//! Dice overlap and the metrics table written after evaluation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::protoseg::MaskTensor;

/// Dice coefficient for one class: `2|P and G| / (|P| + |G|)`. When the class
/// is absent from both masks the overlap is perfect by convention and the
/// score is 1.
pub fn dice(pred: &MaskTensor, gt: &MaskTensor, class: u8) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch {
            context: "dice masks".into(),
            expected: vec![gt.height(), gt.width()],
            got: vec![pred.height(), pred.width()],
        });
    }
    let mut p = 0usize;
    let mut g = 0usize;
    let mut both = 0usize;
    for (a, b) in pred.labels().iter().zip(gt.labels()) {
        let in_p = *a == class;
        let in_g = *b == class;
        p += usize::from(in_p);
        g += usize::from(in_g);
        both += usize::from(in_p && in_g);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

pub fn dice_stats(values: &[f64]) -> DiceStats {
    if values.is_empty() {
        return DiceStats { mean: f64::NAN, std: f64::NAN, n: 0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    DiceStats { mean, std: var.sqrt(), n: values.len() }
}

/// One line of the evaluation table. Clean rows use attack `none`, target
/// `none`, eps 0 and iters 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub attack: String,
    pub target: String,
    pub eps: f64,
    pub iters: usize,
    pub organ_class: u8,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub n_episodes: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "attack,target,eps,iters,organ_class,dice_mean,dice_std,n_episodes,seed";

impl MetricsRow {
    pub fn clean(organ_class: u8, stats: DiceStats, n_episodes: usize, seed: u64) -> Self {
        MetricsRow {
            attack: "none".into(),
            target: "none".into(),
            eps: 0.0,
            iters: 0,
            organ_class,
            dice_mean: stats.mean,
            dice_std: stats.std,
            n_episodes,
            seed,
        }
    }

    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.attack,
            self.target,
            self.eps,
            self.iters,
            self.organ_class,
            self.dice_mean,
            self.dice_std,
            self.n_episodes,
            self.seed
        )
    }
}

/// Renders the table; float fields use the shortest round-trip form so equal
/// runs produce identical bytes.
pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parses a rendered table back into rows; used to compare and reload runs.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Dataset {
                path: "<metrics>".into(),
                message: format!("bad metrics header: {other:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Dataset {
                path: "<metrics>".into(),
                message: format!("line {}: expected 9 fields, got {}", i + 2, f.len()),
            });
        }
        let parse_err = |what: &str| Error::Dataset {
            path: "<metrics>".into(),
            message: format!("line {}: bad {what}", i + 2),
        };
        rows.push(MetricsRow {
            attack: f[0].to_string(),
            target: f[1].to_string(),
            eps: f[2].parse().map_err(|_| parse_err("eps"))?,
            iters: f[3].parse().map_err(|_| parse_err("iters"))?,
            organ_class: f[4].parse().map_err(|_| parse_err("organ_class"))?,
            dice_mean: f[5].parse().map_err(|_| parse_err("dice_mean"))?,
            dice_std: f[6].parse().map_err(|_| parse_err("dice_std"))?,
            n_episodes: f[7].parse().map_err(|_| parse_err("n_episodes"))?,
            seed: f[8].parse().map_err(|_| parse_err("seed"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(labels: &[u8]) -> MaskTensor {
        MaskTensor::new(2, 2, labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_matches_a_hand_count() {
        // pred marks 2 pixels, gt marks 3, they share 2: 2*2/(2+3) = 0.8.
        let pred = mask(&[1, 1, 0, 0]);
        let gt = mask(&[1, 1, 1, 0]);
        assert!((dice(&pred, &gt, 1).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dice_of_a_class_absent_from_both_masks_is_one() {
        let a = mask(&[0, 0, 1, 1]);
        let b = mask(&[1, 0, 0, 1]);
        assert_eq!(dice(&a, &b, 7).unwrap(), 1.0);
    }

    #[test]
    fn dice_with_one_empty_side_is_zero() {
        let empty = mask(&[0, 0, 0, 0]);
        let full = mask(&[1, 1, 1, 1]);
        assert_eq!(dice(&empty, &full, 1).unwrap(), 0.0);
        assert_eq!(dice(&full, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_rejects_mismatched_masks() {
        let a = mask(&[0; 4]);
        let b = MaskTensor::new(1, 4, vec![0; 4]).unwrap();
        assert!(dice(&a, &b, 1).is_err());
    }

    #[test]
    fn stats_on_a_constant_sample_have_zero_spread() {
        let s = dice_stats(&[0.6, 0.6, 0.6]);
        assert_eq!(s.mean, 0.6);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.n, 3);
    }

    #[test]
    fn stats_match_a_hand_computed_pair() {
        // mean 0.5, deviations +-0.1, population std 0.1.
        let s = dice_stats(&[0.4, 0.6]);
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.std - 0.1).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_and_is_deterministic() {
        let rows = vec![
            MetricsRow::clean(3, DiceStats { mean: 0.625, std: 0.125, n: 200 }, 200, 17),
            MetricsRow {
                attack: "fgsm".into(),
                target: "query".into(),
                eps: 0.02,
                iters: 1,
                organ_class: 3,
                dice_mean: 0.4375,
                dice_std: 0.25,
                n_episodes: 200,
                seed: 17,
            },
        ];
        let text = render_csv(&rows);
        assert_eq!(text, render_csv(&rows));
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.contains("fgsm,query,0.02,1,3,0.4375,0.25,200,17"));
        assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn parse_rejects_a_bad_header_and_short_lines() {
        assert!(parse_csv("nope\n").is_err());
        let bad = format!("{CSV_HEADER}\nfgsm,query,0.02\n");
        assert!(parse_csv(&bad).is_err());
    }
}
