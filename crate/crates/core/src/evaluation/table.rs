use std::fmt::Write;

use super::MetricsReport;
use crate::data::ScenarioTag;

pub const METRIC_COLUMNS: [&str; 4] = ["RMSE", "ADE", "FDE", "MR"];

/// A rectangular table of preformatted cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| self.rows.iter().map(|r| r[c].len()).chain([self.columns[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                if i < cells.len() - 1 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    s.push_str(cell);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn horizon_label(h: f64) -> String {
    if h.fract() == 0.0 {
        format!("{h:.0}s")
    } else {
        format!("{h}s")
    }
}

/// One row per group; each group's reports become `RMSE/ADE/FDE/MR`
/// column blocks ordered by horizon.
pub fn report_table(label_columns: &[&str], groups: &[(Vec<String>, Vec<MetricsReport>)]) -> Table {
    let mut horizons: Vec<f64> = groups.iter().flat_map(|(_, r)| r.iter().map(|r| r.horizon_s)).collect();
    horizons.sort_by(f64::total_cmp);
    horizons.dedup();
    let mut columns: Vec<String> = label_columns.iter().map(|s| s.to_string()).collect();
    for h in &horizons {
        columns.extend(METRIC_COLUMNS.iter().map(|m| format!("{m}@{}", horizon_label(*h))));
    }
    let rows = groups
        .iter()
        .map(|(labels, reports)| {
            let mut row = labels.clone();
            for h in &horizons {
                match reports.iter().find(|r| r.horizon_s == *h) {
                    Some(r) => row.extend([r.rmse, r.ade, r.fde, r.mr].map(fmt)),
                    None => row.extend(std::iter::repeat_n("-".to_string(), 4)),
                }
            }
            row
        })
        .collect();
    Table { columns, rows }
}

/// A published comparison row: RMSE, ADE, FDE, MR at 3, 4 and 5 s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub scenario: ScenarioTag,
    pub method: &'static str,
    pub reference: &'static str,
    pub values: [f64; 12],
}

const REFERENCE: [ReferenceRow; 12] = {
    use ScenarioTag::{AvHuman as AH, HumanAv as HA, HumanHuman as HH};
    [
        ReferenceRow { scenario: HH, method: "BAT", reference: "AAAI 2024", values: [4.0164, 2.5038, 5.1758, 0.6305, 5.5283, 3.4799, 7.9652, 0.8524, 7.8580, 4.7988, 12.6530, 0.9055] },
        ReferenceRow { scenario: HH, method: "TUTR", reference: "ICCV 2023", values: [2.7052, 1.1174, 1.6702, 0.3383, 3.3790, 1.4093, 2.3401, 0.4207, 4.3609, 2.0374, 3.9805, 0.6359] },
        ReferenceRow { scenario: HH, method: "CRAT-Pred", reference: "ICRA 2022", values: [2.0206, 1.3937, 1.8320, 0.3368, 2.2785, 1.5880, 2.5610, 0.5200, 2.7573, 1.8666, 3.6184, 0.6630] },
        ReferenceRow { scenario: HH, method: "FollowGen", reference: "-", values: [2.8001, 1.6162, 2.1796, 0.3820, 3.3270, 1.7993, 2.4480, 0.3930, 3.8935, 1.9853, 3.3454, 0.4935] },
        ReferenceRow { scenario: AH, method: "BAT", reference: "AAAI 2024", values: [2.5197, 1.7636, 3.3817, 0.5412, 3.5547, 2.4021, 5.3486, 0.7403, 5.0211, 3.2552, 8.0671, 0.8434] },
        ReferenceRow { scenario: AH, method: "TUTR", reference: "ICCV 2023", values: [2.7680, 1.7002, 2.1110, 0.3977, 2.8772, 2.1057, 1.9980, 0.5017, 4.0043, 2.4040, 7.4894, 0.6469] },
        ReferenceRow { scenario: AH, method: "CRAT-Pred", reference: "ICRA 2022", values: [3.3064, 2.0385, 2.3917, 0.4610, 3.3852, 2.1548, 2.8396, 0.5296, 3.5344, 2.2977, 3.4711, 0.6167] },
        ReferenceRow { scenario: AH, method: "FollowGen", reference: "-", values: [2.0033, 1.3058, 1.3243, 0.1891, 2.1220, 1.3585, 1.5601, 0.2547, 2.4108, 1.5058, 3.3469, 0.5750] },
        ReferenceRow { scenario: HA, method: "BAT", reference: "AAAI 2024", values: [1.7281, 1.3641, 2.4452, 0.4922, 2.3706, 1.7790, 3.7898, 0.6646, 3.3827, 2.3755, 6.1516, 0.7583] },
        ReferenceRow { scenario: HA, method: "TUTR", reference: "ICCV 2023", values: [2.3891, 1.4175, 1.8991, 0.3191, 2.4693, 1.5028, 1.7316, 0.3355, 2.2395, 2.0727, 4.2551, 0.5334] },
        ReferenceRow { scenario: HA, method: "CRAT-Pred", reference: "ICRA 2022", values: [3.7319, 1.8575, 1.8340, 0.3261, 3.6453, 1.8801, 2.1347, 0.3842, 3.7715, 1.9899, 3.1889, 0.4751] },
        ReferenceRow { scenario: HA, method: "FollowGen", reference: "-", values: [1.9550, 1.3218, 1.7257, 0.3289, 2.1989, 1.4516, 1.9596, 0.3758, 2.4810, 1.5970, 2.5775, 0.4863] },
    ]
};

/// Published comparison numbers laid out like [`report_table`] output.
pub fn reference_results() -> (Vec<ReferenceRow>, Table) {
    let groups: Vec<(Vec<String>, Vec<MetricsReport>)> = REFERENCE
        .iter()
        .map(|r| {
            let labels = vec![r.scenario.to_string(), r.method.to_string(), r.reference.to_string()];
            let reports = [3.0, 4.0, 5.0]
                .iter()
                .enumerate()
                .map(|(i, &h)| MetricsReport {
                    horizon_s: h,
                    frames: (h * 10.0) as usize,
                    rmse: r.values[4 * i],
                    ade: r.values[4 * i + 1],
                    fde: r.values[4 * i + 2],
                    mr: r.values[4 * i + 3],
                    n_samples: 0,
                    scenario: r.scenario,
                    predictor: r.method.to_string(),
                    seed: 0,
                    k: 0,
                    schedule: "-".into(),
                    variant: "-".into(),
                    draws: 1,
                })
                .collect();
            (labels, reports)
        })
        .collect();
    (REFERENCE.to_vec(), report_table(&["Scenario", "Method", "Reference"], &groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_cells_are_verbatim() {
        let (_, table) = reference_results();
        assert_eq!(table.rows.len(), 12);
        assert_eq!(table.columns.len(), 15);
        let ah = table.rows.iter().find(|r| r[0] == "A-H" && r[1] == "FollowGen").unwrap();
        assert_eq!(ah[table.columns.iter().position(|c| c == "FDE@5s").unwrap()], "3.3469");
        assert_eq!(ah[3], "2.0033");
        let bat = &table.rows[0];
        assert_eq!(bat[13], "12.6530");
        let csv = table.to_csv();
        assert!(csv.starts_with("Scenario,Method,Reference,RMSE@3s,ADE@3s"));
        assert!(csv.contains("H-A,FollowGen,-,1.9550,1.3218,1.7257,0.3289"));
    }

    #[test]
    fn text_table_is_aligned() {
        let t = Table {
            columns: vec!["a".into(), "bbb".into()],
            rows: vec![vec!["long".into(), "x".into()], vec!["s".into(), "yy".into()]],
        };
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "a     bbb");
        assert_eq!(lines[2], "long  x");
        assert_eq!(lines[3], "s     yy");
    }
}
