use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Episode, Frame, ScenarioTag};
use crate::error::{Error, Result};

const HEADER: [&str; 9] = ["episode_id", "t", "x_lea", "y_lea", "v_lea", "x_fol", "y_fol", "v_fol", "scenario_tag"];
const DT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    episode_id: String,
    t: f64,
    x_lea: f64,
    y_lea: f64,
    v_lea: f64,
    x_fol: f64,
    y_fol: f64,
    v_fol: f64,
    scenario_tag: String,
}

struct PendingRow {
    line: usize,
    time: f64,
    frame: Frame,
    tag: ScenarioTag,
}

/// Reads episodes from the car-following CSV schema.
///
/// The `t` column holds timestamps in seconds; consecutive rows of an episode
/// must be `dt_expected` apart. Episodes come back in order of first
/// appearance with frames sorted by time. Any row or episode that violates an
/// invariant fails the whole load with an error naming it.
pub fn load_episodes(path: impl AsRef<Path>, dt_expected: f64) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    if !(dt_expected > 0.0) {
        return Err(Error::Precondition(format!("dt must be positive, got {dt_expected}")));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(Error::Schema(format!(
            "header must be {:?}, found {:?}",
            HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<PendingRow>> = HashMap::new();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: Row = record.deserialize(Some(&headers)).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let values = [row.t, row.x_lea, row.y_lea, row.v_lea, row.x_fol, row.y_fol, row.v_fol];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line, message: "non-finite numeric field".into() });
        }
        if row.v_lea < 0.0 || row.v_fol < 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("negative speed (v_lea={}, v_fol={})", row.v_lea, row.v_fol),
            });
        }
        let tag: ScenarioTag =
            row.scenario_tag.parse().map_err(|_| Error::Parse { line, message: format!("bad scenario_tag {:?}", row.scenario_tag) })?;
        let frame = Frame {
            t: (row.t / dt_expected).round() as i64,
            x_lea: [row.x_lea, row.y_lea],
            v_lea: row.v_lea,
            x_fol: [row.x_fol, row.y_fol],
            v_fol: row.v_fol,
        };
        if !groups.contains_key(&row.episode_id) {
            order.push(row.episode_id.clone());
        }
        groups.entry(row.episode_id).or_default().push(PendingRow { line, time: row.t, frame, tag });
    }

    let mut episodes = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        for w in rows.windows(2) {
            let step = w[1].time - w[0].time;
            if (step - dt_expected).abs() > DT_TOLERANCE {
                return Err(Error::Schema(format!(
                    "episode {id}: time step {step} s at line {} differs from dt {dt_expected} s",
                    w[1].line
                )));
            }
        }
        let scenario = rows[0].tag;
        if let Some(r) = rows.iter().find(|r| r.tag != scenario) {
            return Err(Error::Schema(format!("episode {id}: mixed scenario tags (line {})", r.line)));
        }
        let episode = Episode { episode_id: id, dt: dt_expected, frames: rows.iter().map(|r| r.frame).collect(), scenario };
        episode.validate()?;
        episodes.push(episode);
    }
    Ok(episodes)
}

/// Writes episodes in the same schema [`load_episodes`] reads.
pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(true).from_writer(file);
    let csv_err = |e: csv::Error| Error::Serde(e.to_string());
    if episodes.is_empty() {
        writer.write_record(HEADER).map_err(csv_err)?;
    }
    for ep in episodes {
        for f in &ep.frames {
            writer
                .serialize(Row {
                    episode_id: ep.episode_id.clone(),
                    t: f.t as f64 * ep.dt,
                    x_lea: f.x_lea[0],
                    y_lea: f.x_lea[1],
                    v_lea: f.v_lea,
                    x_fol: f.x_fol[0],
                    y_fol: f.x_fol[1],
                    v_fol: f.v_fol,
                    scenario_tag: ep.scenario.as_str().to_string(),
                })
                .map_err(csv_err)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEAD: &str = "episode_id,t,x_lea,y_lea,v_lea,x_fol,y_fol,v_fol,scenario_tag\n";

    #[test]
    fn empty_file_with_header_gives_no_episodes() {
        let f = write(HEAD);
        assert!(load_episodes(f.path(), 0.1).unwrap().is_empty());
    }

    #[test]
    fn constant_spacing_episode_round_trips() {
        let mut s = String::from(HEAD);
        for i in 0..10 {
            let x = i as f64;
            s.push_str(&format!("ep1,{},{},0,10,{},0,10,H-H\n", i as f64 * 0.1, x + 10.0, x));
        }
        let f = write(&s);
        let eps = load_episodes(f.path(), 0.1).unwrap();
        assert_eq!(eps.len(), 1);
        let ep = &eps[0];
        assert_eq!(ep.episode_id, "ep1");
        assert_eq!(ep.scenario, ScenarioTag::HumanHuman);
        assert_eq!(ep.len(), 10);
        for (i, fr) in ep.frames.iter().enumerate() {
            assert_eq!(fr.t, i as i64);
            assert_eq!(fr.x_lea, [i as f64 + 10.0, 0.0]);
            assert_eq!(fr.x_fol, [i as f64, 0.0]);
            assert_eq!((fr.v_lea, fr.v_fol), (10.0, 10.0));
        }
        ep.validate().unwrap();

        let out = tempfile::NamedTempFile::new().unwrap();
        write_episodes(out.path(), &eps).unwrap();
        assert_eq!(load_episodes(out.path(), 0.1).unwrap(), eps);
    }

    #[test]
    fn rows_are_sorted_and_grouped() {
        let s = format!("{HEAD}b,0.1,11,0,1,1,0,1,SYNTH\na,0,10,0,1,0,0,1,A-H\nb,0,10,0,1,0,0,1,SYNTH\n");
        let f = write(&s);
        let eps = load_episodes(f.path(), 0.1).unwrap();
        assert_eq!(eps.iter().map(|e| e.episode_id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(eps[0].frames[0].t, 0);
        assert_eq!(eps[0].frames[1].x_lea, [11.0, 0.0]);
    }

    #[test]
    fn negative_speed_names_line() {
        let s = format!("{HEAD}e,0,10,0,5,0,0,5,H-H\ne,0.1,10.5,0,5,0.5,0,-1,H-H\n");
        let f = write(&s);
        match load_episodes(f.path(), 0.1) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("negative speed"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let s = format!("{HEAD}e,0,10,0,5,0,0,5,H-H\ne,0.1,abc,0,5,0.5,0,5,H-H\n");
        let f = write(&s);
        match load_episodes(f.path(), 0.1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dt_mismatch_is_schema_error() {
        let s = format!("{HEAD}e,0,10,0,5,0,0,5,H-H\ne,0.2,11,0,5,1,0,5,H-H\n");
        let f = write(&s);
        assert!(matches!(load_episodes(f.path(), 0.1), Err(Error::Schema(_))));
    }

    #[test]
    fn wrong_header_is_schema_error() {
        let f = write("id,t\n");
        assert!(matches!(load_episodes(f.path(), 0.1), Err(Error::Schema(_))));
    }

    #[test]
    fn overlapping_vehicles_rejected() {
        let s = format!("{HEAD}e,0,10,0,5,0,0,5,H-H\ne,0.1,0.5,0,5,0.5,0,5,H-H\n");
        let f = write(&s);
        assert!(matches!(load_episodes(f.path(), 0.1), Err(Error::InvalidEpisode { .. })));
    }
}
