use serde::{Deserialize, Serialize};

use super::{norm, sub, Episode, Vec2};
use crate::error::{Error, Result};

/// Rigid transform from a window's local coordinates back to world
/// coordinates: `world = R(angle) * local + origin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameOrigin {
    pub origin: Vec2,
    pub angle: f64,
}

impl Default for FrameOrigin {
    fn default() -> Self {
        Self { origin: [0.0, 0.0], angle: 0.0 }
    }
}

impl FrameOrigin {
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.angle.sin_cos();
        [c * p[0] - s * p[1] + self.origin[0], s * p[0] + c * p[1] + self.origin[1]]
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.angle.sin_cos();
        let d = sub(p, self.origin);
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }

    /// Applies `inner` first, then `self`.
    pub fn compose(&self, inner: &FrameOrigin) -> FrameOrigin {
        FrameOrigin { origin: self.to_world(inner.origin), angle: self.angle + inner.angle }
    }
}

/// One fixed-length training/evaluation instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWindow {
    pub episode_id: String,
    /// First frame of the window within its episode.
    pub offset: usize,
    pub dt: f64,
    pub x_fol_his: Vec<Vec2>,
    pub v_fol_his: Vec<f64>,
    pub x_lea_his: Vec<Vec2>,
    pub v_lea_his: Vec<f64>,
    pub dx_his: Vec<Vec2>,
    pub dv_his: Vec<f64>,
    pub x_fol_fut: Vec<Vec2>,
    pub x_lea_fut: Vec<Vec2>,
    pub e_d: Vec2,
    pub frame_origin: FrameOrigin,
}

impl SampleWindow {
    pub fn t_his(&self) -> usize {
        self.x_fol_his.len()
    }

    pub fn t_fut(&self) -> usize {
        self.x_fol_fut.len()
    }

    fn map_positions(&self, f: impl Fn(Vec2) -> Vec2, e_d: Vec2, frame_origin: FrameOrigin) -> SampleWindow {
        let m = |v: &[Vec2]| v.iter().map(|&p| f(p)).collect::<Vec<_>>();
        let x_fol_his = m(&self.x_fol_his);
        let x_lea_his = m(&self.x_lea_his);
        let dx_his = x_lea_his.iter().zip(&x_fol_his).map(|(&l, &f)| sub(l, f)).collect();
        SampleWindow {
            episode_id: self.episode_id.clone(),
            offset: self.offset,
            dt: self.dt,
            x_fol_his,
            v_fol_his: self.v_fol_his.clone(),
            x_lea_his,
            v_lea_his: self.v_lea_his.clone(),
            dx_his,
            dv_his: self.dv_his.clone(),
            x_fol_fut: m(&self.x_fol_fut),
            x_lea_fut: m(&self.x_lea_fut),
            e_d,
            frame_origin,
        }
    }
}

/// Cuts `episode` into windows of `t_his + t_fut` frames starting at offsets
/// `0, stride, 2*stride, ...`. Episodes shorter than one window yield nothing.
///
/// # Panics
/// If `stride` or `t_his` is zero.
pub fn window_samples(episode: &Episode, t_his: usize, t_fut: usize, stride: usize) -> Vec<SampleWindow> {
    assert!(stride > 0, "window stride must be positive");
    assert!(t_his > 0, "history length must be positive");
    let span = t_his + t_fut;
    if episode.len() < span {
        return Vec::new();
    }
    let e_d = episode.travel_direction().unwrap_or([1.0, 0.0]);
    (0..=episode.len() - span)
        .step_by(stride)
        .map(|off| {
            let his = &episode.frames[off..off + t_his];
            let fut = &episode.frames[off + t_his..off + span];
            SampleWindow {
                episode_id: episode.episode_id.clone(),
                offset: off,
                dt: episode.dt,
                x_fol_his: his.iter().map(|f| f.x_fol).collect(),
                v_fol_his: his.iter().map(|f| f.v_fol).collect(),
                x_lea_his: his.iter().map(|f| f.x_lea).collect(),
                v_lea_his: his.iter().map(|f| f.v_lea).collect(),
                dx_his: his.iter().map(|f| sub(f.x_lea, f.x_fol)).collect(),
                dv_his: his.iter().map(|f| f.v_lea - f.v_fol).collect(),
                x_fol_fut: fut.iter().map(|f| f.x_fol).collect(),
                x_lea_fut: fut.iter().map(|f| f.x_lea).collect(),
                e_d,
                frame_origin: FrameOrigin::default(),
            }
        })
        .collect()
}

fn to_ego(sample: &SampleWindow, heading: Vec2) -> SampleWindow {
    let last = *sample.x_fol_his.last().expect("window has history");
    let local = FrameOrigin { origin: last, angle: heading[1].atan2(heading[0]) };
    sample.map_positions(|p| local.to_local(p), [1.0, 0.0], sample.frame_origin.compose(&local))
}

/// Moves a window into the follower's ego frame: the last history position
/// becomes the origin and the last history step points along +x.
pub fn normalize(sample: &SampleWindow) -> Result<SampleWindow> {
    let n = sample.x_fol_his.len();
    if n < 2 {
        return Err(Error::DegenerateDirection(format!("{}: need two history frames", sample.episode_id)));
    }
    let d = sub(sample.x_fol_his[n - 1], sample.x_fol_his[n - 2]);
    if norm(d) == 0.0 {
        return Err(Error::DegenerateDirection(format!(
            "{} offset {}: follower did not move over the last history step",
            sample.episode_id, sample.offset
        )));
    }
    Ok(to_ego(sample, d))
}

/// Like [`normalize`], but falls back to the most recent non-zero history
/// step and then to the window's `e_d` when the follower is stationary.
pub fn normalize_robust(sample: &SampleWindow) -> Result<SampleWindow> {
    let heading = sample
        .x_fol_his
        .windows(2)
        .rev()
        .map(|w| sub(w[1], w[0]))
        .find(|d| norm(*d) > 1e-9)
        .unwrap_or(sample.e_d);
    if norm(heading) == 0.0 {
        return Err(Error::DegenerateDirection(format!("{}: no usable travel direction", sample.episode_id)));
    }
    Ok(to_ego(sample, heading))
}

/// Maps a trajectory expressed in a window's local frame back to world
/// coordinates.
pub fn denormalize(traj: &[Vec2], frame_origin: &FrameOrigin) -> Vec<Vec2> {
    traj.iter().map(|&p| frame_origin.to_world(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Frame, ScenarioTag};
    use proptest::prelude::*;

    fn straight(len: usize, dir: Vec2, start: Vec2, speed: f64) -> Episode {
        let frames = (0..len)
            .map(|i| {
                let s = speed * 0.1 * i as f64;
                let fol = [start[0] + s * dir[0], start[1] + s * dir[1]];
                Frame {
                    t: i as i64,
                    x_fol: fol,
                    x_lea: [fol[0] + 20.0 * dir[0], fol[1] + 20.0 * dir[1]],
                    v_fol: speed,
                    v_lea: speed + 0.5 * (i as f64 * 0.3).sin(),
                }
            })
            .collect();
        Episode { episode_id: "e".into(), dt: 0.1, frames, scenario: ScenarioTag::Synthetic }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_samples(&straight(80, [1.0, 0.0], [0.0, 0.0], 10.0), 30, 50, 10).len(), 1);
        let w = window_samples(&straight(130, [1.0, 0.0], [0.0, 0.0], 10.0), 30, 50, 10);
        let offsets: Vec<usize> = w.iter().map(|s| s.offset).collect();
        assert_eq!(offsets, vec![0, 10, 20, 30, 40, 50]);
        assert!(window_samples(&straight(79, [1.0, 0.0], [0.0, 0.0], 10.0), 30, 50, 10).is_empty());
    }

    #[test]
    fn windows_copy_episode_slices_exactly() {
        let ep = straight(130, [0.6, 0.8], [3.0, -2.0], 7.0);
        for w in window_samples(&ep, 30, 50, 7) {
            for t in 0..30 {
                let f = &ep.frames[w.offset + t];
                assert_eq!(w.x_fol_his[t], f.x_fol);
                assert_eq!(w.x_lea_his[t], f.x_lea);
                assert_eq!(w.v_fol_his[t], f.v_fol);
                assert_eq!(w.v_lea_his[t], f.v_lea);
                assert_eq!(w.dx_his[t], [f.x_lea[0] - f.x_fol[0], f.x_lea[1] - f.x_fol[1]]);
                assert_eq!(w.dv_his[t], f.v_lea - f.v_fol);
            }
            for t in 0..50 {
                assert_eq!(w.x_fol_fut[t], ep.frames[w.offset + 30 + t].x_fol);
                assert_eq!(w.x_lea_fut[t], ep.frames[w.offset + 30 + t].x_lea);
            }
            assert!((norm(w.e_d) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eastbound_is_pure_translation() {
        let ep = straight(80, [1.0, 0.0], [100.0, 5.0], 10.0);
        let w = &window_samples(&ep, 30, 50, 10)[0];
        let n = normalize(w).unwrap();
        let last = w.x_fol_his[29];
        for (a, b) in w.x_fol_fut.iter().zip(&n.x_fol_fut) {
            assert!((a[0] - last[0] - b[0]).abs() < 1e-12);
            assert!((a[1] - last[1] - b[1]).abs() < 1e-12);
        }
        assert_eq!(n.x_fol_his[29], [0.0, 0.0]);
        assert_eq!(n.e_d, [1.0, 0.0]);
    }

    #[test]
    fn northbound_is_rotated_onto_x() {
        let ep = straight(80, [0.0, 1.0], [0.0, 0.0], 10.0);
        let w = &window_samples(&ep, 30, 50, 10)[0];
        let n = normalize(w).unwrap();
        let last = w.x_fol_his[29];
        // A -90 degree rotation maps (x, y) to (y, -x).
        for (a, b) in w.x_lea_fut.iter().zip(&n.x_lea_fut) {
            let expect = [a[1] - last[1], -(a[0] - last[0])];
            assert!((expect[0] - b[0]).abs() < 1e-9 && (expect[1] - b[1]).abs() < 1e-9);
        }
        assert!(n.dx_his.iter().all(|d| (d[0] - 20.0).abs() < 1e-9 && d[1].abs() < 1e-9));
    }

    #[test]
    fn stationary_follower_is_degenerate() {
        let ep = straight(80, [1.0, 0.0], [0.0, 0.0], 0.0);
        let w = &window_samples(&ep, 30, 50, 10)[0];
        assert!(matches!(normalize(w), Err(Error::DegenerateDirection(_))));
        let n = normalize_robust(w).unwrap();
        assert_eq!(n.e_d, [1.0, 0.0]);
    }

    #[test]
    fn normalize_twice_keeps_world_mapping() {
        let ep = straight(80, [-0.8, 0.6], [10.0, 10.0], 9.0);
        let w = &window_samples(&ep, 30, 50, 10)[0];
        let n = normalize(&normalize(w).unwrap()).unwrap();
        let back = denormalize(&n.x_fol_fut, &n.frame_origin);
        for (a, b) in back.iter().zip(&w.x_fol_fut) {
            assert!(norm(sub(*a, *b)) < 1e-9);
        }
    }

    fn random_window() -> impl Strategy<Value = SampleWindow> {
        (prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 10), -3.2..3.2f64, 0.5..30.0f64).prop_map(
            |(pts, heading, speed)| {
                let dir = [heading.cos(), heading.sin()];
                let mut ep = straight(10, dir, [pts[0].0, pts[0].1], speed);
                for (f, p) in ep.frames.iter_mut().zip(&pts) {
                    f.x_lea = [f.x_lea[0] + p.0 * 1e-3, f.x_lea[1] + p.1 * 1e-3];
                }
                window_samples(&ep, 4, 6, 1).remove(0)
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_recovers_positions(w in random_window()) {
            let n = normalize(&w).unwrap();
            for (orig, local) in [(&w.x_fol_his, &n.x_fol_his), (&w.x_lea_his, &n.x_lea_his), (&w.x_fol_fut, &n.x_fol_fut), (&w.x_lea_fut, &n.x_lea_fut)] {
                for (a, b) in orig.iter().zip(denormalize(local, &n.frame_origin)) {
                    prop_assert!(norm(sub(*a, b)) < 1e-9);
                }
            }
        }

        #[test]
        fn normalization_is_an_isometry(w in random_window()) {
            let n = normalize(&w).unwrap();
            let all = |s: &SampleWindow| [&s.x_fol_his[..], &s.x_lea_his[..], &s.x_fol_fut[..], &s.x_lea_fut[..]].concat();
            let (a, b) = (all(&w), all(&n));
            for i in 0..a.len() {
                for j in i + 1..a.len() {
                    prop_assert!((norm(sub(a[i], a[j])) - norm(sub(b[i], b[j]))).abs() < 1e-9);
                }
            }
            prop_assert_eq!(n.e_d, [1.0, 0.0]);
            prop_assert_eq!(*n.x_fol_his.last().unwrap(), [0.0, 0.0]);
        }
    }
}
