//! Synthetic crowd recordings in the benchmark's annotation layout.
//!
//! Pedestrians enter from the border of a rectangular plaza, walk toward a
//! goal on the far side at a preferred speed and avoid each other with a
//! short-range repulsion. Positions are sampled every 0.4 s (frame ids step
//! by 10). Each source gets its own plaza size, traffic density and seed so
//! that the five folds differ in the way real sources do.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::data::raw::{Dataset, DatasetId, RawTrack, Recording, TrackPoint};
use crate::rng::substream;

/// Generation knobs for one synthetic source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    /// Plaza width and height in meters.
    pub width: f64,
    pub height: f64,
    /// Mean arrivals per frame.
    pub arrival_rate: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
}

impl SynthConfig {
    pub fn for_dataset(id: DatasetId) -> Self {
        let (width, height, arrival_rate) = match id {
            DatasetId::Eth => (22.0, 14.0, 0.35),
            DatasetId::Hotel => (8.0, 12.0, 0.30),
            DatasetId::Univ => (15.0, 14.0, 1.20),
            DatasetId::Zara1 => (15.0, 12.0, 0.30),
            DatasetId::Zara2 => (15.0, 12.0, 0.45),
        };
        Self { frames: 360, width, height, arrival_rate, speed_mean: 1.25, speed_std: 0.2 }
    }
}

const DT: f64 = 0.4;
const FRAME_STEP: i64 = 10;

struct Walker {
    id: i64,
    pos: (f64, f64),
    vel: (f64, f64),
    goal: (f64, f64),
    speed: f64,
    points: Vec<TrackPoint>,
}

fn border_point<R: Rng>(rng: &mut R, side: u8, w: f64, h: f64) -> (f64, f64) {
    match side {
        0 => (0.0, rng.random_range(0.1 * h..0.9 * h)),
        1 => (w, rng.random_range(0.1 * h..0.9 * h)),
        2 => (rng.random_range(0.1 * w..0.9 * w), 0.0),
        _ => (rng.random_range(0.1 * w..0.9 * w), h),
    }
}

/// Generates the tracks of one recording.
pub fn generate_tracks(cfg: &SynthConfig, seed: u64, stream: &str) -> Vec<RawTrack> {
    let mut rng = substream(seed, stream);
    let arrivals = Poisson::new(cfg.arrival_rate).expect("positive arrival rate");
    let speed = Normal::new(cfg.speed_mean, cfg.speed_std).expect("positive speed std");
    let jitter = Normal::new(0.0, 0.04).expect("jitter");
    let mut active: Vec<Walker> = Vec::new();
    let mut done = Vec::new();
    let mut next_id = 1;
    for frame in 0..cfg.frames {
        let k: f64 = arrivals.sample(&mut rng);
        for _ in 0..k as usize {
            let side: u8 = rng.random_range(0..4);
            let start = border_point(&mut rng, side, cfg.width, cfg.height);
            let goal = border_point(&mut rng, side ^ 1, cfg.width, cfg.height);
            let s = speed.sample(&mut rng).clamp(0.5, 2.0);
            let (dx, dy) = (goal.0 - start.0, goal.1 - start.1);
            let norm = dx.hypot(dy).max(1e-6);
            active.push(Walker {
                id: next_id,
                pos: start,
                vel: (s * dx / norm, s * dy / norm),
                goal,
                speed: s,
                points: Vec::new(),
            });
            next_id += 1;
        }
        let snapshot: Vec<(f64, f64)> = active.iter().map(|w| w.pos).collect();
        for (i, w) in active.iter_mut().enumerate() {
            let (dx, dy) = (w.goal.0 - w.pos.0, w.goal.1 - w.pos.1);
            let dist = dx.hypot(dy).max(1e-6);
            let desired = (w.speed * dx / dist, w.speed * dy / dist);
            let (mut fx, mut fy) = (0.0, 0.0);
            for (j, &(ox, oy)) in snapshot.iter().enumerate() {
                if i == j {
                    continue;
                }
                let (rx, ry) = (w.pos.0 - ox, w.pos.1 - oy);
                let d = rx.hypot(ry);
                if d < 2.5 && d > 1e-6 {
                    let push = 1.5 * (-(d - 0.4) / 0.5).exp();
                    fx += push * rx / d;
                    fy += push * ry / d;
                }
            }
            w.vel.0 = 0.7 * w.vel.0 + 0.3 * desired.0 + DT * fx + jitter.sample(&mut rng);
            w.vel.1 = 0.7 * w.vel.1 + 0.3 * desired.1 + DT * fy + jitter.sample(&mut rng);
            w.pos.0 += DT * w.vel.0;
            w.pos.1 += DT * w.vel.1;
            w.points.push(TrackPoint {
                frame_id: frame as i64 * FRAME_STEP,
                x: (w.pos.0 * 1e4).round() / 1e4,
                y: (w.pos.1 * 1e4).round() / 1e4,
            });
        }
        let (w, h) = (cfg.width, cfg.height);
        let (leaving, staying): (Vec<Walker>, Vec<Walker>) = active.into_iter().partition(|wk| {
            let out = wk.pos.0 < -0.5 || wk.pos.0 > w + 0.5 || wk.pos.1 < -0.5 || wk.pos.1 > h + 0.5;
            out || (wk.pos.0 - wk.goal.0).hypot(wk.pos.1 - wk.goal.1) < 0.3
        });
        done.extend(leaving);
        active = staying;
    }
    done.extend(active);
    let mut tracks: Vec<RawTrack> = done
        .into_iter()
        .filter(|w| w.points.len() >= 2)
        .map(|w| RawTrack { ped_id: w.id, points: w.points })
        .collect();
    tracks.sort_by_key(|t| t.ped_id);
    tracks
}

/// One single-recording synthetic dataset per benchmark source.
pub fn generate_corpus(seed: u64, frames: Option<usize>) -> Vec<Dataset> {
    DatasetId::ALL
        .iter()
        .map(|&id| {
            let mut cfg = SynthConfig::for_dataset(id);
            if let Some(f) = frames {
                cfg.frames = f;
            }
            let tracks = generate_tracks(&cfg, seed, &format!("synth/{}", id.name()));
            Dataset { id, recordings: vec![Recording { name: id.name().to_string(), tracks }] }
        })
        .collect()
}

/// Writes `root/<id>.txt` for every dataset.
pub fn write_corpus(root: &std::path::Path, datasets: &[Dataset]) -> crate::Result<()> {
    std::fs::create_dir_all(root).map_err(|e| crate::Error::io(root, e))?;
    for d in datasets {
        let tracks: Vec<RawTrack> = d.recordings.iter().flat_map(|r| r.tracks.iter().cloned()).collect();
        let path = root.join(format!("{}.txt", d.id.name()));
        std::fs::write(&path, crate::data::raw::format_tracks(&tracks)).map_err(|e| crate::Error::io(&path, e))?;
    }
    Ok(())
}

/// A normalized scene with `agents` active slots (`0..agents`) on smooth
/// random paths inside the unit square. Agent 1 misses its first two
/// observations and agent 2 its last target, so masking paths are exercised.
pub fn random_scene(cfg: &crate::data::SceneConfig, agents: usize, seed: u64) -> crate::data::Scene {
    use crate::data::{NormParams, Scene};
    assert!(agents >= 1 && agents <= cfg.n_max, "agent count out of range");
    let mut rng = substream(seed, "synth.random_scene");
    let (to, tp, n) = (cfg.t_obs, cfg.t_pred, cfg.n_max);
    let mut scene = Scene::empty(DatasetId::Eth, cfg);
    scene.start_frame = seed as i64;
    scene.norm = Some(NormParams::new(0.0, 1.0, 0.0, 1.0).expect("unit extent"));
    for a in 0..agents {
        let mut p = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
        let v = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        let mut prev: Option<(f64, f64)> = None;
        for t in 0..to + tp {
            p = (p.0 + v.0 + rng.random_range(-0.003..0.003), p.1 + v.1 + rng.random_range(-0.003..0.003));
            let missing = (a == 1 && t < 2.min(to - 1)) || (a == 2 && t == to + tp - 1);
            if missing {
                prev = None;
                continue;
            }
            if t < to {
                let (vx, vy) = prev.map_or((0.0, 0.0), |q| (p.0 - q.0, p.1 - q.1));
                let base = (t * n + a) * 4;
                scene.inputs.data_mut()[base..base + 4].copy_from_slice(&[p.0, p.1, vx, vy]);
                scene.input_mask.set(&[t, a], 1.0);
            } else {
                let base = ((t - to) * n + a) * 2;
                scene.targets.data_mut()[base..base + 2].copy_from_slice(&[p.0, p.1]);
                scene.target_mask.set(&[t - to, a], 1.0);
            }
            prev = Some(p);
        }
        let base = ((to - 1) * n + a) * 4;
        let last = [scene.inputs.data()[base], scene.inputs.data()[base + 1]];
        scene.last_observed.data_mut()[a * 2..a * 2 + 2].copy_from_slice(&last);
        scene.agent_ids[a] = Some(a as i64);
    }
    scene
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneConfig;

    #[test]
    fn corpus_is_seeded() {
        let a = generate_corpus(1, Some(60));
        assert_eq!(a, generate_corpus(1, Some(60)));
        assert_ne!(a, generate_corpus(2, Some(60)));
        assert_eq!(a.iter().map(|d| d.id).collect::<Vec<_>>(), DatasetId::ALL.to_vec());
    }

    #[test]
    fn tracks_stay_on_the_frame_grid() {
        for d in generate_corpus(4, Some(80)) {
            for t in &d.recordings[0].tracks {
                assert!(t.points.windows(2).all(|w| w[1].frame_id - w[0].frame_id == FRAME_STEP));
                assert!(t.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
            }
        }
    }

    #[test]
    fn random_scene_is_valid() {
        let cfg = SceneConfig { n_max: 6, ..SceneConfig::default() };
        let s = random_scene(&cfg, 4, 9);
        s.validate().unwrap();
        assert_eq!(s.active_slots(), vec![0, 1, 2, 3]);
        assert_eq!(s, random_scene(&cfg, 4, 9));
    }
}
