//! Fixed-size masked multi-agent scenes.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::raw::{DatasetId, RawTrack};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Window geometry of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub n_max: usize,
    /// Frames between consecutive window starts.
    pub stride: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { t_obs: 8, t_pred: 12, n_max: 20, stride: 1 }
    }
}

impl SceneConfig {
    pub fn t_total(&self) -> usize {
        self.t_obs + self.t_pred
    }
}

/// Min/max extent used to map a source's coordinates into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl NormParams {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) || ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!(
                "degenerate normalization extent x [{x_min}, {x_max}], y [{y_min}, {y_max}]"
            )));
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    /// Extent of a set of points.
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        Self::new(x0, x1, y0, y1)
    }

    /// Extent of every annotated position.
    pub fn from_tracks<'a>(tracks: impl IntoIterator<Item = &'a RawTrack>) -> Result<Self> {
        Self::from_points(tracks.into_iter().flat_map(|t| t.points.iter().map(|p| (p.x, p.y))))
    }

    /// Extent of every valid position of meter-unit scenes.
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Result<Self> {
        Self::from_points(scenes.into_iter().flat_map(|s| s.valid_positions()))
    }

    pub fn x_extent(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn y_extent(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn normalize_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_min) / self.x_extent(), (y - self.y_min) / self.y_extent())
    }

    pub fn denormalize_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.x_extent() + self.x_min, y * self.y_extent() + self.y_min)
    }

    pub fn normalize_velocity(&self, vx: f64, vy: f64) -> (f64, f64) {
        (vx / self.x_extent(), vy / self.y_extent())
    }
}

/// One multi-agent sample.
///
/// Positions are in meters when `norm` is `None` and in normalized units
/// otherwise. Padded slots carry zero states and zero masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub dataset: DatasetId,
    /// Index of the recording within its dataset.
    pub recording: usize,
    /// Frame id of the first observed step.
    pub start_frame: i64,
    /// `[t_obs, n_max, 4]`: x, y, vx, vy.
    pub inputs: Tensor<f64>,
    /// `[t_pred, n_max, 2]`.
    pub targets: Tensor<f64>,
    /// `[t_obs, n_max]` of {0, 1}.
    pub input_mask: Tensor<f64>,
    /// `[t_pred, n_max]` of {0, 1}.
    pub target_mask: Tensor<f64>,
    /// `[n_max, 2]`: position at the last observed step.
    pub last_observed: Tensor<f64>,
    /// Source pedestrian id of every slot.
    pub agent_ids: Vec<Option<i64>>,
    pub norm: Option<NormParams>,
}

impl Scene {
    pub fn empty(dataset: DatasetId, cfg: &SceneConfig) -> Self {
        let n = cfg.n_max;
        Self {
            dataset,
            recording: 0,
            start_frame: 0,
            inputs: Tensor::zeros(&[cfg.t_obs, n, 4]),
            targets: Tensor::zeros(&[cfg.t_pred, n, 2]),
            input_mask: Tensor::zeros(&[cfg.t_obs, n]),
            target_mask: Tensor::zeros(&[cfg.t_pred, n]),
            last_observed: Tensor::zeros(&[n, 2]),
            agent_ids: vec![None; n],
            norm: None,
        }
    }

    pub fn t_obs(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn t_pred(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn n_max(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Whether slot `n` holds an agent to predict (present at the last observed step).
    pub fn is_active(&self, n: usize) -> bool {
        self.input_mask.at(&[self.t_obs() - 1, n]) > 0.5
    }

    pub fn active_slots(&self) -> Vec<usize> {
        (0..self.n_max()).filter(|&n| self.is_active(n)).collect()
    }

    pub fn agent_count(&self) -> usize {
        self.active_slots().len()
    }

    pub fn valid_positions(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.n_max();
        let obs = (0..self.t_obs() * n)
            .filter(move |&i| self.input_mask.data()[i] > 0.5)
            .map(move |i| (self.inputs.data()[i * 4], self.inputs.data()[i * 4 + 1]));
        let pred = (0..self.t_pred() * n)
            .filter(move |&i| self.target_mask.data()[i] > 0.5)
            .map(move |i| (self.targets.data()[i * 2], self.targets.data()[i * 2 + 1]));
        obs.chain(pred)
    }

    /// Checks the shape and padding invariants.
    pub fn validate(&self) -> Result<()> {
        let (to, tp, n) = (self.t_obs(), self.t_pred(), self.n_max());
        let bad = |m: &str| Err(Error::Data(format!("invalid scene ({} @ {}): {m}", self.dataset, self.start_frame)));
        if self.inputs.shape() != [to, n, 4]
            || self.targets.shape() != [tp, n, 2]
            || self.input_mask.shape() != [to, n]
            || self.target_mask.shape() != [tp, n]
            || self.last_observed.shape() != [n, 2]
            || self.agent_ids.len() != n
        {
            return bad("shape mismatch");
        }
        let binary = |t: &Tensor<f64>| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&self.input_mask) || !binary(&self.target_mask) {
            return bad("masks must be 0/1");
        }
        for i in 0..to * n {
            if self.input_mask.data()[i] == 0.0 && self.inputs.data()[i * 4..i * 4 + 4].iter().any(|&v| v != 0.0) {
                return bad("masked input carries state");
            }
        }
        for i in 0..tp * n {
            if self.target_mask.data()[i] == 0.0 && self.targets.data()[i * 2..i * 2 + 2].iter().any(|&v| v != 0.0) {
                return bad("masked target carries state");
            }
        }
        for slot in 0..n {
            let present = (0..to).any(|t| self.input_mask.at(&[t, slot]) > 0.0) || (0..tp).any(|t| self.target_mask.at(&[t, slot]) > 0.0);
            if !self.is_active(slot) {
                if present || self.last_observed.data()[slot * 2..slot * 2 + 2].iter().any(|&v| v != 0.0) {
                    return bad("inactive slot carries data");
                }
            } else {
                let last = &self.inputs.data()[((to - 1) * n + slot) * 4..][..2];
                if last != &self.last_observed.data()[slot * 2..slot * 2 + 2] {
                    return bad("last_observed disagrees with inputs");
                }
            }
        }
        if self.agent_count() == 0 {
            return bad("no active agent");
        }
        if !self.inputs.is_finite() || !self.targets.is_finite() {
            return bad("non-finite state");
        }
        Ok(())
    }
}

struct FrameIndex {
    frames: Vec<i64>,
    /// Per frame index: (ped_id, x, y).
    members: Vec<Vec<(i64, f64, f64)>>,
    lookup: HashMap<(i64, usize), (f64, f64)>,
}

impl FrameIndex {
    fn new(tracks: &[RawTrack]) -> Self {
        let mut frames: Vec<i64> = tracks.iter().flat_map(|t| t.points.iter().map(|p| p.frame_id)).collect();
        frames.sort_unstable();
        frames.dedup();
        let pos: HashMap<i64, usize> = frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let mut members = vec![Vec::new(); frames.len()];
        let mut lookup = HashMap::new();
        for t in tracks {
            for p in &t.points {
                let fi = pos[&p.frame_id];
                members[fi].push((t.ped_id, p.x, p.y));
                lookup.insert((t.ped_id, fi), (p.x, p.y));
            }
        }
        for m in &mut members {
            m.sort_by_key(|e| e.0);
        }
        Self { frames, members, lookup }
    }
}

/// Picks at most `n_max` of `agents` (ped, x, y): the ones nearest to their
/// centroid, ties broken by pedestrian id. Returned in pedestrian-id order.
pub fn select_agents(agents: &[(i64, f64, f64)], n_max: usize) -> Vec<i64> {
    let mut ids: Vec<i64>;
    if agents.len() <= n_max {
        ids = agents.iter().map(|a| a.0).collect();
    } else {
        let k = agents.len() as f64;
        let cx = agents.iter().map(|a| a.1).sum::<f64>() / k;
        let cy = agents.iter().map(|a| a.2).sum::<f64>() / k;
        let mut ranked: Vec<(f64, i64)> = agents.iter().map(|a| ((a.1 - cx).hypot(a.2 - cy), a.0)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ids = ranked.into_iter().take(n_max).map(|r| r.1).collect();
    }
    ids.sort_unstable();
    ids
}

/// Slides a `t_obs + t_pred` window over the frames of one recording.
///
/// Every pedestrian present at the last observed frame is included (up to
/// `n_max`, nearest to the centroid first). Velocities are per-step position
/// differences inside the window, zero at an agent's first observed step.
/// Windows without any valid target are skipped.
pub fn build_scenes(tracks: &[RawTrack], dataset: DatasetId, recording: usize, cfg: &SceneConfig) -> Vec<Scene> {
    let index = FrameIndex::new(tracks);
    let total = cfg.t_total();
    let stride = cfg.stride.max(1);
    let mut scenes = Vec::new();
    if index.frames.len() < total || cfg.t_obs == 0 || cfg.t_pred == 0 {
        return scenes;
    }
    let n = cfg.n_max;
    for start in (0..=index.frames.len() - total).step_by(stride) {
        let last = start + cfg.t_obs - 1;
        let agents = select_agents(&index.members[last], n);
        if agents.is_empty() {
            continue;
        }
        let mut scene = Scene::empty(dataset, cfg);
        scene.recording = recording;
        scene.start_frame = index.frames[start];
        for (slot, &ped) in agents.iter().enumerate() {
            scene.agent_ids[slot] = Some(ped);
            let mut prev: Option<(f64, f64)> = None;
            for step in 0..total {
                let here = index.lookup.get(&(ped, start + step)).copied();
                if step < cfg.t_obs {
                    if let Some((x, y)) = here {
                        let (vx, vy) = prev.map_or((0.0, 0.0), |(px, py)| (x - px, y - py));
                        let off = (step * n + slot) * 4;
                        scene.inputs.data_mut()[off..off + 4].copy_from_slice(&[x, y, vx, vy]);
                        scene.input_mask.set(&[step, slot], 1.0);
                    }
                } else if let Some((x, y)) = here {
                    let t = step - cfg.t_obs;
                    let off = (t * n + slot) * 2;
                    scene.targets.data_mut()[off..off + 2].copy_from_slice(&[x, y]);
                    scene.target_mask.set(&[t, slot], 1.0);
                }
                prev = here;
            }
            let (x, y) = index.lookup[&(ped, last)];
            scene.last_observed.data_mut()[slot * 2..slot * 2 + 2].copy_from_slice(&[x, y]);
        }
        if scene.target_mask.sum() > 0.0 {
            scenes.push(scene);
        }
    }
    scenes
}

fn map_positions(scene: &mut Scene, f: impl Fn(f64, f64) -> (f64, f64), fv: impl Fn(f64, f64) -> (f64, f64)) {
    let n = scene.n_max();
    for i in 0..scene.t_obs() * n {
        if scene.input_mask.data()[i] > 0.5 {
            let s = &mut scene.inputs.data_mut()[i * 4..i * 4 + 4];
            let (x, y) = f(s[0], s[1]);
            let (vx, vy) = fv(s[2], s[3]);
            s.copy_from_slice(&[x, y, vx, vy]);
        }
    }
    for i in 0..scene.t_pred() * n {
        if scene.target_mask.data()[i] > 0.5 {
            let s = &mut scene.targets.data_mut()[i * 2..i * 2 + 2];
            let (x, y) = f(s[0], s[1]);
            s.copy_from_slice(&[x, y]);
        }
    }
    for slot in 0..n {
        if scene.is_active(slot) {
            let s = &mut scene.last_observed.data_mut()[slot * 2..slot * 2 + 2];
            let (x, y) = f(s[0], s[1]);
            s.copy_from_slice(&[x, y]);
        }
    }
}

/// Maps a meter-unit scene into the `[0, 1]` frame of `params`.
pub fn normalize(scene: &Scene, params: NormParams) -> Result<Scene> {
    if scene.norm.is_some() {
        return Err(Error::Data("scene is already normalized".into()));
    }
    let params = NormParams::new(params.x_min, params.x_max, params.y_min, params.y_max)?;
    let mut out = scene.clone();
    map_positions(&mut out, |x, y| params.normalize_point(x, y), |vx, vy| params.normalize_velocity(vx, vy));
    out.norm = Some(params);
    Ok(out)
}

/// Converts normalized `[.., 2]` positions back to meters.
pub fn denormalize(pred: &Tensor<f64>, params: &NormParams) -> Tensor<f64> {
    let mut out = pred.clone();
    for xy in out.data_mut().chunks_exact_mut(2) {
        let (x, y) = params.denormalize_point(xy[0], xy[1]);
        xy[0] = x;
        xy[1] = y;
    }
    out
}

/// Rotates positions by `theta` about (0.5, 0.5) and velocities about the origin.
pub fn augment_rotate(scene: &Scene, theta: f64) -> Scene {
    if theta == 0.0 {
        return scene.clone();
    }
    let (s, c) = theta.sin_cos();
    let mut out = scene.clone();
    map_positions(
        &mut out,
        |x, y| {
            let (dx, dy) = (x - 0.5, y - 0.5);
            (0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy)
        },
        |vx, vy| (c * vx - s * vy, s * vx + c * vy),
    );
    out
}

/// Rotation angle policy for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationPolicy {
    None,
    /// Uniform over {0, π/2, π, 3π/2}.
    QuarterTurns,
    /// Uniform over [0, 2π).
    Continuous,
}

impl RotationPolicy {
    pub fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            RotationPolicy::None => 0.0,
            RotationPolicy::QuarterTurns => rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2,
            RotationPolicy::Continuous => rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}

impl std::str::FromStr for RotationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "quarter" | "quarter_turns" => Ok(Self::QuarterTurns),
            "continuous" => Ok(Self::Continuous),
            other => Err(Error::Config(format!("unknown rotation policy '{other}'"))),
        }
    }
}

/// Moves slot `perm[i]` of `scene` into slot `i` for every per-agent array.
pub fn permute_agents(scene: &Scene, perm: &[usize]) -> Result<Scene> {
    let n = scene.n_max();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Data(format!("{perm:?} is not a permutation of {n} slots")));
    }
    let mut out = scene.clone();
    let permute = |src: &Tensor<f64>, dst: &mut Tensor<f64>, width: usize| {
        let rows = src.numel() / (n * width);
        for r in 0..rows {
            for (i, &p) in perm.iter().enumerate() {
                let (d, s) = ((r * n + i) * width, (r * n + p) * width);
                dst.data_mut()[d..d + width].copy_from_slice(&src.data()[s..s + width]);
            }
        }
    };
    permute(&scene.inputs, &mut out.inputs, 4);
    permute(&scene.targets, &mut out.targets, 2);
    permute(&scene.input_mask, &mut out.input_mask, 1);
    permute(&scene.target_mask, &mut out.target_mask, 1);
    permute(&scene.last_observed, &mut out.last_observed, 2);
    out.agent_ids = perm.iter().map(|&p| scene.agent_ids[p]).collect();
    Ok(out)
}

/// Applies a random slot permutation; returns the scene and the permutation used.
pub fn shuffle_agents<R: Rng>(scene: &Scene, rng: &mut R) -> (Scene, Vec<usize>) {
    let mut perm: Vec<usize> = (0..scene.n_max()).collect();
    perm.shuffle(rng);
    let out = permute_agents(scene, &perm).expect("shuffled indices form a permutation");
    (out, perm)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::raw::TrackPoint;

    fn straight_track(ped: i64, frames: std::ops::Range<i64>, x0: f64, vx: f64) -> RawTrack {
        RawTrack {
            ped_id: ped,
            points: frames.map(|f| TrackPoint { frame_id: f * 10, x: x0 + vx * f as f64, y: 1.0 + 0.1 * ped as f64 }).collect(),
        }
    }

    #[test]
    fn single_pedestrian_twenty_frames() {
        let tracks = vec![straight_track(4, 0..20, 2.0, 0.4)];
        let scenes = build_scenes(&tracks, DatasetId::Eth, 0, &SceneConfig::default());
        assert_eq!(scenes.len(), 1);
        let s = &scenes[0];
        s.validate().unwrap();
        assert!((0..8).all(|t| s.input_mask.at(&[t, 0]) == 1.0));
        assert!((0..12).all(|t| s.target_mask.at(&[t, 0]) == 1.0));
        assert!((1..20).all(|n| !s.is_active(n)));
        assert_eq!(s.inputs.at(&[0, 0, 2]), 0.0);
        assert!((s.inputs.at(&[3, 0, 2]) - 0.4).abs() < 1e-12);
        assert_eq!(s.agent_ids[0], Some(4));
    }

    #[test]
    fn late_arrival_is_masked_early() {
        // ped 2 appears at observation step 5 (frame index 4).
        let tracks = vec![straight_track(1, 0..20, 0.0, 0.3), straight_track(2, 4..20, 5.0, -0.3)];
        let scenes = build_scenes(&tracks, DatasetId::Hotel, 0, &SceneConfig::default());
        assert_eq!(scenes.len(), 1);
        let s = &scenes[0];
        s.validate().unwrap();
        for t in 0..4 {
            assert_eq!(s.input_mask.at(&[t, 1]), 0.0);
        }
        for t in 4..8 {
            assert_eq!(s.input_mask.at(&[t, 1]), 1.0);
        }
        // first observed step has zero velocity
        assert_eq!(s.inputs.at(&[4, 1, 2]), 0.0);
    }

    #[test]
    fn overflow_keeps_nearest_to_centroid() {
        let tracks: Vec<RawTrack> = (0..25)
            .map(|p| RawTrack {
                ped_id: p,
                points: (0..20)
                    .map(|f| TrackPoint { frame_id: f, x: (p as f64 * 1.7).sin() * p as f64, y: (p as f64 * 0.3).cos() * p as f64 })
                    .collect(),
            })
            .collect();
        let scenes = build_scenes(&tracks, DatasetId::Univ, 0, &SceneConfig::default());
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].agent_count(), 20);

        // brute force: all distances, sort, take 20
        let pts: Vec<(i64, f64, f64)> = tracks.iter().map(|t| (t.ped_id, t.points[7].x, t.points[7].y)).collect();
        let cx = pts.iter().map(|p| p.1).sum::<f64>() / 25.0;
        let cy = pts.iter().map(|p| p.2).sum::<f64>() / 25.0;
        let mut d: Vec<(f64, i64)> = pts.iter().map(|p| (((p.1 - cx).powi(2) + (p.2 - cy).powi(2)).sqrt(), p.0)).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<i64> = d[..20].iter().map(|e| e.1).collect();
        want.sort();
        let got: Vec<i64> = scenes[0].agent_ids.iter().flatten().copied().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn normalization_maps_extent_to_unit_interval() {
        let p = NormParams::new(-2.0, 6.0, 1.0, 5.0).unwrap();
        assert_eq!(p.normalize_point(-2.0, 1.0), (0.0, 0.0));
        assert_eq!(p.normalize_point(6.0, 5.0), (1.0, 1.0));
        assert!(NormParams::new(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn normalized_velocity_matches_position_differences() {
        let tracks = vec![straight_track(1, 0..20, 0.0, 0.37), straight_track(2, 0..20, 9.0, -0.21)];
        let raw = build_scenes(&tracks, DatasetId::Zara1, 0, &SceneConfig::default()).remove(0);
        let params = NormParams::new(-1.0, 12.0, 0.0, 3.0).unwrap();
        let s = normalize(&raw, params).unwrap();
        for slot in 0..2 {
            for t in 1..8 {
                for c in 0..2 {
                    let fd = s.inputs.at(&[t, slot, c]) - s.inputs.at(&[t - 1, slot, c]);
                    assert!((fd - s.inputs.at(&[t, slot, 2 + c])).abs() < 1e-12);
                }
            }
        }
        assert!(normalize(&s, params).is_err());
    }

    #[test]
    fn rotation_full_turn_and_composition() {
        let tracks = vec![straight_track(1, 0..20, 0.0, 0.37), straight_track(2, 0..20, 9.0, -0.21)];
        let raw = build_scenes(&tracks, DatasetId::Zara1, 0, &SceneConfig::default()).remove(0);
        let s = normalize(&raw, NormParams::new(-1.0, 12.0, 0.0, 3.0).unwrap()).unwrap();
        assert_eq!(augment_rotate(&s, 0.0), s);
        let full = augment_rotate(&s, std::f64::consts::TAU);
        assert!(full.inputs.max_abs_diff(&s.inputs) < 1e-9);
        let twice = augment_rotate(&augment_rotate(&s, std::f64::consts::FRAC_PI_2), std::f64::consts::FRAC_PI_2);
        let once = augment_rotate(&s, std::f64::consts::PI);
        assert!(twice.inputs.max_abs_diff(&once.inputs) < 1e-9);
        assert!(twice.targets.max_abs_diff(&once.targets) < 1e-9);
        assert_eq!(once.input_mask, s.input_mask);
    }

    #[test]
    fn swap_moves_targets() {
        let tracks = vec![straight_track(1, 0..20, 0.0, 0.37), straight_track(2, 0..20, 9.0, -0.21)];
        let s = build_scenes(&tracks, DatasetId::Zara1, 0, &SceneConfig::default()).remove(0);
        let mut perm: Vec<usize> = (0..20).collect();
        assert_eq!(permute_agents(&s, &perm).unwrap(), s);
        perm.swap(0, 1);
        let swapped = permute_agents(&s, &perm).unwrap();
        assert_eq!(swapped.targets.at(&[3, 0, 0]), s.targets.at(&[3, 1, 0]));
        assert_eq!(swapped.agent_ids[0], Some(2));
        assert!(permute_agents(&s, &[0; 20]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_round_trips(x in -50.0..50.0f64, y in -50.0..50.0f64, w in 0.5..40.0f64, h in 0.5..40.0f64) {
            let p = NormParams::new(-3.0, -3.0 + w, 2.0, 2.0 + h).unwrap();
            let (nx, ny) = p.normalize_point(x, y);
            let (bx, by) = p.denormalize_point(nx, ny);
            proptest::prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
        }

        #[test]
        fn permutation_inverse_restores_scene(seed in 0u64..1000) {
            let s = crate::data::synth::random_scene(&SceneConfig { n_max: 6, ..SceneConfig::default() }, 4, seed);
            let mut rng = crate::rng::substream(seed, "test.perm");
            let (shuffled, perm) = shuffle_agents(&s, &mut rng);
            proptest::prop_assert_eq!(permute_agents(&shuffled, &invert_permutation(&perm)).unwrap(), s);
        }
    }
}
