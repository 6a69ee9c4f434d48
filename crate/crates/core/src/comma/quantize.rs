use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};

/// Square grid over the ground plane; one token per occupied cell.
///
/// Cell side is the mean displacement between consecutive observed steps of
/// the same pedestrian. Ids `0..cells.len()` are coordinate tokens, followed
/// by the `MASK` and `PAD` specials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantizerRepr", into = "QuantizerRepr")]
pub struct Quantizer {
    pub cell: f64,
    /// Occupied cells in lexicographic order.
    pub cells: Vec<(i64, i64)>,
    index: HashMap<(i64, i64), usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct QuantizerRepr {
    cell: f64,
    cells: Vec<(i64, i64)>,
}

impl TryFrom<QuantizerRepr> for Quantizer {
    type Error = Error;

    fn try_from(r: QuantizerRepr) -> Result<Self> {
        Self::from_cells(r.cell, r.cells)
    }
}

impl From<Quantizer> for QuantizerRepr {
    fn from(q: Quantizer) -> Self {
        Self { cell: q.cell, cells: q.cells }
    }
}

/// Scene positions in meters, `None` where masked; `[T_obs + T_pred][n_max]`.
pub fn scene_positions(scene: &Scene) -> Vec<Vec<Option<(f64, f64)>>> {
    let (to, tp, n) = (scene.t_obs(), scene.t_pred(), scene.n_max());
    let to_m = |x: f64, y: f64| scene.norm.map_or((x, y), |p| p.denormalize_point(x, y));
    let mut out = vec![vec![None; n]; to + tp];
    for (t, row) in out.iter_mut().enumerate() {
        for (a, slot) in row.iter_mut().enumerate() {
            *slot = if t < to {
                (scene.input_mask.at(&[t, a]) > 0.5).then(|| to_m(scene.inputs.at(&[t, a, 0]), scene.inputs.at(&[t, a, 1])))
            } else {
                let u = t - to;
                (scene.target_mask.at(&[u, a]) > 0.5).then(|| to_m(scene.targets.at(&[u, a, 0]), scene.targets.at(&[u, a, 1])))
            };
        }
    }
    out
}

impl Quantizer {
    pub fn from_cells(cell: f64, mut cells: Vec<(i64, i64)>) -> Result<Self> {
        if !(cell > 0.0) || !cell.is_finite() {
            return Err(Error::Config(format!("cell size {cell} must be positive")));
        }
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(Error::Data("quantizer needs at least one occupied cell".into()));
        }
        let index = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self { cell, cells, index })
    }

    /// Builds the grid from training scenes only.
    pub fn fit(scenes: &[Scene]) -> Result<Self> {
        let tracks: Vec<_> = scenes.iter().map(scene_positions).collect();
        let (mut total, mut count) = (0.0, 0usize);
        for grid in &tracks {
            for t in 1..grid.len() {
                for a in 0..grid[t].len() {
                    if let (Some(p), Some(q)) = (grid[t - 1][a], grid[t][a]) {
                        total += (q.0 - p.0).hypot(q.1 - p.1);
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::Data("cannot fit a quantizer on an empty training corpus".into()));
        }
        let cell = total / count as f64;
        let cells = tracks.iter().flatten().flatten().flatten().map(|&(x, y)| Self::cell_of_raw(cell, x, y)).collect();
        Self::from_cells(cell, cells)
    }

    fn cell_of_raw(cell: f64, x: f64, y: f64) -> (i64, i64) {
        ((x / cell).floor() as i64, (y / cell).floor() as i64)
    }

    /// Coordinate tokens plus the two specials.
    pub fn vocab_size(&self) -> usize {
        self.cells.len() + 2
    }

    pub fn mask_token(&self) -> usize {
        self.cells.len()
    }

    pub fn pad_token(&self) -> usize {
        self.cells.len() + 1
    }

    /// Token of the cell holding `(x, y)`, or of the nearest occupied cell.
    pub fn quantize_point(&self, x: f64, y: f64) -> usize {
        let c = Self::cell_of_raw(self.cell, x, y);
        if let Some(&i) = self.index.get(&c) {
            return i;
        }
        let mut best = (f64::INFINITY, 0);
        for (i, &(cx, cy)) in self.cells.iter().enumerate() {
            let (px, py) = self.center((cx, cy));
            let d = (px - x).hypot(py - y);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn center(&self, (cx, cy): (i64, i64)) -> (f64, f64) {
        ((cx as f64 + 0.5) * self.cell, (cy as f64 + 0.5) * self.cell)
    }

    /// Cell center of a coordinate token.
    pub fn dequantize(&self, token: usize) -> Result<(f64, f64)> {
        self.cells
            .get(token)
            .map(|&c| self.center(c))
            .ok_or_else(|| Error::Data(format!("token {token} is not a coordinate token")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_round_trip_and_neighbours_share_tokens() {
        let q = Quantizer::from_cells(0.5, vec![(0, 0), (1, 0), (3, 2)]).unwrap();
        for t in 0..3 {
            let (x, y) = q.dequantize(t).unwrap();
            assert_eq!(q.quantize_point(x, y), t);
        }
        assert_eq!(q.quantize_point(0.6, 0.1), q.quantize_point(0.9, 0.4));
        // Unoccupied cell (2, 2) is nearest to (3, 2).
        assert_eq!(q.quantize_point(1.2, 1.2), 2);
        assert_eq!(q.vocab_size(), 5);
        assert!(q.dequantize(q.mask_token()).is_err());
        let back: Quantizer = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Quantizer::fit(&[]).is_err());
        assert!(Quantizer::from_cells(0.5, vec![]).is_err());
    }
}
