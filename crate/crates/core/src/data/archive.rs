//! Binary scene archive.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "PRETRSCN"
//! version  u32      1
//! t_obs    u32
//! t_pred   u32
//! n_max    u32
//! count    u64
//! count × scene:
//!   dataset      u8   (0 eth, 1 hotel, 2 univ, 3 zara1, 4 zara2)
//!   recording    u32
//!   start_frame  i64
//!   has_norm     u8
//!   norm         4 × f64 (x_min, x_max, y_min, y_max; zeros when absent)
//!   inputs       t_obs·n_max·4 × f64
//!   targets      t_pred·n_max·2 × f64
//!   input_mask   t_obs·n_max × f64
//!   target_mask  t_pred·n_max × f64
//!   last_obs     n_max·2 × f64
//!   agent_ids    n_max × i64 (-1 for an empty slot)
//! crc32    u32      over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::data::raw::DatasetId;
use crate::data::scene::{NormParams, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"PRETRSCN";
const VERSION: u32 = 1;

pub fn encode_scenes(scenes: &[Scene], cfg: &SceneConfig) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, cfg.t_obs as u32, cfg.t_pred as u32, cfg.n_max as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(scenes.len() as u64).to_le_bytes());
    for s in scenes {
        if s.t_obs() != cfg.t_obs || s.t_pred() != cfg.t_pred || s.n_max() != cfg.n_max {
            return Err(Error::Data("scene geometry differs from archive header".into()));
        }
        buf.push(s.dataset.code());
        buf.extend_from_slice(&(s.recording as u32).to_le_bytes());
        buf.extend_from_slice(&s.start_frame.to_le_bytes());
        buf.push(s.norm.is_some() as u8);
        let n = s.norm.map_or([0.0; 4], |p| [p.x_min, p.x_max, p.y_min, p.y_max]);
        for t in [&n[..], s.inputs.data(), s.targets.data(), s.input_mask.data(), s.target_mask.data(), s.last_observed.data()] {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for id in &s.agent_ids {
            buf.extend_from_slice(&id.unwrap_or(-1).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Data("scene archive truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_scenes(bytes: &[u8]) -> Result<(SceneConfig, Vec<Scene>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not a scene archive".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Data("scene archive checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported scene archive version {version}")));
    }
    let (t_obs, t_pred, n_max) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let cfg = SceneConfig { t_obs, t_pred, n_max, stride: 1 };
    let count = r.u64()? as usize;
    let mut scenes = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let dataset = DatasetId::from_code(r.u8()?)?;
        let mut s = Scene::empty(dataset, &cfg);
        s.recording = r.u32()? as usize;
        s.start_frame = r.i64()?;
        let has_norm = r.u8()? != 0;
        let n = r.f64s(4)?;
        s.norm = if has_norm { Some(NormParams::new(n[0], n[1], n[2], n[3])?) } else { None };
        s.inputs = Tensor::new(&[t_obs, n_max, 4], r.f64s(t_obs * n_max * 4)?)?;
        s.targets = Tensor::new(&[t_pred, n_max, 2], r.f64s(t_pred * n_max * 2)?)?;
        s.input_mask = Tensor::new(&[t_obs, n_max], r.f64s(t_obs * n_max)?)?;
        s.target_mask = Tensor::new(&[t_pred, n_max], r.f64s(t_pred * n_max)?)?;
        s.last_observed = Tensor::new(&[n_max, 2], r.f64s(n_max * 2)?)?;
        s.agent_ids = (0..n_max).map(|_| r.i64().map(|v| (v >= 0).then_some(v))).collect::<Result<_>>()?;
        scenes.push(s);
    }
    if r.pos != body.len() {
        return Err(Error::Data("trailing bytes in scene archive".into()));
    }
    Ok((cfg, scenes))
}

pub fn write_scenes(path: &Path, scenes: &[Scene], cfg: &SceneConfig) -> Result<()> {
    fs::write(path, encode_scenes(scenes, cfg)?).map_err(|e| Error::io(path, e))
}

pub fn read_scenes(path: &Path) -> Result<(SceneConfig, Vec<Scene>)> {
    decode_scenes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::random_scene;

    fn sample() -> (SceneConfig, Vec<Scene>) {
        let cfg = SceneConfig { t_obs: 3, t_pred: 4, n_max: 5, stride: 1 };
        let mut scenes: Vec<Scene> = (0..3).map(|i| random_scene(&cfg, 2 + i, i as u64)).collect();
        scenes[1].norm = None;
        scenes[2].dataset = DatasetId::Zara2;
        (cfg, scenes)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, scenes) = sample();
        let bytes = encode_scenes(&scenes, &cfg).unwrap();
        let (back_cfg, back) = decode_scenes(&bytes).unwrap();
        assert_eq!((back_cfg.t_obs, back_cfg.t_pred, back_cfg.n_max), (3, 4, 5));
        assert_eq!(back, scenes);
        assert_eq!(encode_scenes(&back, &back_cfg).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, scenes) = sample();
        let bytes = encode_scenes(&scenes, &cfg).unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(decode_scenes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(decode_scenes(&bytes[..bytes.len() - 9]).is_err());
        assert!(decode_scenes(b"NOTANARCHIVE").is_err());
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let (cfg, scenes) = sample();
        assert!(encode_scenes(&scenes, &SceneConfig { n_max: 6, ..cfg }).is_err());
    }

    #[test]
    fn empty_archive_round_trips() {
        let cfg = SceneConfig::default();
        let (_, back) = decode_scenes(&encode_scenes(&[], &cfg).unwrap()).unwrap();
        assert!(back.is_empty());
    }
}
