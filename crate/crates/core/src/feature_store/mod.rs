//! Per-tracklet feature volumes on disk and in memory.

pub mod hfv1;
pub mod manifest;
pub mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use manifest::{Manifest, Record, Split};
pub use synthetic::{gen_synthetic, stream_seed, write_dataset, Cue, Stream, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrackletMeta {
    pub subject_id: u32,
    pub tracklet_id: u32,
    pub clothes_id: Option<u32>,
    pub camera_id: u32,
}

impl From<&Record> for TrackletMeta {
    fn from(r: &Record) -> Self {
        Self {
            subject_id: r.subject_id,
            tracklet_id: r.tracklet_id,
            clothes_id: r.clothes_id,
            camera_id: r.camera_id,
        }
    }
}

/// A `[T, K, C]` volume: `T` frames, one CLS token plus a square patch grid,
/// and `C = 4d` channels from four stacked backbone layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub data: Tensor,
    pub meta: TrackletMeta,
}

/// `K` must be one CLS token plus a non-empty square grid.
pub fn check_token_grid(tokens: usize) -> Result<usize> {
    if tokens < 2 {
        return Err(Error::Shape(format!("need at least 2 tokens, got {tokens}")));
    }
    let side = (tokens - 1).isqrt();
    if side * side != tokens - 1 {
        return Err(Error::Shape(format!(
            "tokens - 1 = {} is not a perfect square",
            tokens - 1
        )));
    }
    Ok(side)
}

impl FeatureVolume {
    pub fn new(data: Tensor, meta: TrackletMeta) -> Result<Self> {
        let &[_, k, c] = data.shape() else {
            return Err(Error::Shape(format!(
                "feature volume must be [T, K, C], got {:?}",
                data.shape()
            )));
        };
        check_token_grid(k)?;
        if c % 4 != 0 {
            return Err(Error::Shape(format!("channels ({c}) must be divisible by 4")));
        }
        if !data.is_finite() {
            return Err(Error::Numeric {
                coordinate: data.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
                message: "feature volume holds a non-finite value".into(),
            });
        }
        Ok(Self { data, meta })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn tokens(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

pub fn write_volume(volume: &FeatureVolume, path: &Path) -> Result<()> {
    hfv1::write_tensor(&volume.data, path)
}

pub fn read_volume(path: &Path, meta: TrackletMeta) -> Result<FeatureVolume> {
    FeatureVolume::new(hfv1::read_tensor(path)?, meta)
}

/// Load every record of a manifest, in manifest order.
pub fn load_all(manifest: &Manifest) -> Result<Vec<FeatureVolume>> {
    manifest
        .records
        .iter()
        .map(|r| read_volume(&manifest.resolve(r), r.into()))
        .collect()
}

/// Read a manifest file, validate it and load its volumes.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, Vec<FeatureVolume>)> {
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate_records()?;
    let volumes = load_all(&manifest)?;
    Ok((manifest, volumes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TrackletMeta {
        TrackletMeta {
            subject_id: 1,
            tracklet_id: 2,
            clothes_id: None,
            camera_id: 0,
        }
    }

    #[test]
    fn token_grid() {
        assert_eq!(check_token_grid(197).unwrap(), 14);
        assert_eq!(check_token_grid(5).unwrap(), 2);
        assert!(check_token_grid(1).is_err());
        assert!(check_token_grid(6).is_err());
    }

    #[test]
    fn volume_invariants() {
        assert!(FeatureVolume::new(Tensor::zeros(&[2, 5, 8]), meta()).is_ok());
        assert!(FeatureVolume::new(Tensor::zeros(&[2, 5, 6]), meta()).is_err());
        assert!(FeatureVolume::new(Tensor::zeros(&[2, 6, 8]), meta()).is_err());
        let mut t = Tensor::zeros(&[1, 2, 4]);
        t.data_mut()[3] = f64::INFINITY;
        assert!(matches!(
            FeatureVolume::new(t, meta()),
            Err(Error::Numeric { coordinate: 3, .. })
        ));
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_subjects: 2,
            tracklets_per_subject: 2,
            frames: 3,
            tokens: 5,
            channels: 16,
            ..SyntheticSpec::default()
        };
        let (manifest, vols) = gen_synthetic(&spec).unwrap();
        write_dataset(dir.path(), &manifest, &vols).unwrap();
        let (back_manifest, back) = load_dataset(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back_manifest.records, manifest.records);
        assert_eq!(back, vols);
    }
}
