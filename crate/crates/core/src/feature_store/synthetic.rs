//! Synthetic tracklet datasets with planted identity cues.
//!
//! Channel layout for `C` channels, block width `w = C / 8`:
//!
//! | channels        | cue                                                  |
//! |-----------------|------------------------------------------------------|
//! | `[0, w)`        | long-term: per-subject constant offset               |
//! | `[w, 2w)`       | short-term: per-(subject, clothes) constant offset   |
//! | `[2w, 3w)`      | temporal: sinusoid at a per-subject frequency        |
//! | `[3w, C)`       | noise only                                           |
//!
//! The temporal block alternates sine and cosine channels so the cue is a
//! rotation at angular speed `ω_s` with a random starting phase per tracklet.
//! Every random draw comes from its own ChaCha stream keyed on
//! `(seed, stream, subject, tracklet-or-clothes)`, so any single quantity can
//! be regenerated without replaying the rest of the dataset.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Record, Split};
use super::{FeatureVolume, TrackletMeta};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TEMPORAL_AMPLITUDE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cue {
    LongTerm,
    ShortTerm,
    Temporal,
    Mixed,
}

impl Cue {
    pub fn long_term(self) -> bool {
        matches!(self, Cue::LongTerm | Cue::Mixed)
    }
    pub fn short_term(self) -> bool {
        matches!(self, Cue::ShortTerm | Cue::Mixed)
    }
    pub fn temporal(self) -> bool {
        matches!(self, Cue::Temporal | Cue::Mixed)
    }
}

impl std::str::FromStr for Cue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long_term" => Ok(Cue::LongTerm),
            "short_term" => Ok(Cue::ShortTerm),
            "temporal" => Ok(Cue::Temporal),
            "mixed" => Ok(Cue::Mixed),
            other => Err(Error::Config(format!("unknown cue {other:?}"))),
        }
    }
}

/// Independent random streams used by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    LongOffset = 1,
    ShortOffset = 2,
    Phase = 3,
    Noise = 4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_subjects: usize,
    pub tracklets_per_subject: usize,
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    pub cue: Cue,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Query and gallery tracklets of a subject share clothes (and hence
    /// the short-term offset).
    pub same_clothes: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_subjects: 8,
            tracklets_per_subject: 4,
            frames: 4,
            tokens: 17,
            channels: 64,
            cue: Cue::Mixed,
            noise_sigma: 0.1,
            seed: 0,
            same_clothes: true,
        }
    }
}

impl SyntheticSpec {
    pub fn block_width(&self) -> usize {
        self.channels / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subjects < 2 {
            return Err(Error::Config("num_subjects must be at least 2".into()));
        }
        if self.tracklets_per_subject < 2 {
            return Err(Error::Config("tracklets_per_subject must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        if !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by 4",
                self.channels
            )));
        }
        if self.block_width() == 0 {
            return Err(Error::Config(format!(
                "cue blocks need at least 8 channels, got {}",
                self.channels
            )));
        }
        super::check_token_grid(self.tokens).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Split for tracklet `j` of a subject: with four or more tracklets the
    /// last two are held out as query and gallery.
    pub fn split_of(&self, tracklet: usize) -> Split {
        let n = self.tracklets_per_subject;
        if n < 4 || tracklet + 2 < n {
            Split::Train
        } else if tracklet + 2 == n {
            Split::Query
        } else {
            Split::Gallery
        }
    }

    pub fn clothes_of(&self, tracklet: usize) -> u32 {
        let n = self.tracklets_per_subject;
        match self.split_of(tracklet) {
            Split::Query | Split::Gallery if self.same_clothes => (n - 2) as u32,
            _ => tracklet as u32,
        }
    }

    /// Angular frequency of subject `s`, evenly spaced inside `(0, π)`.
    pub fn omega(&self, subject: usize) -> f64 {
        PI * (subject + 1) as f64 / (self.num_subjects + 1) as f64
    }
}

/// Seed for one generator stream; SplitMix64 finalizer over the key.
pub fn stream_seed(seed: u64, stream: Stream, subject: u64, index: u64) -> u64 {
    let mut z = seed
        ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ subject.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ index.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: Stream, subject: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, subject as u64, index as u64))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Manifest, Vec<FeatureVolume>)> {
    spec.validate()?;
    let (t_len, k_len, c_len) = (spec.frames, spec.tokens, spec.channels);
    let w = spec.block_width();
    let mut records = Vec::new();
    let mut volumes = Vec::new();

    for s in 0..spec.num_subjects {
        let long = gaussian_vec(&mut rng_for(spec.seed, Stream::LongOffset, s, 0), w);
        let omega = spec.omega(s);
        for j in 0..spec.tracklets_per_subject {
            let clothes = spec.clothes_of(j);
            let short = gaussian_vec(&mut rng_for(spec.seed, Stream::ShortOffset, s, clothes as usize), w);
            let phase: f64 = rng_for(spec.seed, Stream::Phase, s, j).random_range(0.0..TAU);
            let mut noise_rng = rng_for(spec.seed, Stream::Noise, s, j);

            let mut data = vec![0.0; t_len * k_len * c_len];
            for t in 0..t_len {
                for k in 0..k_len {
                    for c in 0..c_len {
                        let mut v = 0.0;
                        if c < w {
                            if spec.cue.long_term() {
                                v += long[c];
                            }
                        } else if c < 2 * w {
                            if spec.cue.short_term() {
                                v += short[c - w];
                            }
                        } else if c < 3 * w && spec.cue.temporal() {
                            let quadrature = ((c - 2 * w) % 2) as f64 * FRAC_PI_2;
                            v += TEMPORAL_AMPLITUDE * (omega * t as f64 + phase + quadrature).sin();
                        }
                        if spec.noise_sigma > 0.0 {
                            v += spec.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
                        }
                        // stored as f32 on disk; keep memory and file identical
                        data[(t * k_len + k) * c_len + c] = v as f32 as f64;
                    }
                }
            }

            let tracklet_id = (s * spec.tracklets_per_subject + j) as u32;
            let meta = TrackletMeta {
                subject_id: s as u32,
                tracklet_id,
                clothes_id: Some(clothes),
                camera_id: j as u32,
            };
            records.push(Record {
                path: format!("tracklet_{tracklet_id:05}.hfv1").into(),
                subject_id: meta.subject_id,
                tracklet_id,
                clothes_id: meta.clothes_id,
                camera_id: meta.camera_id,
                split: spec.split_of(j),
            });
            volumes.push(FeatureVolume::new(Tensor::new(vec![t_len, k_len, c_len], data)?, meta)?);
        }
    }
    Ok((Manifest::new(records, ""), volumes))
}

/// Write the volumes and `manifest.jsonl` into `dir` (created if missing).
pub fn write_dataset(dir: &Path, manifest: &Manifest, volumes: &[FeatureVolume]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (record, volume) in manifest.records.iter().zip(volumes) {
        super::write_volume(volume, &dir.join(&record.path))?;
    }
    let placed = Manifest::new(manifest.records.clone(), dir);
    placed.write(&dir.join("manifest.jsonl"))?;
    Ok(placed)
}
