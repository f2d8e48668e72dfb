//! Synthetic seen/unseen worlds.
//!
//! Each class has a semantic vector `s_k ~ N(0, I/D)` in the text space (its
//! description surrogate, roughly unit norm). The frozen visual encoder renders it as the prototype
//! `s_k A + b`, where `A` is a seed-wide mixing matrix and `b` a static
//! background shared by all classes; this is the cross-modal gap the trainable
//! parts have to bridge. Seen and unseen classes share `A` and `b`, so what is
//! learned on seen classes can transfer.

use sha2::{Digest, Sha256};

use super::classes::{default_class_list, load_class_list, ClassEntry};
use super::config::ExperimentConfig;
use crate::backbone_sim::{generate_video, FrameFeatures, SyntheticVideoSpec, VideoDims};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, matmul, RngStream, Tensor};
use crate::text_space::negative_descriptions;

pub const MAX_PROTOTYPE_RETRIES: u64 = 1000;

const STREAM_WORLD: u64 = 1;
const STREAM_SEMANTIC: u64 = 2;
const STREAM_NEGATIVE: u64 = 3;
const STREAM_VIDEOS: u64 = 4;
const STREAM_MODEL: u64 = 5;
const SPLIT_SEEN: u64 = 0;
const SPLIT_UNSEEN: u64 = 1;

/// Class-shared parts of the visual renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// `[D, C]` text-to-visual mixing.
    pub mixing: Tensor,
    /// `[C]` static background.
    pub background: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub entries: Vec<ClassEntry>,
    /// `[K, D]` description surrogates.
    pub semantic: Tensor,
    /// `[K, D]` negative-description surrogates.
    pub negative: Tensor,
    /// `[K, C]` rendered visual prototypes.
    pub prototypes: Tensor,
}

impl ClassSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub classes: ClassSet,
    pub videos: Vec<FrameFeatures>,
    /// 0-based index into `classes`.
    pub labels: Vec<usize>,
    /// 1-based motion frames injected into each video.
    pub motion_frames: Vec<Vec<usize>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// SHA-256 over everything in the split, in a fixed order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.classes.semantic, &self.classes.negative, &self.classes.prototypes] {
            h.update(t.to_bytes());
        }
        for e in &self.classes.entries {
            h.update(e.id.to_le_bytes());
            h.update(e.name.as_bytes());
        }
        for (v, (y, m)) in self.videos.iter().zip(self.labels.iter().zip(&self.motion_frames)) {
            h.update(v.tensor().to_bytes());
            h.update((*y as u64).to_le_bytes());
            for f in m {
                h.update((*f as u64).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training (seen) and zero-shot test (unseen) splits for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub world: World,
    pub train: Split,
    pub test: Split,
}

/// Root stream for everything drawn under `seed`.
pub fn root_stream(seed: u64) -> RngStream {
    RngStream::new(seed, 0)
}

/// Stream for model initialization; disjoint from all data streams.
pub fn model_stream(seed: u64) -> RngStream {
    root_stream(seed).derive(STREAM_MODEL)
}

fn rect_identity(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.set(&[i, i], 1.0);
    }
    t
}

/// Rectangular identity used as the initial `[C, D]` pooling projection.
pub fn identity_projection(channels: usize, dim: usize) -> Tensor {
    rect_identity(channels, dim)
}

fn build_world(cfg: &ExperimentConfig, root: RngStream) -> World {
    let mut s = root.derive(STREAM_WORLD).generator();
    let (d, c) = (cfg.embed_dim, cfg.channels);
    let noise = s.gaussian(&[d, c], cfg.modality_gap / (d as f64).sqrt());
    let mixing = rect_identity(d, c).add(&noise).expect("same shape");
    let background = Tensor::vector(s.sphere(c, cfg.background));
    World { mixing, background }
}

fn render(world: &World, semantic: &[f64]) -> Vec<f64> {
    let row = Tensor::vector(semantic.to_vec())
        .reshape(&[1, semantic.len()])
        .expect("row");
    let out = matmul(&row, &world.mixing).expect("mixing shape");
    out.data().iter().zip(world.background.data()).map(|(a, b)| a + b).collect()
}

fn too_close(a: &[f64], others: &[Vec<f64>], limit: f64) -> Result<bool> {
    let a = Tensor::vector(a.to_vec());
    for o in others {
        if cosine_sim(&a, &Tensor::vector(o.clone()))? >= limit {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Draws semantic vectors for `entries`, rejecting any whose semantic or rendered
/// prototype is within `cfg.separation` cosine of an earlier class (including `prior`).
fn draw_classes(
    cfg: &ExperimentConfig,
    world: &World,
    root: RngStream,
    split: u64,
    entries: &[ClassEntry],
    prior: &ClassSet,
) -> Result<ClassSet> {
    let d = cfg.embed_dim;
    let mut sem: Vec<Vec<f64>> = (0..prior.len()).map(|k| prior.semantic.row(k).to_vec()).collect();
    let mut vis: Vec<Vec<f64>> = (0..prior.len()).map(|k| prior.prototypes.row(k).to_vec()).collect();
    let start = sem.len();
    for e in entries {
        let class_stream = root.derive(STREAM_SEMANTIC).derive(e.key());
        let mut accepted = false;
        for attempt in 0..MAX_PROTOTYPE_RETRIES {
            let s = class_stream
                .derive(attempt)
                .generator()
                .gaussian(&[d], 1.0 / (d as f64).sqrt())
                .data()
                .to_vec();
            let v = render(world, &s);
            if !too_close(&s, &sem, cfg.separation)? && !too_close(&v, &vis, cfg.separation)? {
                sem.push(s);
                vis.push(v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::degenerate(
                "build_dataset",
                format!(
                    "class {} ({}) could not be separated below cosine {} after {} draws",
                    e.id, e.name, cfg.separation, MAX_PROTOTYPE_RETRIES
                ),
            ));
        }
    }
    let semantic = Tensor::from_rows(&sem[start..])?;
    let prototypes = Tensor::from_rows(&vis[start..])?;
    let negative = negative_descriptions(&semantic, &mut root.derive(STREAM_NEGATIVE).derive(split).generator());
    Ok(ClassSet {
        entries: entries.to_vec(),
        semantic,
        negative,
        prototypes,
    })
}

fn draw_videos(cfg: &ExperimentConfig, root: RngStream, split: u64, classes: &ClassSet) -> Result<Split> {
    let c = cfg.channels;
    let dims = VideoDims {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
    };
    let mut out = Split {
        classes: classes.clone(),
        videos: Vec::new(),
        labels: Vec::new(),
        motion_frames: Vec::new(),
    };
    for (k, e) in classes.entries.iter().enumerate() {
        for i in 0..cfg.videos_per_class as u64 {
            let stream = root.derive(STREAM_VIDEOS).derive(split).derive(e.key()).derive(i);
            let motion: Vec<usize> = stream
                .derive(0)
                .generator()
                .subset(cfg.frames, cfg.motion_frames)
                .into_iter()
                .map(|f| f + 1)
                .collect();
            // Each video renders its own draw of the class: prototype plus a small shift.
            let shift = stream.derive(2).generator().gaussian(&[c], cfg.intra_class_std / (c as f64).sqrt());
            let proto = Tensor::new(vec![1, c], classes.prototypes.row(k).to_vec())?.add(&shift.reshape(&[1, c])?)?;
            let spec = SyntheticVideoSpec {
                class_id: 0,
                motion_frames: motion.clone(),
                motion_amplitude: cfg.motion_amplitude,
                noise_sigma: cfg.noise_sigma,
            };
            out.videos.push(generate_video(&spec, &proto, dims, stream.derive(1))?);
            out.labels.push(k);
            out.motion_frames.push(motion);
        }
    }
    Ok(out)
}

fn empty_set(d: usize, c: usize) -> ClassSet {
    ClassSet {
        entries: Vec::new(),
        semantic: Tensor::zeros(&[1, d]),
        negative: Tensor::zeros(&[1, d]),
        prototypes: Tensor::zeros(&[1, c]),
    }
}

/// Class entries for the run: the configured list file, or generated placeholders.
pub fn class_entries(cfg: &ExperimentConfig) -> Result<(Vec<ClassEntry>, Vec<ClassEntry>)> {
    let want = cfg.k_seen + cfg.k_unseen;
    let all = match &cfg.classes_file {
        Some(p) => load_class_list(p)?,
        None => default_class_list(want),
    };
    if all.len() < want {
        return Err(Error::Parameter {
            name: "classes",
            reason: format!("class list has {} entries, need k_seen + k_unseen = {want}", all.len()),
        });
    }
    let mut keys: Vec<u64> = all[..want].iter().map(ClassEntry::key).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.len() != want {
        return Err(Error::Parameter {
            name: "classes",
            reason: "description seeds must be distinct".into(),
        });
    }
    Ok((all[..cfg.k_seen].to_vec(), all[cfg.k_seen..want].to_vec()))
}

/// Builds both splits. Seen classes and their videos are drawn without reading
/// any unseen-class state, so the training view depends only on seen-class inputs.
pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let root = root_stream(seed);
    let world = build_world(cfg, root);
    let (seen_entries, unseen_entries) = class_entries(cfg)?;
    let empty = empty_set(cfg.embed_dim, cfg.channels);
    let seen = draw_classes(cfg, &world, root, SPLIT_SEEN, &seen_entries, &empty)?;
    let unseen = draw_classes(cfg, &world, root, SPLIT_UNSEEN, &unseen_entries, &seen)?;
    let train = draw_videos(cfg, root, SPLIT_SEEN, &seen)?;
    let test = draw_videos(cfg, root, SPLIT_UNSEEN, &unseen)?;
    Ok(Dataset {
        seed,
        world,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            k_seen: 2,
            k_unseen: 2,
            videos_per_class: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn counts() {
        let ds = build_dataset(&small(), 0).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.train.labels, vec![0, 1]);
    }

    #[test]
    fn deterministic() {
        let cfg = ExperimentConfig::default();
        let a = build_dataset(&cfg, 3).unwrap();
        let b = build_dataset(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.digest(), build_dataset(&cfg, 4).unwrap().train.digest());
    }

    #[test]
    fn prototypes_separated() {
        for seed in 0..5 {
            let ds = build_dataset(&ExperimentConfig::default(), seed).unwrap();
            let mut sem = Vec::new();
            let mut vis = Vec::new();
            for set in [&ds.train.classes, &ds.test.classes] {
                for k in 0..set.len() {
                    sem.push(Tensor::vector(set.semantic.row(k).to_vec()));
                    vis.push(Tensor::vector(set.prototypes.row(k).to_vec()));
                }
            }
            for list in [&sem, &vis] {
                for i in 0..list.len() {
                    for j in 0..i {
                        assert!(cosine_sim(&list[i], &list[j]).unwrap() < 0.9);
                    }
                }
            }
        }
    }

    #[test]
    fn training_view_ignores_unseen_configuration() {
        let cfg = ExperimentConfig::default();
        let a = build_dataset(&cfg, 1).unwrap();
        let b = build_dataset(
            &ExperimentConfig {
                k_unseen: 7,
                ..cfg
            },
            1,
        )
        .unwrap();
        assert_eq!(a.train.digest(), b.train.digest());
        assert_ne!(a.test.digest(), b.test.digest());
    }

    #[test]
    fn impossible_separation_errors() {
        // More than D + 1 vectors cannot all have pairwise negative cosine.
        let cfg = ExperimentConfig {
            separation: 1e-9,
            k_seen: 18,
            ..small()
        };
        assert!(matches!(build_dataset(&cfg, 0), Err(Error::Degenerate { .. })));
    }
}
