//! Scene files (one JSON object per line) and binary feature files.
//!
//! Feature file layout, all little-endian:
//!
//! ```text
//! "R2FT" | u32 version = 1 | u32 scene count
//! per scene: u32 N | u32 D_f | N*D_f f32 object features | N*N*D_f f32 union features
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, PathContext, Result};
use crate::scene::{FeatureSet, Scene};

pub const FEATURE_MAGIC: &[u8; 4] = b"R2FT";
pub const FEATURE_VERSION: u32 = 1;

pub fn scenes_to_string(scenes: &[Scene]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Contract(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    fs::write(path, scenes_to_string(scenes)?).at(path)?;
    Ok(())
}

/// Parses scene lines; blank lines are skipped. Every scene is validated
/// against the structural invariants.
pub fn parse_scenes(text: &str, origin: &str) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: format!("{origin}:{}:{}", lineno + 1, e.column()),
            message: e.to_string(),
        })?;
        scene.validate(None, None)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path).at(path)?;
    parse_scenes(&text, &path.display().to_string())
}

/// Object and union features of one scene as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub num_objects: usize,
    pub feature_dim: usize,
    pub object_features: Vec<f64>,
    pub union_features: Vec<f64>,
}

impl From<&FeatureSet> for RawFeatures {
    fn from(f: &FeatureSet) -> Self {
        RawFeatures {
            num_objects: f.num_objects,
            feature_dim: f.feature_dim,
            object_features: f.object_features.clone(),
            union_features: f.union_features.clone(),
        }
    }
}

pub fn encode_features(feats: &[RawFeatures]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(feats.len() as u32).to_le_bytes());
    for f in feats {
        buf.extend_from_slice(&(f.num_objects as u32).to_le_bytes());
        buf.extend_from_slice(&(f.feature_dim as u32).to_le_bytes());
        for v in f.object_features.iter().chain(&f.union_features) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn write_features(path: &Path, feats: &[RawFeatures]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).at(path)?);
    w.write_all(&encode_features(feats)).at(path)?;
    w.flush().at(path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                location: format!("{}@{}", self.origin, self.pos),
                message: format!("truncated: needed {n} more bytes"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

/// Decodes a feature file. When `expected_dim` is given, every scene must
/// carry that feature width.
pub fn decode_features(bytes: &[u8], origin: &str, expected_dim: Option<usize>) -> Result<Vec<RawFeatures>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    if c.take(4)? != FEATURE_MAGIC {
        return Err(Error::Parse {
            location: format!("{origin}@0"),
            message: "bad magic, expected R2FT".into(),
        });
    }
    let version = c.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Parse {
            location: format!("{origin}@4"),
            message: format!("unsupported version {version}"),
        });
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let n = c.u32()? as usize;
        let d = c.u32()? as usize;
        if let Some(want) = expected_dim {
            if d != want {
                return Err(Error::validation(
                    format!("#{k}"),
                    format!("feature width {d} does not match configured D_f={want}"),
                ));
            }
        }
        let object_features = c.f32s(n * d)?;
        let union_features = c.f32s(n * n * d)?;
        out.push(RawFeatures {
            num_objects: n,
            feature_dim: d,
            object_features,
            union_features,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            location: format!("{origin}@{}", c.pos),
            message: "trailing bytes after last scene".into(),
        });
    }
    Ok(out)
}

pub fn load_features(path: &Path, expected_dim: Option<usize>) -> Result<Vec<RawFeatures>> {
    let bytes = fs::read(path).at(path)?;
    decode_features(&bytes, &path.display().to_string(), expected_dim)
}

/// Joins a scene with its stored features. Priors come from the scene's
/// per-object `prior` field, or one-hot ground truth when absent.
pub fn assemble(scene: &Scene, raw: RawFeatures, label_count: usize) -> Result<FeatureSet> {
    if raw.num_objects != scene.num_objects() {
        return Err(Error::validation(
            &scene.scene_id,
            format!(
                "feature file has {} objects, scene has {}",
                raw.num_objects,
                scene.num_objects()
            ),
        ));
    }
    scene.validate(Some(label_count), None)?;
    let mut prior = Vec::with_capacity(scene.num_objects() * label_count);
    for o in &scene.objects {
        match &o.prior {
            Some(p) => prior.extend_from_slice(p),
            None => {
                let mut onehot = vec![0.0; label_count];
                onehot[o.label - 1] = 1.0;
                prior.extend(onehot);
            }
        }
    }
    FeatureSet::new(
        raw.num_objects,
        raw.feature_dim,
        label_count,
        raw.object_features,
        raw.union_features,
        prior,
    )
}

/// Loads `<dir>/<split>.scenes.jsonl` with `<dir>/<split>.features.bin`.
pub fn load_split(
    dir: &Path,
    split: &str,
    label_count: usize,
    predicate_count: usize,
    feature_dim: usize,
) -> Result<Vec<(Scene, FeatureSet)>> {
    let scenes = load_scenes(&dir.join(format!("{split}.scenes.jsonl")))?;
    let raw = load_features(&dir.join(format!("{split}.features.bin")), Some(feature_dim))?;
    if raw.len() != scenes.len() {
        return Err(Error::validation(
            split,
            format!("{} scenes but {} feature records", scenes.len(), raw.len()),
        ));
    }
    scenes
        .into_iter()
        .zip(raw)
        .map(|(s, r)| {
            s.validate(Some(label_count), Some(predicate_count))?;
            let f = assemble(&s, r, label_count)?;
            Ok((s, f))
        })
        .collect()
}

pub fn write_split(dir: &Path, split: &str, data: &[(Scene, FeatureSet)]) -> Result<()> {
    let scenes: Vec<Scene> = data.iter().map(|(s, _)| s.clone()).collect();
    let raw: Vec<RawFeatures> = data.iter().map(|(_, f)| f.into()).collect();
    write_scenes(&dir.join(format!("{split}.scenes.jsonl")), &scenes)?;
    write_features(&dir.join(format!("{split}.features.bin")), &raw)
}
