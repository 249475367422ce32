//! Episode packs: one file holding one or more episodes.
//!
//! Layout:
//!
//! ```text
//! WATFPACK\n
//! <manifest length in bytes, decimal>\n
//! <manifest: pretty-printed JSON, fixed key order>\n
//! <payload: little-endian f32 or f64, [n_samples, M, C] row-major>
//! ```
//!
//! Within an episode, samples are stored support first (class-major,
//! shot-minor) and then queries (class-major); episodes follow each other in
//! stream order. Labels and sample ids live only in the manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::source::EpisodeSource;
use crate::types::{validate_episode, DescriptorSet, Episode, RawEpisode, ValidationReport};

pub const MAGIC: &[u8] = b"WATFPACK\n";
pub const FORMAT_VERSION: u32 = 1;
pub const PACK_EXTENSION: &str = "watfpack";

#[derive(Debug, Error)]
pub enum PackError {
    #[error("bad magic: not an episode pack")]
    BadMagic,
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("unsupported pack format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u64),
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: u64, found: u64 },
    #[error("episodes in one pack must share a shape")]
    MixedShapes,
    #[error("episode {index} in pack is invalid: {report}")]
    InvalidEpisode { index: usize, report: ValidationReport },
    #[error("episode index {index} out of range for a pack of {count}")]
    NoSuchEpisode { index: usize, count: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PackError {
    /// Stable identifier for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            PackError::BadMagic => "bad-magic",
            PackError::MalformedManifest(_) => "malformed-manifest",
            PackError::UnsupportedVersion(_) => "unsupported-version",
            PackError::PayloadLengthMismatch { .. } => "payload-length-mismatch",
            PackError::MixedShapes => "mixed-shapes",
            PackError::InvalidEpisode { .. } => "invalid-episode",
            PackError::NoSuchEpisode { .. } => "no-such-episode",
            PackError::Io { .. } => "io",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        PackError::Io { path: path.to_owned(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(crate::error::Error::Config(format!("unknown dtype `{other}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Support,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub role: Role,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    /// Samples in payload order.
    pub samples: Vec<SampleEntry>,
}

/// Where the descriptors came from. `created` is informational and is not
/// part of any content hash.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub backbone: Option<String>,
    #[serde(default)]
    pub dataset: Option<String>,
    /// Feature-map grid `[H, W]` with `H * W = M`.
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
    #[serde(default)]
    pub created: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub m_descriptors: usize,
    pub c_dim: usize,
    pub dtype: Dtype,
    pub episodes: Vec<EpisodeEntry>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Manifest {
    pub fn samples_per_episode(&self) -> usize {
        self.n_way * (self.k_shot + self.n_query)
    }

    fn episode_bytes(&self) -> u64 {
        (self.samples_per_episode() * self.m_descriptors * self.c_dim * self.dtype.size()) as u64
    }

    pub fn payload_bytes(&self) -> u64 {
        self.episode_bytes() * self.episodes.len() as u64
    }
}

/// Samples of `episode` in pack order, with their roles and labels.
fn ordered_samples(episode: &Episode) -> Vec<(&DescriptorSet, Role, usize)> {
    let mut support: Vec<_> = episode
        .support()
        .iter()
        .enumerate()
        .map(|(j, s)| (s, Role::Support, episode.support_label(j)))
        .collect();
    support.sort_by_key(|&(_, _, label)| label);
    let mut query: Vec<_> = episode
        .query()
        .iter()
        .zip(episode.query_labels())
        .map(|(s, &label)| (s, Role::Query, label))
        .collect();
    query.sort_by_key(|&(_, _, label)| label);
    support.extend(query);
    support
}

/// Serialize `episodes` into pack bytes. Identical inputs give identical bytes.
pub fn encode_pack(episodes: &[Episode], dtype: Dtype, provenance: &Provenance) -> Result<Vec<u8>, PackError> {
    let first = episodes.first().ok_or_else(|| PackError::MalformedManifest("a pack needs at least one episode".into()))?;
    let shape = |e: &Episode| (e.n_way(), e.k_shot(), e.n_query(), e.m_descriptors(), e.c_dim());
    if episodes.iter().any(|e| shape(e) != shape(first)) {
        return Err(PackError::MixedShapes);
    }

    let mut entries = Vec::with_capacity(episodes.len());
    let mut payload = Vec::new();
    for episode in episodes {
        let samples = ordered_samples(episode);
        entries.push(EpisodeEntry {
            samples: samples
                .iter()
                .map(|(s, role, label)| SampleEntry { id: s.sample_id().to_owned(), role: *role, label: *label })
                .collect(),
        });
        for (set, _, _) in samples {
            for &v in set.descriptors().iter() {
                match dtype {
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n_way: first.n_way(),
        k_shot: first.k_shot(),
        n_query: first.n_query(),
        m_descriptors: first.m_descriptors(),
        c_dim: first.c_dim(),
        dtype,
        episodes: entries,
        provenance: provenance.clone(),
    };
    let manifest_text =
        serde_json::to_vec_pretty(&manifest).map_err(|e| PackError::MalformedManifest(e.to_string()))?;

    let mut out = Vec::with_capacity(MAGIC.len() + manifest_text.len() + payload.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", manifest_text.len()).as_bytes());
    out.extend_from_slice(&manifest_text);
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Write `episodes` to `destination`, returning the number of bytes written.
pub fn write_pack(episodes: &[Episode], dtype: Dtype, provenance: &Provenance, destination: &Path) -> Result<u64, PackError> {
    let bytes = encode_pack(episodes, dtype, provenance)?;
    let mut file = File::create(destination).map_err(|e| PackError::io(destination, e))?;
    file.write_all(&bytes).map_err(|e| PackError::io(destination, e))?;
    Ok(bytes.len() as u64)
}

fn parse_manifest(text: &[u8]) -> Result<Manifest, PackError> {
    let value: serde_json::Value =
        serde_json::from_slice(text).map_err(|e| PackError::MalformedManifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| PackError::MalformedManifest("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(PackError::UnsupportedVersion(version));
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| PackError::MalformedManifest(e.to_string()))?;
    let per_episode = manifest.samples_per_episode();
    for (i, entry) in manifest.episodes.iter().enumerate() {
        if entry.samples.len() != per_episode {
            return Err(PackError::MalformedManifest(format!(
                "episode {i} lists {} samples, expected {per_episode}",
                entry.samples.len()
            )));
        }
    }
    Ok(manifest)
}

/// Read the header and manifest, leaving `reader` positioned at the payload.
fn read_header<R: BufRead>(reader: &mut R) -> Result<(Manifest, u64), PackError> {
    let io = |e: std::io::Error| PackError::MalformedManifest(format!("truncated header: {e}"));
    let mut magic = vec![0u8; MAGIC.len()];
    reader.read_exact(&mut magic).map_err(|_| PackError::BadMagic)?;
    if magic != MAGIC {
        return Err(PackError::BadMagic);
    }
    let mut len_line = String::new();
    reader.read_line(&mut len_line).map_err(io)?;
    let manifest_len: usize = len_line
        .trim_end_matches('\n')
        .parse()
        .map_err(|_| PackError::MalformedManifest(format!("bad manifest length line {len_line:?}")))?;
    let mut text = vec![0u8; manifest_len];
    reader.read_exact(&mut text).map_err(io)?;
    let mut newline = [0u8; 1];
    reader.read_exact(&mut newline).map_err(io)?;
    if newline[0] != b'\n' {
        return Err(PackError::MalformedManifest("manifest is not newline-terminated".into()));
    }
    let offset = (MAGIC.len() + len_line.len() + manifest_len + 1) as u64;
    Ok((parse_manifest(&text)?, offset))
}

fn decode_episode(manifest: &Manifest, index: usize, payload: &[u8]) -> Result<Episode, PackError> {
    let (m, c) = (manifest.m_descriptors, manifest.c_dim);
    let size = manifest.dtype.size();
    let sample_bytes = m * c * size;
    let mut raw = RawEpisode {
        n_way: manifest.n_way,
        k_shot: manifest.k_shot,
        n_query: manifest.n_query,
        support: Vec::new(),
        query: Vec::new(),
        query_labels: Vec::new(),
    };
    for (entry, chunk) in manifest.episodes[index].samples.iter().zip(payload.chunks_exact(sample_bytes)) {
        let values: Vec<f64> = match manifest.dtype {
            Dtype::F32 => chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        let data = Array2::from_shape_vec((m, c), values).expect("chunk holds exactly M * C values");
        match entry.role {
            Role::Support => raw.support.push(DescriptorSet::new(data, entry.id.clone(), Some(entry.label))),
            Role::Query => {
                raw.query.push(DescriptorSet::new(data, entry.id.clone(), None));
                raw.query_labels.push(entry.label);
            }
        }
    }
    validate_episode(raw).map_err(|report| PackError::InvalidEpisode { index, report })
}

/// Parse pack bytes into the manifest and every episode, validated.
pub fn decode_pack(bytes: &[u8]) -> Result<(Manifest, Vec<Episode>), PackError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let (manifest, offset) = read_header(&mut cursor)?;
    let payload = &bytes[offset as usize..];
    let expected = manifest.payload_bytes();
    if payload.len() as u64 != expected {
        return Err(PackError::PayloadLengthMismatch { expected, found: payload.len() as u64 });
    }
    let per_episode = manifest.episode_bytes() as usize;
    let episodes = (0..manifest.episodes.len())
        .map(|i| decode_episode(&manifest, i, &payload[i * per_episode..(i + 1) * per_episode]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, episodes))
}

pub fn read_pack(source: &Path) -> Result<(Manifest, Vec<Episode>), PackError> {
    let bytes = std::fs::read(source).map_err(|e| PackError::io(source, e))?;
    decode_pack(&bytes)
}

/// Manifest of the pack at `path` after checking the payload length, without
/// reading the payload.
pub fn read_manifest(path: &Path) -> Result<Manifest, PackError> {
    let file = File::open(path).map_err(|e| PackError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| PackError::io(path, e))?.len();
    let (manifest, offset) = read_header(&mut BufReader::new(file))?;
    let found = file_len.saturating_sub(offset);
    if found != manifest.payload_bytes() {
        return Err(PackError::PayloadLengthMismatch { expected: manifest.payload_bytes(), found });
    }
    Ok(manifest)
}

/// Read only episode `index` of the pack at `path`.
pub fn read_pack_episode(path: &Path, index: usize) -> Result<Episode, PackError> {
    let file = File::open(path).map_err(|e| PackError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| PackError::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    let (manifest, offset) = read_header(&mut reader)?;
    if file_len.saturating_sub(offset) != manifest.payload_bytes() {
        return Err(PackError::PayloadLengthMismatch {
            expected: manifest.payload_bytes(),
            found: file_len.saturating_sub(offset),
        });
    }
    if index >= manifest.episodes.len() {
        return Err(PackError::NoSuchEpisode { index, count: manifest.episodes.len() });
    }
    let per_episode = manifest.episode_bytes();
    reader
        .seek(SeekFrom::Start(offset + index as u64 * per_episode))
        .map_err(|e| PackError::io(path, e))?;
    let mut payload = vec![0u8; per_episode as usize];
    reader.read_exact(&mut payload).map_err(|e| PackError::io(path, e))?;
    decode_episode(&manifest, index, &payload)
}

/// Expand a file, a directory (every `*.watfpack` inside) or a glob pattern
/// into a sorted list of pack paths.
pub fn resolve_pack_paths(spec: &str) -> Result<Vec<PathBuf>, PackError> {
    let path = Path::new(spec);
    let mut paths: Vec<PathBuf> = if path.is_dir() {
        let entries = std::fs::read_dir(path).map_err(|e| PackError::io(path, e))?;
        let mut found = Vec::new();
        for entry in entries {
            let p = entry.map_err(|e| PackError::io(path, e))?.path();
            if p.extension().is_some_and(|ext| ext == PACK_EXTENSION) {
                found.push(p);
            }
        }
        found
    } else if path.exists() {
        vec![path.to_owned()]
    } else {
        let pattern = glob::glob(spec).map_err(|e| PackError::io(path, std::io::Error::other(e.to_string())))?;
        pattern.filter_map(std::result::Result::ok).filter(|p| p.is_file()).collect()
    };
    if paths.is_empty() {
        return Err(PackError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no packs found")));
    }
    paths.sort();
    Ok(paths)
}

/// Episodes of several packs as one stream, loaded on demand.
#[derive(Debug, Clone)]
pub struct PackSet {
    entries: Vec<(PathBuf, usize)>,
}

impl PackSet {
    pub fn open(paths: &[PathBuf]) -> Result<Self, PackError> {
        let mut entries = Vec::new();
        for path in paths {
            let manifest = read_manifest(path)?;
            entries.extend((0..manifest.episodes.len()).map(|i| (path.clone(), i)));
        }
        Ok(PackSet { entries })
    }
}

impl EpisodeSource for PackSet {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn episode(&self, index: usize) -> Result<Episode> {
        let (path, i) = &self.entries[index];
        Ok(read_pack_episode(path, *i)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_episode, SynthSpec};

    fn episode(seed: u64) -> Episode {
        let spec = SynthSpec { m_descriptors: 6, c_dim: 4, n_query: 2, seed, ..SynthSpec::default() };
        generate_episode(&spec).unwrap().episode
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let eps = vec![episode(1), episode(2)];
        let bytes = encode_pack(&eps, Dtype::F64, &Provenance::default()).unwrap();
        let (manifest, back) = decode_pack(&bytes).unwrap();
        assert_eq!(manifest.episodes.len(), 2);
        assert_eq!(back, eps);
        assert_eq!(back[1].content_hash(), eps[1].content_hash());
    }

    #[test]
    fn canonical_bytes() {
        let eps = vec![episode(3)];
        let p = Provenance { backbone: Some("conv4".into()), grid: Some([2, 3]), ..Provenance::default() };
        assert_eq!(encode_pack(&eps, Dtype::F64, &p).unwrap(), encode_pack(&eps, Dtype::F64, &p).unwrap());
    }

    #[test]
    fn manifest_is_readable_text() {
        let bytes = encode_pack(&[episode(1)], Dtype::F32, &Provenance::default()).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("WATFPACK\n"));
        assert!(text.contains("\"format_version\": 1"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_pack(&[episode(1)], Dtype::F64, &Provenance::default()).unwrap();
        let err = decode_pack(&bytes[..bytes.len() - 1]).unwrap_err();
        assert_eq!(err.code(), "payload-length-mismatch");
        assert!(err.to_string().contains("payload length mismatch"));
    }

    #[test]
    fn unknown_version_and_garbage_are_distinct_errors() {
        let bytes = encode_pack(&[episode(1)], Dtype::F64, &Provenance::default()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        assert_eq!(decode_pack(bumped.as_bytes()).unwrap_err().code(), "unsupported-version");

        assert_eq!(decode_pack(b"NOTAPACK\n").unwrap_err().code(), "bad-magic");

        let mut broken = MAGIC.to_vec();
        broken.extend_from_slice(b"5\n{oops\n");
        assert_eq!(decode_pack(&broken).unwrap_err().code(), "malformed-manifest");
    }

    #[test]
    fn mixed_shapes_are_refused() {
        let other = generate_episode(&SynthSpec { m_descriptors: 7, c_dim: 4, n_query: 2, ..SynthSpec::default() })
            .unwrap()
            .episode;
        assert_eq!(encode_pack(&[episode(1), other], Dtype::F64, &Provenance::default()).unwrap_err().code(), "mixed-shapes");
    }

    #[test]
    fn lazy_reads_match_full_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.watfpack");
        let eps = vec![episode(4), episode(5)];
        write_pack(&eps, Dtype::F64, &Provenance::default(), &path).unwrap();
        let set = PackSet::open(&resolve_pack_paths(dir.path().to_str().unwrap()).unwrap()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.episode(1).unwrap(), eps[1]);
        assert_eq!(read_pack_episode(&path, 2).unwrap_err().code(), "no-such-episode");
    }

    #[test]
    fn resolves_globs() {
        let dir = tempfile::tempdir().unwrap();
        for i in [2, 0, 1] {
            write_pack(&[episode(i)], Dtype::F32, &Provenance::default(), &dir.path().join(format!("e{i}.watfpack")))
                .unwrap();
        }
        let pattern = format!("{}/e*.watfpack", dir.path().display());
        let paths = resolve_pack_paths(&pattern).unwrap();
        let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
        assert_eq!(names, ["e0.watfpack", "e1.watfpack", "e2.watfpack"]);
        assert_eq!(resolve_pack_paths("/nonexistent/*.watfpack").unwrap_err().code(), "io");
    }
}
