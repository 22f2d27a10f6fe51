//! Packed shard files and their JSON manifest.
//!
//! Shard layout (all integers little-endian):
//!
//! ```text
//! header   "MIMI" | version u32 | n_samples u32 | n_tokens u64 | n_media u32
//! record   id_len u32 | id bytes
//!          T u32 | M u32
//!          ids        T × u32
//!          mask       ceil(T/8) bytes, bit i of byte i/8 (LSB first)
//!          locations  T × i32, -1 for none
//!          media      M × (width u32 | height u32 | offset u64)
//!          payload    concatenated RGB pixels; offsets are relative to the
//!                     payload start
//! ```
//!
//! `manifest.json` next to the shards lists every shard with its sample
//! count, byte size and SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TokenizedSample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::MediaLocations;
use crate::util::sha256_hex;

pub const SHARD_MAGIC: &[u8; 4] = b"MIMI";
pub const SHARD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub samples: usize,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format: String,
    pub version: u32,
    pub total_samples: usize,
    pub shards: Vec<ShardEntry>,
    /// Free-form per-category sample counts (e.g. per heuristic).
    pub counts: BTreeMap<String, usize>,
}

pub fn encode_shard(samples: &[TokenizedSample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    let tokens: u64 = samples.iter().map(|s| s.ids.len() as u64).sum();
    out.extend_from_slice(&tokens.to_le_bytes());
    let media: u32 = samples.iter().map(|s| s.media.len() as u32).sum();
    out.extend_from_slice(&media.to_le_bytes());

    for s in samples {
        out.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.id.as_bytes());
        out.extend_from_slice(&(s.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(s.media.len() as u32).to_le_bytes());
        for &id in &s.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        let mut bits = vec![0u8; s.ids.len().div_ceil(8)];
        for (i, &m) in s.supervision_mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        for loc in &s.media_locations.0 {
            let v: i32 = loc.map_or(-1, |m| m as i32);
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut offset = 0u64;
        for img in &s.media {
            out.extend_from_slice(&(img.width as u32).to_le_bytes());
            out.extend_from_slice(&(img.height as u32).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += img.pixels.len() as u64;
        }
        for img in &s.media {
            out.extend_from_slice(&img.pixels);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_shard(bytes: &[u8], path: &Path) -> Result<Vec<TokenizedSample>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != SHARD_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != SHARD_VERSION {
        return Err(Error::format(path, format!("unsupported shard version {version}")));
    }
    let n = r.u32()? as usize;
    let _tokens = r.u64()?;
    let _media = r.u32()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::format(path, "sample id is not UTF-8"))?;
        let t = r.u32()? as usize;
        let m = r.u32()? as usize;
        let ids = (0..t).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let bits = r.take(t.div_ceil(8))?;
        let supervision_mask = (0..t).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();
        let locs = (0..t)
            .map(|_| r.i32().map(|v| usize::try_from(v).ok()))
            .collect::<Result<Vec<_>>>()?;
        let mut table = Vec::with_capacity(m);
        for _ in 0..m {
            table.push((r.u32()? as usize, r.u32()? as usize, r.u64()? as usize));
        }
        let payload_len: usize = table.iter().map(|&(w, h, _)| w * h * 3).sum();
        let payload = r.take(payload_len)?;
        let mut media = Vec::with_capacity(m);
        for (w, h, off) in table {
            let end = off + w * h * 3;
            if end > payload.len() {
                return Err(Error::format(path, "media offset out of range"));
            }
            media.push(Image::new(w, h, payload[off..end].to_vec())?);
        }
        out.push(TokenizedSample {
            id,
            ids,
            supervision_mask,
            media_locations: MediaLocations(locs),
            media,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(out)
}

/// Writes `samples` into `dir` as shards of at most `shard_size` samples plus
/// a manifest. An empty sample list writes a manifest with no shards.
pub fn write_shards(
    samples: &[TokenizedSample],
    dir: &Path,
    shard_size: usize,
    counts: BTreeMap<String, usize>,
) -> Result<ShardManifest> {
    if shard_size == 0 {
        return Err(Error::Config("shard_size must be positive".into()));
    }
    fs::create_dir_all(dir)?;
    let mut shards = Vec::new();
    for (i, chunk) in samples.chunks(shard_size).enumerate() {
        let file = format!("shard-{i:05}.bin");
        let bytes = encode_shard(chunk);
        fs::write(dir.join(&file), &bytes)?;
        shards.push(ShardEntry {
            file,
            samples: chunk.len(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = ShardManifest {
        format: "MIMI".into(),
        version: SHARD_VERSION,
        total_samples: samples.len(),
        shards,
        counts,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ShardManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let m: ShardManifest = serde_json::from_str(&text)?;
    if m.version != SHARD_VERSION {
        return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Loads every shard listed in the manifest, verifying checksums.
pub fn load_shards(dir: &Path) -> Result<Vec<TokenizedSample>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.total_samples);
    for entry in &manifest.shards {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::format(&path, "checksum mismatch"));
        }
        let samples = decode_shard(&bytes, &path)?;
        if samples.len() != entry.samples {
            return Err(Error::format(&path, "sample count disagrees with manifest"));
        }
        out.extend(samples);
    }
    Ok(out)
}
