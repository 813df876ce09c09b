//! Content-addressed blob store with tagged manifests, on-disk persistence,
//! and a client-side layer cache implementing absolute and incremental pulls.
//!
//! On-disk layout:
//!
//! ```text
//! config.json                  {"compression_ratio": <float>}
//! blobs/<hex-digest>           canonical op encoding of one layer
//! manifests/<name>/<tag>.json  {"name", "tag", "layers": [{digest, usize, csize}]}
//! ```
//!
//! The cache persists with the same layout minus `config.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagebuild::{parse_reference, Image};
use crate::layerfs::{self, Layer};

pub type Result<T> = std::result::Result<T, RegistryError>;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("manifest not found for `{reference}`")]
    ManifestNotFound { reference: String },
    #[error("invalid image reference `{reference}`")]
    InvalidReference { reference: String },
    #[error("compression ratio {ratio} is outside (0, 1]")]
    InvalidCompressionRatio { ratio: f64 },
    #[error("io error at `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store at `{path}`: {reason}")]
    CorruptStore { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> RegistryError {
    RegistryError::CorruptStore {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Digest plus uncompressed/compressed sizes of one stored layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub digest: String,
    #[serde(rename = "usize")]
    pub uncompressed_size: u64,
    #[serde(rename = "csize")]
    pub compressed_size: u64,
}

/// Ordered layer descriptors identifying one tagged image version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub tag: String,
    pub layers: Vec<LayerDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PullMode {
    /// Previous versions of the image are evicted before downloading.
    Absolute,
    /// Previous versions stay cached; only missing layers are fetched.
    Incremental,
}

impl fmt::Display for PullMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PullMode::Absolute => "absolute",
            PullMode::Incremental => "incremental",
        })
    }
}

impl std::str::FromStr for PullMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<PullMode, String> {
        match s {
            "absolute" => Ok(PullMode::Absolute),
            "incremental" => Ok(PullMode::Incremental),
            other => Err(format!("unknown pull mode `{other}`")),
        }
    }
}

/// What one pull transferred and what it reused from the cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PullReport {
    /// Compressed bytes actually downloaded.
    pub bytes_downloaded: u64,
    /// Digests fetched, in manifest order.
    pub layers_fetched: Vec<String>,
    /// Digests already held, in manifest order.
    pub layers_reused: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StoreConfig {
    compression_ratio: f64,
}

/// Content-addressed blob store plus per-tag manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    blobs: BTreeMap<String, Layer>,
    manifests: BTreeMap<(String, String), Manifest>,
    compression_ratio: f64,
}

impl Default for Registry {
    fn default() -> Registry {
        Registry::new(0.5).expect("default ratio is valid")
    }
}

impl Registry {
    pub fn new(compression_ratio: f64) -> Result<Registry> {
        if !(compression_ratio > 0.0 && compression_ratio <= 1.0) {
            return Err(RegistryError::InvalidCompressionRatio {
                ratio: compression_ratio,
            });
        }
        Ok(Registry {
            blobs: BTreeMap::new(),
            manifests: BTreeMap::new(),
            compression_ratio,
        })
    }

    pub fn compression_ratio(&self) -> f64 {
        self.compression_ratio
    }

    pub fn compressed_size(&self, uncompressed: u64) -> u64 {
        (uncompressed as f64 * self.compression_ratio).floor() as u64
    }

    /// Stores every layer under its digest (idempotently) and writes the
    /// manifest for `name:tag`, overwriting any previous manifest there.
    pub fn push(&mut self, image: &Image) -> Manifest {
        let mut descriptors = Vec::with_capacity(image.layers().len());
        for layer in image.layers() {
            self.blobs
                .entry(layer.digest().to_string())
                .or_insert_with(|| layer.clone());
            descriptors.push(LayerDescriptor {
                digest: layer.digest().to_string(),
                uncompressed_size: layer.uncompressed_size(),
                compressed_size: self.compressed_size(layer.uncompressed_size()),
            });
        }
        let manifest = Manifest {
            name: image.name().to_string(),
            tag: image.tag().to_string(),
            layers: descriptors,
        };
        self.manifests.insert(
            (manifest.name.clone(), manifest.tag.clone()),
            manifest.clone(),
        );
        manifest
    }

    pub fn manifest(&self, name: &str, tag: &str) -> Option<&Manifest> {
        self.manifests.get(&(name.to_string(), tag.to_string()))
    }

    pub fn manifest_for(&self, reference: &str) -> Result<&Manifest> {
        let (name, tag) =
            parse_reference(reference).map_err(|_| RegistryError::InvalidReference {
                reference: reference.to_string(),
            })?;
        self.manifest(name, tag)
            .ok_or_else(|| RegistryError::ManifestNotFound {
                reference: reference.to_string(),
            })
    }

    pub fn manifests(&self) -> impl Iterator<Item = &Manifest> {
        self.manifests.values()
    }

    pub fn blob(&self, digest: &str) -> Option<&Layer> {
        self.blobs.get(digest)
    }

    pub fn blob_count(&self) -> usize {
        self.blobs.len()
    }

    /// Reassembles the image stored under `reference` from its manifest and
    /// blobs. Suitable as the base resolver for builds.
    pub fn image(&self, reference: &str) -> Result<Image> {
        let manifest = self.manifest_for(reference)?;
        let layers = manifest
            .layers
            .iter()
            .map(|d| {
                self.blobs
                    .get(&d.digest)
                    .cloned()
                    .expect("registry invariant: manifest references a stored blob")
            })
            .collect();
        Image::new(&manifest.name, &manifest.tag, layers).map_err(|e| RegistryError::CorruptStore {
            path: PathBuf::new(),
            reason: e.to_string(),
        })
    }

    /// Downloads `reference` into the cache. In absolute mode every cached
    /// version of the image name is evicted first; in incremental mode held
    /// layers are reused. Immediately repeating a pull downloads zero bytes.
    pub fn pull(
        &self,
        cache: &mut LayerCache,
        reference: &str,
        mode: PullMode,
    ) -> Result<PullReport> {
        let manifest = self.manifest_for(reference)?.clone();
        if mode == PullMode::Absolute {
            cache.evict(&manifest.name);
        }
        let mut report = PullReport {
            bytes_downloaded: 0,
            layers_fetched: Vec::new(),
            layers_reused: Vec::new(),
        };
        for descriptor in &manifest.layers {
            if cache.holds(&descriptor.digest) {
                report.layers_reused.push(descriptor.digest.clone());
                continue;
            }
            let blob = self
                .blobs
                .get(&descriptor.digest)
                .expect("registry invariant: manifest references a stored blob");
            cache.held.insert(descriptor.digest.clone(), blob.clone());
            report.bytes_downloaded += descriptor.compressed_size;
            report.layers_fetched.push(descriptor.digest.clone());
        }
        cache
            .images
            .insert((manifest.name.clone(), manifest.tag.clone()), manifest);
        Ok(report)
    }

    /// Writes the store to `dir`; see the module docs for the layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_blobs_and_manifests(dir, &self.blobs, self.manifests.values())?;
        let config_path = dir.join("config.json");
        let config = StoreConfig {
            compression_ratio: self.compression_ratio,
        };
        let text = serde_json::to_string(&config).expect("config serializes");
        fs::write(&config_path, text + "\n").map_err(io_err(&config_path))?;
        Ok(())
    }

    /// Reads a store back, verifying every blob against its filename digest.
    pub fn load(dir: &Path) -> Result<Registry> {
        let config_path = dir.join("config.json");
        let text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
        let config: StoreConfig =
            serde_json::from_str(&text).map_err(|e| corrupt(&config_path, e.to_string()))?;
        let mut registry = Registry::new(config.compression_ratio)?;
        registry.blobs = load_blobs(dir)?;
        for manifest in load_manifests(dir)? {
            for descriptor in &manifest.layers {
                let blob = registry.blobs.get(&descriptor.digest).ok_or_else(|| {
                    corrupt(
                        dir,
                        format!(
                            "manifest {}:{} references missing blob {}",
                            manifest.name, manifest.tag, descriptor.digest
                        ),
                    )
                })?;
                if blob.uncompressed_size() != descriptor.uncompressed_size
                    || registry.compressed_size(descriptor.uncompressed_size)
                        != descriptor.compressed_size
                {
                    return Err(corrupt(
                        dir,
                        format!(
                            "manifest {}:{} has inconsistent sizes for {}",
                            manifest.name, manifest.tag, descriptor.digest
                        ),
                    ));
                }
            }
            registry
                .manifests
                .insert((manifest.name.clone(), manifest.tag.clone()), manifest);
        }
        Ok(registry)
    }
}

/// Locally installed image versions and the layer blobs backing them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerCache {
    held: BTreeMap<String, Layer>,
    images: BTreeMap<(String, String), Manifest>,
}

impl LayerCache {
    pub fn new() -> LayerCache {
        LayerCache::default()
    }

    pub fn holds(&self, digest: &str) -> bool {
        self.held.contains_key(digest)
    }

    pub fn held_digests(&self) -> impl Iterator<Item = &str> {
        self.held.keys().map(String::as_str)
    }

    pub fn held_layer(&self, digest: &str) -> Option<&Layer> {
        self.held.get(digest)
    }

    pub fn manifest(&self, name: &str, tag: &str) -> Option<&Manifest> {
        self.images.get(&(name.to_string(), tag.to_string()))
    }

    pub fn manifests(&self) -> impl Iterator<Item = &Manifest> {
        self.images.values()
    }

    /// Materializes a cached image from held blobs only.
    pub fn image(&self, name: &str, tag: &str) -> Option<Image> {
        let manifest = self.manifest(name, tag)?;
        let layers: Vec<Layer> = manifest
            .layers
            .iter()
            .map(|d| {
                self.held
                    .get(&d.digest)
                    .cloned()
                    .expect("cache invariant: manifest references a held layer")
            })
            .collect();
        Image::new(name, tag, layers).ok()
    }

    /// Drops every cached version of `name` plus all digests no longer
    /// referenced by any remaining manifest. Returns the dropped digests.
    pub fn evict(&mut self, name: &str) -> Vec<String> {
        self.images.retain(|(n, _), _| n != name);
        let referenced: BTreeSet<&str> = self
            .images
            .values()
            .flat_map(|m| m.layers.iter().map(|d| d.digest.as_str()))
            .collect();
        let evicted: Vec<String> = self
            .held
            .keys()
            .filter(|d| !referenced.contains(d.as_str()))
            .cloned()
            .collect();
        for digest in &evicted {
            self.held.remove(digest);
        }
        evicted
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_blobs_and_manifests(dir, &self.held, self.images.values())
    }

    pub fn load(dir: &Path) -> Result<LayerCache> {
        let mut cache = LayerCache {
            held: load_blobs(dir)?,
            images: BTreeMap::new(),
        };
        for manifest in load_manifests(dir)? {
            for descriptor in &manifest.layers {
                if !cache.held.contains_key(&descriptor.digest) {
                    return Err(corrupt(
                        dir,
                        format!(
                            "cached manifest {}:{} references missing layer {}",
                            manifest.name, manifest.tag, descriptor.digest
                        ),
                    ));
                }
            }
            cache
                .images
                .insert((manifest.name.clone(), manifest.tag.clone()), manifest);
        }
        Ok(cache)
    }
}

fn hex_of(digest: &str) -> &str {
    digest.strip_prefix("sha256:").unwrap_or(digest)
}

fn save_blobs_and_manifests<'a>(
    dir: &Path,
    blobs: &BTreeMap<String, Layer>,
    manifests: impl Iterator<Item = &'a Manifest>,
) -> Result<()> {
    let blob_dir = dir.join("blobs");
    let manifest_dir = dir.join("manifests");
    fs::create_dir_all(&blob_dir).map_err(io_err(&blob_dir))?;
    fs::create_dir_all(&manifest_dir).map_err(io_err(&manifest_dir))?;
    for (digest, layer) in blobs {
        let path = blob_dir.join(hex_of(digest));
        fs::write(&path, layer.canonical_bytes()).map_err(io_err(&path))?;
    }
    for manifest in manifests {
        let name_dir = manifest_dir.join(&manifest.name);
        fs::create_dir_all(&name_dir).map_err(io_err(&name_dir))?;
        let path = name_dir.join(format!("{}.json", manifest.tag));
        let text = serde_json::to_string(manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

fn load_blobs(dir: &Path) -> Result<BTreeMap<String, Layer>> {
    let blob_dir = dir.join("blobs");
    let mut blobs = BTreeMap::new();
    for entry in fs::read_dir(&blob_dir).map_err(io_err(&blob_dir))? {
        let path = entry.map_err(io_err(&blob_dir))?.path();
        let file_name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| corrupt(&path, "non UTF-8 blob filename"))?
            .to_string();
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let digest = layerfs::digest_bytes(&bytes);
        if hex_of(&digest) != file_name {
            return Err(corrupt(
                &path,
                format!("content digest {digest} does not match filename"),
            ));
        }
        let ops = layerfs::parse_canonical(&bytes).map_err(|e| corrupt(&path, e.to_string()))?;
        let layer = Layer::new(ops).map_err(|e| corrupt(&path, e.to_string()))?;
        blobs.insert(layer.digest().to_string(), layer);
    }
    Ok(blobs)
}

fn load_manifests(dir: &Path) -> Result<Vec<Manifest>> {
    let manifest_dir = dir.join("manifests");
    let mut manifests = Vec::new();
    for name_entry in fs::read_dir(&manifest_dir).map_err(io_err(&manifest_dir))? {
        let name_dir = name_entry.map_err(io_err(&manifest_dir))?.path();
        if !name_dir.is_dir() {
            return Err(corrupt(&name_dir, "unexpected file in manifests/"));
        }
        let dir_name = name_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| corrupt(&name_dir, "non UTF-8 manifest directory"))?
            .to_string();
        for entry in fs::read_dir(&name_dir).map_err(io_err(&name_dir))? {
            let path = entry.map_err(io_err(&name_dir))?.path();
            let stem = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".json"))
                .ok_or_else(|| corrupt(&path, "manifest file is not `<tag>.json`"))?
                .to_string();
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
            if manifest.name != dir_name || manifest.tag != stem {
                return Err(corrupt(
                    &path,
                    format!(
                        "manifest says {}:{} but is stored as {}/{}.json",
                        manifest.name, manifest.tag, dir_name, stem
                    ),
                ));
            }
            manifests.push(manifest);
        }
    }
    Ok(manifests)
}
