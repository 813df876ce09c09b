//! Shared helpers for the acceptance suite: fixture loading and the
//! independent oracles the suite checks the implementation against.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use layercast::imagebuild::{build, parse_recipe, squash, Image};
use layercast::registry::Registry;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn build_and_push(registry: &mut Registry, path: &Path, name: &str, tag: &str) -> Image {
    let text =
        std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    let recipe = parse_recipe(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()));
    let output = build(&recipe, |r| registry.image(r).ok(), name, tag)
        .unwrap_or_else(|e| panic!("build {}: {e}", path.display()));
    registry.push(&output.image);
    output.image
}

const SERVICES: [&str; 3] = ["agile-core", "agile-ble", "agile-nodered"];

/// Builds the whole fixture set into one registry: the base-image hierarchy,
/// the per-technique variants of each service (plus `-up` update versions and
/// squashed images), and every release of the stack evolution scenario.
pub fn fixture_registry() -> Registry {
    let mut registry = Registry::new(0.5).unwrap();
    let dir = fixtures_dir();

    for (file, name) in [
        ("arch", "base-arch"),
        ("distro", "base-distro"),
        ("jdk", "base-jdk"),
        ("jre", "base-jre"),
        ("nodejs", "base-nodejs"),
    ] {
        build_and_push(
            &mut registry,
            &dir.join("bases").join(format!("{file}.Buildfile")),
            name,
            "1",
        );
    }

    for service in SERVICES {
        for (variant, tag) in [
            ("baseline", "baseline"),
            ("baseline.update", "baseline-up"),
            ("multistage", "multistage"),
            ("multistage.update", "multistage-up"),
        ] {
            build_and_push(
                &mut registry,
                &dir.join("table1")
                    .join(format!("{service}.{variant}.Buildfile")),
                service,
                tag,
            );
        }
        for (source, tag) in [("multistage", "squashed"), ("multistage-up", "squashed-up")] {
            let image = registry.image(&format!("{service}:{source}")).unwrap();
            let squashed = squash(&image).with_tag(tag).unwrap();
            registry.push(&squashed);
        }
    }

    let stack_versions = [
        ("agile-core", ["0.1.0", "0.1.2", "0.1.3", "0.1.4"]),
        ("agile-ble", ["0.1.0", "0.1.2", "0.1.3", "0.1.4"]),
        ("agile-nodered", ["0.1.1", "0.1.2", "0.1.4", "0.4.1"]),
    ];
    for (service, tags) in stack_versions {
        for tag in tags {
            build_and_push(
                &mut registry,
                &dir.join("stack").join(format!("{service}-{tag}.Buildfile")),
                service,
                tag,
            );
        }
    }
    registry
}

/// Independent event-driven pipeline simulation: one downloader working
/// through the layers back to back, one extractor consuming finished
/// downloads in order. Returns the completion time of the last extraction.
pub fn pipeline_oracle(layers: &[(u64, u64)], bandwidth: f64, extract_rate: f64) -> f64 {
    let mut now = 0.0_f64;
    let mut finished_at = 0.0_f64;
    let mut downloading: Option<(usize, f64)> = None;
    let mut extracting: Option<f64> = None;
    let mut ready: VecDeque<usize> = VecDeque::new();
    let mut next_download = 0;
    let mut next_extract = 0;

    loop {
        if downloading.is_none() && next_download < layers.len() {
            let (csize, _) = layers[next_download];
            downloading = Some((next_download, now + csize as f64 / bandwidth));
            next_download += 1;
        }
        if extracting.is_none() && ready.front() == Some(&next_extract) {
            ready.pop_front();
            let (_, usize_) = layers[next_extract];
            extracting = Some(now + usize_ as f64 / extract_rate);
            next_extract += 1;
        }

        let pending = [downloading.map(|(_, t)| t), extracting];
        let Some(event_time) = pending.into_iter().flatten().reduce(f64::min) else {
            break;
        };
        now = event_time;
        if let Some((index, t)) = downloading {
            if t == now {
                ready.push_back(index);
                downloading = None;
            }
        }
        if let Some(t) = extracting {
            if t == now {
                finished_at = t;
                extracting = None;
            }
        }
    }
    finished_at
}

/// Independent pull-byte accounting over a sequence of manifests for one
/// image name, expressed as plain digest-set arithmetic.
pub struct PullBytesOracle {
    held: BTreeSet<String>,
}

impl PullBytesOracle {
    pub fn new() -> PullBytesOracle {
        PullBytesOracle {
            held: BTreeSet::new(),
        }
    }

    /// Expected bytes for pulling a manifest in incremental mode, updating
    /// the held set.
    pub fn incremental(&mut self, layers: &[(String, u64)]) -> u64 {
        let mut bytes = 0;
        for (digest, csize) in layers {
            if self.held.insert(digest.clone()) {
                bytes += csize;
            }
        }
        bytes
    }

    /// Expected bytes for pulling a manifest in absolute mode (previous
    /// versions of this image dropped first); the held set is replaced by
    /// this manifest's digests.
    pub fn absolute(&mut self, layers: &[(String, u64)]) -> u64 {
        self.held.clear();
        self.incremental(layers)
    }
}

/// Exhaustive minimum dedup cost over per-service candidate layer sets,
/// computed with plain recursion and digest-map arithmetic.
pub fn brute_force_min_cost(candidates: &[Vec<Vec<(String, u64)>>]) -> u64 {
    fn recurse(
        candidates: &[Vec<Vec<(String, u64)>>],
        chosen: &mut BTreeMap<String, u64>,
        best: &mut u64,
    ) {
        match candidates.split_first() {
            None => {
                let cost: u64 = chosen.values().sum();
                if cost < *best {
                    *best = cost;
                }
            }
            Some((options, rest)) => {
                for option in options {
                    let added: Vec<&str> = option
                        .iter()
                        .filter(|(digest, _)| !chosen.contains_key(digest))
                        .map(|(digest, _)| digest.as_str())
                        .collect();
                    let added: Vec<String> = added.into_iter().map(str::to_string).collect();
                    for (digest, size) in option {
                        chosen.entry(digest.clone()).or_insert(*size);
                    }
                    recurse(rest, chosen, best);
                    for digest in &added {
                        chosen.remove(digest);
                    }
                }
            }
        }
    }
    let mut best = u64::MAX;
    recurse(candidates, &mut BTreeMap::new(), &mut best);
    best
}

/// Deterministic xorshift-style generator so acceptance runs are repeatable
/// without depending on any RNG crate's stability guarantees.
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng(seed.wrapping_add(0x9e3779b97f4a7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        // splitmix64
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, bound)`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        self.next_u64() % bound
    }

    pub fn chance(&mut self, numerator: u64, denominator: u64) -> bool {
        self.below(denominator) < numerator
    }
}
