//! Deterministic timing model for pulls and stack rollouts.
//!
//! Downloads run sequentially at full bandwidth in manifest order; extraction
//! of a layer overlaps later downloads but extractions themselves are
//! sequential. A single-layer image therefore cannot overlap anything, which
//! is why a squashed image can install slower than a slightly larger
//! multi-layer one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{LayerCache, LayerDescriptor, PullMode, PullReport, Registry, RegistryError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid cost model: {reason}")]
    InvalidCostModel { reason: String },
    #[error("malformed scenario: {reason}")]
    MalformedScenario { reason: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Download bandwidth and extraction rate, both in bytes per second.
/// Downloads consume compressed bytes, extraction uncompressed bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub bandwidth: f64,
    pub extract_rate: f64,
}

impl Default for CostModel {
    /// 50 Mbit/s downlink and an SD-card-class 20 MB/s extraction rate.
    fn default() -> CostModel {
        CostModel {
            bandwidth: 6.25e6,
            extract_rate: 2.0e7,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(SimError::InvalidCostModel {
                reason: format!("bandwidth {} must be strictly positive", self.bandwidth),
            });
        }
        if !(self.extract_rate > 0.0 && self.extract_rate.is_finite()) {
            return Err(SimError::InvalidCostModel {
                reason: format!(
                    "extract_rate {} must be strictly positive",
                    self.extract_rate
                ),
            });
        }
        Ok(())
    }
}

/// Timing of one fetched layer within a pull.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTiming {
    pub digest: String,
    pub download_start: f64,
    pub download_end: f64,
    pub extract_start: f64,
    pub extract_end: f64,
}

/// Pipelined schedule of one pull; `total_time` is zero when nothing is
/// fetched.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PullSchedule {
    pub layers: Vec<LayerTiming>,
    pub total_time: f64,
}

impl PullSchedule {
    pub fn download_time(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.download_end - l.download_start)
            .sum()
    }

    pub fn extract_time(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.extract_end - l.extract_start)
            .sum()
    }
}

/// Schedules the transfer of exactly the given layers: downloads back to
/// back, each extraction starting once its download is done and the previous
/// extraction has finished.
pub fn simulate_pull(fetch: &[LayerDescriptor], cost: &CostModel) -> PullSchedule {
    let mut layers = Vec::with_capacity(fetch.len());
    let mut download_cursor = 0.0_f64;
    let mut extract_cursor = 0.0_f64;
    for descriptor in fetch {
        let download_start = download_cursor;
        let download_end = download_start + descriptor.compressed_size as f64 / cost.bandwidth;
        let extract_start = download_end.max(extract_cursor);
        let extract_end = extract_start + descriptor.uncompressed_size as f64 / cost.extract_rate;
        download_cursor = download_end;
        extract_cursor = extract_end;
        layers.push(LayerTiming {
            digest: descriptor.digest.clone(),
            download_start,
            download_end,
            extract_start,
            extract_end,
        });
    }
    PullSchedule {
        total_time: layers.last().map_or(0.0, |l| l.extract_end),
        layers,
    }
}

/// Pulls `reference` into the cache and schedules the layers that were
/// actually fetched, in manifest order.
pub fn timed_pull(
    registry: &Registry,
    cache: &mut LayerCache,
    reference: &str,
    mode: PullMode,
    cost: &CostModel,
) -> Result<(PullReport, PullSchedule), RegistryError> {
    let manifest = registry.manifest_for(reference)?.clone();
    let report = registry.pull(cache, reference, mode)?;
    let fetched: Vec<LayerDescriptor> = report
        .layers_fetched
        .iter()
        .map(|digest| {
            manifest
                .layers
                .iter()
                .find(|d| &d.digest == digest)
                .expect("fetched digest comes from this manifest")
                .clone()
        })
        .collect();
    Ok((report, simulate_pull(&fetched, cost)))
}

/// One stack release: a label and the image references deployed together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackVersion {
    pub label: String,
    pub stack: Vec<String>,
}

/// A rollout to simulate: ordered stack versions, pull mode, and cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: PullMode,
    pub cost: CostModel,
    pub versions: Vec<StackVersion>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, SimError> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::MalformedScenario {
                reason: e.to_string(),
            })?;
        scenario.cost.validate()?;
        Ok(scenario)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePull {
    pub reference: String,
    pub report: PullReport,
    pub schedule: PullSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VersionReport {
    pub label: String,
    pub bytes_downloaded: u64,
    pub simulated_time: f64,
    pub pulls: Vec<ImagePull>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub mode: PullMode,
    pub versions: Vec<VersionReport>,
}

/// Replays the scenario against one fresh cache, version by version. Images
/// within a version are pulled sequentially in listed order and their times
/// summed. Absolute mode evicts every image name of the version up front,
/// emulating an updater that removes previous versions before downloading.
pub fn simulate_rollout(
    scenario: &Scenario,
    registry: &Registry,
) -> Result<RolloutReport, SimError> {
    scenario.cost.validate()?;
    let mut cache = LayerCache::new();
    let mut versions = Vec::with_capacity(scenario.versions.len());
    for version in &scenario.versions {
        if scenario.mode == PullMode::Absolute {
            for reference in &version.stack {
                let manifest = registry.manifest_for(reference)?;
                let name = manifest.name.clone();
                cache.evict(&name);
            }
        }
        let mut pulls = Vec::with_capacity(version.stack.len());
        let mut bytes_downloaded = 0;
        let mut simulated_time = 0.0;
        for reference in &version.stack {
            let (report, schedule) = timed_pull(
                registry,
                &mut cache,
                reference,
                scenario.mode,
                &scenario.cost,
            )?;
            bytes_downloaded += report.bytes_downloaded;
            simulated_time += schedule.total_time;
            pulls.push(ImagePull {
                reference: reference.clone(),
                report,
                schedule,
            });
        }
        versions.push(VersionReport {
            label: version.label.clone(),
            bytes_downloaded,
            simulated_time,
            pulls,
        });
    }
    Ok(RolloutReport {
        mode: scenario.mode,
        versions,
    })
}

/// CSV report, one row per version: `version,mode,bytes_downloaded,simulated_seconds`.
pub fn rollout_csv(report: &RolloutReport) -> String {
    let mut out = String::from("version,mode,bytes_downloaded,simulated_seconds\n");
    for version in &report.versions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            version.label, report.mode, version.bytes_downloaded, version.simulated_time
        ));
    }
    out
}

/// JSON mirror of [`rollout_csv`]: an array of per-version objects with
/// sorted keys.
pub fn rollout_json(report: &RolloutReport) -> String {
    let rows: Vec<serde_json::Value> = report
        .versions
        .iter()
        .map(|version| {
            serde_json::json!({
                "version": version.label,
                "mode": report.mode.to_string(),
                "bytes_downloaded": version.bytes_downloaded,
                "simulated_seconds": version.simulated_time,
            })
        })
        .collect();
    serde_json::to_string(&rows).expect("report rows serialize") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagebuild::Image;
    use crate::layerfs::{FileEntry, Layer, LayerOp};

    fn descriptor(digest: &str, usize_: u64, csize: u64) -> LayerDescriptor {
        LayerDescriptor {
            digest: digest.to_string(),
            uncompressed_size: usize_,
            compressed_size: csize,
        }
    }

    #[test]
    fn empty_fetch_takes_no_time() {
        let schedule = simulate_pull(&[], &CostModel::default());
        assert_eq!(schedule.total_time, 0.0);
        assert!(schedule.layers.is_empty());
    }

    #[test]
    fn single_layer_cannot_overlap() {
        let cost = CostModel {
            bandwidth: 10.0,
            extract_rate: 20.0,
        };
        let schedule = simulate_pull(&[descriptor("d1", 160, 80)], &cost);
        assert_eq!(schedule.total_time, 16.0);
    }

    #[test]
    fn two_layers_pipeline() {
        let cost = CostModel {
            bandwidth: 10.0,
            extract_rate: 20.0,
        };
        let schedule = simulate_pull(&[descriptor("d1", 80, 40), descriptor("d2", 80, 40)], &cost);
        let timings: Vec<(f64, f64, f64, f64)> = schedule
            .layers
            .iter()
            .map(|l| {
                (
                    l.download_start,
                    l.download_end,
                    l.extract_start,
                    l.extract_end,
                )
            })
            .collect();
        assert_eq!(timings, vec![(0.0, 4.0, 4.0, 8.0), (4.0, 8.0, 8.0, 12.0)]);
        assert_eq!(schedule.total_time, 12.0);
    }

    #[test]
    fn schedule_respects_pipeline_bounds() {
        let cost = CostModel {
            bandwidth: 7.0,
            extract_rate: 3.0,
        };
        let fetch = vec![
            descriptor("a", 10, 5),
            descriptor("b", 100, 50),
            descriptor("c", 1, 1),
        ];
        let schedule = simulate_pull(&fetch, &cost);
        let lower = schedule.download_time().max(schedule.extract_time());
        let upper = schedule.download_time() + schedule.extract_time();
        assert!(schedule.total_time >= lower - 1e-12);
        assert!(schedule.total_time <= upper + 1e-12);
    }

    fn sample_registry() -> Registry {
        let mut registry = Registry::new(0.5).unwrap();
        let layer = |p: &str, s, c: &str| {
            Layer::new(vec![LayerOp::Add(FileEntry::new(p, s, c).unwrap())]).unwrap()
        };
        registry.push(
            &Image::new("app", "1", vec![layer("/a", 80, "a"), layer("/b", 80, "b")]).unwrap(),
        );
        registry
    }

    #[test]
    fn timed_pull_of_cached_image_is_instant() {
        let registry = sample_registry();
        let mut cache = LayerCache::new();
        let cost = CostModel::default();
        timed_pull(&registry, &mut cache, "app:1", PullMode::Incremental, &cost).unwrap();
        let (report, schedule) =
            timed_pull(&registry, &mut cache, "app:1", PullMode::Incremental, &cost).unwrap();
        assert_eq!(report.bytes_downloaded, 0);
        assert_eq!(schedule.total_time, 0.0);
    }

    #[test]
    fn timed_pull_schedules_fetched_layers() {
        let registry = sample_registry();
        let mut cache = LayerCache::new();
        let cost = CostModel {
            bandwidth: 10.0,
            extract_rate: 20.0,
        };
        let (report, schedule) =
            timed_pull(&registry, &mut cache, "app:1", PullMode::Absolute, &cost).unwrap();
        assert_eq!(report.bytes_downloaded, 80);
        assert_eq!(schedule.total_time, 12.0);
    }

    #[test]
    fn rollout_repeated_version_downloads_nothing_incrementally() {
        let registry = sample_registry();
        let scenario = Scenario {
            mode: PullMode::Incremental,
            cost: CostModel::default(),
            versions: vec![
                StackVersion {
                    label: "v1".to_string(),
                    stack: vec!["app:1".to_string()],
                },
                StackVersion {
                    label: "v2".to_string(),
                    stack: vec!["app:1".to_string()],
                },
            ],
        };
        let report = simulate_rollout(&scenario, &registry).unwrap();
        assert!(report.versions[0].bytes_downloaded > 0);
        assert_eq!(report.versions[1].bytes_downloaded, 0);
        assert_eq!(report.versions[1].simulated_time, 0.0);
    }

    #[test]
    fn rollout_single_version_equals_timed_pull() {
        let registry = sample_registry();
        let cost = CostModel::default();
        let scenario = Scenario {
            mode: PullMode::Absolute,
            cost,
            versions: vec![StackVersion {
                label: "v1".to_string(),
                stack: vec!["app:1".to_string()],
            }],
        };
        let report = simulate_rollout(&scenario, &registry).unwrap();
        let mut cache = LayerCache::new();
        let (pull, schedule) =
            timed_pull(&registry, &mut cache, "app:1", PullMode::Absolute, &cost).unwrap();
        assert_eq!(report.versions[0].bytes_downloaded, pull.bytes_downloaded);
        assert_eq!(report.versions[0].simulated_time, schedule.total_time);
    }

    #[test]
    fn scenario_json_round_trip() {
        let text = r#"{
            "mode": "incremental",
            "cost": { "bandwidth": 6250000.0, "extract_rate": 20000000.0 },
            "versions": [ { "label": "v0.1.0", "stack": ["agile-core:0.1.0"] } ]
        }"#;
        let scenario = Scenario::from_json(text).unwrap();
        assert_eq!(scenario.mode, PullMode::Incremental);
        assert_eq!(scenario.versions.len(), 1);

        assert!(Scenario::from_json("{}").is_err());
        let bad_cost =
            r#"{"mode":"absolute","cost":{"bandwidth":0.0,"extract_rate":1.0},"versions":[]}"#;
        assert!(Scenario::from_json(bad_cost).is_err());
    }

    #[test]
    fn csv_and_json_reports_are_stable() {
        let registry = sample_registry();
        let scenario = Scenario {
            mode: PullMode::Absolute,
            cost: CostModel::default(),
            versions: vec![StackVersion {
                label: "v1".to_string(),
                stack: vec!["app:1".to_string()],
            }],
        };
        let report = simulate_rollout(&scenario, &registry).unwrap();
        let csv = rollout_csv(&report);
        assert!(csv.starts_with("version,mode,bytes_downloaded,simulated_seconds\n"));
        assert_eq!(
            csv,
            rollout_csv(&simulate_rollout(&scenario, &registry).unwrap())
        );
        let json = rollout_json(&report);
        assert!(json.contains("\"bytes_downloaded\":80"));
        assert!(json.contains("\"version\":\"v1\""));
    }
}
