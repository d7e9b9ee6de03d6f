use super::Dataset;
use crate::error::{CirError, Result};
use crate::seed::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Which training samples are admitted relative to the held-out pair.
/// Test membership is the same in every mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Neither the held scenario nor the held location.
    ExcludeBoth,
    /// Adds held-scenario samples from other locations.
    IncludeScenario,
    /// Adds held-location samples from other scenarios.
    IncludeLocation,
    /// Adds both groups above.
    IncludeUnion,
    /// Everything except the test samples.
    IncludePair,
}

impl SplitMode {
    pub const ALL: [SplitMode; 5] = [
        SplitMode::ExcludeBoth,
        SplitMode::IncludeScenario,
        SplitMode::IncludeLocation,
        SplitMode::IncludeUnion,
        SplitMode::IncludePair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitMode::ExcludeBoth => "exclude_both",
            SplitMode::IncludeScenario => "include_scenario",
            SplitMode::IncludeLocation => "include_location",
            SplitMode::IncludeUnion => "include_union",
            SplitMode::IncludePair => "include_pair",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CirError::Unknown {
                kind: "split mode",
                name: s.into(),
            })
    }

    fn admits(self, same_scenario: bool, same_location: bool) -> bool {
        match (same_scenario, same_location) {
            (true, true) => false,
            (false, false) => true,
            (true, false) => matches!(
                self,
                SplitMode::IncludeScenario | SplitMode::IncludeUnion | SplitMode::IncludePair
            ),
            (false, true) => matches!(
                self,
                SplitMode::IncludeLocation | SplitMode::IncludeUnion | SplitMode::IncludePair
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_scenario: u32,
    pub held_location: u32,
    pub mode: SplitMode,
}

impl SplitSpec {
    pub fn name(&self) -> String {
        format!("sc{}-lo{}-{}", self.held_scenario, self.held_location, self.mode.name())
    }
}

/// `(train, test)` sample indices, each sorted ascending.
pub fn make_split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, d) in dataset.domains().enumerate() {
        let ss = d.scenario == spec.held_scenario;
        let sl = d.location == spec.held_location;
        if ss && sl {
            test.push(i);
        } else if spec.mode.admits(ss, sl) {
            train.push(i);
        }
    }
    if test.is_empty() {
        return Err(CirError::Split(format!(
            "no samples for held pair (scenario {}, location {})",
            spec.held_scenario, spec.held_location
        )));
    }
    if train.is_empty() {
        return Err(CirError::Split(format!("split {} leaves an empty training set", spec.name())));
    }
    Ok((train, test))
}

/// Moves whole videos into validation, in seeded random order, until at
/// least `fraction` of the clips are held out. Returns sorted
/// `(train, val)`.
pub fn validation_split(
    dataset: &Dataset,
    ids: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CirError::Param(format!("validation fraction must be in [0, 1), got {fraction}")));
    }
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in ids {
        let r = dataset
            .records
            .get(i)
            .ok_or_else(|| CirError::Split(format!("sample id {i} out of range")))?;
        by_video.entry(r.video_id.as_str()).or_default().push(i);
    }
    if by_video.len() < 2 {
        return Err(CirError::Split(format!(
            "validation split needs at least 2 distinct videos, found {}",
            by_video.len()
        )));
    }
    let mut videos: Vec<&str> = by_video.keys().copied().collect();
    videos.shuffle(&mut rng_for(seed, "validation", 0));
    let target = (fraction * ids.len() as f64).ceil() as usize;
    let mut val = Vec::new();
    let mut taken = BTreeSet::new();
    for v in videos {
        if val.len() >= target {
            break;
        }
        val.extend_from_slice(&by_video[v]);
        taken.insert(v);
    }
    let mut train: Vec<usize> = by_video
        .iter()
        .filter(|(v, _)| !taken.contains(*v))
        .flat_map(|(_, c)| c.iter().copied())
        .collect();
    if train.is_empty() {
        return Err(CirError::Split("validation split consumed every video".into()));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Split specification plus the resolved sorted id lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub val_fraction: f64,
    pub val_seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn build(dataset: &Dataset, spec: SplitSpec, val_fraction: f64, val_seed: u64) -> Result<Self> {
        let (train_all, test) = make_split(dataset, &spec)?;
        let (train, val) = if val_fraction > 0.0 {
            validation_split(dataset, &train_all, val_fraction, val_seed)?
        } else {
            (train_all, Vec::new())
        };
        Ok(SplitManifest {
            spec,
            val_fraction,
            val_seed,
            train,
            val,
            test,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
