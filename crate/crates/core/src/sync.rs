//! Manifests, multi-view synchronization and stratified splitting.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{interval_overlap, ClipDims, ModalityId, SampleRecord, SyncGroup, ViewId};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const SCHEMA_VERSION: u32 = 1;

/// The dataset index: annotation records plus the class-name ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub class_names: Vec<String>,
    pub schema_version: u32,
    pub views: Vec<ViewId>,
    pub modalities: Vec<ModalityId>,
    /// Clip shape, when the records point at clip files.
    pub dims: Option<ClipDims>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    class_names: Vec<String>,
    views: Vec<ViewId>,
    modalities: Vec<ModalityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dims: Option<ClipDims>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    clip_ref: String,
    view: u8,
    modality: String,
    class: Option<usize>,
    start_frame: i64,
    end_frame: i64,
}

impl Manifest {
    pub fn new(
        records: Vec<SampleRecord>,
        class_names: Vec<String>,
        views: Vec<ViewId>,
        modalities: Vec<ModalityId>,
    ) -> Result<Self> {
        let manifest = Self {
            records,
            class_names,
            schema_version: SCHEMA_VERSION,
            views,
            modalities,
            dims: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn with_dims(mut self, dims: ClipDims) -> Self {
        self.dims = Some(dims);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Manifest(format!("duplicate class name {name:?}")));
            }
        }
        let mut refs = std::collections::HashSet::new();
        for r in &self.records {
            if r.start_frame >= r.end_frame {
                return Err(Error::Manifest(format!(
                    "{}: start_frame {} must precede end_frame {}",
                    r.clip_ref, r.start_frame, r.end_frame
                )));
            }
            if let Some(c) = r.class_id {
                if c >= self.num_classes() {
                    return Err(Error::Manifest(format!(
                        "{}: class {c} out of range for {} classes",
                        r.clip_ref,
                        self.num_classes()
                    )));
                }
            }
            if !self.views.contains(&r.view) {
                return Err(Error::Manifest(format!("{}: unknown view {}", r.clip_ref, r.view)));
            }
            if !self.modalities.contains(&r.modality) {
                return Err(Error::Manifest(format!(
                    "{}: unknown modality {}",
                    r.clip_ref, r.modality
                )));
            }
            if !refs.insert(r.clip_ref.as_str()) {
                return Err(Error::Manifest(format!("duplicate clip_ref {}", r.clip_ref)));
            }
        }
        Ok(())
    }

    pub fn view(&self, index: u8) -> Option<ViewId> {
        self.views.iter().copied().find(|v| v.index == index)
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityId> {
        self.modalities.iter().find(|m| m.name == name)
    }

    /// Copy in which every target-modality record has its class removed.
    /// Training code reads target data only through this.
    pub fn stripped_of_target_labels(&self) -> Manifest {
        let mut out = self.clone();
        for r in &mut out.records {
            if r.modality.is_target() {
                r.class_id = None;
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            schema_version: self.schema_version,
            class_names: self.class_names.clone(),
            views: self.views.clone(),
            modalities: self.modalities.clone(),
            dims: self.dims,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let line = RecordLine {
                clip_ref: r.clip_ref.clone(),
                view: r.view.index,
                modality: r.modality.name.clone(),
                class: r.class_id,
                start_frame: r.start_frame,
                end_frame: r.end_frame,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported schema_version {}",
                header.schema_version
            )));
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 2)))?;
            let view = header
                .views
                .iter()
                .copied()
                .find(|v| v.index == rec.view)
                .ok_or_else(|| Error::Manifest(format!("{}: unknown view {}", rec.clip_ref, rec.view)))?;
            let modality = header
                .modalities
                .iter()
                .find(|m| m.name == rec.modality)
                .cloned()
                .ok_or_else(|| {
                    Error::Manifest(format!("{}: unknown modality {}", rec.clip_ref, rec.modality))
                })?;
            records.push(SampleRecord {
                clip_ref: rec.clip_ref,
                view,
                modality,
                class_id: rec.class,
                start_frame: rec.start_frame,
                end_frame: rec.end_frame,
            });
        }
        let mut manifest = Manifest::new(records, header.class_names, header.views, header.modalities)?;
        manifest.dims = header.dims;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

/// Orders candidate matches: larger overlap first, then earlier start, then
/// lexicographically smaller `clip_ref`.
fn better_candidate(a: &SampleRecord, a_overlap: i64, b: &SampleRecord, b_overlap: i64) -> bool {
    (std::cmp::Reverse(a_overlap), a.start_frame, &a.clip_ref)
        < (std::cmp::Reverse(b_overlap), b.start_frame, &b.clip_ref)
}

/// Aligns anchor-view records with same-class, temporally overlapping
/// records from each positive view.
///
/// Only records in the anchor record's own modality are candidates. An
/// anchor that lacks a match in any positive view becomes a singleton group.
pub fn build_sync_groups(
    manifest: &Manifest,
    anchor: ViewId,
    positives: &[ViewId],
    min_overlap_frames: i64,
) -> Result<Vec<SyncGroup>> {
    if positives.iter().any(|p| p.index == anchor.index) {
        return Err(Error::InvalidArgument("anchor view listed among positives".into()));
    }
    if min_overlap_frames < 1 {
        return Err(Error::InvalidArgument("min_overlap_frames must be >= 1".into()));
    }

    // (view, modality, class) -> records sorted by start frame
    let mut index: HashMap<(u8, &str, usize), Vec<&SampleRecord>> = HashMap::new();
    for r in &manifest.records {
        if r.modality.is_target() || !positives.iter().any(|p| p.index == r.view.index) {
            continue;
        }
        let class = r.class_id.ok_or_else(|| {
            Error::Manifest(format!(
                "positive-view record {} has no class label; auxiliary views must be labeled",
                r.clip_ref
            ))
        })?;
        index
            .entry((r.view.index, r.modality.name.as_str(), class))
            .or_default()
            .push(r);
    }
    for bucket in index.values_mut() {
        bucket.sort_by(|a, b| (a.start_frame, &a.clip_ref).cmp(&(b.start_frame, &b.clip_ref)));
    }

    let mut groups = Vec::new();
    for a in &manifest.records {
        if a.view.index != anchor.index || a.modality.is_target() {
            continue;
        }
        let class_id = a.class_id.ok_or_else(|| {
            Error::Manifest(format!("anchor record {} has no class label", a.clip_ref))
        })?;

        let mut chosen = Vec::with_capacity(positives.len());
        for p in positives {
            let Some(bucket) = index.get(&(p.index, a.modality.name.as_str(), class_id)) else {
                break;
            };
            // candidates must start before the anchor ends
            let upper = bucket.partition_point(|r| r.start_frame < a.end_frame);
            let mut best: Option<(&SampleRecord, i64)> = None;
            for &cand in &bucket[..upper] {
                let ov = a.overlap(cand);
                if ov < min_overlap_frames {
                    continue;
                }
                if best.is_none_or(|(b, bo)| better_candidate(cand, ov, b, bo)) {
                    best = Some((cand, ov));
                }
            }
            match best {
                Some((r, _)) => chosen.push(r.clone()),
                None => break,
            }
        }

        if chosen.len() == positives.len() {
            let overlap_window = chosen.iter().fold(a.interval(), |(s, e), r| {
                let s = s.max(r.start_frame);
                let e = e.min(r.end_frame);
                (s, e.max(s))
            });
            groups.push(SyncGroup {
                anchor: a.clone(),
                positives: chosen,
                class_id,
                overlap_window,
            });
        } else {
            groups.push(SyncGroup {
                anchor: a.clone(),
                positives: Vec::new(),
                class_id,
                overlap_window: a.interval(),
            });
        }
    }
    Ok(groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Serialize, Deserialize)]
struct GroupLine {
    group: String,
    class: usize,
    anchor: String,
    positives: Vec<String>,
    overlap_window: (i64, i64),
}

/// One JSON object per group, in input order.
pub fn groups_to_jsonl(groups: &[SyncGroup]) -> Result<String> {
    let mut out = String::new();
    for g in groups {
        let line = GroupLine {
            group: g.group_id().to_string(),
            class: g.class_id,
            anchor: g.anchor.clip_ref.clone(),
            positives: g.positives.iter().map(|p| p.clip_ref.clone()).collect(),
            overlap_window: g.overlap_window,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Group id → split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub mapping: BTreeMap<String, Split>,
    pub fractions: (f64, f64, f64),
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    fractions: (f64, f64, f64),
}

#[derive(Serialize, Deserialize)]
struct SplitLine {
    group: String,
    split: Split,
}

impl SplitAssignment {
    pub fn split_of(&self, group_id: &str) -> Option<Split> {
        self.mapping.get(group_id).copied()
    }

    pub fn groups_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.mapping
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(g, _)| g.as_str())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &SplitHeader { fractions: self.fractions })?;
        w.write_all(b"\n")?;
        for (group, split) in &self.mapping {
            serde_json::to_writer(
                &mut w,
                &SplitLine {
                    group: group.clone(),
                    split: *split,
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header: SplitHeader = serde_json::from_str(
            &lines
                .next()
                .ok_or_else(|| Error::Manifest("empty split file".into()))??,
        )?;
        let mut mapping = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: SplitLine = serde_json::from_str(&line)?;
            mapping.insert(l.group, l.split);
        }
        Ok(Self {
            mapping,
            fractions: header.fractions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

/// Largest-remainder allocation of `n` items over `fractions`; ties in the
/// remainder go to the earlier part.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Per-class shuffle followed by a contiguous train/val/test partition.
pub fn stratified_split(
    groups: &[SyncGroup],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for g in groups {
        by_class.entry(g.class_id).or_default().push(g.group_id());
    }
    let mut mapping = BTreeMap::new();
    for (class, mut ids) in by_class {
        if ids.len() < 3 {
            return Err(Error::ClassTooSmall {
                class,
                count: ids.len(),
            });
        }
        let mut rng = substream(seed, "split", class as u64);
        ids.shuffle(&mut rng);
        let sizes = largest_remainder(ids.len(), &[ft, fv, fs]);
        let labels = std::iter::repeat_n(Split::Train, sizes[0])
            .chain(std::iter::repeat_n(Split::Val, sizes[1]))
            .chain(std::iter::repeat_n(Split::Test, sizes[2]));
        for (id, split) in ids.into_iter().zip(labels) {
            if mapping.insert(id.to_string(), split).is_some() {
                return Err(Error::Manifest(format!("duplicate group id {id}")));
            }
        }
    }
    Ok(SplitAssignment { mapping, fractions })
}

/// Violations of the split invariants: every group assigned exactly once
/// and per-class train share within `tolerance` of the train fraction.
pub fn split_violations(groups: &[SyncGroup], split: &SplitAssignment, tolerance: f64) -> Vec<String> {
    let mut out = Vec::new();
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for g in groups {
        if !seen.insert(g.group_id()) {
            out.push(format!("group {} listed twice", g.group_id()));
        }
        match split.split_of(g.group_id()) {
            None => out.push(format!("group {} unassigned", g.group_id())),
            Some(s) => {
                let e = per_class.entry(g.class_id).or_default();
                e.1 += 1;
                if s == Split::Train {
                    e.0 += 1;
                }
            }
        }
    }
    if split.mapping.len() != seen.len() {
        out.push(format!(
            "assignment holds {} groups but {} were given",
            split.mapping.len(),
            seen.len()
        ));
    }
    for (class, (train, total)) in per_class {
        let share = train as f64 / total as f64;
        if (share - split.fractions.0).abs() > tolerance + 1e-12 {
            out.push(format!(
                "class {class}: train share {share:.3} deviates from {:.2}",
                split.fractions.0
            ));
        }
    }
    out
}

/// Maps arbitrary records (held-out view, target modality) to the group
/// whose anchor they overlap most; ties prefer the earlier, then
/// lexicographically smaller anchor. Labeled records only match same-class
/// groups.
pub fn resolve_groups<'a>(groups: &'a [SyncGroup], records: &[SampleRecord]) -> Vec<Option<&'a str>> {
    let mut anchors: Vec<&SyncGroup> = groups.iter().collect();
    anchors.sort_by(|a, b| {
        (a.anchor.start_frame, &a.anchor.clip_ref).cmp(&(b.anchor.start_frame, &b.anchor.clip_ref))
    });
    records
        .iter()
        .map(|r| {
            let upper = anchors.partition_point(|g| g.anchor.start_frame < r.end_frame);
            let mut best: Option<(&SyncGroup, i64)> = None;
            for g in &anchors[..upper] {
                if r.class_id.is_some_and(|c| c != g.class_id) {
                    continue;
                }
                let ov = interval_overlap(g.anchor.interval(), r.interval());
                if ov == 0 {
                    continue;
                }
                if best.is_none_or(|(b, bo)| better_candidate(&g.anchor, ov, &b.anchor, bo)) {
                    best = Some((g, ov));
                }
            }
            best.map(|(g, _)| g.group_id())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DomainRole, ViewRole};

    const V1: ViewId = ViewId::new(1, ViewRole::Anchor);
    const V2: ViewId = ViewId::new(2, ViewRole::Positive);
    const V3: ViewId = ViewId::new(3, ViewRole::Positive);

    fn nir() -> ModalityId {
        ModalityId::new(0, "modA", DomainRole::Source)
    }

    fn rec(name: &str, view: ViewId, class: Option<usize>, s: i64, e: i64) -> SampleRecord {
        SampleRecord {
            clip_ref: name.into(),
            view,
            modality: nir(),
            class_id: class,
            start_frame: s,
            end_frame: e,
        }
    }

    fn manifest(records: Vec<SampleRecord>) -> Manifest {
        Manifest::new(
            records,
            (0..5).map(|i| format!("c{i}")).collect(),
            vec![V1, V2, V3],
            vec![nir()],
        )
        .unwrap()
    }

    #[test]
    fn crafted_three_view_fixture() {
        let m = manifest(vec![
            rec("a", V1, Some(3), 0, 100),
            rec("b", V2, Some(3), 10, 90),
            rec("c", V2, Some(3), 200, 300),
            rec("d", V3, Some(3), 0, 50),
        ]);
        let groups = build_sync_groups(&m, V1, &[V2, V3], 1).unwrap();
        assert_eq!(groups.len(), 1);
        let g = &groups[0];
        assert_eq!(g.positives.iter().map(|r| r.clip_ref.as_str()).collect::<Vec<_>>(), ["b", "d"]);
        assert_eq!(g.overlap_window, (10, 50));
        assert!(!g.is_singleton());
    }

    #[test]
    fn unmatched_anchor_is_singleton() {
        let m = manifest(vec![
            rec("a", V1, Some(3), 0, 100),
            rec("b", V2, Some(1), 0, 100),
            rec("d", V3, Some(3), 0, 50),
        ]);
        let groups = build_sync_groups(&m, V1, &[V2, V3], 1).unwrap();
        assert_eq!(groups.len(), 1);
        assert!(groups[0].is_singleton());
    }

    #[test]
    fn equal_overlap_prefers_earlier_start() {
        let m = manifest(vec![
            rec("a", V1, Some(0), 50, 150),
            rec("late", V2, Some(0), 110, 200),
            rec("early", V2, Some(0), 10, 90),
        ]);
        let groups = build_sync_groups(&m, V1, &[V2], 1).unwrap();
        assert_eq!(groups[0].positives[0].clip_ref, "early");
    }

    #[test]
    fn unlabeled_positive_is_rejected() {
        let m = manifest(vec![rec("a", V1, Some(0), 0, 10), rec("b", V2, None, 0, 10)]);
        assert!(matches!(build_sync_groups(&m, V1, &[V2], 1), Err(Error::Manifest(_))));
        assert!(build_sync_groups(&m, V1, &[V1], 1).is_err());
    }

    #[test]
    fn largest_remainder_for_ten() {
        assert_eq!(largest_remainder(10, &[0.7, 0.15, 0.15]), vec![7, 2, 1]);
        assert_eq!(largest_remainder(4, &[0.7, 0.15, 0.15]), vec![3, 1, 0]);
        assert_eq!(largest_remainder(7, &[1.0, 0.0, 0.0]), vec![7, 0, 0]);
    }

    fn single_class_groups(n: usize) -> Vec<SyncGroup> {
        (0..n)
            .map(|i| SyncGroup {
                anchor: rec(&format!("g{i:02}"), V1, Some(0), i as i64 * 10, i as i64 * 10 + 5),
                positives: vec![],
                class_id: 0,
                overlap_window: (0, 5),
            })
            .collect()
    }

    #[test]
    fn split_of_ten_groups_follows_shuffle() {
        let groups = single_class_groups(10);
        let split = stratified_split(&groups, DEFAULT_FRACTIONS, 3).unwrap();
        // recompute: shuffle with the same stream, then cut at 7 and 9
        let mut ids: Vec<&str> = groups.iter().map(|g| g.group_id()).collect();
        ids.shuffle(&mut substream(3, "split", 0));
        for (i, id) in ids.iter().enumerate() {
            let want = match i {
                0..7 => Split::Train,
                7..9 => Split::Val,
                _ => Split::Test,
            };
            assert_eq!(split.split_of(id), Some(want), "{id}");
        }
        assert_eq!(stratified_split(&groups, DEFAULT_FRACTIONS, 3).unwrap(), split);
    }

    #[test]
    fn degenerate_fractions_put_everything_in_train() {
        let groups = single_class_groups(6);
        let split = stratified_split(&groups, (1.0, 0.0, 0.0), 0).unwrap();
        assert!(split.mapping.values().all(|s| *s == Split::Train));
    }

    #[test]
    fn small_class_is_rejected() {
        let groups = single_class_groups(2);
        assert!(matches!(
            stratified_split(&groups, DEFAULT_FRACTIONS, 0),
            Err(Error::ClassTooSmall { class: 0, count: 2 })
        ));
    }

    #[test]
    fn manifest_and_split_round_trip() {
        let m = manifest(vec![rec("a", V1, Some(3), 0, 100), rec("b", V2, None, 10, 90)]);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = Manifest::read_from(&buf[..]).unwrap();
        assert_eq!(back, m);

        let split = stratified_split(&single_class_groups(5), DEFAULT_FRACTIONS, 1).unwrap();
        let mut buf = Vec::new();
        split.write_to(&mut buf).unwrap();
        assert_eq!(SplitAssignment::read_from(&buf[..]).unwrap(), split);
    }

    #[test]
    fn resolve_by_anchor_overlap() {
        let m = manifest(vec![
            rec("a", V1, Some(0), 0, 100),
            rec("b", V1, Some(1), 100, 200),
        ]);
        let groups = build_sync_groups(&m, V1, &[V2], 1).unwrap();
        let probe = vec![rec("x", V3, None, 90, 180), rec("y", V3, Some(0), 90, 180), rec("z", V3, None, 500, 600)];
        assert_eq!(resolve_groups(&groups, &probe), vec![Some("b"), Some("a"), None]);
    }
}
