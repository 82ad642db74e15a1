//! Clique manifests, cover / non-cover pair generation and validation splits.

pub mod synth;

pub use synth::{
    render_melody, synthesize_corpus, Melody, Note, SynthConfig, SynthOutput, VersionParams,
    SYNTH_SECONDS,
};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: track record before any clique header")]
    NoOpenClique { line: usize },
    #[error("track {track} appears more than once")]
    DuplicateTrack { track: String },
    #[error("manifest has no clique with at least two tracks")]
    EmptyManifest,
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("cannot draw {requested} distinct cross-clique pairs, only {available} exist")]
    InsufficientDiversity { requested: usize, available: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Track {
    pub id: String,
    /// Audio path as written in the manifest, usually relative to it.
    pub path: Option<PathBuf>,
}

impl Track {
    pub fn new(id: impl Into<String>, path: Option<PathBuf>) -> Self {
        Self {
            id: id.into(),
            path,
        }
    }
}

/// Version groups of the same underlying song. Every retained clique has at
/// least two members and no track belongs to two cliques.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliqueSet {
    cliques: BTreeMap<String, Vec<Track>>,
    clique_of: HashMap<String, String>,
    dropped_singletons: usize,
}

impl CliqueSet {
    /// Builds a set from `(clique_id, members)` groups; groups with fewer than
    /// two members are dropped and counted.
    pub fn from_groups<I>(groups: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (String, Vec<Track>)>,
    {
        let mut set = CliqueSet::default();
        let mut seen = HashSet::new();
        for (cid, mut members) in groups {
            for t in &members {
                if !seen.insert(t.id.clone()) {
                    return Err(DatasetError::DuplicateTrack {
                        track: t.id.clone(),
                    });
                }
            }
            if members.len() < 2 {
                set.dropped_singletons += 1;
                continue;
            }
            if set.cliques.contains_key(&cid) {
                return Err(DatasetError::InvalidParam(format!(
                    "clique {cid} declared twice"
                )));
            }
            members.sort_by(|a, b| a.id.cmp(&b.id));
            for t in &members {
                set.clique_of.insert(t.id.clone(), cid.clone());
            }
            set.cliques.insert(cid, members);
        }
        Ok(set)
    }

    pub fn n_cliques(&self) -> usize {
        self.cliques.len()
    }

    pub fn n_tracks(&self) -> usize {
        self.clique_of.len()
    }

    pub fn n_positive_pairs(&self) -> usize {
        self.cliques
            .values()
            .map(|m| m.len() * (m.len() - 1) / 2)
            .sum()
    }

    pub fn dropped_singletons(&self) -> usize {
        self.dropped_singletons
    }

    pub fn clique_of(&self, track: &str) -> Option<&str> {
        self.clique_of.get(track).map(String::as_str)
    }

    pub fn same_clique(&self, a: &str, b: &str) -> bool {
        matches!((self.clique_of(a), self.clique_of(b)), (Some(x), Some(y)) if x == y)
    }

    pub fn cliques(&self) -> impl Iterator<Item = (&str, &[Track])> {
        self.cliques.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn clique_ids(&self) -> Vec<String> {
        self.cliques.keys().cloned().collect()
    }

    /// All tracks, ordered by clique id then track id.
    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.cliques.values().flatten()
    }

    pub fn track_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.clique_of.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn track(&self, id: &str) -> Option<&Track> {
        let cid = self.clique_of.get(id)?;
        self.cliques[cid].iter().find(|t| t.id == id)
    }

    /// Restriction to the named cliques.
    pub fn subset(&self, clique_ids: &[String]) -> CliqueSet {
        let groups = clique_ids
            .iter()
            .filter_map(|c| self.cliques.get(c).map(|m| (c.clone(), m.clone())));
        CliqueSet::from_groups(groups).expect("subset of a valid set is valid")
    }

    /// Serializes in the manifest grammar accepted by [`parse_manifest_str`].
    pub fn to_manifest_string(&self) -> String {
        let mut out = String::from("% coverdet manifest\n");
        for (cid, members) in &self.cliques {
            let _ = writeln!(out, "-{cid}");
            for t in members {
                match &t.path {
                    Some(p) => {
                        let _ = writeln!(out, "{},{}", t.id, p.display());
                    }
                    None => {
                        let _ = writeln!(out, "{}", t.id);
                    }
                }
            }
        }
        out
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        fs::write(path, self.to_manifest_string()).map_err(|source| DatasetError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Parses the manifest grammar: `#`/`%` comment lines, `-<clique_id>` headers,
/// and `<track_id>[,<path>]` member lines.
pub fn parse_manifest_str(text: &str) -> Result<CliqueSet, DatasetError> {
    let mut groups: Vec<(String, Vec<Track>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('%') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('-') {
            let cid = rest.trim();
            if cid.is_empty() {
                return Err(DatasetError::MalformedLine {
                    line: line_no,
                    detail: "empty clique id".into(),
                });
            }
            groups.push((cid.to_string(), Vec::new()));
            continue;
        }
        let Some((_, members)) = groups.last_mut() else {
            return Err(DatasetError::NoOpenClique { line: line_no });
        };
        let (id, path) = match line.split_once(',') {
            Some((id, p)) if !p.trim().is_empty() => (id.trim(), Some(PathBuf::from(p.trim()))),
            Some((id, _)) => (id.trim(), None),
            None => (line, None),
        };
        if id.is_empty() {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                detail: "empty track id".into(),
            });
        }
        members.push(Track::new(id, path));
    }
    let set = CliqueSet::from_groups(groups)?;
    if set.n_cliques() == 0 {
        return Err(DatasetError::EmptyManifest);
    }
    Ok(set)
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<CliqueSet, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest_str(&text)
}

/// A labelled pair of tracks: 1 for a cover pair, 0 otherwise. Stored with
/// `track_a < track_b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairSample {
    pub track_a: String,
    pub track_b: String,
    pub label: u8,
}

impl PairSample {
    pub fn new(a: &str, b: &str, label: u8) -> Self {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        Self {
            track_a: x.to_string(),
            track_b: y.to_string(),
            label,
        }
    }

    pub fn key(&self) -> (String, String) {
        (self.track_a.clone(), self.track_b.clone())
    }

    pub fn is_cover(&self) -> bool {
        self.label == 1
    }
}

/// Every unordered within-clique pair, label 1, sorted.
pub fn positive_pairs(cs: &CliqueSet) -> Vec<PairSample> {
    let mut out = Vec::with_capacity(cs.n_positive_pairs());
    for (_, members) in cs.cliques() {
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                out.push(PairSample::new(&a.id, &b.id, 1));
            }
        }
    }
    out.sort();
    out
}

/// Draws `count` distinct cross-clique pairs, label 0.
pub fn sample_negatives(
    cs: &CliqueSet,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<PairSample>, DatasetError> {
    sample_negatives_excluding(cs, count, rng_seed, &HashSet::new())
}

/// Like [`sample_negatives`], never returning a pair whose key is in `exclude`.
pub fn sample_negatives_excluding(
    cs: &CliqueSet,
    count: usize,
    rng_seed: u64,
    exclude: &HashSet<(String, String)>,
) -> Result<Vec<PairSample>, DatasetError> {
    let ids = cs.track_ids();
    let n = ids.len();
    let all = n * n.saturating_sub(1) / 2;
    let excluded_cross = exclude
        .iter()
        .filter(|(a, b)| {
            cs.clique_of(a).is_some() && cs.clique_of(b).is_some() && !cs.same_clique(a, b)
        })
        .count();
    let available = all - cs.n_positive_pairs() - excluded_cross;
    if cs.n_cliques() < 2 || count > available {
        return Err(DatasetError::InsufficientDiversity {
            requested: count,
            available: if cs.n_cliques() < 2 { 0 } else { available },
        });
    }
    let mut rng = seed::rng(rng_seed);

    if count * 2 > available {
        let mut pool = Vec::with_capacity(available);
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                if !cs.same_clique(a, b) && !exclude.contains(&(a.clone(), b.clone())) {
                    pool.push(PairSample::new(a, b, 0));
                }
            }
        }
        pool.shuffle(&mut rng);
        pool.truncate(count);
        return Ok(pool);
    }

    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || cs.same_clique(&ids[i], &ids[j]) {
            continue;
        }
        let pair = PairSample::new(&ids[i], &ids[j], 0);
        if exclude.contains(&pair.key()) || !seen.insert(pair.key()) {
            continue;
        }
        out.push(pair);
    }
    Ok(out)
}

/// Holds out `n_holdout` pairs, stratified so the label mix of the holdout
/// matches the input's. Returns `(train, validation)`.
pub fn split_validation(
    pairs: &[PairSample],
    n_holdout: usize,
    rng_seed: u64,
) -> Result<(Vec<PairSample>, Vec<PairSample>), DatasetError> {
    if n_holdout == 0 {
        return Ok((pairs.to_vec(), Vec::new()));
    }
    if pairs.len() <= n_holdout {
        return Err(DatasetError::InvalidParam(format!(
            "cannot hold out {n_holdout} of {} pairs",
            pairs.len()
        )));
    }
    let mut pos: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].is_cover()).collect();
    let mut neg: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].is_cover()).collect();
    let mut rng = seed::rng(rng_seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let want_pos = ((n_holdout * pos.len()) as f64 / pairs.len() as f64).round() as usize;
    let take_pos = want_pos
        .min(pos.len())
        .max(n_holdout.saturating_sub(neg.len()));
    let take_neg = n_holdout - take_pos;

    let mut held: Vec<usize> = pos[..take_pos]
        .iter()
        .chain(&neg[..take_neg])
        .copied()
        .collect();
    held.sort_unstable();
    let held_set: HashSet<usize> = held.iter().copied().collect();
    let val = held.iter().map(|&i| pairs[i].clone()).collect();
    let train = (0..pairs.len())
        .filter(|i| !held_set.contains(i))
        .map(|i| pairs[i].clone())
        .collect();
    Ok((train, val))
}

/// Clique-strict split: `n_val_cliques` whole cliques go to validation.
pub fn split_by_clique(
    cs: &CliqueSet,
    n_val_cliques: usize,
    rng_seed: u64,
) -> Result<(CliqueSet, CliqueSet), DatasetError> {
    if n_val_cliques >= cs.n_cliques() {
        return Err(DatasetError::InvalidParam(format!(
            "cannot hold out {n_val_cliques} of {} cliques",
            cs.n_cliques()
        )));
    }
    let mut ids = cs.clique_ids();
    ids.shuffle(&mut seed::rng(rng_seed));
    let (val, train) = ids.split_at(n_val_cliques);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort();
    val.sort();
    Ok((cs.subset(&train), cs.subset(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str =
        "% demo\n-A\nt1,a/t1.wav\nt2,a/t2.wav\nt3\n# comment\n-B\nt4,b/t4.wav\nt5,b/t5.wav\n";

    #[test]
    fn parse_counts_pairs() {
        let cs = parse_manifest_str(TWO).unwrap();
        assert_eq!(cs.n_cliques(), 2);
        assert_eq!(cs.n_tracks(), 5);
        assert_eq!(cs.n_positive_pairs(), 4);
        assert_eq!(
            cs.track("t1").unwrap().path.as_deref(),
            Some(Path::new("a/t1.wav"))
        );
        assert_eq!(cs.track("t3").unwrap().path, None);
    }

    #[test]
    fn singletons_are_dropped_and_counted() {
        let cs = parse_manifest_str("-A\nx\ny\n-B\nz\n-C\n").unwrap();
        assert_eq!(cs.n_cliques(), 1);
        assert_eq!(cs.dropped_singletons(), 2);
        assert_eq!(cs.clique_of("z"), None);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_manifest_str("t1\n-A\nt2\n"),
            Err(DatasetError::NoOpenClique { line: 1 })
        ));
        assert!(matches!(
            parse_manifest_str("-A\nt1\nt2\n-B\nt1\nt3\n"),
            Err(DatasetError::DuplicateTrack { .. })
        ));
        assert!(matches!(
            parse_manifest_str("% nothing\n"),
            Err(DatasetError::EmptyManifest)
        ));
        assert!(matches!(
            parse_manifest_str("-A\nsolo\n"),
            Err(DatasetError::EmptyManifest)
        ));
    }

    #[test]
    fn positives_are_within_clique_and_sorted() {
        let cs = parse_manifest_str(TWO).unwrap();
        let p = positive_pairs(&cs);
        assert_eq!(p.len(), 4);
        assert!(p
            .iter()
            .all(|x| x.label == 1 && cs.same_clique(&x.track_a, &x.track_b)));
        assert!(p.windows(2).all(|w| w[0] < w[1]));

        let one = parse_manifest_str("-A\nt2\nt1\n").unwrap();
        assert_eq!(positive_pairs(&one), vec![PairSample::new("t1", "t2", 1)]);

        let five = parse_manifest_str("-A\na\nb\nc\nd\ne\n").unwrap();
        assert_eq!(positive_pairs(&five).len(), 10);
    }

    #[test]
    fn negatives_exhaust_small_sets() {
        let cs = parse_manifest_str("-A\na1\na2\n-B\nb1\nb2\n").unwrap();
        let mut neg = sample_negatives(&cs, 4, 1).unwrap();
        neg.sort();
        let want: Vec<PairSample> = [("a1", "b1"), ("a1", "b2"), ("a2", "b1"), ("a2", "b2")]
            .iter()
            .map(|(a, b)| PairSample::new(a, b, 0))
            .collect();
        assert_eq!(neg, want);
        assert!(matches!(
            sample_negatives(&cs, 5, 1),
            Err(DatasetError::InsufficientDiversity {
                requested: 5,
                available: 4
            })
        ));
        let single = parse_manifest_str("-A\na\nb\n").unwrap();
        assert!(sample_negatives(&single, 1, 1).is_err());
    }

    #[test]
    fn negatives_respect_exclusions() {
        let cs = parse_manifest_str("-A\na1\na2\n-B\nb1\nb2\n").unwrap();
        let ex: HashSet<_> = [("a1".to_string(), "b1".to_string())].into_iter().collect();
        let neg = sample_negatives_excluding(&cs, 3, 9, &ex).unwrap();
        assert!(neg.iter().all(|p| p.key() != ("a1".into(), "b1".into())));
        assert!(sample_negatives_excluding(&cs, 4, 9, &ex).is_err());
    }

    #[test]
    fn split_validation_contract() {
        let pairs: Vec<PairSample> = (0..40)
            .map(|i| PairSample::new(&format!("x{i:02}"), &format!("y{i:02}"), (i % 2) as u8))
            .collect();
        let (train, val) = split_validation(&pairs, 0, 3).unwrap();
        assert_eq!(train, pairs);
        assert!(val.is_empty());

        let (train, val) = split_validation(&pairs, 10, 3).unwrap();
        assert_eq!((train.len(), val.len()), (30, 10));
        assert_eq!(val.iter().filter(|p| p.is_cover()).count(), 5);
        let t: HashSet<_> = train.iter().collect();
        assert!(val.iter().all(|p| !t.contains(p)));
        assert_eq!(split_validation(&pairs, 10, 3).unwrap().1, val);

        assert!(split_validation(&pairs, 40, 3).is_err());
    }

    #[test]
    fn clique_split_is_disjoint() {
        let text: String = (0..10)
            .map(|c| format!("-c{c}\nc{c}a\nc{c}b\nc{c}c\n"))
            .collect();
        let cs = parse_manifest_str(&text).unwrap();
        let (train, val) = split_by_clique(&cs, 3, 11).unwrap();
        assert_eq!((train.n_cliques(), val.n_cliques()), (7, 3));
        for t in val.tracks() {
            assert!(train.clique_of(&t.id).is_none());
        }
        assert!(split_by_clique(&cs, 10, 0).is_err());
    }
}
