//! Interaction data ingestion and train/validation/test splits.
//!
//! Two text formats are accepted, both UTF-8 with `#` comment lines:
//!
//! * adjacency lists, one user per line: `user item1 item2 ...`
//! * pair lists, one interaction per line: `user item [ignored columns...]`
//!
//! External IDs are non-negative integers. [`assemble`] maps the union of all
//! IDs seen across the splits onto dense, contiguous indices (ascending
//! external-ID order) so degrees and embeddings can be flat arrays.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: cannot parse {token:?} as a non-negative integer id")]
    Parse { line: usize, token: String },
    #[error("line {line}: expected `user item`, found {found} column(s)")]
    MissingColumn { line: usize, found: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// A set of interactions read from one file, still in external IDs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fragment {
    /// Every user mentioned, including users listed without items.
    pub users: BTreeSet<u64>,
    pub items: BTreeSet<u64>,
    pub pairs: BTreeSet<(u64, u64)>,
}

impl Fragment {
    pub fn insert(&mut self, user: u64, item: u64) {
        self.users.insert(user);
        self.items.insert(item);
        self.pairs.insert((user, item));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl FromIterator<(u64, u64)> for Fragment {
    fn from_iter<T: IntoIterator<Item = (u64, u64)>>(iter: T) -> Self {
        let mut frag = Fragment::default();
        for (u, i) in iter {
            frag.insert(u, i);
        }
        frag
    }
}

fn parse_id(token: &str, line: usize) -> Result<u64, DatasetError> {
    token.parse::<u64>().map_err(|_| DatasetError::Parse {
        line,
        token: token.to_string(),
    })
}

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn content_lines<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = Result<(usize, String), DatasetError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| match line {
            Ok(l) => {
                let trimmed = l.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    None
                } else {
                    Some(Ok((idx + 1, trimmed.to_string())))
                }
            }
            Err(source) => Some(Err(DatasetError::Io {
                path: "<reader>".into(),
                source,
            })),
        })
}

/// Parses `user item1 item2 ...` lines.
pub fn parse_adjacency_list<R: BufRead>(reader: R) -> Result<Fragment, DatasetError> {
    let mut frag = Fragment::default();
    for entry in content_lines(reader) {
        let (line_no, line) = entry?;
        let mut tokens = line.split_whitespace();
        // content_lines never yields blank lines
        let user = parse_id(tokens.next().unwrap(), line_no)?;
        frag.users.insert(user);
        for tok in tokens {
            let item = parse_id(tok, line_no)?;
            frag.insert(user, item);
        }
    }
    Ok(frag)
}

/// Parses `user item [extra columns]` lines; anything after the second column
/// (ratings, timestamps) is ignored.
pub fn parse_pair_list<R: BufRead>(reader: R) -> Result<Fragment, DatasetError> {
    let mut frag = Fragment::default();
    for entry in content_lines(reader) {
        let (line_no, line) = entry?;
        let tokens: Vec<&str> = line.split_whitespace().take(2).collect();
        if tokens.len() < 2 {
            return Err(DatasetError::MissingColumn {
                line: line_no,
                found: tokens.len(),
            });
        }
        let user = parse_id(tokens[0], line_no)?;
        let item = parse_id(tokens[1], line_no)?;
        frag.insert(user, item);
    }
    Ok(frag)
}

pub fn load_adjacency_list(path: impl AsRef<Path>) -> Result<Fragment, DatasetError> {
    let path = path.as_ref();
    parse_adjacency_list(open(path)?).map_err(|e| with_path(e, path))
}

pub fn load_pair_list(path: impl AsRef<Path>) -> Result<Fragment, DatasetError> {
    let path = path.as_ref();
    parse_pair_list(open(path)?).map_err(|e| with_path(e, path))
}

fn with_path(err: DatasetError, path: &Path) -> DatasetError {
    match err {
        DatasetError::Io { source, .. } => DatasetError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    }
}

/// File layout understood by [`load_fragment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    AdjacencyList,
    PairList,
}

pub fn load_fragment(
    path: impl AsRef<Path>,
    format: InputFormat,
) -> Result<Fragment, DatasetError> {
    match format {
        InputFormat::AdjacencyList => load_adjacency_list(path),
        InputFormat::PairList => load_pair_list(path),
    }
}

/// Options for [`assemble`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleOptions {
    /// Fraction of train pairs held out for validation when no validation
    /// fragment is supplied.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            valid_fraction: 0.05,
            seed: 2021,
        }
    }
}

/// Counts of pairs that [`assemble`] discarded from the evaluation splits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembleWarnings {
    /// Test pairs whose user has no train interaction.
    pub test_dropped_unknown_user: usize,
    /// Validation pairs whose user has no train interaction.
    pub valid_dropped_unknown_user: usize,
    /// Test pairs that also occur in train (or validation).
    pub test_dropped_overlap: usize,
    /// Validation pairs that also occur in train.
    pub valid_dropped_overlap: usize,
}

impl AssembleWarnings {
    pub fn total(&self) -> usize {
        self.test_dropped_unknown_user
            + self.valid_dropped_unknown_user
            + self.test_dropped_overlap
            + self.valid_dropped_overlap
    }
}

/// ID-mapped interactions with disjoint train/validation/test splits.
///
/// Pair lists are sorted by `(user, item)` and duplicate free. Every user with
/// a validation or test pair has at least one train pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train_pairs: Vec<(u32, u32)>,
    pub valid_pairs: Vec<(u32, u32)>,
    pub test_pairs: Vec<(u32, u32)>,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
}

/// Summary statistics emitted alongside prepared data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_users: usize,
    pub num_items: usize,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub num_interactions: usize,
    /// interactions / (users * items)
    pub density: f64,
    pub fingerprint: String,
}

impl InteractionDataset {
    /// Builds a dataset directly from dense indices, using the identity ID map.
    pub fn from_indices(
        num_users: usize,
        num_items: usize,
        train: impl IntoIterator<Item = (u32, u32)>,
        valid: impl IntoIterator<Item = (u32, u32)>,
        test: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self, DatasetError> {
        let collect = |it: &mut dyn Iterator<Item = (u32, u32)>| -> Vec<(u32, u32)> {
            let set: BTreeSet<(u32, u32)> = it.collect();
            set.into_iter().collect()
        };
        let ds = InteractionDataset {
            num_users,
            num_items,
            train_pairs: collect(&mut train.into_iter()),
            valid_pairs: collect(&mut valid.into_iter()),
            test_pairs: collect(&mut test.into_iter()),
            user_ids: (0..num_users as u64).collect(),
            item_ids: (0..num_items as u64).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.user_ids.len() != self.num_users || self.item_ids.len() != self.num_items {
            return Err(DatasetError::Invalid("id maps disagree with counts".into()));
        }
        if self.num_users > u32::MAX as usize || self.num_items > u32::MAX as usize {
            return Err(DatasetError::Invalid(
                "more than 2^32 users or items".into(),
            ));
        }
        for (name, pairs) in [
            ("train", &self.train_pairs),
            ("valid", &self.valid_pairs),
            ("test", &self.test_pairs),
        ] {
            if pairs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DatasetError::Invalid(format!(
                    "{name} pairs not sorted and unique"
                )));
            }
            if let Some(&(u, i)) = pairs
                .iter()
                .find(|&&(u, i)| u as usize >= self.num_users || i as usize >= self.num_items)
            {
                return Err(DatasetError::Invalid(format!(
                    "{name} pair ({u}, {i}) out of range"
                )));
            }
        }
        let train: BTreeSet<(u32, u32)> = self.train_pairs.iter().copied().collect();
        let mut has_train = vec![false; self.num_users];
        for &(u, _) in &self.train_pairs {
            has_train[u as usize] = true;
        }
        for (name, pairs) in [("valid", &self.valid_pairs), ("test", &self.test_pairs)] {
            for p in pairs.iter() {
                if train.contains(p) {
                    return Err(DatasetError::Invalid(format!(
                        "{name} pair {p:?} also in train"
                    )));
                }
                if !has_train[p.0 as usize] {
                    return Err(DatasetError::Invalid(format!(
                        "{name} user {} has no train interactions",
                        p.0
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn external_user_id(&self, user: u32) -> u64 {
        self.user_ids[user as usize]
    }

    pub fn external_item_id(&self, item: u32) -> u64 {
        self.item_ids[item as usize]
    }

    pub fn user_index(&self, external: u64) -> Option<u32> {
        self.user_ids
            .binary_search(&external)
            .ok()
            .map(|i| i as u32)
    }

    pub fn item_index(&self, external: u64) -> Option<u32> {
        self.item_ids
            .binary_search(&external)
            .ok()
            .map(|i| i as u32)
    }

    pub fn num_interactions(&self) -> usize {
        self.train_pairs.len() + self.valid_pairs.len() + self.test_pairs.len()
    }

    /// Hex SHA-256 over the shape and all three splits.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_users as u64).to_le_bytes());
        hasher.update((self.num_items as u64).to_le_bytes());
        for pairs in [&self.train_pairs, &self.valid_pairs, &self.test_pairs] {
            hasher.update((pairs.len() as u64).to_le_bytes());
            for &(u, i) in pairs.iter() {
                hasher.update(u.to_le_bytes());
                hasher.update(i.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let cells = (self.num_users as f64) * (self.num_items as f64);
        DatasetManifest {
            num_users: self.num_users,
            num_items: self.num_items,
            num_train: self.train_pairs.len(),
            num_valid: self.valid_pairs.len(),
            num_test: self.test_pairs.len(),
            num_interactions: self.num_interactions(),
            density: if cells > 0.0 {
                self.num_interactions() as f64 / cells
            } else {
                0.0
            },
            fingerprint: self.fingerprint(),
        }
    }

    /// Writes pairs as `user item` lines using external IDs.
    pub fn write_pairs<W: Write>(&self, pairs: &[(u32, u32)], mut out: W) -> io::Result<()> {
        for &(u, i) in pairs {
            writeln!(
                out,
                "{} {}",
                self.external_user_id(u),
                self.external_item_id(i)
            )?;
        }
        Ok(())
    }
}

/// Merges the three fragments into an [`InteractionDataset`].
///
/// Evaluation pairs that overlap train, or whose user has no train
/// interaction, are dropped and counted in the returned warnings. When `valid`
/// is `None`, `options.valid_fraction` of the train pairs is held out at
/// random; a user's last remaining train pair is never held out.
pub fn assemble(
    train: &Fragment,
    valid: Option<&Fragment>,
    test: &Fragment,
    options: &AssembleOptions,
) -> Result<(InteractionDataset, AssembleWarnings), DatasetError> {
    if !(0.0..1.0).contains(&options.valid_fraction) {
        return Err(DatasetError::Invalid(format!(
            "valid_fraction {} outside [0, 1)",
            options.valid_fraction
        )));
    }

    let mut users: BTreeSet<u64> = BTreeSet::new();
    let mut items: BTreeSet<u64> = BTreeSet::new();
    for frag in [Some(train), valid, Some(test)].into_iter().flatten() {
        users.extend(frag.users.iter().copied());
        items.extend(frag.items.iter().copied());
    }
    let user_ids: Vec<u64> = users.into_iter().collect();
    let item_ids: Vec<u64> = items.into_iter().collect();
    if user_ids.len() > u32::MAX as usize || item_ids.len() > u32::MAX as usize {
        return Err(DatasetError::Invalid(
            "more than 2^32 users or items".into(),
        ));
    }
    let user_map: HashMap<u64, u32> = user_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i as u32))
        .collect();
    let item_map: HashMap<u64, u32> = item_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i as u32))
        .collect();
    let map_pairs = |frag: &Fragment| -> BTreeSet<(u32, u32)> {
        frag.pairs
            .iter()
            .map(|(u, i)| (user_map[u], item_map[i]))
            .collect()
    };

    let mut train_set = map_pairs(train);
    let mut warnings = AssembleWarnings::default();

    let mut valid_set = match valid {
        Some(frag) => map_pairs(frag),
        None => hold_out(&mut train_set, user_ids.len(), options),
    };

    let mut train_users = vec![false; user_ids.len()];
    for &(u, _) in &train_set {
        train_users[u as usize] = true;
    }

    valid_set.retain(|p| {
        if train_set.contains(p) {
            warnings.valid_dropped_overlap += 1;
            false
        } else if !train_users[p.0 as usize] {
            warnings.valid_dropped_unknown_user += 1;
            false
        } else {
            true
        }
    });

    let mut test_set = map_pairs(test);
    test_set.retain(|p| {
        if train_set.contains(p) || valid_set.contains(p) {
            warnings.test_dropped_overlap += 1;
            false
        } else if !train_users[p.0 as usize] {
            warnings.test_dropped_unknown_user += 1;
            false
        } else {
            true
        }
    });
    if warnings.total() > 0 {
        log::warn!("dropped evaluation pairs while assembling: {warnings:?}");
    }

    let ds = InteractionDataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        train_pairs: std::mem::take(&mut train_set).into_iter().collect(),
        valid_pairs: valid_set.into_iter().collect(),
        test_pairs: test_set.into_iter().collect(),
        user_ids,
        item_ids,
    };
    debug_assert!(ds.validate().is_ok());
    Ok((ds, warnings))
}

fn hold_out(
    train: &mut BTreeSet<(u32, u32)>,
    num_users: usize,
    options: &AssembleOptions,
) -> BTreeSet<(u32, u32)> {
    let target = (train.len() as f64 * options.valid_fraction).round() as usize;
    let mut held = BTreeSet::new();
    if target == 0 {
        return held;
    }
    let mut remaining = vec![0usize; num_users];
    for &(u, _) in train.iter() {
        remaining[u as usize] += 1;
    }
    let mut order: Vec<(u32, u32)> = train.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    order.shuffle(&mut rng);
    for pair in order {
        if held.len() == target {
            break;
        }
        if remaining[pair.0 as usize] > 1 {
            remaining[pair.0 as usize] -= 1;
            train.remove(&pair);
            held.insert(pair);
        }
    }
    held
}
