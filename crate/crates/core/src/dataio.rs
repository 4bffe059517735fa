//! Implicit-feedback datasets: loading the processed leave-one-out files,
//! splitting raw interaction logs, and per-epoch negative sampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type UserId = u32;
pub type ItemId = u32;
pub type TestPair = (UserId, ItemId);

/// Number of sampled negatives stored per test user in the processed files.
pub const EVAL_NEGATIVES: usize = 99;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("user {user} has a single interaction; leave-one-out needs at least two")]
    SingleInteraction { user: UserId },
    #[error("user {user} has interacted with every item; no negative can be sampled")]
    Sampling { user: UserId },
}

/// Users, their training histories and the held-out evaluation cases.
///
/// Membership of `j` in `histories[u]` is the binary feedback `r_uj = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    pub histories: Vec<Vec<ItemId>>,
    /// One held-out `(user, item)` pair per evaluated user, sorted by user.
    pub test_pairs: Vec<(UserId, ItemId)>,
    /// Negatives aligned with `test_pairs`; empty when none were provided.
    pub eval_negatives: Vec<Vec<ItemId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrainInstance {
    pub user: UserId,
    pub item: ItemId,
    pub label: u8,
}

impl TrainInstance {
    pub fn positive(user: UserId, item: ItemId) -> Self {
        TrainInstance { user, item, label: 1 }
    }

    pub fn negative(user: UserId, item: ItemId) -> Self {
        TrainInstance { user, item, label: 0 }
    }
}

/// All training instances of one user for an epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub user: UserId,
    pub instances: Vec<TrainInstance>,
}

/// A raw interaction record prior to leave-one-out splitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
}

impl Dataset {
    pub fn num_interactions(&self) -> usize {
        self.histories.iter().map(Vec::len).sum::<usize>() + self.test_pairs.len()
    }

    pub fn num_train_interactions(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    pub fn history(&self, user: UserId) -> &[ItemId] {
        self.histories.get(user as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<(), DataError> {
        let n_items = self.num_items;
        if self.histories.len() != self.num_users {
            return Err(DataError::Consistency(format!(
                "{} histories for {} users",
                self.histories.len(),
                self.num_users
            )));
        }
        let mut seen = vec![u32::MAX; n_items];
        for (u, hist) in self.histories.iter().enumerate() {
            for &j in hist {
                if j as usize >= n_items {
                    return Err(DataError::Consistency(format!(
                        "user {u} history item {j} out of range"
                    )));
                }
                if seen[j as usize] == u as u32 {
                    return Err(DataError::Consistency(format!("user {u} has duplicate item {j}")));
                }
                seen[j as usize] = u as u32;
            }
        }
        if !self.eval_negatives.is_empty() && self.eval_negatives.len() != self.test_pairs.len() {
            return Err(DataError::Consistency(format!(
                "{} negative lists for {} test pairs",
                self.eval_negatives.len(),
                self.test_pairs.len()
            )));
        }
        for (idx, &(u, i)) in self.test_pairs.iter().enumerate() {
            if u as usize >= self.num_users || i as usize >= n_items {
                return Err(DataError::Consistency(format!("test pair ({u}, {i}) out of range")));
            }
            let hist = &self.histories[u as usize];
            if hist.is_empty() {
                return Err(DataError::Consistency(format!("test user {u} has no training history")));
            }
            if hist.contains(&i) {
                return Err(DataError::Consistency(format!(
                    "test item {i} of user {u} appears in the training history"
                )));
            }
            if let Some(negs) = self.eval_negatives.get(idx) {
                for &j in negs {
                    if j as usize >= n_items || j == i || hist.contains(&j) {
                        return Err(DataError::Consistency(format!(
                            "evaluation negative {j} of user {u} is out of range, the test item, or a known positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_id(field: &str, path: &Path, line: usize, what: &str) -> Result<u32, DataError> {
    field.trim().parse::<u32>().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid {what} id {field:?}"),
    })
}

/// Parses one `userID\titemID\trating\ttimestamp` file. The rating is
/// checked for well-formedness and discarded.
fn parse_rating_file(path: &Path) -> Result<Vec<Interaction>, DataError> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let user = parse_id(fields[0], path, line, "user")?;
        let item = parse_id(fields[1], path, line, "item")?;
        if fields[2].trim().parse::<f64>().is_err() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("invalid rating {:?}", fields[2]),
            });
        }
        let timestamp = fields[3].trim().parse::<i64>().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("invalid timestamp {:?}", fields[3]),
        })?;
        out.push(Interaction { user, item, timestamp });
    }
    Ok(out)
}

/// A test pair and its evaluation negatives.
type NegativeLine = ((UserId, ItemId), Vec<ItemId>);

/// Parses `(user,item)\tneg_1\t...\tneg_99` lines.
fn parse_negative_file(path: &Path) -> Result<Vec<NegativeLine>, DataError> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.trim_end().split('\t');
        let head = fields.next().unwrap_or("");
        let pair = head
            .trim()
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .and_then(|s| s.split_once(','))
            .ok_or_else(|| DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected a (user,item) pair, found {head:?}"),
            })?;
        let user = parse_id(pair.0, path, line, "user")?;
        let item = parse_id(pair.1, path, line, "item")?;
        let negatives = fields
            .map(|f| parse_id(f, path, line, "negative item"))
            .collect::<Result<Vec<_>, _>>()?;
        if negatives.len() != EVAL_NEGATIVES {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {EVAL_NEGATIVES} negatives, found {}", negatives.len()),
            });
        }
        out.push(((user, item), negatives));
    }
    Ok(out)
}

/// Loads the processed `*.train.rating`, `*.test.rating` and
/// `*.test.negative` files. User and item counts are inferred as the
/// largest id seen in any of the three files plus one.
pub fn load_ncf_dataset(
    train_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
    negatives_path: impl AsRef<Path>,
) -> Result<Dataset, DataError> {
    let train_path = train_path.as_ref();
    let test_path = test_path.as_ref();
    let negatives_path = negatives_path.as_ref();
    let train = parse_rating_file(train_path)?;
    let test = parse_rating_file(test_path)?;
    let negatives = parse_negative_file(negatives_path)?;

    let max_user = train
        .iter()
        .chain(&test)
        .map(|x| x.user)
        .chain(negatives.iter().map(|((u, _), _)| *u))
        .max();
    let max_item = train
        .iter()
        .chain(&test)
        .map(|x| x.item)
        .chain(negatives.iter().flat_map(|((_, i), n)| n.iter().copied().chain([*i])))
        .max();
    let num_users = max_user.map_or(0, |u| u as usize + 1);
    let num_items = max_item.map_or(0, |i| i as usize + 1);

    let mut histories = vec![Vec::new(); num_users];
    let mut member: Vec<std::collections::HashSet<ItemId>> = vec![Default::default(); num_users];
    for x in &train {
        if member[x.user as usize].insert(x.item) {
            histories[x.user as usize].push(x.item);
        }
    }

    let mut test_by_user: BTreeMap<UserId, ItemId> = BTreeMap::new();
    for (idx, x) in test.iter().enumerate() {
        if test_by_user.insert(x.user, x.item).is_some() {
            return Err(DataError::Format {
                path: test_path.to_path_buf(),
                line: idx + 1,
                msg: format!("user {} has more than one test interaction", x.user),
            });
        }
    }

    let mut neg_by_user: HashMap<UserId, Vec<ItemId>> = HashMap::new();
    for (idx, ((u, i), negs)) in negatives.into_iter().enumerate() {
        match test_by_user.get(&u) {
            Some(&t) if t == i => {
                neg_by_user.insert(u, negs);
            }
            _ => {
                return Err(DataError::Format {
                    path: negatives_path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("pair ({u},{i}) does not match any test pair"),
                })
            }
        }
    }

    let mut test_pairs = Vec::with_capacity(test_by_user.len());
    let mut eval_negatives = Vec::with_capacity(test_by_user.len());
    for (&u, &i) in &test_by_user {
        test_pairs.push((u, i));
        let negs = neg_by_user
            .remove(&u)
            .ok_or_else(|| DataError::Consistency(format!("test user {u} has no negatives line")))?;
        eval_negatives.push(negs);
    }

    let dataset = Dataset {
        num_users,
        num_items,
        histories,
        test_pairs,
        eval_negatives,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Paths of the three processed files sharing a common prefix, e.g.
/// `Data/ml-1m` → `Data/ml-1m.train.rating`, `.test.rating`, `.test.negative`.
pub fn ncf_paths(prefix: impl AsRef<Path>) -> (PathBuf, PathBuf, PathBuf) {
    let prefix = prefix.as_ref().to_string_lossy().into_owned();
    (
        PathBuf::from(format!("{prefix}.train.rating")),
        PathBuf::from(format!("{prefix}.test.rating")),
        PathBuf::from(format!("{prefix}.test.negative")),
    )
}

pub fn load_ncf_prefix(prefix: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (train, test, neg) = ncf_paths(prefix);
    load_ncf_dataset(train, test, neg)
}

/// Writes `dataset` as the three processed files under `prefix`. Training
/// interactions get rating 1 and their position in the history as timestamp,
/// so reloading reproduces the dataset exactly.
pub fn write_ncf_dataset(dataset: &Dataset, prefix: impl AsRef<Path>) -> Result<(), DataError> {
    let (train_path, test_path, neg_path) = ncf_paths(prefix);
    let write = |path: &Path, body: String| {
        fs::write(path, body).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let mut train = String::new();
    for (u, hist) in dataset.histories.iter().enumerate() {
        for (t, i) in hist.iter().enumerate() {
            writeln!(train, "{u}\t{i}\t1\t{t}").expect("write to string");
        }
    }
    let mut test = String::new();
    let mut neg = String::new();
    for (idx, &(u, i)) in dataset.test_pairs.iter().enumerate() {
        writeln!(test, "{u}\t{i}\t1\t{}", dataset.history(u).len()).expect("write to string");
        write!(neg, "({u},{i})").expect("write to string");
        for j in dataset.eval_negatives.get(idx).map_or(&[][..], Vec::as_slice) {
            write!(neg, "\t{j}").expect("write to string");
        }
        neg.push('\n');
    }
    write(&train_path, train)?;
    write(&test_path, test)?;
    write(&neg_path, neg)
}

/// Holds out each user's latest interaction. Ties on the latest timestamp
/// go to the largest item id. Repeated `(user, item)` records collapse into
/// one, keeping the latest timestamp.
///
/// Returns histories indexed by user (ordered by timestamp, then item) and
/// the test pairs sorted by user.
pub fn leave_one_out_split(interactions: &[Interaction]) -> Result<(Vec<Vec<ItemId>>, Vec<TestPair>), DataError> {
    let mut per_user: BTreeMap<UserId, HashMap<ItemId, i64>> = BTreeMap::new();
    for x in interactions {
        let ts = per_user.entry(x.user).or_default().entry(x.item).or_insert(x.timestamp);
        *ts = (*ts).max(x.timestamp);
    }
    let num_users = per_user.keys().next_back().map_or(0, |&u| u as usize + 1);
    let mut histories = vec![Vec::new(); num_users];
    let mut test_pairs = Vec::with_capacity(per_user.len());
    for (user, items) in per_user {
        if items.len() < 2 {
            return Err(DataError::SingleInteraction { user });
        }
        let mut ordered: Vec<(i64, ItemId)> = items.into_iter().map(|(i, t)| (t, i)).collect();
        ordered.sort_unstable();
        let (_, test_item) = ordered.pop().expect("at least two interactions");
        histories[user as usize] = ordered.into_iter().map(|(_, i)| i).collect();
        test_pairs.push((user, test_item));
    }
    Ok((histories, test_pairs))
}

/// Parses a raw rating log. Accepts either the MovieLens `u::i::r::t` layout
/// or tab/comma separated `u i r t` columns.
pub fn parse_raw_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>, DataError> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if raw.contains("::") {
            raw.split("::").collect()
        } else if raw.contains('\t') {
            raw.split('\t').collect()
        } else {
            raw.split(',').collect()
        };
        if fields.len() < 4 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected user, item, rating, timestamp; found {} fields", fields.len()),
            });
        }
        let user = parse_id(fields[0], path, line, "user")?;
        let item = parse_id(fields[1], path, line, "item")?;
        let timestamp = fields[3].trim().parse::<i64>().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("invalid timestamp {:?}", fields[3]),
        })?;
        out.push(Interaction { user, item, timestamp });
    }
    Ok(out)
}

/// Remaps sparse user and item ids onto dense `0..n` ranges, preserving
/// the relative order of ids. Returns the remapped records together with
/// the original ids indexed by their new dense id.
pub fn compact_ids(interactions: &[Interaction]) -> (Vec<Interaction>, Vec<UserId>, Vec<ItemId>) {
    let mut users: Vec<UserId> = interactions.iter().map(|x| x.user).collect();
    let mut items: Vec<ItemId> = interactions.iter().map(|x| x.item).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let user_index: HashMap<UserId, UserId> = users.iter().enumerate().map(|(n, &u)| (u, n as UserId)).collect();
    let item_index: HashMap<ItemId, ItemId> = items.iter().enumerate().map(|(n, &i)| (i, n as ItemId)).collect();
    let remapped = interactions
        .iter()
        .map(|x| Interaction {
            user: user_index[&x.user],
            item: item_index[&x.item],
            timestamp: x.timestamp,
        })
        .collect();
    (remapped, users, items)
}

/// Builds a dataset from raw interactions: dense id remapping, leave-one-out
/// split and `EVAL_NEGATIVES` sampled evaluation negatives per test user.
pub fn dataset_from_interactions(interactions: &[Interaction], seed: u64) -> Result<Dataset, DataError> {
    let (dense, _, items) = compact_ids(interactions);
    let (histories, test_pairs) = leave_one_out_split(&dense)?;
    let mut dataset = Dataset {
        num_users: histories.len(),
        num_items: items.len(),
        histories,
        test_pairs,
        eval_negatives: Vec::new(),
    };
    dataset.eval_negatives = sample_eval_negatives(&dataset, EVAL_NEGATIVES, seed)?;
    dataset.validate()?;
    Ok(dataset)
}

/// Draws `count` distinct evaluation negatives per test pair from the items
/// the user never interacted with (training history or test item).
pub fn sample_eval_negatives(dataset: &Dataset, count: usize, seed: u64) -> Result<Vec<Vec<ItemId>>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; dataset.num_items];
    let mut out = Vec::with_capacity(dataset.test_pairs.len());
    for &(u, i) in &dataset.test_pairs {
        let hist = dataset.history(u);
        for &j in hist {
            mask[j as usize] = true;
        }
        mask[i as usize] = true;
        let available = dataset.num_items - hist.len() - 1;
        if available < count {
            return Err(DataError::Sampling { user: u });
        }
        let mut negs = Vec::with_capacity(count);
        while negs.len() < count {
            let j = rng.random_range(0..dataset.num_items as ItemId);
            if !mask[j as usize] {
                mask[j as usize] = true;
                negs.push(j);
            }
        }
        for &j in hist.iter().chain(&negs).chain([&i]) {
            mask[j as usize] = false;
        }
        out.push(negs);
    }
    Ok(out)
}

/// Removes one uniformly drawn interaction from each user's history to form
/// a validation set; users with fewer than two training interactions keep
/// their history intact. The returned dataset has the validation pairs as
/// its test pairs, with freshly sampled evaluation negatives that also avoid
/// the original test item.
pub fn validation_split(dataset: &Dataset, seed: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut histories = dataset.histories.clone();
    let mut pairs = Vec::new();
    for (u, hist) in histories.iter_mut().enumerate() {
        if hist.len() < 2 {
            continue;
        }
        let pos = rng.random_range(0..hist.len());
        pairs.push((u as UserId, hist.remove(pos)));
    }
    let mut held_out = Dataset {
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        histories,
        test_pairs: pairs,
        eval_negatives: Vec::new(),
    };
    // Temporarily treat the original test item as known so it is never drawn.
    let original_test: HashMap<UserId, ItemId> = dataset.test_pairs.iter().copied().collect();
    let mut augmented = held_out.clone();
    for (&u, &t) in &original_test {
        augmented.histories[u as usize].push(t);
    }
    held_out.eval_negatives = sample_eval_negatives(&augmented, EVAL_NEGATIVES, seed ^ 0x9e37_79b9)?;
    held_out.validate()?;
    Ok(held_out)
}

/// Samples `ratio` negatives per observed `(u, j)` pair, drawn uniformly
/// (with replacement across draws) from items outside the user's history.
/// The output lists, per user and per history item, the positive followed
/// by its negatives.
pub fn sample_negatives(dataset: &Dataset, ratio: usize, seed: u64) -> Result<Vec<TrainInstance>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = dataset.num_items;
    let mut mask = vec![false; n_items];
    let mut complement: Vec<ItemId> = Vec::new();
    let mut out = Vec::with_capacity((ratio + 1) * dataset.num_train_interactions());
    for (u, hist) in dataset.histories.iter().enumerate() {
        if hist.is_empty() {
            continue;
        }
        let user = u as UserId;
        if ratio > 0 && hist.len() >= n_items {
            return Err(DataError::Sampling { user });
        }
        for &j in hist {
            mask[j as usize] = true;
        }
        // Rejection sampling degrades once the history covers most items.
        let dense = ratio > 0 && hist.len() * 2 > n_items;
        if dense {
            complement.clear();
            complement.extend((0..n_items as ItemId).filter(|&j| !mask[j as usize]));
            if complement.is_empty() {
                return Err(DataError::Sampling { user });
            }
        }
        for &j in hist {
            out.push(TrainInstance::positive(user, j));
            for _ in 0..ratio {
                let neg = if dense {
                    complement[rng.random_range(0..complement.len())]
                } else {
                    loop {
                        let cand = rng.random_range(0..n_items as ItemId);
                        if !mask[cand as usize] {
                            break cand;
                        }
                    }
                };
                out.push(TrainInstance::negative(user, neg));
            }
        }
        for &j in hist {
            mask[j as usize] = false;
        }
    }
    Ok(out)
}

/// Groups instances by user, keeping insertion order within a user, and
/// orders the users by a seeded uniform permutation.
pub fn user_minibatches(instances: &[TrainInstance], seed: u64) -> Vec<MiniBatch> {
    let mut groups: BTreeMap<UserId, Vec<TrainInstance>> = BTreeMap::new();
    for &x in instances {
        groups.entry(x.user).or_default().push(x);
    }
    let mut batches: Vec<MiniBatch> = groups
        .into_iter()
        .map(|(user, instances)| MiniBatch { user, instances })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    fn negatives_line(user: u32, item: u32, start: u32) -> String {
        let negs: Vec<String> = (start..start + 99).map(|j| j.to_string()).collect();
        format!("({user},{item})\t{}\n", negs.join("\t"))
    }

    fn tiny_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let train = write(dir, "t.train.rating", "0\t0\t5\t100\n0\t1\t3\t101\n1\t1\t4.5\t7\n");
        let test = write(dir, "t.test.rating", "0\t2\t5\t200\n1\t3\t1\t9");
        let neg = write(
            dir,
            "t.test.negative",
            &(negatives_line(0, 2, 10) + &negatives_line(1, 3, 10)),
        );
        (train, test, neg)
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test, neg) = tiny_files(dir.path());
        let ds = load_ncf_dataset(train, test, neg).unwrap();
        let prefix = dir.path().join("copy");
        write_ncf_dataset(&ds, &prefix).unwrap();
        assert_eq!(load_ncf_prefix(&prefix).unwrap(), ds);
    }

    #[test]
    fn loads_processed_files() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test, neg) = tiny_files(dir.path());
        let ds = load_ncf_dataset(train, test, neg).unwrap();
        assert_eq!(ds.num_users, 2);
        assert_eq!(ds.num_items, 109);
        assert_eq!(ds.histories, vec![vec![0, 1], vec![1]]);
        assert_eq!(ds.test_pairs, vec![(0, 2), (1, 3)]);
        assert_eq!(ds.eval_negatives[1].len(), 99);
        assert_eq!(ds.num_interactions(), 5);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (_, test, neg) = tiny_files(dir.path());
        let train = write(dir.path(), "bad.rating", "0\t0\t5\t1\n0\tx\t5\t1\n");
        match load_ncf_dataset(train, test, neg) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let train = write(dir.path(), "short.rating", "0\t0\t5\n");
        let (_, test, neg) = tiny_files(dir.path());
        assert!(matches!(
            load_ncf_dataset(train, test, neg),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn wrong_negative_count_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test, _) = tiny_files(dir.path());
        let neg = write(dir.path(), "n", "(0,2)\t10\t11\n");
        assert!(matches!(
            load_ncf_dataset(train, test, neg),
            Err(DataError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn empty_train_with_test_line_is_inconsistent() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(dir.path(), "e.train", "");
        let test = write(dir.path(), "e.test", "0\t2\t5\t200\n");
        let neg = write(dir.path(), "e.neg", &negatives_line(0, 2, 10));
        assert!(matches!(
            load_ncf_dataset(train, test, neg),
            Err(DataError::Consistency(_))
        ));
    }

    #[test]
    fn test_item_in_history_is_inconsistent() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(dir.path(), "c.train", "0\t2\t5\t1\n0\t1\t5\t1\n");
        let test = write(dir.path(), "c.test", "0\t2\t5\t200\n");
        let neg = write(dir.path(), "c.neg", &negatives_line(0, 2, 10));
        assert!(matches!(
            load_ncf_dataset(train, test, neg),
            Err(DataError::Consistency(_))
        ));
    }

    #[test]
    fn leave_one_out_takes_latest() {
        let xs = [
            Interaction {
                user: 0,
                item: 5,
                timestamp: 10,
            },
            Interaction {
                user: 0,
                item: 7,
                timestamp: 20,
            },
        ];
        let (hist, test) = leave_one_out_split(&xs).unwrap();
        assert_eq!(hist[0], vec![5]);
        assert_eq!(test, vec![(0, 7)]);
    }

    #[test]
    fn leave_one_out_tie_goes_to_largest_item() {
        let xs = [
            Interaction {
                user: 0,
                item: 9,
                timestamp: 5,
            },
            Interaction {
                user: 0,
                item: 3,
                timestamp: 5,
            },
            Interaction {
                user: 0,
                item: 1,
                timestamp: 2,
            },
        ];
        let (hist, test) = leave_one_out_split(&xs).unwrap();
        assert_eq!(test, vec![(0, 9)]);
        assert_eq!(hist[0], vec![1, 3]);
    }

    #[test]
    fn leave_one_out_one_pair_per_user() {
        let xs: Vec<Interaction> = (0..3)
            .flat_map(|u| {
                (0..2 + u).map(move |i| Interaction {
                    user: u,
                    item: i,
                    timestamp: i as i64,
                })
            })
            .collect();
        let (_, test) = leave_one_out_split(&xs).unwrap();
        assert_eq!(test.len(), 3);
    }

    #[test]
    fn leave_one_out_rejects_single_interaction() {
        let xs = [
            Interaction {
                user: 0,
                item: 1,
                timestamp: 1,
            },
            Interaction {
                user: 0,
                item: 2,
                timestamp: 2,
            },
            Interaction {
                user: 4,
                item: 1,
                timestamp: 1,
            },
        ];
        assert!(matches!(
            leave_one_out_split(&xs),
            Err(DataError::SingleInteraction { user: 4 })
        ));
    }

    fn toy_dataset() -> Dataset {
        Dataset {
            num_users: 3,
            num_items: 10,
            histories: vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7, 8]],
            test_pairs: vec![],
            eval_negatives: vec![],
        }
    }

    #[test]
    fn negative_sampling_counts_and_labels() {
        let ds = toy_dataset();
        let xs = sample_negatives(&ds, 4, 7).unwrap();
        assert_eq!(xs.len(), 5 * 9);
        for x in &xs {
            let in_hist = ds.histories[x.user as usize].contains(&x.item);
            assert_eq!(in_hist, x.label == 1);
        }
        assert_eq!(sample_negatives(&ds, 4, 7).unwrap(), xs);
        assert_eq!(sample_negatives(&ds, 0, 7).unwrap().len(), 9);
    }

    #[test]
    fn dense_history_uses_complement() {
        let ds = Dataset {
            num_users: 1,
            num_items: 4,
            histories: vec![vec![0, 1, 2]],
            test_pairs: vec![],
            eval_negatives: vec![],
        };
        let xs = sample_negatives(&ds, 3, 1).unwrap();
        assert!(xs.iter().filter(|x| x.label == 0).all(|x| x.item == 3));
    }

    #[test]
    fn full_history_cannot_be_sampled() {
        let ds = Dataset {
            num_users: 2,
            num_items: 2,
            histories: vec![vec![0], vec![0, 1]],
            test_pairs: vec![],
            eval_negatives: vec![],
        };
        assert!(matches!(
            sample_negatives(&ds, 1, 1),
            Err(DataError::Sampling { user: 1 })
        ));
    }

    #[test]
    fn minibatches_group_by_user() {
        let xs: Vec<TrainInstance> = (0..10).map(|n| TrainInstance::positive(n % 2, n)).collect();
        let batches = user_minibatches(&xs, 3);
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.instances.len() == 5));
        assert_eq!(batches, user_minibatches(&xs, 3));
        assert!(user_minibatches(&[], 3).is_empty());
    }

    #[test]
    fn compact_ids_is_order_preserving() {
        let xs = [
            Interaction {
                user: 10,
                item: 500,
                timestamp: 1,
            },
            Interaction {
                user: 3,
                item: 7,
                timestamp: 2,
            },
        ];
        let (dense, users, items) = compact_ids(&xs);
        assert_eq!(users, vec![3, 10]);
        assert_eq!(items, vec![7, 500]);
        assert_eq!((dense[0].user, dense[0].item), (1, 1));
    }

    #[test]
    fn eval_negatives_avoid_known_items() {
        let mut ds = toy_dataset();
        ds.test_pairs = vec![(0, 9), (1, 0)];
        let negs = sample_eval_negatives(&ds, 5, 11).unwrap();
        ds.eval_negatives = negs;
        ds.validate().unwrap();
        assert!(sample_eval_negatives(&ds, 7, 11).is_err());
    }

    #[test]
    fn validation_split_removes_one_item_per_user() {
        let mut ds = toy_dataset();
        ds.num_items = 200;
        ds.test_pairs = vec![(0, 9)];
        let val = validation_split(&ds, 5).unwrap();
        assert_eq!(val.test_pairs.len(), 3);
        for (u, i) in &val.test_pairs {
            assert!(ds.histories[*u as usize].contains(i));
            assert!(!val.histories[*u as usize].contains(i));
        }
        assert!(val.eval_negatives[0].iter().all(|&j| j != 9));
        assert_eq!(val.num_train_interactions(), ds.num_train_interactions() - 3);
    }
}
