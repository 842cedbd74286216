//! Interaction logs, k-core filtering, splits and the bipartite train graph.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{0}: no interactions")]
    EmptyDataset(PathBuf),
    #[error("no interactions survive {k}-core filtering")]
    EmptyAfterFilter { k: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("user {user} has {count} interactions; leave-one-out needs at least 3")]
    TooFewInteractions { user: usize, count: usize },
    #[error("cold-start fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("malformed split manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An observed (user, item) interaction in dense index space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

impl Edge {
    pub fn new(user: usize, item: usize, timestamp: i64) -> Self {
        Self { user, item, timestamp }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Tsv,
    Csv,
}

impl InputFormat {
    fn delimiter(self) -> u8 {
        match self {
            InputFormat::Tsv => b'\t',
            InputFormat::Csv => b',',
        }
    }
}

/// Deduplicated interactions plus the bijections between raw ids and dense
/// indices. Dense indices follow first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    users: Vec<String>,
    items: Vec<String>,
    interactions: Vec<Edge>,
}

impl InteractionDataset {
    /// Builds a dataset from raw `(user, item, timestamp)` records.
    ///
    /// A repeated `(user, item)` pair keeps its first position and the
    /// earliest timestamp seen.
    pub fn from_records<I, U, V>(records: I) -> Self
    where
        I: IntoIterator<Item = (U, V, i64)>,
        U: AsRef<str>,
        V: AsRef<str>,
    {
        let mut user_ix: HashMap<String, usize> = HashMap::new();
        let mut item_ix: HashMap<String, usize> = HashMap::new();
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        let mut interactions: Vec<Edge> = Vec::new();

        for (u, i, ts) in records {
            let u = intern(&mut user_ix, &mut users, u.as_ref());
            let i = intern(&mut item_ix, &mut items, i.as_ref());
            match seen.get(&(u, i)) {
                Some(&pos) => {
                    let e = &mut interactions[pos];
                    e.timestamp = e.timestamp.min(ts);
                }
                None => {
                    seen.insert((u, i), interactions.len());
                    interactions.push(Edge::new(u, i, ts));
                }
            }
        }
        Self {
            users,
            items,
            interactions,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Edge] {
        &self.interactions
    }

    /// Raw user ids in dense-index order.
    pub fn user_ids(&self) -> &[String] {
        &self.users
    }

    /// Raw item ids in dense-index order.
    pub fn item_ids(&self) -> &[String] {
        &self.items
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.users.iter().position(|u| u == id)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i == id)
    }

    /// Keeps the interactions for which `keep` is true and re-densifies the
    /// indices in first-appearance order.
    fn retain<F: Fn(&Edge) -> bool>(&self, keep: F) -> Self {
        Self::from_records(
            self.interactions
                .iter()
                .filter(|e| keep(e))
                .map(|e| (self.users[e.user].as_str(), self.items[e.item].as_str(), e.timestamp)),
        )
    }
}

fn intern(ix: &mut HashMap<String, usize>, ids: &mut Vec<String>, id: &str) -> usize {
    if let Some(&i) = ix.get(id) {
        return i;
    }
    let i = ids.len();
    ix.insert(id.to_owned(), i);
    ids.push(id.to_owned());
    i
}

/// Reads a `user, item, timestamp` log. Extra columns are ignored; a header
/// row is detected by a non-numeric third field on the first row.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionDataset, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let record = result.map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(row as u64 + 1, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(row as u64 + 1, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() < 3 {
            return Err(parse_err(format!(
                "expected at least 3 columns, found {}",
                record.len()
            )));
        }
        let ts = match record[2].parse::<i64>() {
            Ok(ts) => ts,
            Err(_) if row == 0 => continue,
            Err(_) => return Err(parse_err(format!("bad timestamp {:?}", &record[2]))),
        };
        if ts < 0 {
            return Err(parse_err(format!("negative timestamp {ts}")));
        }
        if record[0].is_empty() || record[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        records.push((record[0].to_owned(), record[1].to_owned(), ts));
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset(path.to_path_buf()));
    }
    Ok(InteractionDataset::from_records(records))
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// every survivor has degree at least `k`.
pub fn k_core_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset, DataError> {
    if k == 0 {
        return Err(DataError::InvalidK);
    }
    let edges = ds.interactions();
    let mut user_deg = vec![0usize; ds.n_users()];
    let mut item_deg = vec![0usize; ds.n_items()];
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users()];
    let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); ds.n_items()];
    for (pos, e) in edges.iter().enumerate() {
        user_deg[e.user] += 1;
        item_deg[e.item] += 1;
        by_user[e.user].push(pos);
        by_item[e.item].push(pos);
    }

    let mut alive = vec![true; edges.len()];
    let mut user_gone = vec![false; ds.n_users()];
    let mut item_gone = vec![false; ds.n_items()];
    // Pending removals: (is_user, index).
    let mut queue: Vec<(bool, usize)> = Vec::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            user_gone[u] = true;
            queue.push((true, u));
        }
    }
    for (i, &d) in item_deg.iter().enumerate() {
        if d < k {
            item_gone[i] = true;
            queue.push((false, i));
        }
    }

    while let Some((is_user, node)) = queue.pop() {
        let incident = if is_user { &by_user[node] } else { &by_item[node] };
        for &pos in incident {
            if !alive[pos] {
                continue;
            }
            alive[pos] = false;
            let e = edges[pos];
            if is_user {
                item_deg[e.item] -= 1;
                if item_deg[e.item] < k && !item_gone[e.item] {
                    item_gone[e.item] = true;
                    queue.push((false, e.item));
                }
            } else {
                user_deg[e.user] -= 1;
                if user_deg[e.user] < k && !user_gone[e.user] {
                    user_gone[e.user] = true;
                    queue.push((true, e.user));
                }
            }
        }
    }

    let out = ds.retain(|e| !user_gone[e.user] && !item_gone[e.item]);
    if out.is_empty() {
        return Err(DataError::EmptyAfterFilter { k });
    }
    Ok(out)
}

/// Train/validation/test partition of a dataset's interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Edge>,
    pub validation: Vec<Edge>,
    pub test: Vec<Edge>,
}

impl Split {
    /// Test item per user, if any.
    pub fn test_items(&self) -> Vec<Option<usize>> {
        held_out(self.n_users, &self.test)
    }

    pub fn validation_items(&self) -> Vec<Option<usize>> {
        held_out(self.n_users, &self.validation)
    }

    /// Sorted train items per user.
    pub fn train_items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for e in &self.train {
            out[e.user].push(e.item);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }
}

fn held_out(n_users: usize, edges: &[Edge]) -> Vec<Option<usize>> {
    let mut out = vec![None; n_users];
    for e in edges {
        out[e.user] = Some(e.item);
    }
    out
}

/// Holds out each user's latest interaction for test and the second latest
/// for validation. Equal timestamps resolve by input order.
pub fn leave_one_out_split(ds: &InteractionDataset) -> Result<Split, DataError> {
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users()];
    for (pos, e) in ds.interactions().iter().enumerate() {
        by_user[e.user].push(pos);
    }
    let edges = ds.interactions();
    let mut held = vec![false; edges.len()];
    let mut validation = Vec::with_capacity(ds.n_users());
    let mut test = Vec::with_capacity(ds.n_users());
    for (user, positions) in by_user.iter_mut().enumerate() {
        if positions.len() < 3 {
            return Err(DataError::TooFewInteractions {
                user,
                count: positions.len(),
            });
        }
        // Stable sort: ties stay in file order, so the later row is later.
        positions.sort_by_key(|&p| edges[p].timestamp);
        let n = positions.len();
        test.push(edges[positions[n - 1]]);
        validation.push(edges[positions[n - 2]]);
        held[positions[n - 1]] = true;
        held[positions[n - 2]] = true;
    }
    let train = edges.iter().zip(&held).filter(|(_, &h)| !h).map(|(e, _)| *e).collect();
    Ok(Split {
        n_users: ds.n_users(),
        n_items: ds.n_items(),
        train,
        validation,
        test,
    })
}

/// Removes `floor(fraction * degree)` train edges per user by seeded uniform
/// sampling, always leaving at least one. Validation and test are untouched.
pub fn coldstart_perturb(split: &Split, fraction: f64, seed: u64) -> Result<Split, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); split.n_users];
    for (pos, e) in split.train.iter().enumerate() {
        by_user[e.user].push(pos);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed = vec![false; split.train.len()];
    for positions in &by_user {
        let degree = positions.len();
        if degree == 0 {
            continue;
        }
        let drop = ((fraction * degree as f64).floor() as usize).min(degree - 1);
        if drop == 0 {
            continue;
        }
        for k in index::sample(&mut rng, degree, drop) {
            removed[positions[k]] = true;
        }
    }
    let train = split
        .train
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(e, _)| *e)
        .collect();
    Ok(Split { train, ..split.clone() })
}

/// Bipartite user-item graph over train edges, stored as two CSR adjacencies
/// with ascending neighbour lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    user_offsets: Vec<usize>,
    user_items: Vec<usize>,
    item_offsets: Vec<usize>,
    item_users: Vec<usize>,
}

impl BipartiteGraph {
    /// Builds the graph from an edge list. Duplicate edges are kept once.
    pub fn from_edges(n_users: usize, n_items: usize, edges: &[Edge]) -> Self {
        let mut pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.user, e.item)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        let (user_offsets, user_items) = csr(n_users, pairs.iter().copied());
        let mut flipped: Vec<(usize, usize)> = pairs.iter().map(|&(u, i)| (i, u)).collect();
        flipped.sort_unstable();
        let (item_offsets, item_users) = csr(n_items, flipped.into_iter());
        Self {
            n_users,
            n_items,
            user_offsets,
            user_items,
            item_offsets,
            item_users,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.user_items.len()
    }

    pub fn user_neighbors(&self, user: usize) -> &[usize] {
        &self.user_items[self.user_offsets[user]..self.user_offsets[user + 1]]
    }

    pub fn item_neighbors(&self, item: usize) -> &[usize] {
        &self.item_users[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_offsets[user + 1] - self.user_offsets[user]
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_offsets[item + 1] - self.item_offsets[item]
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        (0..self.n_users).map(|u| self.user_degree(u)).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        (0..self.n_items).map(|i| self.item_degree(i)).collect()
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_neighbors(user).binary_search(&item).is_ok()
    }

    /// Iterates edges in user-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_users).flat_map(move |u| self.user_neighbors(u).iter().map(move |&i| (u, i)))
    }
}

fn csr(rows: usize, sorted: impl Iterator<Item = (usize, usize)>) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; rows + 1];
    let mut cols = Vec::new();
    for (r, c) in sorted {
        offsets[r + 1] += 1;
        cols.push(c);
    }
    for r in 0..rows {
        offsets[r + 1] += offsets[r];
    }
    (offsets, cols)
}

/// Graph over the split's train edges.
pub fn build_graph(split: &Split) -> BipartiteGraph {
    BipartiteGraph::from_edges(split.n_users, split.n_items, &split.train)
}

/// A split together with the raw ids behind its dense indices, as stored on
/// disk by [`write_manifest`].
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub split: Split,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl Manifest {
    pub fn new(ds: &InteractionDataset, split: Split) -> Self {
        Self {
            split,
            user_ids: ds.user_ids().to_vec(),
            item_ids: ds.item_ids().to_vec(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IndexMapFile {
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALIDATION_FILE: &str = "validation.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const INDEX_MAP_FILE: &str = "index_map.json";

/// Writes three `user<TAB>item<TAB>timestamp` edge lists in dense indices and
/// `index_map.json` mapping raw ids to dense indices.
pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let split = &manifest.split;
    for (name, edges) in [
        (TRAIN_FILE, &split.train),
        (VALIDATION_FILE, &split.validation),
        (TEST_FILE, &split.test),
    ] {
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for e in edges.iter() {
            writeln!(w, "{}\t{}\t{}", e.user, e.item, e.timestamp).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    let index = IndexMapFile {
        users: to_map(&manifest.user_ids),
        items: to_map(&manifest.item_ids),
    };
    let path = dir.join(INDEX_MAP_FILE);
    let json = serde_json::to_string_pretty(&index).expect("index map serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

fn to_map(ids: &[String]) -> BTreeMap<String, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
}

fn from_map(map: BTreeMap<String, usize>, what: &str) -> Result<Vec<String>, DataError> {
    let mut ids = vec![None; map.len()];
    for (id, ix) in map {
        match ids.get_mut(ix) {
            Some(slot @ None) => *slot = Some(id),
            _ => {
                return Err(DataError::Manifest(format!(
                    "{what} index {ix} out of range or repeated"
                )))
            }
        }
    }
    Ok(ids.into_iter().map(|s| s.expect("filled")).collect())
}

/// Reads the files written by [`write_manifest`].
pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(INDEX_MAP_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let index: IndexMapFile =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    let user_ids = from_map(index.users, "user")?;
    let item_ids = from_map(index.items, "item")?;
    let (n_users, n_items) = (user_ids.len(), item_ids.len());
    let read = |name: &str| read_edges(&dir.join(name), n_users, n_items);
    let split = Split {
        n_users,
        n_items,
        train: read(TRAIN_FILE)?,
        validation: read(VALIDATION_FILE)?,
        test: read(TEST_FILE)?,
    };
    Ok(Manifest {
        split,
        user_ids,
        item_ids,
    })
}

fn read_edges(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<Edge>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut edges = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: n as u64 + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<i64>().map_err(|_| parse_err(format!("bad number {s:?}")));
        let (u, i, ts) = (num(fields[0])?, num(fields[1])?, num(fields[2])?);
        if u < 0 || u as usize >= n_users || i < 0 || i as usize >= n_items {
            return Err(parse_err(format!("edge ({u}, {i}) outside index map")));
        }
        edges.push(Edge::new(u as usize, i as usize, ts));
    }
    Ok(edges)
}
