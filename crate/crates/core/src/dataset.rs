//! Interaction logs: loading, activity filtering, leave-last-out temporal
//! splitting and per-behavior item frequencies.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::behavior::{Behavior, NUM_BEHAVIORS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub behavior: Behavior,
    pub timestamp: i64,
}

/// Timestamped `(user, item, behavior)` events with contiguous zero-based ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    pub events: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// Raw identifier of each user index, when known.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// Column layout of a raw interaction file.
#[derive(Clone, Debug)]
pub struct Schema {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
    pub timestamp: usize,
    pub delimiter: u8,
    pub has_header: bool,
    /// Extra behavior labels, matched case-insensitively before the canonical names.
    pub aliases: Vec<(String, Behavior)>,
}

impl Default for Schema {
    fn default() -> Self {
        Self { user: 0, item: 1, behavior: 2, timestamp: 3, delimiter: b'\t', has_header: false, aliases: Vec::new() }
    }
}

impl Schema {
    fn parse_behavior(&self, label: &str, line: u64) -> Result<Behavior> {
        let trimmed = label.trim();
        if let Some((_, b)) = self.aliases.iter().find(|(a, _)| a.eq_ignore_ascii_case(trimmed)) {
            return Ok(*b);
        }
        trimmed.parse().map_err(|_| Error::Schema { line, label: label.to_string() })
    }
}

/// Held-out purchases for one split.
pub type HeldOut = BTreeMap<usize, usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitBundle {
    pub train: InteractionLog,
    pub valid: HeldOut,
    pub test: HeldOut,
    /// Users with fewer than two purchases, kept in train only.
    pub skipped_users: usize,
}

/// Per-behavior count of distinct users per item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    pub counts: Vec<Vec<u64>>,
    pub totals: Vec<u64>,
}

impl FrequencyTable {
    pub fn num_items(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn count(&self, behavior: Behavior, item: usize) -> u64 {
        self.counts[behavior.index()][item]
    }

    #[inline]
    pub fn total(&self, behavior: Behavior) -> u64 {
        self.totals[behavior.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub view: u64,
    pub add: u64,
    pub purchase: u64,
    /// Share of view events among all events.
    pub view_ratio: f64,
}

impl InteractionLog {
    pub fn new(events: Vec<Interaction>, num_users: usize, num_items: usize) -> Self {
        Self { events, num_users, num_items, user_ids: Vec::new(), item_ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.events {
            if e.user >= self.num_users || e.item >= self.num_items {
                return Err(Error::Contract(format!(
                    "event ({}, {}) outside {} users x {} items",
                    e.user, e.item, self.num_users, self.num_items
                )));
            }
        }
        Ok(())
    }

    /// Collapses repeated `(user, item, behavior)` events to one, keeping the
    /// latest timestamp, and orders events by `(user, timestamp, item, behavior)`.
    pub fn dedup(&mut self) {
        self.events.sort_unstable_by_key(|e| (e.user, e.item, e.behavior, std::cmp::Reverse(e.timestamp)));
        self.events.dedup_by_key(|e| (e.user, e.item, e.behavior));
        self.sort_by_time();
    }

    pub fn sort_by_time(&mut self) {
        self.events.sort_unstable_by_key(|e| (e.user, e.timestamp, e.item, e.behavior));
    }

    pub fn behavior_counts(&self) -> [u64; NUM_BEHAVIORS] {
        let mut c = [0u64; NUM_BEHAVIORS];
        for e in &self.events {
            c[e.behavior.index()] += 1;
        }
        c
    }

    pub fn stats(&self) -> DatasetStats {
        let [view, add, purchase] = self.behavior_counts();
        let total = view + add + purchase;
        DatasetStats {
            users: self.num_users,
            items: self.num_items,
            view,
            add,
            purchase,
            view_ratio: if total == 0 { 0.0 } else { view as f64 / total as f64 },
        }
    }

    pub fn user_label(&self, u: usize) -> String {
        self.user_ids.get(u).cloned().unwrap_or_else(|| u.to_string())
    }

    pub fn item_label(&self, v: usize) -> String {
        self.item_ids.get(v).cloned().unwrap_or_else(|| v.to_string())
    }
}

struct Indexer {
    index: HashMap<String, usize>,
    labels: Vec<String>,
}

impl Indexer {
    fn new() -> Self {
        Self { index: HashMap::new(), labels: Vec::new() }
    }

    fn get(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.labels.len();
        self.index.insert(raw.to_string(), i);
        self.labels.push(raw.to_string());
        i
    }
}

/// Reads a delimited interaction file, assigning indices to users and items
/// in order of first appearance.
pub fn load_interactions(path: impl AsRef<Path>, schema: &Schema) -> Result<InteractionLog> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .flexible(true)
        .quoting(false)
        .from_reader(file);

    let needed = schema.user.max(schema.item).max(schema.behavior).max(schema.timestamp) + 1;
    let mut users = Indexer::new();
    let mut items = Indexer::new();
    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() < needed {
            return Err(Error::Parse { line, message: format!("expected {needed} columns, found {}", record.len()) });
        }
        let behavior = schema.parse_behavior(&record[schema.behavior], line)?;
        let ts_raw = record[schema.timestamp].trim();
        let timestamp = ts_raw
            .parse::<i64>()
            .or_else(|_| ts_raw.parse::<f64>().map(|t| t as i64))
            .map_err(|_| Error::Parse { line, message: format!("bad timestamp {ts_raw:?}") })?;
        let user = users.get(record[schema.user].trim());
        let item = items.get(record[schema.item].trim());
        events.push(Interaction { user, item, behavior, timestamp });
    }

    Ok(InteractionLog {
        events,
        num_users: users.labels.len(),
        num_items: items.labels.len(),
        user_ids: users.labels,
        item_ids: items.labels,
    })
}

/// Removes users with at most `min_interactions` distinct interactions or fewer
/// than `min_purchases` purchases, and items with at most `min_interactions`
/// interactions, repeating until nothing changes. Survivors are re-indexed in
/// their original order.
pub fn filter_activity(log: &InteractionLog, min_interactions: usize, min_purchases: usize) -> Result<InteractionLog> {
    let mut current = log.clone();
    current.dedup();
    let mut keep_user = vec![true; log.num_users];
    let mut keep_item = vec![true; log.num_items];

    loop {
        let mut user_n = vec![0usize; log.num_users];
        let mut user_p = vec![0usize; log.num_users];
        let mut item_n = vec![0usize; log.num_items];
        for e in &current.events {
            user_n[e.user] += 1;
            item_n[e.item] += 1;
            if e.behavior == Behavior::Purchase {
                user_p[e.user] += 1;
            }
        }
        let mut changed = false;
        for u in 0..log.num_users {
            if keep_user[u] && (user_n[u] <= min_interactions || user_p[u] < min_purchases) {
                keep_user[u] = false;
                changed = true;
            }
        }
        for v in 0..log.num_items {
            if keep_item[v] && item_n[v] <= min_interactions {
                keep_item[v] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        current.events.retain(|e| keep_user[e.user] && keep_item[e.item]);
    }

    if current.events.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(reindex(&current))
}

/// Compacts ids to the entities that still have events, preserving order.
fn reindex(log: &InteractionLog) -> InteractionLog {
    let mut user_map = vec![usize::MAX; log.num_users];
    let mut item_map = vec![usize::MAX; log.num_items];
    for e in &log.events {
        user_map[e.user] = 0;
        item_map[e.item] = 0;
    }
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut next = 0;
    for (u, slot) in user_map.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = next;
            next += 1;
            user_ids.push(log.user_label(u));
        }
    }
    next = 0;
    for (v, slot) in item_map.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = next;
            next += 1;
            item_ids.push(log.item_label(v));
        }
    }
    let mut events: Vec<Interaction> = log
        .events
        .iter()
        .map(|e| Interaction { user: user_map[e.user], item: item_map[e.item], ..*e })
        .collect();
    events.sort_unstable_by_key(|e| (e.user, e.timestamp, e.item, e.behavior));
    InteractionLog { events, num_users: user_ids.len(), num_items: item_ids.len(), user_ids, item_ids }
}

/// Leave-last-out split on purchases: the latest purchase of each user goes
/// to test, the second latest to validation, everything else to train. Ties
/// on timestamp put the larger item id in the later slot.
pub fn temporal_split(log: &InteractionLog) -> SplitBundle {
    let mut log = log.clone();
    log.dedup();

    let mut purchases: Vec<Vec<(i64, usize)>> = vec![Vec::new(); log.num_users];
    for e in log.events.iter().filter(|e| e.behavior == Behavior::Purchase) {
        purchases[e.user].push((e.timestamp, e.item));
    }

    let mut active = vec![false; log.num_users];
    for e in &log.events {
        active[e.user] = true;
    }

    let mut valid = HeldOut::new();
    let mut test = HeldOut::new();
    let mut skipped = 0;
    for (u, p) in purchases.iter_mut().enumerate() {
        if !active[u] {
            continue;
        }
        if p.len() < 2 {
            skipped += 1;
            continue;
        }
        p.sort_unstable();
        test.insert(u, p[p.len() - 1].1);
        valid.insert(u, p[p.len() - 2].1);
    }
    if skipped > 0 {
        warn!("{skipped} users have fewer than two purchases and are excluded from evaluation");
    }

    let events = log
        .events
        .iter()
        .filter(|e| {
            e.behavior != Behavior::Purchase
                || (test.get(&e.user) != Some(&e.item) && valid.get(&e.user) != Some(&e.item))
        })
        .copied()
        .collect();
    let train = InteractionLog { events, ..log };
    SplitBundle { train, valid, test, skipped_users: skipped }
}

/// Counts distinct users per (behavior, item) on the train log.
pub fn behavior_frequency(train: &InteractionLog) -> FrequencyTable {
    let mut triples: Vec<(usize, usize, usize)> =
        train.events.iter().map(|e| (e.behavior.index(), e.item, e.user)).collect();
    triples.sort_unstable();
    triples.dedup();
    let mut counts = vec![vec![0u64; train.num_items]; NUM_BEHAVIORS];
    for (k, v, _) in triples {
        counts[k][v] += 1;
    }
    let totals = counts.iter().map(|row| row.iter().sum()).collect();
    FrequencyTable { counts, totals }
}

/// Train/valid/test files written by `prepare` and read back by training.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: InteractionLog,
    pub valid: HeldOut,
    pub test: HeldOut,
    pub stats: DatasetStats,
}

impl PreparedData {
    pub fn from_split(split: SplitBundle, stats: DatasetStats) -> Self {
        Self { train: split.train, valid: split.valid, test: split.test, stats }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_held_out(path: &Path, held: &HeldOut) -> Result<()> {
    let mut w = create(path)?;
    for (u, v) in held {
        writeln!(w, "{u}\t{v}").map_err(write_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

pub fn write_log(path: &Path, log: &InteractionLog) -> Result<()> {
    let mut w = create(path)?;
    for e in &log.events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user, e.item, e.behavior, e.timestamp).map_err(write_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

pub fn write_frequency(path: &Path, freq: &FrequencyTable) -> Result<()> {
    let mut w = create(path)?;
    for b in Behavior::ALL {
        for (v, c) in freq.counts[b.index()].iter().enumerate() {
            writeln!(w, "{b}\t{v}\t{c}").map_err(write_err(path))?;
        }
    }
    w.flush().map_err(write_err(path))
}

fn write_labels(path: &Path, labels: &[String]) -> Result<()> {
    let mut w = create(path)?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i}\t{l}").map_err(write_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv`, `freq.tsv`, `stats.json` and
/// the raw-id maps `users.tsv` / `items.tsv` into `dir`.
pub fn write_prepared(dir: &Path, data: &PreparedData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_log(&dir.join("train.tsv"), &data.train)?;
    write_held_out(&dir.join("valid.tsv"), &data.valid)?;
    write_held_out(&dir.join("test.tsv"), &data.test)?;
    write_frequency(&dir.join("freq.tsv"), &behavior_frequency(&data.train))?;
    let stats_path = dir.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&data.stats)?).map_err(|e| Error::io(&stats_path, e))?;
    if !data.train.user_ids.is_empty() {
        write_labels(&dir.join("users.tsv"), &data.train.user_ids)?;
    }
    if !data.train.item_ids.is_empty() {
        write_labels(&dir.join("items.tsv"), &data.train.item_ids)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(u64, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i as u64 + 1, line));
        }
    }
    Ok(out)
}

fn parse_index(s: &str, line: u64) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Parse { line, message: format!("bad index {s:?}") })
}

pub fn read_held_out(path: &Path) -> Result<HeldOut> {
    let mut held = HeldOut::new();
    for (line, text) in read_lines(path)? {
        let mut cols = text.split('\t');
        let (Some(u), Some(v)) = (cols.next(), cols.next()) else {
            return Err(Error::Parse { line, message: "expected user and item".into() });
        };
        held.insert(parse_index(u, line)?, parse_index(v, line)?);
    }
    Ok(held)
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_lines(path)?
        .into_iter()
        .map(|(_, l)| l.split_once('\t').map_or(l.clone(), |(_, r)| r.to_string()))
        .collect())
}

/// Reads a directory produced by [`write_prepared`].
pub fn read_prepared(dir: &Path) -> Result<PreparedData> {
    let stats_path = dir.join("stats.json");
    let raw = fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
    let stats: DatasetStats = serde_json::from_str(&raw)?;
    let mut events = Vec::new();
    for (line, text) in read_lines(&dir.join("train.tsv"))? {
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() < 4 {
            return Err(Error::Parse { line, message: "expected 4 columns".into() });
        }
        let behavior = cols[2].parse().map_err(|_| Error::Schema { line, label: cols[2].to_string() })?;
        let timestamp =
            cols[3].trim().parse().map_err(|_| Error::Parse { line, message: format!("bad timestamp {:?}", cols[3]) })?;
        events.push(Interaction { user: parse_index(cols[0], line)?, item: parse_index(cols[1], line)?, behavior, timestamp });
    }
    let train = InteractionLog {
        events,
        num_users: stats.users,
        num_items: stats.items,
        user_ids: read_labels(&dir.join("users.tsv"))?,
        item_ids: read_labels(&dir.join("items.tsv"))?,
    };
    train.validate()?;
    Ok(PreparedData {
        train,
        valid: read_held_out(&dir.join("valid.tsv"))?,
        test: read_held_out(&dir.join("test.tsv"))?,
        stats,
    })
}
