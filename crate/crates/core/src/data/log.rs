use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One timestamped implicit-feedback event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Interactions over dense user ids `0..user_count` and item ids
/// `0..item_count`, sorted by `(user, timestamp, item)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    records: Vec<Interaction>,
    user_count: usize,
    item_count: usize,
    user_labels: Vec<String>,
    item_labels: Vec<String>,
}

impl InteractionLog {
    /// Builds a log from records with numeric labels equal to the ids.
    pub fn from_records(records: Vec<Interaction>, user_count: usize, item_count: usize) -> Result<Self> {
        Self::with_labels(
            records,
            (0..user_count).map(|u| u.to_string()).collect(),
            (0..item_count).map(|i| i.to_string()).collect(),
        )
    }

    pub fn with_labels(mut records: Vec<Interaction>, user_labels: Vec<String>, item_labels: Vec<String>) -> Result<Self> {
        let (user_count, item_count) = (user_labels.len(), item_labels.len());
        if let Some(bad) = records.iter().find(|r| r.user >= user_count || r.item >= item_count) {
            return Err(Error::shape(format!(
                "record {bad:?} outside {user_count} users x {item_count} items"
            )));
        }
        records.sort_by_key(|r| (r.user, r.timestamp, r.item));
        records.dedup();
        Ok(Self {
            records,
            user_count,
            item_count,
            user_labels,
            item_labels,
        })
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn user_labels(&self) -> &[String] {
        &self.user_labels
    }

    pub fn item_labels(&self) -> &[String] {
        &self.item_labels
    }

    /// Records grouped per user, each group in chronological order.
    pub fn per_user(&self) -> Vec<&[Interaction]> {
        let mut out = vec![&self.records[..0]; self.user_count];
        let mut start = 0;
        while start < self.records.len() {
            let u = self.records[start].user;
            let end = start + self.records[start..].iter().take_while(|r| r.user == u).count();
            out[u] = &self.records[start..end];
            start = end;
        }
        out
    }

    /// Sorted, deduplicated item ids per user.
    pub fn user_item_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.user_count];
        for r in &self.records {
            sets[r.user].push(r.item);
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        sets
    }

    pub fn time_range(&self) -> Option<(i64, i64)> {
        let min = self.records.iter().map(|r| r.timestamp).min()?;
        let max = self.records.iter().map(|r| r.timestamp).max()?;
        Some((min, max))
    }

    /// Renumbers items by first appearance in `(user, timestamp)` order, so
    /// that the canonical CSV export re-loads with identical ids.
    pub fn canonicalize_items(self) -> Result<Self> {
        let mut map = vec![None; self.item_count];
        let mut labels = Vec::with_capacity(self.item_count);
        for r in &self.records {
            if map[r.item].is_none() {
                map[r.item] = Some(labels.len());
                labels.push(self.item_labels[r.item].clone());
            }
        }
        for (old, slot) in map.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(labels.len());
                labels.push(self.item_labels[old].clone());
            }
        }
        let records = self
            .records
            .iter()
            .map(|r| Interaction {
                item: map[r.item].expect("mapped"),
                ..*r
            })
            .collect();
        Self::with_labels(records, self.user_labels, labels)
    }

    /// Same id space and labels, different records.
    pub fn with_records(&self, records: Vec<Interaction>) -> Result<Self> {
        Self::with_labels(records, self.user_labels.clone(), self.item_labels.clone())
    }

    /// Writes `user,item,timestamp` rows using the original labels.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "user,item,timestamp")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{}",
                self.user_labels[r.user], self.item_labels[r.item], r.timestamp
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads a `user,item,timestamp[,rating]` CSV.
///
/// User ids are assigned densely in order of first appearance in the file;
/// item ids in order of first appearance once records are sorted by
/// `(user, timestamp)`. Exact duplicate rows collapse and a rating column is
/// ignored.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;

    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Empty(format!("{} has no header", path.display())));
    }
    let names: Vec<String> = headers.iter().map(str::to_ascii_lowercase).collect();
    if names.len() < 3 || names.len() > 4 || names[..3] != ["user", "item", "timestamp"] || names.get(3).is_some_and(|n| n != "rating") {
        return Err(parse_err(
            1,
            format!("expected header `user,item,timestamp[,rating]`, got `{}`", names.join(",")),
        ));
    }

    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_labels = Vec::new();
    let mut item_labels = Vec::new();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != names.len() {
            return Err(parse_err(line, format!("expected {} fields, got {}", names.len(), row.len())));
        }
        let timestamp: i64 = row[2]
            .parse()
            .map_err(|_| parse_err(line, format!("timestamp `{}` is not an integer", &row[2])))?;
        if row[0].is_empty() || row[1].is_empty() {
            return Err(parse_err(line, "empty user or item".into()));
        }
        let intern = |map: &mut HashMap<String, usize>, labels: &mut Vec<String>, key: &str| {
            *map.entry(key.to_string()).or_insert_with(|| {
                labels.push(key.to_string());
                labels.len() - 1
            })
        };
        let user = intern(&mut users, &mut user_labels, &row[0]);
        let item = intern(&mut items, &mut item_labels, &row[1]);
        let rec = Interaction { user, item, timestamp };
        if seen.insert(rec) {
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("{} contains no interactions", path.display())));
    }
    InteractionLog::with_labels(records, user_labels, item_labels)?.canonicalize_items()
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// none remain, then re-densifies ids preserving their relative order.
pub fn core_filter(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::config("core filter needs k >= 1"));
    }
    let mut records = log.records().to_vec();
    loop {
        let mut user_deg = vec![0usize; log.user_count()];
        let mut item_deg = vec![0usize; log.item_count()];
        for r in &records {
            user_deg[r.user] += 1;
            item_deg[r.item] += 1;
        }
        let before = records.len();
        records.retain(|r| user_deg[r.user] >= k && item_deg[r.item] >= k);
        if records.len() == before {
            break;
        }
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("{k}-core filtering removed every interaction")));
    }
    reindex(log, records)
}

fn reindex(log: &InteractionLog, records: Vec<Interaction>) -> Result<InteractionLog> {
    let mut user_map = vec![None; log.user_count()];
    let mut item_map = vec![None; log.item_count()];
    for r in &records {
        user_map[r.user] = Some(0);
        item_map[r.item] = Some(0);
    }
    let densify = |map: &mut [Option<usize>], labels: &[String]| {
        let mut kept = Vec::new();
        for (old, slot) in map.iter_mut().enumerate() {
            if slot.is_some() {
                *slot = Some(kept.len());
                kept.push(labels[old].clone());
            }
        }
        kept
    };
    let user_labels = densify(&mut user_map, log.user_labels());
    let item_labels = densify(&mut item_map, log.item_labels());
    let records = records
        .into_iter()
        .map(|r| Interaction {
            user: user_map[r.user].expect("kept user"),
            item: item_map[r.item].expect("kept item"),
            timestamp: r.timestamp,
        })
        .collect();
    InteractionLog::with_labels(records, user_labels, item_labels)?.canonicalize_items()
}
