use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::mechanisms::MomentSet;
use crate::thresholding::PartitionStats;
use crate::Value;

use super::{Contribution, UserPartitionMoments};

/// Per-partition totals after both bounding stages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundedPartition {
    pub key: Vec<Value>,
    pub exact_distinct_users: u64,
    pub clamped_count: u64,
    /// One entry per aggregate. For `COUNT(DISTINCT ·)`, `n` is the size of
    /// the union of the users' capped value sets.
    pub aggregates: Vec<MomentSet>,
}

impl BoundedPartition {
    pub fn stats(&self) -> PartitionStats {
        PartitionStats {
            key: self.key.clone(),
            exact_distinct_users: self.exact_distinct_users,
            clamped_count: self.clamped_count,
            noisy_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BoundedPartitionTable {
    pub partitions: BTreeMap<Vec<Value>, BoundedPartition>,
    /// Distinct users that kept at least one partition.
    pub users: u64,
}

impl BoundedPartitionTable {
    pub fn get(&self, key: &[Value]) -> Option<&BoundedPartition> {
        self.partitions.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BoundedPartition> {
        self.partitions.values()
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }
}

/// Encoding under which equal values (including `2` and `2.0`) hash equally.
fn canonical(v: &Value, out: &mut Vec<u8>) {
    let mut put = |tag: u8, bytes: &[u8]| {
        out.push(tag);
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(bytes);
    };
    match v {
        Value::Null => put(b'n', &[]),
        Value::Bool(b) => put(b'b', &[u8::from(*b)]),
        Value::Int(i) => put(b'i', &i.to_le_bytes()),
        Value::Real(r) if r.fract() == 0.0 && r.abs() < 9.0e18 => put(b'i', &(*r as i64).to_le_bytes()),
        Value::Real(r) => put(b'r', &r.to_bits().to_le_bytes()),
        Value::Text(s) => put(b't', s.as_bytes()),
    }
}

/// Keyed pseudo-random rank of a partition for one user. Depends only on the
/// key, the user and the partition, so a user's choice never depends on
/// anybody else's data.
pub fn partition_order_hash(hash_key: &str, user: &Value, key: &[Value]) -> u64 {
    let mut buf = Vec::with_capacity(64);
    canonical(&Value::Text(hash_key.to_string()), &mut buf);
    buf.push(0);
    canonical(user, &mut buf);
    buf.push(0);
    for k in key {
        canonical(k, &mut buf);
    }
    let digest = Sha256::digest(&buf);
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Stage B: each user keeps at most `c_part` partitions, ranked by
/// [`partition_order_hash`] with ties broken by key, then the kept
/// contributions are summed per partition. With `survivors`, partitions
/// outside the set are dropped before ranking.
pub fn two_stage_bound(
    rows: &[UserPartitionMoments],
    hash_key: &str,
    c_part: u32,
    survivors: Option<&HashSet<Vec<Value>>>,
) -> BoundedPartitionTable {
    let mut by_user: BTreeMap<&Value, Vec<&UserPartitionMoments>> = BTreeMap::new();
    for r in rows {
        if survivors.is_some_and(|s| !s.contains(&r.key)) {
            continue;
        }
        by_user.entry(&r.user).or_default().push(r);
    }

    let mut table = BoundedPartitionTable::default();
    let mut distinct: BTreeMap<(Vec<Value>, usize), BTreeSet<Value>> = BTreeMap::new();
    for (user, mut parts) in by_user {
        parts.sort_by_cached_key(|p| (partition_order_hash(hash_key, user, &p.key), p.key.clone()));
        parts.truncate(c_part as usize);
        if !parts.is_empty() {
            table.users += 1;
        }
        for p in parts {
            let entry = table.partitions.entry(p.key.clone()).or_insert_with(|| BoundedPartition {
                key: p.key.clone(),
                exact_distinct_users: 0,
                clamped_count: 0,
                aggregates: vec![MomentSet::default(); p.contributions.len()],
            });
            entry.exact_distinct_users += 1;
            entry.clamped_count += p.rows;
            for (j, c) in p.contributions.iter().enumerate() {
                match c {
                    Contribution::Moments(m) => entry.aggregates[j].add(m),
                    Contribution::Distinct(values) => {
                        distinct.entry((p.key.clone(), j)).or_default().extend(values.iter().cloned());
                    }
                }
            }
        }
    }
    for ((key, j), values) in distinct {
        if let Some(p) = table.partitions.get_mut(&key) {
            p.aggregates[j].n = values.len() as u64;
        }
    }
    table
}
