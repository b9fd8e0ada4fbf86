//! CPU-side KV pool with an optional row limit and victim selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    Fifo,
    Lru,
    Counter,
}

impl FromStr for EvictionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(Self::Fifo),
            "lru" => Ok(Self::Lru),
            "counter" => Ok(Self::Counter),
            other => Err(Error::invalid(format!("unknown eviction policy {other:?}"))),
        }
    }
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fifo => "fifo",
            Self::Lru => "lru",
            Self::Counter => "counter",
        })
    }
}

/// Notified whenever a pool row is written, so mirrored state stays aligned.
pub trait RowListener {
    fn row_written(&mut self, index: usize, key: &[f32]) -> Result<()>;
}

/// Bookkeeping for one pool row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    /// Ordinal of the token stored in this row (0 for the first append).
    pub token: usize,
    pub arrival: u64,
    pub last_fetch: Option<u64>,
    pub counter: u8,
}

impl RowMeta {
    fn recency(&self) -> u64 {
        self.last_fetch.unwrap_or(self.arrival)
    }
}

/// Key/value rows of one head plus eviction metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPool {
    keys: Matrix,
    values: Matrix,
    meta: Vec<RowMeta>,
    limit: Option<usize>,
    policy: EvictionPolicy,
    clock: u64,
    appended: usize,
    evictions: usize,
}

impl KvPool {
    pub fn new(head_dim: usize, limit: Option<usize>, policy: EvictionPolicy) -> Result<Self> {
        if limit == Some(0) {
            return Err(Error::invalid("pool limit must be at least 1"));
        }
        Ok(Self {
            keys: Matrix::empty(head_dim),
            values: Matrix::empty(head_dim),
            meta: Vec::new(),
            limit,
            policy,
            clock: 0,
            appended: 0,
            evictions: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn limit(&self) -> Option<usize> {
        self.limit
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    /// Token ordinals in row order.
    pub fn tokens(&self) -> Vec<usize> {
        self.meta.iter().map(|m| m.token).collect()
    }

    pub fn counters(&self) -> Vec<u8> {
        self.meta.iter().map(|m| m.counter).collect()
    }

    /// Number of overwrites so far.
    pub fn evictions(&self) -> usize {
        self.evictions
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Stores a row and returns its index.
    pub fn append(&mut self, key: &[f32], value: &[f32]) -> Result<usize> {
        self.write(key, value, None)
    }

    /// Like [`append`](Self::append), also reporting the written row to
    /// `listener`.
    pub fn append_with(&mut self, key: &[f32], value: &[f32], listener: &mut dyn RowListener) -> Result<usize> {
        self.write(key, value, Some(listener))
    }

    fn write(&mut self, key: &[f32], value: &[f32], listener: Option<&mut dyn RowListener>) -> Result<usize> {
        let d = self.keys.cols();
        if key.len() != d || value.len() != d {
            return Err(Error::shape(
                "KvPool::append",
                format!("rows of {}/{} for head dim {d}", key.len(), value.len()),
            ));
        }
        let at_limit = self.limit.is_some_and(|l| self.len() >= l);
        let index = if at_limit { self.evict_select()? } else { self.len() };
        let meta = RowMeta {
            token: self.appended,
            arrival: self.tick(),
            last_fetch: None,
            counter: 0,
        };
        if let Some(l) = listener {
            l.row_written(index, key)?;
        }
        if index == self.len() {
            self.keys.push_row(key)?;
            self.values.push_row(value)?;
            self.meta.push(meta);
        } else {
            self.keys.set_row(index, key)?;
            self.values.set_row(index, value)?;
            self.meta[index] = meta;
            self.evictions += 1;
        }
        self.appended += 1;
        Ok(index)
    }

    /// Gathers rows in the given order and updates recency and counters.
    ///
    /// Each distinct row's counter goes up by one; if any counter reaches 255
    /// every nonzero counter is halved, staying at least 1.
    pub fn fetch(&mut self, indices: &[usize]) -> Result<(Matrix, Matrix)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "fetch index {bad} out of range for pool of {}",
                self.len()
            )));
        }
        let now = self.tick();
        let mut seen = vec![false; self.len()];
        let mut saturated = false;
        for &i in indices {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            let m = &mut self.meta[i];
            m.last_fetch = Some(now);
            m.counter = m.counter.saturating_add(1);
            saturated |= m.counter == u8::MAX;
        }
        if saturated {
            for m in &mut self.meta {
                if m.counter > 0 {
                    m.counter = (m.counter / 2).max(1);
                }
            }
        }
        Ok((self.keys.select_rows(indices)?, self.values.select_rows(indices)?))
    }

    /// Every row in index order.
    pub fn fetch_all(&mut self) -> Result<(Matrix, Matrix)> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.fetch(&all)
    }

    /// Row that the policy would overwrite next; ties go to the lowest index.
    pub fn evict_select(&self) -> Result<usize> {
        if self.meta.is_empty() {
            return Err(Error::invalid("eviction from an empty pool"));
        }
        let key = |m: &RowMeta| -> u64 {
            match self.policy {
                EvictionPolicy::Fifo => m.arrival,
                EvictionPolicy::Lru => m.recency(),
                EvictionPolicy::Counter => u64::from(m.counter),
            }
        };
        let mut best = 0;
        for (i, m) in self.meta.iter().enumerate().skip(1) {
            if key(m) < key(&self.meta[best]) {
                best = i;
            }
        }
        Ok(best)
    }
}
