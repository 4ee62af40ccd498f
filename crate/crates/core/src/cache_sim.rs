//! Prefix-cache accounting over flattened leaf streams.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::model::TokenId;

/// Token trie answering "longest prefix shared with anything inserted".
#[derive(Debug, Clone, Default)]
pub struct PrefixTrie {
    children: Vec<HashMap<TokenId, usize>>,
}

impl PrefixTrie {
    pub fn new() -> Self {
        Self {
            children: vec![HashMap::new()],
        }
    }

    pub fn longest_prefix(&self, seq: &[TokenId]) -> usize {
        let mut node = 0;
        for (i, t) in seq.iter().enumerate() {
            match self.children[node].get(t) {
                Some(&next) => node = next,
                None => return i,
            }
        }
        seq.len()
    }

    pub fn insert(&mut self, seq: &[TokenId]) {
        let mut node = 0;
        for t in seq {
            node = match self.children[node].get(t) {
                Some(&next) => next,
                None => {
                    let next = self.children.len();
                    self.children.push(HashMap::new());
                    self.children[node].insert(*t, next);
                    next
                }
            };
        }
    }
}

/// `C_th`: for each stream after the first, the length of its longest
/// prefix that matches a prefix of an earlier stream.
pub fn theoretical_hit_count(streams: &[Vec<TokenId>]) -> usize {
    let mut trie = PrefixTrie::new();
    let mut hits = 0;
    for (i, s) in streams.iter().enumerate() {
        if i > 0 {
            hits += trie.longest_prefix(s);
        }
        trie.insert(s);
    }
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Eviction {
    None,
    Lru,
}

impl FromStr for Eviction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Eviction::None),
            "lru" => Ok(Eviction::Lru),
            _ => Err(format!("unknown eviction policy {s:?} (expected none|lru)")),
        }
    }
}

impl fmt::Display for Eviction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Eviction::None => "none",
            Eviction::Lru => "lru",
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    parent: usize,
    key: Vec<TokenId>,
    children: HashMap<Vec<TokenId>, usize>,
    last_used: u64,
    alive: bool,
}

/// Block-granular radix cache. Only whole blocks are stored and only leaf
/// blocks are evicted, so every cached block's prefix path stays cached.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    block: usize,
    capacity: Option<usize>,
    eviction: Eviction,
    blocks: Vec<Block>,
    cached_blocks: usize,
    clock: u64,
}

impl PrefixCache {
    /// `capacity` is in tokens; `None` is unlimited.
    pub fn new(block: usize, capacity: Option<usize>, eviction: Eviction) -> Self {
        assert!(block >= 1, "block size must be positive");
        Self {
            block,
            capacity,
            eviction,
            blocks: vec![Block {
                parent: 0,
                key: Vec::new(),
                children: HashMap::new(),
                last_used: 0,
                alive: true,
            }],
            cached_blocks: 0,
            clock: 0,
        }
    }

    pub fn unlimited() -> Self {
        Self::new(1, None, Eviction::None)
    }

    pub fn cached_tokens(&self) -> usize {
        self.cached_blocks * self.block
    }

    fn max_blocks(&self) -> usize {
        self.capacity.map_or(usize::MAX, |c| c / self.block)
    }

    /// Least recently used childless block not touched by the current access.
    fn victim(&self) -> Option<usize> {
        self.blocks
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, b)| b.alive && b.children.is_empty() && b.last_used < self.clock)
            .min_by_key(|(i, b)| (b.last_used, *i))
            .map(|(i, _)| i)
    }

    fn evict(&mut self, id: usize) {
        let parent = self.blocks[id].parent;
        let key = std::mem::take(&mut self.blocks[id].key);
        self.blocks[parent].children.remove(&key);
        self.blocks[id].alive = false;
        self.cached_blocks -= 1;
    }

    /// Serves `stream` from the cache and then inserts it. Returns the
    /// number of tokens served from cache.
    pub fn access(&mut self, stream: &[TokenId]) -> usize {
        self.clock += 1;
        let now = self.clock;
        let mut node = 0;
        let mut hit = 0;
        let mut chunks = stream.chunks_exact(self.block).peekable();
        while let Some(&next) = chunks.peek().and_then(|c| self.blocks[node].children.get(*c)) {
            node = next;
            self.blocks[node].last_used = now;
            hit += self.block;
            chunks.next();
        }
        for chunk in chunks {
            match self.insert_child(node, chunk, now) {
                Some(id) => node = id,
                None => break,
            }
        }
        hit
    }

    fn insert_child(&mut self, parent: usize, chunk: &[TokenId], now: u64) -> Option<usize> {
        if self.cached_blocks >= self.max_blocks() {
            if self.eviction == Eviction::None {
                return None;
            }
            let victim = self.victim()?;
            self.evict(victim);
            if self.cached_blocks >= self.max_blocks() {
                return None;
            }
        }
        let id = self.blocks.len();
        self.blocks.push(Block {
            parent,
            key: chunk.to_vec(),
            children: HashMap::new(),
            last_used: now,
            alive: true,
        });
        self.blocks[parent].children.insert(chunk.to_vec(), id);
        self.cached_blocks += 1;
        Some(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub c_act: usize,
    pub c_th: usize,
    pub l_flat: usize,
}

impl CacheStats {
    pub fn actual_rate(&self) -> f64 {
        ratio(self.c_act, self.l_flat)
    }

    pub fn theoretical_rate(&self) -> f64 {
        ratio(self.c_th, self.l_flat)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Replays `streams` in order through `cache`.
pub fn simulate(streams: &[Vec<TokenId>], cache: &mut PrefixCache) -> CacheStats {
    let c_act = streams.iter().map(|s| cache.access(s)).sum();
    CacheStats {
        c_act,
        c_th: theoretical_hit_count(streams),
        l_flat: streams.iter().map(Vec::len).sum(),
    }
}
