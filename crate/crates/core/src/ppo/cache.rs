use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;

use crate::retrieval::{Ranking, Retriever};

/// LRU cache of rankings keyed by (query text, depth). Lookups and inserts
/// take a short lock; the retrieval itself runs outside it.
pub struct RetrievalCache {
    inner: Mutex<LruCache<(String, usize), Arc<Ranking>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl RetrievalCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("non-zero");
        Self { inner: Mutex::new(LruCache::new(cap)), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn search(&self, index: &dyn Retriever, query: &str, depth: usize) -> Arc<Ranking> {
        let key = (query.to_owned(), depth);
        if let Some(r) = self.inner.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Arc::clone(r);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let r = Arc::new(index.search(query, depth));
        self.inner.lock().expect("cache lock").put(key, Arc::clone(&r));
        r
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn hit_rate(&self) -> f64 {
        let (h, m) = (self.hits() as f64, self.misses() as f64);
        if h + m == 0.0 {
            0.0
        } else {
            h / (h + m)
        }
    }
}

impl std::fmt::Debug for RetrievalCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalCache").field("hits", &self.hits()).field("misses", &self.misses()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DocumentStore;
    use crate::retrieval::{Bm25Index, Bm25Params};

    #[test]
    fn hits_after_first_lookup_and_evicts() {
        let mut s = DocumentStore::new();
        s.insert("d1", "a b").unwrap();
        s.insert("d2", "b c").unwrap();
        let idx = Bm25Index::build(&s, Bm25Params::default()).unwrap();
        let cache = RetrievalCache::new(1);
        let first = cache.search(&idx, "b", 10);
        let second = cache.search(&idx, "b", 10);
        assert_eq!(first, second);
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        cache.search(&idx, "a", 10);
        cache.search(&idx, "b", 10);
        assert_eq!(cache.misses(), 3);
    }
}
