//! Interactive sessions where a person takes the simulated user's place.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generators::{ContextMode, Generator};
use super::session_rng;
use crate::corpus::DocumentStore;
use crate::policy::SessionState;
use crate::retrieval::Retriever;

const SNIPPET_WORDS: usize = 24;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LiveError {
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("index {index} outside the {len} shown suggestions")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("session {0} is closed")]
    Closed(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("cannot generate suggestions: {0}")]
    Generation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiveStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSnippet {
    pub doc_id: String,
    pub score: f64,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveTurn {
    pub turn: usize,
    pub query: String,
    pub shown: Vec<String>,
    /// Index picked from `shown`, once the user has chosen.
    pub chosen: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveSession {
    pub session_id: String,
    pub generator: String,
    pub state: SessionState,
    pub status: LiveStatus,
    pub turns: Vec<LiveTurn>,
    pub ranking: Vec<RankedSnippet>,
}

/// What the client sees after create or select.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveSnapshot {
    pub session_id: String,
    pub turn: usize,
    pub suggestions: Vec<String>,
    pub ranking: Vec<RankedSnippet>,
}

impl LiveSession {
    fn snapshot(&self) -> LiveSnapshot {
        let last = self.turns.last().expect("at least one turn");
        LiveSnapshot {
            session_id: self.session_id.clone(),
            turn: last.turn,
            suggestions: last.shown.clone(),
            ranking: self.ranking.clone(),
        }
    }
}

/// In-memory sessions; each is locked on its own so requests to different
/// sessions never serialise on one another beyond the map lookup.
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
    generator: Arc<dyn Generator>,
    index: Arc<dyn Retriever>,
    docs: Arc<DocumentStore>,
    depth: usize,
    display_depth: usize,
    seed: u64,
    counter: AtomicU64,
}

impl SessionStore {
    pub fn new(
        generator: Arc<dyn Generator>,
        index: Arc<dyn Retriever>,
        docs: Arc<DocumentStore>,
        depth: usize,
        display_depth: usize,
        seed: u64,
    ) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            generator,
            index,
            docs,
            depth,
            display_depth,
            seed,
            counter: AtomicU64::new(0),
        }
    }

    fn ranking(&self, query: &str) -> Vec<RankedSnippet> {
        self.index
            .search(query, self.depth)
            .entries
            .into_iter()
            .take(self.display_depth)
            .map(|e| {
                let text = self.docs.get(&e.doc_id).unwrap_or_default();
                let snippet = text.split_whitespace().take(SNIPPET_WORDS).collect::<Vec<_>>().join(" ");
                RankedSnippet { doc_id: e.doc_id, score: e.score, snippet }
            })
            .collect()
    }

    fn suggest(&self, session_id: &str, state: &SessionState) -> Result<Vec<String>, LiveError> {
        let context = match self.generator.context() {
            ContextMode::Accumulate => state.clone(),
            ContextMode::Replace => SessionState::new(state.current_query()),
        };
        let mut rng = session_rng(self.seed, session_id, self.generator.id(), state.turn());
        let g = self.generator.generate(&context, &mut rng).map_err(|e| LiveError::Generation(e.to_string()))?;
        Ok(g.set.suggestions)
    }

    fn lookup(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, LiveError> {
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| LiveError::NotFound(id.to_owned()))
    }

    pub fn create(&self, query: &str) -> Result<LiveSnapshot, LiveError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(LiveError::EmptyQuery);
        }
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(n.to_le_bytes());
        let session_id = hex::encode(&h.finalize()[..8]);
        let state = SessionState::new(query);
        let shown = self.suggest(&session_id, &state)?;
        let session = LiveSession {
            session_id: session_id.clone(),
            generator: self.generator.id().to_owned(),
            ranking: self.ranking(query),
            state,
            status: LiveStatus::Open,
            turns: vec![LiveTurn { turn: 0, query: query.to_owned(), shown, chosen: None }],
        };
        let snap = session.snapshot();
        self.sessions.write().expect("store lock").insert(session_id, Arc::new(Mutex::new(session)));
        Ok(snap)
    }

    /// Records the choice and regenerates; on any error the session is left
    /// as it was.
    pub fn select(&self, id: &str, index: usize) -> Result<LiveSnapshot, LiveError> {
        let handle = self.lookup(id)?;
        let mut s = handle.lock().expect("session lock");
        if s.status == LiveStatus::Closed {
            return Err(LiveError::Closed(id.to_owned()));
        }
        let last = s.turns.last().expect("at least one turn");
        let Some(chosen) = last.shown.get(index).cloned() else {
            return Err(LiveError::IndexOutOfRange { index, len: last.shown.len() });
        };
        let mut state = s.state.clone();
        state.select(chosen.clone());
        let shown = self.suggest(id, &state)?;
        let turn = state.turn();
        s.turns.last_mut().expect("at least one turn").chosen = Some(index);
        s.turns.push(LiveTurn { turn, query: chosen.clone(), shown, chosen: None });
        s.ranking = self.ranking(&chosen);
        s.state = state;
        Ok(s.snapshot())
    }

    pub fn get(&self, id: &str) -> Result<LiveSession, LiveError> {
        Ok(self.lookup(id)?.lock().expect("session lock").clone())
    }

    pub fn close(&self, id: &str) -> Result<(), LiveError> {
        self.lookup(id)?.lock().expect("session lock").status = LiveStatus::Closed;
        Ok(())
    }

    /// Every session as one JSON object per line, ordered by id.
    pub fn export_jsonl(&self) -> String {
        let map = self.sessions.read().expect("store lock");
        let mut ids: Vec<&String> = map.keys().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| serde_json::to_string(&*map[id].lock().expect("session lock")).expect("serialisable") + "\n")
            .collect()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{Bm25Index, Bm25Params};
    use crate::simulator::FixtureGenerator;

    fn store() -> SessionStore {
        let mut d = DocumentStore::new();
        d.insert("c1", "jaguar car engine").unwrap();
        d.insert("a1", "jaguar animal fur").unwrap();
        let idx = Bm25Index::build(&d, Bm25Params::default()).unwrap();
        let map = [
            ("jaguar".to_string(), vec!["jaguar car".to_string(), "jaguar animal".to_string()]),
            ("jaguar car".to_string(), vec!["jaguar car engine".to_string()]),
        ]
        .into();
        let g = FixtureGenerator { id: "fixture".into(), k: 2, map };
        SessionStore::new(Arc::new(g), Arc::new(idx), Arc::new(d), 100, 10, 0)
    }

    #[test]
    fn create_select_get_close() {
        let s = store();
        let snap = s.create("jaguar").unwrap();
        assert_eq!(snap.suggestions, ["jaguar car", "jaguar animal"]);
        assert_eq!(snap.ranking.len(), 2);
        let next = s.select(&snap.session_id, 0).unwrap();
        assert_eq!((next.turn, next.suggestions.clone()), (1, vec!["jaguar car engine".to_string()]));
        assert_eq!(next.ranking[0].doc_id, "c1");
        let h = s.get(&snap.session_id).unwrap();
        assert_eq!(h.turns[1].query, "jaguar car");
        assert_eq!(h.turns[0].chosen, Some(0));
        s.close(&snap.session_id).unwrap();
        assert_eq!(s.select(&snap.session_id, 0), Err(LiveError::Closed(snap.session_id.clone())));
        assert_eq!(s.export_jsonl().lines().count(), 1);
    }

    #[test]
    fn rejects_bad_requests_without_mutation() {
        let s = store();
        let snap = s.create("jaguar").unwrap();
        let before = s.get(&snap.session_id).unwrap();
        assert_eq!(s.select(&snap.session_id, 99), Err(LiveError::IndexOutOfRange { index: 99, len: 2 }));
        assert_eq!(s.get(&snap.session_id).unwrap(), before);
        assert!(matches!(s.select("nope", 0), Err(LiveError::NotFound(_))));
        assert_eq!(s.create("  "), Err(LiveError::EmptyQuery));
    }

    #[test]
    fn sessions_do_not_share_history() {
        let s = store();
        let a = s.create("jaguar").unwrap();
        let b = s.create("jaguar").unwrap();
        assert_ne!(a.session_id, b.session_id);
        s.select(&a.session_id, 1).unwrap();
        s.select(&b.session_id, 0).unwrap();
        assert_eq!(s.get(&a.session_id).unwrap().state.selected, ["jaguar animal"]);
        assert_eq!(s.get(&b.session_id).unwrap().state.selected, ["jaguar car"]);
    }
}
