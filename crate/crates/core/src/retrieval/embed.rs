use ndarray::{Array1, Array2, Axis};

use super::{analyze, Ranking, RetrievalError, Retriever};
use crate::corpus::DocumentStore;
use crate::seqmodel::{PolicyModel, Vocabulary};

/// Cosine similarity between mean token embeddings of query and document.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    vocab: Vocabulary,
    token_emb: Array2<f64>,
    doc_ids: Vec<String>,
    doc_vecs: Array2<f64>,
}

impl EmbeddingIndex {
    pub fn build(store: &DocumentStore, model: &PolicyModel, vocab: &Vocabulary) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let d = model.config().d_model;
        let mut token_emb = Array2::zeros((vocab.len(), d));
        for (i, mut row) in token_emb.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&model.token_embedding(i as u32));
        }
        let mut idx = Self { vocab: vocab.clone(), token_emb, doc_ids: Vec::new(), doc_vecs: Array2::zeros((store.len(), d)) };
        for (i, (id, text)) in store.iter().enumerate() {
            let v = idx.embed(text).ok_or_else(|| RetrievalError::EmptyDocument(id.to_owned()))?;
            idx.doc_vecs.row_mut(i).assign(&v);
            idx.doc_ids.push(id.to_owned());
        }
        Ok(idx)
    }

    /// Unit-norm mean embedding of the known terms of `text`.
    pub fn embed(&self, text: &str) -> Option<Array1<f64>> {
        let ids: Vec<u32> = analyze(text)
            .iter()
            .filter_map(|t| self.vocab.id(t))
            .filter(|&id| !Vocabulary::is_reserved(id))
            .collect();
        if ids.is_empty() {
            return None;
        }
        let mut v = Array1::zeros(self.token_emb.ncols());
        for &id in &ids {
            v += &self.token_emb.row(id as usize);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        }
        Some(v)
    }
}

impl Retriever for EmbeddingIndex {
    fn search(&self, query: &str, depth: usize) -> Ranking {
        let Some(q) = self.embed(query) else {
            return Ranking::empty(query, depth);
        };
        let scores = self.doc_vecs.dot(&q);
        let scored = self.doc_ids.iter().cloned().zip(scores.iter().copied()).collect();
        Ranking::from_scores(query, scored, depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::ModelConfig;

    #[test]
    fn exact_text_match_ranks_first() {
        let mut store = DocumentStore::new();
        store.insert("a", "red apple fruit").unwrap();
        store.insert("b", "blue ocean wave").unwrap();
        store.insert("c", "green forest tree").unwrap();
        let vocab = Vocabulary::from_texts(store.iter().map(|(_, t)| t));
        let cfg = ModelConfig { n_layers: 1, d_model: 32, n_heads: 2, d_ff: 16, max_len: 8 };
        let model = PolicyModel::new(cfg, vocab.len(), 3).unwrap();
        let idx = EmbeddingIndex::build(&store, &model, &vocab).unwrap();
        assert_eq!(idx.search("blue ocean wave", 3).entries[0].doc_id, "b");
        assert!(idx.search("unknown words", 3).is_empty());
        assert_eq!(idx.search("red", 2).len(), 2);
    }
}
