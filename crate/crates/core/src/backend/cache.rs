use std::collections::HashMap;
use std::hash::Hash;
use std::sync::{Mutex, OnceLock};

use super::{Backend, BackendError, BackendInfo};
use crate::cfgen::MaskCandidate;
use crate::domain::{Matrix, Prediction};

/// Memoizes a deterministic backend for the lifetime of a run.
///
/// Batched endpoints are cached per text, so a batch only forwards the texts
/// not seen before. `predict_embeddings` is not cached: perturbed inputs
/// never repeat.
pub struct CachedBackend<B> {
    inner: B,
    info: OnceLock<BackendInfo>,
    predict: Mutex<HashMap<String, Prediction>>,
    embed: Mutex<HashMap<String, Matrix>>,
    fill: Mutex<HashMap<(String, usize), Vec<Vec<MaskCandidate>>>>,
    sentence: Mutex<HashMap<String, Vec<f64>>>,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B) -> Self {
        CachedBackend {
            inner,
            info: OnceLock::new(),
            predict: Mutex::default(),
            embed: Mutex::default(),
            fill: Mutex::default(),
            sentence: Mutex::default(),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

fn lookup<K: Eq + Hash, V: Clone>(m: &Mutex<HashMap<K, V>>, k: &K) -> Option<V> {
    m.lock().expect("cache lock poisoned").get(k).cloned()
}

fn store<K: Eq + Hash, V>(m: &Mutex<HashMap<K, V>>, k: K, v: V) {
    m.lock().expect("cache lock poisoned").insert(k, v);
}

fn batched<V, F>(
    cache: &Mutex<HashMap<String, V>>,
    texts: &[String],
    fetch: F,
) -> Result<Vec<V>, BackendError>
where
    V: Clone,
    F: FnOnce(&[String]) -> Result<Vec<V>, BackendError>,
{
    let mut missing: Vec<String> = Vec::new();
    {
        let map = cache.lock().expect("cache lock poisoned");
        for t in texts {
            if !map.contains_key(t) && !missing.contains(t) {
                missing.push(t.clone());
            }
        }
    }
    if !missing.is_empty() {
        let fetched = fetch(&missing)?;
        if fetched.len() != missing.len() {
            return Err(BackendError::Malformed(format!(
                "{} results for {} inputs",
                fetched.len(),
                missing.len()
            )));
        }
        let mut map = cache.lock().expect("cache lock poisoned");
        for (t, v) in missing.into_iter().zip(fetched) {
            map.insert(t, v);
        }
    }
    let map = cache.lock().expect("cache lock poisoned");
    Ok(texts.iter().map(|t| map[t].clone()).collect())
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        if let Some(i) = self.info.get() {
            return Ok(i.clone());
        }
        let i = self.inner.info()?;
        Ok(self.info.get_or_init(|| i).clone())
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<Prediction>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyInput("predict batch"));
        }
        batched(&self.predict, texts, |m| self.inner.predict(m))
    }

    fn embed(&self, text: &str) -> Result<Matrix, BackendError> {
        let key = text.to_string();
        if let Some(m) = lookup(&self.embed, &key) {
            return Ok(m);
        }
        let m = self.inner.embed(text)?;
        store(&self.embed, key, m.clone());
        Ok(m)
    }

    fn predict_embeddings(&self, embeddings: &Matrix) -> Result<Prediction, BackendError> {
        self.inner.predict_embeddings(embeddings)
    }

    fn fill_mask(
        &self,
        masked_text: &str,
        top_k: usize,
    ) -> Result<Vec<Vec<MaskCandidate>>, BackendError> {
        let key = (masked_text.to_string(), top_k);
        if let Some(v) = lookup(&self.fill, &key) {
            return Ok(v);
        }
        let v = self.inner.fill_mask(masked_text, top_k)?;
        store(&self.fill, key, v.clone());
        Ok(v)
    }

    fn sentence_embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyInput("sentence batch"));
        }
        batched(&self.sentence, texts, |m| self.inner.sentence_embed(m))
    }
}
