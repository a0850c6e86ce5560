//! In-memory session table with a time-to-live and LRU eviction.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use dinoiser_core::denoiser::AffinityMatrix;
use dinoiser_core::featurizer::DenseFeatures;

/// Features of one encoded image. Immutable once created.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub features: DenseFeatures,
    pub teacher_affinity: Option<AffinityMatrix>,
    /// Uploaded image size `(width, height)`.
    pub image_size: (u32, u32),
    pub created_at: Instant,
}

struct Entry {
    session: Arc<Session>,
    last_used: u64,
}

#[derive(Default)]
struct Table {
    entries: HashMap<String, Entry>,
    tick: u64,
}

pub struct SessionStore {
    ttl: Duration,
    capacity: usize,
    table: Mutex<Table>,
}

impl SessionStore {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        Self {
            ttl,
            capacity: capacity.max(1),
            table: Mutex::default(),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn expired(&self, s: &Session, now: Instant) -> bool {
        now.saturating_duration_since(s.created_at) >= self.ttl
    }

    /// Add a session, dropping expired ones and then the least recently
    /// used until there is room.
    pub fn insert(&self, session: Session) -> Arc<Session> {
        let now = session.created_at;
        let session = Arc::new(session);
        let mut t = self.table.lock().expect("session table poisoned");
        t.entries.retain(|_, e| !self.expired(&e.session, now));
        while t.entries.len() >= self.capacity {
            let oldest = t
                .entries
                .iter()
                .min_by_key(|(_, e)| e.last_used)
                .map(|(k, _)| k.clone())
                .expect("non-empty");
            t.entries.remove(&oldest);
        }
        t.tick += 1;
        let last_used = t.tick;
        t.entries.insert(
            session.id.clone(),
            Entry {
                session: Arc::clone(&session),
                last_used,
            },
        );
        session
    }

    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.get_at(id, Instant::now())
    }

    /// Look up a live session as of `now`, marking it used.
    pub fn get_at(&self, id: &str, now: Instant) -> Option<Arc<Session>> {
        let mut t = self.table.lock().expect("session table poisoned");
        t.tick += 1;
        let tick = t.tick;
        let expired = match t.entries.get_mut(id) {
            None => return None,
            Some(e) if self.expired(&e.session, now) => true,
            Some(e) => {
                e.last_used = tick;
                return Some(Arc::clone(&e.session));
            }
        };
        if expired {
            t.entries.remove(id);
        }
        None
    }

    pub fn len(&self) -> usize {
        self.table.lock().expect("session table poisoned").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dinoiser_core::{PatchFeatureMap, PatchGrid, SourceTag};
    use ndarray::Array2;

    fn session(id: &str, at: Instant) -> Session {
        let grid = PatchGrid::new(1, 1, 16).unwrap();
        let map = |s| PatchFeatureMap::new(grid, Array2::ones((1, 2)), s).unwrap();
        Session {
            id: id.into(),
            features: DenseFeatures {
                last: map(SourceTag::MaskclipLast),
                intermediate: map(SourceTag::Intermediate { layer: 1 }),
                encoded_size: (16, 16),
            },
            teacher_affinity: None,
            image_size: (16, 16),
            created_at: at,
        }
    }

    #[test]
    fn expiry() {
        let store = SessionStore::new(Duration::from_secs(900), 4);
        let t0 = Instant::now();
        store.insert(session("a", t0));
        assert!(store.get_at("a", t0 + Duration::from_secs(899)).is_some());
        assert!(store.get_at("a", t0 + Duration::from_secs(900)).is_none());
        assert!(store.is_empty());
        assert!(store.get_at("missing", t0).is_none());
    }

    #[test]
    fn evicts_least_recently_used() {
        let store = SessionStore::new(Duration::from_secs(900), 2);
        let t0 = Instant::now();
        store.insert(session("a", t0));
        store.insert(session("b", t0));
        assert!(store.get_at("a", t0).is_some());
        store.insert(session("c", t0));
        assert_eq!(store.len(), 2);
        assert!(store.get_at("b", t0).is_none());
        assert!(store.get_at("a", t0).is_some());
        assert!(store.get_at("c", t0).is_some());
    }
}
