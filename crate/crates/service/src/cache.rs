use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use pioner_core::{ImageSize, PatchGrid};
use tokio::sync::OnceCell;

use crate::ApiError;

/// Fixed per-entry bookkeeping charged against the byte budget.
const ENTRY_OVERHEAD: usize = 256;

#[derive(Debug)]
pub struct CachedGrid {
    /// Hex SHA-256 of the uploaded bytes.
    pub id: String,
    pub grid: PatchGrid,
    pub image: ImageSize,
    pub created_at: SystemTime,
    pub size_bytes: usize,
}

#[derive(Default)]
struct Lru {
    map: HashMap<String, (Arc<CachedGrid>, u64)>,
    tick: u64,
    total: usize,
}

type Slot = Arc<OnceCell<Result<Arc<CachedGrid>, ApiError>>>;

/// Byte-budgeted LRU of encoded images with single-flight insertion: any
/// number of concurrent first uploads of the same bytes share one encode.
pub struct GridCache {
    budget: usize,
    lru: Mutex<Lru>,
    inflight: Mutex<HashMap<String, Slot>>,
    encodes: AtomicUsize,
}

impl GridCache {
    pub fn new(budget: usize) -> Self {
        Self { budget, lru: Mutex::new(Lru::default()), inflight: Mutex::new(HashMap::new()), encodes: AtomicUsize::new(0) }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Number of encodes performed, for instrumentation.
    pub fn encode_count(&self) -> usize {
        self.encodes.load(Ordering::SeqCst)
    }

    pub fn total_bytes(&self) -> usize {
        self.lru.lock().expect("lru lock").total
    }

    pub fn len(&self) -> usize {
        self.lru.lock().expect("lru lock").map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lru.lock().expect("lru lock").map.contains_key(id)
    }

    /// Looks up an entry and marks it most recently used.
    pub fn get(&self, id: &str) -> Option<Arc<CachedGrid>> {
        let mut lru = self.lru.lock().expect("lru lock");
        lru.tick += 1;
        let tick = lru.tick;
        lru.map.get_mut(id).map(|(e, t)| {
            *t = tick;
            e.clone()
        })
    }

    fn insert(&self, entry: Arc<CachedGrid>) -> Result<(), ApiError> {
        if entry.size_bytes > self.budget {
            return Err(ApiError::TooLarge(format!(
                "encoded grid needs {} bytes, cache budget is {}",
                entry.size_bytes, self.budget
            )));
        }
        let mut lru = self.lru.lock().expect("lru lock");
        if lru.map.contains_key(&entry.id) {
            return Ok(());
        }
        while lru.total + entry.size_bytes > self.budget {
            let oldest = lru.map.iter().min_by_key(|(_, (_, t))| *t).map(|(k, _)| k.clone()).expect("nonempty when over budget");
            let (gone, _) = lru.map.remove(&oldest).expect("present");
            lru.total -= gone.size_bytes;
            log::debug!("evicted {oldest} ({} bytes)", gone.size_bytes);
        }
        lru.tick += 1;
        let tick = lru.tick;
        lru.total += entry.size_bytes;
        lru.map.insert(entry.id.clone(), (entry, tick));
        Ok(())
    }

    /// Returns the cached entry for `id`, running `encode` at most once
    /// across concurrent callers when absent. The flag is true on a hit.
    pub async fn get_or_encode<F>(&self, id: &str, encode: F) -> Result<(Arc<CachedGrid>, bool), ApiError>
    where
        F: FnOnce() -> Result<(PatchGrid, ImageSize), ApiError> + Send + 'static,
    {
        if let Some(e) = self.get(id) {
            return Ok((e, true));
        }
        let slot = self.inflight.lock().expect("inflight lock").entry(id.to_string()).or_default().clone();
        let mut ran = false;
        let result = slot
            .get_or_init(|| async {
                ran = true;
                self.encodes.fetch_add(1, Ordering::SeqCst);
                let (grid, image) = tokio::task::spawn_blocking(encode)
                    .await
                    .map_err(|e| ApiError::Internal(format!("encoder task failed: {e}")))??;
                let size_bytes = grid.size_bytes() + ENTRY_OVERHEAD;
                let entry = Arc::new(CachedGrid { id: id.to_string(), grid, image, created_at: SystemTime::now(), size_bytes });
                self.insert(entry.clone())?;
                Ok(entry)
            })
            .await
            .clone();
        if ran {
            self.inflight.lock().expect("inflight lock").remove(id);
        }
        result.map(|e| (e, !ran))
    }
}
