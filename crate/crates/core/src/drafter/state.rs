use crate::error::{Error, Result};
use crate::model::KvCache;
use crate::numerics::Float;

/// Adaptation-layer caches over the decode steps committed so far.
#[derive(Debug, Clone)]
pub struct DraftState<T: Float = f32> {
    pub(crate) kv1: Option<KvCache<T>>,
    pub(crate) kv2: Option<KvCache<T>>,
    steps: usize,
}

impl<T: Float> DraftState<T> {
    pub(crate) fn new(kv1: Option<KvCache<T>>, kv2: Option<KvCache<T>>) -> Self {
        Self { kv1, kv2, steps: 0 }
    }

    /// Number of steps fed through the adaptation layers.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn kv1(&self) -> Option<&KvCache<T>> {
        self.kv1.as_ref()
    }

    pub fn kv2(&self) -> Option<&KvCache<T>> {
        self.kv2.as_ref()
    }

    fn caches(&mut self) -> impl Iterator<Item = &mut KvCache<T>> {
        self.kv1.iter_mut().chain(self.kv2.iter_mut())
    }

    /// Every present cache holds exactly one entry per step.
    pub fn check(&self) -> Result<()> {
        for (name, c) in [("kv1", &self.kv1), ("kv2", &self.kv2)] {
            if let Some(c) = c {
                if c.len() != self.steps {
                    return Err(Error::CacheState(format!(
                        "{name} holds {} entries for {} steps",
                        c.len(),
                        self.steps
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_room(&self, rows: usize) -> Result<()> {
        for c in self.kv1.iter().chain(self.kv2.iter()) {
            c.check_room(rows)?;
        }
        Ok(())
    }

    pub(crate) fn commit(&mut self, rows: usize) {
        for c in self.caches() {
            c.commit_append(rows);
        }
        self.steps += rows;
    }

    /// Advances the step count of a cache-free state.
    pub(crate) fn advance(&mut self, rows: usize) {
        debug_assert!(self.kv1.is_none() && self.kv2.is_none());
        self.steps += rows;
    }

    /// Forgets every step at or after `new_len`.
    pub fn rollback(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.steps {
            return Err(Error::Truncate {
                len: self.steps,
                requested: new_len,
            });
        }
        for c in self.caches() {
            c.truncate(new_len)?;
        }
        self.steps = new_len;
        Ok(())
    }
}
