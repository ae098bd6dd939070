use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// Keys and values of one attention layer, row-major `[len, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T: Float = f32> {
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Float> LayerCache<T> {
    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Rolling key/value store shared by every layer of one stack.
///
/// Layout per layer is `[len, n_heads * head_dim]`; all layers hold `len` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T: Float = f32> {
    layers: Vec<LayerCache<T>>,
    width: usize,
    len: usize,
    max_len: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(n_layers: usize, width: usize, max_len: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
            width,
            len: 0,
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LayerCache<T> {
        &self.layers[i]
    }

    /// Cached keys and values of layer `i` as `[len, width]` tensors, or `None` when empty.
    pub(crate) fn prefix(&self, i: usize) -> Option<(Tensor<T>, Tensor<T>)> {
        if self.len == 0 {
            return None;
        }
        let l = &self.layers[i];
        let shape = vec![self.len, self.width];
        Some((
            Tensor::new(shape.clone(), l.keys.clone()).expect("cache rows"),
            Tensor::new(shape, l.values.clone()).expect("cache rows"),
        ))
    }

    /// Appends `rows` new rows to layer `i`. Call [`KvCache::commit_append`] once every layer is extended.
    pub(crate) fn push_layer(&mut self, i: usize, keys: &[T], values: &[T]) {
        let l = &mut self.layers[i];
        l.keys.extend_from_slice(keys);
        l.values.extend_from_slice(values);
    }

    pub(crate) fn commit_append(&mut self, rows: usize) {
        self.len += rows;
        debug_assert!(self
            .layers
            .iter()
            .all(|l| l.keys.len() == self.len * self.width && l.values.len() == self.len * self.width));
    }

    pub fn check_room(&self, rows: usize) -> Result<()> {
        if self.len + rows > self.max_len {
            return Err(Error::Overflow {
                needed: self.len + rows,
                max: self.max_len,
            });
        }
        Ok(())
    }

    /// Drops every entry at or after `new_len`.
    pub fn truncate(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.len {
            return Err(Error::Truncate {
                len: self.len,
                requested: new_len,
            });
        }
        for l in &mut self.layers {
            l.keys.truncate(new_len * self.width);
            l.values.truncate(new_len * self.width);
        }
        self.len = new_len;
        Ok(())
    }

    /// Keeps entries `[0, base)` followed by the entries at `base + offset` for each
    /// offset, in order, and drops the rest.
    pub fn select_path(&mut self, base: usize, offsets: &[usize]) -> Result<()> {
        if base > self.len {
            return Err(Error::PathOutOfRange(format!("base {base} beyond length {}", self.len)));
        }
        for (i, &o) in offsets.iter().enumerate() {
            if base + o >= self.len {
                return Err(Error::PathOutOfRange(format!(
                    "offset {o} from base {base} beyond length {}",
                    self.len
                )));
            }
            if i > 0 && o <= offsets[i - 1] {
                return Err(Error::PathOutOfRange(format!(
                    "offsets must strictly increase: {offsets:?}"
                )));
            }
        }
        let w = self.width;
        for l in &mut self.layers {
            for (dst, &o) in offsets.iter().enumerate() {
                let (from, to) = ((base + o) * w, (base + dst) * w);
                if from != to {
                    l.keys.copy_within(from..from + w, to);
                    l.values.copy_within(from..from + w, to);
                }
            }
            l.keys.truncate((base + offsets.len()) * w);
            l.values.truncate((base + offsets.len()) * w);
        }
        self.len = base + offsets.len();
        Ok(())
    }
}
