use super::ModelConfig;

/// Per-session key/value cache, preallocated to `max_seq_len`.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    kv_dim: usize,
    capacity: usize,
    len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let kv_dim = config.kv_dim();
        let size = config.max_seq_len * kv_dim;
        Self {
            keys: vec![vec![0.0; size]; config.n_layers],
            values: vec![vec![0.0; size]; config.n_layers],
            kv_dim,
            capacity: config.max_seq_len,
            len: 0,
        }
    }

    /// Number of cached positions, shared by every layer.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }

    pub(crate) fn write(&mut self, layer: usize, pos: usize, k: &[f32], v: &[f32]) {
        let at = pos * self.kv_dim;
        self.keys[layer][at..at + self.kv_dim].copy_from_slice(k);
        self.values[layer][at..at + self.kv_dim].copy_from_slice(v);
    }

    pub(crate) fn key(&self, layer: usize, pos: usize) -> &[f32] {
        let at = pos * self.kv_dim;
        &self.keys[layer][at..at + self.kv_dim]
    }

    pub(crate) fn value(&self, layer: usize, pos: usize) -> &[f32] {
        let at = pos * self.kv_dim;
        &self.values[layer][at..at + self.kv_dim]
    }

    pub(crate) fn advance(&mut self) {
        debug_assert!(self.len < self.capacity);
        self.len += 1;
    }
}
