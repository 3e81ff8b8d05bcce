use ndarray::{ArrayView1, ArrayView4, ArrayViewMut1};

/// Metadata for one named parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Handle to a parameter tensor. Only valid for the store that allocated it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat storage for all parameters of one network, plus their gradients.
///
/// Keeping values contiguous makes the optimizer, checkpointing, and
/// whole-network digests trivial, and fixes a canonical parameter order
/// (allocation order) that the rest of the crate relies on for determinism.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            values: Vec::new(),
            grads: Vec::new(),
            entries: Vec::new(),
        }
    }

    /// Allocate a named tensor, filling it from `init` in element order.
    pub fn alloc(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> ParamId {
        let offset = self.values.len();
        let len: usize = shape.iter().product();
        self.values.extend(std::iter::repeat_with(&mut init).take(len));
        self.grads.extend(std::iter::repeat(0.0).take(len));
        self.entries.push(ParamEntry {
            name: name.into(),
            offset,
            shape: shape.to_vec(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn params(&self) -> Params<'_> {
        Params {
            entries: &self.entries,
            values: &self.values,
        }
    }

    /// Split into a read view of values and a write sink for gradients, so a
    /// backward pass can read weights while accumulating into grads.
    pub fn split_mut(&mut self) -> (Params<'_>, Grads<'_>) {
        (
            Params {
                entries: &self.entries,
                values: &self.values,
            },
            Grads {
                entries: &self.entries,
                grads: &mut self.grads,
            },
        )
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.values[e.offset..e.offset + e.len()]
    }

    pub fn grad_slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.grads[e.offset..e.offset + e.len()]
    }

    /// FNV-1a digest over the raw bits of all values whose entry name starts
    /// with `prefix`. Bit-exact equality check for freeze/isolation tests.
    pub fn digest(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                for v in &self.values[e.offset..e.offset + e.len()] {
                    for b in v.to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
            }
        }
        h
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Read-only view of parameter values, cheap to copy into forward passes.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    entries: &'a [ParamEntry],
    values: &'a [f64],
}

impl<'a> Params<'a> {
    fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'a, f64> {
        let e = self.entry(id);
        ArrayView1::from_shape(e.len(), &self.values[e.offset..e.offset + e.len()]).unwrap()
    }

    pub fn view4(&self, id: ParamId) -> ArrayView4<'a, f64> {
        let e = self.entry(id);
        assert_eq!(e.shape.len(), 4, "param {} is not rank 4", e.name);
        ArrayView4::from_shape(
            (e.shape[0], e.shape[1], e.shape[2], e.shape[3]),
            &self.values[e.offset..e.offset + e.len()],
        )
        .unwrap()
    }
}

/// Gradient accumulation sink; additions are elementwise and in caller order.
pub struct Grads<'a> {
    entries: &'a [ParamEntry],
    grads: &'a mut [f64],
}

impl<'a> Grads<'a> {
    pub fn add(&mut self, id: ParamId, contrib: &[f64]) {
        let e = &self.entries[id.0];
        assert_eq!(contrib.len(), e.len(), "grad size mismatch for {}", e.name);
        let dst = &mut self.grads[e.offset..e.offset + e.len()];
        for (d, c) in dst.iter_mut().zip(contrib) {
            *d += c;
        }
    }

    pub fn view_mut1(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let e = &self.entries[id.0];
        ArrayViewMut1::from_shape(e.len(), &mut self.grads[e.offset..e.offset + e.len()]).unwrap()
    }
}
