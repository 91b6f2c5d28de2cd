use crate::error::{Error, Result};

/// Handle to a named, contiguous region of a [`ParameterTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat store of every trainable scalar together with its gradient slot.
///
/// Parameters are allocated in named segments that never overlap. Segments
/// are append-only: once created their offsets are stable for the lifetime
/// of the tape, which is what lets graph nodes refer to parameters by plain
/// indices.
#[derive(Debug, Clone, Default)]
pub struct ParameterTape {
    values: Vec<f64>,
    grads: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParameterTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment of `len` scalars, each produced by `init`.
    pub fn add_segment(
        &mut self,
        name: impl Into<String>,
        len: usize,
        mut init: impl FnMut() -> f64,
    ) -> SegmentId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate segment name {name}"
        );
        let offset = self.values.len();
        self.values.extend((0..len).map(|_| init()));
        self.grads.resize(self.values.len(), 0.0);
        self.segments.push(Segment { name, offset, len });
        SegmentId(self.segments.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn find(&self, name: &str) -> Option<SegmentId> {
        self.segments
            .iter()
            .position(|s| s.name == name)
            .map(SegmentId)
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

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Simultaneous access for optimizers.
    pub fn values_and_grads_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.values, &mut self.grads)
    }

    pub fn segment_values(&self, id: SegmentId) -> &[f64] {
        &self.values[self.segments[id.0].range()]
    }

    pub fn segment_values_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let r = self.segments[id.0].range();
        &mut self.values[r]
    }

    pub fn segment_grads(&self, id: SegmentId) -> &[f64] {
        &self.grads[self.segments[id.0].range()]
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    /// Adds a worker's gradient buffer into the master gradients.
    pub fn accumulate_grads(&mut self, worker: &[f64]) -> Result<()> {
        if worker.len() != self.grads.len() {
            return Err(Error::shape(
                "accumulate_grads",
                self.grads.len(),
                worker.len(),
            ));
        }
        for (g, w) in self.grads.iter_mut().zip(worker) {
            *g += *w;
        }
        Ok(())
    }

    /// Replaces all values; the segment table must already match.
    pub fn load_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape("load_values", self.values.len(), values.len()));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// True when every segment lies inside the value array and no two overlap.
    pub fn segments_are_valid(&self) -> bool {
        let mut ranges: Vec<_> = self.segments.iter().map(|s| s.range()).collect();
        ranges.sort_by_key(|r| r.start);
        ranges.windows(2).all(|w| w[0].end <= w[1].start)
            && ranges.iter().all(|r| r.end <= self.values.len())
            && self.values.len() == self.grads.len()
    }
}
