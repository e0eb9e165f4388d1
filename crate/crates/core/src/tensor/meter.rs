/// FLOP and allocation accounting sink passed explicitly into kernels.
///
/// Conventions: matmul `2·m·k·n`, softmax `5·n` per row, elementwise ops one
/// per element, layernorm `7·c` per row, average pooling one per input
/// element plus one per output element. Data movement (transpose, head
/// split/merge, concat) costs no FLOPs but its output is still an allocation.
///
/// `live_bytes` only shrinks when a kernel calls [`Meter::release`] for an
/// intermediate it dropped, so `peak_bytes` reflects the instrumented
/// working set of one scope.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Meter {
    flops: u64,
    bytes_allocated: u64,
    live_bytes: u64,
    peak_bytes: u64,
    largest_alloc: u64,
    allocations: u64,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_flops(&mut self, flops: u64) {
        self.flops += flops;
    }

    /// Records a newly materialized tensor of `bytes` bytes.
    pub fn alloc(&mut self, bytes: u64) {
        self.bytes_allocated += bytes;
        self.live_bytes += bytes;
        self.allocations += 1;
        self.largest_alloc = self.largest_alloc.max(bytes);
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    /// Marks `bytes` of previously allocated tensors as dropped.
    pub fn release(&mut self, bytes: u64) {
        self.live_bytes = self.live_bytes.saturating_sub(bytes);
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn bytes_allocated(&self) -> u64 {
        self.bytes_allocated
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    /// Size of the largest single tensor materialized in this scope.
    pub fn largest_alloc(&self) -> u64 {
        self.largest_alloc
    }

    pub fn allocations(&self) -> u64 {
        self.allocations
    }
}

/// Applies `f` to the meter if one was supplied.
pub(crate) fn with_meter(meter: &mut Option<&mut Meter>, f: impl FnOnce(&mut Meter)) {
    if let Some(m) = meter.as_deref_mut() {
        f(m);
    }
}
