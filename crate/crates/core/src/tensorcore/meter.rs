//! Payload accounting.
//!
//! Every tensor payload registers its byte size with the allocation meter of
//! the thread that created it and releases it on drop, even when the drop
//! happens on another thread. Peak bytes over a metered region are the CPU
//! stand-in for peak device memory. Bookkeeping (shapes, graph nodes, gradient
//! scratch) is not counted.
//!
//! The same module keeps a per-thread multiply-accumulate counter that kernels
//! bump as they run, used as a machine-independent cost witness.

use std::cell::{Cell, RefCell};
use std::ops::Deref;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

const NO_LIMIT: usize = usize::MAX;

#[derive(Debug)]
struct MeterState {
    live: AtomicUsize,
    peak: AtomicUsize,
    limit: AtomicUsize,
    active: AtomicBool,
}

/// Handle to a live/peak byte counter. Cloning shares the counter.
#[derive(Debug, Clone)]
pub struct AllocationMeter(Arc<MeterState>);

thread_local! {
    static CURRENT: RefCell<AllocationMeter> = RefCell::new(AllocationMeter::new());
    static MACS: Cell<u64> = const { Cell::new(0) };
}

impl Default for AllocationMeter {
    fn default() -> Self {
        Self::new()
    }
}

impl AllocationMeter {
    pub fn new() -> Self {
        AllocationMeter(Arc::new(MeterState {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            limit: AtomicUsize::new(NO_LIMIT),
            active: AtomicBool::new(false),
        }))
    }

    /// The meter new payloads on this thread are charged to.
    pub fn current() -> Self {
        CURRENT.with(|m| m.borrow().clone())
    }

    /// Installs `meter` as this thread's meter for the duration of `f`.
    pub fn scoped<T>(meter: &AllocationMeter, f: impl FnOnce() -> T) -> T {
        let previous = CURRENT.with(|m| m.replace(meter.clone()));
        struct Restore(Option<AllocationMeter>);
        impl Drop for Restore {
            fn drop(&mut self) {
                if let Some(prev) = self.0.take() {
                    CURRENT.with(|m| *m.borrow_mut() = prev);
                }
            }
        }
        let _restore = Restore(Some(previous));
        f()
    }

    pub fn live_bytes(&self) -> usize {
        self.0.live.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> usize {
        self.0.peak.load(Ordering::SeqCst)
    }

    /// Sets peak to the current live value.
    pub fn reset(&self) {
        self.0.peak.store(self.live_bytes(), Ordering::SeqCst);
    }

    /// Caps live bytes; allocations that would exceed the cap fail with
    /// [`Error::OutOfMemory`].
    pub fn set_limit(&self, limit: Option<usize>) {
        self.0.limit.store(limit.unwrap_or(NO_LIMIT), Ordering::SeqCst);
    }

    pub fn limit(&self) -> Option<usize> {
        match self.0.limit.load(Ordering::SeqCst) {
            NO_LIMIT => None,
            l => Some(l),
        }
    }

    fn charge(&self, bytes: usize) -> Result<()> {
        let limit = self.0.limit.load(Ordering::SeqCst);
        let live = self.0.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        if live > limit {
            self.0.live.fetch_sub(bytes, Ordering::SeqCst);
            return Err(Error::OutOfMemory {
                requested: bytes,
                limit,
            });
        }
        self.0.peak.fetch_max(live, Ordering::SeqCst);
        Ok(())
    }

    fn release(&self, bytes: usize) {
        self.0.live.fetch_sub(bytes, Ordering::SeqCst);
    }

    /// Runs `f` and reports the peak payload bytes reached while it ran.
    ///
    /// The peak is measured from the live bytes at entry. Afterwards the
    /// meter's peak is restored to the larger of its old value and the
    /// region's peak. Metering the same meter from inside `f` is an error.
    pub fn with_metering<T>(&self, f: impl FnOnce() -> T) -> Result<(T, usize)> {
        if self.0.active.swap(true, Ordering::SeqCst) {
            return Err(Error::Contract("nested metering on the same allocation meter".into()));
        }
        let outer_peak = self.peak_bytes();
        self.reset();
        struct Deactivate<'a>(&'a MeterState, usize);
        impl Drop for Deactivate<'_> {
            fn drop(&mut self) {
                self.0.peak.fetch_max(self.1, Ordering::SeqCst);
                self.0.active.store(false, Ordering::SeqCst);
            }
        }
        let guard = Deactivate(&self.0, outer_peak);
        let value = f();
        let peak = self.peak_bytes();
        drop(guard);
        Ok((value, peak))
    }
}

/// Meters `f` on the calling thread's current meter.
pub fn with_metering<T>(f: impl FnOnce() -> T) -> Result<(T, usize)> {
    AllocationMeter::current().with_metering(f)
}

/// Adds to this thread's multiply-accumulate counter.
pub fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Runs `f` and returns the multiply-accumulates it performed on this thread.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = MACS.with(|c| c.replace(0));
    let value = f();
    let used = MACS.with(|c| c.get());
    MACS.with(|c| c.set(before.wrapping_add(used)));
    (value, used)
}

/// Metered `f64` storage backing a tensor.
#[derive(Debug)]
pub struct Buffer {
    data: Vec<f64>,
    meter: AllocationMeter,
}

impl Buffer {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        let meter = AllocationMeter::current();
        meter.charge(data.len() * std::mem::size_of::<f64>())?;
        Ok(Buffer { data, meter })
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

impl Deref for Buffer {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        self.meter.release(self.bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_computation_restores_live_bytes() {
        let meter = AllocationMeter::new();
        AllocationMeter::scoped(&meter, || {
            let entry = meter.live_bytes();
            {
                let _a = Buffer::new(vec![0.0; 100]).unwrap();
                let _b = Buffer::new(vec![0.0; 50]).unwrap();
                assert_eq!(meter.live_bytes(), entry + 1200);
            }
            assert_eq!(meter.live_bytes(), entry);
            assert!(meter.peak_bytes() >= meter.live_bytes());
        });
    }

    #[test]
    fn limit_rejects_oversized_allocation() {
        let meter = AllocationMeter::new();
        meter.set_limit(Some(800));
        AllocationMeter::scoped(&meter, || {
            assert!(Buffer::new(vec![0.0; 100]).is_ok());
            let err = Buffer::new(vec![0.0; 101]).unwrap_err();
            assert!(matches!(err, Error::OutOfMemory { .. }));
        });
        assert_eq!(meter.live_bytes(), 0);
    }

    #[test]
    fn nested_metering_is_rejected() {
        let meter = AllocationMeter::new();
        let inner = meter.with_metering(|| meter.with_metering(|| ()).is_err()).unwrap();
        assert!(inner.0);
        // and the meter is usable again afterwards
        assert!(meter.with_metering(|| ()).is_ok());
    }

    #[test]
    fn mac_counter_nests_additively() {
        let ((_, inner), outer) = count_macs(|| {
            add_macs(5);
            count_macs(|| add_macs(7))
        });
        assert_eq!(inner, 7);
        assert_eq!(outer, 12);
    }
}
