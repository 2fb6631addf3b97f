//! Per-thread multiply counter.
//!
//! Every contraction and convolution kernel in the crate adds the number of
//! scalar multiplications it executes. The cost model is checked against
//! these counts with integer equality.

use std::cell::Cell;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MULTIPLIES.with(|c| c.set(0));
}

pub fn get() -> u64 {
    MULTIPLIES.with(|c| c.get())
}

#[inline]
pub fn add(n: u64) {
    MULTIPLIES.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result with the multiplies it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = get();
    let out = f();
    (out, get() - before)
}
