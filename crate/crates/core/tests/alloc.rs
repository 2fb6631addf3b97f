//! The convolutional paths never hold an n-by-m buffer; the dense path does.
//! A counting global allocator records the largest live total and the largest
//! single block.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};
use std::sync::Mutex;

use lambdakit::layer::{init_params, Implementation};
use lambdakit::rng::{Stream, StreamRng};
use lambdakit::{lambda_layer_forward, Geometry, LambdaConfig, Tensor};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let live = LIVE.fetch_add(layout.size(), Relaxed) + layout.size();
        PEAK.fetch_max(live, Relaxed);
        LARGEST.fetch_max(layout.size(), Relaxed);
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE.fetch_sub(layout.size(), Relaxed);
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

// the counters are process-wide, so measurements must not overlap
static SERIAL: Mutex<()> = Mutex::new(());

/// Extra peak bytes and largest block allocated while running `f`.
fn measure<R>(f: impl FnOnce() -> R) -> (R, usize, usize) {
    let base = LIVE.load(Relaxed);
    PEAK.store(base, Relaxed);
    LARGEST.store(0, Relaxed);
    let r = f();
    (r, PEAK.load(Relaxed) - base, LARGEST.load(Relaxed))
}

const N: usize = 512;
const K: usize = 16;

fn setup(imp: Implementation) -> (LambdaConfig, Tensor<f64>) {
    let mut config = LambdaConfig::new(8, 16, K, 4, Geometry::Seq(N));
    config.scope = Some(vec![23]);
    config.implementation = imp;
    let x = StreamRng::new(1, Stream::Data, 0).normal_tensor(&[1, N, 8], 1.0);
    (config, x)
}

#[test]
fn conv_paths_stay_below_n_times_m() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    for imp in [Implementation::Conv, Implementation::Depthwise] {
        let (config, x) = setup(imp);
        let p = init_params(&config, 3).unwrap();
        let (y, peak, largest) = measure(|| lambda_layer_forward(&x, &x, &p, &config).unwrap());
        drop(y);
        // a single f64 [n, m] matrix would already be this large
        let nm = N * N * 8;
        assert!(largest < nm, "{imp:?}: largest block {largest} >= {nm}");
        assert!(peak < nm, "{imp:?}: peak {peak} >= {nm}");
    }
}

#[test]
fn einsum_materializes_dense_embeddings() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (config, x) = setup(Implementation::Einsum);
    let p = init_params(&config, 3).unwrap();
    let (_, peak, _) = measure(|| lambda_layer_forward(&x, &x, &p, &config).unwrap());
    assert!(peak >= N * N * K * 8, "peak {peak}");
}
