//! Cubic-grid 3D FFTs on top of `rustfft`, with per-thread plan caches.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

struct Workspace {
    planner: FftPlanner<f64>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<f64>>>,
    scratch: Vec<Complex64>,
    lines: Vec<Complex64>,
}

thread_local! {
    static WORKSPACE: RefCell<Workspace> = RefCell::new(Workspace {
        planner: FftPlanner::new(),
        plans: HashMap::new(),
        scratch: Vec::new(),
        lines: Vec::new(),
    });
}

/// Unnormalized in-place 3D DFT of an `m^3` row-major array (x slowest).
///
/// `Forward` uses `exp(-i k x)`, `Inverse` uses `exp(+i k x)`.
pub fn fft3(data: &mut [Complex64], m: usize, direction: FftDirection) {
    assert_eq!(data.len(), m * m * m, "fft3: buffer is not m^3");
    if m == 1 {
        return;
    }
    WORKSPACE.with(|cell| {
        let ws = &mut *cell.borrow_mut();
        let forward = matches!(direction, FftDirection::Forward);
        let planner = &mut ws.planner;
        let fft = ws
            .plans
            .entry((m, forward))
            .or_insert_with(|| planner.plan_fft(m, direction))
            .clone();
        let zero = Complex64::new(0.0, 0.0);
        ws.scratch.resize(fft.get_inplace_scratch_len(), zero);
        ws.lines.resize(m * m * m, zero);
        let (scratch, lines) = (&mut ws.scratch, &mut ws.lines);

        // z axis: contiguous lines.
        fft.process_with_scratch(data, scratch);

        // y axis: gather each x-slab so y is contiguous.
        for x in 0..m {
            let slab = &mut data[x * m * m..(x + 1) * m * m];
            let batch = &mut lines[..m * m];
            for y in 0..m {
                for z in 0..m {
                    batch[z * m + y] = slab[y * m + z];
                }
            }
            fft.process_with_scratch(batch, scratch);
            for y in 0..m {
                for z in 0..m {
                    slab[y * m + z] = batch[z * m + y];
                }
            }
        }

        // x axis: make x contiguous for every (y, z).
        let mm = m * m;
        for x in 0..m {
            for yz in 0..mm {
                lines[yz * m + x] = data[x * mm + yz];
            }
        }
        fft.process_with_scratch(lines, scratch);
        for x in 0..m {
            for yz in 0..mm {
                data[x * mm + yz] = lines[yz * m + x];
            }
        }
    });
}

/// Smallest integer `>= n` whose only prime factors are 2, 3 and 5.
pub fn smooth_size(n: usize) -> usize {
    let mut candidate = n.max(1);
    loop {
        let mut r = candidate;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return candidate;
        }
        candidate += 1;
    }
}
