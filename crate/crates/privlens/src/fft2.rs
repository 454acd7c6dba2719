//! Unitary 2D FFT on complex tensors.
//!
//! One transform convention project-wide: both directions scale by
//! 1/sqrt(rows*cols), so `ifft2(fft2(x)) == x` and Parseval holds exactly
//! (`sum |x|^2 == sum |X|^2` up to roundoff). Plans are cached per thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::tensor::CTensor;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, forward))
            .or_insert_with(|| {
                let dir = if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    })
}

fn transform2(field: &CTensor, forward: bool) -> CTensor {
    let dims = field.dims();
    assert_eq!(dims.len(), 2, "fft2 expects a rank-2 tensor");
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = field.data().to_vec();

    let row_plan = plan(cols, forward);
    for r in 0..rows {
        row_plan.process(&mut data[r * cols..(r + 1) * cols]);
    }

    let col_plan = plan(rows, forward);
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_plan.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }

    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    for v in &mut data {
        *v *= scale;
    }
    CTensor::from_vec(dims, data).expect("dims preserved")
}

/// Forward unitary 2D DFT.
pub fn fft2(field: &CTensor) -> CTensor {
    transform2(field, true)
}

/// Inverse unitary 2D DFT.
pub fn ifft2(field: &CTensor) -> CTensor {
    transform2(field, false)
}

/// DFT frequency for index `k` of an axis with `n` samples of pitch `d`,
/// in cycles per unit length (standard fftfreq layout).
pub fn fft_freq(k: usize, n: usize, d: f64) -> f64 {
    let k = k as isize;
    let n_i = n as isize;
    let signed = if k <= (n_i - 1) / 2 { k } else { k - n_i };
    signed as f64 / (n as f64 * d)
}
