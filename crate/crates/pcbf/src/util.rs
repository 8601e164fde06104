//! Small shared helpers: deterministic float formatting, seed derivation,
//! and windowed minima.

/// Format with 9 significant digits, the fixed precision of all CSV exports.
/// Infinities print as `inf`/`-inf`.
pub(crate) fn sig9(x: f64) -> String {
    if x.is_infinite() || x.is_nan() {
        format!("{x}")
    } else {
        format!("{x:.8e}")
    }
}

/// Derive a stream seed from a master seed and two indices. Stable across
/// platforms and thread schedules.
pub(crate) fn mix_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut s = master
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    // splitmix64 finalizer
    s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    s ^ (s >> 31)
}

/// For each index t, the minimum of `q[t..=min(t+window, len-1)]`.
/// `window` counts additional samples past t; `window >= len` gives the
/// suffix minimum.
pub(crate) fn sliding_window_min(q: &[f64], window: usize) -> Vec<f64> {
    let n = q.len();
    let mut out = vec![0.0; n];
    // Monotonic deque of indices with increasing q values.
    let mut deque: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    // Walk right edge forward once; for each t the window is [t, t+window].
    let mut right = 0usize;
    for t in 0..n {
        let end = t.saturating_add(window).min(n - 1);
        while right <= end {
            while let Some(&back) = deque.back() {
                if q[back] >= q[right] {
                    deque.pop_back();
                } else {
                    break;
                }
            }
            deque.push_back(right);
            right += 1;
        }
        while let Some(&front) = deque.front() {
            if front < t {
                deque.pop_front();
            } else {
                break;
            }
        }
        out[t] = q[*deque.front().expect("window never empty")];
    }
    out
}
