//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod dual;

/// Frames with posterior below `eta`; all frames at `eta >= 1`; the first
/// smallest-posterior frame when nothing qualifies.
pub fn oracle_select(post: &[f64], eta: f64) -> Vec<usize> {
    if eta >= 1.0 {
        return (0..post.len()).collect();
    }
    let mut out = Vec::new();
    for t in 0..post.len() {
        if post[t] < eta {
            out.push(t);
        }
    }
    if out.is_empty() {
        let mut best = 0;
        for t in 1..post.len() {
            if post[t] < post[best] {
                best = t;
            }
        }
        out.push(best);
    }
    out
}

pub fn oracle_noise_average(grid: &[Vec<f64>], set: &[usize]) -> Vec<f64> {
    let bins = grid[0].len();
    let mut avg = vec![0.0; bins];
    for f in 0..bins {
        let mut s = 0.0;
        for &t in set {
            s += grid[t][f];
        }
        avg[f] = s / set.len() as f64;
    }
    avg
}

pub fn oracle_difference(grid: &[Vec<f64>], avg: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(grid.len());
    for row in grid {
        let mut r = Vec::with_capacity(row.len());
        for f in 0..row.len() {
            let d = row[f] - avg[f];
            r.push(if d < 0.0 { -d } else { d });
        }
        out.push(r);
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
