/// Euclidean projection onto `{w >= 0, sum w = 1}` by sorting and
/// thresholding.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    project_in_place(&mut out, &mut Vec::with_capacity(v.len()));
    out
}

/// Projects each `m`-row of a row-major matrix in place.
pub fn project_rows(weights: &mut [f64], m: usize) {
    let mut sorted = Vec::with_capacity(m);
    for row in weights.chunks_mut(m) {
        project_in_place(row, &mut sorted);
    }
}

pub(crate) fn project_in_place(v: &mut [f64], sorted: &mut Vec<f64>) {
    sorted.clear();
    sorted.extend_from_slice(v);
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}
