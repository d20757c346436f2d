use std::f64::consts::PI;

/// Encoded width of a `dim`-vector at `levels` frequencies.
pub fn encoding_len(dim: usize, levels: usize) -> usize {
    dim * (1 + 2 * levels)
}

/// Per component: `x, sin(2^0 πx), cos(2^0 πx), …, sin(2^{L-1} πx), cos(2^{L-1} πx)`.
pub fn positional_encoding(x: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoding_len(x.len(), levels));
    encode_into(x, levels, &mut out);
    out
}

pub(crate) fn encode_into(x: &[f64], levels: usize, out: &mut Vec<f64>) {
    for &v in x {
        out.push(v);
        for l in 0..levels {
            let a = (1u64 << l) as f64 * PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
}

/// Derivative of one component's encoding block with respect to that
/// component.
pub(crate) fn encoding_derivative(v: f64, levels: usize, out: &mut Vec<f64>) {
    out.push(1.0);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * PI;
        let a = f * v;
        out.push(f * a.cos());
        out.push(-f * a.sin());
    }
}
