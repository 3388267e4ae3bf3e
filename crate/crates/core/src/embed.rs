//! Positional Fourier features.

/// `[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]`, length `2L + 1`.
pub fn fourier_embed(x: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels + 1);
    out.push(x);
    let mut freq = 1.0;
    for _ in 0..levels {
        let (s, c) = (freq * x).sin_cos();
        out.push(s);
        out.push(c);
        freq *= 2.0;
    }
    out
}

/// Component-wise embedding of a multi-dimensional position, concatenated.
pub fn fourier_embed_position(position: &[f64], levels: usize) -> Vec<f64> {
    position
        .iter()
        .flat_map(|&x| fourier_embed(x, levels))
        .collect()
}
