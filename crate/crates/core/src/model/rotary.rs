use ndarray::{Array3, ArrayViewMut2};

/// Per-token rotation angles for interleaved dimension pairs `(2j, 2j + 1)`,
/// with `theta_j = position / base^(2j / head_dim)`. Positions are raw days.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(positions: &[f64], head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary head_dim must be even");
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half).map(|j| base.powf(-((2 * j) as f64) / head_dim as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for &f in &inv_freq {
                let (s, c) = (p * f).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { head_dim, cos, sin }
    }

    /// Rotates every head of a `[seq, n_head * head_dim]` block in place.
    pub fn rotate(&self, x: &mut ArrayViewMut2<f64>) {
        self.apply(x, 1.0);
    }

    /// Applies the transpose rotation (used to pull gradients back).
    pub fn rotate_inverse(&self, x: &mut ArrayViewMut2<f64>) {
        self.apply(x, -1.0);
    }

    fn apply(&self, x: &mut ArrayViewMut2<f64>, sign: f64) {
        let half = self.head_dim / 2;
        let n_head = x.ncols() / self.head_dim;
        for (t, mut row) in x.rows_mut().into_iter().enumerate() {
            let cos = &self.cos[t * half..(t + 1) * half];
            let sin = &self.sin[t * half..(t + 1) * half];
            for h in 0..n_head {
                let base = h * self.head_dim;
                for j in 0..half {
                    let (c, s) = (cos[j], sign * sin[j]);
                    let a = row[base + 2 * j];
                    let b = row[base + 2 * j + 1];
                    row[base + 2 * j] = a * c - b * s;
                    row[base + 2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotates a `[heads, seq, head_dim]` query or key tensor.
pub fn apply_rotary(x: &Array3<f64>, positions: &[f64], base: f64) -> Array3<f64> {
    let (heads, seq, head_dim) = x.dim();
    assert_eq!(positions.len(), seq, "one position per sequence element");
    let table = RotaryTable::new(positions, head_dim, base);
    let mut out = x.clone();
    for h in 0..heads {
        let mut view = out.index_axis_mut(ndarray::Axis(0), h);
        table.rotate(&mut view);
    }
    out
}
