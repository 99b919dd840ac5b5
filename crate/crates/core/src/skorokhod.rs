//! One-sided Skorokhod map at the origin on a sampled path.
//!
//! `Gamma(z)(t) = z(t) + sup_{s <= t} [-z(s)]^+`; the supremum term is the
//! regulator (local time) that keeps the image non-negative.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkorokhodState {
    /// Free path value.
    pub z: f64,
    /// Running `sup_{s <= t} [-z(s)]^+`.
    pub regulator: f64,
    /// Reflected value `z + regulator >= 0`.
    pub x: f64,
}

impl SkorokhodState {
    pub fn local_time(&self) -> f64 {
        self.regulator
    }
}

/// Applies the map to the samples of a free path.
pub fn skorokhod_map(z: &[f64]) -> Vec<SkorokhodState> {
    let mut regulator = 0.0_f64;
    z.iter()
        .map(|&z| {
            regulator = regulator.max(-z);
            SkorokhodState {
                z,
                regulator,
                x: (z + regulator).max(0.0),
            }
        })
        .collect()
}

/// Reflected path built from free increments starting at `x0 >= 0`.
pub fn reflect_increments(x0: f64, increments: &[f64]) -> Vec<SkorokhodState> {
    let mut z = x0;
    let mut path = Vec::with_capacity(increments.len() + 1);
    path.push(z);
    for dz in increments {
        z += dz;
        path.push(z);
    }
    skorokhod_map(&path)
}
