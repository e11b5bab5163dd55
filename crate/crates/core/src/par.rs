//! Pixel-adaptive refinement.
//!
//! Every pixel gathers its 8-way neighbours at several dilation rates. The
//! kernel weight towards a neighbour mixes an appearance term and a position
//! term, each softmax-normalised over the valid neighbours:
//!
//! ```text
//! κ_rgb = -mean_ch (|I_p - I_q| / (w1 σ_rgb))²
//! κ_pos = -(|P_p - P_q| / (w2 σ_pos))²
//! κ     = softmax(κ_rgb) + w3 · softmax(κ_pos)
//! ```
//!
//! with `σ` the per-centre standard deviation of the differences over its
//! own neighbour set. Refinement repeatedly replaces each activation by the
//! κ-weighted sum of its neighbours' activations. Rows sum to `1 + w3` and
//! the result is not renormalised.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::softmax_in_place;
use crate::cam::ActivationMap;
use crate::{Error, Result, RgbImage};

#[derive(Debug, Clone, PartialEq)]
pub struct ParConfig {
    pub dilations: Vec<usize>,
    /// Smoothness of the appearance term.
    pub w1: f32,
    /// Smoothness of the position term.
    pub w2: f32,
    /// Weight of the position term.
    pub w3: f32,
    pub iterations: usize,
    pub sigma_floor: f64,
}

impl Default for ParConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4, 8, 12, 24],
            w1: 0.3,
            w2: 0.3,
            w3: 0.01,
            iterations: 15,
            sigma_floor: 1e-8,
        }
    }
}

impl ParConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::InvalidParameter {
                name: "dilations",
                reason: "need at least one rate and every rate must be positive",
            });
        }
        for (i, d) in self.dilations.iter().enumerate() {
            if self.dilations[..i].contains(d) {
                return Err(Error::InvalidParameter {
                    name: "dilations",
                    reason: "rates must be unique",
                });
            }
        }
        if !(self.w1 > 0.0 && self.w1.is_finite() && self.w2 > 0.0 && self.w2.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "w1/w2",
                reason: "smoothness factors must be positive and finite",
            });
        }
        if !(self.w3 >= 0.0 && self.w3.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "w3",
                reason: "position weight must be non-negative and finite",
            });
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter {
                name: "iterations",
                reason: "at least one iteration is required",
            });
        }
        if self.sigma_floor.is_nan() || self.sigma_floor <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "sigma_floor",
                reason: "must be positive",
            });
        }
        Ok(())
    }
}

/// In-bounds dilated 8-way neighbours of every pixel, in compressed-row form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    height: usize,
    width: usize,
    row_start: Vec<usize>,
    neighbors: Vec<usize>,
}

impl NeighborSet {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flat indices of the neighbours of flat pixel `p`.
    pub fn of(&self, p: usize) -> &[usize] {
        &self.neighbors[self.row_start[p]..self.row_start[p + 1]]
    }
}

/// Offsets `{-d, 0, d}² \ {(0, 0)}` for every dilation `d`, dropping any that
/// leave the image. Neighbours are listed dilation by dilation, offsets in
/// row-major order.
pub fn build_neighbors(height: usize, width: usize, dilations: &[usize]) -> NeighborSet {
    let mut row_start = Vec::with_capacity(height * width + 1);
    let mut neighbors = Vec::new();
    row_start.push(0);
    for row in 0..height {
        for col in 0..width {
            for &d in dilations {
                let d = d as isize;
                for dy in [-d, 0, d] {
                    for dx in [-d, 0, d] {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let r = row as isize + dy;
                        let c = col as isize + dx;
                        if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                            neighbors.push(r as usize * width + c as usize);
                        }
                    }
                }
            }
            row_start.push(neighbors.len());
        }
    }
    NeighborSet {
        height,
        width,
        row_start,
        neighbors,
    }
}

/// Per-pixel weights over a [`NeighborSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementKernel {
    neighbors: NeighborSet,
    weights: Vec<f32>,
}

impl RefinementKernel {
    pub fn height(&self) -> usize {
        self.neighbors.height
    }

    pub fn width(&self) -> usize {
        self.neighbors.width
    }

    pub fn neighbors(&self) -> &NeighborSet {
        &self.neighbors
    }

    /// Neighbour indices and weights of flat pixel `p`.
    pub fn row(&self, p: usize) -> (&[usize], &[f32]) {
        let range = self.neighbors.row_start[p]..self.neighbors.row_start[p + 1];
        (
            &self.neighbors.neighbors[range.clone()],
            &self.weights[range],
        )
    }

    /// Weight that pixel `p` gives to pixel `q`, zero if `q` is not a neighbour.
    pub fn weight(&self, p: usize, q: usize) -> f32 {
        let (idx, w) = self.row(p);
        idx.iter().position(|&n| n == q).map_or(0.0, |i| w[i])
    }
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

pub fn build_kernel(
    image: &RgbImage,
    neighbors: &NeighborSet,
    cfg: &ParConfig,
) -> Result<RefinementKernel> {
    cfg.validate()?;
    if image.height() != neighbors.height || image.width() != neighbors.width {
        return Err(Error::shape(
            "neighbour set",
            &[image.height(), image.width()],
            &[neighbors.height, neighbors.width],
        ));
    }
    let width = image.width();
    let pixels = image.pixels();
    let (w1, w2, w3) = (f64::from(cfg.w1), f64::from(cfg.w2), f64::from(cfg.w3));
    let mut weights = Vec::with_capacity(neighbors.neighbors.len());
    let mut diffs: [Vec<f64>; 3] = Default::default();
    let mut dist = Vec::new();
    let mut rgb = Vec::new();
    for p in 0..pixels.len() {
        let nb = neighbors.of(p);
        if nb.is_empty() {
            continue;
        }
        let center = pixels[p];
        let (pr, pc) = ((p / width) as f64, (p % width) as f64);
        for ch in diffs.iter_mut() {
            ch.clear();
        }
        dist.clear();
        for &q in nb {
            for (ch, d) in diffs.iter_mut().enumerate() {
                d.push((f64::from(center[ch]) - f64::from(pixels[q][ch])).abs());
            }
            let (qr, qc) = ((q / width) as f64, (q % width) as f64);
            dist.push(((pr - qr) * (pr - qr) + (pc - qc) * (pc - qc)).sqrt());
        }

        rgb.clear();
        rgb.resize(nb.len(), 0.0f64);
        for d in &diffs {
            let scale = w1 * std_dev(d).max(cfg.sigma_floor);
            for (r, &v) in rgb.iter_mut().zip(d) {
                let z = v / scale;
                *r -= z * z / 3.0;
            }
        }
        softmax_in_place(&mut rgb);

        let scale = w2 * std_dev(&dist).max(cfg.sigma_floor);
        for v in dist.iter_mut() {
            let z = *v / scale;
            *v = -z * z;
        }
        softmax_in_place(&mut dist);

        weights.extend(rgb.iter().zip(&dist).map(|(r, s)| (r + w3 * s) as f32));
    }
    Ok(RefinementKernel {
        neighbors: neighbors.clone(),
        weights,
    })
}

/// Applies `iterations` rounds of `M_t(p) = Σ_q κ(p, q) M_{t-1}(q)`.
/// Pixels without neighbours keep their value.
pub fn refine(
    map: &ActivationMap,
    kernel: &RefinementKernel,
    iterations: usize,
) -> Result<ActivationMap> {
    if map.height() != kernel.height() || map.width() != kernel.width() {
        return Err(Error::shape(
            "activation map",
            &[kernel.height(), kernel.width(), map.classes()],
            &[map.height(), map.width(), map.classes()],
        ));
    }
    let classes = map.classes();
    let mut current = map.data().to_vec();
    let mut next = vec![0.0f32; current.len()];
    let mut acc = vec![0.0f64; classes];
    for _ in 0..iterations {
        for p in 0..map.pixels() {
            let (idx, w) = kernel.row(p);
            let out = &mut next[p * classes..(p + 1) * classes];
            if idx.is_empty() {
                out.copy_from_slice(&current[p * classes..(p + 1) * classes]);
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&q, &k) in idx.iter().zip(w) {
                let src = &current[q * classes..(q + 1) * classes];
                for (a, &v) in acc.iter_mut().zip(src) {
                    *a += f64::from(k) * f64::from(v);
                }
            }
            for (o, &a) in out.iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        core::mem::swap(&mut current, &mut next);
    }
    Ok(ActivationMap::from_raw(
        map.height(),
        map.width(),
        classes,
        current,
    ))
}

/// Builds neighbours and kernel from `image` and refines `map` with `cfg`.
pub fn refine_with_image(
    map: &ActivationMap,
    image: &RgbImage,
    cfg: &ParConfig,
) -> Result<ActivationMap> {
    let neighbors = build_neighbors(image.height(), image.width(), &cfg.dilations);
    let kernel = build_kernel(image, &neighbors, cfg)?;
    refine(map, &kernel, cfg.iterations)
}
