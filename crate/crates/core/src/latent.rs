//! Latent codes in the extended (per-layer) generator space, their
//! coarse/medium/fine partition, and the blend used for hair interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// A list of layer vectors, all of the same width.
pub type LayerList = Vec<Vec<f64>>;

/// `L` stacked `D`-dimensional vectors, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    layers: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentCode {
    pub const MIN_LAYERS: usize = 3;

    pub fn new(layers: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if layers < Self::MIN_LAYERS {
            return Err(shape_err(format!(
                "latent needs at least {} layers, got {layers}",
                Self::MIN_LAYERS
            )));
        }
        if dim == 0 {
            return Err(shape_err("latent dimension must be positive"));
        }
        if data.len() != layers * dim {
            return Err(shape_err(format!(
                "latent data has {} entries, expected {layers}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent contains non-finite entries".into()));
        }
        Ok(Self { layers, dim, data })
    }

    pub fn zeros(layers: usize, dim: usize) -> Result<Self> {
        Self::new(layers, dim, vec![0.0; layers * dim])
    }

    pub fn from_layers(layers: LayerList) -> Result<Self> {
        let dim = layers.first().map(Vec::len).unwrap_or(0);
        if layers.iter().any(|l| l.len() != dim) {
            return Err(shape_err("latent layers have differing widths"));
        }
        let count = layers.len();
        Self::new(count, dim, layers.into_iter().flatten().collect())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.layers, self.dim)
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_layers(&self) -> LayerList {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

/// A latent-space edit step; shape-compatible with the code it modifies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDelta {
    layers: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentDelta {
    pub fn new(layers: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != layers * dim {
            return Err(shape_err(format!(
                "delta data has {} entries, expected {layers}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("delta contains non-finite entries".into()));
        }
        Ok(Self { layers, dim, data })
    }

    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self {
            layers,
            dim,
            data: vec![0.0; layers * dim],
        }
    }

    pub fn from_layers(layers: LayerList) -> Result<Self> {
        let dim = layers.first().map(Vec::len).unwrap_or(0);
        if layers.iter().any(|l| l.len() != dim) {
            return Err(shape_err("delta layers have differing widths"));
        }
        let count = layers.len();
        Self::new(count, dim, layers.into_iter().flatten().collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.layers, self.dim)
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_layers(&self) -> LayerList {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

/// Layer counts of the coarse, medium and fine parts of a latent code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPartition {
    pub n_coarse: usize,
    pub n_medium: usize,
    pub n_fine: usize,
}

impl LatentPartition {
    pub fn new(n_coarse: usize, n_medium: usize, n_fine: usize) -> Result<Self> {
        if n_coarse == 0 || n_medium == 0 || n_fine == 0 {
            return Err(shape_err(format!(
                "every partition part needs at least one layer, got ({n_coarse},{n_medium},{n_fine})"
            )));
        }
        Ok(Self {
            n_coarse,
            n_medium,
            n_fine,
        })
    }

    /// (4, 4, 10) for 18 layers; other depths keep the same proportions,
    /// with every part holding at least one layer.
    pub fn default_for(layers: usize) -> Result<Self> {
        if layers < LatentCode::MIN_LAYERS {
            return Err(shape_err(format!("cannot partition {layers} layers")));
        }
        let share = ((layers as f64) * 4.0 / 18.0).round().max(1.0) as usize;
        let share = share.min((layers - 1) / 2);
        Self::new(share, share, layers - 2 * share)
    }

    pub fn total(&self) -> usize {
        self.n_coarse + self.n_medium + self.n_fine
    }

    pub fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        let c = self.n_coarse;
        let m = c + self.n_medium;
        [0..c, c..m, m..self.total()]
    }

    fn check(&self, layers: usize) -> Result<()> {
        if self.total() != layers {
            return Err(shape_err(format!(
                "partition ({},{},{}) covers {} layers, latent has {layers}",
                self.n_coarse,
                self.n_medium,
                self.n_fine,
                self.total()
            )));
        }
        Ok(())
    }
}

/// The three parts of a split latent, in coarse/medium/fine order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentParts {
    pub coarse: LayerList,
    pub medium: LayerList,
    pub fine: LayerList,
}

pub fn split_latent(w: &LatentCode, partition: &LatentPartition) -> Result<LatentParts> {
    partition.check(w.layers())?;
    let [c, m, f] = partition.ranges();
    let take = |r: std::ops::Range<usize>| r.map(|i| w.layer(i).to_vec()).collect::<LayerList>();
    Ok(LatentParts {
        coarse: take(c),
        medium: take(m),
        fine: take(f),
    })
}

fn check_part(name: &str, part: &LayerList, expected: usize) -> Result<()> {
    if part.len() != expected {
        return Err(shape_err(format!(
            "{name} part has {} layers, partition expects {expected}",
            part.len()
        )));
    }
    Ok(())
}

pub fn assemble_latent(
    coarse: LayerList,
    medium: LayerList,
    fine: LayerList,
    partition: &LatentPartition,
) -> Result<LatentCode> {
    check_part("coarse", &coarse, partition.n_coarse)?;
    check_part("medium", &medium, partition.n_medium)?;
    check_part("fine", &fine, partition.n_fine)?;
    LatentCode::from_layers(coarse.into_iter().chain(medium).chain(fine).collect())
}

/// `lambda * w_b + (1 - lambda) * w_a`; the endpoints are returned verbatim.
pub fn interpolate_latent(w_a: &LatentCode, w_b: &LatentCode, lambda: f64) -> Result<LatentCode> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "interpolation weight {lambda} outside [0, 1]"
        )));
    }
    if w_a.shape() != w_b.shape() {
        return Err(shape_err(format!(
            "cannot interpolate {:?} with {:?}",
            w_a.shape(),
            w_b.shape()
        )));
    }
    if lambda == 0.0 {
        return Ok(w_a.clone());
    }
    if lambda == 1.0 {
        return Ok(w_b.clone());
    }
    let data = w_a
        .as_slice()
        .iter()
        .zip(w_b.as_slice())
        .map(|(a, b)| lambda * b + (1.0 - lambda) * a)
        .collect();
    LatentCode::new(w_a.layers, w_a.dim, data)
}
