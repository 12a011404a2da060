use candle_core::Tensor;

use crate::{Error, Result};

/// Which stage produced a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    PerModality,
    Concatenated,
    Fused,
}

/// Spatial-temporal feature array laid out as `[N_S, T, d]`, with
/// `N_S = h * w` sites in row-major order.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    data: Tensor,
    spatial: (usize, usize),
    kind: AxisKind,
}

impl FeatureVolume {
    pub fn new(data: Tensor, spatial: (usize, usize), kind: AxisKind) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 {
            return Err(Error::shape("rank", 3, dims.len()));
        }
        if dims[0] != spatial.0 * spatial.1 {
            return Err(Error::shape("sites", spatial.0 * spatial.1, dims[0]));
        }
        if kind == AxisKind::Fused && dims[1] != 1 {
            return Err(Error::shape("time", 1, dims[1]));
        }
        Ok(FeatureVolume {
            data,
            spatial,
            kind,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        self.spatial
    }

    pub fn kind(&self) -> AxisKind {
        self.kind
    }

    pub fn n_sites(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn len_t(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }
}
