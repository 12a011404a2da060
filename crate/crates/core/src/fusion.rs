//! Multi-modal temporal fusion: concatenate per-modality volumes along time,
//! add a learned day-of-year encoding, prepend a shared extra token and run a
//! transformer over the time axis of every spatial site on its own.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::{AxisKind, DateVector, FeatureVolume, DAYS_IN_YEAR};
use crate::nn::{Init, ParamStore, TransformerStack};
use crate::{Error, Result};

pub const DTPE_KEY: &str = "dtpe/table";
pub const EXTRA_TOKEN_KEY: &str = "fusion/extra_token";

/// Learnable `[365, d]` day-of-year table.
#[derive(Debug, Clone)]
pub struct DatePositionalTable {
    pub table: Tensor,
}

impl DatePositionalTable {
    pub fn new(store: &mut ParamStore, width: usize) -> Result<Self> {
        Ok(DatePositionalTable {
            table: store.param(DTPE_KEY, &[DAYS_IN_YEAR, width], Init::TruncNormal(0.02))?,
        })
    }

    pub fn from_tensor(table: Tensor) -> Result<Self> {
        let (rows, _) = table.dims2()?;
        if rows != DAYS_IN_YEAR {
            return Err(Error::shape("day", DAYS_IN_YEAR, rows));
        }
        Ok(DatePositionalTable { table })
    }

    fn check(days: &[u16]) -> Result<()> {
        if let Some(&d) = days.iter().find(|&&d| d as usize >= DAYS_IN_YEAR) {
            return Err(Error::contract(format!("day index {d} outside [0, {}]", DAYS_IN_YEAR - 1)));
        }
        Ok(())
    }

    /// Rows for `days`, `[n, d]`.
    pub fn lookup(&self, days: &[u16]) -> Result<Tensor> {
        Self::check(days)?;
        let idx: Vec<u32> = days.iter().map(|&d| d as u32).collect();
        let idx = Tensor::from_vec(idx, days.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }

    /// Rows for a batch of equally long date vectors, `[B, N_T, d]`.
    pub fn lookup_batch(&self, days: &[Vec<u16>]) -> Result<Tensor> {
        let n_t = days.first().map_or(0, Vec::len);
        if let Some(bad) = days.iter().find(|d| d.len() != n_t) {
            return Err(Error::shape("time", n_t, bad.len()));
        }
        let flat: Vec<u16> = days.iter().flatten().copied().collect();
        let d = self.table.dims()[1];
        Ok(self.lookup(&flat)?.reshape((days.len(), n_t, d))?)
    }
}

/// One learnable token shared by every site.
#[derive(Debug, Clone)]
pub struct ExtraToken {
    pub token: Tensor,
}

impl ExtraToken {
    pub fn new(store: &mut ParamStore, width: usize) -> Result<Self> {
        Ok(ExtraToken {
            token: store.param(EXTRA_TOKEN_KEY, &[width], Init::TruncNormal(0.02))?,
        })
    }

    /// `[n, 1, d]` copies of the token.
    pub fn broadcast(&self, n: usize) -> Result<Tensor> {
        let d = self.token.dims()[0];
        Ok(self.token.reshape((1, 1, d))?.broadcast_as((n, 1, d))?)
    }
}

/// Concatenate volumes along time in the given order (HR, Ms, SAR by
/// convention). Empty volumes are skipped.
pub fn concat_temporal(parts: &[&FeatureVolume]) -> Result<FeatureVolume> {
    let first = parts.first().ok_or_else(|| Error::contract("nothing to concatenate"))?;
    for p in parts {
        if p.n_sites() != first.n_sites() {
            return Err(Error::contract(format!("site count {} vs {}", p.n_sites(), first.n_sites())));
        }
        if p.width() != first.width() {
            return Err(Error::contract(format!("channel width {} vs {}", p.width(), first.width())));
        }
    }
    let tensors: Vec<Tensor> = parts.iter().map(|p| p.data().clone()).collect();
    let data = concat_time_axis(&tensors, 1)?;
    FeatureVolume::new(data, first.spatial_shape(), AxisKind::Concatenated)
}

/// `Tensor::cat` along `axis`, ignoring zero-length pieces.
pub fn concat_time_axis(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let kept: Vec<&Tensor> = parts.iter().filter(|t| t.dims()[axis] > 0).collect();
    match kept.len() {
        0 => Ok(parts[0].clone()),
        1 => Ok(kept[0].clone()),
        _ => Ok(Tensor::cat(&kept, axis)?),
    }
}

/// Add `table[dates[t]]` to slice `t` of every site.
pub fn add_date_encoding(ft: &FeatureVolume, dates: &DateVector, table: &DatePositionalTable) -> Result<FeatureVolume> {
    if dates.len() != ft.len_t() {
        return Err(Error::shape("time", ft.len_t(), dates.len()));
    }
    let enc = table.lookup(&dates.0)?.to_dtype(ft.data().dtype())?.unsqueeze(0)?;
    FeatureVolume::new(ft.data().broadcast_add(&enc)?, ft.spatial_shape(), ft.kind())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone)]
pub struct FusionModule {
    pub config: FusionConfig,
    pub dates: DatePositionalTable,
    pub extra: ExtraToken,
    pub blocks: TransformerStack,
}

impl FusionModule {
    pub fn new(store: &mut ParamStore, config: FusionConfig) -> Result<Self> {
        Ok(FusionModule {
            config,
            dates: DatePositionalTable::new(store, config.width)?,
            extra: ExtraToken::new(store, config.width)?,
            blocks: TransformerStack::new(
                store,
                "fusion/blocks",
                config.depth,
                config.width,
                config.num_heads,
                config.mlp_ratio,
            )?,
        })
    }

    /// Token sequences `[n, N_T, d]` (already date-encoded) to extra-token
    /// outputs `[n, d]`, plus per-layer attention weights.
    fn run(&self, seqs: &Tensor, keep_weights: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let n = seqs.dims()[0];
        let tokens = Tensor::cat(&[&self.extra.broadcast(n)?.to_dtype(seqs.dtype())?, seqs], 1)?;
        let (out, weights) = if keep_weights {
            self.blocks.forward_with_weights(&tokens)?
        } else {
            (self.blocks.forward(&tokens)?, Vec::new())
        };
        Ok((out.narrow(1, 0, 1)?.squeeze(1)?, weights))
    }

    /// Fuse one date-encoded volume into `[N_S, 1, d]`.
    pub fn fuse(&self, ft_date: &FeatureVolume) -> Result<FeatureVolume> {
        Ok(self.fuse_with_attention(ft_date)?.0)
    }

    /// As [`fuse`](Self::fuse), also returning attention weights
    /// `[N_S, heads, 1+N_T, 1+N_T]` for each layer.
    pub fn fuse_with_attention(&self, ft_date: &FeatureVolume) -> Result<(FeatureVolume, Vec<Tensor>)> {
        let (out, w) = self.run(ft_date.data(), true)?;
        Ok((FeatureVolume::new(out.unsqueeze(1)?, ft_date.spatial_shape(), AxisKind::Fused)?, w))
    }

    /// Batched path: `[B, N_S, N_T, d]` concatenated features and per-sample
    /// dates to `[B, N_S, d]`.
    pub fn fuse_batch(&self, concat: &Tensor, dates: &[Vec<u16>]) -> Result<Tensor> {
        let (b, n_s, n_t, d) = concat.dims4()?;
        if dates.len() != b {
            return Err(Error::shape("batch", b, dates.len()));
        }
        let enc = self.dates.lookup_batch(dates)?;
        if enc.dims()[1] != n_t {
            return Err(Error::shape("time", n_t, enc.dims()[1]));
        }
        let x = concat.broadcast_add(&enc.to_dtype(concat.dtype())?.unsqueeze(1)?)?;
        let (out, _) = self.run(&x.reshape((b * n_s, n_t, d))?, false)?;
        Ok(out.reshape((b, n_s, d))?)
    }
}

/// Mean over the last-but-one axis, used for image-level pooling.
pub fn mean_sites(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus2)?)
}
