//! Teacher–student contrastive losses at pixel, object and image
//! granularity, their sum over feature sources, and in-batch cross-modal
//! alignment. Teacher inputs are always detached.

use candle_core::{DType, Device, Tensor, D};
use nalgebra::DMatrix;
use ndarray::{Array2, Array4, ArrayView2};

use super::model::ProjectionHead;
use crate::exec::ExecMode;
use crate::geo::{sinkhorn_assign, Assignment};
use crate::nn::{log_softmax_last, softmax_last, Linear};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub student: f64,
    pub teacher: f64,
}

/// Per-row cross-entropy between the centred, sharpened teacher distribution
/// and the student distribution. Inputs `[n, K]`, output `[n]`.
pub fn cl_rows(student_logits: &Tensor, teacher_logits: &Tensor, center: &Tensor, temps: Temperatures) -> Result<Tensor> {
    let t = teacher_logits.detach().broadcast_sub(&center.to_dtype(teacher_logits.dtype())?)?;
    let p = softmax_last(&(t / temps.teacher)?)?.detach();
    let logq = log_softmax_last(&(student_logits / temps.student)?)?;
    Ok((p * logq)?.sum(D::Minus1)?.neg()?)
}

/// Mean per-pair loss `L_CL` of student features against teacher features,
/// both `[n, d]`, through their projection heads.
pub fn pairwise_cl_loss(
    student: &Tensor,
    teacher: &Tensor,
    student_head: &ProjectionHead,
    teacher_head: &ProjectionHead,
    center: &Tensor,
    temps: Temperatures,
) -> Result<Tensor> {
    let s = student_head.forward(student)?;
    let t = teacher_head.forward(&teacher.detach())?.detach();
    Ok(cl_rows(&s, &t, center, temps)?.mean_all()?)
}

/// Heads, centre and temperatures for one (source, granularity) term.
#[derive(Debug, Clone, Copy)]
pub struct ClContext<'a> {
    pub student_head: &'a ProjectionHead,
    pub teacher_head: &'a ProjectionHead,
    pub center: &'a Tensor,
    pub temps: Temperatures,
}

/// A granularity term and the teacher logits that entered it (for centring).
#[derive(Debug, Clone)]
pub struct TermOutput {
    pub loss: Tensor,
    pub teacher_logits: Tensor,
    /// Samples with no overlapping site; their contribution is 0.
    pub empty: usize,
}

fn weighted_sum(rows: &Tensor, weights: Vec<f64>) -> Result<Tensor> {
    let n = weights.len();
    let w = Tensor::from_vec(weights, n, rows.device())?.to_dtype(rows.dtype())?;
    Ok((rows * w)?.sum_all()?)
}

/// Pixel term from precomputed logits `[B, N_S, T, K]`. `pairs[b]` lists
/// `(student site, teacher site)` for sample `b`. Per-sample means over the
/// overlap and all slices, then a batch mean.
pub fn loss_pixel_logits(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    pairs: &[&[(usize, usize)]],
    center: &Tensor,
    temps: Temperatures,
) -> Result<TermOutput> {
    let (b, n_s, t, k) = student_logits.dims4()?;
    let (tb, tn, tt, _) = teacher_logits.dims4()?;
    if tb != b || tt != t {
        return Err(Error::shape("batch", b, tb));
    }
    if pairs.len() != b {
        return Err(Error::shape("batch", b, pairs.len()));
    }
    let mut si = Vec::new();
    let mut ti = Vec::new();
    let mut weights = Vec::new();
    let mut empty = 0;
    for (bi, p) in pairs.iter().enumerate() {
        if p.is_empty() {
            empty += 1;
            continue;
        }
        let w = 1.0 / (b * p.len() * t) as f64;
        for &(a, c) in p.iter() {
            si.push((bi * n_s + a) as u32);
            ti.push((bi * tn + c) as u32);
            weights.extend(std::iter::repeat(w).take(t));
        }
    }
    let dev = student_logits.device();
    if si.is_empty() {
        return Ok(TermOutput {
            loss: Tensor::zeros((), student_logits.dtype(), dev)?,
            teacher_logits: teacher_logits.reshape((tb * tn * tt, k))?.detach(),
            empty,
        });
    }
    let n = si.len();
    let s_idx = Tensor::from_vec(si, n, dev)?;
    let t_idx = Tensor::from_vec(ti, n, dev)?;
    let s = student_logits.reshape((b * n_s, t, k))?.index_select(&s_idx, 0)?.reshape((n * t, k))?;
    let tl = teacher_logits.reshape((tb * tn, t, k))?.index_select(&t_idx, 0)?.reshape((n * t, k))?;
    let rows = cl_rows(&s, &tl, center, temps)?;
    Ok(TermOutput {
        loss: weighted_sum(&rows, weights)?,
        teacher_logits: tl.detach(),
        empty,
    })
}

/// Pixel term from features `[B, N_S, T, d]`.
pub fn loss_pixel(ctx: &ClContext, student: &Tensor, teacher: &Tensor, pairs: &[&[(usize, usize)]]) -> Result<TermOutput> {
    let s = ctx.student_head.forward(student)?;
    let t = ctx.teacher_head.forward(&teacher.detach())?.detach();
    loss_pixel_logits(&s, &t, pairs, ctx.center, ctx.temps)
}

/// Object clusters of one feature map.
#[derive(Debug, Clone)]
pub struct ObjectClusters {
    /// Anchor directions `[k, d]`.
    pub anchors: Array2<f64>,
    pub assignment: Assignment,
    /// Pooling weights `[k, n]`: the assignment's columns scaled to sum to one.
    pub weights: Array2<f64>,
}

impl ObjectClusters {
    pub fn n_clusters(&self) -> usize {
        self.weights.nrows()
    }

    /// Cluster centres `W F`, `[k, d]`.
    pub fn centers(&self, features: ArrayView2<f64>) -> Array2<f64> {
        self.weights.dot(&features)
    }
}

/// Column-normalised `Sᵀ`: row `j` holds the pooling weights of cluster `j`.
pub fn pooling_weights(plan: &Array2<f64>) -> Array2<f64> {
    let mut w = plan.t().to_owned();
    for mut row in w.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    w
}

/// Top principal directions of the centred rows of `x`, sign-fixed so the
/// largest-magnitude component is positive.
pub fn principal_directions(x: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = Array2::zeros((k, d));
    for (r, &j) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(j);
        let mut best = 0;
        for i in 1..d {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            out[[r, i]] = sign * col[i];
        }
    }
    out
}

/// Cosine similarity with zero-norm rows mapped to 0.
fn safe_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let norm = |v: ndarray::ArrayView1<f64>| v.dot(&v).sqrt();
    let bn: Vec<f64> = b.rows().into_iter().map(norm).collect();
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        let an = norm(a.row(i));
        if an < 1e-12 || bn[j] < 1e-12 {
            0.0
        } else {
            (a.row(i).dot(&b.row(j)) / (an * bn[j])).clamp(-1.0, 1.0)
        }
    })
}

/// Cluster pixel features `[n, d]` into at most `n_clusters` objects: anchors
/// are the principal directions of the map, sites are assigned to anchors by
/// Sinkhorn on centred cosine similarity, and centres are the
/// column-normalised `SᵀF`.
pub fn cluster_objects(features: ArrayView2<f64>, n_clusters: usize, n_iters: usize, epsilon: f64) -> Result<ObjectClusters> {
    let (n, d) = features.dim();
    if n == 0 {
        return Err(Error::contract("cannot cluster an empty feature map"));
    }
    let k = n_clusters.min(n).min(d.max(1));
    let anchors = principal_directions(features, k);
    let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = &features - &mean;
    let sim = safe_cosine(centered.view(), anchors.view());
    let assignment = sinkhorn_assign(sim.view(), n_iters, epsilon)?;
    let weights = pooling_weights(&assignment.plan);
    Ok(ObjectClusters {
        anchors,
        assignment,
        weights,
    })
}

/// Hyper-parameters of the object term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectParams {
    pub n_clusters: usize,
    pub n_iters: usize,
    pub epsilon: f64,
}

fn to_array4(t: &Tensor) -> Result<Array4<f64>> {
    let dims = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array4::from_shape_vec(dims, v).expect("element count"))
}

/// Object term on features `[B, N_S, T, d]`. Clusters come from the teacher's
/// overlap features of each slice; the same weights, carried through the
/// correspondence, pool the student features.
pub fn loss_object(
    ctx: &ClContext,
    student: &Tensor,
    teacher: &Tensor,
    pairs: &[&[(usize, usize)]],
    params: ObjectParams,
    mode: ExecMode,
) -> Result<TermOutput> {
    let (b, n_s, t, d) = student.dims4()?;
    let (_, tn, _, _) = teacher.dims4()?;
    let teacher = teacher.detach();
    let tarr = to_array4(&teacher)?;
    let nc = params.n_clusters;
    let jobs: Vec<(usize, usize)> = (0..b).flat_map(|bi| (0..t).map(move |ti| (bi, ti))).collect();
    let clusters: Vec<Option<ObjectClusters>> = crate::exec::try_map_range(mode, jobs.len(), |j| {
        let (bi, ti) = jobs[j];
        let p = pairs[bi];
        if p.is_empty() {
            return Ok(None);
        }
        let x = Array2::from_shape_fn((p.len(), d), |(r, c)| tarr[[bi, p[r].1, ti, c]]);
        cluster_objects(x.view(), nc, params.n_iters, params.epsilon).map(Some)
    })?;
    let mut ws = vec![0.0f64; b * t * nc * n_s];
    let mut wt = vec![0.0f64; b * t * nc * tn];
    let mut valid = Vec::new();
    let mut row_w = Vec::new();
    let mut empty = 0;
    for (j, c) in clusters.iter().enumerate() {
        let (bi, ti) = jobs[j];
        let Some(c) = c else {
            if ti == 0 {
                empty += 1;
            }
            continue;
        };
        let k = c.n_clusters();
        for r in 0..k {
            let row = (bi * t + ti) * nc + r;
            for (col, &(sa, sb)) in pairs[bi].iter().enumerate() {
                ws[row * n_s + sa] = c.weights[[r, col]];
                wt[row * tn + sb] = c.weights[[r, col]];
            }
            valid.push(row as u32);
            row_w.push(1.0 / (b * t * k) as f64);
        }
    }
    let dev = student.device();
    let dtype = student.dtype();
    let ws = Tensor::from_vec(ws, (b, t, nc, n_s), dev)?.to_dtype(dtype)?;
    let wt = Tensor::from_vec(wt, (b, t, nc, tn), dev)?.to_dtype(dtype)?;
    let s_pooled = ws.matmul(&student.permute((0, 2, 1, 3))?.contiguous()?)?;
    let t_pooled = wt.matmul(&teacher.permute((0, 2, 1, 3))?.contiguous()?)?;
    let s_logits = ctx.student_head.forward(&s_pooled)?;
    let t_logits = ctx.teacher_head.forward(&t_pooled)?.detach();
    let k_out = s_logits.dims()[3];
    if valid.is_empty() {
        return Ok(TermOutput {
            loss: Tensor::zeros((), dtype, dev)?,
            teacher_logits: t_logits.reshape((b * t * nc, k_out))?,
            empty,
        });
    }
    let n = valid.len();
    let idx = Tensor::from_vec(valid, n, dev)?;
    let s = s_logits.reshape((b * t * nc, k_out))?.index_select(&idx, 0)?;
    let tl = t_logits.reshape((b * t * nc, k_out))?.index_select(&idx, 0)?;
    let rows = cl_rows(&s, &tl, ctx.center, ctx.temps)?;
    Ok(TermOutput {
        loss: weighted_sum(&rows, row_w)?,
        teacher_logits: tl,
        empty,
    })
}

/// Image term: spatial mean per slice, then the per-pair loss averaged over
/// slices and the batch. Student and teacher may differ in site count
/// (local crops) but not in batch or slice count.
pub fn loss_image(ctx: &ClContext, student: &Tensor, teacher: &Tensor) -> Result<TermOutput> {
    let (b, _, t, d) = student.dims4()?;
    let (tb, _, tt, _) = teacher.dims4()?;
    if tb != b {
        return Err(Error::shape("batch", b, tb));
    }
    if tt != t {
        return Err(Error::shape("time", t, tt));
    }
    let s = student.mean(1)?.reshape((b * t, d))?;
    let tp = teacher.detach().mean(1)?.reshape((b * t, d))?;
    let s_logits = ctx.student_head.forward(&s)?;
    let t_logits = ctx.teacher_head.forward(&tp)?.detach();
    let rows = cl_rows(&s_logits, &t_logits, ctx.center, ctx.temps)?;
    Ok(TermOutput {
        loss: rows.mean_all()?,
        teacher_logits: t_logits,
        empty: 0,
    })
}

/// Sum of pixel, object and image terms for one source.
#[derive(Debug, Clone)]
pub struct FgclTerms {
    pub pixel: Tensor,
    pub object: Tensor,
    pub image: Tensor,
}

impl FgclTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.pixel + &self.object)? + &self.image)?)
    }
}

/// `L_MGCL`: the sum of the per-source granularity sums.
pub fn loss_mgcl(terms: &[FgclTerms]) -> Result<Tensor> {
    let mut it = terms.iter();
    let first = it.next().ok_or_else(|| Error::contract("no loss terms"))?.total()?;
    it.try_fold(first, |acc, t| Ok((acc + t.total()?)?))
}

/// In-batch InfoNCE from modality `i` to modality `j`: row `b` of
/// `z_i z_jᵀ / τ` should pick column `b`.
pub fn info_nce(zi: &Tensor, zj: &Tensor, temperature: f64) -> Result<Tensor> {
    let logits = (zi.matmul(&zj.t()?)? / temperature)?;
    let logp = log_softmax_last(&logits)?;
    let b = logp.dims()[0];
    let eye = Tensor::eye(b, logp.dtype(), logp.device())?;
    Ok(((logp * eye)?.sum_all()?.neg()? / b as f64)?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// `L_align`: InfoNCE over every ordered pair of distinct modalities, on
/// image-pooled features `[B, d]` passed through per-modality projections.
pub fn loss_align(pooled: &[Tensor; 3], projections: &[Linear; 3], temperature: f64) -> Result<Tensor> {
    let z: Vec<Tensor> = pooled
        .iter()
        .zip(projections)
        .map(|(f, p)| l2_normalize(&p.forward(f)?))
        .collect::<Result<_>>()?;
    let mut total: Option<Tensor> = None;
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let l = info_nce(&z[i], &z[j], temperature)?;
            total = Some(match total {
                None => l,
                Some(acc) => (acc + l)?,
            });
        }
    }
    Ok(total.expect("six terms"))
}

/// Image-pool `[B, N_S, T, d]` to `[B, d]` over sites and slices.
pub fn pool_image(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(1)?.mean(1)?)
}

/// Centre vectors, one per (source, granularity), updated by EMA of the
/// batch-mean teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    pub momentum: f64,
    values: std::collections::BTreeMap<String, Vec<f32>>,
}

impl Centers {
    pub fn new(momentum: f64) -> Self {
        Centers {
            momentum,
            values: Default::default(),
        }
    }

    pub fn get(&self, key: &str, k: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        match self.values.get(key) {
            Some(v) => Ok(Tensor::from_vec(v.clone(), v.len(), device)?.to_dtype(dtype)?),
            None => Ok(Tensor::zeros(k, dtype, device)?),
        }
    }

    /// EMA towards the mean of `logits` rows (all `[n, K]`, pooled together).
    pub fn update(&mut self, key: &str, logits: &[&Tensor]) -> Result<()> {
        let mut sum: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for l in logits {
            let (rows, k) = l.dims2()?;
            if rows == 0 {
                continue;
            }
            let s = l.to_dtype(DType::F64)?.sum(0)?.to_vec1::<f64>()?;
            if sum.is_empty() {
                sum = vec![0.0; k];
            }
            for (a, b) in sum.iter_mut().zip(s) {
                *a += b;
            }
            n += rows;
        }
        if n == 0 {
            return Ok(());
        }
        let m = self.momentum;
        let entry = self.values.entry(key.to_string()).or_insert_with(|| vec![0.0; sum.len()]);
        for (c, s) in entry.iter_mut().zip(sum) {
            *c = (m * *c as f64 + (1.0 - m) * s / n as f64) as f32;
        }
        Ok(())
    }

    pub fn export(&self) -> Vec<(String, Vec<f32>)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn import(&mut self, entries: impl IntoIterator<Item = (String, Vec<f32>)>) {
        self.values = entries.into_iter().collect();
    }
}
