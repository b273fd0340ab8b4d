//! BLOCK-LEnKPF: observations are split into spatial blocks that are
//! assimilated one after another. Each block runs an EnKPF on the observed
//! columns `u`, then carries the change over to the tapered neighbourhood `v`
//! by a linear regression on `u`. Blocks whose `u ∪ v` do not overlap are
//! independent and run in parallel.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use super::{reorder_to_match, LocalOutcome};
use crate::ensemble::{anomalies_of, Ensemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::global::{
    choose_gamma, enkf_with_perturbations, enkpf_analyze, ess, systematic_resample, EnsembleNoise,
    EssBand, ResampleIndices,
};
use crate::grid::FieldLayout;
use crate::linalg::symmetric_pinv;
use crate::obs::GaussObs;
use crate::rng::StreamFamily;
use crate::taper::{tapered_block_cov, tapered_cross_cov, Taper};

/// Relative eigenvalue cutoff for the generalized inverse of `P_uu`.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Reorders resampling indices so that as many members as possible keep
/// their own centre (`I(i) = i`), without changing the multiset.
pub fn permute_fixed_points(indices: &ResampleIndices) -> ResampleIndices {
    let identity: Vec<usize> = (0..indices.len()).collect();
    reorder_to_match(indices, &identity)
}

/// One block of observations with its column partition.
///
/// `u`: observed columns. `v`: columns with a nonzero taper weight to some
/// column of `u`, excluding `u`. `w`: everything else. All sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlock {
    pub obs: GaussObs,
    pub segment: usize,
    pub u: Vec<usize>,
    pub v: Vec<usize>,
    pub w: Vec<usize>,
}

impl ObservationBlock {
    /// `u ∪ v`, the columns this block reads and writes.
    pub fn footprint(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.u.iter().chain(&self.v).copied().collect();
        f.sort_unstable();
        f
    }
}

pub fn compute_uvw(block_obs: GaussObs, segment: usize, taper: &dyn Taper) -> Result<ObservationBlock> {
    if block_obs.is_empty() {
        return Err(Error::InvalidBlock(format!("segment {segment} has no observations")));
    }
    let d = taper.dim();
    block_obs.check_dim(d)?;
    let mut in_u = vec![false; d];
    for &c in block_obs.h_cols() {
        in_u[c] = true;
    }
    let mut in_v = vec![false; d];
    for c in (0..d).filter(|&c| in_u[c]) {
        for s in taper.support(c) {
            if !in_u[s] {
                in_v[s] = true;
            }
        }
    }
    let u = (0..d).filter(|&c| in_u[c]).collect();
    let v = (0..d).filter(|&c| in_v[c]).collect();
    let w = (0..d).filter(|&c| !in_u[c] && !in_v[c]).collect();
    Ok(ObservationBlock {
        obs: block_obs,
        segment,
        u,
        v,
        w,
    })
}

/// How a block picks its `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaRule {
    Fixed(f64),
    Adaptive(EssBand),
}

/// Result of assimilating one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockUpdate {
    pub ensemble: Ensemble,
    pub gamma: f64,
    pub ess: f64,
    /// Resampling indices after the fixed-point permutation.
    pub indices: ResampleIndices,
    pub pinv_truncated: bool,
}

/// New values of the `u` and `v` columns (in that order) for one block.
struct FootprintUpdate {
    cols: Vec<usize>,
    values: DMatrix<f64>,
    gamma: f64,
    ess: f64,
    indices: ResampleIndices,
    pinv_truncated: bool,
}

fn assimilate_footprint<R: Rng + ?Sized>(
    members: &DMatrix<f64>,
    block: &ObservationBlock,
    taper: &dyn Taper,
    rule: GammaRule,
    rng: &mut R,
) -> Result<FootprintUpdate> {
    let gamma = match rule {
        GammaRule::Fixed(g) => g,
        GammaRule::Adaptive(band) => {
            let (ens_u, local_obs, p_uu) = observed_problem(members, block, taper)?;
            choose_gamma(&ens_u, &local_obs, &p_uu, band)?
        }
    };
    let noise = EnsembleNoise::draw(rng, members.nrows(), block.obs.len());
    footprint_with(members, block, taper, gamma, &noise, None)
}

/// The EnKPF sub-problem on `u`: ensemble, remapped observations, tapered `P_uu`.
fn observed_problem(
    members: &DMatrix<f64>,
    block: &ObservationBlock,
    taper: &dyn Taper,
) -> Result<(Ensemble, GaussObs, DMatrix<f64>)> {
    let xu = members.select_columns(&block.u);
    let p_uu = tapered_block_cov(&anomalies_of(&xu), &block.u, taper);
    let local_obs = block
        .obs
        .remap_columns(|c| block.u.binary_search(&c).expect("observed column lies in u"));
    Ok((Ensemble::background(xu)?, local_obs, p_uu))
}

/// `indices`: resampling to use instead of the systematic draw from
/// `noise.uniform`; taken as given, without the fixed-point permutation.
fn footprint_with(
    members: &DMatrix<f64>,
    block: &ObservationBlock,
    taper: &dyn Taper,
    gamma: f64,
    noise: &EnsembleNoise,
    indices: Option<&ResampleIndices>,
) -> Result<FootprintUpdate> {
    let k = members.nrows();
    let (ens_u, local_obs, p_uu) = observed_problem(members, block, taper)?;
    let xu = ens_u.members();
    let (xa_u, indices, block_ess) = if gamma >= 1.0 {
        let xa = enkf_with_perturbations(&ens_u, &local_obs, &p_uu, &noise.eta)?;
        (xa.into_members(), ResampleIndices::identity(k), k as f64)
    } else {
        let analysis = enkpf_analyze(&ens_u, &local_obs, &p_uu, gamma, noise)?;
        let indices = match indices {
            Some(given) => given.clone(),
            None => permute_fixed_points(&systematic_resample(&analysis.weights, noise.uniform)),
        };
        (analysis.compose(&indices), indices, ess(&analysis.weights))
    };

    let delta_u = &xa_u - xu;
    let (pinv, pinv_truncated) = symmetric_pinv(&p_uu, PINV_REL_TOL);
    let xv = members.select_columns(&block.v);
    let p_uv = tapered_cross_cov(&anomalies_of(xu), &block.u, &anomalies_of(&xv), &block.v, taper);
    let xa_v = xv + delta_u * pinv * p_uv;

    let cols: Vec<usize> = block.u.iter().chain(&block.v).copied().collect();
    let mut values = DMatrix::zeros(k, cols.len());
    values.columns_mut(0, block.u.len()).copy_from(&xa_u);
    values.columns_mut(block.u.len(), block.v.len()).copy_from(&xa_v);
    Ok(FootprintUpdate {
        cols,
        values,
        gamma,
        ess: block_ess,
        indices,
        pinv_truncated,
    })
}

fn apply(members: &mut DMatrix<f64>, upd: &FootprintUpdate) {
    for (j, &c) in upd.cols.iter().enumerate() {
        members.set_column(c, &upd.values.column(j));
    }
}

fn check_block(ens: &Ensemble, block: &ObservationBlock, taper: &dyn Taper) -> Result<()> {
    if taper.dim() != ens.dim() {
        return Err(Error::Shape(format!(
            "taper has dimension {}, ensemble {}",
            taper.dim(),
            ens.dim()
        )));
    }
    if block.obs.is_empty() || block.u.is_empty() {
        return Err(Error::InvalidBlock(format!("segment {} has no observations", block.segment)));
    }
    Ok(())
}

fn check_fixed_gamma(g: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::param("gamma", format!("must lie in [0, 1], got {g}")));
    }
    Ok(())
}

fn finish(ens: &Ensemble, upd: FootprintUpdate) -> Result<BlockUpdate> {
    let mut xa = ens.members().clone();
    apply(&mut xa, &upd);
    Ok(BlockUpdate {
        ensemble: Ensemble::new(xa, EnsembleKind::Analysis)?,
        gamma: upd.gamma,
        ess: upd.ess,
        indices: upd.indices,
        pinv_truncated: upd.pinv_truncated,
    })
}

/// Assimilates a single block into the full ensemble; `w` columns are left
/// untouched.
pub fn block_assimilate_one<R: Rng + ?Sized>(
    ens: &Ensemble,
    block: &ObservationBlock,
    taper: &dyn Taper,
    rule: GammaRule,
    rng: &mut R,
) -> Result<BlockUpdate> {
    check_block(ens, block, taper)?;
    if let GammaRule::Fixed(g) = rule {
        check_fixed_gamma(g)?;
    }
    let upd = assimilate_footprint(ens.members(), block, taper, rule, rng)?;
    finish(ens, upd)
}

/// As [`block_assimilate_one`] with fixed `gamma`, explicit noise and,
/// optionally, explicit resampling indices.
pub fn block_assimilate_with(
    ens: &Ensemble,
    block: &ObservationBlock,
    taper: &dyn Taper,
    gamma: f64,
    noise: &EnsembleNoise,
    indices: Option<&ResampleIndices>,
) -> Result<BlockUpdate> {
    check_block(ens, block, taper)?;
    check_fixed_gamma(gamma)?;
    let (k, m) = (ens.size(), block.obs.len());
    if noise.eta.shape() != (k, m) || noise.xi.shape() != (k, m) {
        return Err(Error::Shape(format!("noise must be {k}x{m}")));
    }
    if let Some(idx) = indices {
        if idx.len() != k {
            return Err(Error::Shape(format!("{} indices for {k} members", idx.len())));
        }
    }
    let upd = footprint_with(ens.members(), block, taper, gamma, noise, indices)?;
    finish(ens, upd)
}

/// Groups of block positions; blocks in one group have pairwise disjoint
/// footprints. Groups are processed in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSchedule {
    pub groups: Vec<Vec<usize>>,
}

/// Greedy first-fit colouring of the footprint-overlap graph, in block order.
pub fn schedule_blocks(blocks: &[ObservationBlock], dim: usize) -> BlockSchedule {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut occupied: Vec<Vec<bool>> = Vec::new();
    for (b, block) in blocks.iter().enumerate() {
        let fp = block.footprint();
        let slot = occupied
            .iter()
            .position(|occ| fp.iter().all(|&c| !occ[c]));
        let g = slot.unwrap_or_else(|| {
            groups.push(Vec::new());
            occupied.push(vec![false; dim]);
            groups.len() - 1
        });
        groups[g].push(b);
        for &c in &fp {
            occupied[g][c] = true;
        }
    }
    BlockSchedule { groups }
}

/// Splits the observations into blocks by grid segment of `segment_points`
/// consecutive points. Segments without observations produce no block.
pub fn segment_blocks(
    obs: &GaussObs,
    layout: &FieldLayout,
    segment_points: usize,
    taper: &dyn Taper,
) -> Result<Vec<ObservationBlock>> {
    if segment_points == 0 {
        return Err(Error::param("segment_length", "must cover at least one grid point"));
    }
    obs.check_dim(layout.dim())?;
    let n_segments = layout.geometry().n_points().div_ceil(segment_points);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_segments];
    for (row, &c) in obs.h_cols().iter().enumerate() {
        rows[layout.point(c) / segment_points].push(row);
    }
    rows.into_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(s, r)| compute_uvw(obs.subset(&r), s, taper))
        .collect()
}

/// BLOCK-LEnKPF analysis with adaptive `gamma` per block.
///
/// `segment_length` is in meters and is rounded to whole grid points. Each
/// block's randomness comes from its own child stream keyed by segment, so
/// the result does not depend on thread scheduling.
pub fn block_lenkpf_update<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &GaussObs,
    taper: &dyn Taper,
    layout: &FieldLayout,
    segment_length: f64,
    band: EssBand,
    rng: &mut R,
) -> Result<LocalOutcome> {
    if layout.dim() != ens.dim() || taper.dim() != ens.dim() {
        return Err(Error::Shape(format!(
            "layout has {} columns, taper {}, ensemble {}",
            layout.dim(),
            taper.dim(),
            ens.dim()
        )));
    }
    if !(segment_length > 0.0 && segment_length.is_finite()) {
        return Err(Error::param("segment_length", format!("must be > 0, got {segment_length}")));
    }
    let segment_points = ((segment_length / layout.geometry().dx()).round() as usize).max(1);
    let blocks = segment_blocks(obs, layout, segment_points, taper)?;
    let schedule = schedule_blocks(&blocks, ens.dim());
    let family = StreamFamily::draw(rng);

    let mut xa = ens.members().clone();
    let mut diags: Vec<(usize, f64, f64)> = Vec::with_capacity(blocks.len());
    let mut pinv_fallbacks = 0;
    for group in &schedule.groups {
        let current = &xa;
        let updates: Vec<(usize, FootprintUpdate)> = group
            .par_iter()
            .map(|&b| {
                let block = &blocks[b];
                let mut stream = family.child(block.segment as u64);
                assimilate_footprint(current, block, taper, GammaRule::Adaptive(band), &mut stream)
                    .map(|u| (block.segment, u))
            })
            .collect::<Result<_>>()?;
        for (segment, upd) in &updates {
            apply(&mut xa, upd);
            diags.push((*segment, upd.gamma, upd.ess));
            pinv_fallbacks += usize::from(upd.pinv_truncated);
        }
    }
    diags.sort_by_key(|d| d.0);
    Ok(LocalOutcome {
        ensemble: Ensemble::new(xa, EnsembleKind::Analysis)?,
        gammas: diags.iter().map(|d| d.1).collect(),
        ess: diags.iter().map(|d| d.2).collect(),
        pinv_fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use crate::rng::{seed_stream, standard_normals};
    use crate::taper::{GridTaper, TaperSpec};

    fn ring(n: usize, dx: f64, half: f64) -> (FieldLayout, GridTaper) {
        let geom = GridGeometry::new(n, dx).unwrap();
        let layout = FieldLayout::stacked(geom, 1);
        let taper = GridTaper::new(TaperSpec::new(half, geom).unwrap(), layout.clone()).unwrap();
        (layout, taper)
    }

    #[test]
    fn uvw_partition() {
        let (_, taper) = ring(20, 1.0, 1.0);
        let obs = GaussObs::new(vec![0.0, 0.0], vec![5, 6], vec![1.0, 1.0]).unwrap();
        let b = compute_uvw(obs, 0, &taper).unwrap();
        assert_eq!(b.u, vec![5, 6]);
        assert_eq!(b.v, vec![4, 7]);
        assert_eq!(b.w.len(), 16);
        assert!(compute_uvw(GaussObs::empty(), 3, &taper).is_err());
    }

    #[test]
    fn fixed_points_are_maximal() {
        let idx = ResampleIndices::new(vec![3, 3, 1, 0]).unwrap();
        let p = permute_fixed_points(&idx);
        assert_eq!(p.as_slice(), &[0, 1, 3, 3]);
        assert_eq!(p.fixed_points(), 3);
    }

    #[test]
    fn fifteen_segments_need_three_groups() {
        let (layout, taper) = ring(300, 500.0, 5000.0);
        let cols: Vec<usize> = (0..300).collect();
        let obs = GaussObs::new(vec![0.0; 300], cols, vec![1.0; 300]).unwrap();
        let blocks = segment_blocks(&obs, &layout, 20, &taper).unwrap();
        assert_eq!(blocks.len(), 15);
        let s = schedule_blocks(&blocks, 300);
        assert_eq!(
            s.groups,
            vec![
                vec![0, 3, 6, 9, 12],
                vec![1, 4, 7, 10, 13],
                vec![2, 5, 8, 11, 14]
            ]
        );
    }

    #[test]
    fn block_leaves_w_untouched() {
        let (_, taper) = ring(40, 1.0, 2.0);
        let x = standard_normals(&mut seed_stream(3, 0, 0, 0, 0), 10, 40);
        let ens = Ensemble::background(x).unwrap();
        let obs = GaussObs::new(vec![1.0, -1.0], vec![10, 12], vec![0.2, 0.2]).unwrap();
        let block = compute_uvw(obs, 0, &taper).unwrap();
        let rule = GammaRule::Adaptive(EssBand::default());
        let out = block_assimilate_one(&ens, &block, &taper, rule, &mut seed_stream(0, 0, 0, 0, 0)).unwrap();
        for &c in &block.w {
            assert_eq!(out.ensemble.members().column(c), ens.members().column(c));
        }
        assert!(out.gamma >= 0.0 && out.gamma <= 1.0);
    }

    #[test]
    fn no_observations_no_change() {
        let (layout, taper) = ring(30, 1.0, 2.0);
        let x = standard_normals(&mut seed_stream(4, 0, 0, 0, 0), 6, 30);
        let ens = Ensemble::background(x).unwrap();
        let out = block_lenkpf_update(
            &ens,
            &GaussObs::empty(),
            &taper,
            &layout,
            5.0,
            EssBand::default(),
            &mut seed_stream(0, 0, 0, 0, 0),
        )
        .unwrap();
        assert_eq!(out.ensemble.members(), ens.members());
        assert!(out.gammas.is_empty());
    }
}
