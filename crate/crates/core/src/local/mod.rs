//! Localized analyses: the per-gridpoint LEnKF, NAIVE-LEnKPF, and the
//! block-wise BLOCK-LEnKPF (in [`block`]).

pub mod block;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::ensemble::{anomalies_of, Ensemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::global::{
    choose_gamma, enkf_with_perturbations, enkpf_analyze, ess, systematic_resample, EnkpfAnalysis,
    EnsembleNoise, EssBand, ResampleIndices,
};
use crate::grid::FieldLayout;
use crate::obs::GaussObs;
use crate::rng::standard_normals;
use crate::taper::{tapered_block_cov, Taper};

pub use block::{
    block_assimilate_one, block_assimilate_with, block_lenkpf_update, compute_uvw, permute_fixed_points, schedule_blocks,
    segment_blocks, BlockSchedule, BlockUpdate, GammaRule, ObservationBlock,
};

/// Observations within `radius` meters of a grid point are used for its analysis.
#[derive(Debug, Clone)]
pub struct LocalWindowSpec {
    radius: f64,
    layout: FieldLayout,
}

impl LocalWindowSpec {
    pub fn new(radius: f64, layout: FieldLayout) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::param("radius", format!("must be >= 0, got {radius}")));
        }
        Ok(Self { radius, layout })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    /// Grid points covered by the window around `site`.
    pub fn window_points(&self, site: usize) -> Vec<usize> {
        self.layout.geometry().points_within(site, self.radius)
    }

    /// Observation rows in the window of every site.
    fn rows_by_site(&self, obs: &GaussObs) -> Vec<Vec<usize>> {
        let geom = self.layout.geometry();
        let n = geom.n_points();
        let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (row, &col) in obs.h_cols().iter().enumerate() {
            by_point[self.layout.point(col)].push(row);
        }
        (0..n)
            .map(|site| {
                let mut rows: Vec<usize> = self
                    .window_points(site)
                    .into_iter()
                    .flat_map(|p| by_point[p].iter().copied())
                    .collect();
                rows.sort_unstable();
                rows
            })
            .collect()
    }
}

/// Per-site (or per-block) diagnostics of a localized analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub ensemble: Ensemble,
    /// One entry per analysed site or block.
    pub gammas: Vec<f64>,
    pub ess: Vec<f64>,
    /// Blocks whose `P_uu` needed a truncated generalized inverse.
    pub pinv_fallbacks: usize,
}

/// The small state and observation set a single site works with: the site's
/// own columns followed by every other column observed inside its window.
struct LocalProblem {
    ens: Ensemble,
    obs: GaussObs,
    p: DMatrix<f64>,
    noise_rows: Vec<usize>,
    n_site_cols: usize,
}

impl LocalProblem {
    fn build(
        members: &DMatrix<f64>,
        site_cols: &[usize],
        obs: &GaussObs,
        rows: Vec<usize>,
        taper: &dyn Taper,
    ) -> Result<Self> {
        let mut cols = site_cols.to_vec();
        for &r in &rows {
            let c = obs.h_cols()[r];
            if !cols.contains(&c) {
                cols.push(c);
            }
        }
        let x = members.select_columns(&cols);
        let anom = anomalies_of(&x);
        let p = tapered_block_cov(&anom, &cols, taper);
        let local_obs = obs
            .subset(&rows)
            .remap_columns(|c| cols.iter().position(|&l| l == c).expect("observed column is local"));
        Ok(Self {
            ens: Ensemble::background(x)?,
            obs: local_obs,
            p,
            noise_rows: rows,
            n_site_cols: site_cols.len(),
        })
    }

    fn site_columns(&self) -> Vec<usize> {
        (0..self.n_site_cols).collect()
    }
}

fn check_layout(ens: &Ensemble, obs: &GaussObs, layout: &FieldLayout, taper: &dyn Taper) -> Result<()> {
    if layout.dim() != ens.dim() || taper.dim() != ens.dim() {
        return Err(Error::Shape(format!(
            "layout has {} columns, taper {}, ensemble {}",
            layout.dim(),
            taper.dim(),
            ens.dim()
        )));
    }
    obs.check_dim(ens.dim())
}

/// Local EnKF: every grid point runs its own stochastic EnKF with the
/// observations in its window and a tapered covariance. The perturbed
/// observations are drawn once and shared by all points.
pub fn lenkf_update<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &GaussObs,
    window: &LocalWindowSpec,
    taper: &dyn Taper,
    rng: &mut R,
) -> Result<Ensemble> {
    let layout = window.layout();
    check_layout(ens, obs, layout, taper)?;
    let eta = standard_normals(rng, ens.size(), obs.len());
    let rows_by_site = window.rows_by_site(obs);
    let members = ens.members();

    let updates: Vec<Option<DMatrix<f64>>> = (0..layout.geometry().n_points())
        .into_par_iter()
        .map(|site| -> Result<Option<DMatrix<f64>>> {
            let site_cols = layout.columns_at(site);
            let rows = rows_by_site[site].clone();
            if rows.is_empty() || site_cols.is_empty() {
                return Ok(None);
            }
            let local = LocalProblem::build(members, site_cols, obs, rows, taper)?;
            let eta_local = eta.select_columns(&local.noise_rows);
            let xa = enkf_with_perturbations(&local.ens, &local.obs, &local.p, &eta_local)?;
            Ok(Some(xa.members().columns(0, local.n_site_cols).into_owned()))
        })
        .collect::<Result<_>>()?;

    let mut xa = members.clone();
    for (site, upd) in updates.into_iter().enumerate() {
        if let Some(values) = upd {
            for (j, &c) in layout.columns_at(site).iter().enumerate() {
                xa.set_column(c, &values.column(j));
            }
        }
    }
    Ensemble::new(xa, EnsembleKind::Analysis)
}

/// Rearranges `current` so that it agrees with `previous` at as many
/// positions as possible; leftover copies fill the free positions in
/// ascending order.
pub fn reorder_to_match(current: &ResampleIndices, previous: &[usize]) -> ResampleIndices {
    let k = current.len();
    let mut counts = current.counts();
    let mut out: Vec<Option<usize>> = vec![None; k];
    for (pos, &want) in previous.iter().enumerate() {
        if counts[want] > 0 {
            out[pos] = Some(want);
            counts[want] -= 1;
        }
    }
    let mut leftovers = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n));
    let idx = out
        .into_iter()
        .map(|slot| slot.unwrap_or_else(|| leftovers.next().expect("counts add up to k")))
        .collect();
    ResampleIndices::new(idx).expect("indices stay in range")
}

/// What a single NAIVE site produces before the index sweep.
enum SiteResult {
    Untouched,
    Enkf(DMatrix<f64>),
    Mixture {
        analysis: EnkpfAnalysis,
        indices: ResampleIndices,
    },
}

/// NAIVE-LEnKPF: an independent EnKPF (with its own adaptive `gamma`) at
/// every grid point, using the observations in the window. Perturbations
/// and the resampling uniform are shared by all points, and the resampling
/// indices are reordered in a left-to-right sweep so that neighbouring
/// points pick the same particles wherever their weights allow.
pub fn naive_lenkpf_update<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &GaussObs,
    window: &LocalWindowSpec,
    taper: &dyn Taper,
    band: EssBand,
    rng: &mut R,
) -> Result<LocalOutcome> {
    let layout = window.layout();
    check_layout(ens, obs, layout, taper)?;
    let k = ens.size();
    let noise = EnsembleNoise::draw(rng, k, obs.len());
    let rows_by_site = window.rows_by_site(obs);
    let members = ens.members();
    let n = layout.geometry().n_points();

    let sites: Vec<(SiteResult, Option<(f64, f64)>)> = (0..n)
        .into_par_iter()
        .map(|site| -> Result<(SiteResult, Option<(f64, f64)>)> {
            let site_cols = layout.columns_at(site);
            let rows = rows_by_site[site].clone();
            if rows.is_empty() || site_cols.is_empty() {
                return Ok((SiteResult::Untouched, None));
            }
            let local = LocalProblem::build(members, site_cols, obs, rows, taper)?;
            let local_noise = noise.select_obs(&local.noise_rows);
            let gamma = choose_gamma(&local.ens, &local.obs, &local.p, band)?;
            if gamma >= 1.0 {
                let xa = enkf_with_perturbations(&local.ens, &local.obs, &local.p, &local_noise.eta)?;
                let values = xa.members().columns(0, local.n_site_cols).into_owned();
                return Ok((SiteResult::Enkf(values), Some((gamma, k as f64))));
            }
            let analysis = enkpf_analyze(&local.ens, &local.obs, &local.p, gamma, &local_noise)?
                .restrict_columns(&local.site_columns());
            let indices = systematic_resample(&analysis.weights, noise.uniform);
            let site_ess = ess(&analysis.weights);
            Ok((SiteResult::Mixture { analysis, indices }, Some((gamma, site_ess))))
        })
        .collect::<Result<_>>()?;

    // Sequential sweep: sites that did not resample act as the identity.
    let mut xa = members.clone();
    let mut previous: Option<Vec<usize>> = None;
    let mut gammas = Vec::new();
    let mut ess_values = Vec::new();
    for (site, (result, diag)) in sites.into_iter().enumerate() {
        if let Some((g, e)) = diag {
            gammas.push(g);
            ess_values.push(e);
        }
        let site_cols = layout.columns_at(site);
        let values = match result {
            SiteResult::Untouched => {
                previous = Some((0..k).collect());
                continue;
            }
            SiteResult::Enkf(values) => {
                previous = Some((0..k).collect());
                values
            }
            SiteResult::Mixture { analysis, indices } => {
                let ordered = match &previous {
                    None => permute_fixed_points(&indices),
                    Some(prev) => reorder_to_match(&indices, prev),
                };
                let values = analysis.compose(&ordered);
                previous = Some(ordered.as_slice().to_vec());
                values
            }
        };
        for (j, &c) in site_cols.iter().enumerate() {
            xa.set_column(c, &values.column(j));
        }
    }
    Ok(LocalOutcome {
        ensemble: Ensemble::new(xa, EnsembleKind::Analysis)?,
        gammas,
        ess: ess_values,
        pinv_fallbacks: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::global::{enkf_update, MixtureWeights};
    use crate::grid::GridGeometry;
    use crate::rng::seed_stream;
    use crate::taper::{DenseTaper, GridTaper, TaperSpec};

    fn setup(n: usize, k: usize, seed: u64) -> (Ensemble, FieldLayout, GridTaper) {
        let geom = GridGeometry::new(n, 1.0).unwrap();
        let layout = FieldLayout::stacked(geom, 2);
        let taper = GridTaper::new(TaperSpec::new(2.0, geom).unwrap(), layout.clone()).unwrap();
        let mut rng = seed_stream(seed, 0, 0, 0, 0);
        let x = standard_normals(&mut rng, k, 2 * n);
        (Ensemble::background(x).unwrap(), layout, taper)
    }

    #[test]
    fn reorder_matches_brute_force() {
        fn permutations(v: &[usize]) -> Vec<Vec<usize>> {
            if v.len() <= 1 {
                return vec![v.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..v.len() {
                let mut rest = v.to_vec();
                let x = rest.remove(i);
                for mut p in permutations(&rest) {
                    p.insert(0, x);
                    out.push(p);
                }
            }
            out
        }
        let mut rng = seed_stream(42, 0, 0, 0, 0);
        for _ in 0..200 {
            let k = rng.random_range(1..=5);
            let cur: Vec<usize> = (0..k).map(|_| rng.random_range(0..k)).collect();
            let prev: Vec<usize> = (0..k).map(|_| rng.random_range(0..k)).collect();
            let best = permutations(&cur)
                .into_iter()
                .map(|p| p.iter().zip(&prev).filter(|(a, b)| a == b).count())
                .max()
                .unwrap();
            let out = reorder_to_match(&ResampleIndices::new(cur.clone()).unwrap(), &prev);
            let got = out.as_slice().iter().zip(&prev).filter(|(a, b)| a == b).count();
            assert_eq!(got, best);
            assert_eq!(out.counts(), ResampleIndices::new(cur).unwrap().counts());
        }
    }

    #[test]
    fn identical_weights_give_identical_orderings() {
        let w = MixtureWeights::new(vec![0.4, 0.1, 0.3, 0.2, 0.0]).unwrap();
        let a = permute_fixed_points(&systematic_resample(&w, 0.37));
        let b = reorder_to_match(&systematic_resample(&w, 0.37), a.as_slice());
        assert_eq!(a, b);
    }

    #[test]
    fn no_observations_means_no_change() {
        let (ens, layout, taper) = setup(30, 8, 1);
        let window = LocalWindowSpec::new(2.0, layout).unwrap();
        let obs = GaussObs::empty();
        let mut rng = seed_stream(0, 0, 0, 0, 0);
        let a = lenkf_update(&ens, &obs, &window, &taper, &mut rng).unwrap();
        assert_eq!(a.members(), ens.members());
        let b = naive_lenkpf_update(&ens, &obs, &window, &taper, EssBand::default(), &mut rng).unwrap();
        assert_eq!(b.ensemble.members(), ens.members());
    }

    #[test]
    fn lenkf_with_global_window_matches_global_enkf() {
        let (ens, layout, _) = setup(10, 12, 2);
        let window = LocalWindowSpec::new(100.0, layout).unwrap();
        let taper = DenseTaper::ones(20);
        let obs = GaussObs::new(vec![0.5, -0.2, 1.0], vec![1, 13, 7], vec![0.3, 0.5, 0.2]).unwrap();
        let p = crate::ensemble::ensemble_moments(&ens).unwrap().1;
        let global = enkf_update(&ens, &obs, &p, &mut seed_stream(9, 0, 0, 0, 0)).unwrap();
        let local = lenkf_update(&ens, &obs, &window, &taper, &mut seed_stream(9, 0, 0, 0, 0)).unwrap();
        assert!((global.members() - local.members()).abs().max() < 1e-10);
    }

    #[test]
    fn single_observation_changes_only_its_neighbourhood() {
        let (ens, layout, taper) = setup(40, 10, 3);
        let window = LocalWindowSpec::new(3.0, layout.clone()).unwrap();
        let obs = GaussObs::new(vec![0.7], vec![40 + 20], vec![0.1]).unwrap();
        let mut rng = seed_stream(1, 0, 0, 0, 0);
        let a = lenkf_update(&ens, &obs, &window, &taper, &mut rng).unwrap();
        let b = naive_lenkpf_update(&ens, &obs, &window, &taper, EssBand::default(), &mut rng)
            .unwrap()
            .ensemble;
        for col in 0..80 {
            let near = layout.distance(col, 60) <= 3.0;
            for out in [&a, &b] {
                let same = out.members().column(col) == ens.members().column(col);
                if !near {
                    assert!(same, "column {col} changed");
                }
            }
            if near && layout.distance(col, 60) <= 2.0 {
                assert!(a.members().column(col) != ens.members().column(col));
            }
        }
    }

    #[test]
    fn identical_members_keep_identity_indices() {
        let geom = GridGeometry::new(12, 1.0).unwrap();
        let layout = FieldLayout::stacked(geom, 1);
        let taper = GridTaper::new(TaperSpec::new(1.5, geom).unwrap(), layout.clone()).unwrap();
        let ens = Ensemble::background(DMatrix::from_fn(6, 12, |_, j| j as f64)).unwrap();
        let obs = GaussObs::new(vec![0.0, 3.0], vec![2, 8], vec![1.0, 1.0]).unwrap();
        let window = LocalWindowSpec::new(2.0, layout).unwrap();
        let out =
            naive_lenkpf_update(&ens, &obs, &window, &taper, EssBand::default(), &mut seed_stream(0, 0, 0, 0, 0))
                .unwrap();
        assert_eq!(out.ensemble.members(), ens.members());
        assert!(out.gammas.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn global_window_gives_the_same_weights_everywhere() {
        let (ens, layout, _) = setup(8, 15, 4);
        let taper = DenseTaper::ones(16);
        let window = LocalWindowSpec::new(100.0, layout).unwrap();
        let obs = GaussObs::new(vec![0.5, -0.2], vec![1, 9], vec![0.3, 0.5]).unwrap();
        let out =
            naive_lenkpf_update(&ens, &obs, &window, &taper, EssBand::default(), &mut seed_stream(5, 0, 0, 0, 0))
                .unwrap();
        assert_eq!(out.gammas.len(), 8);
        assert!(out.gammas.windows(2).all(|w| w[0] == w[1]));
        assert!(out.ess.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
    }
}
