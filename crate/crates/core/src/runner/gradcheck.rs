//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::generation::TrainSample;
use crate::params::{GradStore, ParamStore};
use crate::unet::UNet;

use super::train::{loss_and_grads, loss_graph};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor, so entries with vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckedEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub entries: Vec<CheckedEntry>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Picks `count` distinct scalar positions across all parameters.
pub fn sample_positions(params: &ParamStore, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let total = params.num_scalars();
    if count > total {
        return Err(Error::PoolTooSmall { requested: count, available: total });
    }
    let sizes: Vec<usize> = params.iter().map(|(_, m)| m.data.len()).collect();
    let mut flat = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, count).into_vec();
    flat.sort_unstable();
    Ok(flat
        .into_iter()
        .map(|mut f| {
            let mut p = 0;
            while f >= sizes[p] {
                f -= sizes[p];
                p += 1;
            }
            (p, f)
        })
        .collect())
}

/// Compares `analytic` against central differences of `loss` at the given positions.
pub fn check_positions<F>(params: &ParamStore, analytic: &GradStore, positions: &[(usize, usize)], mut loss: F) -> Result<GradCheck>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<_> = params.ids().collect();
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(positions.len());
    for &(p, i) in positions {
        let id = ids[p];
        let orig = work.get(id).data[i];
        work.get_mut(id).data[i] = orig + FD_STEP;
        let up = loss(&work)?;
        work.get_mut(id).data[i] = orig - FD_STEP;
        let down = loss(&work)?;
        work.get_mut(id).data[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(id).data[i];
        entries.push(CheckedEntry {
            param: params.name(id).to_string(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheck { entries })
}

/// Zeroes the analytic gradient of the checked entry with the largest magnitude.
pub fn corrupt_largest(grads: &mut GradStore, params: &ParamStore, positions: &[(usize, usize)]) {
    let ids: Vec<_> = params.ids().collect();
    if let Some(&(p, i)) = positions
        .iter()
        .max_by(|a, b| grads.get(ids[a.0]).data[a.1].abs().total_cmp(&grads.get(ids[b.0]).data[b.1].abs()))
    {
        grads.get_mut(ids[p]).data[i] = 0.0;
    }
}

/// Finite-difference check of the training loss of `sample` through the whole network.
pub fn grad_check(model: &UNet, sample: &TrainSample, num_params: usize, seed: u64, corrupt: bool) -> Result<GradCheck> {
    let (_, mut grads) = loss_and_grads(model, sample)?;
    let positions = sample_positions(&model.params, num_params, seed)?;
    if corrupt {
        corrupt_largest(&mut grads, &model.params, &positions);
    }
    let mut probe = UNet { cfg: model.cfg.clone(), params: model.params.clone() };
    check_positions(&model.params, &grads, &positions, |ps| {
        probe.params.clone_from(ps);
        let mut g = Graph::new();
        let l = loss_graph(&probe, &mut g, sample)?;
        Ok(g.value(l).data[0])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn linear() -> (ParamStore, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        ps.add("w", Matrix::randn(5, 3, 1.0, &mut rng));
        ps.add("b", Matrix::randn(1, 3, 1.0, &mut rng));
        (ps, Matrix::randn(7, 5, 1.0, &mut rng), Matrix::randn(7, 3, 1.0, &mut rng))
    }

    fn linear_loss(ps: &ParamStore, x: &Matrix, y: &Matrix) -> (f64, GradStore) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ids: Vec<_> = ps.ids().collect();
        let w = g.param(ps, ids[0]);
        let b = g.param(ps, ids[1]);
        let h = g.matmul(xv, w);
        let out = g.add_row(h, b);
        let l = g.mse(out, y.clone());
        let grads = g.backward(l);
        (g.value(l).data[0], g.param_grads(&grads, ps))
    }

    #[test]
    fn quadratic_model_is_exact() {
        let (ps, x, y) = linear();
        let (_, grads) = linear_loss(&ps, &x, &y);
        let pos = sample_positions(&ps, 18, 0).unwrap();
        let report = check_positions(&ps, &grads, &pos, |p| Ok(linear_loss(p, &x, &y).0)).unwrap();
        assert_eq!(report.entries.len(), 18);
        assert!(report.max_rel_error() < 1e-8, "{}", report.max_rel_error());
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (ps, x, y) = linear();
        let (_, mut grads) = linear_loss(&ps, &x, &y);
        let pos = sample_positions(&ps, 6, 1).unwrap();
        corrupt_largest(&mut grads, &ps, &pos);
        let report = check_positions(&ps, &grads, &pos, |p| Ok(linear_loss(p, &x, &y).0)).unwrap();
        assert!(report.max_rel_error() > 1e-2);
    }

    #[test]
    fn positions_are_distinct_and_in_range() {
        let (ps, _, _) = linear();
        let pos = sample_positions(&ps, 18, 9).unwrap();
        let mut seen = pos.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 18);
        assert!(pos.iter().all(|&(p, i)| (p == 0 && i < 15) || (p == 1 && i < 3)));
        assert!(matches!(sample_positions(&ps, 19, 0), Err(Error::PoolTooSmall { .. })));
    }

    #[test]
    fn relative_error_uses_a_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-2).abs() < 1e-12);
    }
}
