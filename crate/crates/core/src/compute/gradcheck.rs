//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// A deterministic scalar function of a parameter store.
pub trait Objective {
    fn loss(&mut self, store: &ParamStore) -> Result<f64>;

    /// Loss together with its tape gradients.
    fn gradient(&mut self, store: &ParamStore) -> Result<(f64, Gradients)>;
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub epsilon: f64,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is zero are judged on absolute error.
    pub denominator_floor: f64,
    /// How often a step straddling a kink is shrunk tenfold and retried.
    pub kink_retries: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_param: Some(24),
            seed: 0,
            denominator_floor: 1e-5,
            kink_retries: 2,
        }
    }
}

impl CheckOptions {
    pub fn exhaustive() -> Self {
        Self {
            max_coords_per_param: None,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// Times the step was shrunk because it straddled a kink.
    pub kink_retries: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    /// Parameters whose worst error reaches `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&ParamCheck> {
        self.per_param
            .iter()
            .filter(|p| !(p.max_relative_error < tolerance))
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients against central differences for every trainable
/// parameter. The store is restored exactly before returning.
pub fn finite_difference_check<O: Objective + ?Sized>(
    store: &mut ParamStore,
    objective: &mut O,
    options: &CheckOptions,
) -> Result<GradCheckReport> {
    let first = objective.loss(store)?;
    let second = objective.loss(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let (_, analytic) = objective.gradient(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();

    let mut report = GradCheckReport::default();
    for id in ids {
        let size = store.value(id).len();
        let coords: Vec<usize> = match options.max_coords_per_param {
            Some(limit) if limit < size => sample(&mut rng, size, limit).into_vec(),
            _ => (0..size).collect(),
        };
        let mut worst = 0.0f64;
        let mut kinks = 0usize;
        for &c in &coords {
            let original = store.value(id).data()[c];
            let mut eps = options.epsilon;
            let mut numeric = 0.0;
            for attempt in 0..=options.kink_retries {
                store.get_mut(id).value.data_mut()[c] = original + eps;
                let plus = objective.loss(store);
                store.get_mut(id).value.data_mut()[c] = original - eps;
                let minus = objective.loss(store);
                store.get_mut(id).value.data_mut()[c] = original;
                let (plus, minus) = (plus?, minus?);
                numeric = (plus - minus) / (2.0 * eps);
                // one-sided slopes disagree sharply only when a ReLU kink
                // lies inside the step
                let right = (plus - first) / eps;
                let left = (first - minus) / eps;
                let scale = right.abs().max(left.abs()).max(options.denominator_floor);
                let roundoff = 64.0 * f64::EPSILON * first.abs().max(1.0) / eps;
                if (right - left).abs() <= 1e-5 * scale + roundoff || attempt == options.kink_retries {
                    break;
                }
                kinks += 1;
                eps /= 10.0;
            }
            let err = relative_error(
                analytic.coordinate(id, c),
                numeric,
                options.denominator_floor,
            );
            worst = worst.max(err);
        }
        report.per_param.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_relative_error: worst,
            coordinates_checked: coords.len(),
            kink_retries: kinks,
        });
    }
    Ok(report)
}
