//! Central finite-difference checks of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::store::{ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(err);
            if err >= self.max_relative_error {
                self.worst = Some((name.to_string(), index, analytic, numeric));
            }
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_relative_error >= self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

fn scalar(graph: &Graph, v: Var) -> f64 {
    graph.value(v).data()[0]
}

fn pick_indices(len: usize, max_per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_per_tensor {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, max_per_tensor).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Checks every trainable parameter tensor, sampling at most `max_per_tensor` entries of each.
///
/// `loss` must rebuild the full forward pass from the store it is given.
pub fn check_params<F>(
    store: &mut ParamStore,
    mut loss: F,
    step: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    store.zero_grad();
    let (graph, out) = loss(store)?;
    graph.backward(out)?.accumulate_into(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let name = store.name(id).to_string();
        let analytic = store.grad(id).to_vec();
        for i in pick_indices(analytic.len(), max_per_tensor, &mut rng) {
            let orig = store.value(id).data()[i];
            store.value_mut(id)[i] = orig + step;
            let (g, v) = loss(store)?;
            let plus = scalar(&g, v);
            store.value_mut(id)[i] = orig - step;
            let (g, v) = loss(store)?;
            let minus = scalar(&g, v);
            store.value_mut(id)[i] = orig;
            report.record(&name, i, analytic[i], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to its tensor input.
pub fn check_input<F>(input: &Tensor, f: F, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let x = graph.input(input.clone());
    let out = f(&mut graph, x)?;
    let grads = graph.backward(out)?;
    let analytic = grads
        .wrt(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; input.len()]);
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t);
        let out = f(&mut g, x)?;
        Ok(scalar(&g, out))
    };
    let mut report = GradReport::default();
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        report.record("input", i, analytic[i], numeric);
    }
    Ok(report)
}
