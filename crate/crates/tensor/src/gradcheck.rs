//! Central finite differences against reverse-mode gradients, in `f64`.

use rand::{Rng, SeedableRng};

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Relative error with a floor so that two near-zero gradients compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Evaluates `f` (which must return a single-element var) at `inputs`,
/// differentiates it, and compares `probes` randomly chosen partial
/// derivatives against central differences with step `h`.
pub fn check<F>(inputs: &[Tensor<f64>], probes: usize, seed: u64, h: f64, f: F) -> GradCheck
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&g, &vars);
    let mut grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut rng = probe_rng(seed);
    let mut results = Vec::with_capacity(probes);
    for _ in 0..probes {
        let input = rng.gen_range(0..inputs.len());
        let index = rng.gen_range(0..inputs[input].len());
        let mut xs = inputs.to_vec();
        let x0 = xs[input].data()[index];
        let step = h * x0.abs().max(1.0);
        xs[input].data_mut()[index] = x0 + step;
        let fp = eval(&xs);
        xs[input].data_mut()[index] = x0 - step;
        let fm = eval(&xs);
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[input].data()[index];
        results.push(Probe { input, index, analytic: a, numeric, rel_err: rel_err(a, numeric) });
    }
    GradCheck { probes: results }
}

/// Like [`check`], but also probes the entries of a parameter store the
/// function reads through a [`Bound`]. Probe `input` indices count the plain
/// inputs first, then the store's parameters in name order.
pub fn check_with_params<F>(
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    probes: usize,
    seed: u64,
    h: f64,
    f: F,
) -> GradCheck
where
    F: for<'g, 's> Fn(&Bound<'g, 's, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let eval = |xs: &[Tensor<f64>], s: &ParamStore<f64>| -> f64 {
        let g = Graph::new();
        let p = Bound::new(&g, s, false);
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&p, &vars).item()
    };
    let g = Graph::new();
    let p = Bound::new(&g, store, true);
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&p, &vars);
    let mut grads = g.backward(out);
    let mut analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    let mut by_name = p.grads(&mut grads);
    for n in &names {
        let shape = store.get(n).expect("listed name").shape().to_vec();
        analytic.push(by_name.remove(n).unwrap_or_else(|| Tensor::zeros(&shape)));
    }

    let mut rng = probe_rng(seed);
    let mut results = Vec::with_capacity(probes);
    for _ in 0..probes {
        let input = rng.gen_range(0..analytic.len());
        let index = rng.gen_range(0..analytic[input].len());
        let mut xs = inputs.to_vec();
        let mut s = store.clone();
        let slot: &mut f64 = if input < inputs.len() {
            &mut xs[input].data_mut()[index]
        } else {
            &mut s.get_mut(&names[input - inputs.len()]).expect("listed name").data_mut()[index]
        };
        let x0 = *slot;
        let step = h * x0.abs().max(1.0);
        *slot = x0 + step;
        let fp = eval(&xs, &s);
        let slot: &mut f64 = if input < inputs.len() {
            &mut xs[input].data_mut()[index]
        } else {
            &mut s.get_mut(&names[input - inputs.len()]).expect("listed name").data_mut()[index]
        };
        *slot = x0 - step;
        let fm = eval(&xs, &s);
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[input].data()[index];
        results.push(Probe { input, index, analytic: a, numeric, rel_err: rel_err(a, numeric) });
    }
    GradCheck { probes: results }
}

fn probe_rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}
