//! Central-difference verification of autodiff gradients.

use super::error::{NumericsError, Result};
use super::graph::{Graph, Var};
use super::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Relative errors use `max(|analytic|, |numeric|, abs_floor)` as denominator.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Largest elementwise relative error.
    pub max_rel_error: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)` over the whole
    /// tensor in the Euclidean norm. Unlike the elementwise error it is not dominated
    /// by the `eps^2` truncation of elements whose gradient is nearly zero.
    pub norm_rel_error: f64,
    pub checked: usize,
    /// Frozen parameters are reported with zero gradient and excluded from pass/fail.
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.frozen || p.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.frozen && p.max_rel_error > self.tol)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Pass/fail on [`ParamCheck::norm_rel_error`] instead of the elementwise error.
    pub fn passed_norm(&self) -> bool {
        self.norm_failures().is_empty()
    }

    pub fn norm_failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.frozen && p.norm_rel_error > self.tol)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn worst_norm(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .max_by(|a, b| a.norm_rel_error.total_cmp(&b.norm_rel_error))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let g = Graph::inference();
    let loss = f(&g, store)?;
    Ok(g.value(loss).item())
}

impl GradCheck {
    /// Compares autodiff gradients of the scalar `f` against central differences
    /// for every parameter in `store`. Parameter values are restored afterwards.
    pub fn run<F>(&self, store: &mut ParamStore<f64>, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let first = eval(store, &f)?;
        let second = eval(store, &f)?;
        if first.to_bits() != second.to_bits() {
            return Err(NumericsError::NonDeterministic { first, second });
        }

        let g = Graph::new();
        let loss = f(&g, store)?;
        let grads = g.gradients(loss)?;
        store.zero_grad();
        store.accumulate(&grads);

        let names: Vec<String> = store.iter().map(|p| p.name().to_string()).collect();
        let mut params = Vec::with_capacity(names.len());
        for name in names {
            let id = store.id(&name).expect("name from store");
            if !store.get(id).requires_grad() {
                params.push(ParamCheck {
                    name,
                    max_rel_error: 0.0,
                    norm_rel_error: 0.0,
                    checked: 0,
                    frozen: true,
                });
                continue;
            }
            let n = store.get(id).value().len();
            let picks: Vec<usize> = match self.max_elements {
                Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
                _ => (0..n).collect(),
            };
            let mut worst = 0.0f64;
            let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &picks {
                let orig = store.get(id).value().data()[i];
                store.get_mut(id).value_mut().data_mut()[i] = orig + self.eps;
                let plus = eval(store, &f)?;
                store.get_mut(id).value_mut().data_mut()[i] = orig - self.eps;
                let minus = eval(store, &f)?;
                store.get_mut(id).value_mut().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let analytic = store.get(id).grad().data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(self.abs_floor);
                worst = worst.max((analytic - numeric).abs() / denom);
                diff2 += (analytic - numeric).powi(2);
                a2 += analytic * analytic;
                n2 += numeric * numeric;
            }
            let norm_denom = a2.sqrt().max(n2.sqrt()).max(self.abs_floor);
            params.push(ParamCheck {
                name,
                max_rel_error: worst,
                norm_rel_error: diff2.sqrt() / norm_denom,
                checked: picks.len(),
                frozen: false,
            });
        }
        Ok(GradCheckReport {
            params,
            tol: self.tol,
        })
    }
}

/// [`GradCheck::run`] with the given `eps` and `tol`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    GradCheck {
        eps,
        tol,
        ..GradCheck::default()
    }
    .run(store, f)
}
