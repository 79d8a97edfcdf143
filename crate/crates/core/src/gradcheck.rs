//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Relative tolerance on each gradient entry.
    pub rtol: f64,
    /// Entries whose magnitudes are both below this are compared absolutely.
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-5, rtol: 1e-4, atol: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
    /// [`Graph::kink_margin`] at the unperturbed point.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

impl GradCheck {
    /// Checks gradients of the scalar built by `build` with respect to every
    /// entry of every parameter in `store` and every tensor in `inputs`.
    pub fn run<F>(&self, store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>], build: F) -> GradCheckReport
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Var,
    {
        let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let loss = build(&mut g, store, &vars);
            g.scalar(loss)
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let loss = build(&mut g, store, &vars);
        let grads = g.backward(loss);

        let mut report = GradCheckReport { kink_margin: g.kink_margin(), ..GradCheckReport::default() };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
            for e in 0..analytic.numel() {
                let orig = store.get(id).data()[e];
                store.get_mut(id).data_mut()[e] = orig + self.eps;
                let fp = eval(store, inputs);
                store.get_mut(id).data_mut()[e] = orig - self.eps;
                let fm = eval(store, inputs);
                store.get_mut(id).data_mut()[e] = orig;
                self.compare(&mut report, &name, e, analytic.data()[e], (fp - fm) / (2.0 * self.eps));
            }
        }
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.leaf(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            for e in 0..analytic.numel() {
                let orig = inputs[i].data()[e];
                inputs[i].data_mut()[e] = orig + self.eps;
                let fp = eval(store, inputs);
                inputs[i].data_mut()[e] = orig - self.eps;
                let fm = eval(store, inputs);
                inputs[i].data_mut()[e] = orig;
                self.compare(&mut report, &format!("input{i}"), e, analytic.data()[e], (fp - fm) / (2.0 * self.eps));
            }
        }
        report
    }

    fn compare(&self, report: &mut GradCheckReport, name: &str, e: usize, analytic: f64, numeric: f64) {
        report.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let err = (analytic - numeric).abs();
        if scale > self.atol {
            report.max_rel_err = report.max_rel_err.max(err / scale);
        }
        if !(err <= self.rtol * scale + self.atol) {
            report.failures.push(format!("{name}[{e}]: analytic {analytic:.6e} numeric {numeric:.6e}"));
        }
    }
}
