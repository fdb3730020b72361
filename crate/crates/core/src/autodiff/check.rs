//! Finite-difference verification of backward rules.
//!
//! Analytic gradients from one backward sweep are compared entry-by-entry
//! against central differences of the forward function. Entries where a
//! two-scale difference disagrees with itself (a ReLU or clamp boundary
//! inside the probe window) are skipped and counted rather than reported as
//! spurious failures.

use super::tensor::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    /// Entries probed per tensor; 0 checks every entry.
    pub samples_per_tensor: usize,
    /// Seed for the deterministic entry selection.
    pub seed: u64,
    /// Relative disagreement between the h and h/2 estimates above which an
    /// entry is treated as kink-adjacent and skipped.
    pub kink_tol: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            samples_per_tensor: 0,
            seed: 0,
            kink_tol: 1e-5,
        }
    }
}

#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub kink_skipped: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub kink_skipped: usize,
    /// Locations where the function value was non-finite at a probe point.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty() && self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grad check: max_rel_err={:.3e} tol={:.1e} checked={} kink_skipped={} -> {}",
            self.max_rel_err,
            self.tol,
            self.checked,
            self.kink_skipped,
            if self.pass() { "PASS" } else { "FAIL" }
        )?;
        for t in &self.tensors {
            if t.max_rel_err > self.tol {
                writeln!(
                    f,
                    "  {}: max_rel_err={:.3e} at entry {} ({} checked)",
                    t.name, t.max_rel_err, t.worst_entry, t.checked
                )?;
            }
        }
        for fail in &self.failures {
            writeln!(f, "  non-finite: {fail}")?;
        }
        Ok(())
    }
}

/// Checks every entry of every parameter.
pub fn grad_check(
    f: &mut dyn FnMut() -> Result<Tensor>,
    params: &[(String, Tensor)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_sampled(f, params, h, tol, GradCheckOpts::default())
}

/// Checks a deterministic sample of entries per tensor.
pub fn grad_check_sampled(
    f: &mut dyn FnMut() -> Result<Tensor>,
    params: &[(String, Tensor)],
    h: f64,
    tol: f64,
    opts: GradCheckOpts,
) -> Result<GradCheckReport> {
    for (name, p) in params {
        if !p.requires_grad() {
            return Err(Error::Config(format!(
                "grad_check: parameter {name} does not track gradients"
            )));
        }
        p.zero_grad();
    }
    let loss = f()?;
    if loss.numel() != 1 {
        return Err(Error::Config("grad_check: function must return a scalar".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport {
        tensors: Vec::with_capacity(params.len()),
        max_rel_err: 0.0,
        tol,
        checked: 0,
        kink_skipped: 0,
        failures: Vec::new(),
    };

    fn eval_at(
        f: &mut dyn FnMut() -> Result<Tensor>,
        p: &Tensor,
        idx: usize,
        v: f64,
    ) -> Result<f64> {
        let orig = p.data()[idx];
        p.data_mut()[idx] = v;
        let out = no_grad(|| f());
        p.data_mut()[idx] = orig;
        Ok(out?.item())
    }

    for (ti, (name, p)) in params.iter().enumerate() {
        let numel = p.numel();
        let indices: Vec<usize> = if opts.samples_per_tensor == 0 || opts.samples_per_tensor >= numel
        {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            let mut r = rng::substream(opts.seed, ti as u64);
            rng::shuffle(&mut r, &mut all);
            all.truncate(opts.samples_per_tensor);
            all
        };
        let mut tc = TensorCheck {
            name: name.clone(),
            checked: 0,
            kink_skipped: 0,
            max_rel_err: 0.0,
            worst_entry: 0,
        };
        for idx in indices {
            let theta = p.data()[idx];
            let fp = eval_at(f, p, idx, theta + h)?;
            let fm = eval_at(f, p, idx, theta - h)?;
            let fp2 = eval_at(f, p, idx, theta + h / 2.0)?;
            let fm2 = eval_at(f, p, idx, theta - h / 2.0)?;
            if !(fp.is_finite() && fm.is_finite() && fp2.is_finite() && fm2.is_finite()) {
                report.failures.push(format!("{name}[{idx}]"));
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let fd2 = (fp2 - fm2) / h;
            let scale = fd.abs().max(fd2.abs()).max(1.0);
            if (fd - fd2).abs() > opts.kink_tol * scale {
                tc.kink_skipped += 1;
                continue;
            }
            let a = analytic[ti][idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > tc.max_rel_err {
                tc.max_rel_err = rel;
                tc.worst_entry = idx;
            }
            tc.checked += 1;
        }
        report.checked += tc.checked;
        report.kink_skipped += tc.kink_skipped;
        if tc.max_rel_err > report.max_rel_err {
            report.max_rel_err = tc.max_rel_err;
        }
        report.tensors.push(tc);
    }
    Ok(report)
}
