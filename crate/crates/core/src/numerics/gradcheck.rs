//! Central finite-difference gradient checks.

use super::{Result, RngState, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Gradients below this magnitude are compared against it instead of
    /// their own size, so near-zero entries do not amplify rounding noise.
    pub abs_floor: f64,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_coords: usize,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-4, tolerance: 1e-3, abs_floor: 1e-6, max_coords: 64, seed: 0 }
    }
}

/// Per-input outcome.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate of the worst error: (index, analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    /// (input, coordinate) pairs where the one-sided slopes disagree, i.e.
    /// the sample point sits on a kink and the check is not meaningful.
    pub kinks: Vec<(usize, usize)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn differentiable(&self) -> bool {
        self.kinks.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.differentiable() && self.max_rel_err() <= self.tolerance
    }
}

/// Relative error with the denominator floored at `abs_floor`.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Compares the analytic gradient of the scalar `f(inputs)` against central
/// differences for each input.
///
/// `f` must be a pure function of the input values.
pub fn gradcheck<F>(f: F, inputs: &[(String, Tensor<f64>)], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.detach_param()).collect();
    let loss = f(&leaves)?;
    let f0 = loss.item()?;
    loss.backward()?;
    let mut rng = RngState::new(opts.seed);
    let mut report = GradcheckReport { tolerance: opts.tolerance, ..Default::default() };
    let h = opts.step;
    for (ii, (name, _)) in inputs.iter().enumerate() {
        let analytic = leaves[ii].grad().unwrap_or_else(|| vec![0.0; leaves[ii].numel()]);
        let n = leaves[ii].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > opts.max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(opts.max_coords);
            coords.sort_unstable();
        }
        let mut rep = InputReport { name: name.clone(), checked: 0, max_rel_err: 0.0, worst: None };
        for &c in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut args = leaves.iter().map(|t| t.detach()).collect::<Vec<_>>();
                let mut v = args[ii].to_vec();
                v[c] += delta;
                args[ii] = Tensor::new(v, leaves[ii].shape())?;
                f(&args)?.item()
            };
            let (fp, fm) = (eval(h)?, eval(-h)?);
            let numeric = (fp - fm) / (2.0 * h);
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            let slope = fwd.abs().max(bwd.abs());
            if (fwd - bwd).abs() > 0.1 * slope.max(1e-3) && (fwd - bwd).abs() > 1e3 * h * slope.max(1.0) {
                report.kinks.push((ii, c));
                continue;
            }
            let e = rel_err(analytic[c], numeric, opts.abs_floor);
            rep.checked += 1;
            if e >= rep.max_rel_err {
                rep.max_rel_err = e;
                rep.worst = Some((c, analytic[c], numeric));
            }
        }
        report.inputs.push(rep);
    }
    Ok(report)
}

/// Runs [`gradcheck`] on inputs drawn by `sample`, redrawing (up to
/// `attempts` times) while the sample point lands on a kink.
pub fn gradcheck_resampled<F, S>(
    f: F,
    mut sample: S,
    rng: &mut RngState,
    attempts: usize,
    opts: &GradcheckOptions,
) -> Result<(GradcheckReport, usize)>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    S: FnMut(&mut RngState) -> Vec<(String, Tensor<f64>)>,
{
    let mut last = GradcheckReport::default();
    for attempt in 0..attempts.max(1) {
        let inputs = sample(rng);
        last = gradcheck(&f, &inputs, opts)?;
        if last.differentiable() {
            return Ok((last, attempt));
        }
    }
    Ok((last, attempts))
}
