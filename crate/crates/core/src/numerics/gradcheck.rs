/// Central finite difference of `f` at `x`, using the step actually
/// representable in floating point.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    let (hi, lo) = (x + step, x - step);
    (f(hi) - f(lo)) / (hi - lo)
}

/// Five-point stencil `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
/// Truncation error is O(h^4) instead of O(h^2), so a larger step keeps
/// round-off small without losing accuracy.
pub fn five_point_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    let h = (x + step) - x;
    let near = f(x + h) - f(x - h);
    let far = f(x + 2.0 * h) - f(x - 2.0 * h);
    (8.0 * near - far) / (12.0 * h)
}

/// One-sided five-point stencil towards `x + direction * step`
/// (`direction` is 1 or -1), also O(h^4). Used next to a kink.
pub fn one_sided_difference(
    mut f: impl FnMut(f64) -> f64,
    x: f64,
    step: f64,
    direction: f64,
) -> f64 {
    let h = (x + direction * step) - x;
    let coeffs = [-25.0, 48.0, -36.0, 16.0, -3.0];
    let sum: f64 = coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| c * f(x + k as f64 * h))
        .sum();
    sum / (12.0 * h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    Central,
    FivePoint,
}

/// Anything with a flat parameter vector and a scalar loss over some input.
pub trait Differentiable {
    type Input;

    fn parameter_count(&self) -> usize;
    fn parameter(&self, index: usize) -> f64;
    fn set_parameter(&mut self, index: usize, value: f64);
    fn loss(&self, input: &Self::Input) -> f64;
    /// Loss and the analytic gradient, one entry per parameter.
    fn loss_and_gradient(&self, input: &Self::Input) -> (f64, Vec<f64>);
    /// Loss plus a label of the smooth piece it was evaluated on, for
    /// piecewise-smooth losses (e.g. the signs of every ELU input). Finite
    /// differences across a piece boundary are retried with smaller steps.
    fn loss_and_region(&self, input: &Self::Input) -> (f64, Option<Vec<bool>>) {
        (self.loss(input), None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to round-off are compared absolutely.
    pub floor: f64,
    pub stencil: Stencil,
    /// How often the step may be halved when the stencil crosses a
    /// region boundary.
    pub max_refinements: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-4,
            stencil: Stencil::FivePoint,
            max_refinements: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_parameter: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Parameters whose stencil had to go one-sided or shrink to stay within
    /// one smooth region.
    pub refined: usize,
    /// Parameters whose stencil still crossed a boundary at the smallest step.
    pub unresolved: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Compares every parameter's analytic gradient with finite differences.
pub fn gradient_check<D: Differentiable>(
    model: &mut D,
    input: &D::Input,
    tolerance: f64,
) -> GradCheckReport {
    gradient_check_with(model, input, tolerance, GradCheckOptions::default())
}

pub fn gradient_check_with<D: Differentiable>(
    model: &mut D,
    input: &D::Input,
    tolerance: f64,
    options: GradCheckOptions,
) -> GradCheckReport {
    let (_, analytic) = model.loss_and_gradient(input);
    let (_, region) = model.loss_and_region(input);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_parameter: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance,
        passed: true,
        refined: 0,
        unresolved: 0,
    };
    for (i, &a) in analytic.iter().enumerate().take(model.parameter_count()) {
        let original = model.parameter(i);
        let mut step = options.step;
        let mut refinements = 0;
        let numeric = 'search: loop {
            // symmetric first; next to a kink, one side may still be smooth
            let sides: &[Option<f64>] = match options.stencil {
                Stencil::Central => &[None],
                Stencil::FivePoint => &[None, Some(1.0), Some(-1.0)],
            };
            let mut last = f64::NAN;
            for side in sides {
                let mut crossed = false;
                let loss_at = |v| {
                    model.set_parameter(i, v);
                    let (l, r) = model.loss_and_region(input);
                    crossed |= r != region;
                    l
                };
                last = match (options.stencil, side) {
                    (Stencil::Central, _) => central_difference(loss_at, original, step),
                    (Stencil::FivePoint, None) => five_point_difference(loss_at, original, step),
                    (Stencil::FivePoint, Some(d)) => {
                        one_sided_difference(loss_at, original, step, *d)
                    }
                };
                if !crossed {
                    if side.is_some() {
                        refinements = refinements.max(1);
                    }
                    break 'search last;
                }
            }
            if refinements == options.max_refinements {
                report.unresolved += 1;
                break last;
            }
            refinements += 1;
            step /= 2.0;
        };
        if refinements > 0 {
            report.refined += 1;
        }
        model.set_parameter(i, original);
        let err = relative_error(a, numeric, options.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_parameter.is_none() || err.is_nan() {
            report.max_rel_error = err;
            report.worst_parameter = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    report
}
