use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamId, ParamTape, Result, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest step of the five-point stencils tried when the central
    /// estimate misses the tolerance. Small steps are limited by round-off in
    /// the loss (about `eps * |L| / step`), wide ones by ReLU kinks; a
    /// correct gradient agrees with at least one rung of the ladder.
    pub wide_step: f64,
    pub tolerance: f64,
    /// Above this many coordinates a seeded subsample is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator so that gradients that
    /// are zero up to round-off do not blow up the ratio.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            wide_step: 1e-3,
            tolerance: 1e-5,
            max_coords: 10_000,
            seed: 0,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub coords_total: usize,
    pub worst: Option<WorstCoord>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares analytic gradients of `model` against central finite differences.
///
/// `model` builds the scalar loss on a fresh evaluation-mode graph; it is
/// invoked once for the analytic pass and twice per checked coordinate.
/// Parameter values are restored before returning.
pub fn grad_check<F>(mut model: F, tape: &mut ParamTape, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamTape) -> Result<Var>,
{
    tape.zero_grad();
    let mut g = Graph::new();
    let loss = model(&mut g, tape)?;
    g.backward(loss, tape)?;

    let coords: Vec<(ParamId, usize)> = tape
        .ids()
        .flat_map(|id| (0..tape.value(id).len()).map(move |i| (id, i)))
        .collect();
    let total = coords.len();
    let chosen: Vec<(ParamId, usize)> = if total > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, total, opts.max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut eval = |tape: &ParamTape| -> Result<f64> {
        let mut g = Graph::new();
        let l = model(&mut g, tape)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: chosen.len(),
        coords_total: total,
        worst: None,
        tolerance: opts.tolerance,
    };
    for (id, i) in chosen {
        let analytic = tape.grad(id).data()[i];
        let original = tape.value(id).data()[i];
        let mut at = |tape: &mut ParamTape, delta: f64| -> Result<f64> {
            tape.value_mut(id).data_mut()[i] = original + delta;
            let v = eval(tape);
            tape.value_mut(id).data_mut()[i] = original;
            v
        };
        let rel_to = |numeric: f64| {
            let denom = analytic.abs().max(numeric.abs()).max(opts.denom_floor);
            (analytic - numeric).abs() / denom
        };

        let h = opts.step;
        let mut numeric = (at(tape, h)? - at(tape, -h)?) / (2.0 * h);
        let mut rel = rel_to(numeric);
        // Five-point stencils at 10x, 100x, ... the base step, up to
        // `wide_step`, until one agrees to a tenth of the tolerance.
        let mut w = h * 10.0;
        while rel >= 0.1 * opts.tolerance && opts.wide_step > 0.0 && w <= opts.wide_step * (1.0 + 1e-9) {
            let wide =
                (at(tape, -2.0 * w)? - 8.0 * at(tape, -w)? + 8.0 * at(tape, w)? - at(tape, 2.0 * w)?) / (12.0 * w);
            if rel_to(wide) < rel {
                numeric = wide;
                rel = rel_to(wide);
            }
            w *= 10.0;
        }

        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some(WorstCoord {
                param: tape.name(id).to_string(),
                index: i,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}
