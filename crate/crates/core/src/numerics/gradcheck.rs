use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParamId, ParamStore, Var};

/// Fraction of coordinates compared, with a floor of [`MIN_COORDS`].
const FRACTION: f64 = 0.05;
const MIN_COORDS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because a perturbation crossed a relu kink.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of `loss` against central differences with
/// step `eps` on a seeded random subset of parameter coordinates.
pub fn grad_check<F, E>(params: &ParamStore, eps: f64, seed: u64, loss: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let (analytic, signature) = {
        let mut g = Graph::with_params(params);
        let out = loss(&mut g)?;
        let grads = g.backward(out)?;
        let a: Vec<Vec<f64>> = params
            .ids()
            .map(|id| match grads.param(id) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; params.get(id).len()],
            })
            .collect();
        (a, g.relu_signature())
    };

    let coords: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).len()).map(move |i| (id, i)))
        .collect();
    let want = ((coords.len() as f64 * FRACTION).ceil() as usize)
        .max(MIN_COORDS)
        .min(coords.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, coords.len(), want).into_vec();
    picked.sort_unstable();

    let eval = |store: &ParamStore| -> Result<(f64, u64), E> {
        let mut g = Graph::with_params(store);
        let out = loss(&mut g)?;
        Ok((g.scalar_value(out), g.relu_signature()))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for k in picked {
        let (id, i) = coords[k];
        let orig = params.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + eps;
        let (plus, sig_p) = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - eps;
        let (minus, sig_m) = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        if sig_p != signature || sig_m != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[id.0][i], numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
