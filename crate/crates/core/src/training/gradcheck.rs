//! Central-difference verification of tape gradients.

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::config::Config;
use crate::error::Result;
use crate::image::Image;
use crate::model::StarModel;
use crate::params::ParamStore;

use super::{stream_rng, Stream};

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub entries: Vec<ParamError>,
    pub max_rel: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

/// Compares every parameter entry's analytic gradient of the scalar built
/// by `f` with `(f(p + eps) - f(p - eps)) / 2eps`.
pub fn grad_check(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    eps: f64,
) -> Result<GradReport> {
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let l = f(&mut tape, &vars)?;
        Ok(tape.scalar(l))
    };
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let l = f(&mut tape, &vars)?;
    let grads = tape.param_grads(&tape.backward(l), store.len());

    let mut work = store.clone();
    let mut report = GradReport::default();
    for (i, p) in store.params().iter().enumerate() {
        let mut entry = ParamError {
            name: p.name.clone(),
            max_rel: 0.0,
            max_abs: 0.0,
            checked: p.value.len(),
        };
        for k in 0..p.value.len() {
            let orig = p.value.data()[k];
            work.value_mut(i).data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work.value_mut(i).data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work.value_mut(i).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g.data()[k]);
            entry.max_rel = entry.max_rel.max(relative_error(analytic, numeric));
            entry.max_abs = entry.max_abs.max((analytic - numeric).abs());
        }
        report.max_rel = report.max_rel.max(entry.max_rel);
        report.entries.push(entry);
    }
    Ok(report)
}

/// Smallest configuration exercising every part of the pretraining graph:
/// 8x8 single-channel images, 2x2 patches, 2x2 clusters (4 clusters per
/// image), encoder depth 2 at width 8, one decoder layer.
pub fn micro_config() -> Config {
    let mut cfg = Config::default();
    for (k, v) in [
        ("data.image_size", "8"),
        ("data.channels", "1"),
        ("patch.size", "2"),
        ("patch.cluster_side", "2"),
        ("pack.images", "2"),
        ("encoder.depth", "2"),
        ("encoder.width", "8"),
        ("encoder.state_dim", "4"),
        ("encoder.mlp_ratio", "2"),
        ("decoder.layers", "1"),
        ("decoder.width", "8"),
        ("decoder.heads", "2"),
        ("decoder.mlp_ratio", "2"),
        ("pretrain.batch", "2"),
    ] {
        cfg.set(k, v).expect("valid micro key");
    }
    cfg
}

/// Gradient check of the full pretraining loss for `cfg` on one packed
/// sequence of random images.
pub fn pretraining_grad_check(cfg: &Config, seed: u64, eps: f64) -> Result<GradReport> {
    let mut rng = stream_rng(seed, Stream::Init, 99);
    let mut store = ParamStore::<f64>::new();
    let model = StarModel::build(cfg, &mut store, &mut rng)?;
    // move a_log / biases off their structured init so every path carries signal
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let images = (0..cfg.pack_images)
        .map(|_| {
            let s = cfg.image_size;
            let px = (0..s * s * cfg.channels)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            Image::new(s, s, cfg.channels, px)
        })
        .collect::<Result<Vec<_>>>()?;
    let packed = model.pack(&images)?;
    grad_check(
        &store,
        |tape, vars| model.loss_graph(tape, vars, &packed, None),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerGroup;
    use crate::tensor::Matrix;

    #[test]
    fn empty_model_passes() {
        let store = ParamStore::<f64>::new();
        let r = grad_check(
            &store,
            |tape, _| Ok(tape.input(Matrix::filled(1, 1, 3.0))),
            1e-4,
        )
        .unwrap();
        assert!(r.entries.is_empty());
        assert!(r.passes(1e-4));
    }

    #[test]
    fn linear_head_is_exact() {
        let mut store = ParamStore::<f64>::new();
        store.add(
            "w",
            Matrix::from_fn(3, 2, |r, c| (r + 2 * c) as f64 * 0.1),
            true,
            LayerGroup::Head,
        );
        store.add(
            "b",
            Matrix::from_vec(1, 2, vec![0.3, -0.2]).unwrap(),
            false,
            LayerGroup::Head,
        );
        let x = Matrix::from_fn(4, 3, |r, c| ((r * 3 + c) as f64).cos());
        let r = grad_check(
            &store,
            |tape, vars| {
                let xi = tape.input(x.clone());
                let y = tape.linear(xi, vars[0], Some(vars[1]));
                let ones = tape.input(Matrix::filled(1, 4, 1.0));
                let s = tape.matmul(ones, y);
                let w = tape.input(Matrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap());
                Ok(tape.matmul(s, w))
            },
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel < 1e-8, "{r:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    }
}
