//! Lightweight cross-attention decoder predicting the next cluster.

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Result, StarError};
use crate::params::{normal, ones, xavier, zeros, LayerGroup, ParamStore, Rng};
use crate::tensor::{Matrix, Real};

use super::mask::BlockCausalMask;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Encoder feature width `D`.
    pub encoder_width: usize,
    /// Patch vector length `s`.
    pub out_dim: usize,
    /// Tokens per cluster; sizes the slot embedding.
    pub slots: usize,
    pub self_attention: bool,
}

#[derive(Clone, Debug)]
struct Proj {
    w: usize,
    b: usize,
}

impl Proj {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        i: usize,
        o: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                xavier(i, o, rng),
                true,
                LayerGroup::Head,
            ),
            b: store.add(format!("{name}.b"), zeros(o), false, LayerGroup::Head),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        tape.linear(x, vars[self.w], Some(vars[self.b]))
    }
}

#[derive(Clone, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

impl Norm {
    fn register<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            g: store.add(format!("{name}.g"), ones(width), false, LayerGroup::Head),
            b: store.add(format!("{name}.b"), zeros(width), false, LayerGroup::Head),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        tape.layer_norm(x, vars[self.g], vars[self.b])
    }
}

#[derive(Clone, Debug)]
struct Attn {
    q: Proj,
    k: Proj,
    v: Proj,
    o: Proj,
}

#[derive(Clone, Debug)]
struct Layer {
    norm_sa: Option<Norm>,
    sa: Option<Attn>,
    norm_ca: Norm,
    ca: Attn,
    norm_mlp: Norm,
    fc1: Proj,
    fc2: Proj,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    in_proj: Proj,
    slot_embed: usize,
    layers: Vec<Layer>,
    norm: Norm,
    head: Proj,
}

impl Decoder {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        config: DecoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = config.width;
        if config.heads == 0 || !w.is_multiple_of(config.heads) {
            return Err(StarError::Config(format!(
                "decoder width {w} is not divisible by {} heads",
                config.heads
            )));
        }
        let d = config.encoder_width;
        let hidden = w * config.mlp_ratio;
        let in_proj = Proj::register(store, "decoder.in_proj", d, w, rng);
        let slot_embed = store.add(
            "decoder.slot_embed",
            normal(config.slots, w, 0.02, rng),
            false,
            LayerGroup::Head,
        );
        let attn = |store: &mut ParamStore<T>, p: &str, kv_in: usize, rng: &mut Rng| Attn {
            q: Proj::register(store, &format!("{p}.q"), w, w, rng),
            k: Proj::register(store, &format!("{p}.k"), kv_in, w, rng),
            v: Proj::register(store, &format!("{p}.v"), kv_in, w, rng),
            o: Proj::register(store, &format!("{p}.o"), w, w, rng),
        };
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("decoder.layers.{i}");
                let (norm_sa, sa) = if config.self_attention {
                    (
                        Some(Norm::register(store, &format!("{p}.norm_sa"), w)),
                        Some(attn(store, &format!("{p}.self_attn"), w, rng)),
                    )
                } else {
                    (None, None)
                };
                Layer {
                    norm_sa,
                    sa,
                    norm_ca: Norm::register(store, &format!("{p}.norm_ca"), w),
                    ca: attn(store, &format!("{p}.cross_attn"), d, rng),
                    norm_mlp: Norm::register(store, &format!("{p}.norm_mlp"), w),
                    fc1: Proj::register(store, &format!("{p}.mlp.fc1"), w, hidden, rng),
                    fc2: Proj::register(store, &format!("{p}.mlp.fc2"), hidden, w, rng),
                }
            })
            .collect();
        let norm = Norm::register(store, "decoder.norm", w);
        let head = Proj::register(store, "decoder.head", w, config.out_dim, rng);
        Ok(Self {
            config,
            in_proj,
            slot_embed,
            layers,
            norm,
            head,
        })
    }

    /// Predictions (`tokens x s`) from encoder `features` (`tokens x D`).
    /// Row `t` is the prediction for the token at the same slot of the next
    /// cluster.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: Var,
        within: &[usize],
        mask: &Arc<BlockCausalMask>,
    ) -> Result<Var> {
        let n = tape.value(features).rows();
        if mask.rows() != n || mask.cols() != n || within.len() != n {
            return Err(StarError::ShapeMismatch(format!(
                "{n} feature rows, {} slot ids, {}x{} mask",
                within.len(),
                mask.rows(),
                mask.cols()
            )));
        }
        if let Some(&j) = within.iter().find(|&&j| j >= self.config.slots) {
            return Err(StarError::ShapeMismatch(format!(
                "slot {j} outside {} decoder slots",
                self.config.slots
            )));
        }
        let heads = self.config.heads;
        let mut x = self.in_proj.apply(tape, vars, features);
        let slots = tape.rows(
            &[vars[self.slot_embed]],
            within.iter().map(|&j| Some((0, j))).collect(),
        );
        x = tape.add(x, slots);
        for layer in &self.layers {
            if let (Some(norm), Some(sa)) = (&layer.norm_sa, &layer.sa) {
                let h = norm.apply(tape, vars, x);
                let q = sa.q.apply(tape, vars, h);
                let k = sa.k.apply(tape, vars, h);
                let v = sa.v.apply(tape, vars, h);
                let a = tape.attention(q, k, v, heads, mask.clone());
                let o = sa.o.apply(tape, vars, a);
                x = tape.add(x, o);
            }
            let h = layer.norm_ca.apply(tape, vars, x);
            let q = layer.ca.q.apply(tape, vars, h);
            let k = layer.ca.k.apply(tape, vars, features);
            let v = layer.ca.v.apply(tape, vars, features);
            let a = tape.attention(q, k, v, heads, mask.clone());
            let o = layer.ca.o.apply(tape, vars, a);
            x = tape.add(x, o);

            let h = layer.norm_mlp.apply(tape, vars, x);
            let h = layer.fc1.apply(tape, vars, h);
            let h = tape.gelu(h);
            let h = layer.fc2.apply(tape, vars, h);
            x = tape.add(x, h);
        }
        let x = self.norm.apply(tape, vars, x);
        Ok(self.head.apply(tape, vars, x))
    }
}

/// Forward-only decode of fixed encoder features.
pub fn decode<T: Real>(
    decoder: &Decoder,
    store: &ParamStore<T>,
    features: &Matrix<T>,
    within: &[usize],
    mask: &Arc<BlockCausalMask>,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let f = tape.input(features.clone());
    let y = decoder.forward(&mut tape, &vars, f, within, mask)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::mask::build_mask;
    use rand::SeedableRng;

    fn config() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            encoder_width: 6,
            out_dim: 5,
            slots: 2,
            self_attention: true,
        }
    }

    #[test]
    fn zero_weights_emit_head_bias() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::register(&mut store, config(), &mut rng).unwrap();
        for p in store.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let bias = store.find("decoder.head.b").unwrap();
        store
            .value_mut(bias)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 1.5]);
        let feats = Matrix::from_fn(4, 6, |r, c| (r + c) as f64);
        let mask = Arc::new(build_mask(&[0, 0, 1, 1]).unwrap());
        let y = decode(&dec, &store, &feats, &[0, 1, 0, 1], &mask).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.1, -0.2, 0.3, 0.0, 1.5]);
        }
    }

    #[test]
    fn later_clusters_do_not_reach_earlier_predictions() {
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::register(&mut store, config(), &mut rng).unwrap();
        let ids = [0, 0, 1, 1, 2, 2];
        let mask = Arc::new(build_mask(&ids).unwrap());
        let within = [0, 1, 0, 1, 0, 1];
        let feats = Matrix::from_fn(6, 6, |r, c| ((r * 6 + c) as f64 * 0.3).cos());
        let base = decode(&dec, &store, &feats, &within, &mask).unwrap();
        let mut changed = feats.clone();
        for c in 0..6 {
            changed.set(4, c, 9.0);
            changed.set(5, c, -3.0);
        }
        let out = decode(&dec, &store, &changed, &within, &mask).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), base.row(r));
        }
        assert_ne!(out.row(4), base.row(4));
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let mut rng = Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::register(&mut store, config(), &mut rng).unwrap();
        let mask = Arc::new(build_mask(&[0, 0, 1]).unwrap());
        let feats = Matrix::zeros(4, 6);
        assert!(decode(&dec, &store, &feats, &[0, 1, 0, 1], &mask).is_err());
    }

    #[test]
    fn width_must_split_into_heads() {
        let mut rng = Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let cfg = DecoderConfig {
            heads: 3,
            ..config()
        };
        assert!(Decoder::register(&mut store, cfg, &mut rng).is_err());
    }
}
