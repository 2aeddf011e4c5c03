//! Pretraining model (encoder + decoder) and fine-tuning classifier.

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::config::Config;
use crate::decoder::{mask_for, Decoder, DecoderConfig};
use crate::error::{Result, StarError};
use crate::image::Image;
use crate::objective::{build_targets, star_loss_graph};
use crate::params::{normal, ones, xavier, zeros, LayerGroup, ParamStore, Rng};
use crate::patching::{image_to_clusters, ClusterSequence};
use crate::registry;
use crate::separator::pack::pixel_position_ids;
use crate::separator::{
    pack, LayoutStrategy, PackOptions, PackedSequence, SeparatorSpec, SeparatorValue, Slot,
};
use crate::ssm::encoder::{DropPath, ExtraTokens};
use crate::ssm::{Encoder, EncoderConfig, EncoderInput, PathReduce, ScanMode};
use crate::tensor::Real;
use crate::training::class_token::ClassTokenPolicy;

/// Positional ids used by one image under `layout`.
pub fn positions_per_image(cfg: &Config, layout: &dyn LayoutStrategy) -> Result<usize> {
    let clusters = cfg.clusters_per_image();
    let plan = layout.plan(clusters, cfg.grid_side() / cfg.cluster_side)?;
    let seps = plan.iter().filter(|s| **s == Slot::Separator).count();
    Ok(seps + clusters * cfg.tokens_per_cluster())
}

fn encoder_config(cfg: &Config, scan_mode: Arc<dyn ScanMode>) -> Result<EncoderConfig> {
    let layout = registry::layout(&cfg.separator_layout)?;
    let per_image = positions_per_image(cfg, layout.as_ref())?;
    let positions = if cfg.restart_positions {
        per_image
    } else {
        per_image * cfg.pack_images
    };
    Ok(EncoderConfig {
        depth: cfg.encoder_depth,
        width: cfg.encoder_width,
        state_dim: cfg.encoder_state_dim,
        mlp_ratio: cfg.encoder_mlp_ratio,
        patch_dim: cfg.patch_dim(),
        positions,
        use_positional: cfg.encoder_positional,
        scan_mode,
        path_reduce: if cfg.encoder_path_reduce == "mean" {
            PathReduce::Mean
        } else {
            PathReduce::Sum
        },
    })
}

fn check_geometry(cfg: &Config, image: &Image) -> Result<()> {
    if image.height() != cfg.image_size
        || image.width() != cfg.image_size
        || image.channels() != cfg.channels
    {
        return Err(StarError::InvalidImage(format!(
            "image is {}x{}x{}, config expects {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        )));
    }
    Ok(())
}

/// Packs `images` with the configured separator and layout. Learnable
/// separators get a zero placeholder vector.
pub fn pack_images(cfg: &Config, images: &[Image]) -> Result<PackedSequence> {
    let value = registry::separator_value(&cfg.separator_value)?;
    let layout = registry::layout(&cfg.separator_layout)?;
    let seqs = images
        .iter()
        .map(|im| {
            check_geometry(cfg, im)?;
            image_to_clusters(im, cfg.patch_size, cfg.cluster_side)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut spec = SeparatorSpec::square(value.clone(), cfg.cluster_side, cfg.encoder_width);
    if value.learnable() {
        // placeholder; the learned vector replaces it inside the graph
        spec = spec.with_embedding(vec![0.0; cfg.encoder_width]);
    }
    pack(
        &seqs,
        &spec,
        layout,
        PackOptions {
            restart_positions: cfg.restart_positions,
            max_images: cfg.pack_max_images,
        },
    )
}

/// Encoder and decoder for next-cluster pretraining.
#[derive(Clone, Debug)]
pub struct StarModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Learned separator vector, for the embeddings value kind.
    pub separator: Option<usize>,
    pub value: Arc<dyn SeparatorValue>,
    pub layout: Arc<dyn LayoutStrategy>,
    pub cfg: Config,
}

impl StarModel {
    pub fn build<T: Real>(cfg: &Config, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let value = registry::separator_value(&cfg.separator_value)?;
        let layout = registry::layout(&cfg.separator_layout)?;
        let encoder = Encoder::register(
            store,
            encoder_config(cfg, registry::scan_mode("one-scan")?)?,
            rng,
        );
        let separator = value.learnable().then(|| {
            store.add(
                "separator.embedding",
                normal(1, cfg.encoder_width, 0.02, rng),
                false,
                LayerGroup::Embedding,
            )
        });
        let decoder = Decoder::register(
            store,
            DecoderConfig {
                layers: cfg.decoder_layers,
                width: cfg.decoder_width,
                heads: cfg.decoder_heads,
                mlp_ratio: cfg.decoder_mlp_ratio,
                encoder_width: cfg.encoder_width,
                out_dim: cfg.patch_dim(),
                slots: cfg.tokens_per_cluster(),
                self_attention: cfg.decoder_self_attention,
            },
            rng,
        )?;
        Ok(Self {
            encoder,
            decoder,
            separator,
            value,
            layout,
            cfg: cfg.clone(),
        })
    }

    pub fn clusters(&self, image: &Image) -> Result<ClusterSequence> {
        check_geometry(&self.cfg, image)?;
        image_to_clusters(image, self.cfg.patch_size, self.cfg.cluster_side)
    }

    pub fn pack(&self, images: &[Image]) -> Result<PackedSequence> {
        pack_images(&self.cfg, images)
    }

    /// Encoder features for a packed sequence.
    pub fn encode_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        packed: &PackedSequence,
        drop: Option<DropPath<'_>>,
    ) -> Result<Var> {
        let input = EncoderInput::from_packed(packed);
        let extra = ExtraTokens {
            separator: self.separator.map(|i| vars[i]),
            class_token: None,
        };
        self.encoder.forward(tape, vars, &input, extra, drop)
    }

    /// Decoder predictions (`tokens x s`).
    pub fn predict_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        packed: &PackedSequence,
        drop: Option<DropPath<'_>>,
    ) -> Result<Var> {
        let features = self.encode_graph(tape, vars, packed, drop)?;
        let mask = Arc::new(mask_for(packed)?);
        self.decoder
            .forward(tape, vars, features, &packed.within_ids(), &mask)
    }

    /// Pretraining loss of one packed sequence.
    pub fn loss_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        packed: &PackedSequence,
        drop: Option<DropPath<'_>>,
    ) -> Result<Var> {
        let pred = self.predict_graph(tape, vars, packed, drop)?;
        let plan = build_targets(packed, self.cfg.loss_norm_pix)?;
        star_loss_graph(tape, pred, &plan, self.cfg.loss_include_separators)
    }

    pub fn loss<T: Real>(&self, store: &ParamStore<T>, packed: &PackedSequence) -> Result<T> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let l = self.loss_graph(&mut tape, &vars, packed, None)?;
        Ok(tape.scalar(l))
    }
}

/// Encoder with a class token (or mean pooling) and a linear head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub encoder: Encoder,
    pub class_token: Option<usize>,
    pub policy: Option<Arc<dyn ClassTokenPolicy>>,
    head_norm_g: usize,
    head_norm_b: usize,
    head_w: usize,
    head_b: usize,
    pub layout: Arc<dyn LayoutStrategy>,
    pub cfg: Config,
}

impl Classifier {
    pub fn build<T: Real>(cfg: &Config, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layout = registry::layout(&cfg.separator_layout)?;
        let scan = registry::scan_mode(&cfg.ft_scan)?;
        let encoder = Encoder::register(store, encoder_config(cfg, scan)?, rng);
        let policy = if cfg.ft_class_token == "none" {
            None
        } else {
            Some(registry::class_token_policy(&cfg.ft_class_token)?)
        };
        let class_token = policy.is_some().then(|| {
            store.add(
                "classifier.class_token",
                normal(1, cfg.encoder_width, 0.02, rng),
                false,
                LayerGroup::Embedding,
            )
        });
        let d = cfg.encoder_width;
        let head_norm_g = store.add("classifier.norm.g", ones(d), false, LayerGroup::Head);
        let head_norm_b = store.add("classifier.norm.b", zeros(d), false, LayerGroup::Head);
        let mut w: crate::tensor::Matrix<T> = xavier(d, cfg.ft_classes, rng);
        w.scale_assign(T::lit(0.1));
        let head_w = store.add("classifier.head.w", w, true, LayerGroup::Head);
        let head_b = store.add(
            "classifier.head.b",
            zeros(cfg.ft_classes),
            false,
            LayerGroup::Head,
        );
        Ok(Self {
            encoder,
            class_token,
            policy,
            head_norm_g,
            head_norm_b,
            head_w,
            head_b,
            layout,
            cfg: cfg.clone(),
        })
    }

    /// The encoder input for one image: pixel tokens with their pretraining
    /// positional ids, plus the class token when a policy is set.
    pub fn input(&self, image: &Image) -> Result<EncoderInput> {
        check_geometry(&self.cfg, image)?;
        let seq = image_to_clusters(image, self.cfg.patch_size, self.cfg.cluster_side)?;
        let ids = pixel_position_ids(self.layout.as_ref(), &seq)?;
        Ok(EncoderInput::single_image(
            &seq,
            &ids,
            self.policy.as_deref(),
        ))
    }

    /// `1 x classes` logits.
    pub fn logits_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: &EncoderInput,
        drop: Option<DropPath<'_>>,
    ) -> Result<Var> {
        let extra = ExtraTokens {
            separator: None,
            class_token: self.class_token.map(|i| vars[i]),
        };
        let feats = self.encoder.forward(tape, vars, input, extra, drop)?;
        let pooled = match input.class_token_index() {
            Some(i) => tape.gather(feats, &[i]),
            None => {
                let n = tape.value(feats).rows();
                let avg = tape.input(crate::tensor::Matrix::filled(
                    1,
                    n,
                    T::one() / T::from_usize(n).unwrap(),
                ));
                tape.matmul(avg, feats)
            }
        };
        let h = tape.layer_norm(pooled, vars[self.head_norm_g], vars[self.head_norm_b]);
        Ok(tape.linear(h, vars[self.head_w], Some(vars[self.head_b])))
    }

    pub fn predict<T: Real>(&self, store: &ParamStore<T>, image: &Image) -> Result<usize> {
        let input = self.input(image)?;
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let l = self.logits_graph(&mut tape, &vars, &input, None)?;
        let row = tape.value(l).row(0);
        Ok(row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0)
    }
}
