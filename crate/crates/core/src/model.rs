//! The full fusion network assembled from config: two encoders, a fusion
//! module, and the decoder, plus the per-modality autoencoders used in
//! stage-1 training.
//!
//! Parameter namespaces: `enc_ir.*` / `enc_vi.*` (encoders), `dec_ir.*` /
//! `dec_vi.*` (stage-1 reconstruction decoders), `fusion.*` and `dec.*`
//! (the fusion head trained in stage 2 and used at inference).

use rand_chacha::ChaCha20Rng;

use crate::attention::{CamDesc, ConvFusionDesc, DenseFusionDesc, FusionDesc};
use crate::autograd::{bind_params, ParamBinding, Tape, ValueId};
use crate::config::{FuseConfig, FusionKind};
use crate::decoder::DecoderDesc;
use crate::encoder::{validate_image_range, EncoderDesc, DEEP_CHANNELS};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Ir,
    Vi,
}

impl Modality {
    pub fn tag(&self) -> &'static str {
        match self {
            Modality::Ir => "ir",
            Modality::Vi => "vi",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuseModel {
    pub config: FuseConfig,
    pub enc_ir: EncoderDesc,
    pub enc_vi: EncoderDesc,
    pub fusion: FusionDesc,
    pub decoder: DecoderDesc,
}

impl FuseModel {
    pub fn new(config: FuseConfig) -> Self {
        let fusion = match config.fusion {
            FusionKind::Cam => FusionDesc::Cam(CamDesc::new(
                config.n_sa,
                config.n_ca,
                config.use_resoftmax,
                config.use_shift,
            )),
            FusionKind::Cnn => FusionDesc::Cnn(ConvFusionDesc::new(DEEP_CHANNELS)),
            FusionKind::Dense => FusionDesc::Dense(DenseFusionDesc::new(DEEP_CHANNELS)),
        };
        Self {
            config,
            enc_ir: EncoderDesc::new("enc_ir"),
            enc_vi: EncoderDesc::new("enc_vi"),
            fusion,
            decoder: DecoderDesc::new("dec"),
        }
    }

    pub fn encoder(&self, modality: Modality) -> &EncoderDesc {
        match modality {
            Modality::Ir => &self.enc_ir,
            Modality::Vi => &self.enc_vi,
        }
    }

    pub fn stage1_decoder(&self, modality: Modality) -> DecoderDesc {
        DecoderDesc::new(format!("dec_{}", modality.tag()))
    }

    /// Fresh parameters for one modality's autoencoder (encoder + its
    /// stage-1 decoder).
    pub fn init_autoencoder(&self, modality: Modality, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.encoder(modality).init(&mut store, rng)?;
        self.stage1_decoder(modality).init(&mut store, rng)?;
        Ok(store)
    }

    /// Fresh parameters for the fusion head (fusion module + decoder).
    pub fn init_fusion_head(&self, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.fusion.init(&mut store, rng)?;
        self.decoder.init(&mut store, rng)?;
        Ok(store)
    }

    /// Fresh parameters for the whole network (one-stage training).
    pub fn init_all(&self, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.enc_ir.init(&mut store, rng)?;
        self.enc_vi.init(&mut store, rng)?;
        self.fusion.init(&mut store, rng)?;
        self.decoder.init(&mut store, rng)?;
        Ok(store)
    }

    /// Stage-1 forward: encode one modality and reconstruct it through
    /// that modality's own decoder (both skip bundles collapse to the
    /// single modality's features).
    pub fn autoencoder_forward(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        image: ValueId,
        modality: Modality,
    ) -> Result<ValueId> {
        let (shallow, deep) = self.encoder(modality).forward(tape, bind, image)?;
        self.stage1_decoder(modality)
            .forward(tape, bind, deep, deep, deep, shallow, shallow)
    }

    /// Full fusion forward: two encoders, fusion module, decoder with
    /// both skip bundles.
    pub fn fuse_forward(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        ir: ValueId,
        vi: ValueId,
    ) -> Result<ValueId> {
        if tape.value(ir).shape() != tape.value(vi).shape() {
            return Err(Error::shape(format!(
                "source images differ: {:?} vs {:?}",
                tape.value(ir).shape(),
                tape.value(vi).shape()
            )));
        }
        let (shallow_ir, deep_ir) = self.enc_ir.forward(tape, bind, ir)?;
        let (shallow_vi, deep_vi) = self.enc_vi.forward(tape, bind, vi)?;
        let fused_deep = self.fusion.forward(tape, bind, deep_ir, deep_vi)?;
        self.decoder
            .forward(tape, bind, fused_deep, deep_ir, deep_vi, shallow_ir, shallow_vi)
    }

    /// Inference: fuse two `[H, W]` grayscale images in [0, 1].
    pub fn fuse_images(&self, store: &ParamStore, ir: &Tensor, vi: &Tensor) -> Result<Tensor> {
        validate_image_range(ir)?;
        validate_image_range(vi)?;
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, store);
        let iri = tape.constant(ir.as_single_channel()?);
        let vii = tape.constant(vi.as_single_channel()?);
        let out = self.fuse_forward(&mut tape, &bind, iri, vii)?;
        tape.value(out).clone().into_image()
    }

    /// Reconstruct one modality through its autoencoder (stage-1
    /// inference, mainly for tests and diagnostics).
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        image: &Tensor,
        modality: Modality,
    ) -> Result<Tensor> {
        validate_image_range(image)?;
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, store);
        let img = tape.constant(image.as_single_channel()?);
        let out = self.autoencoder_forward(&mut tape, &bind, img, modality)?;
        tape.value(out).clone().into_image()
    }

    /// Parameter names the stage-2 checkpoint must carry for this
    /// architecture (used to validate loaded checkpoints).
    pub fn expected_params(&self) -> Result<Vec<String>> {
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let template = self.init_all(&mut rng)?;
        Ok(template.names().cloned().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_config() -> FuseConfig {
        FuseConfig { image_size: 16, ..FuseConfig::default() }
    }

    #[test]
    fn fuse_forward_shapes_and_range() {
        let model = FuseModel::new(toy_config());
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let store = model.init_all(&mut rng).unwrap();
        let ir = Tensor::from_fn(&[16, 16], |i| (i % 7) as f64 / 6.0);
        let vi = Tensor::from_fn(&[16, 16], |i| (i % 5) as f64 / 4.0);
        let fused = model.fuse_images(&store, &ir, &vi).unwrap();
        assert_eq!(fused.shape(), &[16, 16]);
        assert!(fused.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn autoencoder_output_matches_input_shape() {
        let model = FuseModel::new(toy_config());
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let store = model.init_autoencoder(Modality::Ir, &mut rng).unwrap();
        let img = Tensor::from_fn(&[16, 16], |i| (i % 11) as f64 / 10.0);
        let rec = model.reconstruct(&store, &img, Modality::Ir).unwrap();
        assert_eq!(rec.shape(), img.shape());
    }

    #[test]
    fn fuse_rejects_mismatched_sources() {
        let model = FuseModel::new(toy_config());
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let store = model.init_all(&mut rng).unwrap();
        let ir = Tensor::zeros(&[16, 16]);
        let vi = Tensor::zeros(&[24, 24]);
        assert!(matches!(model.fuse_images(&store, &ir, &vi), Err(Error::Shape(_))));
    }

    #[test]
    fn block_counts_double_in_manifest() {
        let count_attention_params = |n: usize| -> usize {
            let mut cfg = toy_config();
            cfg.n_sa = n;
            cfg.n_ca = n;
            let model = FuseModel::new(cfg);
            let mut rng = ChaCha20Rng::seed_from_u64(4);
            let store = model.init_fusion_head(&mut rng).unwrap();
            store.names().filter(|s| s.starts_with("fusion.")).count()
        };
        let single = count_attention_params(1);
        let double = count_attention_params(2);
        assert_eq!(double, 2 * single);
    }
}
