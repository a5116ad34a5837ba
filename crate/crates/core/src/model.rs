//! Full model: encoder, decoder, and the order-scoring head, initialized
//! from one seed and exposed as a flat list of named tensors for the
//! optimizer and the checkpoint format.

use crate::charset::Charset;
use crate::decoder::{DecoderConfig, DecoderError, DecoderParams};
use crate::encoder::{EncoderConfig, EncoderError, EncoderParams, IMG_H, IMG_W};
use crate::ipn::IpnParams;
use crate::real::Real;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("decoder width {decoder} must equal encoder width {encoder}")]
    WidthMismatch { encoder: usize, decoder: usize },
}

pub struct ModelParams<R: Real> {
    pub encoder: EncoderParams<R>,
    pub decoder: DecoderParams<R>,
    pub ipn: IpnParams<R>,
}

impl<R: Real> ModelParams<R> {
    /// Deterministic init: the seed fixes every tensor, drawn in a fixed
    /// order (encoder, decoder, scoring head).
    pub fn init(
        enc_cfg: &EncoderConfig,
        dec_cfg: &DecoderConfig,
        charset: &Charset,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if enc_cfg.width != dec_cfg.d_model {
            return Err(ModelError::WidthMismatch {
                encoder: enc_cfg.width,
                decoder: dec_cfg.d_model,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(enc_cfg, IMG_H, IMG_W, &mut rng)?;
        let decoder =
            DecoderParams::init(dec_cfg, charset.id_space(), charset.class_count(), &mut rng)?;
        let ipn = IpnParams::init(dec_cfg.t_max, &mut rng);
        Ok(ModelParams { encoder, decoder, ipn })
    }

    /// Stable name -> tensor listing; ordering is part of the checkpoint
    /// contract.
    pub fn named(&self) -> Vec<(String, Tensor<R>)> {
        let mut out = self.encoder.named();
        out.extend(self.decoder.named());
        out.push(("ipn.p_query".to_string(), self.ipn.p_query.clone()));
        out.push(("ipn.p_weight".to_string(), self.ipn.p_weight.clone()));
        out.push(("ipn.p_value".to_string(), self.ipn.p_value.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named() {
            t.zero_grad();
        }
    }
}
