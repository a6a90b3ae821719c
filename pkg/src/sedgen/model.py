"""Full model: audio encoder + text encoder + caption decoder.

The text encoder and decoder share one token embedding table by default
(tied weights registered once for checkpointing/optimization). The audio and
text pooled embeddings land in the same shared space for the contrastive
objective; the decoder cross-attends to the audio frame embeddings.
"""

from __future__ import annotations

import numpy as np

from .decoder import CaptionDecoder, DecoderConfig
from .encoders import AudioEmbedding, EncoderConfig, build_encoder
from .errors import ConfigError
from .nn import DropoutSource, Embedding, Module
from .tensor import Tensor
from .textenc import TextEncoder, TextEncoderConfig
from .vocab import Vocabulary


class SedModel(Module):
    def __init__(
        self,
        vocab: Vocabulary,
        encoder_cfg: EncoderConfig,
        decoder_cfg: DecoderConfig,
        rng: np.random.Generator,
        share_embedding: bool = True,
        dropout_seed: int = 0,
        text_cfg: TextEncoderConfig | None = None,
    ):
        if encoder_cfg.model_dim != decoder_cfg.d_model:
            raise ConfigError(
                f"decoder d_model {decoder_cfg.d_model} must equal encoder model_dim {encoder_cfg.model_dim}"
            )
        if text_cfg is None:
            text_cfg = TextEncoderConfig(
                d_model=decoder_cfg.d_model,
                heads=decoder_cfg.heads,
                ffn_dim=decoder_cfg.ffn_dim,
                max_len=decoder_cfg.max_len,
                d_shared=encoder_cfg.d_shared,
            )
        if text_cfg.d_shared != encoder_cfg.d_shared:
            raise ConfigError(
                f"text d_shared {text_cfg.d_shared} must equal encoder d_shared {encoder_cfg.d_shared}"
            )
        self.vocab = vocab
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.text_cfg = text_cfg
        self.dropout_source = DropoutSource(dropout_seed)

        self.embed = Embedding(vocab.size, decoder_cfg.d_model, rng)
        self.encoder = build_encoder(encoder_cfg, rng)
        text_embed = self.embed if share_embedding else Embedding(vocab.size, text_cfg.d_model, rng)
        self.text_encoder = TextEncoder(vocab, text_cfg, text_embed, rng)
        self.decoder = CaptionDecoder(vocab, decoder_cfg, self.embed, rng, self.dropout_source)
        self.share_embedding = share_embedding

    def encode_audio(self, mel: np.ndarray) -> AudioEmbedding:
        return self.encoder(mel)

    def embed_text(self, ids) -> Tensor:
        return self.text_encoder(ids)

    def decode_logits(self, ids, audio: AudioEmbedding) -> Tensor:
        return self.decoder(ids, audio.frames)
