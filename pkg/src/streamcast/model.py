"""Base predictor: scene encoder followed by the mode-query decoder."""
from __future__ import annotations

from dataclasses import asdict
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .decoder import Decoder, DecoderConfig, MixturePrediction, RefinedQuerySet
from .encoder import EmbeddingBatch, Encoder, EncoderConfig, SceneEmbedding, prepare_batch
from .layers import ParamStore
from .scenario import SceneWindow


class BaseModel:
    """Encoder + decoder sharing one parameter store.

    ``calls`` counts single-window forward passes issued through
    :meth:`predict`; the streaming harness uses it to audit caching.
    """

    kind = "base"

    def __init__(self, enc: EncoderConfig, dec: DecoderConfig, seed: int = 0):
        if enc.width != dec.width:
            raise ValueError("encoder and decoder widths differ")
        self.enc_cfg = enc
        self.dec_cfg = dec
        self.seed = seed
        self.store = ParamStore(np.random.default_rng(seed))
        self.encoder = Encoder(enc, self.store)
        self.decoder = Decoder(dec, self.store)
        self.calls = 0

    def config(self) -> dict:
        return {"encoder": asdict(self.enc_cfg), "decoder": asdict(self.dec_cfg), "seed": self.seed}

    def forward(self, windows: Sequence[SceneWindow], rng: np.random.Generator | None = None,
                dropout: float = 0.0):
        """Batched forward; returns (embedding batch, refined, logits, mu, scale) tensors."""
        emb = self.encoder.forward(prepare_batch(windows, self.enc_cfg), rng, dropout)
        refined, logits, mu, scale = self.decoder.forward(emb.memory, emb.memory_mask, rng, dropout=dropout)
        return emb, refined, logits, mu, scale

    def predict(self, window: SceneWindow) -> tuple[RefinedQuerySet, MixturePrediction, SceneEmbedding]:
        """Single-window inference (encode + decode)."""
        self.calls += 1
        with dm.no_grad():
            emb, refined, logits, mu, scale = self.forward([window])
            pi = dm.softmax(logits, axis=-1)
        return (RefinedQuerySet(refined.data[0].copy(), window.t0),
                MixturePrediction(pi.data[0].copy(), mu.data[0].copy(), scale.data[0].copy(),
                                  window.t0, window.anchor_pose, logits.data[0].copy()),
                emb.item(0))

    def predict_batch(self, windows: Sequence[SceneWindow]) -> tuple[EmbeddingBatch, np.ndarray]:
        """Batched inference returning the embedding batch and refined queries (B, N, d)."""
        with dm.no_grad():
            emb, refined, _, _, _ = self.forward(windows)
        return emb, refined.data

    def digest(self) -> str:
        return self.store.digest()
