"""Text-conditioned grounding network.

Visual and word features are projected to a shared width, passed through
blocks of per-modality self-attention plus cross-attention (or, in the
attenuation variant, a Hadamard product with mean-pooled text), and read out
by a residual head that scores every visual position with a sigmoid.

No positional encodings anywhere: each visual position is classified from
content, which makes the network permutation-equivariant over visual tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import NumericError, Tensor, as_tensor, concat, parameter

CROSS_ATTENTION = "cross_attention"
HADAMARD = "hadamard"

_NEG_INF = -1e9
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    d_v_in: int
    d_t_in: int
    d_model: int = 2048
    n_blocks: int = 2
    heads: int = 6
    dropout_main: float = 0.3
    dropout_text_proj: float = 0.5
    conditioning_mode: str = CROSS_ATTENTION

    def validate(self) -> "ModelConfig":
        if min(self.d_v_in, self.d_t_in, self.d_model, self.n_blocks, self.heads) < 1:
            raise ValueError("all dimensions and counts must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        for rate in (self.dropout_main, self.dropout_text_proj):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout {rate} outside [0, 1)")
        if self.conditioning_mode not in (CROSS_ATTENTION, HADAMARD):
            raise ValueError(f"unknown conditioning mode {self.conditioning_mode!r}")
        return self


@dataclass
class ModelParameters:
    """Named parameter tensors, in a fixed creation order."""

    tensors: dict[str, Tensor]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters({name: parameter(t.data.copy()) for name, t in self.tensors.items()})

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.tensors):
            raise ValueError("parameter names do not match this model")
        for name, tensor in self.tensors.items():
            if arrays[name].shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data = np.array(arrays[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    """Draw all parameters from uniform fan-in ranges; bit-identical per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"{name}.w"] = parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        tensors[f"{name}.b"] = parameter(np.zeros(fan_out))

    def attention(prefix: str) -> None:
        for part in ("q", "k", "v", "o"):
            linear(f"{prefix}.{part}", config.d_model, config.d_model)

    linear("visual_proj", config.d_v_in, config.d_model)
    linear("text_proj", config.d_t_in, config.d_model)
    for block in range(config.n_blocks):
        attention(f"block{block}.self_v")
        if config.conditioning_mode == CROSS_ATTENTION:
            attention(f"block{block}.self_t")
            attention(f"block{block}.cross")
    linear("head.fc1", config.d_model, config.d_model)
    linear("head.fc2", config.d_model, 1)
    return ModelParameters(tensors)


class GroundingModel:
    """Maps (visual features, sentence word features) to per-position probabilities."""

    def __init__(self, config: ModelConfig, params: ModelParameters):
        self.config = config.validate()
        self.params = params

    # -- building blocks ---------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        p = self.params.tensors
        return x @ p[f"{name}.w"] + p[f"{name}.b"]

    def _dropout(self, x: Tensor, rate: float, train: bool, rng) -> Tensor:
        if not train or rate <= 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * keep

    @staticmethod
    def _normalize_tokens(x: Tensor, eps: float = 1e-6) -> Tensor:
        """Parameter-free per-token normalization; keeps activations well scaled."""
        centered = x - x.mean(axis=-1, keepdims=True)
        variance = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * (variance + eps).pow(-0.5)

    def _attention(self, prefix: str, query: Tensor, keys: Tensor,
                   bias: np.ndarray | None, train: bool, rng) -> Tensor:
        """One residual multi-head attention layer; `bias` is added to scores.

        Inputs are normalized per token before the projections (pre-norm), so
        depth does not degrade the score scale.
        """
        batch, t_q, d = query.shape
        t_k = keys.shape[1]
        heads = self.config.heads
        d_h = d // heads

        def split(x: Tensor, length: int) -> Tensor:
            return x.reshape(batch, length, heads, d_h).swapaxes(1, 2)

        query_n = self._normalize_tokens(query)
        keys_n = query_n if keys is query else self._normalize_tokens(keys)
        q = split(self._linear(query_n, f"{prefix}.q"), t_q)
        k = split(self._linear(keys_n, f"{prefix}.k"), t_k)
        v = split(self._linear(keys_n, f"{prefix}.v"), t_k)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_h))
        if bias is not None:
            scores = scores + bias
        context = (scores.softmax(-1) @ v).swapaxes(1, 2).reshape(batch, t_q, d)
        out = self._dropout(self._linear(context, f"{prefix}.o"), self.config.dropout_main, train, rng)
        return query + out

    def _embed_text(self, words: np.ndarray, train: bool, rng) -> Tensor:
        projected = self._linear(as_tensor(words), "text_proj")
        return self._dropout(projected, self.config.dropout_text_proj, train, rng)

    def _visual_stack(self, visual: Tensor, train: bool, rng) -> Tensor:
        for block in range(self.config.n_blocks):
            visual = self._attention(f"block{block}.self_v", visual, visual, None, train, rng)
        return visual

    @staticmethod
    def _text_key_bias(text_mask: np.ndarray) -> np.ndarray:
        # (B, L) with 1 = real token -> additive (B, 1, 1, L) bias
        return np.where(text_mask[:, None, None, :] > 0, 0.0, _NEG_INF)

    def _condition_core(self, visual: Tensor, text: Tensor, text_mask: np.ndarray,
                        train: bool, rng) -> tuple[Tensor, Tensor]:
        """Run the n blocks of self- plus cross-attention; returns (visual, text) rows."""
        batch, n_vis, _ = visual.shape
        n_txt = text.shape[1]
        text_bias = self._text_key_bias(text_mask)

        # In the cross layer every token attends only to the opposing modality
        # (padded text columns stay masked for everyone).
        cross_bias = np.full((batch, 1, n_vis + n_txt, n_vis + n_txt), _NEG_INF)
        cross_bias[:, :, :n_vis, n_vis:] = text_bias[:, :, 0, :][:, :, None, :]
        cross_bias[:, :, n_vis:, :n_vis] = 0.0

        for block in range(self.config.n_blocks):
            visual = self._attention(f"block{block}.self_v", visual, visual, None, train, rng)
            text = self._attention(f"block{block}.self_t", text, text, text_bias, train, rng)
            joint = concat([visual, text], axis=1)
            joint = self._attention(f"block{block}.cross", joint, joint, cross_bias, train, rng)
            visual = joint[:, :n_vis]
            text = joint[:, n_vis:]
        return visual, text

    def _pooled_text(self, text: Tensor, text_mask: np.ndarray) -> Tensor:
        mask = text_mask[:, :, None].astype(np.float64)
        counts = mask.sum(axis=1, keepdims=True)
        return (text * mask).sum(axis=1, keepdims=True) * (1.0 / counts)

    def _head(self, conditioned: Tensor, visual_proj: Tensor) -> Tensor:
        batch, n_vis, _ = conditioned.shape
        hidden = self._linear(conditioned, "head.fc1") + visual_proj
        logits = self._linear(hidden, "head.fc2").reshape(batch, n_vis)
        return logits.sigmoid()

    # -- batched forward (training path) ------------------------------------

    def forward_batch(self, visual: np.ndarray, words: np.ndarray | None,
                      text_mask: np.ndarray | None = None,
                      train: bool = False, rng=None) -> Tensor:
        """Probabilities for a (B, M, d_v_in) batch; words=None runs unconditioned.

        `words` is (B, L, d_t) padded, `text_mask` (B, L) with 1 = real token.
        """
        if visual.ndim != 3:
            raise ValueError("visual batch must be (B, M, d_v_in)")
        visual_proj = self._linear(as_tensor(np.asarray(visual, dtype=np.float64)), "visual_proj")
        if words is None:
            conditioned = self._visual_stack(visual_proj, train, rng)
        else:
            words = np.asarray(words, dtype=np.float64)
            if text_mask is None:
                text_mask = np.ones(words.shape[:2], dtype=np.float64)
            text = self._embed_text(words, train, rng)
            if self.config.conditioning_mode == CROSS_ATTENTION:
                conditioned, _ = self._condition_core(visual_proj, text, text_mask, train, rng)
            else:
                stacked = self._visual_stack(visual_proj, train, rng)
                conditioned = stacked * self._pooled_text(text, text_mask)
        probs = self._head(conditioned, visual_proj)
        if not np.all(np.isfinite(probs.data)):
            raise NumericError("forward pass produced non-finite probabilities")
        return probs

    # -- single-query surface -------------------------------------------------

    def embed_text(self, word_features: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """Project one sentence's (L, d_t) word features to (L, d_model)."""
        word_features = np.asarray(word_features, dtype=np.float64)
        if word_features.ndim != 2 or word_features.shape[0] < 1:
            raise ValueError("word features must be a non-empty (L, d_t) matrix")
        return self._embed_text(word_features[None], train, rng).data[0]

    def condition(self, visual: np.ndarray, text: np.ndarray) -> np.ndarray:
        """Cross-attention conditioning of already-projected features.

        Takes (M, d_model) visual and (L, d_model) text rows; returns the
        (M + L, d_model) output of the final cross-attention layer.
        """
        if self.config.conditioning_mode != CROSS_ATTENTION:
            raise ValueError("condition() requires cross_attention mode parameters")
        visual = np.asarray(visual, dtype=np.float64)
        text = np.asarray(text, dtype=np.float64)
        if visual.ndim != 2 or text.ndim != 2 or min(visual.shape[0], text.shape[0]) < 1:
            raise ValueError("visual and text must be non-empty 2-D matrices")
        mask = np.ones((1, text.shape[0]))
        vis_rows, txt_rows = self._condition_core(
            as_tensor(visual[None]), as_tensor(text[None]), mask, train=False, rng=None)
        return np.concatenate([vis_rows.data[0], txt_rows.data[0]], axis=0)

    def predict(self, visual_in: np.ndarray, sentence: np.ndarray | None = None,
                train: bool = False, rng=None) -> np.ndarray:
        """Per-position grounding probabilities for one segment or full video.

        With `sentence=None` the unconditioned path is used: the visual
        self-attention stack followed by the same head, bypassing text.
        """
        visual_in = np.asarray(visual_in, dtype=np.float64)
        if visual_in.ndim != 2 or visual_in.shape[0] < 1:
            raise ValueError("visual input must be a non-empty (M, d_v_in) matrix")
        words = None if sentence is None else np.asarray(sentence, dtype=np.float64)[None]
        if words is not None and (words.ndim != 3 or words.shape[1] < 1):
            raise ValueError("sentence must be a non-empty (L, d_t) matrix")
        return self.forward_batch(visual_in[None], words, None, train, rng).data[0]

    def hadamard_condition(self, visual: np.ndarray, text: np.ndarray,
                           train: bool = False, rng=None) -> np.ndarray:
        """Attenuation variant: self-attention stack times mean-pooled text.

        Runs regardless of the configured conditioning mode (it only uses the
        visual stack, text projection and head).
        """
        visual = np.asarray(visual, dtype=np.float64)
        text = np.asarray(text, dtype=np.float64)
        if visual.ndim != 2 or text.ndim != 2 or min(visual.shape[0], text.shape[0]) < 1:
            raise ValueError("visual and text must be non-empty 2-D matrices")
        visual_proj = self._linear(as_tensor(visual[None]), "visual_proj")
        stacked = self._visual_stack(visual_proj, train, rng)
        embedded = self._embed_text(text[None], train, rng)
        pooled = self._pooled_text(embedded, np.ones((1, text.shape[0])))
        probs = self._head(stacked * pooled, visual_proj)
        if not np.all(np.isfinite(probs.data)):
            raise NumericError("forward pass produced non-finite probabilities")
        return probs.data[0]


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str | Path, config: ModelConfig, params: ModelParameters,
                    seed: int, extra: dict | None = None) -> None:
    """Write config, seed and all parameter tensors; round-trips bit-exactly."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "seed": int(seed),
        "extra": extra or {},
    }
    arrays = {f"param/{name}": tensor.data for name, tensor in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ModelParameters, dict]:
    """Load a checkpoint written by `save_checkpoint`."""
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        config = ModelConfig(**meta["config"]).validate()
        params = init_parameters(config, meta["seed"])
        params.load_arrays({name[len("param/"):]: blob[name]
                            for name in blob.files if name.startswith("param/")})
    return config, params, meta
