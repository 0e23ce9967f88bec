"""Model checkpoints in the named-tensor container format.

Dynamics are stored per state as ``dyn.A.k``, ``dyn.b.k`` and ``dyn.B.k``
(the Cholesky factor); every other parameter under its module path.  The
header meta carries the config echo, the vocabulary and the scaffold prior.
"""
from __future__ import annotations

import numpy as np

from .config import Config
from .corpus import Vocabulary
from .inference import LanguageModel, SldsModel, build_model
from .scaffold import MarkovPrior
from .tensor import load_tensors, save_tensors


class CheckpointError(ValueError):
    pass


def model_arrays(model) -> dict[str, np.ndarray]:
    arrays = {}
    for name, p in model.named_parameters():
        if name.startswith("dyn."):
            continue
        arrays[name] = p.data
    if isinstance(model, SldsModel):
        arrays.update(model.dyn.checkpoint_arrays())
        arrays["prior.transition"] = model.prior.transition
        arrays["prior.initial"] = model.prior.initial
    return arrays


def save_model(path, model, vocab: Vocabulary | None = None, meta: dict | None = None) -> None:
    info = {"config": model.config.to_dict(), "kind": model.kind, "vocab_size": model.V}
    if vocab is not None:
        info["vocab"] = vocab.itos[4:]
    info.update(meta or {})
    save_tensors(path, model_arrays(model), info)


ARCHITECTURE_KEYS = ("model", "K", "latent_dim", "embed_dim", "hidden", "enc_hidden", "state_context")


def check_compatible(path, stored: Config, expect: Config) -> None:
    for key in ARCHITECTURE_KEYS:
        if getattr(expect, key) != getattr(stored, key):
            raise CheckpointError(
                f"{path}: checkpoint {key}={getattr(stored, key)!r} but config says {getattr(expect, key)!r}"
            )


def load_model(path, expect: Config | None = None):
    """Rebuild a model (and its vocabulary, when stored) from ``path``."""
    arrays, meta = load_tensors(path)
    try:
        cfg = Config.from_dict(meta["config"])
        V = int(meta["vocab_size"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing header field {exc}") from None
    if expect is not None:
        check_compatible(path, cfg, expect)
    model = build_model(cfg, V)
    state = {k: v for k, v in arrays.items() if not k.startswith(("dyn.", "prior."))}
    if isinstance(model, SldsModel):
        K = model.K
        A = np.stack([arrays[f"dyn.A.{k}"] for k in range(K)])
        b = np.stack([arrays[f"dyn.b.{k}"] for k in range(K)])
        B = np.stack([arrays[f"dyn.B.{k}"] for k in range(K)])
        state["dyn.A"] = A
        state["dyn.b"] = b
        state["dyn.B_lower"] = np.tril(B, -1)
        state["dyn.B_logdiag"] = np.log(np.diagonal(B, axis1=1, axis2=2))
        model.prior = MarkovPrior(arrays["prior.transition"], arrays["prior.initial"])
    model.load_state_dict(state)
    vocab = Vocabulary(meta["vocab"]) if "vocab" in meta else None
    return model, vocab, meta


__all__ = ["save_model", "load_model", "check_compatible", "CheckpointError", "LanguageModel", "SldsModel"]
