"""Versioned single-file model storage.

A model file is a NumPy ``.npz`` archive: every tensor of the module state
(frozen random features and trained weights) under its state-dict name,
plus a JSON header under ``__header__`` with the architecture, the seed and
the default shaping state. Arrays are stored raw, so save/load is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .encoder import Encoder, EncoderConfig
from .policy import DEFAULT_SHAPING, Policy, PositiveNet, ShapingState

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


class ModelFormatError(ValueError):
    pass


def _write(path, header: dict, module: torch.nn.Module):
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    arrays[HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:  # keeps the exact file name (no implicit .npz suffix)
        np.savez(fh, **arrays)


def _read(path):
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"no such model file: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    if HEADER_KEY not in arrays:
        raise ModelFormatError("model file has no header")
    header = json.loads(str(arrays.pop(HEADER_KEY)))
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {header.get('format_version')}")
    return header, arrays


def _load_state(module: torch.nn.Module, arrays):
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ModelFormatError(f"model arrays do not match the architecture: {exc}") from exc


def save_encoder(encoder: Encoder, path):
    header = {"format_version": FORMAT_VERSION, "kind": "encoder",
              "encoder": encoder.cfg.to_dict(), "seed": encoder.seed}
    _write(path, header, encoder)


def load_encoder(path) -> Encoder:
    header, arrays = _read(path)
    if header.get("kind") != "encoder":
        raise ModelFormatError("file does not hold an encoder")
    enc = Encoder(EncoderConfig(**header["encoder"]), seed=header["seed"])
    _load_state(enc, arrays)
    return enc


def policy_header(policy: Policy, shaping: ShapingState = DEFAULT_SHAPING) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "policy",
        "encoder": policy.encoder.cfg.to_dict(),
        "seed": policy.encoder.seed,
        "hopf": {"alpha": policy.alpha, "beta": policy.beta, "radius": policy.radius,
                 "eps_omega": policy.eps_omega},
        "omega": ({"mode": "constant", "value": policy.omega_const} if policy.omega_net is None
                  else {"mode": "learned", **policy.omega_net.spec()}),
        "speed": (None if policy.speed_net is None else policy.speed_net.spec()),
        "eps_inv": policy.eps_inv,
        "jacobian": policy.jacobian_method,
        "fd_step": policy.fd_step,
        "epochs_trained": policy.epochs_trained,
        "shaping": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(shaping).items()},
    }


def save_policy(policy: Policy, path, shaping: ShapingState = DEFAULT_SHAPING, extra=None):
    header = policy_header(policy, shaping)
    if extra:
        header["extra"] = extra
    _write(path, header, policy)


def load_policy(path, with_header=False):
    """Return the policy (and the header dict when ``with_header``)."""
    header, arrays = _read(path)
    if header.get("kind") != "policy":
        raise ModelFormatError("file does not hold a policy")
    enc = Encoder(EncoderConfig(**header["encoder"]), seed=header["seed"])
    om = header["omega"]
    if om["mode"] == "constant":
        omega = om["value"]
    else:
        omega = PositiveNet(om["in_dim"], om["hidden"], om["n_layers"], om["eps"])
    sp = header["speed"]
    speed = None if sp is None else PositiveNet(sp["in_dim"], sp["hidden"], sp["n_layers"], sp["eps"])
    h = header["hopf"]
    pol = Policy(enc, h["alpha"], h["beta"], h["radius"], omega, speed, header["eps_inv"],
                 h["eps_omega"], header["jacobian"], header["fd_step"])
    _load_state(pol, arrays)
    pol.epochs_trained = int(header.get("epochs_trained", 0))
    if with_header:
        return pol, header
    return pol


def shaping_from_header(header: dict) -> ShapingState:
    s = dict(header.get("shaping") or {})
    if s.get("x_o") is not None:
        s["x_o"] = tuple(s["x_o"])
    return ShapingState(**s)

