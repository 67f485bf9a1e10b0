import json

import numpy as np
import pytest
import torch

from osmp.encoder import DTYPE, Encoder, EncoderConfig
from osmp.io import (
    ModelFormatError,
    load_encoder,
    load_policy,
    save_encoder,
    save_policy,
    shaping_from_header,
)
from osmp.policy import Policy, PositiveNet, ShapingState
from conftest import random_encoder, randomize


def _same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k


def test_encoder_round_trip(tmp_path, rng):
    enc = random_encoder(n=3, n_blocks=4, conditioning=True, seed=5)
    path = tmp_path / "enc.osmp"
    save_encoder(enc, path)
    back = load_encoder(path)
    _same_state(enc, back)
    assert back.cfg == enc.cfg
    x = torch.as_tensor(rng.normal(size=(10, 3)), dtype=DTYPE)
    z = torch.as_tensor(rng.uniform(size=10), dtype=DTYPE)
    with torch.no_grad():
        assert torch.equal(enc.encode(x, z), back.encode(x, z))


def test_policy_round_trip_with_learned_nets(tmp_path, rng):
    omega = randomize(PositiveNet(2, hidden=16, n_layers=3), 1, 0.5)
    speed = randomize(PositiveNet(2, hidden=8, n_layers=2, eps=0.01), 2, 0.5)
    pol = Policy(random_encoder(n=2, n_blocks=3, seed=3), alpha=2.0, beta=0.5, radius=0.8,
                 omega=omega, speed_net=speed, eps_inv=1e-5, jacobian="fd")
    pol.epochs_trained = 17
    shape = ShapingState(s_f=1.5, x_o=(0.1, -0.2), s_omega=2.0, gate_enabled=True)
    path = tmp_path / "pol.osmp"
    save_policy(pol, path, shape, extra={"note": "x"})
    back, header = load_policy(path, with_header=True)
    _same_state(pol, back)
    assert back.epochs_trained == 17 and back.jacobian_method == "fd"
    assert (back.alpha, back.beta, back.radius, back.eps_inv) == (2.0, 0.5, 0.8, 1e-5)
    assert shaping_from_header(header) == shape
    assert header["extra"] == {"note": "x"}
    x = rng.normal(scale=0.5, size=(8, 2))
    np.testing.assert_array_equal(back.velocity_numpy(x), pol.velocity_numpy(x))


def test_constant_omega_policy(tmp_path):
    pol = Policy(Encoder(EncoderConfig(n=2, n_blocks=1)), omega=0.25)
    save_policy(pol, tmp_path / "p")
    back = load_policy(tmp_path / "p")
    assert back.omega_const == 0.25 and back.speed_net is None
    assert (tmp_path / "p").exists()


def test_load_errors(tmp_path):
    with pytest.raises(ModelFormatError):
        load_policy(tmp_path / "missing")
    junk = tmp_path / "junk"
    junk.write_bytes(b"not a model")
    with pytest.raises(ModelFormatError):
        load_policy(junk)
    enc_path = tmp_path / "enc"
    save_encoder(Encoder(EncoderConfig(n=2, n_blocks=1)), enc_path)
    with pytest.raises(ModelFormatError):
        load_policy(enc_path)
    pol_path = tmp_path / "pol"
    save_policy(Policy(Encoder(EncoderConfig(n=2, n_blocks=1))), pol_path)
    with pytest.raises(ModelFormatError):
        load_encoder(pol_path)


def _rewrite(path, mutate):
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    mutate(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def test_version_and_shape_mismatch(tmp_path):
    path = tmp_path / "pol"
    save_policy(Policy(Encoder(EncoderConfig(n=2, n_blocks=2))), path)

    def bump(arrays):
        h = json.loads(str(arrays["__header__"]))
        h["format_version"] = 99
        arrays["__header__"] = np.array(json.dumps(h))

    _rewrite(path, bump)
    with pytest.raises(ModelFormatError):
        load_policy(path)

    save_policy(Policy(Encoder(EncoderConfig(n=2, n_blocks=2))), path)

    def drop(arrays):
        arrays.pop(next(k for k in arrays if k != "__header__"))

    _rewrite(path, drop)
    with pytest.raises(ModelFormatError):
        load_policy(path)
