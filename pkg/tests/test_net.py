import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tagi.net import (
    MAGIC,
    Model,
    ModelFormatError,
    NetworkSpec,
    ObservationModel,
    copy_model,
    dumps,
    init_posterior,
    load,
    loads,
    save,
)


def small_model(seed=0):
    spec = NetworkSpec.from_widths([3, 4, 2], ["tanh", "identity"])
    return Model(spec, init_posterior(spec, seed), ObservationModel(0.2), seed, {"note": "x"})


@given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(0, 2**16))
def test_roundtrip(widths, seed):
    spec = NetworkSpec.from_widths(widths, ["relu"] * (len(widths) - 2) + ["identity"])
    m = Model(spec, init_posterior(spec, seed), ObservationModel(0.3), seed)
    m2 = loads(dumps(m))
    assert m2.spec == spec
    assert m2.posterior.equal(m.posterior)
    assert m2.obs.sigma_v == 0.3
    assert dumps(m2) == dumps(m)


def test_save_load(tmp_path):
    m = small_model()
    save(m, tmp_path / "m.tagi")
    assert load(tmp_path / "m.tagi").posterior.equal(m.posterior)


def test_bad_magic():
    with pytest.raises(ModelFormatError, match="magic"):
        loads(b"XXXX" + dumps(small_model())[4:])


def test_truncated_payload():
    raw = dumps(small_model())
    with pytest.raises(ModelFormatError, match="expected"):
        loads(raw[:-8])


def test_wrong_version():
    raw = dumps(small_model())
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = raw[8 : 8 + hlen].replace(b'"format_version": 1', b'"format_version": 9')
    with pytest.raises(ModelFormatError, match="version"):
        loads(MAGIC + struct.pack("<I", len(header)) + header + raw[8 + hlen :])


def test_nonfinite_payload():
    m = small_model()
    m.posterior.layers[0].w_mean[0, 0] = np.nan
    with pytest.raises(ValueError):
        dumps(m)


def test_negative_variance_rejected():
    m = small_model()
    m.posterior.layers[1].b_var[0] = -1.0
    with pytest.raises(ValueError, match="negative"):
        m.posterior.check()


def test_init_posterior_scaling():
    spec = NetworkSpec.from_widths([100, 50, 1], ["relu", "identity"])
    p = init_posterior(spec, 0, var_gain=0.5, mean_gain=2.0)
    assert np.allclose(p.layers[0].w_var, 0.5 / 100)
    assert np.allclose(p.layers[1].b_var, 0.5 / 50)
    assert np.all(p.layers[0].b_mean == 0)
    assert abs(p.layers[0].w_mean.var() - 2.0 / 100) < 0.003


def test_init_deterministic():
    spec = NetworkSpec.from_widths([3, 3, 1], ["tanh", "identity"])
    assert init_posterior(spec, 7).equal(init_posterior(spec, 7))
    assert not init_posterior(spec, 7).equal(init_posterior(spec, 8))


def test_copy_is_deep():
    m = small_model()
    c = copy_model(m)
    c.posterior.layers[0].w_mean += 1
    c.meta["note"] = "y"
    assert m.meta["note"] == "x"
    assert not c.posterior.equal(m.posterior)


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec.from_widths([3], [])
    with pytest.raises(ValueError):
        NetworkSpec.from_widths([3, 0, 1], ["relu", "identity"])
    with pytest.raises(ValueError):
        NetworkSpec.from_widths([3, 2, 1], ["relu"])
    with pytest.raises(ValueError):
        ObservationModel(-1.0)
