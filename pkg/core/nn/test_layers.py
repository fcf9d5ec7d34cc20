import numpy as np
import pytest

from config.settings import config_hash, default_settings
from core.errors import ConfigError, MissingInputError, ShapeMismatchError
from core.nn.checkpoint import load_optimizer_state, read_arrays, save_optimizer_state, write_arrays
from core.nn.layers import INIT_SCHEME, Conv2d, ConvTranspose2d, Linear, Module, init_uniform
from core.nn.optim import Adam
from core.nn.tensor import Tensor, no_grad, precision


class _Tiny(Module):
    def __init__(self, seed=0):
        self.conv = Conv2d("tiny.conv", 2, 3, 3, seed=seed)
        self.up = ConvTranspose2d("tiny.up", 3, 2, seed=seed)
        self.heads = [Linear("tiny.head0", 2, 1, seed=seed), Linear("tiny.head1", 2, 1, seed=seed)]

    def forward(self, x):
        return self.up(self.conv(x))


def test_init_depends_only_on_name_and_seed():
    a = init_uniform("enc.stem.weight", (3, 3, 11, 32), 99, seed=7)
    b = init_uniform("enc.stem.weight", (3, 3, 11, 32), 99, seed=7)
    c = init_uniform("enc.stem.weight", (3, 3, 11, 32), 99, seed=8)
    d = init_uniform("enc.s1.weight", (3, 3, 11, 32), 99, seed=7)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert np.abs(a).max() <= 1 / np.sqrt(99)


def test_named_params_are_sorted_and_complete():
    model = _Tiny()
    names = list(model.named_params())
    assert names == sorted(names)
    assert "tiny.head1.bias" in names and "tiny.up.weight" in names
    assert model.param_count() == (3 * 3 * 2 * 3 + 3) + (2 * 2 * 3 * 2 + 2) + 2 * (2 + 1)


def test_layer_output_shapes():
    x = Tensor(np.zeros((1, 8, 8, 2)))
    assert _Tiny()(x).shape == (1, 16, 16, 2)
    assert Conv2d("c", 2, 4, 3, stride=2)(x).shape == (1, 4, 4, 4)
    with pytest.raises(ShapeMismatchError):
        Linear("fc", 3, 2)(Tensor(np.zeros((4, 5))))


def test_state_dict_round_trip_and_shape_check():
    source, target = _Tiny(seed=1), _Tiny(seed=2)
    target.load_state_dict(source.state_dict())
    for name, p in target.named_params().items():
        np.testing.assert_array_equal(p.data, source.named_params()[name].data)

    state = source.state_dict()
    state["tiny.conv.weight"] = np.zeros((1, 1, 2, 3))
    with pytest.raises(ShapeMismatchError, match="tiny.conv.weight"):
        target.load_state_dict(state)
    del state["tiny.conv.weight"]
    with pytest.raises(ShapeMismatchError, match="missing"):
        target.load_state_dict(state)


def test_checkpoint_round_trip(tmp_path):
    digest = config_hash(default_settings())
    model = _Tiny(seed=3)
    path = write_arrays(str(tmp_path / "model.bin"), model.state_dict(), digest, INIT_SCHEME)
    arrays, header = read_arrays(str(path), expected_hash=digest)
    assert header == {"config_hash": digest, "init_scheme": INIT_SCHEME}
    assert list(arrays) == sorted(model.named_params())
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(arrays[name], value.astype(np.float32))

    raw = path.read_bytes()
    assert raw[:4] == b"DGMC"
    assert raw[8:40].hex() == digest


def test_checkpoint_rejects_other_config(tmp_path):
    settings = default_settings()
    digest = config_hash(settings)
    write_arrays(str(tmp_path / "model.bin"), {"w": np.ones(2)}, digest, INIT_SCHEME)
    settings["model"]["channels"] = 32
    with pytest.raises(ConfigError, match="different model config"):
        read_arrays(str(tmp_path / "model.bin"), expected_hash=config_hash(settings))
    with pytest.raises(MissingInputError):
        read_arrays(str(tmp_path / "absent.bin"))


@pytest.mark.parametrize("keep", [3, 20, 45, -1])
def test_truncated_checkpoint_is_a_shape_mismatch(tmp_path, keep):
    digest = config_hash(default_settings())
    path = write_arrays(str(tmp_path / "model.bin"), _Tiny(seed=1).state_dict(), digest, INIT_SCHEME)
    path.write_bytes(path.read_bytes()[:keep])
    with pytest.raises(ShapeMismatchError):
        read_arrays(str(path), expected_hash=digest)


def test_corrupt_training_state_is_reported(tmp_path):
    digest = config_hash(default_settings())
    model = _Tiny(seed=2)
    save_optimizer_state(str(tmp_path), model.named_params(), digest, INIT_SCHEME, epoch=1)
    (tmp_path / "state.json").write_text('{"epoch": 1, "step_co', encoding="utf-8")
    with pytest.raises(MissingInputError, match="not valid JSON"):
        load_optimizer_state(str(tmp_path), model.named_params(), digest)


def test_optimizer_state_resume(tmp_path):
    digest = config_hash(default_settings())
    with precision(np.float64):
        model = _Tiny(seed=4)
    opt = Adam(model.parameters(), lr=1e-2)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 6, 6, 2)))
    for _ in range(3):
        opt.zero_grad()
        model(x).sum().backward()
        opt.step()
    save_optimizer_state(str(tmp_path), model.named_params(), digest, INIT_SCHEME, epoch=2)

    with precision(np.float64):
        restored = _Tiny(seed=4)
    epoch = load_optimizer_state(str(tmp_path), restored.named_params(), digest)
    assert epoch == 2
    for name, p in restored.named_params().items():
        original = model.named_params()[name]
        assert p.step_count == original.step_count == 3
        np.testing.assert_allclose(p.adam_m, original.adam_m, rtol=1e-6)
        np.testing.assert_allclose(p.adam_v, original.adam_v, rtol=1e-6)


def test_no_grad_records_nothing():
    model = _Tiny()
    with no_grad():
        out = model(Tensor(np.ones((1, 4, 4, 2))))
    assert not out.requires_grad and out._parents == ()
