import numpy as np
import pytest

from config.settings import merge_settings
from core.encoder import tile_tensor
from core.errors import ConfigError
from core.geo import RoadGraph
from core.model import MODEL_FILE, MapInferenceModel, load_model
from core.rasterizer import N_CHANNELS, Tile, render_supervision
from core.relation_predictor import LinkCandidates

SIZE = 32


def _settings(**ablations):
    return merge_settings({
        "seed": 3,
        "model": {"channels": 8, "afim_resolution": 4, "afim_heads": 2, "keypoint_heads": 2,
                  "link_heads": 2, "classifier_hidden": 16},
        "relation": {"d_l": 20.0, "d_cand": 12.0},
        "ablations": ablations,
    })


def _world():
    # an L-shaped road with a spur, all inside one 32x32 tile
    gt = RoadGraph({0: (4.5, 4.5), 1: (16.5, 4.5), 2: (28.5, 4.5), 3: (16.5, 20.5), 4: (16.5, 28.5)},
                   [(0, 1), (1, 0), (1, 2), (2, 1), (1, 3), (3, 1), (3, 4), (4, 3)])
    data = np.random.default_rng(0).random((SIZE, SIZE, N_CHANNELS)).astype(np.float32)
    tile = Tile((0, 0), data, np.ones(N_CHANNELS))
    return gt, tile, render_supervision(gt, (0, 0), tile_size=SIZE)


def test_training_loss_is_finite_and_differentiable():
    gt, tile, sup = _world()
    model = MapInferenceModel(_settings())
    terms = model.training_loss(tile, sup, gt)
    assert np.isfinite(terms.l_kp.item()) and np.isfinite(terms.l_rel.item())
    assert terms.l_rel.item() > 0
    np.testing.assert_allclose(terms.total.item(), terms.l_kp.item() + terms.l_rel.item(), rtol=1e-5)

    model.zero_grad()
    terms.total.backward()
    params = model.named_params()
    assert np.any(params["relation.fc2.weight"].grad != 0)
    assert np.any(params["encoder.stem.weight"].grad != 0)


def test_lambda2_zero_drops_relation_term():
    gt, tile, sup = _world()
    settings = _settings()
    settings["train"]["lambda2"] = 0.0
    terms = MapInferenceModel(settings).training_loss(tile, sup, gt)
    assert terms.total is terms.l_kp


def test_training_and_inference_share_the_relation_path():
    gt, tile, sup = _world()
    model = MapInferenceModel(_settings())
    inference = model.infer_tile(tile)
    if len(inference.candidates) == 0:
        pytest.skip("untrained model found no link candidates")
    _, inter, _ = model.heatmaps(tile_tensor(tile))
    fresh = LinkCandidates(inference.candidates.src, inference.candidates.dst)
    again = model.relate(inter.e_ek, inference.keypoints, fresh)
    np.testing.assert_allclose(again.data, inference.candidates.probability, rtol=1e-6, atol=1e-7)


def test_inference_outputs_are_consistent():
    _, tile, _ = _world()
    inference = MapInferenceModel(_settings()).infer_tile(tile)
    assert inference.heatmaps.o_k.shape == (1, SIZE, SIZE, 1)
    assert inference.smoothed.shape == (SIZE, SIZE)
    kps = inference.keypoints
    assert np.all((kps.cells >= 0) & (kps.cells < SIZE))
    cands = inference.candidates
    if len(cands):
        assert np.all((cands.probability > 0) & (cands.probability < 1))
        lengths = np.linalg.norm(kps.xy()[cands.src] - kps.xy()[cands.dst], axis=1)
        assert np.all(lengths <= 12.0)


def test_dual_decoding_ablation_only_touches_heads():
    full = MapInferenceModel(_settings()).state_dict()
    shared = MapInferenceModel(_settings(dd=True)).state_dict()
    assert not any(name.startswith("head_region.") for name in shared)
    assert set(full) - set(shared) == {name for name in full if name.startswith("head_region.")}
    for name, value in shared.items():
        np.testing.assert_array_equal(value, full[name])


def test_save_and_load_roundtrip(tmp_path):
    _, tile, _ = _world()
    settings = _settings()
    model = MapInferenceModel(settings)
    path = model.save(str(tmp_path))
    assert path.name == MODEL_FILE

    back = load_model(settings, str(tmp_path))
    for name, value in model.state_dict().items():
        np.testing.assert_allclose(back.state_dict()[name], value.astype(np.float32))
    np.testing.assert_allclose(back.infer_tile(tile).smoothed, model.infer_tile(tile).smoothed, atol=1e-6)


def test_load_with_other_config_is_rejected(tmp_path):
    MapInferenceModel(_settings()).save(str(tmp_path))
    with pytest.raises(ConfigError):
        load_model(_settings(le=True), str(tmp_path))
