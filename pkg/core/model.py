import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config.settings import config_hash
from core.encoder import EncoderOutputs, build_encoder, tile_tensor
from core.geo import RoadGraph
from core.keypoint_extractor import (Afim, AfimOutputs, HeatmapPair, KeypointSet, as_map, build_heads,
                                     decode_heads, extract_keypoints, keypoint_loss, smooth_heatmap)
from core.nn.checkpoint import read_arrays, write_arrays
from core.nn.layers import INIT_SCHEME, Module
from core.nn.tensor import Tensor, no_grad
from core.rasterizer import SupervisionTile, Tile
from core.relation_predictor import (LinkCandidates, build_candidates, build_relation_predictor, relation_loss,
                                     sample_pairs, total_loss)

MODEL_FILE = "model.bin"


@dataclass
class LossTerms:
    l_kp: Tensor
    l_rel: Tensor
    total: Tensor


@dataclass
class TileInference:
    origin_cell: Tuple[int, int]
    keypoints: KeypointSet
    candidates: LinkCandidates
    heatmaps: HeatmapPair
    smoothed: np.ndarray


class MapInferenceModel(Module):
    """
    Grid encoder, feature interaction, keypoint/region decoders and relation predictor.
    Training (ground-truth keypoints) and inference (detected keypoints) share `relate`.
    """

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings
        model = settings["model"]
        self.encoder = build_encoder(settings)
        self.afim = Afim(model["channels"], model["afim_resolution"], model["afim_heads"], settings["seed"],
                         literal_concat=model["afim_shared_fusion"], ablated=settings["ablations"]["ai"])
        self.kp_head, self.region_head = build_heads(settings)
        self.relation = build_relation_predictor(settings)

    def heatmaps(self, x: Tensor) -> Tuple[EncoderOutputs, AfimOutputs, HeatmapPair]:
        enc = self.encoder(x)
        inter = self.afim(enc.e_s, enc.e_k)
        return enc, inter, decode_heads(inter.e_ek, enc.e_s, self.kp_head, self.region_head)

    def relate(self, e_ek: Tensor, kps: KeypointSet, cands: LinkCandidates) -> Tensor:
        return self.relation(e_ek, kps, cands, self.settings["relation"]["d_l"])

    def forward(self, x: Tensor):
        return self.heatmaps(x)

    def training_loss(self, tile: Tile, sup: SupervisionTile, gt: RoadGraph) -> LossTerms:
        """Keypoint/region loss plus the relation loss on ground-truth keypoints of this tile."""
        relation = self.settings["relation"]
        train = self.settings["train"]
        _, inter, pair = self.heatmaps(tile_tensor(tile))
        l_kp = keypoint_loss(pair, sup, train["lambda1"])

        kps = KeypointSet.from_xy(sup.keypoints)
        samples = sample_pairs(gt, relation["n_r"], relation["d_kp"], vertex_ids=sup.vertex_ids.tolist())
        cands = samples.candidates()
        labels = samples.labels()
        if len(cands):
            distinct = np.any(kps.cells[cands.src] != kps.cells[cands.dst], axis=1)
            cands = LinkCandidates(cands.src[distinct], cands.dst[distinct])
            labels = labels[distinct]
        probs = self.relate(inter.e_ek, kps, cands)
        l_rel = relation_loss(probs, labels, len(kps))
        return LossTerms(l_kp, l_rel, total_loss(l_kp, l_rel, train["lambda2"]))

    def infer_tile(self, tile: Tile) -> TileInference:
        kp_cfg = self.settings["keypoints"]
        with no_grad():
            _, inter, pair = self.heatmaps(tile_tensor(tile))
            smoothed = smooth_heatmap(as_map(pair.o_k), kp_cfg["sigma_smooth"])
            kps = extract_keypoints(pair.o_k, kp_cfg["sigma_smooth"], kp_cfg["threshold"], kp_cfg["window"])
            cands = build_candidates(kps.xy(), self.settings["relation"]["d_cand"])
            self.relate(inter.e_ek, kps, cands)
        logging.debug(f"Tile {tile.name}: {len(kps)} keypoints, {len(cands)} link candidates")
        return TileInference(tile.origin_cell, kps, cands, pair, smoothed)

    def save(self, out_dir: str) -> Path:
        return write_arrays(str(Path(out_dir) / MODEL_FILE), self.state_dict(), config_hash(self.settings), INIT_SCHEME)


def load_model(settings: Dict[str, Any], checkpoint_dir: Optional[str] = None) -> MapInferenceModel:
    """Builds the model for `settings`, loading weights when a checkpoint directory is given."""
    model = MapInferenceModel(settings)
    if checkpoint_dir is not None:
        arrays, _ = read_arrays(str(Path(checkpoint_dir) / MODEL_FILE), expected_hash=config_hash(settings))
        model.load_state_dict(arrays)
        logging.info(f"Loaded {len(arrays)} parameter arrays from {checkpoint_dir}")
    return model
