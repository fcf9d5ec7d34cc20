import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from config.settings import config_hash
from core.errors import MissingInputError, NonFiniteError
from core.geo import RoadGraph, read_geojson
from core.model import MapInferenceModel, load_model
from core.nn.checkpoint import STATE_FILE, load_optimizer_state, save_optimizer_state
from core.nn.layers import INIT_SCHEME
from core.nn.optim import Adam, step_lr
from core.nn.tensor import no_grad
from store.tile_store import TileStore

LOSS_LOG = "loss_log.csv"
LOG_COLUMNS = ["epoch", "lr", "L_kp", "L_rel", "L", "val_L"]
DENSE_GRAPH_FILE = "graph_dense.geojson"
SPLIT_NAMES = ("train", "val", "test")


def assign_splits(names: Sequence[str], fractions: Sequence[float], seed: int) -> Dict[str, str]:
    """
    Seeded train/val/test assignment of tile names. Counts are rounded from the fractions;
    whenever there are tiles at all, at least one lands in train.
    """
    names = sorted(names)
    n = len(names)
    order = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(fractions[0] * n))) if n else 0
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    bounds = (n_train, n_train + n_val)
    splits = {}
    for rank, idx in enumerate(order):
        split = SPLIT_NAMES[0] if rank < bounds[0] else SPLIT_NAMES[1] if rank < bounds[1] else SPLIT_NAMES[2]
        splits[names[idx]] = split
    return splits


@dataclass
class TrainingData:
    store: TileStore
    gt: RoadGraph
    train_names: List[str]
    val_names: List[str]


def load_training_data(store_dir: str) -> TrainingData:
    with TileStore(store_dir) as store:
        gt = read_geojson(str(Path(store_dir) / DENSE_GRAPH_FILE), store.spec, two_way=False)
        train_names = [n for n in store.tile_names("train") if store.has_supervision(n)]
        val_names = [n for n in store.tile_names("val") if store.has_supervision(n)]
    if not train_names:
        raise MissingInputError(f"tile store {store_dir} has no supervised tiles in the train split")
    logging.info(f"Training on {len(train_names)} tiles, validating on {len(val_names)}")
    return TrainingData(store, gt, train_names, val_names)


def _check_finite(value: float, what: str, tile: str) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} became {value} on {tile}")


def run_epoch(model: MapInferenceModel, optimizer: Adam, data: TrainingData, order: Sequence[str],
              batch_size: int = 1) -> Tuple[float, float, float]:
    """One pass over `order`; returns the mean (L_kp, L_rel, L) over tiles."""
    sums = np.zeros(3)
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        optimizer.zero_grad()
        for name in batch:
            terms = model.training_loss(data.store.read_tile(name), data.store.read_supervision(name), data.gt)
            _check_finite(terms.total.item(), "training loss", name)
            (terms.total * (1.0 / len(batch))).backward()
            sums += (terms.l_kp.item(), terms.l_rel.item(), terms.total.item())
        optimizer.step()
    l_kp, l_rel, total = sums / max(1, len(order))
    return float(l_kp), float(l_rel), float(total)


def validation_loss(model: MapInferenceModel, data: TrainingData) -> float:
    if not data.val_names:
        return float("nan")
    total = 0.0
    with no_grad():
        for name in data.val_names:
            terms = model.training_loss(data.store.read_tile(name), data.store.read_supervision(name), data.gt)
            total += terms.total.item()
    return total / len(data.val_names)


def _read_log(out_dir: Path, completed: int) -> pd.DataFrame:
    path = out_dir / LOSS_LOG
    if not path.exists():
        return pd.DataFrame(columns=LOG_COLUMNS)
    log = pd.read_csv(path)
    return log[log["epoch"] <= completed].reset_index(drop=True)


def train(settings: Dict[str, Any], store_dir: str, out_dir: str, resume: bool = False) -> pd.DataFrame:
    """
    Trains the model on the train split of a tile store, saving weights, optimizer state and the
    loss log after every epoch. With `resume`, training continues from the state in `out_dir`
    and log rows past the restored epoch are dropped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = settings["train"]
    data = load_training_data(store_dir)

    completed = 0
    if resume and (out / STATE_FILE).exists():
        model = load_model(settings, str(out))
        completed = load_optimizer_state(str(out), model.named_params(), config_hash(settings))
    else:
        model = MapInferenceModel(settings)
    optimizer = Adam(model.parameters(), lr=train_cfg["learning_rate"])
    log = _read_log(out, completed)
    logging.info(f"Model has {model.param_count()} parameters; starting after epoch {completed}")

    for epoch in range(completed, train_cfg["epochs"]):
        optimizer.lr = step_lr(train_cfg["learning_rate"], epoch, train_cfg["lr_step_epochs"], train_cfg["lr_gamma"])
        rng = np.random.default_rng([settings["seed"], epoch])
        order = [data.train_names[i] for i in rng.permutation(len(data.train_names))]
        l_kp, l_rel, total = run_epoch(model, optimizer, data, order, train_cfg["batch_size"])
        val = validation_loss(model, data)

        row = pd.DataFrame([[epoch + 1, optimizer.lr, l_kp, l_rel, total, val]], columns=LOG_COLUMNS)
        log = row if log.empty else pd.concat([log, row], ignore_index=True)
        log.to_csv(out / LOSS_LOG, index=False, float_format="%.6f")
        model.save(str(out))
        save_optimizer_state(str(out), model.named_params(), config_hash(settings), INIT_SCHEME, epoch + 1)
        logging.info(f"Epoch {epoch + 1}/{train_cfg['epochs']}: lr={optimizer.lr:.2e} "
                     f"L_kp={l_kp:.4f} L_rel={l_rel:.4f} L={total:.4f} val_L={val:.4f}")

    if completed >= train_cfg["epochs"]:
        logging.warning(f"Nothing to do: {completed} epochs already completed")
    return log
