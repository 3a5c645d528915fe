"""Window rollout, training loop, and checkpoint persistence.

A rollout runs the recurrence over one window: during the observation
phase every input is ground truth, and from the first prediction step on
the model consumes its own decoded predictions, both for a pedestrian's
own offsets and for the displacements between pedestrians. Predictions
emitted during the observation phase are by-products and are never
consumed or scored.

Checkpoint byte layout (version 1, all integers little-endian):

    offset 0   8 bytes   magic b"SRALCKPT"
    offset 8   u32       format version
    offset 12  u32       header length N
    offset 16  N bytes   UTF-8 JSON header
    then, for each entry of header["arrays"] in order, the raw row-major
    float64 little-endian payload (8 * prod(shape) bytes), and nothing
    after the last array.

The JSON header holds the model config, user metadata, the array
directory [{"name", "shape"}, ...], and optionally the Adam state (its
moment arrays appear in the directory as "adam.m.<name>"/"adam.v.<name>").
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from . import diffcore as dc
from . import model as md
from .data import DataError, TrajectoryWindow, rotate_window
from .diffcore import Tensor
from .model import AttentionStrategy, ModelConfig, ModelParams, SceneState

CLIP_NORM = 10.0


class RolloutMode(Enum):
    """TEACHER_FORCED_OBS requires the window to carry future truth (training
    and evaluation); FREE runs from observations alone. Both feed ground
    truth during the observation phase and model feedback afterward."""

    TEACHER_FORCED_OBS = "teacher_forced_obs"
    FREE = "free"


@dataclass
class RolloutResult:
    ped_ids: list
    anchors: dict                 # ped -> (2,) absolute anchor position
    predicted_nabs: dict          # ped -> (pred_len, 2) offsets
    predicted_abs: dict           # ped -> (pred_len, 2) absolute positions
    attention: Optional[list]     # per step: ped -> (neighbor ids, weights)
    pred_tensors: dict            # ped -> list of (2, 1) offset tensors


def scene_step(params: ModelParams, state: SceneState, nabs: Mapping,
               abs_pos: Mapping, record_attention: bool = False):
    """Advance every present pedestrian by one time step.

    nabs and abs_pos map present pedestrians to (2, 1) tensors. Relation
    states update first; attention and social context then read the motion
    states of the previous step; motion updates and offset predictions run
    last. Returns (predictions, attention) dicts for present pedestrians.
    """
    strategy = params.config.strategy
    peds = [p for p in state.ped_ids if state.present[p]]
    for p in peds:
        if p not in nabs or p not in abs_pos:
            raise md.UnknownPedestrianError(p)
    if strategy is AttentionStrategy.SRA:
        # only this scoring rule reads the pairwise relation states
        for i in peds:
            for j in peds:
                if i == j:
                    continue
                pair = (i, j)
                state.ensure_pair(pair)
                e_ij = md.embed_relative(params, abs_pos[i], abs_pos[j])
                md.relation_step(params, state, pair, e_ij)
    contexts = {}
    attention = {} if record_attention else None
    for i in peds:
        neigh = state.neighbors(i)
        weights = None
        if strategy is not AttentionStrategy.NONE and neigh:
            logits = []
            for j in neigh:
                e_rel = None
                if strategy is AttentionStrategy.RA:
                    e_rel = md.ra_relative_embedding(params, abs_pos[i], abs_pos[j])
                r_ij = state.r[(i, j)] if strategy is AttentionStrategy.SRA else None
                logits.append(md.attention_logits(
                    params, strategy, r_ij, state.h[i], state.h[j], e_rel))
            weights = md.attention_weights(logits)
            if record_attention:
                attention[i] = (list(neigh), weights.values.reshape(-1).copy())
        contexts[i] = md.social_context(state, i, weights, strategy)
    predictions = {}
    for i in peds:
        e_i = md.embed_position(params, nabs[i])
        md.motion_step(params, state, i, e_i, contexts[i])
        predictions[i] = md.predict_offset(params, state.h[i])
    return predictions, attention


def rollout(params: ModelParams, window: TrajectoryWindow,
            mode: RolloutMode = RolloutMode.TEACHER_FORCED_OBS,
            record_attention: bool = False) -> RolloutResult:
    """Run the recurrence over one window and decode predictions.

    Gradients flow through the whole prediction phase when a tape is open,
    including through the fed-back positions.
    """
    cfg = params.config
    peds = list(window.ped_ids)
    if not peds:
        raise DataError("rollout needs at least one pedestrian")
    if window.obs_len != cfg.obs_len:
        raise DataError(
            f"window observation length {window.obs_len} != model's {cfg.obs_len}")
    needed = cfg.window_len if mode is RolloutMode.TEACHER_FORCED_OBS else cfg.obs_len
    if window.n_frames < needed:
        raise DataError(
            f"window has {window.n_frames} frames; mode {mode.value} needs {needed}")
    anchor_idx = cfg.obs_len - 1
    anchors = {p: window.track(p)[anchor_idx].copy() for p in peds}
    anchor_tensors = {p: Tensor(anchors[p].reshape(2, 1)) for p in peds}
    state = SceneState.initial(peds, cfg.hidden_dim)
    total = cfg.window_len
    cur_nabs = {}
    cur_abs = {}
    for p in peds:
        pos0 = window.track(p)[0]
        cur_abs[p] = Tensor(pos0.reshape(2, 1))
        cur_nabs[p] = Tensor((pos0 - anchors[p]).reshape(2, 1))
    pred_tensors = {p: [] for p in peds}
    trace = [] if record_attention else None
    for t in range(total - 1):
        try:
            predictions, attention = scene_step(
                params, state, cur_nabs, cur_abs, record_attention)
        except dc.NonFiniteError as e:
            raise dc.NonFiniteError(f"rollout step {t}: {e}") from e
        if record_attention:
            trace.append(attention)
        nxt = t + 1
        if nxt < cfg.obs_len:
            for p in peds:
                pos = window.track(p)[nxt]
                cur_abs[p] = Tensor(pos.reshape(2, 1))
                cur_nabs[p] = Tensor((pos - anchors[p]).reshape(2, 1))
        else:
            for p in peds:
                pred_tensors[p].append(predictions[p])
                cur_nabs[p] = predictions[p]
                cur_abs[p] = dc.add(predictions[p], anchor_tensors[p])
    predicted_nabs = {
        p: np.concatenate([pt.values.reshape(1, 2) for pt in pred_tensors[p]], axis=0)
        for p in peds
    }
    predicted_abs = {p: md.nabs_decode(predicted_nabs[p], anchors[p]) for p in peds}
    return RolloutResult(ped_ids=peds, anchors=anchors,
                         predicted_nabs=predicted_nabs, predicted_abs=predicted_abs,
                         attention=trace, pred_tensors=pred_tensors)


def window_truth_nabs(window: TrajectoryWindow) -> dict:
    """Ground-truth prediction-phase offsets, anchored like the rollout's."""
    if window.pred_len == 0 or window.n_frames != window.obs_len + window.pred_len:
        raise DataError("window carries no prediction-phase truth")
    out = {}
    for p in window.ped_ids:
        track = window.track(p)
        out[p] = md.nabs_encode(track, window.anchor_index)[window.obs_len:]
    return out


def l2_loss(result: RolloutResult, truth_nabs: Mapping) -> Tensor:
    """Mean squared Euclidean distance between predicted and true offsets,
    averaged over pedestrians and prediction steps."""
    if set(result.pred_tensors) != set(truth_nabs):
        raise ValueError("loss: prediction and truth pedestrian sets differ")
    terms = []
    count = 0
    for p, preds in result.pred_tensors.items():
        truth = np.asarray(truth_nabs[p], dtype=np.float64)
        if truth.shape != (len(preds), 2):
            raise ValueError(
                f"loss: truth for pedestrian {p!r} has shape {truth.shape}, "
                f"expected {(len(preds), 2)}")
        for k, pred in enumerate(preds):
            d = dc.sub(pred, Tensor(truth[k].reshape(2, 1)))
            terms.append(dc.sum_all(dc.mul(d, d)))
            count += 1
    if count == 0:
        raise ValueError("loss over zero prediction steps")
    acc = terms[0]
    for term in terms[1:]:
        acc = dc.add(acc, term)
    return dc.scale(acc, 1.0 / count)


def train_step(params: ModelParams, opt: dc.AdamState, window: TrajectoryWindow,
               clip_norm: float = CLIP_NORM) -> float:
    """One optimization step on one window; returns the loss value."""
    named = params.tensors()
    with dc.Tape() as tape:
        result = rollout(params, window, RolloutMode.TEACHER_FORCED_OBS)
        loss = l2_loss(result, window_truth_nabs(window))
        dc.backward(tape, loss)
    value = loss.item()
    tensors = list(named.values())
    for t in tensors:
        # parameters outside the active strategy's graph get zero gradient
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
    dc.clip_grad_norm(tensors, clip_norm)
    dc.adam_step(named, opt)
    dc.zero_grads(tensors)
    tape.clear()
    return value


def train_epoch(params: ModelParams, opt: dc.AdamState,
                windows: Sequence[TrajectoryWindow], rng: np.random.Generator,
                clip_norm: float = CLIP_NORM, augment: bool = True) -> float:
    """One pass over the windows in a seeded shuffled order.

    Each window is one mini-batch: rotated about the origin by a fresh
    uniform angle (when augmenting), rolled out, scored, and stepped.
    Returns the mean loss over the epoch.
    """
    if len(windows) == 0:
        raise DataError("training epoch over zero windows")
    order = rng.permutation(len(windows))
    losses = []
    for idx in order:
        w = windows[int(idx)]
        if augment:
            w = rotate_window(w, float(rng.uniform(0.0, 2.0 * math.pi)))
        losses.append(train_step(params, opt, w, clip_norm))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SRALCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file cannot be used."""


class CheckpointCorruptError(CheckpointError):
    """Bad magic, malformed header, or truncated/oversized payload."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    optimizer: Optional[dict]     # lr/beta1/beta2/eps/step plus m/v arrays
    metadata: dict

    def to_params(self, config: Optional[ModelConfig] = None) -> ModelParams:
        """Materialize params, validating shapes against a config.

        Passing a config other than the stored one raises a shape (or
        naming) error identifying the first offending tensor.
        """
        return ModelParams.from_arrays(config or self.config, self.params)

    def to_optimizer(self, params: ModelParams) -> dc.AdamState:
        if self.optimizer is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        o = self.optimizer
        state = dc.AdamState(params.tensors(), lr=o["lr"], beta1=o["beta1"],
                             beta2=o["beta2"], eps=o["eps"])
        state.step = int(o["step"])
        for name in state.m:
            if name not in o["m"]:
                raise CheckpointError(f"optimizer state missing moments for {name!r}")
            state.m[name] = o["m"][name].copy()
            state.v[name] = o["v"][name].copy()
        return state


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a
    partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(path, params: ModelParams, optimizer: Optional[dc.AdamState] = None,
                    metadata: Optional[dict] = None) -> None:
    """Serialize params (and optionally Adam state) using the documented
    byte layout. The write is atomic."""
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, t in params.tensors().items():
        arrays[name] = t.values
    opt_header = None
    if optimizer is not None:
        opt_header = {"lr": optimizer.lr, "beta1": optimizer.beta1,
                      "beta2": optimizer.beta2, "eps": optimizer.eps,
                      "step": optimizer.step}
        for name in params.tensors():
            arrays[f"adam.m.{name}"] = optimizer.m[name]
            arrays[f"adam.v.{name}"] = optimizer.v[name]
    header = {
        "config": params.config.to_dict(),
        "metadata": metadata or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "optimizer": opt_header,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
    blob += header_bytes
    for arr in arrays.values():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file fully before returning; a bad file raises a
    typed error and mutates nothing."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path} is not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}; this build reads "
            f"version {CHECKPOINT_VERSION}")
    if len(blob) < 16 + header_len:
        raise CheckpointCorruptError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{path} has a malformed header: {e}") from e
    for key in ("config", "metadata", "arrays"):
        if key not in header:
            raise CheckpointCorruptError(f"{path} header lacks {key!r}")
    offset = 16 + header_len
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CheckpointCorruptError(
                f"{path} is truncated inside array {entry['name']!r}")
        flat = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset)
        arrays[entry["name"]] = flat.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointCorruptError(f"{path} has {len(blob) - offset} trailing bytes")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as e:
        raise CheckpointCorruptError(f"{path} has an invalid config: {e}") from e
    params = OrderedDict(
        (n, a) for n, a in arrays.items() if not n.startswith("adam."))
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = dict(header["optimizer"])
        optimizer["m"] = {n[len("adam.m."):]: a for n, a in arrays.items()
                          if n.startswith("adam.m.")}
        optimizer["v"] = {n[len("adam.v."):]: a for n, a in arrays.items()
                          if n.startswith("adam.v.")}
    return Checkpoint(config=config, params=params, optimizer=optimizer,
                      metadata=dict(header["metadata"]))
