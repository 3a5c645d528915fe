"""Shared test utilities: independent oracles and scene builders.

The oracles here are deliberately written from scratch with plain numpy
(straight-line code, no shared helpers from the package) so they can
disagree with the implementation if it is wrong.
"""

import numpy as np

from sralstm.data import TrajectoryWindow

REL_FLOOR = 0.01  # denominators below this are treated as this


def rel_err(a, b) -> float:
    """Worst-case relative error with a floor on the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / denom))


def fd_grad(evaluate, values: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array.

    evaluate() must recompute the scalar from the current contents of
    values; entries are perturbed in place and restored.
    """
    grad = np.zeros_like(values)
    it = np.nditer(values, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        saved = values[idx]
        values[idx] = saved + h
        plus = evaluate()
        values[idx] = saved - h
        minus = evaluate()
        values[idx] = saved
        grad[idx] = (plus - minus) / (2.0 * h)
        it.iternext()
    return grad


def fd_check(evaluate, tensor, h: float = 1e-5) -> float:
    """rel_err between tensor.grad and finite differences of evaluate()."""
    assert tensor.grad is not None, "tensor has no gradient to check"
    return rel_err(tensor.grad, fd_grad(evaluate, tensor.values, h))


# ---------------------------------------------------------------------------
# scripted re-evaluation oracles

def oracle_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def oracle_affine_relu(w, x, b):
    pre = np.asarray(w) @ np.asarray(x) + np.asarray(b)
    return np.where(pre > 0.0, pre, 0.0)


def oracle_softmax(logits):
    """Plain exp-normalize, no masking, no shift."""
    e = np.exp(np.asarray(logits, dtype=np.float64))
    return e / e.sum()


def oracle_lstm_cell(wi, wf, wg, wo, bi, bf, bg, bo, x, h, c):
    """One LSTM cell step over the stacked [x; h] input, straight numpy."""
    xh = np.concatenate([np.asarray(x), np.asarray(h)], axis=0)
    i = oracle_sigmoid(wi @ xh + bi)
    f = oracle_sigmoid(wf @ xh + bf)
    g = np.tanh(wg @ xh + bg)
    o = oracle_sigmoid(wo @ xh + bo)
    c_new = f * np.asarray(c) + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def oracle_lstm_from_gates(gates, x, h, c):
    return oracle_lstm_cell(
        gates.wi.values, gates.wf.values, gates.wg.values, gates.wo.values,
        gates.bi.values, gates.bf.values, gates.bg.values, gates.bo.values,
        x, h, c)


# ---------------------------------------------------------------------------
# window builders

def window_from_tracks(tracks, obs_len: int = 8, pred_len: int = 12,
                       name: str = "toy", start: int = 0) -> TrajectoryWindow:
    """Build a window directly from a list of (T, 2) arrays, ids 1..P."""
    positions = np.stack([np.asarray(t, dtype=np.float64) for t in tracks])
    assert positions.shape[1] == obs_len + pred_len
    return TrajectoryWindow(scene_name=name, start_frame=start,
                            ped_ids=list(range(1, len(tracks) + 1)),
                            positions=positions, obs_len=obs_len,
                            pred_len=pred_len)


def constant_velocity_tracks(n_peds: int, n_frames: int, seed: int = 0,
                             dt: float = 0.4):
    """Straight-line walkers with seeded random origins and velocities."""
    rng = np.random.default_rng(seed)
    tracks = []
    for _ in range(n_peds):
        origin = rng.uniform(-4.0, 4.0, size=2)
        velocity = rng.uniform(-1.5, 1.5, size=2)
        t = np.arange(n_frames)[:, None] * dt
        tracks.append(origin[None, :] + t * velocity[None, :])
    return tracks


def random_walk_window(n_peds: int, seed: int, obs_len: int = 8,
                       pred_len: int = 12) -> TrajectoryWindow:
    """Smooth random-walk tracks; enough structure for gradient checks."""
    rng = np.random.default_rng(seed)
    n = obs_len + pred_len
    tracks = []
    for _ in range(n_peds):
        steps = rng.normal(0.0, 0.35, size=(n, 2))
        track = np.cumsum(steps, axis=0) + rng.uniform(-3.0, 3.0, size=2)
        tracks.append(track)
    return window_from_tracks(tracks, obs_len, pred_len, name=f"walk-{seed}")
