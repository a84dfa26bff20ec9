"""Image-aware style policy: state encoding, sequential sampling, REINFORCE.

The policy observes a fixed 64-dim image descriptor (histograms, edge
densities, global stats, annotation stats) instead of pretrained features.
A two-layer LSTM unrolls once per style element; step n consumes the
projected state concatenated with an embedding of the previous decision
and emits a softmax over element n's choices. Hierarchy-inactive elements
are not sampled: they carry the sentinel choice, feed a dedicated
"inactive" embedding forward (so their slots can never influence the
recurrence), and contribute nothing to the gradient.

The update follows the masked score-function estimator: the ascent
direction is mean over samples m and elements n of H[n,m] * R[m] *
grad log p[n,m], applied through Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import style as st
from .errors import ContractError, InvalidArgumentError
from .image import sobel_magnitude, validate_image

STATE_DIM = 64
HIDDEN = 64
EMBED = 16
STATE_PROJ = 16
SOBEL_MAX = 4.0 * np.sqrt(2.0)   # max Sobel magnitude on [0,1] images


def encode_state(img, annotations=()):
    """Deterministic 64-dim descriptor in [0,1].

    Layout: 3x8 intensity histograms | 4x4 Sobel edge-density grid |
    per-channel mean and std | annotation count, annotation area fraction |
    zero padding.
    """
    img = validate_image(img)
    if img.shape[2] != 3:
        raise InvalidArgumentError("policy state expects 3-channel images")
    h, w = img.shape[:2]
    feats = []
    for c in range(3):
        hist, _ = np.histogram(img[:, :, c], bins=8, range=(0.0, 1.0))
        feats.append(hist / (h * w))
    gray = img.mean(axis=2)
    mag = sobel_magnitude(gray) / SOBEL_MAX
    ys = np.linspace(0, h, 5).astype(int)
    xs = np.linspace(0, w, 5).astype(int)
    grid = [mag[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean()
            for i in range(4) for j in range(4)]
    feats.append(np.asarray(grid))
    feats.append(img.reshape(-1, 3).mean(axis=0))
    feats.append(img.reshape(-1, 3).std(axis=0) * 2.0)
    area = sum((a.bbox[2] - a.bbox[0]) * (a.bbox[3] - a.bbox[1]) for a in annotations)
    feats.append(np.asarray([min(len(annotations) / 16.0, 1.0),
                             min(area / (h * w), 1.0)]))
    vec = np.concatenate(feats)
    out = np.zeros(STATE_DIM, dtype=np.float32)
    out[:len(vec)] = np.clip(vec, 0.0, 1.0)
    return out


@dataclass(frozen=True)
class DifficultyState:
    l_mean: float = 0.0
    momentum: float = 0.99
    alpha: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in (0,1)")
        if self.alpha <= 1.0:
            raise InvalidArgumentError("alpha must be > 1")
        if self.l_mean < 0:
            raise InvalidArgumentError("l_mean must be >= 0")


def r_diff(loss_value, d: DifficultyState):
    """Difficulty reward -|1 - exp(L - alpha*l_mean)|; peaks at L = alpha*l_mean."""
    if loss_value < 0:
        raise InvalidArgumentError("loss must be >= 0")
    return -abs(1.0 - np.exp(loss_value - d.alpha * d.l_mean))


def update_l_mean(d: DifficultyState, batch_loss):
    """Exponential moving average of the training loss."""
    if batch_loss < 0:
        raise InvalidArgumentError("batch loss must be >= 0")
    return replace(d, l_mean=d.momentum * d.l_mean + (1.0 - d.momentum) * batch_loss)


def combine_rewards(r_real_arr, r_diff_arr, alpha1=1.0, alpha2=1.0):
    """Z-score both reward arrays over the batch, then weighted sum."""
    r_real_arr = np.asarray(r_real_arr, dtype=np.float64)
    r_diff_arr = np.asarray(r_diff_arr, dtype=np.float64)
    if r_real_arr.shape != r_diff_arr.shape or r_real_arr.ndim != 1:
        raise InvalidArgumentError("reward arrays must be equal-length vectors")
    if len(r_real_arr) < 2:
        raise ContractError("reward normalization needs a batch of at least 2")

    def zscore(x):
        return (x - x.mean()) / max(float(x.std()), 1e-6)

    return alpha1 * zscore(r_real_arr) + alpha2 * zscore(r_diff_arr)


@dataclass
class ReinforceBatch:
    states: np.ndarray       # (M, 64)
    choices: np.ndarray      # (M, N) int, INACTIVE sentinel on masked slots
    log_probs: np.ndarray    # (M, N), zeros on masked slots
    hierarchy: np.ndarray    # (M, N) in {0,1}
    r_real: np.ndarray       # (M,)
    r_diff: np.ndarray       # (M,)
    rewards: np.ndarray      # (M,) combined and normalized

    def __post_init__(self):
        m = self.states.shape[0]
        if m < 1:
            raise ContractError("batch size must be >= 1")
        if np.any(self.log_probs > 1e-6):
            raise ContractError("log-probs must be <= 0")


class PolicyNet:
    """Two-layer LSTM controller over the style space."""

    def __init__(self, space: st.StyleSpace, rng=None, dtype=np.float32):
        self.space = space
        self.params = nn.ParamSet()
        rng = rng or np.random.default_rng(0)
        n = len(space)
        # embedding rows: (element, choice) pairs, one inactive row per
        # element, and a start row fed into step 0
        self.embed_rows = n * st.MAX_CHOICES + n + 1
        self.params.add("state_w", nn.linear_init(rng, STATE_DIM, STATE_PROJ), dtype=dtype)
        self.params.add("state_b", np.zeros(STATE_PROJ), dtype=dtype)
        self.params.add("embed", rng.uniform(-0.08, 0.08, size=(self.embed_rows, EMBED)), dtype=dtype)
        for layer, n_in in ((1, STATE_PROJ + EMBED), (2, HIDDEN)):
            wx, wh, b = nn.lstm_init(rng, n_in, HIDDEN)
            self.params.add(f"lstm{layer}_wx", wx, dtype=dtype)
            self.params.add(f"lstm{layer}_wh", wh, dtype=dtype)
            self.params.add(f"lstm{layer}_b", b, dtype=dtype)
        for i, e in enumerate(space.elements):
            self.params.add(f"head{i}_w", nn.linear_init(rng, HIDDEN, e.n_choices), dtype=dtype)
            self.params.add(f"head{i}_b", np.zeros(e.n_choices), dtype=dtype)

    # embedding row indexing
    def _choice_row(self, element, choice):
        return element * st.MAX_CHOICES + choice

    def _inactive_row(self, element):
        return len(self.space) * st.MAX_CHOICES + element

    @property
    def _start_row(self):
        return self.embed_rows - 1

    # ------------------------------------------------------------------
    # fast numpy forward (sampling path)

    def _np(self, name):
        return self.params[name].data

    def sample_style(self, state, rng, greedy=False):
        """Sample a style vector; returns (StyleVector, per-element log-probs)."""
        state = np.asarray(state, dtype=np.float32)
        if state.shape != (STATE_DIM,):
            raise InvalidArgumentError(f"state must be ({STATE_DIM},), got {state.shape}")
        proj = state[None, :] @ self._np("state_w") + self._np("state_b")
        h1 = np.zeros((1, HIDDEN), dtype=np.float32)
        c1 = np.zeros((1, HIDDEN), dtype=np.float32)
        h2 = np.zeros((1, HIDDEN), dtype=np.float32)
        c2 = np.zeros((1, HIDDEN), dtype=np.float32)
        prev_row = self._start_row
        choices = []
        logps = np.zeros(len(self.space), dtype=np.float64)
        for i, elem in enumerate(self.space.elements):
            x = np.concatenate([proj, self._np("embed")[prev_row][None, :]], axis=1)
            h1, c1 = _np_lstm(x, h1, c1, self._np("lstm1_wx"), self._np("lstm1_wh"), self._np("lstm1_b"))
            h2, c2 = _np_lstm(h1, h2, c2, self._np("lstm2_wx"), self._np("lstm2_wh"), self._np("lstm2_b"))
            logits = h2 @ self._np(f"head{i}_w") + self._np(f"head{i}_b")
            logp = _np_log_softmax(logits[0])
            active = st.active_elements(self.space, choices + [0])[i]
            if not active:
                choices.append(st.INACTIVE)
                prev_row = self._inactive_row(i)
                continue
            if greedy:
                c = int(np.argmax(logp))
            else:
                probs = np.exp(logp)
                probs = probs / probs.sum()
                c = int(np.searchsorted(np.cumsum(probs), rng.random()))
                c = min(c, elem.n_choices - 1)
            choices.append(c)
            logps[i] = logp[c]
            prev_row = self._choice_row(i, c)
        seed = int(rng.integers(2 ** 31 - 1))
        return st.StyleVector(tuple(choices), seed), logps

    # ------------------------------------------------------------------
    # graph forward (update path)

    def log_prob_graph(self, states, choices, hierarchy):
        """Rebuild log p[m, n] as graph nodes for the sampled choices.

        Inactive slots contribute a constant zero and feed the inactive
        embedding forward, exactly like the sampling path.
        """
        m = states.shape[0]
        states_t = nn.Tensor(states.astype(np.float32))
        proj = nn.add(nn.matmul(states_t, self.params["state_w"]), self.params["state_b"])
        zeros = nn.Tensor(np.zeros((m, HIDDEN), dtype=np.float32))
        h1 = c1 = h2 = c2 = zeros
        prev_rows = np.full(m, self._start_row, dtype=np.int64)
        per_element = []
        for i, elem in enumerate(self.space.elements):
            emb = nn.take_rows(self.params["embed"], prev_rows)
            x = nn.concat([proj, emb], axis=1)
            h1, c1 = nn.lstm_cell(x, h1, c1, self.params["lstm1_wx"],
                                  self.params["lstm1_wh"], self.params["lstm1_b"])
            h2, c2 = nn.lstm_cell(h1, h2, c2, self.params["lstm2_wx"],
                                  self.params["lstm2_wh"], self.params["lstm2_b"])
            logits = nn.add(nn.matmul(h2, self.params[f"head{i}_w"]), self.params[f"head{i}_b"])
            logp = nn.log_softmax(logits, axis=1)
            # the hierarchy mask, not the stored value, decides activity:
            # inactive slots must be indistinguishable whatever they carry
            act = hierarchy[:, i] > 0
            col = np.where(act, np.maximum(choices[:, i], 0), 0)
            picked = nn.select_columns(logp, col)
            per_element.append(nn.mul(picked, nn.Tensor(act.astype(np.float32))))
            choice_rows = np.asarray(
                [self._choice_row(i, max(int(c), 0)) for c in choices[:, i]], dtype=np.int64)
            prev_rows = np.where(act, choice_rows, self._inactive_row(i))
        return per_element

    def reinforce_update(self, batch: ReinforceBatch, lr):
        """One masked REINFORCE ascent step through Adam."""
        m, n = batch.choices.shape
        per_element = self.log_prob_graph(batch.states, batch.choices, batch.hierarchy)
        rewards = nn.Tensor(batch.rewards.astype(np.float32))
        acc = None
        for picked in per_element:
            term = nn.sum_all(nn.mul(picked, rewards))
            acc = term if acc is None else nn.add(acc, term)
        # ascend the reward: minimize the negated surrogate
        loss = nn.mul(acc, -1.0 / (m * n))
        self.params.zero_grads()
        loss.backward()
        nn.adam_step(self.params, lr)
        return float(loss.item())


def _np_lstm(x, h, c, wx, wh, b):
    gates = x @ wx + h @ wh + b
    hidden = h.shape[1]
    i = _np_sigmoid(gates[:, :hidden])
    f = _np_sigmoid(gates[:, hidden:2 * hidden])
    g = np.tanh(gates[:, 2 * hidden:3 * hidden])
    o = _np_sigmoid(gates[:, 3 * hidden:])
    c2 = f * c + i * g
    h2 = o * np.tanh(c2)
    return h2, c2


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _np_log_softmax(x):
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())
