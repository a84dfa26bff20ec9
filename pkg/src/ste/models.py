"""Coarse-to-fine erasing generator and its loss stack.

The generator runs two encoder-decoder stages. The coarse stage consumes
the synthetic image concatenated with its mask and hallucinates a rough
erasure; the refinement stage consumes the input concatenated with the
coarse output and produces the refined image, a soft mask prediction, and
the bottleneck feature map that the text discriminator reads.

The triplet erasure loss pulls the refined output toward ground truth
while pushing it away from the coarse output:

    L_te = |i_r - gt|_1 / (|i_r - gt|_1 + |i_r - i_c|_1**gamma + eps)

All L1 terms are means, so losses are resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, InvalidArgumentError, NumericError

TEL_EPS = 1e-8
DICE_EPS = 1.0

ORIENT_AS_PRINTED = "as-printed"
ORIENT_COMPLEMENT = "complement"


@dataclass
class ErasePass:
    i_c: nn.Tensor       # coarse output, sigmoid-bounded
    i_r: nn.Tensor       # refined output, sigmoid-bounded
    m_pred: nn.Tensor    # soft mask in [0,1]
    g_feat: nn.Tensor    # refinement bottleneck features (B, C, H/8, W/8)


@dataclass
class LossWeights:
    l_adv: float = 0.1       # lambda1
    l_rec: float = 1.0       # lambda2
    l_perc: float = 0.0      # lambda3, out of scope, must stay 0
    l_sty: float = 0.0       # lambda4, out of scope, must stay 0
    l_mask: float = 1.0      # lambda5
    l_te: float = 2.0        # lambda6
    gamma: float = 2.0
    coarse_rec: float = 0.5  # weight of the coarse composite inside L_rec

    def __post_init__(self):
        if self.l_perc != 0.0 or self.l_sty != 0.0:
            raise ConfigError("perceptual/style losses are out of scope; weights must be 0")
        if self.gamma < 1.0:
            raise ConfigError("gamma must be >= 1")
        for name in ("l_adv", "l_rec", "l_mask", "l_te"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


class EraseGenerator:
    """Two-stage generator; channels configurable for small-scale checks."""

    def __init__(self, channels=(16, 32, 64), rng=None, dtype=np.float32):
        self.channels = tuple(channels)
        self.params = nn.ParamSet()
        rng = rng or np.random.default_rng(0)
        c1, c2, c3 = self.channels

        def conv(name, cout, cin, k=3):
            self.params.add(f"{name}_w", nn.conv_init(rng, cout, cin, k), dtype=dtype)
            self.params.add(f"{name}_b", np.zeros(cout), dtype=dtype)

        conv("c_d1", c1, 4)
        conv("c_d2", c2, c1)
        conv("c_d3", c3, c2)
        conv("c_u1", c2, c3)
        conv("c_u2", c1, c2)
        conv("c_u3", 3, c1)
        conv("r_d1", c1, 6)
        conv("r_d2", c2, c1)
        conv("r_d3", c3, c2)
        conv("r_u1", c2, c3)
        conv("r_u2", c1, c2)
        conv("r_u3", 3, c1)
        conv("r_mask", 1, c1, k=1)

    def _conv(self, name, x, stride=1):
        return nn.conv2d(x, self.params[f"{name}_w"], self.params[f"{name}_b"], stride=stride)

    def _encode(self, prefix, x):
        d1 = nn.leaky_relu(self._conv(f"{prefix}_d1", x, stride=2))
        d2 = nn.leaky_relu(self._conv(f"{prefix}_d2", d1, stride=2))
        d3 = nn.leaky_relu(self._conv(f"{prefix}_d3", d2, stride=2))
        return d3

    def forward(self, i_syn, m_syn) -> ErasePass:
        """i_syn: (B,3,H,W); m_syn: (B,1,H,W); H and W divisible by 8."""
        i_syn = nn.as_tensor(i_syn)
        m_syn = nn.as_tensor(m_syn)
        if i_syn.data.ndim != 4 or i_syn.shape[1] != 3:
            raise InvalidArgumentError(f"i_syn must be (B,3,H,W), got {i_syn.shape}")
        if m_syn.shape != (i_syn.shape[0], 1, i_syn.shape[2], i_syn.shape[3]):
            raise InvalidArgumentError(f"m_syn shape {m_syn.shape} does not match {i_syn.shape}")
        if i_syn.shape[2] % 8 or i_syn.shape[3] % 8:
            raise InvalidArgumentError("spatial dims must be divisible by 8")

        bottleneck = self._encode("c", nn.concat([i_syn, m_syn], axis=1))
        u1 = nn.leaky_relu(self._conv("c_u1", nn.upsample2x(bottleneck)))
        u2 = nn.leaky_relu(self._conv("c_u2", nn.upsample2x(u1)))
        i_c = nn.sigmoid(self._conv("c_u3", nn.upsample2x(u2)))

        g_feat = self._encode("r", nn.concat([i_syn, i_c], axis=1))
        r1 = nn.leaky_relu(self._conv("r_u1", nn.upsample2x(g_feat)))
        r2 = nn.leaky_relu(self._conv("r_u2", nn.upsample2x(r1)))
        dec = nn.upsample2x(r2)            # shared full-res decoder feature
        i_r = nn.sigmoid(self._conv("r_u3", dec))
        m_pred = nn.sigmoid(self._conv("r_mask", dec))
        return ErasePass(i_c=i_c, i_r=i_r, m_pred=m_pred, g_feat=g_feat)


def composite(i_syn, i_r, m_syn):
    """I_pred = M*i_syn + (1-M)*i_r (the as-printed orientation).

    For the complement orientation (model output inside the mask), call
    with the first two arguments swapped; ``composite_oriented`` does so.
    """
    i_syn = nn.as_tensor(i_syn)
    i_r = nn.as_tensor(i_r)
    m_syn = nn.as_tensor(m_syn)
    return nn.add(nn.mul(m_syn, i_syn), nn.mul(nn.sub(1.0, m_syn), i_r))


def composite_oriented(i_syn, i_r, m_syn, orientation=ORIENT_COMPLEMENT):
    if orientation == ORIENT_AS_PRINTED:
        return composite(i_syn, i_r, m_syn)
    if orientation == ORIENT_COMPLEMENT:
        return composite(i_r, i_syn, m_syn)
    raise InvalidArgumentError(f"unknown composite orientation {orientation!r}")


def tel_loss(i_r, i_c, gt, gamma=2.0):
    """Triplet erasure loss; 0 when refined == gt, approaches 1 when i_r == i_c != gt."""
    near = nn.l1_distance(i_r, gt)
    far = nn.l1_distance(i_r, i_c)
    return nn.div(near, nn.add(nn.add(near, nn.pow_const(far, gamma)), TEL_EPS))


def dice_loss(pred, target, eps=DICE_EPS):
    """1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps)."""
    pred = nn.as_tensor(pred)
    target = nn.as_tensor(target)
    inter = nn.sum_all(nn.mul(pred, target))
    denom = nn.add(nn.add(nn.sum_all(pred), nn.sum_all(target)), eps)
    return nn.sub(1.0, nn.div(nn.add(nn.mul(inter, 2.0), eps), denom))


@dataclass
class LossBreakdown:
    l_adv: float
    l_rec: float
    l_mask: float
    l_te: float
    total: float
    extra: dict = field(default_factory=dict)


def total_loss(pass_: ErasePass, i_syn, m_syn, gt, weights: LossWeights, adv_term,
               orientation=ORIENT_COMPLEMENT):
    """Weighted generator objective; returns (scalar tensor, breakdown).

    L_rec covers the refined composite plus a down-weighted coarse composite;
    L_m is the dice of the predicted mask against the synthetic mask.
    Perceptual/style weights are pinned to zero.
    """
    i_syn = nn.as_tensor(i_syn)
    m_syn = nn.as_tensor(m_syn)
    gt = nn.as_tensor(gt)
    i_pred = composite_oriented(i_syn, pass_.i_r, m_syn, orientation)
    i_pred_coarse = composite_oriented(i_syn, pass_.i_c, m_syn, orientation)
    rec_main = nn.l1_distance(i_pred, gt)
    rec_coarse = nn.l1_distance(i_pred_coarse, gt)
    l_rec = nn.add(rec_main, nn.mul(rec_coarse, weights.coarse_rec))
    l_mask = dice_loss(pass_.m_pred, m_syn)
    l_te = tel_loss(pass_.i_r, pass_.i_c, gt, weights.gamma)
    adv = nn.as_tensor(adv_term)

    total = nn.add(
        nn.add(nn.mul(adv, weights.l_adv), nn.mul(l_rec, weights.l_rec)),
        nn.add(nn.mul(l_mask, weights.l_mask), nn.mul(l_te, weights.l_te)),
    )
    terms = {
        "l_adv": adv.item(), "l_rec": l_rec.item(), "l_mask": l_mask.item(),
        "l_te": l_te.item(), "total": total.item(),
    }
    for name, val in terms.items():
        if not np.isfinite(val):
            raise NumericError(f"loss term {name} is not finite ({val})")
    breakdown = LossBreakdown(
        l_adv=terms["l_adv"], l_rec=terms["l_rec"], l_mask=terms["l_mask"],
        l_te=terms["l_te"], total=terms["total"],
        extra={"rec_main": rec_main.item(), "rec_coarse": rec_coarse.item()},
    )
    return total, breakdown
